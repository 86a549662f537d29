use approx::assert_abs_diff_eq;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loanstate::evalmetrics::{auc, lr_statistic, lr_test, pool_gap_stats, transition_auc};
use loanstate::network::{init_params, Activation, Architecture, TransitionModel};
use loanstate::pipeline::{Dataset, FeatureSchema, FieldSpec, NormalizationStats, SourceGroup};
use loanstate::risk::{
    bernoulli_convolution, loss_weight, make_ranked_pools, multi_period_frozen, noncurrent_curve, pool_normal,
    pool_poisson, portfolio_loss, simulate_pool_mc, CovariateEvolver, LoanOutcome, PoolLoan, SimConfig,
};
use loanstate::{StateIndex, K};

/// Current loans pay off with the probability stored in column `p`.
struct PrepayOnly {
    schema: FeatureSchema,
    p: usize,
}

impl TransitionModel for PrepayOnly {
    fn input_dim(&self) -> usize {
        self.schema.d_x()
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), K));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let u = self.schema.decode_state(&row).unwrap();
            if u == StateIndex::Current {
                out[[i, StateIndex::PaidOff.index()]] = row[self.p];
                out[[i, StateIndex::Current.index()]] = 1.0 - row[self.p];
            } else {
                out[[i, u.index()]] = 1.0;
            }
        }
        out
    }

    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, _v: StateIndex) -> Array2<f64> {
        Array2::zeros(x.raw_dim())
    }

    fn num_params(&self) -> usize {
        0
    }
}

fn prepay_pool(probs: &[f64]) -> (PrepayOnly, Vec<PoolLoan>) {
    let schema =
        FeatureSchema::new(vec![FieldSpec::state(), FieldSpec::numeric("p", SourceGroup::Origination)]).unwrap();
    let pc = schema.column_index("p").unwrap();
    let pool = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut x = vec![0.0; schema.d_x()];
            x[pc] = p;
            PoolLoan {
                loan_id: format!("L{i:03}"),
                x,
                state: StateIndex::Current,
                notional: 1.0,
            }
        })
        .collect();
    (PrepayOnly { schema, p: pc }, pool)
}

#[test]
fn monte_carlo_matches_exact_bernoulli_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probs: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..0.3)).collect();
    let (model, pool) = prepay_pool(&probs);
    let d = model.schema.d_x();
    let cfg = SimConfig {
        horizon: 1,
        paths: 100_000,
        seed: 4,
        clamp: true,
    };
    let mc = simulate_pool_mc(&model, &model.schema, &pool, &CovariateEvolver::frozen(NormalizationStats::identity(d)), &cfg)
        .unwrap()
        .count_distribution(StateIndex::PaidOff);
    let exact = bernoulli_convolution(&probs).unwrap();
    let tv: f64 = exact.iter().enumerate().map(|(k, &q)| (q - mc.pmf(k as u64)).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn monte_carlo_is_reproducible_per_seed() {
    let (model, pool) = prepay_pool(&[0.1, 0.4, 0.7]);
    let ev = CovariateEvolver::frozen(NormalizationStats::identity(model.schema.d_x()));
    let cfg = SimConfig {
        horizon: 3,
        paths: 500,
        seed: 1,
        clamp: true,
    };
    let a = simulate_pool_mc(&model, &model.schema, &pool, &ev, &cfg).unwrap();
    let b = simulate_pool_mc(&model, &model.schema, &pool, &ev, &cfg).unwrap();
    assert_eq!(a, b);
    let c = simulate_pool_mc(&model, &model.schema, &pool, &ev, &SimConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a, c);
    for row in &a.counts {
        assert_eq!(row.iter().sum::<u32>(), 3);
    }
}

#[test]
fn closed_forms_have_bernoulli_moments() {
    let probs = [0.01, 0.02, 0.03, 0.04];
    let p = pool_poisson(&probs).unwrap();
    let n = pool_normal(&probs).unwrap();
    assert_abs_diff_eq!(p.mean, 0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(p.variance, 0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(n.variance, 0.01 * 0.99 + 0.02 * 0.98 + 0.03 * 0.97 + 0.04 * 0.96, epsilon = 1e-15);
    assert_abs_diff_eq!(p.pmf(0), (-0.1f64).exp(), epsilon = 1e-15);
    assert!(pool_poisson(&[1.2]).is_err());
}

#[test]
fn frozen_projection_is_a_legal_stochastic_matrix() {
    let schema = FeatureSchema::new(vec![
        FieldSpec::state(),
        FieldSpec::numeric("a", SourceGroup::Origination),
        FieldSpec::numeric("b", SourceGroup::Origination),
    ])
    .unwrap();
    let d = schema.d_x();
    let net = init_params(&Architecture::new(d, vec![6], Activation::Tanh), 2).unwrap();
    let ev = CovariateEvolver::frozen(NormalizationStats::identity(d));
    let x = vec![0.3; d];
    let one = multi_period_frozen(&net, &schema, &x, &ev, 1, true).unwrap();
    for t in [1, 2, 5, 24] {
        let m = multi_period_frozen(&net, &schema, &x, &ev, t, true).unwrap();
        assert!(m.max_row_sum_error() < 1e-12);
        for s in [StateIndex::REO, StateIndex::PaidOff] {
            assert_eq!(m.get(s, s), 1.0);
        }
        // Frozen covariates make the t-step matrix a matrix power.
        let mut pow = one.clone();
        for _ in 1..t {
            pow = pow.matmul(&one);
        }
        for u in StateIndex::ALL {
            for v in StateIndex::ALL {
                assert_abs_diff_eq!(m.get(u, v), pow.get(u, v), epsilon = 1e-12);
            }
        }
    }
    assert_eq!(one.get(StateIndex::DD30, StateIndex::DD90plus), 0.0);
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 20_000;
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let a = auc(&scores, &labels).unwrap();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = n as f64 - pos;
    let se = ((pos + neg + 1.0) / (12.0 * pos * neg)).sqrt();
    assert!((a - 0.5).abs() < 3.0 * se, "{a} vs se {se}");
}

#[test]
fn auc_small_cases() {
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]).unwrap(), 0.0);
    assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn transition_auc_uses_only_rows_in_the_source_state() {
    // Rows in DD30 carry anti-informative scores; they must be ignored.
    let schema =
        FeatureSchema::new(vec![FieldSpec::state(), FieldSpec::numeric("p", SourceGroup::Origination)]).unwrap();
    let pc = schema.column_index("p").unwrap();
    let model = PrepayOnly { schema: schema.clone(), p: pc };
    let rows = [
        (StateIndex::Current, 0.9, StateIndex::PaidOff),
        (StateIndex::Current, 0.1, StateIndex::Current),
        (StateIndex::Current, 0.2, StateIndex::Current),
        (StateIndex::DD30, 0.0, StateIndex::PaidOff),
    ];
    let mut x = Array2::zeros((rows.len(), schema.d_x()));
    for (i, &(s, p, _)) in rows.iter().enumerate() {
        let mut r = vec![0.0; schema.d_x()];
        schema.set_state(&mut r, s);
        r[pc] = p;
        x.row_mut(i).assign(&ndarray::Array1::from(r));
    }
    let data = Dataset::new(
        x,
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.2).collect(),
        vec![0; 4],
        (0..4).map(|i| i.to_string()).collect(),
    )
    .unwrap();
    let roc = transition_auc(&model, &data, StateIndex::Current, StateIndex::PaidOff).unwrap();
    assert_eq!(roc.auc, 1.0);
    assert!(transition_auc(&model, &data, StateIndex::PaidOff, StateIndex::PaidOff).is_none());
}

#[test]
fn likelihood_ratio_reported_scores_imply_a_plausible_sample_size() {
    // A linear-versus-one-layer score of 1.006e8 from average losses .1840
    // and .1680 corresponds to about 3.1 billion in-sample observations.
    let n = (1.006e8 / (2.0 * (0.1840 - 0.1680))) as usize;
    assert!((3.0e9..3.3e9).contains(&(n as f64)), "{n}");
    assert_abs_diff_eq!(lr_statistic(0.1840, 0.1680, n) / 1.006e8, 1.0, epsilon = 1e-6);
    let t = lr_test(0.1840, 0.1680, n, 100, 5000);
    assert_eq!(t.df, 4900);
    assert!(t.p_value.unwrap() < 1e-12);
    assert_eq!(lr_statistic(0.5, 0.4, 10), -lr_statistic(0.4, 0.5, 10));
    assert_eq!(lr_test(0.4, 0.5, 10, 1, 3).p_value, Some(1.0));
    assert_eq!(lr_test(0.4, 0.3, 10, 3, 3).p_value, None);
}

#[test]
fn gap_statistics_by_hand() {
    let g = pool_gap_stats(&[(10.0, 2.0), (5.0, 1.0)], &[12.0, 5.0]).unwrap();
    assert_abs_diff_eq!(g.avg_absolute_gap, 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(g.avg_standardized_gap, 0.5, epsilon = 1e-15);
    let g = pool_gap_stats(&[(3.0, 0.0)], &[4.0]).unwrap();
    assert!(g.avg_standardized_gap.is_infinite());
    assert_eq!(g.infinite_pools, 1);
    assert!(pool_gap_stats(&[], &[]).is_err());
}

#[test]
fn pools_partition_in_key_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let keys: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
    let ids: Vec<String> = (0..2000).map(|i| format!("{i:05}")).collect();
    let p = make_ranked_pools(&keys, &ids, 1000).unwrap();
    assert_eq!(p.pools.len(), 2);
    assert!(!p.last_short);
    let min_first = p.pools[0].iter().map(|&i| keys[i]).fold(f64::INFINITY, f64::min);
    let max_second = p.pools[1].iter().map(|&i| keys[i]).fold(0.0, f64::max);
    assert!(min_first >= max_second);
    let mut all: Vec<usize> = p.pools.concat();
    all.sort_unstable();
    assert_eq!(all, (0..2000).collect::<Vec<_>>());
    assert!(make_ranked_pools(&keys[..1500], &ids[..1500], 1000).unwrap().last_short);
}

#[test]
fn loss_weights_and_curve() {
    use StateIndex::*;
    let o = |s| LoanOutcome::from_state(s);
    assert_eq!(loss_weight(&o(Current)), 0.0);
    assert_eq!(loss_weight(&o(PaidOff)), 0.05);
    assert_eq!(loss_weight(&o(REO)), 0.40);
    assert_abs_diff_eq!(loss_weight(&o(DD60)), 2.0 / 360.0, epsilon = 1e-15);
    let total = portfolio_loss(&[o(PaidOff), o(Foreclosure)], &[100_000.0, 100_000.0]).unwrap();
    assert_abs_diff_eq!(total, 45_000.0, epsilon = 1e-9);
    let realized = [Current, DD30, Current, PaidOff];
    assert_eq!(noncurrent_curve(&[1, 3, 0, 2], &realized, &[0, 1, 2, 4]), vec![0, 1, 2, 2]);
    assert_eq!(noncurrent_curve(&[0, 2, 1, 3], &realized, &[2, 9]), vec![0, 2]);
}
