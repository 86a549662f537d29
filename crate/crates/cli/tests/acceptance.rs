//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fail.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loanstate::analysis::{
    interaction2, interaction3, leave_one_out_report, pair_scan, prefilter, scan_columns, sensitivities, triple_scan,
    ConditioningSet, ProbeMode, TripleScheme,
};
use loanstate::evalmetrics::{auc, transition_auc};
use loanstate::network::{
    backward_batch, forward_batch, init_params, input_gradient_batch, Activation, Architecture, EnsembleModel,
    ForwardMode, Layer, MlpParams, Penalty, TransitionModel,
};
use loanstate::pipeline::{prepare, Dataset, FeatureSchema, FieldSpec, NormalizationStats, SourceGroup, SplitConfig};
use loanstate::risk::{
    loss_weight, multi_period_frozen, noncurrent_curve, pool_normal, pool_poisson, portfolio_comparison_curve,
    portfolio_loss, rank_by_scores, realized_outcomes, simulate_pool_mc, CovariateEvolver, LoanOutcome, PoolLoan,
    SimConfig,
};
use loanstate::synth::{generate_panel, synthetic_schema, SyntheticConfig};
use loanstate::trainer::{dataset_loss, nll_loss, train_on_dataset, TrainConfig};
use loanstate::{is_legal_transition, StateIndex, K};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Verdict, Duration)> = Vec::new();
    // Optional comma-separated subset, e.g. ACCEPTANCE_ONLY=3,5
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&mut *f))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                verdict(false, format!("panicked: {msg}"))
            });
        let d = t.elapsed();
        println!(
            "criterion {n:>2} [{}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            d.as_secs_f64()
        );
        results.push((n, name, v, d));
    };
    let mut fits: Option<Vec<SeedFit>> = None;
    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "probability conservation", &mut probability_conservation);
    run(3, "likelihood sanity", &mut || {
        let f = fits.get_or_insert_with(fit_all_seeds);
        likelihood_sanity(f)
    });
    run(4, "synthetic recovery", &mut || synthetic_recovery(fits.get_or_insert_with(fit_all_seeds)));
    run(5, "interaction oracles", &mut || interaction_oracles(fits.get_or_insert_with(fit_all_seeds)));
    run(6, "leave-one-out", &mut || leave_one_out(fits.get_or_insert_with(fit_all_seeds)));
    run(7, "multi-period correctness", &mut multi_period);
    run(8, "pool-level distribution", &mut pool_distribution);
    run(9, "portfolio machinery", &mut portfolio_machinery);
    run(10, "AUC correctness", &mut auc_correctness);
    run(11, "determinism", &mut determinism);
    run(12, "end-to-end demo", &mut end_to_end);
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed,
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

// ------------------------------------------------------------------ 1

fn rel_err(a: f64, b: f64) -> f64 {
    // Components below the floor are compared absolutely.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn hidden_pattern(p: &MlpParams, x: ArrayView2<'_, f64>) -> Vec<bool> {
    let t = forward_batch(p, x, ForwardMode::Infer).unwrap();
    t.pre[..t.pre.len() - 1].iter().flat_map(|z| z.iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
}

fn data_loss(p: &MlpParams, x: ArrayView2<'_, f64>, targets: &[usize], lambda: f64) -> f64 {
    let probs = p.predict_batch(x);
    let nll = targets.iter().enumerate().map(|(i, &t)| -probs[[i, t]].ln()).sum::<f64>() / targets.len() as f64;
    nll + lambda * p.layers.iter().map(|l| l.w.iter().map(|w| w * w).sum::<f64>()).sum::<f64>()
}

/// Weight `(r, c)` of layer `l`, or its bias `r` when `c` is one past the last column.
fn param(p: &mut MlpParams, l: usize, r: usize, c: usize) -> &mut f64 {
    let layer = &mut p.layers[l];
    if c < layer.w.ncols() {
        &mut layer.w[[r, c]]
    } else {
        &mut layer.b[r]
    }
}

fn random_network(rng: &mut ChaCha8Rng, act: Activation, d: usize) -> MlpParams {
    let depth = rng.random_range(1..=5);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=32)).collect();
    let mut p = init_params(&Architecture::new(d, hidden, act), rng.random()).unwrap();
    for l in &mut p.layers {
        l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    p
}

/// Fourth-order central difference `f'(0)` from `f(-2h), f(-h), f(h), f(2h)`.
fn stencil(f: [f64; 4], h: f64) -> f64 {
    (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)
}

const STEPS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

fn gradient_correctness() -> Verdict {
    let h = 1e-4;
    let lambda = 1e-3;
    let acts = [Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    let (mut worst_param, mut worst_input) = (0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0usize, 0usize);
    for net in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + net);
        let d = rng.random_range(3..=10);
        let mut p = random_network(&mut rng, acts[net as usize % 3], d);
        let n = 3;
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..K)).collect();
        let trace = forward_batch(&p, x.view(), ForwardMode::Infer).unwrap();
        let (grads, _) = backward_batch(&p, &trace, &targets, Penalty::weights(lambda)).unwrap();
        let relu = p.arch.activation == Activation::Relu;
        let base_pattern = hidden_pattern(&p, x.view());

        for l in 0..p.layers.len() {
            let (rows, cols) = p.layers[l].w.dim();
            for r in 0..rows {
                for c in 0..=cols {
                    let orig = *param(&mut p, l, r, c);
                    let mut f = [0.0; 4];
                    let mut kink = false;
                    for (k, s) in STEPS.iter().enumerate() {
                        *param(&mut p, l, r, c) = orig + s * h;
                        f[k] = data_loss(&p, x.view(), &targets, lambda);
                        kink |= relu && hidden_pattern(&p, x.view()) != base_pattern;
                    }
                    *param(&mut p, l, r, c) = orig;
                    if kink {
                        skipped += 1;
                        continue;
                    }
                    let an = if c < cols { grads.layers[l].w[[r, c]] } else { grads.layers[l].b[r] };
                    worst_param = worst_param.max(rel_err(an, stencil(f, h)));
                    checked += 1;
                }
            }
        }

        for v in StateIndex::ALL {
            let g = input_gradient_batch(&p, x.view(), v).unwrap();
            for i in 0..n {
                let row = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
                let row_pattern = hidden_pattern(&p, row.view());
                for j in 0..d {
                    let mut f = [0.0; 4];
                    let mut kink = false;
                    for (k, s) in STEPS.iter().enumerate() {
                        let mut xs = row.clone();
                        xs[[0, j]] += s * h;
                        f[k] = p.predict_batch(xs.view())[[0, v.index()]];
                        kink |= relu && hidden_pattern(&p, xs.view()) != row_pattern;
                    }
                    if kink {
                        skipped += 1;
                        continue;
                    }
                    worst_input = worst_input.max(rel_err(g[[i, j]], stencil(f, h)));
                    checked += 1;
                }
            }
        }
    }
    let worst = worst_param.max(worst_input);
    verdict(
        worst < 1e-4,
        format!(
            "max rel err backward {worst_param:.2e}, input_gradient {worst_input:.2e} over {checked} components \
             ({skipped} kink-straddling skipped)"
        ),
    )
}

// ------------------------------------------------------------------ 2

fn probability_conservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let acts = [Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    let d = 12;
    let total = 100_000;
    let per_net = total / 10;
    let (mut sum_err, mut grad_err) = (0.0f64, 0.0f64);
    for net in 0..10 {
        let p = random_network(&mut rng, acts[net % 3], d);
        let x = Array2::from_shape_fn((per_net, d), |_| match rng.random_range(0..4) {
            0 => 1e3,
            1 => -1e3,
            _ => rng.random_range(-3.0..3.0),
        });
        let probs = p.predict_batch(x.view());
        for row in probs.rows() {
            sum_err = sum_err.max((row.sum() - 1.0).abs());
        }
        let mut acc = Array2::<f64>::zeros((per_net, d));
        for v in StateIndex::ALL {
            acc += &input_gradient_batch(&p, x.view(), v).unwrap();
        }
        grad_err = grad_err.max(acc.iter().fold(0.0, |m, g| m.max(g.abs())));
    }
    verdict(
        sum_err <= 1e-12 && grad_err <= 1e-10,
        format!("{total} inputs: max |sum p - 1| = {sum_err:.1e}, max |sum_v grad| = {grad_err:.1e}"),
    )
}

// ------------------------------------------------------------------ shared synthetic fits

struct SeedFit {
    seed: u64,
    schema: FeatureSchema,
    stats: NormalizationStats,
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    deep: MlpParams,
    linear: MlpParams,
    truth_pair: (usize, usize),
    truth_pair_state: StateIndex,
    truth_triple: (usize, usize, usize),
    truth_triple_state: StateIndex,
}

const SEEDS: u64 = 10;
const SCAN_CAP: usize = 10_000;

fn fit_seed(seed: u64) -> SeedFit {
    let cfg = SyntheticConfig {
        num_loans: 8500,
        seed,
        ..Default::default()
    };
    let panel = generate_panel(&cfg).unwrap();
    let schema = synthetic_schema(cfg.num_regions);
    let s0 = cfg.start_period();
    let split = SplitConfig {
        train_end: s0 + 36,
        valid_end: s0 + 41,
        test_end: None,
    };
    let data = prepare(&schema, panel.samples(&schema).unwrap(), &split).unwrap();
    let budget = TrainConfig {
        hidden: vec![64, 64, 64],
        keep_hidden: 1.0,
        l2_lambda: 1e-4,
        lr0: 0.2,
        batch_size: 500,
        epochs: 30,
        samples_per_epoch: 100_000,
        half_life: 20.0,
        seed,
        ..Default::default()
    };
    let deep = train_on_dataset(&budget, &data.train, &data.valid, Default::default()).unwrap().params;
    let linear_cfg = TrainConfig {
        hidden: vec![],
        ..budget
    };
    let linear = train_on_dataset(&linear_cfg, &data.train, &data.valid, Default::default()).unwrap().params;
    let col = |i: usize| schema.column_index(&cfg.truth.features[i]).unwrap();
    let pt = &cfg.truth.pairs[0];
    let tt = &cfg.truth.triples[0];
    SeedFit {
        seed,
        stats: data.stats.clone(),
        train: data.train,
        valid: data.valid,
        test: data.test,
        deep,
        linear,
        truth_pair: sorted2(col(pt.i), col(pt.j)),
        truth_pair_state: pt.next_state,
        truth_triple: sorted3(col(tt.i), col(tt.j), col(tt.k)),
        truth_triple_state: tt.next_state,
        schema,
    }
}

fn sorted2(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn sorted3(a: usize, b: usize, c: usize) -> (usize, usize, usize) {
    let mut v = [a, b, c];
    v.sort_unstable();
    (v[0], v[1], v[2])
}

fn fit_all_seeds() -> Vec<SeedFit> {
    (1..=SEEDS).map(fit_seed).collect()
}

// ------------------------------------------------------------------ 3

fn likelihood_sanity(fits: &[SeedFit]) -> Verdict {
    let d = 9;
    let uniform = MlpParams {
        arch: Architecture::new(d, vec![], Activation::Relu),
        layers: vec![Layer {
            w: Array2::zeros((K, d)),
            b: Array1::zeros(K),
        }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_fn((5000, d), |_| rng.random_range(-10.0..10.0));
    let targets: Vec<usize> = (0..5000).map(|_| rng.random_range(0..K)).collect();
    let uniform_err = (nll_loss(&uniform, x.view(), &targets) - 7f64.ln()).abs();

    let mut sets = 0;
    let mut violations = 0;
    for f in fits {
        let ens = EnsembleModel::new(
            vec![f.deep.clone(), f.linear.clone()],
            vec![f.seed, f.seed],
            f.schema.clone(),
            f.stats.clone(),
        )
        .unwrap();
        for data in [&f.train, &f.valid, &f.test] {
            let e = dataset_loss(&ens, data);
            let mean = (dataset_loss(&f.deep, data) + dataset_loss(&f.linear, data)) / 2.0;
            sets += 1;
            violations += usize::from(e > mean);
        }
    }
    // Random three-member ensembles on random data as well.
    let acts = [Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    let schema =
        FeatureSchema::new(vec![FieldSpec::state(), FieldSpec::numeric("a", SourceGroup::Origination)]).unwrap();
    let ds = schema.d_x();
    for k in 0..20 {
        let members: Vec<MlpParams> = (0..3).map(|m| random_network(&mut rng, acts[(k + m) % 3], ds)).collect();
        let ens = EnsembleModel::new(members.clone(), vec![0; 3], schema.clone(), NormalizationStats::identity(ds)).unwrap();
        let x = Array2::from_shape_fn((2000, ds), |_| rng.random_range(-4.0..4.0));
        let t: Vec<usize> = (0..2000).map(|_| rng.random_range(0..K)).collect();
        let e = nll_loss(&ens, x.view(), &t);
        let mean = members.iter().map(|m| nll_loss(m, x.view(), &t)).sum::<f64>() / 3.0;
        sets += 1;
        violations += usize::from(e > mean);
    }
    verdict(
        uniform_err <= 1e-12 && violations == 0,
        format!("|uniform loss - ln 7| = {uniform_err:.1e}; Jensen held on {}/{sets} evaluation sets", sets - violations),
    )
}

// ------------------------------------------------------------------ 4

fn synthetic_recovery(fits: &[SeedFit]) -> Verdict {
    let (mut loss_wins, mut auc_wins) = (0, 0);
    let mut rows = Vec::new();
    for f in fits {
        let (ld, ll) = (dataset_loss(&f.deep, &f.test), dataset_loss(&f.linear, &f.test));
        let auc_of = |m: &MlpParams| transition_auc(m, &f.test, StateIndex::Current, StateIndex::PaidOff).map(|r| r.auc);
        let (ad, al) = (auc_of(&f.deep).unwrap_or(f64::NAN), auc_of(&f.linear).unwrap_or(f64::NAN));
        loss_wins += usize::from(ld < ll);
        auc_wins += usize::from(ad >= al);
        rows.push(format!("{:.4}/{:.4}", ll - ld, ad - al));
    }
    let n = fits.first().map_or(0, |f| f.train.len() + f.valid.len() + f.test.len());
    verdict(
        loss_wins >= 9 && auc_wins >= 9,
        format!(
            "~{n} loan-months/seed; 3-layer lower test loss {loss_wins}/{SEEDS}, higher Current->PaidOff AUC \
             {auc_wins}/{SEEDS} (loss gain/AUC gain per seed: {})",
            rows.join(" ")
        ),
    )
}

// ------------------------------------------------------------------ 5

/// Logit of `PaidOff` is an arbitrary polynomial in the first three inputs;
/// other logits are zero.
struct PolyLogit {
    d: usize,
    f: fn(&[f64]) -> f64,
}

impl TransitionModel for PolyLogit {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = self.logits_batch(x).unwrap();
        loanstate::network::softmax_rows_inplace(&mut z);
        z
    }

    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, _v: StateIndex) -> Array2<f64> {
        Array2::zeros(x.raw_dim())
    }

    fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        let mut z = Array2::zeros((x.nrows(), K));
        for (i, row) in x.rows().into_iter().enumerate() {
            z[[i, StateIndex::PaidOff.index()]] = (self.f)(row.as_slice().unwrap());
        }
        Some(z)
    }

    fn num_params(&self) -> usize {
        0
    }
}

fn probe_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    Dataset::new(
        x,
        vec![StateIndex::Current; n],
        vec![StateIndex::Current; n],
        vec![0; n],
        (0..n).map(|i| format!("P{i}")).collect(),
    )
    .unwrap()
}

fn interaction_oracles(fits: &[SeedFit]) -> Verdict {
    let data = probe_dataset(500, 4, 5);
    let cond = ConditioningSet::all(&data, StateIndex::Current);
    let v = StateIndex::PaidOff;
    let (di, dj, dk) = (0.1, 0.25, 0.05);
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs() / want.abs().max(1.0));

    // Additively separable: zero in both probe modes.
    let sep = PolyLogit {
        d: 4,
        f: |x| x[0].sin() + 3.0 * x[1] * x[1] - x[2].exp(),
    };
    check(interaction2(&sep, &data, &cond, v, (0, 1), (di, dj), ProbeMode::Logit).unwrap(), 0.0);
    // Bilinear logit: c * di * dj exactly.
    let bil = PolyLogit {
        d: 4,
        f: |x| 1.7 * x[0] * x[1] + x[2],
    };
    check(interaction2(&bil, &data, &cond, v, (0, 1), (di, dj), ProbeMode::Logit).unwrap(), 1.7 * di * dj);
    // Quadratics carry no third-order mixed difference.
    let quad = PolyLogit {
        d: 4,
        f: |x| x[0] * x[1] + 2.0 * x[1] * x[2] - x[0] * x[2] + x[0] * x[0] + 0.3 * x[2] * x[2],
    };
    check(
        interaction3(&quad, &data, &cond, v, (0, 1, 2), (di, dj, dk), ProbeMode::Logit, TripleScheme::EightPoint).unwrap(),
        0.0,
    );
    let tri = PolyLogit {
        d: 4,
        f: |x| -2.3 * x[0] * x[1] * x[2] + x[0] * x[1] + x[3],
    };
    check(
        interaction3(&tri, &data, &cond, v, (0, 1, 2), (di, dj, dk), ProbeMode::Logit, TripleScheme::EightPoint).unwrap(),
        2.3 * di * dj * dk,
    );
    let oracles_ok = worst <= 1e-12;

    let (mut pair_hits, mut triple_hits) = (0, 0);
    let mut ranks = Vec::new();
    for f in fits {
        let deltas = vec![0.1; f.schema.d_x()];
        let cols = scan_columns(&f.schema);
        let cond = ConditioningSet::sampled(&f.test, StateIndex::Current, SCAN_CAP, f.seed);
        let mut pairs =
            pair_scan(&f.deep, &f.test, &cond, f.truth_pair_state, &cols, &deltas, ProbeMode::Probability).unwrap();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
        let pr = pairs.iter().position(|(c, _)| sorted2(c.0, c.1) == f.truth_pair).map_or(0, |p| p + 1);
        let sens = sensitivities(&f.deep, &f.test, &cond, f.truth_triple_state).unwrap();
        let kept = prefilter(&sens, &cols, 20);
        let mut triples = triple_scan(
            &f.deep,
            &f.test,
            &cond,
            f.truth_triple_state,
            &kept,
            &deltas,
            ProbeMode::Probability,
            TripleScheme::EightPoint,
        )
        .unwrap();
        triples.sort_by(|a, b| b.1.total_cmp(&a.1));
        let tr = triples.iter().position(|(c, _)| sorted3(c.0, c.1, c.2) == f.truth_triple).map_or(0, |p| p + 1);
        pair_hits += usize::from(pr == 1);
        triple_hits += usize::from(tr == 1);
        ranks.push(format!("{pr}/{tr}"));
    }
    verdict(
        oracles_ok && pair_hits >= 8 && triple_hits >= 8,
        format!(
            "closed-form probes max err {worst:.1e}; planted pair first {pair_hits}/{SEEDS}, planted triple first \
             {triple_hits}/{SEEDS} (pair/triple rank per seed: {}; 0 = pruned)",
            ranks.join(" ")
        ),
    )
}

// ------------------------------------------------------------------ 6

fn leave_one_out(fits: &[SeedFit]) -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for f in fits {
        let r = leave_one_out_report(&f.deep, &f.test, &f.schema).unwrap();
        let dominant = r.loss("unemployment").unwrap() - r.baseline;
        let noise = r.loss("noise_static").unwrap() - r.baseline;
        wins += usize::from(dominant > noise);
        rows.push(format!("{dominant:.4}/{noise:.4}"));
    }
    verdict(
        wins == SEEDS as usize,
        format!(
            "dropping unemployment hurts more than dropping noise_static in {wins}/{SEEDS} seeds \
             (increase unemployment/noise: {})",
            rows.join(" ")
        ),
    )
}

// ------------------------------------------------------------------ 7

/// Transition rows looked up by the (raw) loan age column, cycling through a
/// fixed table of random legal matrices.
struct AgeTable {
    schema: FeatureSchema,
    age: usize,
    table: Vec<[[f64; K]; K]>,
}

impl TransitionModel for AgeTable {
    fn input_dim(&self) -> usize {
        self.schema.d_x()
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), K));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let u = self.schema.decode_state(&row).unwrap();
            let m = &self.table[row[self.age].round() as usize % self.table.len()];
            for v in 0..K {
                out[[i, v]] = m[u.index()][v];
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

fn random_legal_matrix(rng: &mut ChaCha8Rng) -> [[f64; K]; K] {
    let mut m = [[0.0; K]; K];
    for u in StateIndex::ALL {
        if u.is_absorbing() {
            m[u.index()][u.index()] = 1.0;
            continue;
        }
        for v in StateIndex::ALL {
            if is_legal_transition(u, v) {
                m[u.index()][v.index()] = rng.random_range(0.01..1.0);
            }
        }
        let s: f64 = m[u.index()].iter().sum();
        m[u.index()].iter_mut().for_each(|p| *p /= s);
    }
    m
}

fn brute_force(table: &[[[f64; K]; K]], age0: usize, from: usize, t: usize) -> [f64; K] {
    let mut out = [0.0; K];
    fn walk(table: &[[[f64; K]; K]], age: usize, s: usize, left: usize, w: f64, out: &mut [f64; K]) {
        if left == 0 {
            out[s] += w;
            return;
        }
        let m = &table[age % table.len()];
        for v in 0..K {
            if m[s][v] > 0.0 {
                walk(table, age + 1, v, left - 1, w * m[s][v], out);
            }
        }
    }
    walk(table, age0, from, t, 1.0, &mut out);
    out
}

fn multi_period() -> Verdict {
    let schema = FeatureSchema::new(vec![FieldSpec::state(), FieldSpec::numeric("loan_age", SourceGroup::Origination)])
        .unwrap();
    let d = schema.d_x();
    let age = schema.column_index("loan_age").unwrap();
    let evolver = CovariateEvolver::standard(&schema, NormalizationStats::identity(d), 360);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_bf, mut worst_sum) = (0.0f64, 0.0f64);
    let mut monotone = true;
    for _ in 0..25 {
        let table: Vec<_> = (0..5).map(|_| random_legal_matrix(&mut rng)).collect();
        let model = AgeTable {
            schema: schema.clone(),
            age,
            table: table.clone(),
        };
        let age0 = rng.random_range(0..5usize);
        let mut x = vec![0.0; d];
        x[age] = age0 as f64;
        for t in 1..=4 {
            for clamp in [false, true] {
                let m = multi_period_frozen(&model, &schema, &x, &evolver, t, clamp).unwrap();
                for u in StateIndex::ALL {
                    let bf = brute_force(&table, age0, u.index(), t);
                    for v in 0..K {
                        worst_bf = worst_bf.max((m.rows()[u.index()][v] - bf[v]).abs());
                    }
                }
            }
        }
        let mut prev = multi_period_frozen(&model, &schema, &x, &evolver, 1, true).unwrap();
        for t in 2..=60 {
            let m = multi_period_frozen(&model, &schema, &x, &evolver, t, true).unwrap();
            for u in StateIndex::ALL {
                for v in [StateIndex::PaidOff, StateIndex::REO] {
                    monotone &= m.get(u, v) >= prev.get(u, v) - 1e-15;
                }
            }
            prev = m;
        }
        worst_sum = worst_sum.max(prev.max_row_sum_error());
    }
    verdict(
        worst_bf <= 1e-10 && worst_sum <= 1e-8 && monotone,
        format!(
            "25 random age-varying chains: max |product - path enumeration| (t<=4) {worst_bf:.1e}; max row-sum error \
             at t=60 {worst_sum:.1e}; absorbing columns non-decreasing: {monotone}"
        ),
    )
}

// ------------------------------------------------------------------ 8

/// From `Current`, pays off with the probability held in column `p`; all
/// other states stay put.
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

fn pool_distribution() -> Verdict {
    let schema =
        FeatureSchema::new(vec![FieldSpec::state(), FieldSpec::numeric("p", SourceGroup::Origination)]).unwrap();
    let d = schema.d_x();
    let pc = schema.column_index("p").unwrap();
    let model = PrepayOnly {
        schema: schema.clone(),
        p: pc,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let probs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..0.05)).collect();
    let pool: Vec<PoolLoan> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut x = vec![0.0; d];
            x[pc] = p;
            PoolLoan {
                loan_id: format!("L{i:04}"),
                x,
                state: StateIndex::Current,
                notional: 1.0,
            }
        })
        .collect();
    let paths = 10_000;
    let cfg = SimConfig {
        horizon: 1,
        paths,
        seed: 8,
        clamp: true,
    };
    let mc = simulate_pool_mc(&model, &schema, &pool, &CovariateEvolver::frozen(NormalizationStats::identity(d)), &cfg)
        .unwrap()
        .count_distribution(StateIndex::PaidOff);
    let (pois, norm) = (pool_poisson(&probs).unwrap(), pool_normal(&probs).unwrap());
    let sum_p: f64 = probs.iter().sum();
    let hi = (sum_p + 8.0 * sum_p.sqrt()) as u64;
    let (mut gap_p, mut gap_n) = (0.0f64, 0.0f64);
    for k in 0..=hi {
        gap_p = gap_p.max((pois.pmf(k) - mc.pmf(k)).abs());
        gap_n = gap_n.max((norm.pmf(k) - mc.pmf(k)).abs());
    }
    let se = mc.sd() / (paths as f64).sqrt();
    let z = (mc.mean - sum_p).abs() / se;
    verdict(
        gap_p <= 0.02 && gap_n <= 0.02 && z <= 3.0,
        format!(
            "1000 loans, sum p = {sum_p:.2}: max cell gap Poisson {gap_p:.4}, normal {gap_n:.4}; MC mean {:.2} is \
             {z:.2} standard errors from sum p",
            mc.mean
        ),
    )
}

// ------------------------------------------------------------------ 9

fn portfolio_machinery() -> Verdict {
    let n100 = [100_000.0];
    let w_paid = portfolio_loss(&[LoanOutcome::from_state(StateIndex::PaidOff)], &n100).unwrap();
    let w_reo = portfolio_loss(&[LoanOutcome::from_state(StateIndex::REO)], &n100).unwrap();
    let weights_ok = w_paid == 5_000.0
        && w_reo == 40_000.0
        && loss_weight(&LoanOutcome::from_state(StateIndex::Foreclosure)) == 0.40;

    // Endpoints of the comparison curve, two unrelated networks.
    let cfg = SyntheticConfig {
        num_loans: 1500,
        horizon: 14,
        seed: 90,
        ..Default::default()
    };
    let panel = generate_panel(&cfg).unwrap();
    let schema = synthetic_schema(cfg.num_regions);
    let s0 = cfg.start_period();
    let split = SplitConfig {
        train_end: s0 + 10,
        valid_end: s0 + 11,
        test_end: None,
    };
    let data = prepare(&schema, panel.samples(&schema).unwrap(), &split).unwrap();
    let period = s0 + 11;
    let snapshot = PoolLoan::snapshot(&data.test, period);
    let realized = realized_outcomes(&data.test, &snapshot, period, 1);
    let pool: Vec<PoolLoan> = snapshot.iter().zip(&realized).filter(|(_, r)| r.is_some()).map(|(l, _)| l.clone()).collect();
    let states: Vec<StateIndex> = realized.iter().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_network(&mut rng, Activation::Tanh, schema.d_x());
    let b = random_network(&mut rng, Activation::Relu, schema.d_x());
    let evolver = CovariateEvolver::standard(&schema, data.stats.clone(), 360);
    let n = pool.len();
    let rows = portfolio_comparison_curve(&a, &b, &schema, &pool, &states, 1, &evolver, &[0, n / 2, n]).unwrap();
    let total = states.iter().filter(|s| **s != StateIndex::Current).count();
    let same = portfolio_comparison_curve(&a, &a, &schema, &pool, &states, 1, &evolver, &[n / 3, n / 2]).unwrap();
    let endpoints_ok = rows[0].noncurrent_a == 0
        && rows[0].noncurrent_b == 0
        && rows[2].noncurrent_a == total
        && rows[2].noncurrent_b == total
        && same.iter().all(|r| r.noncurrent_a == r.noncurrent_b);

    // Ground-truth ranking against random ranking, averaged over seeds.
    let grid = 20;
    let mut truth_avg = vec![0.0; grid + 1];
    let mut random_avg = vec![0.0; grid + 1];
    let seeds = 20;
    for seed in 0..seeds {
        let cfg = SyntheticConfig {
            num_loans: 2000,
            horizon: 13,
            seed: 200 + seed,
            ..Default::default()
        };
        let panel = generate_panel(&cfg).unwrap();
        let probs = panel.truth_probs(&cfg.truth).unwrap();
        let month = cfg.horizon - 1;
        let idx: Vec<usize> = (0..panel.rows.len()).filter(|&r| panel.rows[r].month == month).collect();
        let scores: Vec<f64> = idx.iter().map(|&r| probs[r][StateIndex::Current.index()]).collect();
        let ids: Vec<String> = idx.iter().map(|&r| panel.loans[panel.rows[r].loan].loan_id.clone()).collect();
        let outcome: Vec<StateIndex> = idx.iter().map(|&r| panel.rows[r].next_state).collect();
        let order = rank_by_scores(&scores, &ids);
        let mut shuffled: Vec<usize> = (0..idx.len()).collect();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ns: Vec<usize> = (0..=grid).map(|k| k * idx.len() / grid).collect();
        for (k, (t, r)) in noncurrent_curve(&order, &outcome, &ns)
            .into_iter()
            .zip(noncurrent_curve(&shuffled, &outcome, &ns))
            .enumerate()
        {
            truth_avg[k] += t as f64 / seeds as f64;
            random_avg[k] += r as f64 / seeds as f64;
        }
    }
    let dominated = truth_avg.iter().zip(&random_avg).all(|(t, r)| t <= r);
    let mid = grid / 2;
    verdict(
        weights_ok && endpoints_ok && dominated,
        format!(
            "weights $5,000/$40,000 exact: {weights_ok}; endpoints N=0 and N={n} agree ({total} non-current): \
             {endpoints_ok}; truth ranking <= random at all {} grid points: {dominated} (at half pool {:.1} vs {:.1})",
            grid + 1,
            truth_avg[mid],
            random_avg[mid]
        ),
    )
}

// ------------------------------------------------------------------ 10

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn auc_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..300);
        let levels = rng.random_range(2..50) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        worst = worst.max((a - brute_auc(&scores, &labels)).abs());
        for g in [|s: f64| s.exp(), |s: f64| s * s * s + s, |s: f64| (5.0 * s).atan(), |s: f64| 1e6 * s - 3.0] {
            let t: Vec<f64> = scores.iter().map(|&s| g(s)).collect();
            invariant &= auc(&t, &labels).unwrap() == a;
        }
    }
    verdict(
        worst <= 1e-12 && invariant,
        format!("1000 random instances with ties: max |rank - pairwise| {worst:.1e}; monotone invariance exact: {invariant}"),
    )
}

// ------------------------------------------------------------------ 11, 12

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_loanstate")
}

fn demo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/demo").join(format!("{name}.json"))
}

fn cli(out: &Path, config: Option<&Path>, args: &[&str]) -> Result<(), String> {
    let mut c = Command::new(bin());
    c.arg("--out").arg(out).arg("--deterministic").args(args);
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    let o = c.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

/// Every file under `dir`, relative path to contents.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let cfg_dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = cfg_dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let synth = write("synth.json", r#"{"num_loans": 600, "horizon": 20, "seed": 11}"#);
    let prep = write("prepare.json", r#"{"train_end": "2010-01", "valid_end": "2010-04"}"#);
    let train = write(
        "train.json",
        r#"{"ensemble": 2, "train": {"hidden": [16, 16], "epochs": 3, "samples_per_epoch": 5000,
            "batch_size": 250, "num_shards": 4, "monitor_rows": 2000}}"#,
    );
    let sim = write("simulate.json", r#"{"sim": {"horizon": 4, "paths": 50}, "pool_size": 100}"#);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let steps: [(&Path, &str); 4] = [(&synth, "synth"), (&prep, "prepare"), (&train, "train"), (&sim, "simulate")];
        for (c, cmd) in steps {
            if let Err(e) = cli(out.path(), Some(c), &[cmd]) {
                return verdict(false, e);
            }
        }
        runs.push(snapshot(out.path()));
    }
    let differing: Vec<&String> = runs[0].iter().filter(|(k, v)| runs[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    verdict(
        differing.is_empty() && runs[0].len() == runs[1].len(),
        if differing.is_empty() {
            format!("synth, prepare, train (2-member ensemble) and simulate: {} artifacts bit-identical across runs", runs[0].len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn end_to_end() -> Verdict {
    let out = tempfile::tempdir().unwrap();
    let t = Instant::now();
    for cmd in ["synth", "prepare", "train", "eval", "sensitivity", "simulate", "portfolio", "report"] {
        if let Err(e) = cli(out.path(), Some(&demo_config(cmd)).filter(|p| p.exists()).map(|p| p.as_path()), &[cmd]) {
            return verdict(false, e);
        }
    }
    let elapsed = t.elapsed();
    let families = [
        "data/loans.csv",
        "data/performance.csv",
        "prepared/train.bin",
        "prepared/stats.json",
        "model.bin",
        "training_log.csv",
        "eval/eval.json",
        "eval/auc_matrix.csv",
        "eval/roc_current_paidoff.csv",
        "sensitivity/sensitivity_Current_PaidOff.csv",
        "sensitivity/leave_one_out.csv",
        "simulate/pool_paths.csv",
        "simulate/pools.csv",
        "simulate/summary.json",
        "portfolio/curve.csv",
        "portfolio/summary.json",
        "report.txt",
        "report.json",
    ];
    let missing: Vec<&str> = families.iter().copied().filter(|f| !out.path().join(f).exists()).collect();
    let manifests = std::fs::read_dir(out.path().join("manifests")).map_or(0, |d| d.count());
    let loans = std::fs::read_to_string(out.path().join("data/loans.csv")).map_or(0, |s| s.lines().count() - 1);
    verdict(
        missing.is_empty() && manifests >= 7 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{loans}-loan demo pipeline in {:.0}s on {} core(s), {manifests} manifests{}",
            elapsed.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            if missing.is_empty() { String::new() } else { format!("; missing {missing:?}") }
        ),
    )
}
