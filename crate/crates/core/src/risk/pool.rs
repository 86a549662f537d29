use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Discrete, DiscreteCDF, Normal, Poisson};

use super::{one_step_matrix, predict_rows, CovariateEvolver, PoolLoan};
use crate::error::{Error, Result};
use crate::network::TransitionModel;
use crate::pipeline::FeatureSchema;
use crate::state::{StateIndex, TransitionMatrix, K};
use crate::synth::{simulate_macro_from, MacroPath};
use crate::trainer::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    MonteCarlo,
    Poisson,
    Normal,
}

/// Distribution of the number of loans in one target state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub kind: PoolKind,
    pub mean: f64,
    pub variance: f64,
    /// Per-path counts, Monte Carlo only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<u32>,
}

impl CountDistribution {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    /// `P(X = k)`; the normal approximation uses a continuity-corrected cell.
    pub fn pmf(&self, k: u64) -> f64 {
        self.prob_between(k, k)
    }

    /// `P(lo <= X <= hi)`.
    pub fn prob_between(&self, lo: u64, hi: u64) -> f64 {
        if hi < lo {
            return 0.0;
        }
        match self.kind {
            PoolKind::MonteCarlo => {
                let n = self.samples.iter().filter(|&&c| (lo..=hi).contains(&(c as u64))).count();
                n as f64 / self.samples.len().max(1) as f64
            }
            PoolKind::Poisson => {
                if self.mean == 0.0 {
                    return if lo == 0 { 1.0 } else { 0.0 };
                }
                let p = Poisson::new(self.mean).expect("positive mean");
                if lo == hi {
                    p.pmf(lo)
                } else {
                    let below = if lo == 0 { 0.0 } else { p.cdf(lo - 1) };
                    p.cdf(hi) - below
                }
            }
            PoolKind::Normal => {
                let (a, b) = (lo as f64 - 0.5, hi as f64 + 0.5);
                if self.variance == 0.0 {
                    return if a < self.mean && self.mean < b { 1.0 } else { 0.0 };
                }
                let n = Normal::new(self.mean, self.sd()).expect("positive sd");
                n.cdf(b) - n.cdf(a)
            }
        }
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    match probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(i) => Err(Error::InvalidSample(format!("probability {} at loan {i} outside [0, 1]", probs[i]))),
        None => Ok(()),
    }
}

/// Count ~ Poisson(Σ p).
pub fn pool_poisson(probs: &[f64]) -> Result<CountDistribution> {
    check_probs(probs)?;
    let mean: f64 = probs.iter().sum();
    Ok(CountDistribution {
        kind: PoolKind::Poisson,
        mean,
        variance: mean,
        samples: vec![],
    })
}

/// Count ~ Normal(Σ p, Σ p(1-p)).
pub fn pool_normal(probs: &[f64]) -> Result<CountDistribution> {
    check_probs(probs)?;
    Ok(CountDistribution {
        kind: PoolKind::Normal,
        mean: probs.iter().sum(),
        variance: probs.iter().map(|p| p * (1.0 - p)).sum(),
        samples: vec![],
    })
}

/// Exact distribution of a sum of independent Bernoulli variables.
pub fn bernoulli_convolution(probs: &[f64]) -> Result<Vec<f64>> {
    check_probs(probs)?;
    let mut dist = vec![1.0];
    for &p in probs {
        let mut next = vec![0.0; dist.len() + 1];
        for (k, &q) in dist.iter().enumerate() {
            next[k] += q * (1.0 - p);
            next[k + 1] += q * p;
        }
        dist = next;
    }
    Ok(dist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: usize,
    pub paths: usize,
    pub seed: u64,
    /// Zero illegal transitions and renormalize.
    pub clamp: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 12,
            paths: 1000,
            seed: 0,
            clamp: true,
        }
    }
}

/// Simulated state counts at the horizon, one row per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDistribution {
    pub kind: PoolKind,
    pub pool_size: usize,
    pub horizon: usize,
    pub counts: Vec<[u32; K]>,
}

impl PoolDistribution {
    pub fn count_distribution(&self, v: StateIndex) -> CountDistribution {
        let samples: Vec<u32> = self.counts.iter().map(|c| c[v.index()]).collect();
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&c| c as f64).sum::<f64>() / n;
        let variance = if samples.len() > 1 {
            samples.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        CountDistribution {
            kind: PoolKind::MonteCarlo,
            mean,
            variance,
            samples,
        }
    }

    pub fn mean(&self) -> [f64; K] {
        std::array::from_fn(|k| self.count_distribution(StateIndex::ALL[k]).mean)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["path".to_string()];
        header.extend(StateIndex::ALL.iter().map(|s| s.name().to_string()));
        w.write_record(&header)?;
        for (p, c) in self.counts.iter().enumerate() {
            let mut rec = vec![p.to_string()];
            rec.extend(c.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, p: &[f64; K], fallback: StateIndex) -> StateIndex {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (v, &pv) in p.iter().enumerate() {
        if pv > 0.0 {
            acc += pv;
            last = Some(v);
            if u < acc {
                return StateIndex::ALL[v];
            }
        }
    }
    last.map_or(fallback, |v| StateIndex::ALL[v])
}

/// Simulates every loan month by month, `config.paths` times, recording
/// state counts at the horizon.
///
/// Each path has its own seeded stream. When the evolver carries a macro
/// hook, one economy is drawn per path and shared by all loans; rolling
/// counters, when bound, follow each loan's simulated states.
pub fn simulate_pool_mc<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    pool: &[PoolLoan],
    evolver: &CovariateEvolver,
    config: &SimConfig,
) -> Result<PoolDistribution> {
    if config.paths == 0 {
        return Err(Error::config("paths", "must be at least 1"));
    }
    if config.horizon == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    let counts = if evolver.path_dependent() {
        (0..config.paths)
            .into_par_iter()
            .map(|p| simulate_path_dynamic(model, schema, pool, evolver, config, p))
            .collect::<Result<Vec<_>>>()?
    } else {
        // Covariates do not depend on the path: one matrix per loan and month.
        let mats: Vec<Vec<TransitionMatrix>> = pool
            .par_iter()
            .map(|l| {
                let mut x = l.x.clone();
                (0..config.horizon)
                    .map(|s| {
                        if s > 0 {
                            evolver.advance(&mut x);
                        }
                        one_step_matrix(model, schema, &x, config.clamp)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        (0..config.paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, p as u64));
                let mut counts = [0u32; K];
                for (l, m) in pool.iter().zip(&mats) {
                    let mut s = l.state;
                    for mat in m {
                        if s.is_absorbing() {
                            break;
                        }
                        s = draw(&mut rng, mat.row(s), s);
                    }
                    counts[s.index()] += 1;
                }
                counts
            })
            .collect()
    };
    Ok(PoolDistribution {
        kind: PoolKind::MonteCarlo,
        pool_size: pool.len(),
        horizon: config.horizon,
        counts,
    })
}

fn simulate_path_dynamic<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    pool: &[PoolLoan],
    evolver: &CovariateEvolver,
    config: &SimConfig,
    p: usize,
) -> Result<[u32; K]> {
    let seed = derive_seed(config.seed, p as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path: Option<MacroPath> = evolver.macro_hook.as_ref().map(|h| {
        let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        simulate_macro_from(&h.config, &h.start, config.horizon.saturating_sub(1), &mut mrng)
    });
    let mut states: Vec<StateIndex> = pool.iter().map(|l| l.state).collect();
    let mut xs: Vec<Vec<f64>> = pool.iter().map(|l| l.x.clone()).collect();
    let mut windows: Vec<VecDeque<StateIndex>> = pool.iter().map(|l| evolver.initial_window(&l.x)).collect();
    for s in 0..config.horizon {
        let active: Vec<usize> = (0..pool.len()).filter(|&i| !states[i].is_absorbing()).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| {
                let mut x = xs[i].clone();
                if s > 0 {
                    evolver.write_counters(&mut x, &windows[i]);
                    if let Some(path) = &path {
                        evolver.apply_macro(&mut x, &pool[i].x, path, s - 1);
                    }
                }
                x
            })
            .collect();
        let batch: Vec<(&[f64], StateIndex)> = rows.iter().zip(&active).map(|(x, &i)| (x.as_slice(), states[i])).collect();
        let probs = predict_rows(model, schema, &batch, config.clamp)?;
        for (&i, p) in active.iter().zip(&probs) {
            let w = &mut windows[i];
            w.push_back(states[i]);
            if w.len() > 12 {
                w.pop_front();
            }
            states[i] = draw(&mut rng, p, states[i]);
            evolver.advance(&mut xs[i]);
        }
    }
    let mut counts = [0u32; K];
    for s in states {
        counts[s.index()] += 1;
    }
    Ok(counts)
}
