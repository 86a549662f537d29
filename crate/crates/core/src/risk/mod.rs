//! Multi-period transition matrices, pool-level count distributions and
//! portfolio selection built on a fitted one-month model.
//!
//! Loans are carried as normalized covariate rows. The state one-hot is
//! injected per evaluation, and a [`CovariateEvolver`] advances the
//! deterministic parts of a row (age, scheduled balance) month by month.

mod pool;
mod portfolio;

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TransitionModel;
use crate::pipeline::{Dataset, FeatureSchema, NormalizationStats};
use crate::state::{is_legal_transition, StateIndex, TransitionMatrix, K};
use crate::synth::{scheduled_balance_ratio, MacroConfig, MacroPath, MacroState};

pub use pool::{
    bernoulli_convolution, pool_normal, pool_poisson, simulate_pool_mc, CountDistribution, PoolDistribution, PoolKind,
    SimConfig,
};
pub use portfolio::{
    loss_weight, make_ranked_pools, noncurrent_curve, portfolio_comparison_curve, portfolio_loss, rank_by_scores,
    current_probabilities, realized_outcomes, select_portfolio, ComparisonRow, LoanOutcome, RankedPools,
};

/// One loan as seen by the risk tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLoan {
    pub loan_id: String,
    /// Normalized covariates; the state columns are overwritten on use.
    pub x: Vec<f64>,
    pub state: StateIndex,
    pub notional: f64,
}

impl PoolLoan {
    /// Loans for the given dataset rows, unit notional.
    pub fn from_rows(data: &Dataset, rows: &[usize]) -> Vec<PoolLoan> {
        rows.iter()
            .map(|&r| PoolLoan {
                loan_id: data.loan_id[r].clone(),
                x: data.x.row(r).to_vec(),
                state: data.state[r],
                notional: 1.0,
            })
            .collect()
    }

    /// Every non-absorbed loan observed in `period`, ordered by loan id.
    pub fn snapshot(data: &Dataset, period: i64) -> Vec<PoolLoan> {
        let mut rows: Vec<usize> = (0..data.len())
            .filter(|&r| data.period[r] == period && !data.state[r].is_absorbing())
            .collect();
        rows.sort_by(|&a, &b| data.loan_id[a].cmp(&data.loan_id[b]));
        Self::from_rows(data, &rows)
    }
}

/// Zeroes illegal entries of a probability row and renormalizes.
pub fn clamp_row(from: StateIndex, row: &mut [f64; K]) {
    for (v, p) in row.iter_mut().enumerate() {
        if !is_legal_transition(from, StateIndex::ALL[v]) {
            *p = 0.0;
        }
    }
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|p| *p /= s);
    }
}

/// Probability rows for each `(covariates, state)` pair.
fn predict_rows<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    rows: &[(&[f64], StateIndex)],
    clamp: bool,
) -> Result<Vec<[f64; K]>> {
    let d = model.input_dim();
    if schema.d_x() != d {
        return Err(Error::SchemaMismatch {
            expected: format!("{d} model inputs"),
            found: format!("{} schema columns", schema.d_x()),
        });
    }
    let mut x = Array2::zeros((rows.len(), d));
    for (mut out, (row, s)) in x.rows_mut().into_iter().zip(rows) {
        if row.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: row.len() });
        }
        let buf = out.as_slice_mut().expect("row-major");
        buf.copy_from_slice(row);
        schema.set_state(buf, *s);
    }
    let p = model.predict_batch(x.view());
    Ok(p.rows()
        .into_iter()
        .zip(rows)
        .map(|(r, (_, s))| {
            let mut a: [f64; K] = std::array::from_fn(|k| r[k]);
            if clamp {
                clamp_row(*s, &mut a);
            }
            a
        })
        .collect())
}

/// Transition matrix for one loan: row `u` is the model evaluated with the
/// state set to `u`; absorbing rows are unit vectors.
pub fn one_step_matrix<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    x: &[f64],
    clamp: bool,
) -> Result<TransitionMatrix> {
    let transient: Vec<StateIndex> = StateIndex::transient().collect();
    let rows: Vec<(&[f64], StateIndex)> = transient.iter().map(|&u| (x, u)).collect();
    let probs = predict_rows(model, schema, &rows, clamp)?;
    let mut m = TransitionMatrix::identity();
    for (u, p) in transient.into_iter().zip(probs) {
        m.set_row(u, p);
    }
    Ok(m)
}

/// `M(0) M(1) ... M(t-1)`, where `M(s)` is the one-step matrix at the
/// covariates advanced `s` months by `evolver`. Path-dependent counters and
/// the macro hook are not applied.
pub fn multi_period_frozen<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    x: &[f64],
    evolver: &CovariateEvolver,
    t: usize,
    clamp: bool,
) -> Result<TransitionMatrix> {
    if t == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    let mut cur = x.to_vec();
    let mut acc = one_step_matrix(model, schema, &cur, clamp)?;
    for _ in 1..t {
        evolver.advance(&mut cur);
        acc = acc.matmul(&one_step_matrix(model, schema, &cur, clamp)?);
    }
    Ok(acc)
}

/// Fixed-rate amortization: the scheduled balance fraction follows age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amortization {
    pub balance_ratio: usize,
    pub orig_rate: usize,
    pub term_months: u32,
}

/// Rolling 12-month state counters, one optional column per counted state
/// (current, 30, 60, 90+ days delinquent, foreclosure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterColumns {
    pub cols: [Option<usize>; 5],
}

const COUNTED: [StateIndex; 5] = [
    StateIndex::Current,
    StateIndex::DD30,
    StateIndex::DD60,
    StateIndex::DD90plus,
    StateIndex::Foreclosure,
];

/// Binds covariate columns to a simulated economy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroHook {
    pub config: MacroConfig,
    /// Economy at the simulation start.
    pub start: MacroState,
    pub national_rate: Option<usize>,
    /// `(incentive column, original rate column)`; incentive = original rate
    /// minus the national rate.
    pub incentive: Option<(usize, usize)>,
    pub unemployment: Option<usize>,
    pub hpi_change: Option<usize>,
    /// One-hot region columns, in region order.
    pub region_cols: Vec<usize>,
}

/// Deterministic month-to-month covariate updates. Columns without a rule
/// stay frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEvolver {
    pub stats: NormalizationStats,
    pub age: Option<usize>,
    pub amortization: Option<Amortization>,
    /// Updated along simulated paths only.
    pub counters: Option<CounterColumns>,
    pub macro_hook: Option<MacroHook>,
}

impl CovariateEvolver {
    /// Nothing evolves.
    pub fn frozen(stats: NormalizationStats) -> Self {
        CovariateEvolver {
            stats,
            age: None,
            amortization: None,
            counters: None,
            macro_hook: None,
        }
    }

    /// Binds the standard column names when the schema has them: `loan_age`,
    /// `balance_ratio` with `orig_rate`, and the `times_*_12m` counters.
    pub fn standard(schema: &FeatureSchema, stats: NormalizationStats, term_months: u32) -> Self {
        let col = |n: &str| schema.column_index(n);
        let age = col("loan_age");
        let amortization = match (age, col("balance_ratio"), col("orig_rate")) {
            (Some(_), Some(b), Some(r)) => Some(Amortization {
                balance_ratio: b,
                orig_rate: r,
                term_months,
            }),
            _ => None,
        };
        let names = ["times_current_12m", "times_30dd_12m", "times_60dd_12m", "times_90dd_12m", "times_fc_12m"];
        let cols = names.map(col);
        CovariateEvolver {
            stats,
            age,
            amortization,
            counters: cols.iter().any(Option::is_some).then_some(CounterColumns { cols }),
            macro_hook: None,
        }
    }

    /// Binds `national_rate` (and `incentive` when present) to a simulated
    /// national rate; other economic columns stay frozen.
    pub fn with_rate_hook(mut self, schema: &FeatureSchema, config: MacroConfig, start: MacroState) -> Self {
        let col = |n: &str| schema.column_index(n);
        self.macro_hook = Some(MacroHook {
            config,
            start,
            national_rate: col("national_rate"),
            incentive: col("incentive").zip(col("orig_rate")),
            unemployment: None,
            hpi_change: None,
            region_cols: vec![],
        });
        self
    }

    fn raw(&self, x: &[f64], c: usize) -> f64 {
        self.stats.denormalize_value(c, x[c])
    }

    fn set_raw(&self, x: &mut [f64], c: usize, v: f64) {
        x[c] = self.stats.normalize_value(c, v);
    }

    /// One month of deterministic evolution.
    pub fn advance(&self, x: &mut [f64]) {
        let Some(a) = self.age else { return };
        let age = self.raw(x, a) + 1.0;
        self.set_raw(x, a, age);
        if let Some(am) = &self.amortization {
            let rate = self.raw(x, am.orig_rate);
            let k = age.round().max(0.0) as u32;
            self.set_raw(x, am.balance_ratio, scheduled_balance_ratio(rate, am.term_months, k));
        }
    }

    /// Rolling window reconstructed from a row's counter values, oldest
    /// first. The order within the window is unknown; delinquent months are
    /// placed oldest.
    fn initial_window(&self, x: &[f64]) -> VecDeque<StateIndex> {
        let mut w = VecDeque::new();
        let Some(c) = &self.counters else { return w };
        for (k, s) in COUNTED.iter().enumerate().rev() {
            if let Some(col) = c.cols[k] {
                let n = self.raw(x, col).round().clamp(0.0, 12.0) as usize;
                w.extend(std::iter::repeat_n(*s, n));
            }
        }
        while w.len() > 12 {
            w.pop_front();
        }
        w
    }

    fn write_counters(&self, x: &mut [f64], window: &VecDeque<StateIndex>) {
        let Some(c) = &self.counters else { return };
        for (k, s) in COUNTED.iter().enumerate() {
            if let Some(col) = c.cols[k] {
                let n = window.iter().filter(|w| *w == s).count();
                self.set_raw(x, col, n as f64);
            }
        }
    }

    fn region(&self, hook: &MacroHook, x: &[f64]) -> usize {
        hook.region_cols
            .iter()
            .enumerate()
            .max_by(|a, b| self.raw(x, *a.1).total_cmp(&self.raw(x, *b.1)))
            .map_or(0, |(r, _)| r)
    }

    /// Writes the macro values of path month `s` into `x`. `base` is the
    /// loan's row at the simulation start.
    fn apply_macro(&self, x: &mut [f64], base: &[f64], path: &MacroPath, s: usize) {
        let Some(h) = &self.macro_hook else { return };
        let region = self.region(h, base);
        let (rate, unemp, hpi) = path.at(region.min(path.unemployment.len().saturating_sub(1)), s);
        if let Some(c) = h.national_rate {
            self.set_raw(x, c, rate);
        }
        if let Some((ci, co)) = h.incentive {
            let orig = self.raw(base, co);
            self.set_raw(x, ci, orig - rate);
        }
        if let Some(c) = h.unemployment {
            self.set_raw(x, c, unemp);
        }
        if let Some(c) = h.hpi_change {
            let h0 = self.raw(base, c);
            let hs = h.start.hpi.get(region).copied().unwrap_or(1.0);
            self.set_raw(x, c, (1.0 + h0) * hpi / hs - 1.0);
        }
    }

    /// Whether simulated paths need per-path covariates.
    fn path_dependent(&self) -> bool {
        self.counters.is_some() || self.macro_hook.is_some()
    }
}
