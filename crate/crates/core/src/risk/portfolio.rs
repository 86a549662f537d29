use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{multi_period_frozen, CovariateEvolver, PoolLoan};
use crate::error::{Error, Result};
use crate::network::TransitionModel;
use crate::pipeline::{Dataset, FeatureSchema};
use crate::state::StateIndex;

/// State of a loan at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoanOutcome {
    pub state: StateIndex,
    /// Months behind; only read for delinquent states.
    pub months_delinquent: u32,
}

impl LoanOutcome {
    /// Delinquency implied by the state alone.
    pub fn from_state(state: StateIndex) -> Self {
        LoanOutcome {
            state,
            months_delinquent: state.months_delinquent(),
        }
    }
}

/// Loss as a fraction of notional: 5% on payoff, 40% on foreclosure or
/// REO, `m/360` when `m` months delinquent.
pub fn loss_weight(o: &LoanOutcome) -> f64 {
    use StateIndex::*;
    match o.state {
        Current => 0.0,
        PaidOff => 0.05,
        Foreclosure | REO => 0.40,
        DD30 | DD60 | DD90plus => o.months_delinquent.max(o.state.months_delinquent()) as f64 / 360.0,
    }
}

pub fn portfolio_loss(outcomes: &[LoanOutcome], notionals: &[f64]) -> Result<f64> {
    if outcomes.len() != notionals.len() {
        return Err(Error::DimensionMismatch {
            expected: outcomes.len(),
            got: notionals.len(),
        });
    }
    Ok(outcomes.iter().zip(notionals).map(|(o, n)| n * loss_weight(o)).sum())
}

/// Positions sorted by score, highest first; ties by loan id.
pub fn rank_by_scores(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

/// The `n` loans most likely to be current after `horizon` months, best first.
pub fn select_portfolio<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    pool: &[PoolLoan],
    n: usize,
    horizon: usize,
    evolver: &CovariateEvolver,
) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::config("n", format!("{n} exceeds pool size {}", pool.len())));
    }
    let scores = current_probabilities(model, schema, pool, horizon, evolver)?;
    let ids: Vec<String> = pool.iter().map(|l| l.loan_id.clone()).collect();
    let mut order = rank_by_scores(&scores, &ids);
    order.truncate(n);
    Ok(order)
}

/// `P(current at horizon)` from each loan's present state.
pub fn current_probabilities<M: TransitionModel + ?Sized>(
    model: &M,
    schema: &FeatureSchema,
    pool: &[PoolLoan],
    horizon: usize,
    evolver: &CovariateEvolver,
) -> Result<Vec<f64>> {
    pool.par_iter()
        .map(|l| {
            let m = multi_period_frozen(model, schema, &l.x, evolver, horizon, false)?;
            Ok(m.get(l.state, StateIndex::Current))
        })
        .collect()
}

/// Consecutive pools of loans sorted by a key, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPools {
    pub pools: Vec<Vec<usize>>,
    /// The last pool holds fewer than `pool_size` loans.
    pub last_short: bool,
}

pub fn make_ranked_pools(keys: &[f64], ids: &[String], pool_size: usize) -> Result<RankedPools> {
    if pool_size == 0 {
        return Err(Error::config("pool_size", "must be at least 1"));
    }
    if keys.len() != ids.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            got: ids.len(),
        });
    }
    let order = rank_by_scores(keys, ids);
    let pools: Vec<Vec<usize>> = order.chunks(pool_size).map(<[usize]>::to_vec).collect();
    let last_short = pools.last().is_some_and(|p| p.len() < pool_size) && pools.len() > 1;
    Ok(RankedPools { pools, last_short })
}

/// Non-current loans among the first `n` of `order`, for each `n`.
pub fn noncurrent_curve(order: &[usize], realized: &[StateIndex], n_grid: &[usize]) -> Vec<usize> {
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0);
    for &i in order {
        prefix.push(prefix.last().unwrap() + usize::from(realized[i] != StateIndex::Current));
    }
    n_grid.iter().map(|&n| prefix[n.min(order.len())]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    pub noncurrent_a: usize,
    pub noncurrent_b: usize,
}

/// Realized non-current counts of the portfolios each model selects.
#[allow(clippy::too_many_arguments)]
pub fn portfolio_comparison_curve<A: TransitionModel + ?Sized, B: TransitionModel + ?Sized>(
    model_a: &A,
    model_b: &B,
    schema: &FeatureSchema,
    pool: &[PoolLoan],
    realized: &[StateIndex],
    horizon: usize,
    evolver: &CovariateEvolver,
    n_grid: &[usize],
) -> Result<Vec<ComparisonRow>> {
    if realized.len() != pool.len() {
        return Err(Error::DimensionMismatch {
            expected: pool.len(),
            got: realized.len(),
        });
    }
    let a = select_portfolio(model_a, schema, pool, pool.len(), horizon, evolver)?;
    let b = select_portfolio(model_b, schema, pool, pool.len(), horizon, evolver)?;
    let ca = noncurrent_curve(&a, realized, n_grid);
    let cb = noncurrent_curve(&b, realized, n_grid);
    Ok(n_grid
        .iter()
        .zip(ca.into_iter().zip(cb))
        .map(|(&n, (noncurrent_a, noncurrent_b))| ComparisonRow {
            n,
            noncurrent_a,
            noncurrent_b,
        })
        .collect())
}

/// Observed state of each pool loan `horizon` months after `period`, from
/// the panel rows. Loans absorbed earlier keep their absorbing state; loans
/// whose record ends before the horizon give `None`.
pub fn realized_outcomes(data: &Dataset, pool: &[PoolLoan], period: i64, horizon: usize) -> Vec<Option<StateIndex>> {
    let target = period + horizon as i64;
    let mut last: HashMap<&str, (i64, StateIndex)> = HashMap::new();
    for r in 0..data.len() {
        let p = data.period[r];
        if p < period || p >= target {
            continue;
        }
        let e = last.entry(data.loan_id[r].as_str()).or_insert((p, data.next_state[r]));
        if p >= e.0 {
            *e = (p, data.next_state[r]);
        }
    }
    pool.iter()
        .map(|l| {
            let (p, s) = *last.get(l.loan_id.as_str())?;
            (p == target - 1 || s.is_absorbing()).then_some(s)
        })
        .collect()
}
