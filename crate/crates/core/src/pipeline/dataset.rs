use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::state::{LoanMonthSample, StateIndex};

/// Design matrix plus per-row metadata, held in memory.
///
/// Row gathers are counted so callers can assert a split was never read.
#[derive(Debug)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub state: Vec<StateIndex>,
    pub next_state: Vec<StateIndex>,
    pub period: Vec<i64>,
    pub loan_id: Vec<String>,
    reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            x: self.x.clone(),
            state: self.state.clone(),
            next_state: self.next_state.clone(),
            period: self.period.clone(),
            loan_id: self.loan_id.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x
            && self.state == other.state
            && self.next_state == other.next_state
            && self.period == other.period
            && self.loan_id == other.loan_id
    }
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        state: Vec<StateIndex>,
        next_state: Vec<StateIndex>,
        period: Vec<i64>,
        loan_id: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        for (name, len) in [
            ("state", state.len()),
            ("next_state", next_state.len()),
            ("period", period.len()),
            ("loan_id", loan_id.len()),
        ] {
            if len != n {
                return Err(Error::Parse(format!("dataset column `{name}` has {len} rows, expected {n}")));
            }
        }
        Ok(Dataset {
            x,
            state,
            next_state,
            period,
            loan_id,
            reads: AtomicU64::new(0),
        })
    }

    pub fn empty(d_x: usize) -> Self {
        Dataset::new(Array2::zeros((0, d_x)), vec![], vec![], vec![], vec![]).expect("consistent")
    }

    pub fn from_samples(samples: &[LoanMonthSample], d_x: usize) -> Result<Self> {
        let mut x = Array2::zeros((samples.len(), d_x));
        for (i, s) in samples.iter().enumerate() {
            if s.covariates.len() != d_x {
                return Err(Error::DimensionMismatch {
                    expected: d_x,
                    got: s.covariates.len(),
                });
            }
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&s.covariates));
        }
        Dataset::new(
            x,
            samples.iter().map(|s| s.state).collect(),
            samples.iter().map(|s| s.next_state).collect(),
            samples.iter().map(|s| s.period).collect(),
            samples.iter().map(|s| s.loan_id.clone()).collect(),
        )
    }

    pub fn to_samples(&self) -> Vec<LoanMonthSample> {
        (0..self.len())
            .map(|i| LoanMonthSample {
                loan_id: self.loan_id[i].clone(),
                period: self.period[i],
                covariates: self.x.row(i).to_vec(),
                state: self.state[i],
                next_state: self.next_state[i],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.next_state.iter().map(|s| s.index()).collect()
    }

    /// Full design matrix; counts as a read of every row.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.reads.fetch_add(self.len() as u64, Ordering::Relaxed);
        self.x.view()
    }

    /// Copies the selected rows; counts as a read.
    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        self.reads.fetch_add(idx.len() as u64, Ordering::Relaxed);
        let x = self.x.select(Axis(0), idx);
        let t = idx.iter().map(|&i| self.next_state[i].index()).collect();
        (x, t)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        self.reads.fetch_add(idx.len() as u64, Ordering::Relaxed);
        Dataset::new(
            self.x.select(Axis(0), idx),
            idx.iter().map(|&i| self.state[i]).collect(),
            idx.iter().map(|&i| self.next_state[i]).collect(),
            idx.iter().map(|&i| self.period[i]).collect(),
            idx.iter().map(|&i| self.loan_id[i].clone()).collect(),
        )
        .expect("consistent")
    }

    /// Rows read through `view`, `gather` or `subset` since construction.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let d = parts.first().map(|p| p.d_x()).unwrap_or(0);
        if let Some(p) = parts.iter().find(|p| p.d_x() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.d_x(),
            });
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let x = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        Dataset::new(
            x,
            parts.iter().flat_map(|p| p.state.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.next_state.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.period.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.loan_id.iter().cloned()).collect(),
        )
    }

    /// Row indices whose current state is `u`.
    pub fn indices_in_state(&self, u: StateIndex) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.state[i] == u).collect()
    }

    /// Overwrites the given columns with a constant (e.g. zero for leave-one-out).
    pub fn with_columns_set(&self, cols: &[usize], value: f64) -> Dataset {
        let mut out = self.clone();
        for &c in cols {
            out.x.column_mut(c).fill(value);
        }
        out
    }
}
