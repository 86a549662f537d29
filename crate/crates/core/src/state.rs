//! Loan state space, transition legality and empirical transition matrices.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of loan states.
pub const K: usize = 7;

/// One of the seven monthly loan states, in the fixed order used by every
/// matrix, model output and serialized artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateIndex {
    Current,
    DD30,
    DD60,
    DD90plus,
    Foreclosure,
    REO,
    PaidOff,
}

impl StateIndex {
    pub const ALL: [StateIndex; K] = [
        StateIndex::Current,
        StateIndex::DD30,
        StateIndex::DD60,
        StateIndex::DD90plus,
        StateIndex::Foreclosure,
        StateIndex::REO,
        StateIndex::PaidOff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StateIndex> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StateIndex::Current => "Current",
            StateIndex::DD30 => "DD30",
            StateIndex::DD60 => "DD60",
            StateIndex::DD90plus => "DD90plus",
            StateIndex::Foreclosure => "Foreclosure",
            StateIndex::REO => "REO",
            StateIndex::PaidOff => "PaidOff",
        }
    }

    /// Non-absorbing states, in order.
    pub fn transient() -> impl Iterator<Item = StateIndex> {
        Self::ALL.into_iter().filter(|s| !s.is_absorbing())
    }

    pub fn is_absorbing(self) -> bool {
        is_absorbing(self)
    }

    /// Months behind on payments implied by the state alone (DD90plus is a floor).
    pub fn months_delinquent(self) -> u32 {
        match self {
            StateIndex::DD30 => 1,
            StateIndex::DD60 => 2,
            StateIndex::DD90plus => 3,
            _ => 0,
        }
    }
}

impl fmt::Display for StateIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StateIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        StateIndex::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Parse(format!("unknown loan state `{t}`")))
    }
}

/// The state order as names, recorded in every serialized artifact.
pub fn state_order() -> Vec<String> {
    StateIndex::ALL.iter().map(|s| s.name().to_string()).collect()
}

pub fn is_absorbing(s: StateIndex) -> bool {
    matches!(s, StateIndex::REO | StateIndex::PaidOff)
}

/// Delinquency deepens at most one notch per month; absorbing states only
/// self-loop. Everything else (cures, payoff, deed-in-lieu to REO) is legal.
pub fn is_legal_transition(from: StateIndex, to: StateIndex) -> bool {
    use StateIndex::*;
    if from.is_absorbing() {
        return from == to;
    }
    !matches!(
        (from, to),
        (Current, DD60) | (Current, DD90plus) | (DD30, DD90plus)
    )
}

/// K×K legality mask, row = from.
pub fn legality_mask() -> [[bool; K]; K] {
    let mut m = [[false; K]; K];
    for from in StateIndex::ALL {
        for to in StateIndex::ALL {
            m[from.index()][to.index()] = is_legal_transition(from, to);
        }
    }
    m
}

/// One loan-month observation: covariates observed at the start of the month,
/// the state the loan was in, and the state it moved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanMonthSample {
    pub loan_id: String,
    pub period: i64,
    pub covariates: Vec<f64>,
    pub state: StateIndex,
    pub next_state: StateIndex,
}

impl LoanMonthSample {
    /// Checks the sample invariants: legal transition out of a live state.
    pub fn validate(&self) -> Result<()> {
        if self.state.is_absorbing() {
            return Err(Error::InvalidSample(format!(
                "loan {} period {}: sample recorded after absorption in {}",
                self.loan_id, self.period, self.state
            )));
        }
        if !is_legal_transition(self.state, self.next_state) {
            return Err(Error::InvalidSample(format!(
                "loan {} period {}: illegal transition {} -> {}",
                self.loan_id, self.period, self.state, self.next_state
            )));
        }
        Ok(())
    }
}

/// Row-stochastic K×K matrix, row = conditioning state, column = next state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    entries: [[f64; K]; K],
}

impl TransitionMatrix {
    pub fn identity() -> Self {
        let mut entries = [[0.0; K]; K];
        for (i, row) in entries.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        TransitionMatrix { entries }
    }

    /// Builds a matrix after checking entries are probabilities and rows sum to one.
    pub fn from_rows(entries: [[f64; K]; K]) -> Result<Self> {
        let m = TransitionMatrix { entries };
        m.check(1e-9)?;
        Ok(m)
    }

    /// Builds a matrix without validation; used for intermediate products.
    pub fn from_rows_unchecked(entries: [[f64; K]; K]) -> Self {
        TransitionMatrix { entries }
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        for (u, row) in self.entries.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < -tol || *p > 1.0 + tol) {
                return Err(Error::InvalidMatrix(format!("row {u} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidMatrix(format!("row {u} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, from: StateIndex, to: StateIndex) -> f64 {
        self.entries[from.index()][to.index()]
    }

    pub fn row(&self, from: StateIndex) -> &[f64; K] {
        &self.entries[from.index()]
    }

    pub fn rows(&self) -> &[[f64; K]; K] {
        &self.entries
    }

    pub fn set_row(&mut self, from: StateIndex, row: [f64; K]) {
        self.entries[from.index()] = row;
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        let mut out = [[0.0; K]; K];
        for i in 0..K {
            for k in 0..K {
                let a = self.entries[i][k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..K {
                    out[i][j] += a * rhs.entries[k][j];
                }
            }
        }
        TransitionMatrix { entries: out }
    }

    /// CSV with a header row of state names and one labeled row per state;
    /// probabilities carry 10 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "from")?;
        for s in StateIndex::ALL {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        for from in StateIndex::ALL {
            write!(w, "{from}")?;
            for p in self.row(from) {
                write!(w, ",{}", format_sig(*p, 10))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty matrix csv".into()))?;
        let cols: Vec<&str> = header.split(',').skip(1).collect();
        if cols != state_order() {
            return Err(Error::Parse(format!("unexpected state order in header: {header}")));
        }
        let mut entries = [[0.0; K]; K];
        for (i, line) in lines.enumerate() {
            if i >= K {
                return Err(Error::Parse("too many matrix rows".into()));
            }
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default();
            if label != StateIndex::ALL[i].name() {
                return Err(Error::Parse(format!("row {i} labeled `{label}`")));
            }
            for (j, f) in fields.enumerate() {
                if j >= K {
                    return Err(Error::Parse(format!("row {i} has too many columns")));
                }
                entries[i][j] = f
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {i} col {j}: {e}")))?;
            }
        }
        TransitionMatrix::from_rows(entries)
    }
}

/// Formats with `sig` significant digits in plain or scientific notation.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{:.*e}", sig.saturating_sub(1), x);
    // Re-parse to drop trailing zeros while keeping a round-trippable value.
    let v: f64 = s.parse().unwrap_or(x);
    format!("{v}")
}

/// Transition counts by (state, next_state); mergeable across partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    counts: [[u64; K]; K],
}

impl TransitionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, from: StateIndex, to: StateIndex) {
        self.counts[from.index()][to.index()] += 1;
    }

    pub fn extend<'a, I: IntoIterator<Item = &'a LoanMonthSample>>(&mut self, samples: I) {
        for s in samples {
            self.add(s.state, s.next_state);
        }
    }

    pub fn merge(&mut self, other: &TransitionCounts) {
        for i in 0..K {
            for j in 0..K {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn count(&self, from: StateIndex, to: StateIndex) -> u64 {
        self.counts[from.index()][to.index()]
    }

    pub fn row_total(&self, from: StateIndex) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    pub fn to_matrix(&self) -> EmpiricalMatrix {
        let mut entries = [[0.0; K]; K];
        let mut flagged = Vec::new();
        for from in StateIndex::ALL {
            let i = from.index();
            let total = self.row_total(from);
            if from.is_absorbing() {
                entries[i][i] = 1.0;
            } else if total == 0 {
                entries[i][i] = 1.0;
                flagged.push(from);
            } else {
                for j in 0..K {
                    entries[i][j] = self.counts[i][j] as f64 / total as f64;
                }
            }
        }
        EmpiricalMatrix {
            matrix: TransitionMatrix::from_rows_unchecked(entries),
            row_counts: StateIndex::ALL.map(|s| self.row_total(s)),
            flagged_rows: flagged,
        }
    }
}

/// Empirical matrix plus the rows that had no observations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMatrix {
    pub matrix: TransitionMatrix,
    pub row_counts: [u64; K],
    /// Non-absorbing states with zero observations; their row is the unit self-loop.
    pub flagged_rows: Vec<StateIndex>,
}

impl EmpiricalMatrix {
    pub fn is_complete(&self) -> bool {
        self.flagged_rows.is_empty()
    }
}

/// Frequency estimate of the one-month transition matrix.
pub fn empirical_transition_matrix<'a, I>(samples: I) -> EmpiricalMatrix
where
    I: IntoIterator<Item = &'a LoanMonthSample>,
{
    let mut counts = TransitionCounts::new();
    counts.extend(samples);
    counts.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use StateIndex::*;

    fn sample(from: StateIndex, to: StateIndex) -> LoanMonthSample {
        LoanMonthSample {
            loan_id: "L1".into(),
            period: 0,
            covariates: vec![],
            state: from,
            next_state: to,
        }
    }

    #[test]
    fn absorbing_states() {
        assert!(is_absorbing(REO));
        assert!(is_absorbing(PaidOff));
        assert!(!is_absorbing(Current));
        assert_eq!(StateIndex::transient().count(), 5);
    }

    #[test]
    fn legality_rules() {
        assert!(!is_legal_transition(Current, DD60));
        assert!(!is_legal_transition(Current, DD90plus));
        assert!(!is_legal_transition(DD30, DD90plus));
        assert!(is_legal_transition(Foreclosure, Current));
        assert!(is_legal_transition(Current, REO));
        assert!(is_legal_transition(DD60, DD90plus));
        assert!(!is_legal_transition(PaidOff, Current));
        assert!(is_legal_transition(PaidOff, PaidOff));
        assert!(!is_legal_transition(REO, PaidOff));
        let legal_from_current = StateIndex::ALL
            .iter()
            .filter(|&&t| is_legal_transition(Current, t))
            .count();
        assert_eq!(legal_from_current, 5);
    }

    #[test]
    fn single_sample_matrix() {
        let em = empirical_transition_matrix(&[sample(Current, DD30)]);
        assert_eq!(em.matrix.row(Current), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(em.flagged_rows, vec![DD30, DD60, DD90plus, Foreclosure]);
        assert!(em.matrix.check(1e-12).is_ok());
    }

    #[test]
    fn empty_input_flags_every_transient_row() {
        let em = empirical_transition_matrix(&[]);
        assert_eq!(em.flagged_rows.len(), 5);
        assert!(!em.is_complete());
        assert_eq!(em.matrix, TransitionMatrix::identity());
    }

    #[test]
    fn partitioned_counts_merge_exactly() {
        let samples = vec![
            sample(Current, Current),
            sample(Current, DD30),
            sample(DD30, Current),
            sample(DD30, DD60),
            sample(Current, PaidOff),
        ];
        let whole = empirical_transition_matrix(&samples);
        let mut a = TransitionCounts::new();
        a.extend(&samples[..2]);
        let mut b = TransitionCounts::new();
        b.extend(&samples[2..]);
        a.merge(&b);
        assert_eq!(a.to_matrix(), whole);
    }

    #[test]
    fn csv_round_trip() {
        let mut m = TransitionMatrix::identity();
        m.set_row(Current, [0.9, 0.05, 0.0, 0.0, 0.0, 0.0, 0.05]);
        m.set_row(DD30, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0, 0.0]);
        let text = m.to_csv_string();
        assert!(text.starts_with("from,Current,DD30,DD60,DD90plus,Foreclosure,REO,PaidOff\n"));
        assert!(text.contains("0.3333333333"));
        let back = TransitionMatrix::from_csv_str(&text).unwrap();
        assert!((back.get(DD30, DD60) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn sample_validation() {
        assert!(sample(Current, DD30).validate().is_ok());
        assert!(sample(Current, DD60).validate().is_err());
        assert!(sample(REO, REO).validate().is_err());
    }

    #[test]
    fn parse_state_names() {
        assert_eq!("dd90plus".parse::<StateIndex>().unwrap(), DD90plus);
        assert!("Bogus".parse::<StateIndex>().is_err());
    }
}
