use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{FeatureSchema, RawValue, RowIssue};
use crate::error::{Error, Result};
use crate::state::{is_legal_transition, LoanMonthSample, StateIndex};

/// One candidate loan-month before encoding: raw fields observed at `period`,
/// the state during `period` and the state observed the following month.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub loan_id: String,
    pub period: i64,
    pub values: HashMap<String, RawValue>,
    pub state: StateIndex,
    pub next_state: StateIndex,
}

/// Counts of records dropped or altered during encoding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub total: usize,
    pub kept: usize,
    /// Records dropped per missing required field.
    pub missing_required: BTreeMap<String, usize>,
    pub illegal_transition: usize,
    pub after_absorption: usize,
    pub bad_value: usize,
    /// Unknown categorical levels routed to the "other" column (not dropped).
    pub unknown_levels: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.total - self.kept
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub samples: Vec<LoanMonthSample>,
    pub report: DropReport,
}

/// Expands raw records into design rows. Records missing a required field, with a
/// non-numeric numeric field, observed after absorption or with an illegal
/// transition are dropped and counted.
pub fn encode(schema: &FeatureSchema, records: &[RawRecord]) -> EncodeOutput {
    let mut report = DropReport {
        total: records.len(),
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        if r.state.is_absorbing() {
            report.after_absorption += 1;
            continue;
        }
        if !is_legal_transition(r.state, r.next_state) {
            report.illegal_transition += 1;
            continue;
        }
        let get = |k: &str| r.values.get(k).cloned().unwrap_or(RawValue::Missing);
        match schema.encode_row(r.state, get) {
            Ok(row) => {
                for f in row.unknown_levels {
                    *report.unknown_levels.entry(f).or_default() += 1;
                }
                samples.push(LoanMonthSample {
                    loan_id: r.loan_id.clone(),
                    period: r.period,
                    covariates: row.values,
                    state: r.state,
                    next_state: r.next_state,
                });
            }
            Err(RowIssue::MissingRequired(f)) => {
                *report.missing_required.entry(f).or_default() += 1;
            }
            Err(RowIssue::BadValue { .. }) => report.bad_value += 1,
        }
    }
    report.kept = samples.len();
    EncodeOutput { samples, report }
}

/// Counts from joining the loan and performance tables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub performance_rows: usize,
    pub records: usize,
    /// Rows at or after an unrecognized status flag (servicing released, unknown, ...).
    pub excluded_after_flag: usize,
    /// Rows after the loan entered an absorbing state.
    pub after_absorption: usize,
    /// Performance rows whose loan is absent from the loan table.
    pub orphan_rows: usize,
    /// Rows with no following month (censored or gapped); they yield no record.
    pub unpaired: usize,
}

pub const LOAN_ID: &str = "loan_id";
pub const PERIOD: &str = "period";
pub const STATUS: &str = "status";

/// Joins a static loan table with a monthly performance table (both CSV with
/// headers, keyed by `loan_id`; performance rows carry `period` and `status`).
///
/// Consecutive months of one loan form a record: fields at month `t`, state at
/// `t`, state at `t + 1`. A status that is not a loan state excludes that row
/// and everything after it for the loan.
pub fn load_records(loans_csv: &Path, performance_csv: &Path) -> Result<(Vec<RawRecord>, JoinReport)> {
    let loans = read_table(loans_csv)?;
    let perf = read_table(performance_csv)?;
    join_tables(&loans, &perf)
}

/// A CSV table as header + rows of raw values.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(|s| s.to_string()).collect());
    }
    Ok(Table { header, rows })
}

pub fn join_tables(loans: &Table, perf: &Table) -> Result<(Vec<RawRecord>, JoinReport)> {
    let lid = loans.col(LOAN_ID)?;
    let static_cols: Vec<(usize, &String)> =
        loans.header.iter().enumerate().filter(|(i, _)| *i != lid).collect();
    let mut static_by_id: HashMap<&str, &Vec<String>> = HashMap::new();
    for row in &loans.rows {
        static_by_id.insert(row[lid].as_str(), row);
    }

    let (pid, pper, pstat) = (perf.col(LOAN_ID)?, perf.col(PERIOD)?, perf.col(STATUS)?);
    let dyn_cols: Vec<(usize, &String)> = perf
        .header
        .iter()
        .enumerate()
        .filter(|(i, _)| ![pid, pper, pstat].contains(i))
        .collect();

    let mut by_loan: BTreeMap<&str, Vec<(i64, &Vec<String>)>> = BTreeMap::new();
    for (n, row) in perf.rows.iter().enumerate() {
        let period: i64 = row[pper]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("performance row {}: period: {e}", n + 1)))?;
        by_loan.entry(row[pid].as_str()).or_default().push((period, row));
    }

    let mut report = JoinReport {
        performance_rows: perf.rows.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (loan, mut rows) in by_loan {
        let Some(srow) = static_by_id.get(loan) else {
            report.orphan_rows += rows.len();
            continue;
        };
        rows.sort_by_key(|(p, _)| *p);
        let states: Vec<Option<StateIndex>> = rows.iter().map(|(_, r)| r[pstat].parse().ok()).collect();
        let stop = states.iter().position(|s| s.is_none()).unwrap_or(rows.len());
        report.excluded_after_flag += rows.len() - stop;
        for i in 0..stop {
            let state = states[i].expect("before stop");
            if state.is_absorbing() {
                report.after_absorption += stop - i - 1;
                break;
            }
            if i + 1 >= stop || rows[i + 1].0 != rows[i].0 + 1 {
                report.unpaired += 1;
                continue;
            }
            let mut values = HashMap::with_capacity(static_cols.len() + dyn_cols.len());
            for (c, name) in &static_cols {
                values.insert((*name).clone(), RawValue::parse(&srow[*c]));
            }
            for (c, name) in &dyn_cols {
                values.insert((*name).clone(), RawValue::parse(&rows[i].1[*c]));
            }
            records.push(RawRecord {
                loan_id: loan.to_string(),
                period: rows[i].0,
                values,
                state,
                next_state: states[i + 1].expect("before stop"),
            });
        }
    }
    report.records = records.len();
    Ok((records, report))
}
