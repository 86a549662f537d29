use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::LoanMonthSample;

/// Month index `year * 12 + (month - 1)`.
pub fn month_index(year: i64, month: u32) -> i64 {
    year * 12 + (month as i64 - 1)
}

/// Parses `YYYY-MM` into a month index.
pub fn parse_month(s: &str) -> Result<i64> {
    let (y, m) = s
        .trim()
        .split_once('-')
        .ok_or_else(|| Error::Parse(format!("expected YYYY-MM, got `{s}`")))?;
    let year: i64 = y.parse().map_err(|_| Error::Parse(format!("bad year in `{s}`")))?;
    let month: u32 = m.parse().map_err(|_| Error::Parse(format!("bad month in `{s}`")))?;
    if !(1..=12).contains(&month) {
        return Err(Error::Parse(format!("month out of range in `{s}`")));
    }
    Ok(month_index(year, month))
}

pub fn format_month(idx: i64) -> String {
    format!("{:04}-{:02}", idx.div_euclid(12), idx.rem_euclid(12) + 1)
}

/// Half-open period boundaries: train `[.., train_end)`, validation
/// `[train_end, valid_end)`, test `[valid_end, test_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_end: i64,
    pub valid_end: i64,
    /// Samples at or after this period belong to no split.
    pub test_end: Option<i64>,
}

impl SplitConfig {
    /// Training before May 2012, validation May–October 2012, test through May 2014.
    pub fn reference_default() -> Self {
        SplitConfig {
            train_end: month_index(2012, 5),
            valid_end: month_index(2012, 11),
            test_end: Some(month_index(2014, 6)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<LoanMonthSample>,
    pub valid: Vec<LoanMonthSample>,
    pub test: Vec<LoanMonthSample>,
    /// Samples past `test_end`.
    pub outside: usize,
    pub warnings: Vec<String>,
}

pub fn temporal_split(samples: Vec<LoanMonthSample>, train_end: i64, valid_end: i64) -> Result<Split> {
    split_with_config(
        samples,
        &SplitConfig {
            train_end,
            valid_end,
            test_end: None,
        },
    )
}

pub fn split_with_config(samples: Vec<LoanMonthSample>, cfg: &SplitConfig) -> Result<Split> {
    if cfg.train_end >= cfg.valid_end {
        return Err(Error::config("split.train_end", "must precede split.valid_end"));
    }
    if let Some(t) = cfg.test_end {
        if t <= cfg.valid_end {
            return Err(Error::config("split.test_end", "must follow split.valid_end"));
        }
    }
    let mut out = Split::default();
    for s in samples {
        if s.period < cfg.train_end {
            out.train.push(s);
        } else if s.period < cfg.valid_end {
            out.valid.push(s);
        } else if cfg.test_end.is_none_or(|t| s.period < t) {
            out.test.push(s);
        } else {
            out.outside += 1;
        }
    }
    for (name, len) in [("train", out.train.len()), ("validation", out.valid.len()), ("test", out.test.len())] {
        if len == 0 {
            out.warnings.push(format!("{name} split is empty"));
        }
    }
    Ok(out)
}
