use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// Column indices: one for a sensitivity, two or three for interactions.
    pub columns: Vec<usize>,
    pub label: String,
    pub value: f64,
}

/// Entries sorted by value, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub entries: Vec<ReportEntry>,
    pub metadata: BTreeMap<String, String>,
    /// Every value is zero, so the ranking carries no information.
    pub degenerate: bool,
}

/// Sorts descending; equal values keep their input order.
pub fn rank_report(entries: Vec<ReportEntry>, metadata: BTreeMap<String, String>) -> SensitivityReport {
    let mut entries = entries;
    entries.sort_by(|a, b| b.value.total_cmp(&a.value));
    let degenerate = entries.iter().all(|e| e.value == 0.0);
    SensitivityReport {
        entries,
        metadata,
        degenerate,
    }
}

impl SensitivityReport {
    pub fn top(&self, k: usize) -> &[ReportEntry] {
        &self.entries[..k.min(self.entries.len())]
    }

    /// Position (0-based) of the entry covering exactly `cols`, in any order.
    pub fn rank_of(&self, cols: &[usize]) -> Option<usize> {
        let mut want = cols.to_vec();
        want.sort_unstable();
        self.entries.iter().position(|e| {
            let mut c = e.columns.clone();
            c.sort_unstable();
            c == want
        })
    }

    /// `# key=value` metadata lines, then `rank,columns,label,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# degenerate={}", self.degenerate)?;
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["rank", "columns", "label", "value"])?;
        for (r, e) in self.entries.iter().enumerate() {
            let cols: Vec<String> = e.columns.iter().map(|c| c.to_string()).collect();
            w.write_record([(r + 1).to_string(), cols.join(" "), e.label.clone(), e.value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(c: usize, v: f64) -> ReportEntry {
        ReportEntry {
            columns: vec![c],
            label: format!("f{c}"),
            value: v,
        }
    }

    #[test]
    fn stable_descending() {
        let r = rank_report(vec![e(0, 1.0), e(1, 2.0), e(2, 1.0)], BTreeMap::new());
        let order: Vec<usize> = r.entries.iter().map(|x| x.columns[0]).collect();
        assert_eq!(order, vec![1, 0, 2]);
        assert!(!r.degenerate);
        assert_eq!(r.top(10).len(), 3);
        assert_eq!(r.rank_of(&[2]), Some(2));
    }

    #[test]
    fn all_zero_is_degenerate() {
        let r = rank_report(vec![e(0, 0.0), e(1, 0.0)], BTreeMap::from([("u".into(), "Current".into())]));
        assert!(r.degenerate);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# u=Current\n# degenerate=true\nrank,"));
    }
}
