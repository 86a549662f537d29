//! Out-of-sample evaluation: ROC/AUC per transition, likelihood-ratio
//! statistics between nested fits, and pool-level forecast gaps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::network::TransitionModel;
use crate::pipeline::Dataset;
use crate::state::{StateIndex, K};

/// ROC points from a descending threshold sweep over distinct scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`, from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in &self.points {
            w.write_record([f.to_string(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidSample("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Unavailable(format!(
            "AUC needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in exact integer arithmetic.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, using midranks for ties.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank = (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let p = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += p * twice_mid;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let num = twice_rank_sum - p * (p + 1);
    Ok(num as f64 / (2 * p * n) as f64)
}

/// ROC curve with tied scores grouped into a single step.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: auc(scores, labels)?,
    })
}

/// AUC of `model`'s probability of `v` for samples currently in `u`, labels
/// `next_state == v`. `None` when either class is absent or `u` is absorbing.
pub fn transition_auc<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    u: StateIndex,
    v: StateIndex,
) -> Option<RocCurve> {
    if u.is_absorbing() {
        return None;
    }
    let idx = data.indices_in_state(u);
    let labels: Vec<bool> = idx.iter().map(|&i| data.next_state[i] == v).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return None;
    }
    let (x, _) = data.gather(&idx);
    let p = model.predict_batch(x.view());
    let scores: Vec<f64> = p.column(v.index()).to_vec();
    roc_curve(&scores, &labels).ok()
}

/// Transition AUCs for every `(u, v)` pair; absorbing rows and cells lacking
/// one class are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucMatrix {
    pub cells: [[Option<f64>; K]; K],
    /// Samples per source state.
    pub counts: [usize; K],
}

impl AucMatrix {
    pub fn get(&self, u: StateIndex, v: StateIndex) -> Option<f64> {
        self.cells[u.index()][v.index()]
    }

    /// 7×7 CSV, unavailable cells blank.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["from".to_string()];
        header.extend(StateIndex::ALL.iter().map(|s| s.name().to_string()));
        w.write_record(&header)?;
        for u in StateIndex::ALL {
            let mut rec = vec![u.name().to_string()];
            rec.extend(
                self.cells[u.index()]
                    .iter()
                    .map(|c| c.map(|a| format!("{a:.6}")).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn auc_matrix<M: TransitionModel + ?Sized>(model: &M, data: &Dataset) -> AucMatrix {
    let mut cells = [[None; K]; K];
    let mut counts = [0; K];
    for u in StateIndex::transient() {
        let idx = data.indices_in_state(u);
        counts[u.index()] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let (x, _) = data.gather(&idx);
        let p = model.predict_batch(x.view());
        for v in StateIndex::ALL {
            let labels: Vec<bool> = idx.iter().map(|&i| data.next_state[i] == v).collect();
            let scores: Vec<f64> = p.column(v.index()).to_vec();
            cells[u.index()][v.index()] = auc(&scores, &labels).ok();
        }
    }
    AucMatrix { cells, counts }
}

/// `2 n (loss_null - loss_alt)`; positive when the alternative fits better.
pub fn lr_statistic(loss_null: f64, loss_alt: f64, n_samples: usize) -> f64 {
    2.0 * n_samples as f64 * (loss_null - loss_alt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTest {
    pub statistic: f64,
    /// Difference in free parameter counts (alternative minus null).
    pub df: i64,
    /// Upper-tail chi-square probability, when `df > 0`.
    pub p_value: Option<f64>,
    pub note: String,
}

pub fn lr_test(loss_null: f64, loss_alt: f64, n_samples: usize, params_null: usize, params_alt: usize) -> LrTest {
    let statistic = lr_statistic(loss_null, loss_alt, n_samples);
    let df = params_alt as i64 - params_null as i64;
    let p_value = (df > 0).then(|| {
        let chi = ChiSquared::new(df as f64).expect("positive df");
        if statistic <= 0.0 {
            1.0
        } else {
            chi.sf(statistic)
        }
    });
    LrTest {
        statistic,
        df,
        p_value,
        note: "Wilks approximation, nested-model caveat applies".into(),
    }
}

/// Averages of per-pool forecast errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub avg_absolute_gap: f64,
    /// Mean of `|mean - actual| / sd`; infinite when a zero-sd forecast missed.
    pub avg_standardized_gap: f64,
    /// Pools whose forecast had zero sd and did not match the actual count.
    pub infinite_pools: usize,
    pub pools: usize,
}

/// `forecasts` are `(mean, sd)` per pool, `actual` the realized counts.
pub fn pool_gap_stats(forecasts: &[(f64, f64)], actual: &[f64]) -> Result<GapStats> {
    if forecasts.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: forecasts.len(),
            got: actual.len(),
        });
    }
    if forecasts.is_empty() {
        return Err(Error::Empty("no pools".into()));
    }
    let n = forecasts.len() as f64;
    let mut abs = 0.0;
    let mut std = 0.0;
    let mut inf = 0;
    for (&(mean, sd), &a) in forecasts.iter().zip(actual) {
        let gap = (mean - a).abs();
        abs += gap;
        if sd > 0.0 {
            std += gap / sd;
        } else if gap > 0.0 {
            inf += 1;
        }
    }
    Ok(GapStats {
        avg_absolute_gap: abs / n,
        avg_standardized_gap: if inf > 0 { f64::INFINITY } else { std / n },
        infinite_pools: inf,
        pools: forecasts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, true, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let r = roc_curve(&[0.3, 0.3, 0.9, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        assert!((r.trapezoid_area() - r.auc).abs() < 1e-12);
    }

    #[test]
    fn lr_and_gaps() {
        assert_eq!(lr_statistic(0.5, 0.5, 10), 0.0);
        assert!((lr_statistic(0.5, 0.4, 100) - 20.0).abs() < 1e-9);
        let g = pool_gap_stats(&[(12.0, 2.0)], &[10.0]).unwrap();
        assert_eq!(g.avg_standardized_gap, 1.0);
        assert_eq!(g.avg_absolute_gap, 2.0);
        let z = pool_gap_stats(&[(3.0, 0.0), (5.0, 1.0)], &[3.0, 5.0]).unwrap();
        assert_eq!((z.avg_absolute_gap, z.avg_standardized_gap), (0.0, 0.0));
        assert!(pool_gap_stats(&[(3.0, 0.0)], &[4.0]).unwrap().avg_standardized_gap.is_infinite());
        let t = lr_test(0.5, 0.4, 100, 10, 12);
        assert_eq!(t.df, 2);
        assert!((t.p_value.unwrap() - (-10.0f64).exp()).abs() < 1e-12);
    }
}
