use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};

/// Standard deviations below this are replaced by one.
pub const SCALE_GUARD: f64 = 1e-12;

/// Per-column z-score parameters fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// True where the fitted std was below the guard and replaced by 1.
    pub scale_guarded: Vec<bool>,
    /// Columns exempt from normalization (mean 0, std 1).
    pub exempt: Vec<bool>,
    /// Observed raw range on the training split.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    /// Stats that leave every column unchanged.
    pub fn identity(d_x: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; d_x],
            std: vec![1.0; d_x],
            scale_guarded: vec![false; d_x],
            exempt: vec![true; d_x],
            min: vec![f64::MIN; d_x],
            max: vec![f64::MAX; d_x],
        }
    }

    pub fn d_x(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, col: usize, raw: f64) -> f64 {
        (raw - self.mean[col]) / self.std[col]
    }

    pub fn denormalize_value(&self, col: usize, z: f64) -> f64 {
        z * self.std[col] + self.mean[col]
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }

    /// Whether a normalized value lies outside the training range of the column.
    pub fn outside_range(&self, col: usize, z: f64) -> bool {
        let raw = self.denormalize_value(col, z);
        raw < self.min[col] - 1e-9 * self.min[col].abs().max(1.0)
            || raw > self.max[col] + 1e-9 * self.max[col].abs().max(1.0)
    }
}

/// Fits means and standard deviations on training rows. Columns whose schema
/// field has `normalize = false` are exempt.
pub fn fit_normalization(schema: &FeatureSchema, train: ArrayView2<'_, f64>) -> Result<NormalizationStats> {
    if train.nrows() == 0 {
        return Err(Error::Empty("cannot fit normalization on an empty training split".into()));
    }
    if train.ncols() != schema.d_x() {
        return Err(Error::DimensionMismatch {
            expected: schema.d_x(),
            got: train.ncols(),
        });
    }
    let n = train.nrows() as f64;
    let d = train.ncols();
    let mut stats = NormalizationStats::identity(d);
    for (j, col) in train.columns().into_iter().enumerate() {
        stats.min[j] = col.iter().copied().fold(f64::INFINITY, f64::min);
        stats.max[j] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !schema.columns()[j].normalize {
            continue;
        }
        stats.exempt[j] = false;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        stats.mean[j] = mean;
        if sd < SCALE_GUARD {
            stats.std[j] = 1.0;
            stats.scale_guarded[j] = true;
        } else {
            stats.std[j] = sd;
        }
    }
    Ok(stats)
}

pub fn apply_normalization(stats: &NormalizationStats, rows: &mut Array2<f64>) -> Result<()> {
    if rows.ncols() != stats.d_x() {
        return Err(Error::DimensionMismatch {
            expected: stats.d_x(),
            got: rows.ncols(),
        });
    }
    for mut row in rows.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(())
}

/// Columns of normalized training rows that are not centered and unit-scaled.
///
/// Rows normalized once with their own stats pass; rows normalized twice (or
/// with foreign stats) get flagged.
pub fn flag_unnormalized_columns(stats: &NormalizationStats, rows: ArrayView2<'_, f64>, tol: f64) -> Vec<usize> {
    let n = rows.nrows() as f64;
    if n == 0.0 {
        return vec![];
    }
    (0..rows.ncols())
        .filter(|&j| {
            if stats.exempt[j] {
                return false;
            }
            let col = rows.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let expected_sd = if stats.scale_guarded[j] { 0.0 } else { 1.0 };
            mean.abs() > tol || (var.sqrt() - expected_sd).abs() > tol
        })
        .collect()
}
