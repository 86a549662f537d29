//! Variable importance and nonlinearity diagnostics for fitted transition
//! models: average absolute sensitivities, finite-difference interaction
//! strengths, leave-one-out losses and partial-dependence grids.
//!
//! All functions operate on normalized covariate rows. Interaction estimators
//! evaluate the model on shifted copies of the conditioning rows; the base
//! and single-shift evaluations are shared across a scan so a pair scan over
//! `d` columns costs `1 + d + d(d-1)/2` batched passes.

mod report;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TransitionModel;
use crate::pipeline::{Dataset, FeatureSchema, NormalizationStats};
use crate::state::{StateIndex, K};
use crate::trainer::dataset_loss;

pub use report::{rank_report, ReportEntry, SensitivityReport};

/// Step used for every coordinate unless overridden; 0.1 standard deviations
/// of the training data once covariates are z-scored.
pub const DEFAULT_DELTA: f64 = 0.1;
/// Features kept by the sensitivity prefilter before a triple scan.
pub const DEFAULT_PREFILTER: usize = 20;
/// Largest conditioning set averaged over before subsampling.
pub const DEFAULT_SAMPLE_CAP: usize = 100_000;

const ROW_CHUNK: usize = 4096;

/// Output the finite differences are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Post-softmax probability `h(v, x)`.
    #[default]
    Probability,
    /// Pre-softmax output for `v`. Only available for single networks.
    Logit,
}

/// Third-order difference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripleScheme {
    /// Full mixed third difference over the eight corners of the shift cube.
    #[default]
    EightPoint,
    /// `f111 - f110 - f101 - f011 + 2 f000`; kept for comparison only, it does
    /// not vanish on purely pairwise functions.
    FivePoint,
}

/// Samples currently in state `u`, optionally subsampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSet {
    pub u: StateIndex,
    /// Row indices into the dataset, ascending.
    pub indices: Vec<usize>,
    /// Size of the full set before subsampling.
    pub population: usize,
}

impl ConditioningSet {
    /// Every sample in state `u`.
    pub fn all(data: &Dataset, u: StateIndex) -> Self {
        let indices = data.indices_in_state(u);
        ConditioningSet {
            u,
            population: indices.len(),
            indices,
        }
    }

    /// At most `cap` samples in state `u`, drawn without replacement.
    pub fn sampled(data: &Dataset, u: StateIndex, cap: usize, seed: u64) -> Self {
        let all = data.indices_in_state(u);
        let population = all.len();
        if population <= cap {
            return ConditioningSet {
                u,
                indices: all,
                population,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = sample(&mut rng, population, cap).into_iter().map(|k| all[k]).collect();
        indices.sort_unstable();
        ConditioningSet { u, indices, population }
    }

    /// Explicit rows; every one must be in state `u`.
    pub fn from_indices(data: &Dataset, u: StateIndex, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len() || data.state[i] != u) {
            return Err(Error::InvalidSample(format!("row {bad} is not a sample in state {u}")));
        }
        Ok(ConditioningSet {
            u,
            population: indices.len(),
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn rows(&self, data: &Dataset) -> Result<Array2<f64>> {
        if self.is_empty() {
            return Err(Error::Empty(format!("no samples in state {}", self.u)));
        }
        Ok(data.gather(&self.indices).0)
    }
}

/// Values of the probe at each row of `x`.
pub fn probe_values<M: TransitionModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    v: StateIndex,
    mode: ProbeMode,
) -> Result<Vec<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.ncols(),
        });
    }
    let out = match mode {
        ProbeMode::Probability => model.predict_batch(x),
        ProbeMode::Logit => model
            .logits_batch(x)
            .ok_or_else(|| Error::Unavailable("model exposes no single logit layer".into()))?,
    };
    Ok(out.column(v.index()).to_vec())
}

/// Probe values on `x` with `shifts` added to the named columns.
fn shifted_probe<M: TransitionModel + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    shifts: &[(usize, f64)],
    v: StateIndex,
    mode: ProbeMode,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), ROW_CHUNK) {
        let mut xs = chunk.to_owned();
        for &(c, d) in shifts {
            xs.column_mut(c).mapv_inplace(|a| a + d);
        }
        out.extend(probe_values(model, xs.view(), v, mode)?);
    }
    Ok(out)
}

fn mean_abs(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.map(f64::abs).sum::<f64>() / n as f64
}

/// Order-independent sum of three terms, so permuting the inputs cannot
/// change the rounding.
fn sum3(a: f64, b: f64, c: f64) -> f64 {
    let mut t = [a, b, c];
    t.sort_by(f64::total_cmp);
    t[0] + t[1] + t[2]
}

fn check_cols(d: usize, cols: &[usize]) -> Result<()> {
    for (n, &c) in cols.iter().enumerate() {
        if c >= d {
            return Err(Error::DimensionMismatch { expected: d, got: c + 1 });
        }
        if cols[..n].contains(&c) {
            return Err(Error::InvalidSample(format!("feature {c} repeated")));
        }
    }
    Ok(())
}

fn check_deltas(deltas: &[f64]) -> Result<()> {
    match deltas.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        Some(d) => Err(Error::config("delta", format!("must be positive, got {d}"))),
        None => Ok(()),
    }
}

/// Average absolute input gradient `|∂h(v,x)/∂x_j|` for every column.
pub fn sensitivities<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
) -> Result<Vec<f64>> {
    let x = cond.rows(data)?;
    let n = x.nrows();
    let mut acc = vec![0.0; x.ncols()];
    for chunk in x.axis_chunks_iter(Axis(0), ROW_CHUNK) {
        let g = model.input_gradient_batch(chunk, v);
        for row in g.rows() {
            for (a, g) in acc.iter_mut().zip(row) {
                *a += g.abs();
            }
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Average absolute sensitivity of `h(v, ·)` to column `j`.
pub fn sensitivity<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
    j: usize,
) -> Result<f64> {
    check_cols(data.d_x(), &[j])?;
    Ok(sensitivities(model, data, cond, v)?[j])
}

/// Average absolute mixed second difference in columns `i` and `j`.
#[allow(clippy::too_many_arguments)]
pub fn interaction2<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
    (i, j): (usize, usize),
    (di, dj): (f64, f64),
    mode: ProbeMode,
) -> Result<f64> {
    check_cols(data.d_x(), &[i, j])?;
    check_deltas(&[di, dj])?;
    let x = cond.rows(data)?;
    let f = |s: &[(usize, f64)]| shifted_probe(model, &x, s, v, mode);
    let (f00, f10, f01, f11) = (f(&[])?, f(&[(i, di)])?, f(&[(j, dj)])?, f(&[(i, di), (j, dj)])?);
    Ok(mean_abs(
        (0..x.nrows()).map(|r| (f11[r] + f00[r]) - (f10[r] + f01[r])),
        x.nrows(),
    ))
}

fn third_difference(scheme: TripleScheme, f: [f64; 8]) -> f64 {
    // index bits: (i, j, k) -> i*4 + j*2 + k
    let [f000, f001, f010, f011, f100, f101, f110, f111] = f;
    match scheme {
        TripleScheme::EightPoint => (f111 + sum3(f100, f010, f001)) - (f000 + sum3(f110, f101, f011)),
        TripleScheme::FivePoint => (f111 + 2.0 * f000) - sum3(f110, f101, f011),
    }
}

/// Average absolute mixed third difference in columns `i`, `j`, `k`.
#[allow(clippy::too_many_arguments)]
pub fn interaction3<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
    cols: (usize, usize, usize),
    deltas: (f64, f64, f64),
    mode: ProbeMode,
    scheme: TripleScheme,
) -> Result<f64> {
    let (i, j, k) = cols;
    let (di, dj, dk) = deltas;
    check_cols(data.d_x(), &[i, j, k])?;
    check_deltas(&[di, dj, dk])?;
    let x = cond.rows(data)?;
    let mut corners: Vec<Vec<f64>> = Vec::with_capacity(8);
    for bits in 0..8u8 {
        let mut s = Vec::new();
        if bits & 4 != 0 {
            s.push((i, di));
        }
        if bits & 2 != 0 {
            s.push((j, dj));
        }
        if bits & 1 != 0 {
            s.push((k, dk));
        }
        corners.push(shifted_probe(model, &x, &s, v, mode)?);
    }
    Ok(mean_abs(
        (0..x.nrows()).map(|r| third_difference(scheme, std::array::from_fn(|b| corners[b][r]))),
        x.nrows(),
    ))
}

/// Settings shared by the pair and triple scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub delta: f64,
    /// Per-column overrides of `delta`, by column name.
    pub delta_overrides: BTreeMap<String, f64>,
    pub mode: ProbeMode,
    pub triple_scheme: TripleScheme,
    /// Columns kept by the sensitivity prefilter for the triple scan.
    pub prefilter: usize,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            delta: DEFAULT_DELTA,
            delta_overrides: BTreeMap::new(),
            mode: ProbeMode::Probability,
            triple_scheme: TripleScheme::EightPoint,
            prefilter: DEFAULT_PREFILTER,
            sample_cap: DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

impl ScanConfig {
    /// Per-column steps for `schema`.
    pub fn deltas(&self, schema: &FeatureSchema) -> Result<Vec<f64>> {
        let mut out = vec![self.delta; schema.d_x()];
        for (name, &d) in &self.delta_overrides {
            let c = schema
                .column_index(name)
                .ok_or_else(|| Error::config(format!("delta_overrides.{name}"), "unknown column"))?;
            out[c] = d;
        }
        check_deltas(&out)?;
        Ok(out)
    }
}

/// Columns eligible for interaction scans: everything except the state one-hot.
pub fn scan_columns(schema: &FeatureSchema) -> Vec<usize> {
    (0..schema.d_x()).filter(|&c| !schema.is_state_column(c)).collect()
}

/// The `m` columns of `cols` with the largest sensitivity, ties by column index.
pub fn prefilter(sens: &[f64], cols: &[usize], m: usize) -> Vec<usize> {
    let mut ranked = cols.to_vec();
    ranked.sort_by(|&a, &b| sens[b].total_cmp(&sens[a]));
    ranked.truncate(m);
    ranked
}

/// Interaction strengths for every pair drawn from `cols`, in
/// lexicographic order of the pair positions within `cols`.
pub fn pair_scan<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
    cols: &[usize],
    deltas: &[f64],
    mode: ProbeMode,
) -> Result<Vec<((usize, usize), f64)>> {
    check_cols(data.d_x(), cols)?;
    check_deltas(deltas)?;
    let x = cond.rows(data)?;
    let n = x.nrows();
    let f00 = shifted_probe(model, &x, &[], v, mode)?;
    let singles: Vec<Vec<f64>> = cols
        .par_iter()
        .map(|&c| shifted_probe(model, &x, &[(c, deltas[c])], v, mode))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..cols.len())
        .flat_map(|a| (a + 1..cols.len()).map(move |b| (a, b)))
        .collect();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let (i, j) = (cols[a], cols[b]);
            let f11 = shifted_probe(model, &x, &[(i, deltas[i]), (j, deltas[j])], v, mode)?;
            let val = mean_abs((0..n).map(|r| (f11[r] + f00[r]) - (singles[a][r] + singles[b][r])), n);
            Ok(((i, j), val))
        })
        .collect()
}

/// Interaction strengths for every triple drawn from `cols`.
#[allow(clippy::too_many_arguments)]
pub fn triple_scan<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cond: &ConditioningSet,
    v: StateIndex,
    cols: &[usize],
    deltas: &[f64],
    mode: ProbeMode,
    scheme: TripleScheme,
) -> Result<Vec<((usize, usize, usize), f64)>> {
    check_cols(data.d_x(), cols)?;
    check_deltas(deltas)?;
    let x = cond.rows(data)?;
    let n = x.nrows();
    let m = cols.len();
    let sh = |c: usize| (c, deltas[c]);
    let f000 = shifted_probe(model, &x, &[], v, mode)?;
    let singles: Vec<Vec<f64>> = cols
        .par_iter()
        .map(|&c| shifted_probe(model, &x, &[sh(c)], v, mode))
        .collect::<Result<_>>()?;
    let pair_pos: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let doubles: Vec<Vec<f64>> = pair_pos
        .par_iter()
        .map(|&(a, b)| shifted_probe(model, &x, &[sh(cols[a]), sh(cols[b])], v, mode))
        .collect::<Result<_>>()?;
    let pair_slot = |a: usize, b: usize| pair_pos.binary_search(&(a, b)).expect("a < b");
    let triples: Vec<(usize, usize, usize)> = (0..m)
        .flat_map(|a| (a + 1..m).flat_map(move |b| (b + 1..m).map(move |c| (a, b, c))))
        .collect();
    triples
        .par_iter()
        .map(|&(a, b, c)| {
            let (i, j, k) = (cols[a], cols[b], cols[c]);
            let f111 = shifted_probe(model, &x, &[sh(i), sh(j), sh(k)], v, mode)?;
            let (ab, ac, bc) = (&doubles[pair_slot(a, b)], &doubles[pair_slot(a, c)], &doubles[pair_slot(b, c)]);
            let val = mean_abs(
                (0..n).map(|r| {
                    third_difference(
                        scheme,
                        [
                            f000[r],
                            singles[c][r],
                            singles[b][r],
                            bc[r],
                            singles[a][r],
                            ac[r],
                            ab[r],
                            f111[r],
                        ],
                    )
                }),
                n,
            );
            Ok(((i, j, k), val))
        })
        .collect()
}

/// Test loss with `cols` overwritten by zero (the training mean after
/// normalization). The model is untouched.
pub fn leave_one_out_loss<M: TransitionModel + ?Sized>(model: &M, data: &Dataset, cols: &[usize]) -> Result<f64> {
    check_cols(data.d_x(), cols)?;
    Ok(dataset_loss(model, &data.with_columns_set(cols, 0.0)))
}

/// Loss per dropped field alongside the complete-model baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOutReport {
    pub baseline: f64,
    /// `(field, loss)` in schema order.
    pub dropped: Vec<(String, f64)>,
}

impl LeaveOneOutReport {
    pub fn loss(&self, field: &str) -> Option<f64> {
        self.dropped.iter().find(|(f, _)| f == field).map(|(_, l)| *l)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["dropped", "test_loss", "increase"])?;
        w.write_record(["(none)".to_string(), self.baseline.to_string(), "0".to_string()])?;
        for (f, l) in &self.dropped {
            w.write_record([f.clone(), l.to_string(), (l - self.baseline).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Drops each schema field in turn; a categorical field drops all its columns.
pub fn leave_one_out_report<M: TransitionModel + ?Sized>(
    model: &M,
    data: &Dataset,
    schema: &FeatureSchema,
) -> Result<LeaveOneOutReport> {
    if schema.d_x() != data.d_x() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} columns", schema.d_x()),
            found: format!("{} columns", data.d_x()),
        });
    }
    let baseline = dataset_loss(model, data);
    let dropped = schema
        .fields()
        .par_iter()
        .map(|f| {
            let cols = schema.field_columns(&f.name).unwrap_or_default();
            Ok((f.name.clone(), leave_one_out_loss(model, data, cols)?))
        })
        .collect::<Result<_>>()?;
    Ok(LeaveOneOutReport { baseline, dropped })
}

/// Column means over the conditioning rows: the "average loan" in state `u`.
pub fn average_row(data: &Dataset, cond: &ConditioningSet) -> Result<Vec<f64>> {
    let x = cond.rows(data)?;
    Ok(x.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

/// One grid point of a partial-dependence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpPoint {
    /// Normalized values of the varied columns.
    pub coords: Vec<f64>,
    pub probs: [f64; K],
    /// Some coordinate lies outside the training range.
    pub outside_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpTable {
    pub columns: Vec<usize>,
    pub names: Vec<String>,
    pub points: Vec<PdpPoint>,
}

impl PdpTable {
    /// Number of grid points outside the training range.
    pub fn warnings(&self) -> usize {
        self.points.iter().filter(|p| p.outside_range).count()
    }

    /// Long format: one line per grid point with the coordinates, the raw
    /// values when `stats` is given, and the seven probabilities.
    pub fn write_csv<W: std::io::Write>(&self, w: W, stats: Option<&NormalizationStats>) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header: Vec<String> = self.names.clone();
        if stats.is_some() {
            header.extend(self.names.iter().map(|n| format!("{n}_raw")));
        }
        header.extend(StateIndex::ALL.iter().map(|s| format!("p_{}", s.name())));
        header.push("outside_range".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.coords.iter().map(|c| c.to_string()).collect();
            if let Some(s) = stats {
                rec.extend(self.columns.iter().zip(&p.coords).map(|(&c, &z)| s.denormalize_value(c, z).to_string()));
            }
            rec.extend(p.probs.iter().map(|q| q.to_string()));
            rec.push(p.outside_range.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the model on the Cartesian product of 1 to 3 grids, each
/// overwriting one column of `base`. Grid values are normalized; with
/// `stats` present, points beyond the training range are flagged.
pub fn partial_dependence<M: TransitionModel + ?Sized>(
    model: &M,
    base: &[f64],
    vary: &[(usize, Vec<f64>)],
    names: &[String],
    stats: Option<&NormalizationStats>,
) -> Result<PdpTable> {
    let d = model.input_dim();
    if base.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: base.len() });
    }
    if vary.is_empty() || vary.len() > 3 {
        return Err(Error::config("vary", "between one and three features"));
    }
    let cols: Vec<usize> = vary.iter().map(|(c, _)| *c).collect();
    check_cols(d, &cols)?;
    if names.len() != vary.len() {
        return Err(Error::DimensionMismatch {
            expected: vary.len(),
            got: names.len(),
        });
    }
    let mut coords: Vec<Vec<f64>> = vec![vec![]];
    for (_, grid) in vary {
        if grid.is_empty() {
            return Err(Error::config("grid", "empty grid"));
        }
        coords = coords
            .into_iter()
            .flat_map(|p| {
                grid.iter().map(move |&g| {
                    let mut q = p.clone();
                    q.push(g);
                    q
                })
            })
            .collect();
    }
    let mut x = Array2::zeros((coords.len(), d));
    for (mut row, p) in x.rows_mut().into_iter().zip(&coords) {
        row.assign(&ndarray::ArrayView1::from(base));
        for (&c, &z) in cols.iter().zip(p) {
            row[c] = z;
        }
    }
    let probs = model.predict_batch(x.view());
    let points = coords
        .into_iter()
        .zip(probs.rows())
        .map(|(coords, p)| PdpPoint {
            outside_range: stats.is_some_and(|s| cols.iter().zip(&coords).any(|(&c, &z)| s.outside_range(c, z))),
            probs: std::array::from_fn(|k| p[k]),
            coords,
        })
        .collect();
    Ok(PdpTable {
        columns: cols,
        names: names.to_vec(),
        points,
    })
}

/// Evenly spaced grid of `n` points spanning the training range of a column,
/// in normalized units.
pub fn range_grid(stats: &NormalizationStats, col: usize, n: usize) -> Vec<f64> {
    let lo = stats.normalize_value(col, stats.min[col]);
    let hi = stats.normalize_value(col, stats.max[col]);
    match n {
        0 => vec![],
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}
