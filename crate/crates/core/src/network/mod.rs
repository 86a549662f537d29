//! Feedforward softmax transition network.
//!
//! Layer `l` computes `h_l = g_l(W_l h_{l-1} + b_l)` with `h_0 = x`, a hidden
//! activation for `l < L` and softmax on the output layer, whose width is the
//! number of loan states. Gradients are derived by hand and checked against
//! finite differences in the tests.

mod ensemble;
mod io;

pub use ensemble::EnsembleModel;
pub use io::{
    deserialize, deserialize_expecting, read_model_file, serialize, write_model_file, WeightPrecision,
    MODEL_FILE_MAGIC, MODEL_FILE_VERSION,
};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{StateIndex, K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer widths and regularization settings.
///
/// `keep[0]` is the keep-probability of input units, `keep[l]` that of the
/// `l`-th hidden layer's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub keep: Vec<f64>,
}

impl Architecture {
    /// No dropout anywhere.
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        let keep = vec![1.0; hidden.len() + 1];
        Architecture {
            input_dim,
            hidden,
            activation,
            keep,
        }
    }

    pub fn with_dropout(mut self, keep_input: f64, keep_hidden: f64) -> Self {
        self.keep = std::iter::once(keep_input)
            .chain(std::iter::repeat_n(keep_hidden, self.hidden.len()))
            .collect();
        self
    }

    /// Number of weight layers, L.
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `[d_0, d_1, ..., d_L]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(K))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("architecture.input_dim", "must be at least 1"));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::config(
                format!("architecture.hidden[{i}]"),
                "layer width must be at least 1",
            ));
        }
        if self.keep.len() != self.hidden.len() + 1 {
            return Err(Error::config(
                "architecture.keep",
                format!(
                    "expected {} keep-probabilities (input + each hidden layer), got {}",
                    self.hidden.len() + 1,
                    self.keep.len()
                ),
            ));
        }
        if let Some(i) = self.keep.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::config(format!("architecture.keep[{i}]"), "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_l × d_{l-1}`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Gradient (or velocity) with the same shapes as `MlpParams::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
        .collect()
}

impl MlpParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// All parameters in layer order, each layer's `W` (row-major) then `b`.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Sum of squared weights, plus squared biases when `include_biases`.
    pub fn l2_norm_sq(&self, include_biases: bool) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                let w: f64 = l.w.iter().map(|v| v * v).sum();
                let b: f64 = if include_biases {
                    l.b.iter().map(|v| v * v).sum()
                } else {
                    0.0
                };
                w + b
            })
            .sum()
    }

    /// `θ += step`.
    pub fn apply_step(&mut self, step: &ParamGrads) {
        for (l, s) in self.layers.iter_mut().zip(&step.layers) {
            l.w += &s.w;
            l.b += &s.b;
        }
    }

    /// Rounds every parameter to 32-bit precision.
    pub fn rounded_to_f32(&self) -> MlpParams {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.w.mapv_inplace(|v| v as f32 as f64);
            l.b.mapv_inplace(|v| v as f32 as f64);
        }
        out
    }

    /// Pre-softmax outputs for a batch (rows are samples).
    pub fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            if i < last {
                let act = self.arch.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        h
    }

    /// Output probabilities for a batch, inference mode.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = self.logits_batch(x);
        softmax_rows_inplace(&mut z);
        z
    }
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// He scaling for relu, Xavier-style `sqrt(1/fan_in)` otherwise; zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<MlpParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = arch.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = match arch.activation {
                Activation::Relu => 2.0,
                _ => 1.0,
            };
            let scale = (gain / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                let n: f64 = StandardNormal.sample(&mut rng);
                n * scale
            });
            Layer {
                w,
                b: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams {
        arch: arch.clone(),
        layers,
    })
}

/// Forward evaluation mode.
pub enum ForwardMode<'a> {
    Infer,
    /// Inverted dropout driven by the given generator.
    Train(&'a mut dyn RngCore),
}

/// Per-layer quantities retained for backpropagation over a batch.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// Input to each weight layer after dropout (`h_{l-1}` masked and rescaled).
    pub layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations `z_l` of each layer.
    pub pre: Vec<Array2<f64>>,
    /// Scaled dropout masks applied to each layer input (`None` when keep = 1).
    pub masks: Vec<Option<Array2<f64>>>,
    /// Output probabilities.
    pub probs: Array2<f64>,
}

/// Trace for a single input.
#[derive(Debug, Clone)]
pub struct ForwardTrace(pub BatchTrace);

pub fn forward_batch(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    mut mode: ForwardMode<'_>,
) -> Result<BatchTrace> {
    if x.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: x.ncols(),
        });
    }
    let act = params.arch.activation;
    let last = params.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut masks = Vec::with_capacity(params.layers.len());
    let mut h = x.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let keep = params.arch.keep[l];
        let mask = match &mut mode {
            ForwardMode::Train(rng) if keep < 1.0 => {
                let scale = 1.0 / keep;
                let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                });
                h *= &m;
                Some(m)
            }
            _ => None,
        };
        let mut z = h.dot(&layer.w.t());
        z += &layer.b;
        let next = if l < last {
            z.mapv(|v| act.apply(v))
        } else {
            let mut p = z.clone();
            softmax_rows_inplace(&mut p);
            p
        };
        layer_inputs.push(h);
        pre.push(z);
        masks.push(mask);
        h = next;
    }
    Ok(BatchTrace {
        layer_inputs,
        pre,
        masks,
        probs: h,
    })
}

/// Single-input forward pass; returns the trace only in train mode.
pub fn forward(
    params: &MlpParams,
    x: &[f64],
    mode: ForwardMode<'_>,
) -> Result<([f64; K], Option<ForwardTrace>)> {
    let train = matches!(mode, ForwardMode::Train(_));
    let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
    let trace = forward_batch(params, xb, mode)?;
    let p = row_to_array(trace.probs.row(0).as_slice().expect("row-major"));
    Ok((p, train.then_some(ForwardTrace(trace))))
}

/// Like `forward` in infer mode, but always returns the trace.
pub fn forward_traced(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
    Ok(ForwardTrace(forward_batch(params, xb, ForwardMode::Infer)?))
}

fn row_to_array(row: &[f64]) -> [f64; K] {
    let mut out = [0.0; K];
    out.copy_from_slice(row);
    out
}

/// L2 penalty settings for `backward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub lambda: f64,
    pub include_biases: bool,
}

impl Penalty {
    pub fn weights(lambda: f64) -> Self {
        Penalty {
            lambda,
            include_biases: false,
        }
    }
}

/// Gradient of `mean_i[-log p(target_i | x_i)] + λ Σ W²` for a batch.
///
/// Returns the gradients and the mean data loss. Output-layer pre-activation
/// gradient per sample is `p - e_target`.
pub fn backward_batch(
    params: &MlpParams,
    trace: &BatchTrace,
    targets: &[usize],
    penalty: Penalty,
) -> Result<(ParamGrads, f64)> {
    let n = trace.probs.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if trace.pre.len() != params.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: params.layers.len(),
            got: trace.pre.len(),
        });
    }
    let mut loss = 0.0;
    let mut dz = trace.probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= trace.probs[[i, t]].max(1e-300).ln();
        dz[[i, t]] -= 1.0;
    }
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    dz *= inv_n;
    loss *= inv_n;
    let act = params.arch.activation;
    let mut grads = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let mut gw = dz.t().dot(&trace.layer_inputs[l]);
        let mut gb = dz.sum_axis(Axis(0));
        if penalty.lambda != 0.0 {
            gw.scaled_add(2.0 * penalty.lambda, &layer.w);
            if penalty.include_biases {
                gb.scaled_add(2.0 * penalty.lambda, &layer.b);
            }
        }
        grads.push(Layer { w: gw, b: gb });
        if l > 0 {
            let mut dh = dz.dot(&layer.w);
            if let Some(m) = &trace.masks[l] {
                dh *= m;
            }
            Zip::from(&mut dh)
                .and(&trace.pre[l - 1])
                .for_each(|d, &z| *d *= act.derivative(z));
            dz = dh;
        }
    }
    grads.reverse();
    Ok((ParamGrads { layers: grads }, loss))
}

/// Single-sample gradient of `-log h(target, x) + λ Σ W²`.
pub fn backward(
    params: &MlpParams,
    trace: Option<&ForwardTrace>,
    target: StateIndex,
    l2_lambda: f64,
) -> Result<ParamGrads> {
    let trace = trace.ok_or_else(|| Error::Unavailable("backward requires a forward trace".into()))?;
    backward_batch(params, &trace.0, &[target.index()], Penalty::weights(l2_lambda)).map(|r| r.0)
}

/// Gradient of the output probability `h(v, x)` with respect to every input
/// coordinate, one row per input. Inference mode (no dropout).
pub fn input_gradient_batch(
    params: &MlpParams,
    x: ArrayView2<'_, f64>,
    v: StateIndex,
) -> Result<Array2<f64>> {
    let trace = forward_batch(params, x, ForwardMode::Infer)?;
    let vi = v.index();
    // d p_v / d z_L = p_v (e_v - p)
    let mut dz = trace.probs.clone();
    for mut row in dz.rows_mut() {
        let pv = row[vi];
        row.mapv_inplace(|p| -pv * p);
        row[vi] += pv;
    }
    let act = params.arch.activation;
    for l in (0..params.layers.len()).rev() {
        let mut dh = dz.dot(&params.layers[l].w);
        if l == 0 {
            return Ok(dh);
        }
        Zip::from(&mut dh)
            .and(&trace.pre[l - 1])
            .for_each(|d, &z| *d *= act.derivative(z));
        dz = dh;
    }
    unreachable!("network has at least one layer")
}

pub fn input_gradient(params: &MlpParams, x: &[f64], v: StateIndex) -> Result<Vec<f64>> {
    let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
    Ok(input_gradient_batch(params, xb, v)?.row(0).to_vec())
}

/// Anything that maps normalized covariate rows to next-state probabilities.
pub trait TransitionModel: Send + Sync {
    fn input_dim(&self) -> usize;

    /// Probabilities, one row of K per input row.
    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;

    /// `∂h(v, x)/∂x`, one row per input row.
    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, v: StateIndex) -> Array2<f64>;

    /// Pre-softmax outputs, when the model has a single well-defined logit layer.
    fn logits_batch(&self, _x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        None
    }

    fn num_params(&self) -> usize;

    fn predict(&self, x: &[f64]) -> [f64; K] {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        row_to_array(self.predict_batch(xb).row(0).as_slice().expect("row-major"))
    }
}

impl TransitionModel for MlpParams {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        MlpParams::predict_batch(self, x)
    }

    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, v: StateIndex) -> Array2<f64> {
        input_gradient_batch(self, x, v).expect("input dimension checked by caller")
    }

    fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        Some(MlpParams::logits_batch(self, x))
    }

    fn num_params(&self) -> usize {
        MlpParams::num_params(self)
    }
}

impl<T: TransitionModel + ?Sized> TransitionModel for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (**self).predict_batch(x)
    }
    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, v: StateIndex) -> Array2<f64> {
        (**self).input_gradient_batch(x, v)
    }
    fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        (**self).logits_batch(x)
    }
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_model(d: usize) -> MlpParams {
        MlpParams {
            arch: Architecture::new(d, vec![], Activation::Relu),
            layers: vec![Layer {
                w: Array2::zeros((K, d)),
                b: Array1::zeros(K),
            }],
        }
    }

    #[test]
    fn softmax_basics() {
        let p = softmax(&[0.0; K]);
        assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let z = [0.3, -1.2, 4.0, 0.0, 2.2, -7.0, 1.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.4).collect();
        let (a, b) = (softmax(&z), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let big = softmax(&[1e3, -1e3, 0.0]);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let arch = Architecture::new(5, vec![], Activation::Relu);
        let p = init_params(&arch, 1).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].w.dim(), (K, 5));
        let arch = Architecture::new(5, vec![8, 4], Activation::Tanh);
        assert_eq!(init_params(&arch, 9).unwrap(), init_params(&arch, 9).unwrap());
        assert_ne!(init_params(&arch, 9).unwrap(), init_params(&arch, 10).unwrap());
        assert!(p.layers[0].b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn relu_init_variance() {
        let arch = Architecture::new(200, vec![200], Activation::Relu);
        let p = init_params(&arch, 3).unwrap();
        let w = &p.layers[0].w;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 200.0;
        assert!((var / target - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_network_is_uniform_and_bias_sets_distribution() {
        let mut m = zero_model(3);
        let (p, t) = forward(&m, &[1.0, -2.0, 0.5], ForwardMode::Infer).unwrap();
        assert!(t.is_none());
        assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        let target = [0.5, 0.2, 0.1, 0.05, 0.05, 0.04, 0.06];
        m.layers[0].b = Array1::from_iter(target.iter().map(|v: &f64| v.ln()));
        let (p, _) = forward(&m, &[3.0, 1.0, -1.0], ForwardMode::Infer).unwrap();
        for (a, b) in p.iter().zip(target) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn keep_one_train_matches_infer() {
        let arch = Architecture::new(4, vec![6, 5], Activation::Relu);
        let p = init_params(&arch, 4).unwrap();
        let x = [0.3, -0.1, 2.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = forward(&p, &x, ForwardMode::Train(&mut rng)).unwrap();
        let (b, _) = forward(&p, &x, ForwardMode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch() {
        let m = zero_model(3);
        assert!(matches!(
            forward(&m, &[1.0], ForwardMode::Infer),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn output_gradient_is_p_minus_onehot() {
        let m = zero_model(2);
        let trace = forward_traced(&m, &[1.0, 2.0]).unwrap();
        let g = backward(&m, Some(&trace), StateIndex::DD30, 0.0).unwrap();
        // with one layer, db = p - e_target
        for k in 0..K {
            let expected = 1.0 / 7.0 - if k == 1 { 1.0 } else { 0.0 };
            assert!((g.layers[0].b[k] - expected).abs() < 1e-15);
            assert!((g.layers[0].w[[k, 1]] - 2.0 * expected).abs() < 1e-15);
        }
    }

    #[test]
    fn penalty_gradient_is_two_lambda_w() {
        let arch = Architecture::new(3, vec![4], Activation::Sigmoid);
        let p = init_params(&arch, 2).unwrap();
        let trace = forward_batch(&p, Array2::zeros((0, 3)).view(), ForwardMode::Infer).unwrap();
        let (g, loss) = backward_batch(&p, &trace, &[], Penalty::weights(0.3)).unwrap();
        assert_eq!(loss, 0.0);
        for (gl, pl) in g.layers.iter().zip(&p.layers) {
            for (a, b) in gl.w.iter().zip(pl.w.iter()) {
                assert!((a - 0.6 * b).abs() < 1e-15);
            }
            assert!(gl.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_requires_trace() {
        let m = zero_model(2);
        assert!(backward(&m, None, StateIndex::Current, 0.0).is_err());
    }

    #[test]
    fn logistic_regression_input_gradient_closed_form() {
        let arch = Architecture::new(3, vec![], Activation::Relu);
        let mut m = init_params(&arch, 5).unwrap();
        m.layers[0].b = array![0.1, -0.2, 0.3, 0.0, 0.5, -1.0, 0.2];
        let x = [0.4, -1.3, 0.8];
        let (p, _) = forward(&m, &x, ForwardMode::Infer).unwrap();
        let w = &m.layers[0].w;
        for v in StateIndex::ALL {
            let g = input_gradient(&m, &x, v).unwrap();
            for j in 0..3 {
                let mix: f64 = (0..K).map(|k| p[k] * w[[k, j]]).sum();
                let closed = p[v.index()] * (w[[v.index(), j]] - mix);
                assert!((g[j] - closed).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_weight_column_has_zero_input_gradient() {
        let arch = Architecture::new(3, vec![5], Activation::Tanh);
        let mut m = init_params(&arch, 6).unwrap();
        m.layers[0].w.column_mut(1).fill(0.0);
        let g = input_gradient(&m, &[1.0, 7.0, -2.0], StateIndex::PaidOff).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let arch = Architecture::new(3, vec![2], Activation::Relu);
        let mut m = init_params(&arch, 1).unwrap();
        let mut f = m.flat();
        assert_eq!(f.len(), arch.num_params());
        f[0] = 42.0;
        m.set_flat(&f).unwrap();
        assert_eq!(m.layers[0].w[[0, 0]], 42.0);
        assert!(m.set_flat(&f[1..]).is_err());
    }

    #[test]
    fn architecture_validation_names_key() {
        let mut a = Architecture::new(3, vec![4, 0], Activation::Relu);
        assert!(a.validate().unwrap_err().to_string().contains("hidden[1]"));
        a.hidden = vec![4];
        a.keep = vec![1.0, 0.0];
        assert!(a.validate().unwrap_err().to_string().contains("keep[1]"));
    }
}
