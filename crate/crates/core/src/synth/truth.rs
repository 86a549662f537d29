use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::softmax;
use crate::state::{legality_mask, StateIndex, K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub feature: usize,
    pub next_state: StateIndex,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub i: usize,
    pub j: usize,
    pub next_state: StateIndex,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub next_state: StateIndex,
    pub coef: f64,
}

/// `coef * max(0, z - knot)` on the standardized feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTerm {
    pub feature: usize,
    pub knot: f64,
    pub next_state: StateIndex,
    pub coef: f64,
}

/// Known transition function used to generate synthetic panels.
///
/// Each feature is standardized as `z = (x - center) / scale`; the logit of
/// next state `v` from state `u` is `state_bias[u][v]` plus every term whose
/// `next_state` is `v`. Masked-out next states get probability exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub features: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub state_bias: [[f64; K]; K],
    #[serde(default)]
    pub linear: Vec<LinearTerm>,
    #[serde(default)]
    pub pairs: Vec<PairTerm>,
    #[serde(default)]
    pub triples: Vec<TripleTerm>,
    #[serde(default)]
    pub thresholds: Vec<ThresholdTerm>,
    #[serde(default = "legality_mask")]
    pub mask: [[bool; K]; K],
}

impl GroundTruthModel {
    /// All coefficients zero, unit scaling.
    pub fn zeros(features: Vec<String>) -> Self {
        let d = features.len();
        GroundTruthModel {
            features,
            center: vec![0.0; d],
            scale: vec![1.0; d],
            state_bias: [[0.0; K]; K],
            linear: vec![],
            pairs: vec![],
            triples: vec![],
            thresholds: vec![],
            mask: legality_mask(),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.center.len() != d || self.scale.len() != d {
            return Err(Error::config("truth.center", "center and scale must have one entry per feature"));
        }
        if let Some(i) = self.scale.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("truth.scale[{i}]"), "must be positive"));
        }
        let bad = |f: usize| f >= d;
        for (n, t) in self.linear.iter().enumerate() {
            if bad(t.feature) {
                return Err(Error::config(format!("truth.linear[{n}].feature"), "out of range"));
            }
        }
        for (n, t) in self.pairs.iter().enumerate() {
            if bad(t.i) || bad(t.j) || t.i == t.j {
                return Err(Error::config(format!("truth.pairs[{n}]"), "features must be distinct and in range"));
            }
        }
        for (n, t) in self.triples.iter().enumerate() {
            if bad(t.i) || bad(t.j) || bad(t.k) || t.i == t.j || t.j == t.k || t.i == t.k {
                return Err(Error::config(format!("truth.triples[{n}]"), "features must be distinct and in range"));
            }
        }
        for (n, t) in self.thresholds.iter().enumerate() {
            if bad(t.feature) {
                return Err(Error::config(format!("truth.thresholds[{n}].feature"), "out of range"));
            }
        }
        for u in StateIndex::transient() {
            if !self.mask[u.index()].iter().any(|&m| m) {
                return Err(Error::config("truth.mask", format!("state {u} has no allowed next state")));
            }
        }
        Ok(())
    }

    /// Unmasked logits from state `state`.
    pub fn logits(&self, x: &[f64], state: StateIndex) -> Result<[f64; K]> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let z: Vec<f64> = x
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect();
        let mut out = self.state_bias[state.index()];
        for t in &self.linear {
            out[t.next_state.index()] += t.coef * z[t.feature];
        }
        for t in &self.pairs {
            out[t.next_state.index()] += t.coef * z[t.i] * z[t.j];
        }
        for t in &self.triples {
            out[t.next_state.index()] += t.coef * z[t.i] * z[t.j] * z[t.k];
        }
        for t in &self.thresholds {
            out[t.next_state.index()] += t.coef * (z[t.feature] - t.knot).max(0.0);
        }
        Ok(out)
    }
}

/// Next-state probabilities of the ground truth at raw feature vector `x`.
pub fn ground_truth_probs(model: &GroundTruthModel, x: &[f64], state: StateIndex) -> Result<[f64; K]> {
    let logits = model.logits(x, state)?;
    let mut out = [0.0; K];
    if state.is_absorbing() {
        out[state.index()] = 1.0;
        return Ok(out);
    }
    let mask = &model.mask[state.index()];
    let legal: Vec<usize> = (0..K).filter(|&v| mask[v]).collect();
    let z: Vec<f64> = legal.iter().map(|&v| logits[v]).collect();
    for (&v, p) in legal.iter().zip(softmax(&z)) {
        out[v] = p;
    }
    Ok(out)
}
