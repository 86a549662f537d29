use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use super::{MlpParams, TransitionModel};
use crate::error::{Error, Result};
use crate::pipeline::{FeatureSchema, NormalizationStats};
use crate::state::StateIndex;

/// One or more networks sharing a schema and normalization; predictions are
/// the arithmetic mean of member probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<MlpParams>,
    pub member_seeds: Vec<u64>,
    pub schema: FeatureSchema,
    pub stats: NormalizationStats,
    /// Free-form provenance (training config, seeds, data hashes).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EnsembleModel {
    pub fn new(
        members: Vec<MlpParams>,
        member_seeds: Vec<u64>,
        schema: FeatureSchema,
        stats: NormalizationStats,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("an ensemble needs at least one member".into()));
        }
        if member_seeds.len() != members.len() {
            return Err(Error::DimensionMismatch {
                expected: members.len(),
                got: member_seeds.len(),
            });
        }
        let d = schema.d_x();
        if stats.d_x() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: stats.d_x(),
            });
        }
        if let Some(m) = members.iter().find(|m| m.input_dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: m.input_dim(),
            });
        }
        Ok(EnsembleModel {
            members,
            member_seeds,
            schema,
            stats,
            metadata: BTreeMap::new(),
        })
    }

    pub fn single(params: MlpParams, seed: u64, schema: FeatureSchema, stats: NormalizationStats) -> Result<Self> {
        Self::new(vec![params], vec![seed], schema, stats)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }
}

impl TransitionModel for EnsembleModel {
    fn input_dim(&self) -> usize {
        self.schema.d_x()
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut acc = self.members[0].predict_batch(x);
        for m in &self.members[1..] {
            acc += &m.predict_batch(x);
        }
        acc / self.members.len() as f64
    }

    fn input_gradient_batch(&self, x: ArrayView2<'_, f64>, v: StateIndex) -> Array2<f64> {
        let mut acc = TransitionModel::input_gradient_batch(&self.members[0], x, v);
        for m in &self.members[1..] {
            acc += &TransitionModel::input_gradient_batch(m, x, v);
        }
        acc / self.members.len() as f64
    }

    fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        match self.members.as_slice() {
            [only] => Some(only.logits_batch(x)),
            _ => None,
        }
    }

    fn num_params(&self) -> usize {
        self.members.iter().map(|m| m.num_params()).sum()
    }
}
