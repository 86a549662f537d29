//! Raw loan records to normalized design matrices: encoding, temporal splits,
//! normalization, loan-keyed sharding and minibatch streaming.

mod dataset;
mod encode;
mod normalize;
mod schema;
mod shard;
mod split;

pub use dataset::Dataset;
pub use encode::{
    encode, join_tables, load_records, read_table, DropReport, EncodeOutput, JoinReport, RawRecord, Table,
    LOAN_ID, PERIOD, STATUS,
};
pub use normalize::{apply_normalization, fit_normalization, flag_unnormalized_columns, NormalizationStats, SCALE_GUARD};
pub use schema::{
    Column, ColumnKind, EncodedRow, FeatureSchema, FieldKind, FieldSpec, MissingPolicy, RawValue, RowIssue,
    SourceGroup, OTHER_LEVEL,
};
pub use shard::{
    loan_hash, minibatch_stream, read_cache, shard_assign, write_cache, write_shards, Batch, BatchIter, BatchSource,
    CacheSidecar, InMemorySource, ShardLayout, CACHE_FORMAT, CACHE_VERSION, HASH_ALGORITHM_ID,
};
pub use split::{format_month, month_index, parse_month, split_with_config, temporal_split, Split, SplitConfig};

use crate::error::Result;
use crate::state::LoanMonthSample;

/// Normalized train/validation/test datasets plus the artifacts needed to
/// reproduce the transformation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub schema: FeatureSchema,
    pub stats: NormalizationStats,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Splits encoded samples by period, fits normalization on the training split
/// and applies it to all three.
pub fn prepare(schema: &FeatureSchema, samples: Vec<LoanMonthSample>, split: &SplitConfig) -> Result<PreparedData> {
    let s = split_with_config(samples, split)?;
    let d = schema.d_x();
    let mut train = Dataset::from_samples(&s.train, d)?;
    let mut valid = Dataset::from_samples(&s.valid, d)?;
    let mut test = Dataset::from_samples(&s.test, d)?;
    let stats = fit_normalization(schema, train.x.view())?;
    apply_normalization(&stats, &mut train.x)?;
    apply_normalization(&stats, &mut valid.x)?;
    apply_normalization(&stats, &mut test.x)?;
    Ok(PreparedData {
        schema: schema.clone(),
        stats,
        train,
        valid,
        test,
        warnings: s.warnings,
    })
}
