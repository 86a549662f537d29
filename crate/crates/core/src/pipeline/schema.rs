use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::state::{StateIndex, K};

/// Where a raw field comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceGroup {
    /// Loan characteristics fixed at origination.
    Origination,
    /// Monthly loan-level performance fields.
    Performance,
    /// Time-varying economic covariates.
    Macro,
    /// Lagged regional default/prepayment rates.
    Lagged,
    /// Counters derived from the loan's own payment history.
    Behavioral,
    /// One-hot current loan state.
    State,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FieldKind {
    Numeric,
    /// Expands to one indicator per level plus a reserved "other" column.
    Categorical { levels: Vec<String> },
    /// The loan's current state; expands to K one-hot columns.
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Records missing this field are dropped.
    Required,
    /// Missing values become (value 0, indicator 1).
    #[default]
    Indicator,
}

/// One raw input field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub missing: MissingPolicy,
    pub group: SourceGroup,
    /// Whether the field's columns are z-scored.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl FieldSpec {
    pub fn numeric(name: &str, group: SourceGroup) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::Numeric,
            missing: MissingPolicy::Required,
            group,
            normalize: true,
        }
    }

    pub fn optional(name: &str, group: SourceGroup) -> Self {
        FieldSpec {
            missing: MissingPolicy::Indicator,
            ..Self::numeric(name, group)
        }
    }

    pub fn categorical(name: &str, levels: &[&str], group: SourceGroup) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind: FieldKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            missing: MissingPolicy::Required,
            group,
            normalize: true,
        }
    }

    pub fn state() -> Self {
        FieldSpec {
            name: "state".to_string(),
            kind: FieldKind::State,
            missing: MissingPolicy::Required,
            group: SourceGroup::State,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Indicator,
    CategoricalLevel,
}

/// One column of the design matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Raw field this column was expanded from.
    pub field: String,
    pub group: SourceGroup,
    pub normalize: bool,
}

pub const OTHER_LEVEL: &str = "__other__";

/// A raw field value.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Missing,
    Number(f64),
    Text(String),
}

impl RawValue {
    /// Empty strings and `NA` are missing; anything parseable as a float is a number.
    pub fn parse(s: &str) -> RawValue {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
            RawValue::Missing
        } else if let Ok(v) = t.parse::<f64>() {
            RawValue::Number(v)
        } else {
            RawValue::Text(t.to_string())
        }
    }
}

/// Why a single row could not be encoded.
#[derive(Debug, Clone, PartialEq)]
pub enum RowIssue {
    MissingRequired(String),
    BadValue { field: String, value: String },
}

/// Result of encoding one row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRow {
    pub values: Vec<f64>,
    /// Categorical fields whose value was routed to the "other" column.
    pub unknown_levels: Vec<String>,
}

/// Ordered raw fields and the design-matrix columns they expand to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDef", into = "SchemaDef")]
pub struct FeatureSchema {
    fields: Vec<FieldSpec>,
    columns: Vec<Column>,
    state_columns: [usize; K],
    field_columns: HashMap<String, Vec<usize>>,
    column_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaDef {
    fields: Vec<FieldSpec>,
}

impl TryFrom<SchemaDef> for FeatureSchema {
    type Error = Error;
    fn try_from(def: SchemaDef) -> Result<Self> {
        FeatureSchema::new(def.fields)
    }
}

impl From<FeatureSchema> for SchemaDef {
    fn from(s: FeatureSchema) -> Self {
        SchemaDef { fields: s.fields }
    }
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &fields {
            if !seen.insert(f.name.clone()) {
                return Err(Error::config("schema.fields", format!("duplicate field `{}`", f.name)));
            }
        }
        let n_state = fields.iter().filter(|f| f.kind == FieldKind::State).count();
        if n_state != 1 {
            return Err(Error::config(
                "schema.fields",
                format!("exactly one state field required, found {n_state}"),
            ));
        }
        let mut columns = Vec::new();
        let mut field_columns = HashMap::new();
        let mut state_columns = [0usize; K];
        for f in &fields {
            let start = columns.len();
            let col = |name: String, kind: ColumnKind| Column {
                name,
                kind,
                field: f.name.clone(),
                group: f.group,
                normalize: f.normalize,
            };
            match &f.kind {
                FieldKind::Numeric => {
                    columns.push(col(f.name.clone(), ColumnKind::Numeric));
                    if f.missing == MissingPolicy::Indicator {
                        columns.push(col(format!("{}_missing", f.name), ColumnKind::Indicator));
                    }
                }
                FieldKind::Categorical { levels } => {
                    let mut lv = BTreeSet::new();
                    for l in levels {
                        if !lv.insert(l) || l == OTHER_LEVEL {
                            return Err(Error::config(
                                format!("schema.fields.{}.levels", f.name),
                                format!("duplicate or reserved level `{l}`"),
                            ));
                        }
                        columns.push(col(format!("{}={}", f.name, l), ColumnKind::CategoricalLevel));
                    }
                    columns.push(col(format!("{}={}", f.name, OTHER_LEVEL), ColumnKind::CategoricalLevel));
                }
                FieldKind::State => {
                    for s in StateIndex::ALL {
                        state_columns[s.index()] = columns.len();
                        columns.push(col(format!("{}={}", f.name, s), ColumnKind::Indicator));
                    }
                }
            }
            field_columns.insert(f.name.clone(), (start..columns.len()).collect());
        }
        let mut column_index = HashMap::new();
        for (i, c) in columns.iter().enumerate() {
            if column_index.insert(c.name.clone(), i).is_some() {
                return Err(Error::config("schema.fields", format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(FeatureSchema {
            fields,
            columns,
            state_columns,
            field_columns,
            column_index,
        })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Number of design columns, d_X.
    pub fn d_x(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_index.get(name).copied()
    }

    pub fn require_column(&self, name: &str) -> Result<usize> {
        self.column_index(name)
            .ok_or_else(|| Error::config("schema", format!("no column named `{name}`")))
    }

    /// Columns expanded from the named field.
    pub fn field_columns(&self, field: &str) -> Option<&[usize]> {
        self.field_columns.get(field).map(|v| v.as_slice())
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Column of the one-hot state group for each state.
    pub fn state_columns(&self) -> &[usize; K] {
        &self.state_columns
    }

    pub fn state_field(&self) -> &str {
        &self.fields.iter().find(|f| f.kind == FieldKind::State).expect("validated").name
    }

    pub fn is_state_column(&self, col: usize) -> bool {
        self.state_columns.contains(&col)
    }

    /// Fields whose absence drops a record.
    pub fn required_fields(&self) -> Vec<&str> {
        self.fields
            .iter()
            .filter(|f| f.missing == MissingPolicy::Required && f.kind != FieldKind::State)
            .map(|f| f.name.as_str())
            .collect()
    }

    /// Decodes the state one-hot of a raw (unnormalized) row.
    pub fn decode_state(&self, row: &[f64]) -> Option<StateIndex> {
        let mut found = None;
        for s in StateIndex::ALL {
            let v = row[self.state_columns[s.index()]];
            if v == 1.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(s);
            } else if v != 0.0 {
                return None;
            }
        }
        found
    }

    /// Writes the one-hot for `state` into a raw row.
    pub fn set_state(&self, row: &mut [f64], state: StateIndex) {
        for s in StateIndex::ALL {
            row[self.state_columns[s.index()]] = if s == state { 1.0 } else { 0.0 };
        }
    }

    /// SHA-256 over the canonical JSON of the field list.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&SchemaDef {
            fields: self.fields.clone(),
        })
        .expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Encodes one record; `get` returns the raw value of a named field.
    pub fn encode_row<F>(&self, state: StateIndex, get: F) -> std::result::Result<EncodedRow, RowIssue>
    where
        F: Fn(&str) -> RawValue,
    {
        let mut values = vec![0.0; self.d_x()];
        let mut unknown_levels = Vec::new();
        for f in &self.fields {
            let cols = &self.field_columns[&f.name];
            match &f.kind {
                FieldKind::State => {
                    values[self.state_columns[state.index()]] = 1.0;
                }
                FieldKind::Numeric => match get(&f.name) {
                    RawValue::Number(v) if v.is_finite() => values[cols[0]] = v,
                    RawValue::Text(t) => {
                        return Err(RowIssue::BadValue {
                            field: f.name.clone(),
                            value: t,
                        })
                    }
                    _ => match f.missing {
                        MissingPolicy::Required => return Err(RowIssue::MissingRequired(f.name.clone())),
                        MissingPolicy::Indicator => values[cols[1]] = 1.0,
                    },
                },
                FieldKind::Categorical { levels } => {
                    let raw = match get(&f.name) {
                        RawValue::Missing => None,
                        RawValue::Number(v) => Some(format_level(v)),
                        RawValue::Text(t) => Some(t),
                    };
                    let Some(level) = raw else {
                        match f.missing {
                            MissingPolicy::Required => {
                                return Err(RowIssue::MissingRequired(f.name.clone()))
                            }
                            MissingPolicy::Indicator => {
                                values[*cols.last().expect("other column")] = 1.0;
                                continue;
                            }
                        }
                    };
                    match levels.iter().position(|l| *l == level) {
                        Some(i) => values[cols[i]] = 1.0,
                        None => {
                            values[*cols.last().expect("other column")] = 1.0;
                            unknown_levels.push(f.name.clone());
                        }
                    }
                }
            }
        }
        Ok(EncodedRow {
            values,
            unknown_levels,
        })
    }
}

fn format_level(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
