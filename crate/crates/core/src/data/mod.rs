//! Tabular datasets: schema, CSV ingestion, sensitive-group combination,
//! [0,1] encoding, the synthetic Lipton generator and stratified splitting.

mod encode;
mod folds;
mod io;
mod lipton;

pub use encode::{argmax, Block, BlockKind, EncodedMatrix, Encoder};
pub use folds::{holdout_split, split_kfold, FoldPlan};
pub use io::{load_csv, load_csv_reader, write_csv, write_csv_writer};
pub use lipton::{generate_lipton, LiptonCalibration, LIPTON};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("unexpected column `{column}` not declared in the schema")]
    UnexpectedColumn { column: String },
    #[error("line {line}, column `{column}`: unknown category `{value}`")]
    UnknownCategory {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}, column `{column}`: non-numeric value `{value}`")]
    NonNumericValue {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}, column `{column}`: missing value")]
    MissingValue { line: u64, column: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("group `{group}` has no rows")]
    EmptyGroup { group: String },
    #[error("the sensitive attribute defines fewer than two groups")]
    SingleGroup,
    #[error("group {group} has {size} rows, fewer than the {folds} requested folds")]
    GroupTooSmall {
        group: usize,
        size: usize,
        folds: usize,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset schema does not match the fitted encoder")]
    SchemaMismatch,
    #[error("encoded matrix has {found} columns, encoder expects {expected}")]
    BlockShapeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sensitive,
    Decision,
    Other,
}

/// Declaration of one column.
///
/// For the decision attribute `categories` must hold exactly two labels, the
/// second being the positive outcome. For the sensitive attribute the first
/// category is the privileged group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

fn default_role() -> Role {
    Role::Other
}

impl AttributeSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Numeric,
            role: Role::Other,
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Categorical,
            role: Role::Other,
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Category codes indexing `AttributeSpec::categories`.
    Categorical(Vec<usize>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataWarning {
    /// A combination of sensitive values that never occurs in the data.
    EmptyGroup { combination: String },
}

/// An immutable table with exactly one sensitive and one binary decision
/// attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Vec<AttributeSpec>,
    columns: Vec<Column>,
    sensitive: usize,
    decision: usize,
}

impl Dataset {
    pub fn new(schema: Vec<AttributeSpec>, columns: Vec<Column>) -> Result<Self, DataError> {
        validate_schema(&schema)?;
        if schema.len() != columns.len() {
            return Err(DataError::InvalidSchema(format!(
                "{} attributes but {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(DataError::InvalidArgument("dataset has no rows".into()));
        }
        for (spec, col) in schema.iter().zip(&columns) {
            if col.len() != n {
                return Err(DataError::InvalidSchema(format!(
                    "column `{}` has {} rows, expected {n}",
                    spec.name,
                    col.len()
                )));
            }
            match (spec.kind, col) {
                (AttributeKind::Numeric, Column::Numeric(v)) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(DataError::InvalidArgument(format!(
                            "column `{}` holds a non-finite value",
                            spec.name
                        )));
                    }
                }
                (AttributeKind::Categorical, Column::Categorical(v)) => {
                    if let Some(&bad) = v.iter().find(|&&c| c >= spec.categories.len()) {
                        return Err(DataError::InvalidArgument(format!(
                            "column `{}` holds category code {bad} out of range",
                            spec.name
                        )));
                    }
                }
                _ => {
                    return Err(DataError::InvalidSchema(format!(
                        "column `{}` storage does not match its kind",
                        spec.name
                    )))
                }
            }
        }
        let sensitive = schema
            .iter()
            .position(|a| a.role == Role::Sensitive)
            .expect("validated");
        let decision = schema
            .iter()
            .position(|a| a.role == Role::Decision)
            .expect("validated");
        let ds = Self {
            schema,
            columns,
            sensitive,
            decision,
        };
        let counts = ds.group_counts();
        if counts.len() < 2 {
            return Err(DataError::SingleGroup);
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyGroup {
                group: ds.group_labels()[empty].clone(),
            });
        }
        Ok(ds)
    }

    pub fn schema(&self) -> &[AttributeSpec] {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<(&AttributeSpec, &Column)> {
        let idx = self.schema.iter().position(|a| a.name == name)?;
        Some((&self.schema[idx], &self.columns[idx]))
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sensitive_index(&self) -> usize {
        self.sensitive
    }

    pub fn decision_index(&self) -> usize {
        self.decision
    }

    /// Number of sensitive groups.
    pub fn k(&self) -> usize {
        self.schema[self.sensitive].categories.len()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.schema[self.sensitive].categories
    }

    /// Zero-based group index of every row; 0 is privileged.
    pub fn groups(&self) -> &[usize] {
        match &self.columns[self.sensitive] {
            Column::Categorical(v) => v,
            Column::Numeric(_) => unreachable!("sensitive attribute is categorical"),
        }
    }

    /// Decision outcome per row (true = positive).
    pub fn decisions(&self) -> Vec<bool> {
        match &self.columns[self.decision] {
            Column::Categorical(v) => v.iter().map(|&c| c == 1).collect(),
            Column::Numeric(_) => unreachable!("decision attribute is categorical"),
        }
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &g in self.groups() {
            counts[g] += 1;
        }
        counts
    }

    pub fn group_proportions(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.group_counts().iter().map(|&c| c as f64 / n).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        let d = self.decisions();
        d.iter().filter(|&&y| y).count() as f64 / d.len() as f64
    }

    /// P(Y = 1 | group) for every group.
    pub fn group_positive_rates(&self) -> Vec<f64> {
        positive_rates(self.groups(), &self.decisions(), self.k())
    }

    /// Rows restricted to `rows`, keeping the full group set.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, DataError> {
        let columns = self.columns.iter().map(|c| c.select(rows)).collect();
        Self::new(self.schema.clone(), columns)
    }

    /// Replace the column named `name`, keeping its declaration.
    pub fn with_column(&self, name: &str, column: Column) -> Result<Self, DataError> {
        let idx = self
            .schema
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.to_string(),
            })?;
        let mut columns = self.columns.clone();
        columns[idx] = column;
        Self::new(self.schema.clone(), columns)
    }

    /// Content hash over the schema and every value.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        let mut buf = Vec::new();
        write_csv_writer(self, &mut buf).expect("in-memory write");
        hasher.update(&buf);
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn positive_rates(groups: &[usize], decisions: &[bool], k: usize) -> Vec<f64> {
    let mut pos = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&g, &y) in groups.iter().zip(decisions) {
        tot[g] += 1;
        if y {
            pos[g] += 1;
        }
    }
    pos.iter()
        .zip(&tot)
        .map(|(&p, &t)| if t == 0 { 0.0 } else { p as f64 / t as f64 })
        .collect()
}

fn validate_schema(schema: &[AttributeSpec]) -> Result<(), DataError> {
    if schema.is_empty() {
        return Err(DataError::InvalidSchema("no attributes".into()));
    }
    let mut names = std::collections::HashSet::new();
    for a in schema {
        if !names.insert(a.name.as_str()) {
            return Err(DataError::InvalidSchema(format!(
                "duplicate attribute `{}`",
                a.name
            )));
        }
        match a.kind {
            AttributeKind::Categorical => {
                if a.categories.is_empty() {
                    return Err(DataError::InvalidSchema(format!(
                        "categorical attribute `{}` declares no categories",
                        a.name
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for c in &a.categories {
                    if c.is_empty() || !seen.insert(c.as_str()) {
                        return Err(DataError::InvalidSchema(format!(
                            "attribute `{}` has an empty or duplicate category",
                            a.name
                        )));
                    }
                }
            }
            AttributeKind::Numeric => {
                if !a.categories.is_empty() {
                    return Err(DataError::InvalidSchema(format!(
                        "numeric attribute `{}` declares categories",
                        a.name
                    )));
                }
            }
        }
    }
    let sensitive: Vec<_> = schema.iter().filter(|a| a.role == Role::Sensitive).collect();
    if sensitive.len() != 1 {
        return Err(DataError::InvalidSchema(format!(
            "expected exactly one sensitive attribute, found {}",
            sensitive.len()
        )));
    }
    if sensitive[0].kind != AttributeKind::Categorical {
        return Err(DataError::InvalidSchema(
            "the sensitive attribute must be categorical".into(),
        ));
    }
    let decision: Vec<_> = schema.iter().filter(|a| a.role == Role::Decision).collect();
    if decision.len() != 1 {
        return Err(DataError::InvalidSchema(format!(
            "expected exactly one decision attribute, found {}",
            decision.len()
        )));
    }
    if decision[0].kind != AttributeKind::Categorical || decision[0].categories.len() != 2 {
        return Err(DataError::InvalidSchema(
            "the decision attribute must be categorical with two categories".into(),
        ));
    }
    Ok(())
}

/// Result of [`combine_sensitive`].
#[derive(Debug, Clone)]
pub struct Combined {
    pub dataset: Dataset,
    pub warnings: Vec<DataWarning>,
}

/// Merges the named categorical attributes into a single sensitive attribute.
///
/// Groups are the value combinations present in the data. The group with the
/// highest positive-decision rate becomes group 0; the remaining groups keep
/// the lexicographic order of their category codes. Combinations that never
/// occur are reported as warnings. A previous sensitive attribute that is not
/// among `names` is demoted to an ordinary attribute.
pub fn combine_sensitive(dataset: &Dataset, names: &[&str]) -> Result<Combined, DataError> {
    if names.is_empty() {
        return Err(DataError::InvalidArgument(
            "no sensitive attribute named".into(),
        ));
    }
    let mut indices = Vec::with_capacity(names.len());
    for name in names {
        let idx = dataset
            .schema
            .iter()
            .position(|a| a.name == *name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.to_string(),
            })?;
        let spec = &dataset.schema[idx];
        if spec.kind != AttributeKind::Categorical || spec.role == Role::Decision {
            return Err(DataError::InvalidArgument(format!(
                "`{name}` cannot be used as a sensitive attribute"
            )));
        }
        if indices.contains(&idx) {
            return Err(DataError::InvalidArgument(format!(
                "`{name}` named twice"
            )));
        }
        indices.push(idx);
    }
    let codes: Vec<&Vec<usize>> = indices
        .iter()
        .map(|&i| match &dataset.columns[i] {
            Column::Categorical(v) => v,
            Column::Numeric(_) => unreachable!(),
        })
        .collect();
    let n = dataset.len();
    let tuples: Vec<Vec<usize>> = (0..n)
        .map(|r| codes.iter().map(|c| c[r]).collect())
        .collect();

    let mut present: Vec<Vec<usize>> = tuples.clone();
    present.sort();
    present.dedup();

    let cardinalities: Vec<usize> = indices
        .iter()
        .map(|&i| dataset.schema[i].categories.len())
        .collect();
    let label_of = |tuple: &[usize]| -> String {
        tuple
            .iter()
            .zip(&indices)
            .map(|(&c, &i)| dataset.schema[i].categories[c].as_str())
            .collect::<Vec<_>>()
            .join("-")
    };
    let mut warnings = Vec::new();
    for tuple in cartesian(&cardinalities) {
        if present.binary_search(&tuple).is_err() {
            let combination = label_of(&tuple);
            log::warn!("sensitive combination `{combination}` has no rows");
            warnings.push(DataWarning::EmptyGroup { combination });
        }
    }
    if present.len() < 2 {
        return Err(DataError::SingleGroup);
    }

    let raw_group: Vec<usize> = tuples
        .iter()
        .map(|t| present.binary_search(t).expect("present"))
        .collect();
    let rates = positive_rates(&raw_group, &dataset.decisions(), present.len());
    let mut privileged = 0;
    for (g, &rate) in rates.iter().enumerate() {
        if rate > rates[privileged] {
            privileged = g;
        }
    }
    let mut order: Vec<usize> = vec![privileged];
    order.extend((0..present.len()).filter(|&g| g != privileged));
    let mut remap = vec![0; present.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let new_codes: Vec<usize> = raw_group.iter().map(|&g| remap[g]).collect();
    let categories: Vec<String> = order.iter().map(|&g| label_of(&present[g])).collect();
    let name = if names.len() == 1 {
        names[0].to_string()
    } else {
        "group".to_string()
    };

    let insert_at = *indices.iter().min().expect("non-empty");
    let mut schema = Vec::new();
    let mut columns = Vec::new();
    for (i, (spec, col)) in dataset.schema.iter().zip(&dataset.columns).enumerate() {
        if i == insert_at {
            schema.push(AttributeSpec {
                name: name.clone(),
                kind: AttributeKind::Categorical,
                role: Role::Sensitive,
                categories: categories.clone(),
            });
            columns.push(Column::Categorical(new_codes.clone()));
        }
        if indices.contains(&i) {
            continue;
        }
        let mut spec = spec.clone();
        if spec.role == Role::Sensitive {
            spec.role = Role::Other;
        }
        if spec.name == name {
            return Err(DataError::InvalidSchema(format!(
                "combined attribute name `{name}` already exists"
            )));
        }
        schema.push(spec);
        columns.push(col.clone());
    }
    Ok(Combined {
        dataset: Dataset::new(schema, columns)?,
        warnings,
    })
}

fn cartesian(cardinalities: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for &c in cardinalities {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..c).map(move |v| {
                    let mut t = prefix.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(sex: &[usize], race: &[usize], y: &[usize]) -> Dataset {
        let schema = vec![
            AttributeSpec::numeric("age"),
            AttributeSpec::categorical("sex", &["Female", "Male"]),
            AttributeSpec::categorical("race", &["NonWhite", "White"]),
            AttributeSpec::categorical("flag", &["a", "b"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("income", &["low", "high"]).with_role(Role::Decision),
        ];
        let n = sex.len();
        let columns = vec![
            Column::Numeric((0..n).map(|i| 20.0 + i as f64).collect()),
            Column::Categorical(sex.to_vec()),
            Column::Categorical(race.to_vec()),
            Column::Categorical((0..n).map(|i| i % 2).collect()),
            Column::Categorical(y.to_vec()),
        ];
        Dataset::new(schema, columns).unwrap()
    }

    #[test]
    fn absent_combination_is_reported_not_dropped() {
        // (Female, White) never occurs: three of four combinations remain.
        let ds = toy(
            &[0, 0, 1, 1, 1, 1],
            &[0, 0, 0, 1, 1, 0],
            &[0, 1, 0, 1, 1, 0],
        );
        let combined = combine_sensitive(&ds, &["race", "sex"]).unwrap();
        assert_eq!(combined.dataset.k(), 3);
        assert_eq!(
            combined.warnings,
            vec![DataWarning::EmptyGroup {
                combination: "White-Female".into()
            }]
        );
        // White-Male has both positives: highest rate, so it is group 0.
        assert_eq!(combined.dataset.group_labels()[0], "White-Male");
        let flag = combined.dataset.column("flag").unwrap().0;
        assert_eq!(flag.role, Role::Other);
    }

    #[test]
    fn single_attribute_identity_relabeling() {
        // Female has the higher positive rate and is already first.
        let ds = toy(&[0, 0, 1, 1], &[0, 1, 0, 1], &[1, 1, 0, 1]);
        let combined = combine_sensitive(&ds, &["sex"]).unwrap();
        assert_eq!(combined.dataset.group_labels(), &["Female", "Male"]);
        assert_eq!(combined.dataset.groups(), &[0, 0, 1, 1]);
        assert!(combined.warnings.is_empty());
    }

    #[test]
    fn single_attribute_relabels_to_highest_rate() {
        let ds = toy(&[0, 0, 1, 1], &[0, 1, 0, 1], &[0, 0, 1, 1]);
        let combined = combine_sensitive(&ds, &["sex"]).unwrap();
        assert_eq!(combined.dataset.group_labels(), &["Male", "Female"]);
        assert_eq!(combined.dataset.groups(), &[1, 1, 0, 0]);
    }

    #[test]
    fn combining_is_idempotent() {
        let ds = toy(
            &[0, 0, 1, 1, 1, 0, 1],
            &[0, 1, 0, 1, 1, 0, 0],
            &[0, 1, 0, 1, 1, 0, 1],
        );
        let once = combine_sensitive(&ds, &["sex", "race"]).unwrap().dataset;
        let twice = combine_sensitive(&once, &["group"]).unwrap().dataset;
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_attribute_is_rejected() {
        let ds = toy(&[0, 1], &[0, 1], &[0, 1]);
        assert!(matches!(
            combine_sensitive(&ds, &["nope"]),
            Err(DataError::MissingColumn { .. })
        ));
        assert!(combine_sensitive(&ds, &["age"]).is_err());
    }

    #[test]
    fn single_group_is_rejected() {
        let ds = toy(&[1, 1, 1], &[0, 1, 0], &[0, 1, 0]);
        assert!(matches!(
            combine_sensitive(&ds, &["sex"]),
            Err(DataError::SingleGroup)
        ));
    }

    #[test]
    fn empty_declared_group_fails_construction() {
        let schema = vec![
            AttributeSpec::categorical("s", &["a", "b", "c"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("y", &["0", "1"]).with_role(Role::Decision),
        ];
        let cols = vec![
            Column::Categorical(vec![0, 1, 0]),
            Column::Categorical(vec![0, 1, 1]),
        ];
        assert!(matches!(
            Dataset::new(schema, cols),
            Err(DataError::EmptyGroup { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = toy(&[0, 1], &[0, 1], &[0, 1]);
        let b = toy(&[0, 1], &[0, 1], &[1, 1]);
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
