use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{AttributeKind, AttributeSpec, Column, DataError, Dataset, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockKind {
    /// Min-max scaled with the training range.
    Numeric { min: f64, max: f64 },
    /// One-hot over the declared categories.
    Categorical,
    /// The binary decision as a single 0/1 column.
    Decision,
}

/// Span of encoded columns belonging to one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attribute: String,
    pub start: usize,
    pub len: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
}

/// Fitted encoder. The sensitive attribute is never part of the feature
/// matrix; it travels alongside as [`EncodedMatrix::groups`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    schema: Vec<AttributeSpec>,
    blocks: Vec<Block>,
    width: usize,
}

/// Real-valued [0,1] feature matrix plus the group of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub values: Array2<f64>,
    pub groups: Vec<usize>,
    pub k: usize,
}

impl EncodedMatrix {
    pub fn new(values: Array2<f64>, groups: Vec<usize>, k: usize) -> Self {
        assert_eq!(values.nrows(), groups.len(), "one group per row");
        Self { values, groups, k }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), rows),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
            k: self.k,
        }
    }

    pub fn rows_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.nrows()).filter(|&r| pred(self.groups[r])).collect()
    }

    pub fn privileged_rows(&self) -> Vec<usize> {
        self.rows_where(|g| g == crate::PRIVILEGED)
    }

    pub fn protected_rows(&self) -> Vec<usize> {
        self.rows_where(|g| g != crate::PRIVILEGED)
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(1), cols),
            groups: self.groups.clone(),
            k: self.k,
        }
    }

    /// Replaces the rows listed in `rows` with the matching rows of `other`.
    pub fn with_rows_from(&self, other: &Array2<f64>, rows: &[usize]) -> Self {
        let mut out = self.clone();
        for &r in rows {
            out.values.row_mut(r).assign(&other.row(r));
        }
        out
    }
}

impl Encoder {
    /// Fits numeric ranges on `train`.
    pub fn fit(train: &Dataset) -> Self {
        let mut blocks = Vec::new();
        let mut width = 0;
        for (spec, col) in train.schema().iter().zip(train.columns()) {
            let (kind, len) = match (spec.role, spec.kind, col) {
                (Role::Sensitive, _, _) => continue,
                (Role::Decision, _, _) => (BlockKind::Decision, 1),
                (_, AttributeKind::Numeric, Column::Numeric(v)) => {
                    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (BlockKind::Numeric { min, max }, 1)
                }
                (_, AttributeKind::Categorical, _) => {
                    (BlockKind::Categorical, spec.categories.len())
                }
                _ => unreachable!("validated dataset"),
            };
            blocks.push(Block {
                attribute: spec.name.clone(),
                start: width,
                len,
                kind,
            });
            width += len;
        }
        Self {
            schema: train.schema().to_vec(),
            blocks,
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn schema(&self) -> &[AttributeSpec] {
        &self.schema
    }

    pub fn block(&self, attribute: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.attribute == attribute)
    }

    /// Column index of the decision attribute.
    pub fn decision_column(&self) -> usize {
        self.blocks
            .iter()
            .find(|b| b.kind == BlockKind::Decision)
            .expect("schema has a decision")
            .start
    }

    /// Every encoded column except the decision, in order. The mapping and
    /// all protection audits work on these columns only.
    pub fn feature_columns(&self) -> Vec<usize> {
        let d = self.decision_column();
        (0..self.width).filter(|&c| c != d).collect()
    }

    /// Test-split values outside the training range are clamped to [0,1].
    pub fn encode(&self, dataset: &Dataset) -> Result<EncodedMatrix, DataError> {
        if dataset.schema() != self.schema.as_slice() {
            return Err(DataError::SchemaMismatch);
        }
        let n = dataset.len();
        let mut values = Array2::<f64>::zeros((n, self.width));
        for block in &self.blocks {
            let idx = self
                .schema
                .iter()
                .position(|s| s.name == block.attribute)
                .expect("block names come from the schema");
            match (&block.kind, &dataset.columns()[idx]) {
                (BlockKind::Numeric { min, max }, Column::Numeric(v)) => {
                    let span = max - min;
                    let mut clamped = 0usize;
                    for (r, &x) in v.iter().enumerate() {
                        let mut z = if span > 0.0 { (x - min) / span } else { 0.0 };
                        if !(0.0..=1.0).contains(&z) {
                            clamped += 1;
                            z = z.clamp(0.0, 1.0);
                        }
                        values[[r, block.start]] = z;
                    }
                    if clamped > 0 {
                        log::warn!(
                            "{clamped} values of `{}` fell outside the fitted range and were clamped",
                            block.attribute
                        );
                    }
                }
                (BlockKind::Categorical, Column::Categorical(v)) => {
                    for (r, &c) in v.iter().enumerate() {
                        values[[r, block.start + c]] = 1.0;
                    }
                }
                (BlockKind::Decision, Column::Categorical(v)) => {
                    for (r, &c) in v.iter().enumerate() {
                        values[[r, block.start]] = c as f64;
                    }
                }
                _ => return Err(DataError::SchemaMismatch),
            }
        }
        Ok(EncodedMatrix::new(values, dataset.groups().to_vec(), dataset.k()))
    }

    /// Inverse of [`Encoder::encode`]: numeric columns are rescaled, each
    /// categorical block is decoded by arg-max (lowest index on ties) and the
    /// decision column is thresholded at 0.5.
    pub fn decode(&self, matrix: &EncodedMatrix) -> Result<Dataset, DataError> {
        if matrix.ncols() != self.width {
            return Err(DataError::BlockShapeMismatch {
                expected: self.width,
                found: matrix.ncols(),
            });
        }
        let n = matrix.nrows();
        let mut columns = Vec::with_capacity(self.schema.len());
        for spec in &self.schema {
            if spec.role == Role::Sensitive {
                columns.push(Column::Categorical(matrix.groups.clone()));
                continue;
            }
            let block = self.block(&spec.name).expect("every non-sensitive attribute has a block");
            let col = match block.kind {
                BlockKind::Numeric { min, max } => Column::Numeric(
                    (0..n)
                        .map(|r| matrix.values[[r, block.start]] * (max - min) + min)
                        .collect(),
                ),
                BlockKind::Categorical => Column::Categorical(
                    (0..n)
                        .map(|r| {
                            let row = matrix.values.row(r);
                            argmax(&row.as_slice().expect("standard layout")
                                [block.start..block.start + block.len])
                        })
                        .collect(),
                ),
                BlockKind::Decision => Column::Categorical(
                    (0..n)
                        .map(|r| usize::from(matrix.values[[r, block.start]] >= 0.5))
                        .collect(),
                ),
            };
            columns.push(col);
        }
        Dataset::new(self.schema.clone(), columns)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttributeSpec, Role};
    use ndarray::array;

    fn dataset() -> Dataset {
        let schema = vec![
            AttributeSpec::numeric("x"),
            AttributeSpec::categorical("color", &["a", "b", "c"]),
            AttributeSpec::categorical("s", &["p", "q"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("y", &["no", "yes"]).with_role(Role::Decision),
        ];
        let cols = vec![
            Column::Numeric(vec![0.0, 5.0, 10.0]),
            Column::Categorical(vec![0, 1, 2]),
            Column::Categorical(vec![0, 1, 0]),
            Column::Categorical(vec![1, 0, 1]),
        ];
        Dataset::new(schema, cols).unwrap()
    }

    #[test]
    fn encodes_scaled_one_hot_without_sensitive() {
        let ds = dataset();
        let enc = Encoder::fit(&ds);
        let m = enc.encode(&ds).unwrap();
        assert_eq!(enc.width(), 5);
        assert_eq!(
            m.values,
            array![
                [0.0, 1.0, 0.0, 0.0, 1.0],
                [0.5, 0.0, 1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0, 1.0, 1.0]
            ]
        );
        assert_eq!(m.groups, vec![0, 1, 0]);
        assert_eq!(enc.decision_column(), 4);
        assert_eq!(enc.decode(&m).unwrap(), ds);
    }

    #[test]
    fn decode_soft_blocks_by_argmax() {
        let ds = dataset();
        let enc = Encoder::fit(&ds);
        let m = EncodedMatrix::new(
            array![[0.5, 0.2, 0.5, 0.3, 0.7], [0.25, 0.4, 0.4, 0.2, 0.2]],
            vec![0, 1],
            2,
        );
        let out = enc.decode(&m).unwrap();
        let (_, x) = out.column("x").unwrap();
        assert_eq!(x, &Column::Numeric(vec![5.0, 2.5]));
        let (_, color) = out.column("color").unwrap();
        assert_eq!(color, &Column::Categorical(vec![1, 0]));
        assert_eq!(out.decisions(), vec![true, false]);
    }

    #[test]
    fn out_of_range_values_clamp() {
        let ds = dataset();
        let enc = Encoder::fit(&ds);
        let wide = ds
            .with_column("x", Column::Numeric(vec![-5.0, 5.0, 20.0]))
            .unwrap();
        let m = enc.encode(&wide).unwrap();
        assert_eq!(m.values.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ds = dataset();
        let enc = Encoder::fit(&ds);
        let m = EncodedMatrix::new(Array2::zeros((1, 3)), vec![0], 2);
        assert!(matches!(
            enc.decode(&m),
            Err(DataError::BlockShapeMismatch { expected: 5, found: 3 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }
}
