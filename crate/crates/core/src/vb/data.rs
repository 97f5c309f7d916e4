use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::schema::{Schema, Side};
use crate::store::Dataset;

use super::likelihood::LikelihoodSpec;

/// Observed entries of one relation with row- and column-wise adjacency, so
/// every per-entity sum costs `O(entries of that entity)`.
#[derive(Clone, Debug)]
pub struct RelationIndex {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
    pub link: LikelihoodSpec,
    row_ptr: Vec<usize>,
    row_order: Vec<usize>,
    col_ptr: Vec<usize>,
    col_order: Vec<usize>,
}

fn adjacency(keys: &[usize], n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ptr = vec![0; n + 1];
    for &k in keys {
        ptr[k + 1] += 1;
    }
    for i in 0..n {
        ptr[i + 1] += ptr[i];
    }
    let mut fill = ptr.clone();
    let mut order = vec![0; keys.len()];
    for (t, &k) in keys.iter().enumerate() {
        order[fill[k]] = t;
        fill[k] += 1;
    }
    (ptr, order)
}

impl RelationIndex {
    pub fn n_obs(&self) -> usize {
        self.values.len()
    }

    /// Entry ids in row `i`.
    pub fn by_row(&self, i: usize) -> &[usize] {
        &self.row_order[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Entry ids in column `j`.
    pub fn by_col(&self, j: usize) -> &[usize] {
        &self.col_order[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    /// Entries of entity `index` on `side`, and for each entry the index of
    /// the partner entity.
    pub fn side(&self, side: Side) -> (&[usize], &[usize], &[usize]) {
        match side {
            Side::Row => (&self.row_ptr, &self.row_order, &self.cols),
            Side::Col => (&self.col_ptr, &self.col_order, &self.rows),
        }
    }
}

/// Training data laid out for the engines.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub schema: Schema,
    pub relations: Vec<RelationIndex>,
}

impl TrainingData {
    pub fn new(schema: &Schema, data: &Dataset) -> Result<Self> {
        schema.ensure_structurally_valid()?;
        if data.n_relations() != schema.n_relations() {
            return Err(Error::invalid(format!(
                "dataset has {} relations, schema {}",
                data.n_relations(),
                schema.n_relations()
            )));
        }
        let relations = schema
            .relations
            .iter()
            .enumerate()
            .map(|(m, rel)| {
                let matrix = data.matrix(m);
                let (n_rows, n_cols) = (schema.size(rel.row), schema.size(rel.col));
                if matrix.shape() != (n_rows, n_cols) {
                    return Err(Error::invalid(format!(
                        "relation {} has shape {:?}, schema expects ({n_rows}, {n_cols})",
                        m + 1,
                        matrix.shape()
                    )));
                }
                matrix.check_domain(schema)?;
                let rows: Vec<usize> = matrix.entries().iter().map(|e| e.row).collect();
                let cols: Vec<usize> = matrix.entries().iter().map(|e| e.col).collect();
                let values: Vec<f64> = matrix.entries().iter().map(|e| e.value).collect();
                let x_max = values.iter().copied().fold(0.0, f64::max);
                let (row_ptr, row_order) = adjacency(&rows, n_rows);
                let (col_ptr, col_order) = adjacency(&cols, n_cols);
                Ok(RelationIndex {
                    rows,
                    cols,
                    values,
                    link: LikelihoodSpec::new(rel.likelihood, x_max),
                    row_ptr,
                    row_order,
                    col_ptr,
                    col_order,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData {
            schema: schema.clone(),
            relations,
        })
    }

    pub fn total_obs(&self) -> usize {
        self.relations.iter().map(RelationIndex::n_obs).sum()
    }
}

/// Gaussianized targets of one non-Gaussian relation, aligned with its
/// entries, together with the tangent points they were computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBlock {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoData {
    pub blocks: Vec<Option<PseudoBlock>>,
}

impl PseudoData {
    /// Pseudo-data at the current state. Pins the noise precision of every
    /// non-Gaussian relation to its curvature bound.
    pub fn init(state: &mut ModelState, data: &TrainingData) -> Self {
        let blocks = data
            .relations
            .iter()
            .enumerate()
            .map(|(m, idx)| {
                if data.schema.relations[m].likelihood.is_gaussian() {
                    state.noise.pinned[m] = None;
                    return None;
                }
                let xi: Vec<f64> = (0..idx.n_obs())
                    .map(|t| state.linear_predictor(m, idx.rows[t], idx.cols[t]))
                    .collect();
                let z = xi
                    .iter()
                    .zip(&idx.values)
                    .map(|(&xi, &x)| idx.link.pseudo_target(xi, x))
                    .collect();
                state.noise.pinned[m] = Some(idx.link.kappa());
                Some(PseudoBlock {
                    z,
                    xi,
                    kappa: idx.link.kappa(),
                })
            })
            .collect();
        PseudoData { blocks }
    }

    /// Fitting targets of relation `m`: the data itself for Gaussian
    /// relations, the pseudo-data otherwise.
    pub fn targets<'a>(&'a self, data: &'a TrainingData, m: usize) -> &'a [f64] {
        match &self.blocks[m] {
            Some(block) => &block.z,
            None => &data.relations[m].values,
        }
    }
}

/// `target - xi` at every observed entry, where `xi` includes both biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals(pub Vec<Vec<f64>>);

impl Residuals {
    pub fn compute(state: &ModelState, data: &TrainingData, pseudo: &PseudoData) -> Self {
        Residuals(
            data.relations
                .iter()
                .enumerate()
                .map(|(m, idx)| {
                    pseudo
                        .targets(data, m)
                        .iter()
                        .enumerate()
                        .map(|(t, &y)| y - state.linear_predictor(m, idx.rows[t], idx.cols[t]))
                        .collect()
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Likelihood::Gaussian;
    use crate::store::ObservedMatrix;

    #[test]
    fn adjacency_lists() {
        let s = Schema::from_parts(&[("a", 3), ("b", 2)], &[(0, 1, Gaussian)], 1);
        let m = ObservedMatrix::from_triples(&s, 0, &[(2, 1, 1.0), (0, 0, 2.0), (2, 0, 3.0)]).unwrap();
        let d = TrainingData::new(&s, &Dataset::from_matrices(&s, vec![m]).unwrap()).unwrap();
        let idx = &d.relations[0];
        assert_eq!(idx.by_row(0), &[1]);
        assert!(idx.by_row(1).is_empty());
        assert_eq!(idx.by_row(2), &[0, 2]);
        assert_eq!(idx.by_col(0), &[1, 2]);
        assert_eq!(idx.by_col(1), &[0]);
    }
}
