//! Sparse observed matrices and their train/test splits.
//!
//! The triplet text format has one observation per line:
//!
//! ```text
//! <relation> <row> <col> <value>
//! ```
//!
//! Relation ids are 1-based (matching the schema file); row and column
//! indices are 0-based. Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Component};
use crate::schema::Schema;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Observed entries of one relation. Only these entries enter any sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedMatrix {
    relation: usize,
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
}

impl ObservedMatrix {
    /// Checks bounds and duplicates. Value domains are checked separately by
    /// [`ObservedMatrix::check_domain`].
    pub fn new(relation: usize, n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (n, e) in entries.iter().enumerate() {
            if e.row >= n_rows || e.col >= n_cols {
                return Err(Error::IndexOutOfBounds {
                    line: n + 1,
                    relation: relation + 1,
                    row: e.row,
                    col: e.col,
                    n_rows,
                    n_cols,
                });
            }
            if !seen.insert((e.row, e.col)) {
                return Err(Error::DuplicateEntry {
                    line: n + 1,
                    relation: relation + 1,
                    row: e.row,
                    col: e.col,
                });
            }
        }
        Ok(ObservedMatrix {
            relation,
            n_rows,
            n_cols,
            entries,
        })
    }

    pub fn empty(relation: usize, n_rows: usize, n_cols: usize) -> Self {
        ObservedMatrix {
            relation,
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    /// Entries from `(row, col, value)` triples for relation `relation` of
    /// `schema`, with domain checks.
    pub fn from_triples(schema: &Schema, relation: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let rel = schema
            .relations
            .get(relation)
            .ok_or_else(|| Error::invalid(format!("no relation {}", relation + 1)))?;
        let entries = triples
            .iter()
            .map(|&(row, col, value)| Entry { row, col, value })
            .collect();
        let m = ObservedMatrix::new(relation, schema.size(rel.row), schema.size(rel.col), entries)?;
        m.check_domain(schema)?;
        Ok(m)
    }

    pub fn relation(&self) -> usize {
        self.relation
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn n_obs(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn check_domain(&self, schema: &Schema) -> Result<()> {
        let likelihood = schema.relations[self.relation].likelihood;
        for (n, e) in self.entries.iter().enumerate() {
            if !likelihood.admits(e.value) {
                return Err(Error::DomainViolation {
                    line: n + 1,
                    relation: self.relation + 1,
                    value: e.value,
                    likelihood,
                });
            }
        }
        Ok(())
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> ObservedMatrix {
        ObservedMatrix {
            relation: self.relation,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|&(n, _)| keep(n))
                .map(|(_, e)| *e)
                .collect(),
        }
    }

    fn shuffled_positions(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_obs()).collect();
        order.shuffle(&mut rng::stream(seed, Component::Split, self.relation as u64));
        order
    }
}

/// Held-out entry positions of one relation.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitMask {
    pub relation: usize,
    pub test_fraction: f64,
    /// Sorted positions into the matrix's entry list.
    pub held_out: Vec<usize>,
    pub seed: u64,
}

impl SplitMask {
    pub fn holdout(matrix: &ObservedMatrix, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "holdout fraction {fraction} outside [0, 1)"
            )));
        }
        let n_test = (fraction * matrix.n_obs() as f64).round() as usize;
        let mut held_out = matrix.shuffled_positions(seed);
        held_out.truncate(n_test);
        held_out.sort_unstable();
        Ok(SplitMask {
            relation: matrix.relation,
            test_fraction: fraction,
            held_out,
            seed,
        })
    }

    /// `(train, test)`.
    pub fn apply(&self, matrix: &ObservedMatrix) -> (ObservedMatrix, ObservedMatrix) {
        let mut is_test = vec![false; matrix.n_obs()];
        for &p in &self.held_out {
            is_test[p] = true;
        }
        (matrix.subset(|n| !is_test[n]), matrix.subset(|n| is_test[n]))
    }
}

pub fn holdout_split(
    matrix: &ObservedMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(ObservedMatrix, ObservedMatrix)> {
    Ok(SplitMask::holdout(matrix, fraction, seed)?.apply(matrix))
}

/// `k` (train, validation) pairs whose validation parts partition the
/// entries.
pub fn kfold_split(
    matrix: &ObservedMatrix,
    k: usize,
    seed: u64,
) -> Result<Vec<(ObservedMatrix, ObservedMatrix)>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold split needs k >= 2, got {k}")));
    }
    if matrix.n_obs() < k {
        return Err(Error::invalid(format!(
            "relation {} has {} observations, fewer than {k} folds",
            matrix.relation + 1,
            matrix.n_obs()
        )));
    }
    let mut fold_of = vec![0; matrix.n_obs()];
    for (rank, pos) in matrix.shuffled_positions(seed).into_iter().enumerate() {
        fold_of[pos] = rank % k;
    }
    Ok((0..k)
        .map(|f| (matrix.subset(|n| fold_of[n] != f), matrix.subset(|n| fold_of[n] == f)))
        .collect())
}

/// One [`ObservedMatrix`] per relation of a schema (possibly empty).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    matrices: Vec<ObservedMatrix>,
}

impl Dataset {
    pub fn empty(schema: &Schema) -> Self {
        Dataset {
            matrices: schema
                .relations
                .iter()
                .enumerate()
                .map(|(m, r)| ObservedMatrix::empty(m, schema.size(r.row), schema.size(r.col)))
                .collect(),
        }
    }

    /// Places each matrix at its relation slot; relations without a matrix
    /// stay empty.
    pub fn from_matrices(schema: &Schema, matrices: Vec<ObservedMatrix>) -> Result<Self> {
        let mut data = Dataset::empty(schema);
        for m in matrices {
            let slot = data
                .matrices
                .get_mut(m.relation)
                .ok_or_else(|| Error::invalid(format!("no relation {}", m.relation + 1)))?;
            if slot.shape() != m.shape() {
                return Err(Error::invalid(format!(
                    "relation {} has shape {:?}, schema expects {:?}",
                    m.relation + 1,
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        Ok(data)
    }

    /// Reads a triplet file against `schema`.
    pub fn load(schema: &Schema, path: &Path) -> Result<Self> {
        Dataset::from_matrices(schema, load_triplets(path, schema)?)
    }

    pub fn matrices(&self) -> &[ObservedMatrix] {
        &self.matrices
    }

    pub fn matrix(&self, relation: usize) -> &ObservedMatrix {
        &self.matrices[relation]
    }

    pub fn n_relations(&self) -> usize {
        self.matrices.len()
    }

    pub fn total_obs(&self) -> usize {
        self.matrices.iter().map(ObservedMatrix::n_obs).sum()
    }

    /// Hold out `fraction` of each listed relation (all when `relations` is
    /// `None`). Returns `(train, test)`.
    pub fn holdout(&self, fraction: f64, seed: u64, relations: Option<&[usize]>) -> Result<(Dataset, Dataset)> {
        let mut train = self.clone();
        let mut test = self.clone();
        for (m, matrix) in self.matrices.iter().enumerate() {
            if relations.is_some_and(|r| !r.contains(&m)) {
                test.matrices[m] = matrix.subset(|_| false);
                continue;
            }
            let (tr, te) = holdout_split(matrix, fraction, seed)?;
            train.matrices[m] = tr;
            test.matrices[m] = te;
        }
        Ok((train, test))
    }

    /// Per-relation k-fold split, with fold `f` of the result taking fold `f`
    /// of every relation. Relations with fewer than `k` observations are an
    /// error unless empty.
    pub fn kfold(&self, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
        let mut folds: Vec<(Dataset, Dataset)> = (0..k).map(|_| (self.clone(), self.clone())).collect();
        for (m, matrix) in self.matrices.iter().enumerate() {
            if matrix.is_empty() {
                continue;
            }
            for (f, (tr, va)) in kfold_split(matrix, k, seed)?.into_iter().enumerate() {
                folds[f].0.matrices[m] = tr;
                folds[f].1.matrices[m] = va;
            }
        }
        Ok(folds)
    }

    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        write_triplets(path, &self.matrices)
    }
}

/// Parses triplets from `reader`. Returns one matrix per relation id seen,
/// ordered by relation.
pub fn read_triplets<R: BufRead>(reader: R, schema: &Schema) -> Result<Vec<ObservedMatrix>> {
    let mut per_relation: Vec<Option<(Vec<Entry>, HashSet<(usize, usize)>)>> =
        vec![None; schema.n_relations()];
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse_index = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {what} '{s}'"),
            })
        };
        let relation_id = parse_index(fields[0], "relation id")?;
        let row = parse_index(fields[1], "row index")?;
        let col = parse_index(fields[2], "column index")?;
        let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad value '{}'", fields[3]),
        })?;
        if relation_id == 0 || relation_id > schema.n_relations() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown relation {relation_id}"),
            });
        }
        let m = relation_id - 1;
        let rel = schema.relations[m];
        let (n_rows, n_cols) = (schema.size(rel.row), schema.size(rel.col));
        if row >= n_rows || col >= n_cols {
            return Err(Error::IndexOutOfBounds {
                line: line_no,
                relation: relation_id,
                row,
                col,
                n_rows,
                n_cols,
            });
        }
        if !rel.likelihood.admits(value) {
            return Err(Error::DomainViolation {
                line: line_no,
                relation: relation_id,
                value,
                likelihood: rel.likelihood,
            });
        }
        let (entries, seen) = per_relation[m].get_or_insert_with(Default::default);
        if !seen.insert((row, col)) {
            return Err(Error::DuplicateEntry {
                line: line_no,
                relation: relation_id,
                row,
                col,
            });
        }
        entries.push(Entry { row, col, value });
    }
    Ok(per_relation
        .into_iter()
        .enumerate()
        .filter_map(|(m, slot)| {
            slot.map(|(entries, _)| {
                let rel = schema.relations[m];
                ObservedMatrix {
                    relation: m,
                    n_rows: schema.size(rel.row),
                    n_cols: schema.size(rel.col),
                    entries,
                }
            })
        })
        .collect())
}

pub fn load_triplets(path: &Path, schema: &Schema) -> Result<Vec<ObservedMatrix>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_triplets(BufReader::new(file), schema)
}

/// Serializes matrices in the triplet format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_triplets(matrices: &[ObservedMatrix]) -> String {
    let mut out = String::new();
    for m in matrices {
        for e in &m.entries {
            writeln!(out, "{} {} {} {}", m.relation + 1, e.row, e.col, e.value).unwrap();
        }
    }
    out
}

pub fn write_triplets(path: &Path, matrices: &[ObservedMatrix]) -> Result<()> {
    std::fs::write(path, format_triplets(matrices)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Likelihood::{Bernoulli, Count, Gaussian};
    use proptest::prelude::*;

    fn two_set(lik: crate::schema::Likelihood) -> Schema {
        Schema::from_parts(&[("a", 4), ("b", 3)], &[(0, 1, lik)], 2)
    }

    fn filled(n: usize) -> ObservedMatrix {
        let entries = (0..n)
            .map(|t| Entry {
                row: t / 10,
                col: t % 10,
                value: t as f64,
            })
            .collect();
        ObservedMatrix::new(0, n / 10 + 1, 10, entries).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_list() {
        let out = read_triplets("".as_bytes(), &two_set(Gaussian)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_line() {
        let out = read_triplets("1 0 0 3.5\n".as_bytes(), &two_set(Gaussian)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].entries(), &[Entry { row: 0, col: 0, value: 3.5 }]);
    }

    #[test]
    fn bernoulli_domain_violation() {
        let err = read_triplets("1 0 0 2\n".as_bytes(), &two_set(Bernoulli)).unwrap_err();
        assert!(matches!(err, Error::DomainViolation { line: 1, .. }), "{err}");
        let err = read_triplets("1 0 0 1.5\n".as_bytes(), &two_set(Count)).unwrap_err();
        assert!(matches!(err, Error::DomainViolation { .. }));
        assert!(read_triplets("1 0 0 7\n".as_bytes(), &two_set(Count)).is_ok());
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let s = two_set(Gaussian);
        let err = read_triplets("# header\n1 0 0 1\n1 0 x 2\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_triplets("1 0 0 1\n\n1 4 0 2\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfBounds { line: 3, .. }), "{err}");
        let err = read_triplets("1 0 0 1\n1 0 0 2\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::DuplicateEntry { line: 2, .. }), "{err}");
        let err = read_triplets("2 0 0 1\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = read_triplets("1 0 0\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn holdout_sizes() {
        let m = filled(100);
        let (train, test) = holdout_split(&m, 0.0, 1).unwrap();
        assert!(test.is_empty());
        assert_eq!(train, m);

        let (train, test) = holdout_split(&m, 0.4, 1).unwrap();
        assert_eq!(test.n_obs(), 40);
        assert_eq!(train.n_obs(), 60);
        assert_eq!(holdout_split(&m, 0.4, 1).unwrap(), (train, test));

        assert!(holdout_split(&m, 1.0, 1).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let m = filled(10);
        let folds = kfold_split(&m, 2, 3).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds.iter().all(|(tr, va)| tr.n_obs() == 5 && va.n_obs() == 5));
        let mut all: Vec<_> = folds.iter().flat_map(|(_, va)| va.entries().to_vec()).collect();
        all.sort_by(|a, b| a.value.total_cmp(&b.value));
        assert_eq!(all, m.entries());

        assert!(kfold_split(&filled(3), 5, 3).is_err());
        assert!(kfold_split(&m, 1, 3).is_err());
    }

    fn sorted(mut v: Vec<Entry>) -> Vec<Entry> {
        v.sort_by(|a, b| (a.row, a.col).cmp(&(b.row, b.col)));
        v
    }

    proptest! {
        #[test]
        fn holdout_partitions(n in 0usize..200, frac in 0.0f64..0.99, seed in any::<u64>()) {
            let m = filled(n);
            let (train, test) = holdout_split(&m, frac, seed).unwrap();
            prop_assert_eq!(test.n_obs(), (frac * n as f64).round() as usize);
            let mut union = train.entries().to_vec();
            union.extend_from_slice(test.entries());
            prop_assert_eq!(sorted(union), sorted(m.entries().to_vec()));
        }

        #[test]
        fn kfold_partitions(n in 5usize..120, k in 2usize..5, seed in any::<u64>()) {
            let m = filled(n);
            for (train, val) in kfold_split(&m, k, seed).unwrap() {
                let mut union = train.entries().to_vec();
                union.extend_from_slice(val.entries());
                prop_assert_eq!(sorted(union), sorted(m.entries().to_vec()));
            }
        }

        #[test]
        fn triplets_roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
            let s = two_set(Gaussian);
            let triples: Vec<_> = values.iter().enumerate().map(|(t, &v)| (t / 3, t % 3, v)).collect();
            let m = ObservedMatrix::from_triples(&s, 0, &triples).unwrap();
            let text = format_triplets(std::slice::from_ref(&m));
            let back = read_triplets(text.as_bytes(), &s).unwrap();
            prop_assert_eq!(back, vec![m]);
        }
    }

    #[test]
    fn dataset_holdout_restricted_to_relations() {
        let s = Schema::from_parts(&[("a", 10), ("b", 10), ("c", 10)], &[(0, 1, Gaussian), (1, 2, Gaussian)], 2);
        let trip: Vec<_> = (0..50).map(|t| (t / 10, t % 10, 1.0)).collect();
        let d = Dataset::from_matrices(
            &s,
            vec![
                ObservedMatrix::from_triples(&s, 0, &trip).unwrap(),
                ObservedMatrix::from_triples(&s, 1, &trip).unwrap(),
            ],
        )
        .unwrap();
        let (train, test) = d.holdout(0.2, 5, Some(&[1])).unwrap();
        assert_eq!(train.matrix(0).n_obs(), 50);
        assert_eq!(test.matrix(0).n_obs(), 0);
        assert_eq!(test.matrix(1).n_obs(), 10);
    }
}
