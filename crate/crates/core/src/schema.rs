//! Relational schema: entity sets, the relations (matrices) between them and
//! the factorization rank.
//!
//! Internally every id is a 0-based position. The JSON schema file and all
//! user-facing messages use 1-based ids, so `{"row": 1, "col": 2}` relates the
//! first and second entity set.
//!
//! A collection of matrices over `E` entity sets is equivalent to one
//! symmetric `d x d` matrix (`d = sum_e d_e`) whose diagonal blocks are
//! unobserved. The engines never build that matrix; each relation is handled
//! on its own block and the factor matrix of an entity set is shared by every
//! relation that touches it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
    Count,
}

impl Likelihood {
    pub fn is_gaussian(self) -> bool {
        matches!(self, Likelihood::Gaussian)
    }

    /// Whether `value` is an admissible observation.
    pub fn admits(self, value: f64) -> bool {
        match self {
            Likelihood::Gaussian => value.is_finite(),
            Likelihood::Bernoulli => value == 0.0 || value == 1.0,
            Likelihood::Count => value.is_finite() && value >= 0.0 && value.fract() == 0.0,
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Count => "count",
        })
    }
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Likelihood::Gaussian),
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "count" => Ok(Likelihood::Count),
            _ => Err(Error::invalid(format!("unknown likelihood `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub name: String,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub row: usize,
    pub col: usize,
    pub likelihood: Likelihood,
}

/// Which side of a relation an entity set sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Row,
    Col,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SchemaFile", try_from = "SchemaFile")]
pub struct Schema {
    pub entity_sets: Vec<EntitySet>,
    pub relations: Vec<Relation>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoEntitySets,
    EmptyEntitySet { set: usize },
    UnusedEntitySet { set: usize },
    DanglingEntitySet { relation: usize, set: usize },
    SelfRelation { relation: usize },
    DuplicateRelation { relation: usize, first: usize },
    Disconnected { components: usize },
    RankTooSmall { rank: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NoEntitySets => write!(f, "schema has no entity sets"),
            Violation::EmptyEntitySet { set } => write!(f, "entity set {} has size 0", set + 1),
            Violation::UnusedEntitySet { set } => write!(f, "entity set {} unused", set + 1),
            Violation::DanglingEntitySet { relation, set } => write!(
                f,
                "relation {} refers to missing entity set {}",
                relation + 1,
                set + 1
            ),
            Violation::SelfRelation { relation } => {
                write!(f, "relation {} relates an entity set to itself", relation + 1)
            }
            Violation::DuplicateRelation { relation, first } => write!(
                f,
                "relation {} repeats the entity-set pair of relation {}",
                relation + 1,
                first + 1
            ),
            Violation::Disconnected { components } => {
                write!(f, "schema splits into {components} disconnected components")
            }
            Violation::RankTooSmall { rank } => write!(f, "rank {rank} < 1"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violations other than the rank check. The engines accept `K = 0`
    /// (bias-only model) even though user-facing schemas require `K >= 1`.
    pub fn structural(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| !matches!(v, Violation::RankTooSmall { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

// On-disk layout: 1-based entity-set ids.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    entity_sets: Vec<EntitySet>,
    relations: Vec<RelationFile>,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationFile {
    row: usize,
    col: usize,
    likelihood: Likelihood,
}

impl Schema {
    pub fn new(entity_sets: Vec<EntitySet>, relations: Vec<Relation>, rank: usize) -> Self {
        Schema {
            entity_sets,
            relations,
            rank,
        }
    }

    /// Schema from `(name, size)` pairs and `(row, col, likelihood)` triples
    /// (0-based ids).
    pub fn from_parts(
        sets: &[(&str, usize)],
        relations: &[(usize, usize, Likelihood)],
        rank: usize,
    ) -> Self {
        Schema {
            entity_sets: sets
                .iter()
                .map(|&(name, size)| EntitySet {
                    name: name.to_string(),
                    size,
                })
                .collect(),
            relations: relations
                .iter()
                .map(|&(row, col, likelihood)| Relation {
                    row,
                    col,
                    likelihood,
                })
                .collect(),
            rank,
        }
    }

    pub fn n_sets(&self) -> usize {
        self.entity_sets.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn size(&self, set: usize) -> usize {
        self.entity_sets[set].size
    }

    /// `d = sum_e d_e`, the side of the equivalent symmetric matrix.
    pub fn total_entities(&self) -> usize {
        self.entity_sets.iter().map(|s| s.size).sum()
    }

    /// Relations touching `set`, with the side the set is on.
    pub fn incident(&self, set: usize) -> Vec<(usize, Side)> {
        let mut out = Vec::new();
        for (m, rel) in self.relations.iter().enumerate() {
            if rel.row == set {
                out.push((m, Side::Row));
            }
            if rel.col == set {
                out.push((m, Side::Col));
            }
        }
        out
    }

    pub fn all_gaussian(&self) -> bool {
        self.relations.iter().all(|r| r.likelihood.is_gaussian())
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.entity_sets.len();
        if n == 0 {
            violations.push(Violation::NoEntitySets);
        }
        if self.rank < 1 {
            violations.push(Violation::RankTooSmall { rank: self.rank });
        }
        for (e, set) in self.entity_sets.iter().enumerate() {
            if set.size == 0 {
                violations.push(Violation::EmptyEntitySet { set: e });
            }
        }

        let mut used = vec![false; n];
        let mut parent: Vec<usize> = (0..n).collect();
        for (m, rel) in self.relations.iter().enumerate() {
            let mut dangling = false;
            for set in [rel.row, rel.col] {
                if set >= n {
                    violations.push(Violation::DanglingEntitySet { relation: m, set });
                    dangling = true;
                }
            }
            if dangling {
                continue;
            }
            if rel.row == rel.col {
                violations.push(Violation::SelfRelation { relation: m });
            }
            if let Some(first) = self.relations[..m]
                .iter()
                .position(|r| r.row == rel.row && r.col == rel.col)
            {
                violations.push(Violation::DuplicateRelation { relation: m, first });
            }
            used[rel.row] = true;
            used[rel.col] = true;
            let (a, b) = (find(&mut parent, rel.row), find(&mut parent, rel.col));
            if a != b {
                parent[a] = b;
            }
        }
        for (e, &u) in used.iter().enumerate() {
            if !u {
                violations.push(Violation::UnusedEntitySet { set: e });
            }
        }
        let components = (0..n).filter(|&e| find(&mut parent, e) == e).count();
        if components > 1 {
            violations.push(Violation::Disconnected { components });
        }
        ValidationReport { violations }
    }

    /// Fails with [`Error::InvalidSchema`] on any violation except the rank
    /// check.
    pub(crate) fn ensure_structurally_valid(&self) -> Result<()> {
        let report = self.validate();
        // Unit tests may fit a bias-only model with no factors.
        let blocking = report
            .structural()
            .any(|v| !(cfg!(test) && matches!(v, Violation::RankTooSmall { rank: 0 })));
        if blocking {
            return Err(Error::InvalidSchema(report));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same schema with every relation switched to `likelihood`.
    pub fn with_likelihood(&self, likelihood: Likelihood) -> Self {
        let mut out = self.clone();
        for r in &mut out.relations {
            r.likelihood = likelihood;
        }
        out
    }

    pub fn with_rank(&self, rank: usize) -> Self {
        Schema {
            rank,
            ..self.clone()
        }
    }
}

impl From<Schema> for SchemaFile {
    fn from(s: Schema) -> Self {
        SchemaFile {
            relations: s
                .relations
                .iter()
                .map(|r| RelationFile {
                    row: r.row + 1,
                    col: r.col + 1,
                    likelihood: r.likelihood,
                })
                .collect(),
            entity_sets: s.entity_sets,
            rank: s.rank,
        }
    }
}

impl TryFrom<SchemaFile> for Schema {
    type Error = String;

    fn try_from(file: SchemaFile) -> std::result::Result<Self, String> {
        let mut relations = Vec::with_capacity(file.relations.len());
        for (m, r) in file.relations.iter().enumerate() {
            if r.row == 0 || r.col == 0 {
                return Err(format!("relation {}: entity-set ids are 1-based", m + 1));
            }
            relations.push(Relation {
                row: r.row - 1,
                col: r.col - 1,
                likelihood: r.likelihood,
            });
        }
        Ok(Schema {
            entity_sets: file.entity_sets,
            relations,
            rank: file.rank,
        })
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Multi-view layout: entity set 1 holds the shared rows, set `v + 1` the
/// columns of view `v`.
pub fn multiview_schema(
    n_views: usize,
    d_row: usize,
    col_sizes: &[usize],
    likelihood: Likelihood,
    rank: usize,
) -> Result<Schema> {
    if n_views < 1 {
        return Err(Error::invalid("multi-view schema needs at least one view"));
    }
    if col_sizes.len() != n_views {
        return Err(Error::invalid(format!(
            "{} column sizes given for {n_views} views",
            col_sizes.len()
        )));
    }
    if d_row < 1 || col_sizes.iter().any(|&d| d < 1) {
        return Err(Error::invalid("entity-set sizes must be >= 1"));
    }
    let mut entity_sets = vec![EntitySet {
        name: "rows".into(),
        size: d_row,
    }];
    let mut relations = Vec::with_capacity(n_views);
    for (v, &size) in col_sizes.iter().enumerate() {
        entity_sets.push(EntitySet {
            name: format!("view{}", v + 1),
            size,
        });
        relations.push(Relation {
            row: 0,
            col: v + 1,
            likelihood,
        });
    }
    Ok(Schema::new(entity_sets, relations, rank))
}

/// Circular layout over `sizes.len()` entity sets: relation `m` maps set `m`
/// to set `m + 1`, the last one closes back onto set 0. A single size yields
/// the plain two-set factorization `(0, 1)` with both sets of that size.
pub fn cycle_schema(sizes: &[usize], likelihood: Likelihood, rank: usize) -> Result<Schema> {
    if sizes.is_empty() {
        return Err(Error::invalid("cycle needs at least one entity set"));
    }
    let sets: Vec<usize> = if sizes.len() == 1 {
        vec![sizes[0], sizes[0]]
    } else {
        sizes.to_vec()
    };
    let entity_sets = sets
        .iter()
        .enumerate()
        .map(|(e, &size)| EntitySet {
            name: format!("set{}", e + 1),
            size,
        })
        .collect();
    let relations = if sizes.len() == 1 {
        vec![Relation {
            row: 0,
            col: 1,
            likelihood,
        }]
    } else {
        (0..sizes.len())
            .map(|m| Relation {
                row: m,
                col: (m + 1) % sizes.len(),
                likelihood,
            })
            .collect()
    };
    Ok(Schema::new(entity_sets, relations, rank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Likelihood::Gaussian;

    #[test]
    fn degenerate_single_set_is_unused() {
        let s = Schema::from_parts(&[("a", 3)], &[], 2);
        let report = s.validate();
        assert_eq!(
            report.violations,
            vec![Violation::UnusedEntitySet { set: 0 }]
        );
        assert_eq!(report.to_string(), "entity set 1 unused");
    }

    #[test]
    fn minimal_schema_is_ok() {
        let s = Schema::from_parts(&[("a", 3), ("b", 4)], &[(0, 1, Gaussian)], 5);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn five_cycle_is_ok() {
        let s = cycle_schema(&[10, 11, 12, 13, 14], Gaussian, 3).unwrap();
        assert_eq!(s.n_relations(), 5);
        assert!(s.validate().is_ok());
        assert_eq!(s.relations[4].row, 4);
        assert_eq!(s.relations[4].col, 0);
    }

    #[test]
    fn violations_are_reported() {
        let s = Schema::from_parts(
            &[("a", 3), ("b", 0), ("c", 2), ("d", 2)],
            &[(0, 0, Gaussian), (0, 1, Gaussian), (0, 1, Gaussian), (2, 7, Gaussian)],
            0,
        );
        let v = s.validate().violations;
        assert!(v.contains(&Violation::RankTooSmall { rank: 0 }));
        assert!(v.contains(&Violation::EmptyEntitySet { set: 1 }));
        assert!(v.contains(&Violation::SelfRelation { relation: 0 }));
        assert!(v.contains(&Violation::DuplicateRelation { relation: 2, first: 1 }));
        assert!(v.contains(&Violation::DanglingEntitySet { relation: 3, set: 7 }));
        assert!(v.contains(&Violation::UnusedEntitySet { set: 2 }));
        assert!(v.contains(&Violation::Disconnected { components: 3 }));
    }

    #[test]
    fn disconnected_pairs_rejected() {
        let s = Schema::from_parts(
            &[("a", 1), ("b", 1), ("c", 1), ("d", 1)],
            &[(0, 1, Gaussian), (2, 3, Gaussian)],
            1,
        );
        assert_eq!(
            s.validate().violations,
            vec![Violation::Disconnected { components: 2 }]
        );
    }

    #[test]
    fn multiview_shapes() {
        let s = multiview_schema(2, 5, &[3, 4], Gaussian, 2).unwrap();
        assert_eq!(s.n_sets(), 3);
        let pairs: Vec<_> = s.relations.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);

        let s = multiview_schema(1, 5, &[3], Gaussian, 2).unwrap();
        assert_eq!((s.n_sets(), s.n_relations()), (2, 1));

        let s = multiview_schema(3, 10, &[4, 5, 6], Gaussian, 2).unwrap();
        assert_eq!(s.n_relations(), 3);
        assert_eq!(s.total_entities(), 25);

        assert!(multiview_schema(0, 5, &[], Gaussian, 2).is_err());
        assert!(multiview_schema(1, 0, &[3], Gaussian, 2).is_err());
        assert!(multiview_schema(1, 2, &[0], Gaussian, 2).is_err());
    }

    #[test]
    fn json_uses_one_based_ids() {
        let text = r#"{
            "entity_sets": [{"name": "users", "size": 4}, {"name": "items", "size": 3}],
            "relations": [{"row": 1, "col": 2, "likelihood": "bernoulli"}],
            "rank": 2
        }"#;
        let s = Schema::from_json(text).unwrap();
        assert_eq!(s.relations[0].row, 0);
        assert_eq!(s.relations[0].col, 1);
        assert_eq!(s.relations[0].likelihood, Likelihood::Bernoulli);
        assert_eq!(Schema::from_json(&s.to_json()).unwrap(), s);
        assert_eq!(s.hash().len(), 64);

        let zero = text.replace("\"row\": 1", "\"row\": 0");
        assert!(Schema::from_json(&zero).is_err());
    }

    #[test]
    fn incident_lists_both_sides() {
        let s = cycle_schema(&[2, 2, 2], Gaussian, 1).unwrap();
        assert_eq!(s.incident(0), vec![(0, Side::Row), (2, Side::Col)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn multiview_always_valid(d_row in 1usize..20, cols in proptest::collection::vec(1usize..20, 1..6), rank in 1usize..5) {
                let s = multiview_schema(cols.len(), d_row, &cols, Gaussian, rank).unwrap();
                let first = s.validate();
                prop_assert!(first.is_ok());
                prop_assert_eq!(first, s.validate());
            }

            #[test]
            fn validate_is_pure(edges in proptest::collection::vec((0usize..5, 0usize..5), 0..8), rank in 0usize..3) {
                let rels: Vec<_> = edges.iter().map(|&(r, c)| (r, c, Gaussian)).collect();
                let s = Schema::from_parts(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)], &rels, rank);
                prop_assert_eq!(s.validate(), s.validate());
            }
        }
    }
}
