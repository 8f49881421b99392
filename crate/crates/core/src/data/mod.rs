//! Temporal knowledge graph datasets: quadruples, splits, snapshots and filters.

mod filter;
mod io;
mod snapshot;
mod stats;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{build_filter_index, FilterIndex};
pub use io::{load_dataset, save_dataset, DATASET_HEADER_FILE, DATASET_FORMAT_VERSION};
pub use snapshot::{build_snapshots, default_history_length, history_window, Edge, SnapshotGraph};
pub use stats::DatasetStats;
pub use synth::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// One timestamped fact `(subject, relation, object, time)` in id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
}

impl Quadruple {
    pub fn new(subject: usize, relation: usize, object: usize, time: usize) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }

    /// The inverse fact `(o, r + num_base_relations, s, t)`.
    pub fn inverse(&self, num_base_relations: usize) -> Self {
        Self::new(
            self.object,
            self.relation + num_base_relations,
            self.subject,
            self.time,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(DataError::Validation(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

/// Deterministic temporal rule used by synthetic datasets:
/// `(a, body, b, t)` implies `(a, head, b, t + lag)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalRule {
    pub body: usize,
    pub head: usize,
    pub lag: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetWarning {
    EmptySplit(Split),
    UnseenRelation { split: Split, relation: usize },
}

impl fmt::Display for DatasetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetWarning::EmptySplit(s) => write!(f, "{s} split is empty"),
            DatasetWarning::UnseenRelation { split, relation } => write!(
                f,
                "relation {relation} appears in {split} but not in train; its embedding stays untrained"
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TkgDataset {
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    /// Raw time units per snapshot index.
    pub time_granularity: u64,
    /// Raw time mapped to snapshot index 0.
    pub min_raw_time: u64,
    pub rule: Option<TemporalRule>,
    augmented: bool,
}

impl TkgDataset {
    pub fn new(
        num_entities: usize,
        num_base_relations: usize,
        train: Vec<Quadruple>,
        valid: Vec<Quadruple>,
        test: Vec<Quadruple>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            num_entities,
            num_base_relations,
            train,
            valid,
            test,
            time_granularity: 1,
            min_raw_time: 0,
            rule: None,
            augmented: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Size of the relation vocabulary including inverse relations.
    pub fn num_relations(&self) -> usize {
        2 * self.num_base_relations
    }

    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Quadruple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Quadruple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Facts without their inverse copies.
    pub fn base_facts(&self, split: Split) -> impl Iterator<Item = &Quadruple> {
        let nr = self.num_base_relations;
        self.split(split).iter().filter(move |q| q.relation < nr)
    }

    /// Checks id ranges and the chronological split order.
    pub fn validate(&self) -> Result<(), DataError> {
        let rel_limit = if self.augmented {
            self.num_relations()
        } else {
            self.num_base_relations
        };
        for split in Split::ALL {
            for (i, q) in self.split(split).iter().enumerate() {
                if q.subject >= self.num_entities || q.object >= self.num_entities {
                    return Err(DataError::Validation(format!(
                        "{split} fact {i} {q:?}: entity id out of range for {} entities",
                        self.num_entities
                    )));
                }
                if q.relation >= rel_limit {
                    return Err(DataError::Validation(format!(
                        "{split} fact {i} {q:?}: relation id out of range for {rel_limit} relations"
                    )));
                }
            }
        }
        let range = |s: Split| {
            let ts = self.split(s).iter().map(|q| q.time);
            ts.clone().min().zip(ts.max())
        };
        let mut prev: Option<(Split, usize)> = None;
        for split in Split::ALL {
            if let Some((lo, hi)) = range(split) {
                if let Some((ps, pmax)) = prev {
                    if lo <= pmax {
                        return Err(DataError::Validation(format!(
                            "{split} starts at time {lo}, not after the last {ps} time {pmax}"
                        )));
                    }
                }
                prev = Some((split, hi));
            }
        }
        Ok(())
    }

    /// Non-fatal issues: empty splits and relations that never occur in train.
    pub fn warnings(&self) -> Vec<DatasetWarning> {
        let mut out = Vec::new();
        for split in Split::ALL {
            if self.split(split).is_empty() {
                out.push(DatasetWarning::EmptySplit(split));
            }
        }
        let seen: BTreeSet<usize> = self.train.iter().map(|q| q.relation).collect();
        for split in [Split::Valid, Split::Test] {
            let unseen: BTreeSet<usize> = self
                .split(split)
                .iter()
                .map(|q| q.relation)
                .filter(|r| !seen.contains(r))
                .collect();
            out.extend(
                unseen
                    .into_iter()
                    .map(|relation| DatasetWarning::UnseenRelation { split, relation }),
            );
        }
        out
    }

    /// Appends `(o, r + |R|, s, t)` for every fact, doubling each split.
    pub fn add_inverse_quadruples(mut self) -> Result<Self, DataError> {
        if self.augmented {
            return Err(DataError::Contract("dataset already has inverse quadruples".into()));
        }
        let nr = self.num_base_relations;
        for split in Split::ALL {
            let facts = self.split_mut(split);
            let inverses: Vec<Quadruple> = facts.iter().map(|q| q.inverse(nr)).collect();
            facts.extend(inverses);
        }
        self.augmented = true;
        Ok(self)
    }

    /// Maps every entity id through `permutation`; relations and times are untouched.
    pub fn relabel_entities(&self, permutation: &[usize]) -> Result<Self, DataError> {
        if permutation.len() != self.num_entities {
            return Err(DataError::Validation(format!(
                "permutation has {} entries for {} entities",
                permutation.len(),
                self.num_entities
            )));
        }
        let mut seen = vec![false; self.num_entities];
        for &p in permutation {
            if p >= self.num_entities || std::mem::replace(&mut seen[p], true) {
                return Err(DataError::Validation(format!(
                    "permutation is not a bijection (entry {p})"
                )));
            }
        }
        let map = |facts: &[Quadruple]| -> Vec<Quadruple> {
            facts
                .iter()
                .map(|q| Quadruple::new(permutation[q.subject], q.relation, permutation[q.object], q.time))
                .collect()
        };
        Ok(Self {
            train: map(&self.train),
            valid: map(&self.valid),
            test: map(&self.test),
            ..self.clone()
        })
    }

    /// Number of distinct snapshot indices across all splits.
    pub fn num_timestamps(&self) -> usize {
        self.all_facts().map(|q| q.time).collect::<BTreeSet<_>>().len()
    }
}

/// Inverse of a permutation given as a lookup table.
pub fn invert_permutation(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (i, &p) in permutation.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TkgDataset {
        TkgDataset::new(
            6,
            10,
            vec![Quadruple::new(2, 1, 5, 3), Quadruple::new(0, 4, 1, 3)],
            vec![Quadruple::new(1, 1, 2, 4)],
            vec![Quadruple::new(3, 1, 4, 5)],
        )
        .unwrap()
    }

    #[test]
    fn inverse_quadruples_are_added() {
        let ds = tiny().add_inverse_quadruples().unwrap();
        assert!(ds.train.contains(&Quadruple::new(5, 11, 2, 3)));
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.valid.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert!(ds.is_augmented());
        assert!(matches!(ds.add_inverse_quadruples(), Err(DataError::Contract(_))));
    }

    #[test]
    fn subject_query_becomes_inverse_object_query() {
        let ds = TkgDataset::new(4, 1, vec![Quadruple::new(1, 0, 3, 0)], vec![], vec![])
            .unwrap()
            .add_inverse_quadruples()
            .unwrap();
        // (?, r, 3, 0) is asked as (3, r⁻¹, ?, 0)
        let answers: Vec<usize> = ds
            .train
            .iter()
            .filter(|q| q.subject == 3 && q.relation == 1 && q.time == 0)
            .map(|q| q.object)
            .collect();
        assert_eq!(answers, vec![1]);
    }

    #[test]
    fn split_order_is_enforced() {
        let err = TkgDataset::new(
            3,
            1,
            vec![Quadruple::new(0, 0, 1, 5)],
            vec![Quadruple::new(0, 0, 1, 5)],
            vec![],
        );
        assert!(matches!(err, Err(DataError::Validation(_))));
        assert!(TkgDataset::new(3, 1, vec![Quadruple::new(0, 0, 3, 0)], vec![], vec![]).is_err());
    }

    #[test]
    fn warnings_report_empty_and_unseen() {
        let ds = tiny();
        assert!(!ds
            .warnings()
            .iter()
            .any(|w| matches!(w, DatasetWarning::UnseenRelation { .. })));
        let ds = TkgDataset::new(3, 2, vec![Quadruple::new(0, 0, 1, 0)], vec![], vec![Quadruple::new(0, 1, 2, 1)])
            .unwrap();
        let w = ds.warnings();
        assert!(w.contains(&DatasetWarning::EmptySplit(Split::Valid)));
        assert!(w.contains(&DatasetWarning::UnseenRelation {
            split: Split::Test,
            relation: 1
        }));
    }

    #[test]
    fn relabel_identity_and_inverse() {
        let ds = tiny();
        let id: Vec<usize> = (0..6).collect();
        assert_eq!(ds.relabel_entities(&id).unwrap(), ds);
        let perm = vec![3, 5, 0, 1, 4, 2];
        let there = ds.relabel_entities(&perm).unwrap();
        assert_ne!(there, ds);
        let back = there.relabel_entities(&invert_permutation(&perm)).unwrap();
        assert_eq!(back, ds);
        assert!(ds.relabel_entities(&[0, 0, 1, 2, 3, 4]).is_err());
        assert!(ds.relabel_entities(&[0, 1]).is_err());
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
