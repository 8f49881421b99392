use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Split, TkgDataset};

/// Size and density statistics computed over base (non-inverse) facts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub num_timestamps: usize,
    /// Mean number of distinct entities touched per snapshot.
    pub avg_entities_per_snapshot: f64,
    /// `num_entities / avg_entities_per_snapshot`.
    pub entity_coverage_ratio: f64,
}

impl DatasetStats {
    pub fn compute(ds: &TkgDataset) -> Self {
        let mut per_time: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for split in Split::ALL {
            for q in ds.base_facts(split) {
                let ents = per_time.entry(q.time).or_default();
                ents.insert(q.subject);
                ents.insert(q.object);
            }
        }
        let avg = if per_time.is_empty() {
            0.0
        } else {
            per_time.values().map(|s| s.len() as f64).sum::<f64>() / per_time.len() as f64
        };
        Self {
            num_entities: ds.num_entities,
            num_relations: ds.num_base_relations,
            num_train: ds.base_facts(Split::Train).count(),
            num_valid: ds.base_facts(Split::Valid).count(),
            num_test: ds.base_facts(Split::Test).count(),
            num_timestamps: per_time.len(),
            avg_entities_per_snapshot: avg,
            entity_coverage_ratio: if avg > 0.0 { ds.num_entities as f64 / avg } else { 0.0 },
        }
    }

    pub fn to_table(&self) -> String {
        format!(
            "|E|\t|R|\tN_train\tN_valid\tN_test\tN_timestamp\t|E_avg|\t|E|/|E_avg|\n\
             {}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}\n",
            self.num_entities,
            self.num_relations,
            self.num_train,
            self.num_valid,
            self.num_test,
            self.num_timestamps,
            self.avg_entities_per_snapshot,
            self.entity_coverage_ratio
        )
    }
}
