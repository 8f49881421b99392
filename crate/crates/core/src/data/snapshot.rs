use std::collections::BTreeMap;
use std::ops::Range;

use super::{DataError, Split, TkgDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub source: usize,
    pub relation: usize,
    pub destination: usize,
}

/// All edges of one snapshot index, sorted by (destination, relation, source).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub time: usize,
    pub edges: Vec<Edge>,
    /// CSR offsets over destinations: edges of entity `e` live in
    /// `dst_offsets[e]..dst_offsets[e + 1]`.
    pub dst_offsets: Vec<usize>,
    pub in_degree: Vec<usize>,
}

impl SnapshotGraph {
    pub fn new(time: usize, mut edges: Vec<Edge>, num_entities: usize) -> Self {
        edges.sort_unstable_by_key(|e| (e.destination, e.relation, e.source));
        let mut in_degree = vec![0; num_entities];
        for e in &edges {
            in_degree[e.destination] += 1;
        }
        let mut dst_offsets = Vec::with_capacity(num_entities + 1);
        dst_offsets.push(0);
        for d in &in_degree {
            dst_offsets.push(dst_offsets.last().unwrap() + d);
        }
        Self {
            time,
            edges,
            dst_offsets,
            in_degree,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.in_degree.len()
    }

    /// Positions in `edges` of the edges entering `entity`.
    pub fn incoming(&self, entity: usize) -> Range<usize> {
        self.dst_offsets[entity]..self.dst_offsets[entity + 1]
    }

    /// Entities touching at least one edge.
    pub fn active_entities(&self) -> usize {
        let mut seen = vec![false; self.num_entities()];
        for e in &self.edges {
            seen[e.source] = true;
            seen[e.destination] = true;
        }
        seen.into_iter().filter(|&b| b).count()
    }
}

/// Groups the selected splits' facts into one graph per snapshot index, ascending.
pub fn build_snapshots(ds: &TkgDataset, splits: &[Split]) -> Result<Vec<SnapshotGraph>, DataError> {
    if !ds.is_augmented() {
        return Err(DataError::Contract(
            "snapshots need inverse quadruples; call add_inverse_quadruples first".into(),
        ));
    }
    let mut by_time: BTreeMap<usize, Vec<Edge>> = BTreeMap::new();
    for &split in splits {
        for q in ds.split(split) {
            by_time.entry(q.time).or_default().push(Edge {
                source: q.subject,
                relation: q.relation,
                destination: q.object,
            });
        }
    }
    Ok(by_time
        .into_iter()
        .map(|(t, edges)| SnapshotGraph::new(t, edges, ds.num_entities))
        .collect())
}

/// The up-to-`length` snapshots strictly before `t_query`, in ascending time.
pub fn history_window(snapshots: &[SnapshotGraph], t_query: usize, length: usize) -> &[SnapshotGraph] {
    let end = snapshots.partition_point(|s| s.time < t_query);
    &snapshots[end.saturating_sub(length)..end]
}

/// Default history lengths for the public benchmarks.
pub fn default_history_length(dataset_name: &str) -> Option<usize> {
    match dataset_name.to_ascii_uppercase().as_str() {
        "ICEWS18" => Some(25),
        "GDELT" => Some(15),
        "WIKI" | "YAGO" => Some(10),
        _ => None,
    }
}
