use std::collections::HashMap;

use super::{DataError, TkgDataset};

/// Objects known true for each `(subject, relation, time)` across all splits.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    map: HashMap<(usize, usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn build(ds: &TkgDataset) -> Result<Self, DataError> {
        if !ds.is_augmented() {
            return Err(DataError::Contract(
                "filter index needs inverse quadruples; call add_inverse_quadruples first".into(),
            ));
        }
        let mut map: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
        for q in ds.all_facts() {
            map.entry((q.subject, q.relation, q.time)).or_default().push(q.object);
        }
        for objs in map.values_mut() {
            objs.sort_unstable();
            objs.dedup();
        }
        Ok(Self { map })
    }

    /// Sorted object ids; empty when the key never occurs.
    pub fn objects(&self, subject: usize, relation: usize, time: usize) -> &[usize] {
        self.map
            .get(&(subject, relation, time))
            .map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_filter_index(ds: &TkgDataset) -> Result<FilterIndex, DataError> {
    FilterIndex::build(ds)
}
