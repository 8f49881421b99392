use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Quadruple, TemporalRule, TkgDataset};

/// Configuration of a rule-driven synthetic dataset.
///
/// Each snapshot draws `facts_per_step` body-relation facts with distinct
/// subjects and distinct objects (subjects and objects disjoint). Every body
/// fact `(a, body, b, t)` yields the head fact `(a, head, b, t + 1)`.
/// Relations other than body and head carry independent random facts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub num_timestamps: usize,
    pub facts_per_step: usize,
    pub valid_steps: usize,
    pub test_steps: usize,
    pub body_relation: usize,
    pub head_relation: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_entities: 20,
            num_base_relations: 2,
            num_timestamps: 30,
            facts_per_step: 5,
            valid_steps: 5,
            test_steps: 5,
            body_relation: 0,
            head_relation: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Validation(msg));
        if self.num_base_relations < 2 {
            return fail(format!(
                "synthetic data needs at least 2 relations, got {}",
                self.num_base_relations
            ));
        }
        if self.body_relation == self.head_relation
            || self.body_relation >= self.num_base_relations
            || self.head_relation >= self.num_base_relations
        {
            return fail("rule body and head must be distinct relations in range".into());
        }
        if self.facts_per_step == 0 || 2 * self.facts_per_step > self.num_entities {
            return fail(format!(
                "facts_per_step must be in 1..={} for {} entities",
                self.num_entities / 2,
                self.num_entities
            ));
        }
        if self.num_timestamps < self.valid_steps + self.test_steps + 2 {
            return fail(format!(
                "{} timestamps cannot hold 2 training steps plus {} valid and {} test steps",
                self.num_timestamps, self.valid_steps, self.test_steps
            ));
        }
        Ok(())
    }

    pub fn rule(&self) -> TemporalRule {
        TemporalRule {
            body: self.body_relation,
            head: self.head_relation,
            lag: 1,
        }
    }
}

fn draw_pairs(rng: &mut ChaCha8Rng, entities: &mut [usize], k: usize) -> Vec<(usize, usize)> {
    entities.shuffle(rng);
    (0..k).map(|i| (entities[i], entities[k + i])).collect()
}

/// Generates a dataset whose head-relation facts follow the rule exactly.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TkgDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..spec.num_entities).collect();
    let k = spec.facts_per_step;
    let mut facts: Vec<Quadruple> = Vec::new();
    let mut previous_body: Vec<(usize, usize)> = Vec::new();
    for t in 0..spec.num_timestamps {
        let body = draw_pairs(&mut rng, &mut pool, k);
        for &(a, b) in &body {
            facts.push(Quadruple::new(a, spec.body_relation, b, t));
        }
        for &(a, b) in &previous_body {
            facts.push(Quadruple::new(a, spec.head_relation, b, t));
        }
        for r in (0..spec.num_base_relations).filter(|&r| r != spec.body_relation && r != spec.head_relation) {
            for (a, b) in draw_pairs(&mut rng, &mut pool, k) {
                facts.push(Quadruple::new(a, r, b, t));
            }
        }
        previous_body = body;
    }
    let valid_start = spec.num_timestamps - spec.valid_steps - spec.test_steps;
    let test_start = spec.num_timestamps - spec.test_steps;
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for q in facts {
        match q.time {
            t if t < valid_start => train.push(q),
            t if t < test_start => valid.push(q),
            _ => test.push(q),
        }
    }
    let mut ds = TkgDataset::new(spec.num_entities, spec.num_base_relations, train, valid, test)?;
    ds.rule = Some(spec.rule());
    Ok(ds)
}
