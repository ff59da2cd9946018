//! Per-layer channel candidate sets with search parameters: softmax-weighted
//! sampling, the threshold-triggered expansion decision, and winner-takes-all
//! candidate selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{ParamId, ParamStore};

/// Ascending channel-count candidates for one choice group, paired with the
/// search parameters (alphas) stored in the parameter store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelCandidateSet {
    pub counts: Vec<usize>,
    pub alpha: ParamId,
    pub cap: usize,
    /// Channel increment appended on each expansion (seed width / n0,
    /// continuing the arithmetic grid).
    pub expand_step: usize,
    pub searchable: bool,
}

impl ChannelCandidateSet {
    /// Evenly spaced grid at ratios {1/n0, ..., n0/n0} of the seed width,
    /// rounded to >= 1, deduplicated ascending.
    pub fn initial_counts(seed_width: usize, n0: usize) -> Vec<usize> {
        let mut counts: Vec<usize> = (1..=n0)
            .map(|i| ((seed_width * i) as f64 / n0 as f64).round().max(1.0) as usize)
            .collect();
        counts.dedup();
        counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_count(&self) -> usize {
        *self.counts.last().unwrap()
    }

    pub fn alphas<'a>(&self, store: &'a ParamStore) -> &'a [f32] {
        &store.get(self.alpha).value.data
    }

    /// Softmax over the full alpha vector.
    pub fn softmax(&self, store: &ParamStore) -> Vec<f32> {
        softmax(self.alphas(store))
    }

    /// Softmax mass assigned to the maximum-count candidate.
    pub fn max_candidate_mass(&self, store: &ParamStore) -> f32 {
        *self.softmax(store).last().unwrap()
    }

    /// Whether the full-set softmax mass of the max candidate reaches the
    /// preference threshold and the cap leaves room.
    pub fn expansion_due(&self, store: &ParamStore, threshold: f32) -> ExpansionDecision {
        if !self.searchable {
            return ExpansionDecision::No;
        }
        if self.max_candidate_mass(store) < threshold {
            return ExpansionDecision::No;
        }
        if self.counts.len() >= self.cap {
            return ExpansionDecision::Saturated;
        }
        ExpansionDecision::Expand
    }

    /// Winner-takes-all: candidate with the largest softmax mass, ties broken
    /// toward the smaller count.
    pub fn winner(&self, store: &ParamStore) -> usize {
        let w = self.softmax(store);
        let mut best = 0usize;
        for i in 1..w.len() {
            if w[i] > w[best] {
                best = i;
            }
        }
        self.counts[best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionDecision {
    Expand,
    Saturated,
    No,
}

/// Distinct candidate indices drawn for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSubset {
    pub indices: Vec<usize>,
}

impl SampledSubset {
    pub fn singleton(i: usize) -> Self {
        SampledSubset { indices: vec![i] }
    }
}

/// Draw `k` distinct indices without replacement, with probabilities
/// proportional to softmax(alphas) (`uniform = false`) or uniform over the
/// indices (`uniform = true`, the warm-up variant).
pub fn sample_candidates<R: Rng>(
    set: &ChannelCandidateSet,
    store: &ParamStore,
    k: usize,
    uniform: bool,
    rng: &mut R,
) -> SampledSubset {
    assert!(k >= 1);
    let n = set.counts.len();
    let k = k.min(n);
    let mut weights: Vec<f32> = if uniform { vec![1.0; n] } else { set.softmax(store) };
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f32 = weights.iter().sum();
        let mut u = rng.gen::<f32>() * total;
        let mut pick = remaining.len() - 1;
        for (pos, &w) in weights.iter().enumerate() {
            if u < w {
                pick = pos;
                break;
            }
            u -= w;
        }
        indices.push(remaining.remove(pick));
        weights.remove(pick);
    }
    SampledSubset { indices }
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let mx = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = v.iter().map(|&a| (a - mx).exp()).collect();
    let z: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}
