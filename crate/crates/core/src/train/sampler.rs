use std::collections::BTreeMap;

use super::Reweight;
use crate::data::LabeledDataset;
use crate::error::{arg_err, Result};
use crate::linalg::RngState;

/// Group key of a sample. Samples without a domain label share the domain
/// slot `None`, so they form their own group instead of being dropped.
type GroupKey = (Option<usize>, Option<usize>);

/// Draws dataset indices from `indices` under a [`Reweight`] scheme.
#[derive(Clone, Debug)]
pub struct Sampler {
    mode: Reweight,
    indices: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

/// Builds the sampler over the given subset of `ds`.
pub fn make_sampler(ds: &LabeledDataset, indices: &[usize], mode: Reweight) -> Result<Sampler> {
    if indices.is_empty() {
        return arg_err("sampler needs at least one index");
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return arg_err(format!("index {bad} out of range for {} samples", ds.len()));
    }
    let mut map: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        let dom = ds.domain_label_present[i].then_some(ds.domain_labels[i]);
        let key = match mode {
            Reweight::None => (None, None),
            Reweight::ByDomain => (dom, None),
            Reweight::ByDomainClass => (dom, Some(ds.class_labels[i])),
        };
        map.entry(key).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = map
        .into_iter()
        .filter_map(|(key, g)| {
            if g.is_empty() {
                log::warn!("skipping empty sampling group {key:?}");
                None
            } else {
                Some(g)
            }
        })
        .collect();
    Ok(Sampler {
        mode,
        indices: indices.to_vec(),
        groups,
    })
}

impl Sampler {
    pub fn mode(&self) -> Reweight {
        self.mode
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// One draw: uniform over samples, or a uniform group then a uniform member.
    pub fn draw(&self, rng: &mut RngState) -> usize {
        match self.mode {
            Reweight::None => self.indices[rng.below(self.indices.len())],
            _ => {
                let g = &self.groups[rng.below(self.groups.len())];
                g[rng.below(g.len())]
            }
        }
    }

    /// Batches covering one epoch of `len()` samples. Without reweighting this
    /// is a shuffled pass (each sample exactly once); otherwise `len()` draws
    /// with replacement.
    pub fn epoch_batches(&self, rng: &mut RngState, batch_size: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = match self.mode {
            Reweight::None => {
                let mut v = self.indices.clone();
                rng.shuffle(&mut v);
                v
            }
            _ => (0..self.indices.len()).map(|_| self.draw(rng)).collect(),
        };
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.indices.len().div_ceil(batch_size.max(1))
    }

    /// Per-index weights (aligned with the sampler's index list) whose
    /// normalized mass equals the sampling distribution. They average 1.
    pub fn importance_weights(&self) -> Vec<(usize, f64)> {
        let n = self.indices.len() as f64;
        match self.mode {
            Reweight::None => self.indices.iter().map(|&i| (i, 1.0)).collect(),
            _ => {
                let g_count = self.groups.len() as f64;
                let mut w: BTreeMap<usize, f64> = BTreeMap::new();
                for g in &self.groups {
                    let each = n / (g_count * g.len() as f64);
                    for &i in g {
                        *w.entry(i).or_default() += each;
                    }
                }
                self.indices.iter().map(|&i| (i, w[&i])).collect()
            }
        }
    }
}
