//! Class prototypes: mean view features, per-client class means and the
//! server-side aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrototypeError {
    #[error("empty input")]
    EmptyInput,
    #[error("ragged input: expected length {expected}, got {got}")]
    RaggedInput { expected: usize, got: usize },
    #[error("length mismatch: {features} features vs {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("prototype dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Client(u32),
    Global,
}

/// Average feature over the augmented views of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFeature {
    pub vector: Vec<f64>,
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub vector: Vec<f64>,
    /// Samples (local) or clients (global) that contributed.
    pub support: u32,
}

/// How the server combines client prototypes of the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalAggregation {
    /// Mean over the clients that hold the class.
    #[default]
    Mean,
    /// Unnormalised sum over those clients.
    Sum,
}

/// Per-class prototype map. Classes without support are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    owner: Owner,
    dim: usize,
    classes: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeSet {
    pub fn empty(owner: Owner, dim: usize) -> Self {
        Self {
            owner,
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn from_entries(
        owner: Owner,
        dim: usize,
        entries: impl IntoIterator<Item = (usize, Vec<f64>, u32)>,
    ) -> Result<Self, PrototypeError> {
        let mut set = Self::empty(owner, dim);
        for (class, vector, support) in entries {
            set.insert(class, vector, support)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>, support: u32) -> Result<(), PrototypeError> {
        if vector.len() != self.dim {
            return Err(PrototypeError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.classes.insert(class, ClassPrototype { vector, support });
        Ok(())
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains_key(&class)
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &ClassPrototype)> {
        self.classes.iter().map(|(c, p)| (*c, p))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }
}

/// Running mean; stays exact when every input is identical.
fn push_mean(acc: &mut [f64], x: &[f64], count: usize) {
    let k = count as f64;
    for (m, v) in acc.iter_mut().zip(x) {
        *m += (v - *m) / k;
    }
}

fn clamp_to(acc: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((m, l), h) in acc.iter_mut().zip(lo).zip(hi) {
        *m = m.clamp(*l, *h);
    }
}

/// Elementwise mean of the per-view features of one sample.
pub fn mean_feature(views: &[&[f64]], sample_id: usize) -> Result<MeanFeature, PrototypeError> {
    let first = views.first().ok_or(PrototypeError::EmptyInput)?;
    let dim = first.len();
    let mut acc = first.to_vec();
    for (n, v) in views.iter().enumerate().skip(1) {
        if v.len() != dim {
            return Err(PrototypeError::RaggedInput {
                expected: dim,
                got: v.len(),
            });
        }
        push_mean(&mut acc, v, n + 1);
    }
    Ok(MeanFeature {
        vector: acc,
        sample_id,
    })
}

struct Accumulator {
    mean: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    count: usize,
}

impl Accumulator {
    fn new(x: &[f64]) -> Self {
        Self {
            mean: x.to_vec(),
            lo: x.to_vec(),
            hi: x.to_vec(),
            count: 1,
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        push_mean(&mut self.mean, x, self.count);
        for ((l, h), v) in self.lo.iter_mut().zip(self.hi.iter_mut()).zip(x) {
            *l = l.min(*v);
            *h = h.max(*v);
        }
    }

    fn finish(mut self) -> Vec<f64> {
        clamp_to(&mut self.mean, &self.lo, &self.hi);
        self.mean
    }
}

/// Per-class mean of the samples' mean features.
///
/// Inputs are processed in `(sample_id, label)` order so the result does not
/// depend on how the caller ordered the lists.
pub fn local_prototypes(
    features: &[MeanFeature],
    labels: &[usize],
    owner: Owner,
) -> Result<PrototypeSet, PrototypeError> {
    if features.len() != labels.len() {
        return Err(PrototypeError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let first = features.first().ok_or(PrototypeError::EmptyInput)?;
    let dim = first.vector.len();
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        (features[a].sample_id, labels[a])
            .cmp(&(features[b].sample_id, labels[b]))
            .then_with(|| bits(&features[a].vector).cmp(&bits(&features[b].vector)))
    });

    let mut per_class: BTreeMap<usize, Accumulator> = BTreeMap::new();
    for i in order {
        let v = &features[i].vector;
        if v.len() != dim {
            return Err(PrototypeError::RaggedInput {
                expected: dim,
                got: v.len(),
            });
        }
        per_class
            .entry(labels[i])
            .and_modify(|acc| acc.push(v))
            .or_insert_with(|| Accumulator::new(v));
    }
    let mut set = PrototypeSet::empty(owner, dim);
    for (class, acc) in per_class {
        let support = acc.count as u32;
        set.insert(class, acc.finish(), support)?;
    }
    Ok(set)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Averages client prototypes per class over the clients that hold it.
pub fn aggregate_global(local_sets: &[PrototypeSet]) -> Result<PrototypeSet, PrototypeError> {
    aggregate_global_with(local_sets, GlobalAggregation::Mean)
}

pub fn aggregate_global_with(
    local_sets: &[PrototypeSet],
    mode: GlobalAggregation,
) -> Result<PrototypeSet, PrototypeError> {
    let dim = local_sets.first().ok_or(PrototypeError::EmptyInput)?.dim;
    let mut sorted: Vec<&PrototypeSet> = local_sets.iter().collect();
    sorted.sort_by_key(|s| s.owner);

    let mut per_class: BTreeMap<usize, (Accumulator, Vec<f64>)> = BTreeMap::new();
    for set in sorted {
        if set.dim != dim {
            return Err(PrototypeError::DimensionMismatch {
                expected: dim,
                got: set.dim,
            });
        }
        for (class, proto) in set.iter() {
            per_class
                .entry(class)
                .and_modify(|(acc, sum)| {
                    acc.push(&proto.vector);
                    sum.iter_mut().zip(&proto.vector).for_each(|(s, v)| *s += v);
                })
                .or_insert_with(|| (Accumulator::new(&proto.vector), proto.vector.clone()));
        }
    }
    let mut global = PrototypeSet::empty(Owner::Global, dim);
    for (class, (acc, sum)) in per_class {
        let support = acc.count as u32;
        let vector = match mode {
            GlobalAggregation::Mean => acc.finish(),
            GlobalAggregation::Sum => sum,
        };
        global.insert(class, vector, support)?;
    }
    Ok(global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_feature_basics() {
        let one = [1.0, 2.0, 3.0];
        assert_eq!(mean_feature(&[&one], 0).unwrap().vector, vec![1.0, 2.0, 3.0]);
        let (a, b) = ([0.0, 0.0], [2.0, 4.0]);
        assert_eq!(mean_feature(&[&a, &b], 0).unwrap().vector, vec![1.0, 2.0]);
        assert_eq!(mean_feature(&[], 0).unwrap_err(), PrototypeError::EmptyInput);
        let c = [1.0];
        assert!(matches!(mean_feature(&[&a, &c], 0), Err(PrototypeError::RaggedInput { .. })));
    }

    #[test]
    fn mean_of_copies_is_exact() {
        let v = [0.1, 1.0 / 3.0, -7.7e-3];
        let views = vec![&v[..]; 7];
        assert_eq!(mean_feature(&views, 0).unwrap().vector, v.to_vec());
    }

    fn mf(v: Vec<f64>, id: usize) -> MeanFeature {
        MeanFeature { vector: v, sample_id: id }
    }

    #[test]
    fn local_prototype_cases() {
        let set = local_prototypes(&[mf(vec![1.0, 2.0], 0)], &[0], Owner::Client(0)).unwrap();
        assert_eq!(set.get(0).unwrap().vector, vec![1.0, 2.0]);
        assert_eq!(set.get(0).unwrap().support, 1);

        let feats = vec![
            mf(vec![1.0, 0.0], 0),
            mf(vec![3.0, 2.0], 1),
            mf(vec![-1.0, 4.0], 2),
            mf(vec![-3.0, 8.0], 3),
        ];
        let set = local_prototypes(&feats, &[0, 0, 2, 2], Owner::Client(1)).unwrap();
        assert_eq!(set.get(0).unwrap().vector, vec![2.0, 1.0]);
        assert_eq!(set.get(2).unwrap().vector, vec![-2.0, 6.0]);
        assert!(!set.contains(1));
        assert!(!set.contains(3));
        assert_eq!(set.len(), 2);

        assert!(matches!(
            local_prototypes(&feats, &[0, 1], Owner::Client(0)),
            Err(PrototypeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn global_cases() {
        let a = PrototypeSet::from_entries(Owner::Client(0), 2, [(0, vec![1.0, 2.0], 3), (1, vec![0.5, 0.5], 1)]).unwrap();
        let mut b = a.clone();
        b.owner = Owner::Client(1);
        let g = aggregate_global(&[a.clone(), b]).unwrap();
        assert_eq!(g.get(0).unwrap().vector, vec![1.0, 2.0]);
        assert_eq!(g.get(0).unwrap().support, 2);
        assert_eq!(g.owner(), Owner::Global);

        let x = PrototypeSet::from_entries(Owner::Client(0), 1, [(0, vec![4.0], 2)]).unwrap();
        let y = PrototypeSet::from_entries(Owner::Client(1), 1, [(1, vec![-4.0], 2)]).unwrap();
        let g = aggregate_global(&[x.clone(), y.clone()]).unwrap();
        assert_eq!(g.get(0).unwrap().vector, vec![4.0]);
        assert_eq!(g.get(1).unwrap().vector, vec![-4.0]);
        assert_eq!(g.get(1).unwrap().support, 1);

        let z = PrototypeSet::from_entries(Owner::Client(2), 1, [(0, vec![2.0], 2)]).unwrap();
        let summed = aggregate_global_with(&[x, z], GlobalAggregation::Sum).unwrap();
        assert_eq!(summed.get(0).unwrap().vector, vec![6.0]);

        assert_eq!(aggregate_global(&[]).unwrap_err(), PrototypeError::EmptyInput);
        let w = PrototypeSet::empty(Owner::Client(3), 3);
        assert!(matches!(aggregate_global(&[a, w]), Err(PrototypeError::DimensionMismatch { .. })));
    }

    fn arb_sets() -> impl Strategy<Value = Vec<PrototypeSet>> {
        prop::collection::vec(prop::collection::btree_map(0usize..5, prop::collection::vec(-10.0f64..10.0, 3), 0..5), 1..6)
            .prop_map(|maps| {
                maps.into_iter()
                    .enumerate()
                    .map(|(k, m)| {
                        PrototypeSet::from_entries(Owner::Client(k as u32), 3, m.into_iter().map(|(c, v)| (c, v, 1))).unwrap()
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn global_is_bounded_and_order_free(sets in arb_sets(), rot in 0usize..6) {
            let g = aggregate_global(&sets).unwrap();
            let mut rotated = sets.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            prop_assert_eq!(&aggregate_global(&rotated).unwrap(), &g);
            for (class, proto) in g.iter() {
                for j in 0..3 {
                    let vals: Vec<f64> = sets.iter().filter_map(|s| s.get(class)).map(|p| p.vector[j]).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo <= proto.vector[j] && proto.vector[j] <= hi);
                }
            }
        }

        #[test]
        fn local_is_permutation_invariant(
            rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 2), 0usize..3), 1..12),
            shift in 0usize..12,
        ) {
            let feats: Vec<MeanFeature> = rows.iter().enumerate().map(|(i, (v, _))| mf(v.clone(), i)).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
            let base = local_prototypes(&feats, &labels, Owner::Client(0)).unwrap();
            let mut pairs: Vec<_> = feats.into_iter().zip(labels).collect();
            let n = pairs.len();
            pairs.rotate_left(shift % n);
            pairs.reverse();
            let (f2, l2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert_eq!(local_prototypes(&f2, &l2, Owner::Client(0)).unwrap(), base);
        }
    }
}
