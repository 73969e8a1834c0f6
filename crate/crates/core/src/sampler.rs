//! Class-balanced batching for diffusion training.
//!
//! Every batch takes the same quota `B_C = ceil(B / k)` from each of the `k`
//! non-empty classes. Each class's stream is its indices shuffled, extended
//! with independent reshuffles until it is at least as long as the largest
//! class, so minority classes cycle while the majority class is seen exactly
//! once per epoch.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Per-class index lists of one client's task shard.
pub type ClassIndices = Vec<(usize, Vec<usize>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochBatchPlan {
    /// Each batch is an ordered list of `(class, dataset index)`.
    pub batches: Vec<Vec<(usize, usize)>>,
    /// The reshuffle-extended stream of every non-empty class.
    pub streams: Vec<(usize, Vec<usize>)>,
    pub per_class_quota: usize,
    pub num_batches: usize,
    pub majority_size: usize,
}

impl EpochBatchPlan {
    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Image rows for each batch; labels are dropped.
    pub fn iterate<'a>(&'a self, dataset: &'a Dataset) -> impl Iterator<Item = Result<Array2<f64>>> + 'a {
        self.batches.iter().map(move |batch| {
            let idx: Vec<usize> = batch.iter().map(|&(_, i)| i).collect();
            dataset.image_rows(&idx)
        })
    }
}

/// Group `indices` by their label in `dataset`, in ascending class order.
pub fn group_by_class(dataset: &Dataset, indices: &[usize]) -> Result<ClassIndices> {
    let mut by = std::collections::BTreeMap::<usize, Vec<usize>>::new();
    for &i in indices {
        let ex = dataset.get(i).ok_or_else(|| {
            Error::Integrity(format!("index {i} out of range for dataset of {}", dataset.len()))
        })?;
        by.entry(ex.label).or_default().push(i);
    }
    Ok(by.into_iter().collect())
}

pub fn plan_epoch(shard: &[(usize, Vec<usize>)], batch_size: usize, seed: u64) -> Result<EpochBatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let classes: Vec<&(usize, Vec<usize>)> = shard.iter().filter(|(_, v)| !v.is_empty()).collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("balanced sampler needs a non-empty class".into()));
    }
    let k = classes.len();
    let quota = batch_size.div_ceil(k);
    let majority = classes.iter().map(|(_, v)| v.len()).max().expect("non-empty");
    let num_batches = majority.div_ceil(quota);

    let mut rng = seed::rng(seed);
    let streams: Vec<(usize, Vec<usize>)> = classes
        .iter()
        .map(|(class, idx)| {
            let mut stream = idx.clone();
            stream.shuffle(&mut rng);
            for _ in 1..majority.div_ceil(idx.len()) {
                let mut again = idx.clone();
                again.shuffle(&mut rng);
                stream.extend(again);
            }
            (*class, stream)
        })
        .collect();

    let batches = (0..num_batches)
        .map(|b| {
            let mut batch = Vec::with_capacity(quota * k);
            for (class, stream) in &streams {
                let lo = (b * quota).min(stream.len());
                let hi = ((b + 1) * quota).min(stream.len());
                batch.extend(stream[lo..hi].iter().map(|&i| (*class, i)));
            }
            batch
        })
        .collect();

    Ok(EpochBatchPlan {
        batches,
        streams,
        per_class_quota: quota,
        num_batches,
        majority_size: majority,
    })
}

/// Plain shuffled batching over all indices, ignoring class. Used when the
/// balanced sampler is ablated.
pub fn plan_uniform_epoch(shard: &[(usize, Vec<usize>)], batch_size: usize, seed: u64) -> Result<EpochBatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut all: Vec<(usize, usize)> = shard
        .iter()
        .flat_map(|(c, idx)| idx.iter().map(move |&i| (*c, i)))
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("sampler needs at least one example".into()));
    }
    all.shuffle(&mut seed::rng(seed));
    let batches: Vec<Vec<(usize, usize)>> = all.chunks(batch_size).map(<[_]>::to_vec).collect();
    Ok(EpochBatchPlan {
        num_batches: batches.len(),
        batches,
        streams: Vec::new(),
        per_class_quota: batch_size,
        majority_size: shard.iter().map(|(_, v)| v.len()).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(sizes: &[usize]) -> ClassIndices {
        let mut next = 0;
        sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                let v = (next..next + n).collect();
                next += n;
                (c, v)
            })
            .collect()
    }

    fn count(batch: &[(usize, usize)], class: usize) -> usize {
        batch.iter().filter(|(c, _)| *c == class).count()
    }

    #[test]
    fn hand_traced_five_three_two() {
        let plan = plan_epoch(&shard(&[5, 3, 2]), 6, 1).unwrap();
        assert_eq!(plan.per_class_quota, 2);
        assert_eq!(plan.majority_size, 5);
        assert_eq!(plan.num_batches, 3);
        let lens: Vec<usize> = plan.streams.iter().map(|(_, s)| s.len()).collect();
        assert_eq!(lens, vec![5, 6, 6]);
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![6, 6, 5]);
        for b in 0..2 {
            for c in 0..3 {
                assert_eq!(count(&plan.batches[b], c), 2);
            }
        }
        assert_eq!(count(&plan.batches[2], 0), 1);
        assert_eq!(count(&plan.batches[2], 1), 2);
        assert_eq!(count(&plan.batches[2], 2), 2);
    }

    #[test]
    fn single_class_is_one_permutation() {
        let plan = plan_epoch(&shard(&[4]), 4, 3).unwrap();
        assert_eq!((plan.per_class_quota, plan.num_batches), (4, 1));
        let mut got: Vec<usize> = plan.batches[0].iter().map(|&(_, i)| i).collect();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn balanced_pair_sees_each_sample_once() {
        let n = 7;
        let plan = plan_epoch(&shard(&[n, n]), 2, 5).unwrap();
        assert_eq!(plan.num_batches, n);
        let mut seen = vec![0; 2 * n];
        for b in &plan.batches {
            assert_eq!(count(b, 0), 1);
            assert_eq!(count(b, 1), 1);
            for &(_, i) in b {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn empty_classes_are_skipped_and_all_empty_errors() {
        let s = vec![(0, vec![]), (1, vec![3, 4]), (2, vec![])];
        let plan = plan_epoch(&s, 4, 0).unwrap();
        assert_eq!(plan.per_class_quota, 4);
        assert!(plan_epoch(&[(0, vec![])], 4, 0).is_err());
        assert!(plan_epoch(&[], 4, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let s = shard(&[9, 4, 1]);
        assert_eq!(plan_epoch(&s, 5, 77).unwrap(), plan_epoch(&s, 5, 77).unwrap());
        assert_ne!(plan_epoch(&s, 5, 77).unwrap(), plan_epoch(&s, 5, 78).unwrap());
    }

    #[test]
    fn iterate_yields_plan_sized_batches() {
        use crate::dataset::{synth_dataset, ImageShape};
        let d = synth_dataset(3, 5, ImageShape::new(1, 4, 4), 0);
        let groups = group_by_class(&d, &[0, 1, 2, 3, 4, 5, 6, 7, 10, 11]).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|(_, v)| v.len()).collect();
        assert_eq!(sizes, vec![5, 3, 2]);
        let plan = plan_epoch(&groups, 6, 2).unwrap();
        let rows: Vec<usize> = plan.iterate(&d).map(|b| b.unwrap().nrows()).collect();
        assert_eq!(rows, vec![6, 6, 5]);
        assert_eq!(rows.iter().sum::<usize>(), plan.total_samples());

        let bad = EpochBatchPlan { batches: vec![vec![(0, 99)]], ..plan.clone() };
        assert!(matches!(bad.iterate(&d).next().unwrap(), Err(Error::Integrity(_))));
        let empty = EpochBatchPlan { batches: vec![], ..plan };
        assert_eq!(empty.iterate(&d).count(), 0);
    }

    #[test]
    fn uniform_plan_covers_everything_once() {
        let s = shard(&[5, 3, 2]);
        let plan = plan_uniform_epoch(&s, 4, 1).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = plan.batches.iter().flatten().map(|&(_, i)| i).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
