use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// How a class's training examples are spread over clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    /// Round-robin over a shuffled index list.
    Iid,
    /// Per class, client proportions drawn from `Dirichlet(beta, …, beta)`.
    Dirichlet { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub partition: Partition,
    pub num_clients: usize,
    pub seed: u64,
    /// Held-out share of each class, 0.2 by default.
    pub test_fraction: f64,
}

impl PartitionConfig {
    pub fn dirichlet(beta: f64, num_clients: usize, seed: u64) -> Self {
        PartitionConfig {
            partition: Partition::Dirichlet { beta },
            num_clients,
            seed,
            test_fraction: 0.2,
        }
    }

    pub fn iid(num_clients: usize, seed: u64) -> Self {
        PartitionConfig {
            partition: Partition::Iid,
            num_clients,
            seed,
            test_fraction: 0.2,
        }
    }
}

/// Class-incremental split of a dataset into tasks, sharded over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    num_tasks: usize,
    num_clients: usize,
    class_groups: Vec<Vec<usize>>,
    /// `[task][client]` → training indices
    shards: Vec<Vec<Vec<usize>>>,
    test_split: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn class_groups(&self) -> &[Vec<usize>] {
        &self.class_groups
    }

    /// Training indices of `client` for `task` (both zero-based).
    pub fn shard(&self, client: usize, task: usize) -> &[usize] {
        &self.shards[task][client]
    }

    pub fn test_indices(&self, task: usize) -> &[usize] {
        &self.test_split[task]
    }

    /// Classes in the order they are introduced; a class's position here is
    /// its row in the classifier head.
    pub fn class_order(&self) -> Vec<usize> {
        self.class_groups.iter().flatten().copied().collect()
    }

    /// Map from dataset class id to head row.
    pub fn head_index(&self, num_dataset_classes: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; num_dataset_classes];
        for (row, c) in self.class_order().into_iter().enumerate() {
            map[c] = Some(row);
        }
        map
    }

    /// Number of classes introduced by tasks `0..=task`.
    pub fn classes_through(&self, task: usize) -> usize {
        self.class_groups[..=task].iter().map(Vec::len).sum()
    }
}

fn split_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // largest remainder first, lower client index on ties
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet(beta: f64, k: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        // every draw underflowed: put the whole class on the largest draw
        let best = draws
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        (0..k).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

/// Split the dataset's classes into `num_tasks` groups and shard each
/// task's training examples across clients.
pub fn build_schedule(
    dataset: &Dataset,
    num_tasks: usize,
    partition: &PartitionConfig,
    class_order_seed: u64,
) -> Result<TaskSchedule> {
    let num_classes = dataset.num_classes();
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    if num_tasks > num_classes {
        return Err(Error::Config(format!(
            "{num_tasks} tasks requested but the dataset has only {num_classes} classes"
        )));
    }
    if partition.num_clients == 0 {
        return Err(Error::Config("num_clients must be at least 1".into()));
    }
    if let Partition::Dirichlet { beta } = partition.partition {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("Dirichlet beta must be positive, got {beta}")));
        }
    }
    if !(0.0..1.0).contains(&partition.test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction must be in [0, 1), got {}",
            partition.test_fraction
        )));
    }

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut seed::derived_rng(class_order_seed, "class-order", &[]));
    let base = num_classes / num_tasks;
    let extra = num_classes % num_tasks;
    let mut class_groups = Vec::with_capacity(num_tasks);
    let mut cursor = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        class_groups.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let by_class = dataset.indices_by_class();
    let n_clients = partition.num_clients;
    let mut shards = vec![vec![Vec::new(); n_clients]; num_tasks];
    let mut test_split = vec![Vec::new(); num_tasks];
    for (t, group) in class_groups.iter().enumerate() {
        for &class in group {
            let mut idx = by_class[class].clone();
            let mut rng = seed::derived_rng(partition.seed, "partition", &[class as u64]);
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_test = if n >= 2 {
                ((partition.test_fraction * n as f64).round() as usize).clamp(
                    usize::from(partition.test_fraction > 0.0),
                    n - 1,
                )
            } else {
                0
            };
            test_split[t].extend_from_slice(&idx[..n_test]);
            let train = &idx[n_test..];
            match partition.partition {
                Partition::Iid => {
                    for (k, &i) in train.iter().enumerate() {
                        shards[t][k % n_clients].push(i);
                    }
                }
                Partition::Dirichlet { beta } => {
                    let p = dirichlet(beta, n_clients, &mut rng);
                    let counts = split_counts(train.len(), &p);
                    let mut off = 0;
                    for (client, c) in counts.into_iter().enumerate() {
                        shards[t][client].extend_from_slice(&train[off..off + c]);
                        off += c;
                    }
                }
            }
        }
        if test_split[t].is_empty() && partition.test_fraction > 0.0 {
            return Err(Error::Config(format!(
                "task {t} has no held-out examples; its classes are too small"
            )));
        }
    }
    for task in &mut shards {
        for shard in task.iter_mut() {
            shard.sort_unstable();
        }
    }
    for split in &mut test_split {
        split.sort_unstable();
    }
    Ok(TaskSchedule {
        num_tasks,
        num_clients: n_clients,
        class_groups,
        shards,
        test_split,
    })
}
