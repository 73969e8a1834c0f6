//! Server-side orchestration: the task loop, head expansion, client
//! selection, local updates, FedAvg aggregation and byte accounting.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierSpec};
use crate::dataset::{Dataset, TaskSchedule};
use crate::diffusion::{DenoiserSpec, DiffusionModel, DiffusionTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyRecord, StepAccuracy};
use crate::replay::{self, ReplayConfig};
use crate::seed;
use crate::training::{self, LossConfig, LossTerms, TrainingSet};

/// Bytes per transmitted parameter (f32 on the wire).
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Dfeddgm,
    /// Plain FedAvg: no generator, no replay, CE only.
    FedavgBaseline,
}

/// Component switches; all on for the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub balanced_sampler: bool,
    pub entropy_filter: bool,
    pub kd_loss: bool,
    pub fd_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            balanced_sampler: true,
            entropy_filter: true,
            kd_loss: true,
            fd_loss: true,
        }
    }
}

/// When generator training and replay generation happen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// Every round in which the client is selected.
    #[default]
    PerRound,
    /// Once per task.
    PerTask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Real samples of the current task held by each client.
    #[default]
    SampleCount,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub method: Method,
    pub ablation: Ablation,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub weighting: Weighting,
    pub loss: LossConfig,
    pub replay: ReplayConfig,
    /// Refresh cadence of the replay set.
    pub replay_refresh: Cadence,
    pub classifier: ClassifierSpec,
    pub denoiser: DenoiserSpec,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffusionTrainConfig,
    /// Generator epochs per training call.
    pub diffusion_epochs: usize,
    pub diffusion_training: Cadence,
    /// Client worker threads; 0 uses every core.
    pub workers: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return Err(Error::Config(format!(
                "clients_per_round must lie in 1..={num_clients}, got {}",
                self.clients_per_round
            )));
        }
        self.loss.validate()?;
        self.replay.validate()?;
        self.classifier.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.image != self.classifier.image {
            return Err(Error::Config("classifier and denoiser image shapes differ".into()));
        }
        Ok(())
    }

    fn uses_generator(&self) -> bool {
        self.method == Method::Dfeddgm
    }

    /// Loss settings after ablation switches.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        if self.method == Method::FedavgBaseline || !self.ablation.kd_loss {
            loss.alpha = 0.0;
        }
        if self.method == Method::FedavgBaseline || !self.ablation.fd_loss {
            loss.gamma = 0.0;
        }
        loss
    }

    pub fn effective_replay(&self) -> ReplayConfig {
        ReplayConfig {
            entropy_filter: self.replay.entropy_filter && self.ablation.entropy_filter,
            ..self.replay
        }
    }

    pub fn effective_diffusion(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            balanced: self.diffusion.balanced && self.ablation.balanced_sampler,
            ..self.diffusion
        }
    }
}

/// Clients chosen for one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub task: usize,
    pub round: usize,
    pub selected: Vec<usize>,
    pub client_seeds: Vec<u64>,
}

impl RoundPlan {
    /// Sample `m` of `n` clients without replacement, sorted ascending.
    pub fn draw(task: usize, round: usize, num_clients: usize, m: usize, master: u64) -> Result<Self> {
        if m == 0 || m > num_clients {
            return Err(Error::Config(format!("cannot select {m} of {num_clients} clients")));
        }
        let all: Vec<usize> = (0..num_clients).collect();
        let mut rng = seed::derived_rng(master, "select", &[task as u64, round as u64]);
        let mut selected: Vec<usize> = all.choose_multiple(&mut rng, m).copied().collect();
        selected.sort_unstable();
        let client_seeds = selected
            .iter()
            .map(|&c| seed::derive(master, "client", &[task as u64, round as u64, c as u64]))
            .collect();
        Ok(RoundPlan {
            task,
            round,
            selected,
            client_seeds,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub up: u64,
    pub down: u64,
}

/// Classifier bytes exchanged per round. Nothing else is ever counted
/// because nothing else is ever sent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: Vec<RoundBytes>,
    pub total: u64,
}

impl CommLedger {
    pub fn model_bytes(num_params: usize) -> u64 {
        num_params as u64 * BYTES_PER_PARAM
    }

    /// Record a round where `clients` each download and upload one model.
    pub fn record_round(&mut self, clients: usize, model_bytes: u64) -> RoundBytes {
        let b = RoundBytes {
            up: clients as u64 * model_bytes,
            down: clients as u64 * model_bytes,
        };
        self.total += b.up + b.down;
        self.rounds.push(b);
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub filter_enabled: bool,
    pub generated: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub real_samples: usize,
    pub loss: LossTerms,
    pub steps: usize,
    pub replay: Option<ReplayStats>,
    /// Mean generator loss when the generator trained this round.
    pub diffusion_loss: Option<f64>,
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub bytes_total: u64,
    pub head_classes: usize,
}

/// Accuracies measured when a task's rounds are done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEndRecord {
    pub task: usize,
    pub accuracy: StepAccuracy,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Round(RoundRecord),
    TaskEnd(TaskEndRecord),
    Error { message: String },
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: Classifier,
    pub generators: Vec<Option<DiffusionModel>>,
    pub accuracy: AccuracyRecord,
    pub ledger: CommLedger,
    pub rounds: Vec<RoundRecord>,
}

/// Per-client state that persists across tasks and never leaves the client.
struct ClientState {
    generator: Option<DiffusionModel>,
    replay: Option<TrainingSet>,
    replay_stats: Option<ReplayStats>,
    trained_this_task: bool,
}

/// What the server hands a selected client.
struct Dispatch<'a> {
    global: &'a Classifier,
    teacher: Option<&'a Arc<Classifier>>,
}

/// What a client hands back: classifier parameters plus scalars for the log.
struct Upload {
    model: Classifier,
    weight: f64,
    record: ClientRecord,
}

/// Frozen snapshots of the previous task, checked for mutation each round.
struct Frozen {
    teacher: Option<Arc<Classifier>>,
    generators: Vec<Option<Arc<DiffusionModel>>>,
}

impl Frozen {
    fn fingerprint(&self) -> Vec<u64> {
        let mut f: Vec<u64> = self.teacher.iter().map(|t| t.params().fingerprint()).collect();
        f.extend(self.generators.iter().flatten().map(|g| g.denoiser.params().fingerprint()));
        f
    }
}

fn real_training_set(dataset: &Dataset, indices: &[usize], head: &[Option<usize>]) -> Result<TrainingSet> {
    let images = dataset.image_rows(indices)?;
    let labels = indices
        .iter()
        .map(|&i| {
            let c = dataset.examples()[i].label;
            head.get(c).copied().flatten().ok_or_else(|| {
                Error::Integrity(format!("class {c} has no head row"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(images, labels)
}

/// Orchestrates one experiment over a dataset and its task schedule.
pub struct Federation<'a> {
    dataset: &'a Dataset,
    schedule: &'a TaskSchedule,
    config: FederationConfig,
    head: Vec<Option<usize>>,
    pool: rayon::ThreadPool,
}

impl<'a> Federation<'a> {
    pub fn new(dataset: &'a Dataset, schedule: &'a TaskSchedule, config: FederationConfig) -> Result<Self> {
        config.validate(schedule.num_clients())?;
        if dataset.shape() != config.classifier.image {
            return Err(Error::Config(format!(
                "dataset images {:?} but model expects {:?}",
                dataset.shape(),
                config.classifier.image
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Federation {
            dataset,
            schedule,
            head: schedule.head_index(dataset.num_classes()),
            config,
            pool,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    /// The initial global model covering task 0's classes.
    pub fn initial_model(&self) -> Result<Classifier> {
        let mut rng = seed::derived_rng(self.config.seed, "classifier-init", &[]);
        Classifier::new(self.config.classifier.clone(), self.schedule.classes_through(0), &mut rng)
    }

    fn initial_generator(&self, client: usize) -> Result<DiffusionModel> {
        let mut rng = seed::derived_rng(self.config.seed, "diffusion-init", &[client as u64]);
        DiffusionModel::new(self.config.denoiser.clone(), self.config.schedule.clone(), &mut rng)
    }

    /// Run every task in order. `on_event` sees each round and task-end
    /// record as soon as it exists.
    pub fn run(&self, mut on_event: impl FnMut(&LogRecord) -> Result<()>) -> Result<RunResult> {
        let n = self.schedule.num_clients();
        let mut clients = (0..n)
            .map(|i| {
                Ok(ClientState {
                    generator: if self.config.uses_generator() {
                        Some(self.initial_generator(i)?)
                    } else {
                        None
                    },
                    replay: None,
                    replay_stats: None,
                    trained_this_task: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut global = self.initial_model()?;
        let mut frozen = Frozen {
            teacher: None,
            generators: vec![None; n],
        };
        let mut accuracy = AccuracyRecord::new();
        let mut ledger = CommLedger::default();
        let mut rounds = Vec::new();
        for task in 0..self.schedule.num_tasks() {
            global = self
                .run_task(global, task, &frozen, &mut clients, &mut ledger, |r| {
                    rounds.push(r.clone());
                    on_event(&LogRecord::Round(r.clone()))
                })
                .map_err(|e| e.context(format!("task {}", task + 1)))?;
            if self.config.uses_generator() && self.config.diffusion_training == Cadence::PerTask {
                self.train_generators_at_task_end(task, &mut clients)?;
            }
            let step = metrics::evaluate_step(&global, self.dataset, self.schedule, task + 1)?;
            log::info!(
                "task {}/{}: observed accuracy {:.4}",
                task + 1,
                self.schedule.num_tasks(),
                step.observed.value()
            );
            on_event(&LogRecord::TaskEnd(TaskEndRecord {
                task: task + 1,
                accuracy: step.clone(),
            }))?;
            accuracy.push(step)?;
            frozen = Frozen {
                teacher: (self.config.method == Method::Dfeddgm).then(|| Arc::new(global.clone())),
                generators: clients
                    .iter()
                    .map(|c| c.generator.clone().map(Arc::new))
                    .collect(),
            };
            for c in &mut clients {
                c.replay = None;
                c.replay_stats = None;
                c.trained_this_task = false;
            }
        }
        Ok(RunResult {
            model: global,
            generators: clients.into_iter().map(|c| c.generator).collect(),
            accuracy,
            ledger,
            rounds,
        })
    }

    fn train_generators_at_task_end(&self, task: usize, clients: &mut [ClientState]) -> Result<()> {
        let cfg = self.config.effective_diffusion();
        let jobs: Vec<(usize, &mut ClientState)> = clients
            .iter_mut()
            .enumerate()
            .filter(|(i, c)| c.trained_this_task && !self.schedule.shard(*i, task).is_empty())
            .collect();
        self.pool.install(|| {
            use rayon::prelude::*;
            jobs.into_par_iter()
                .map(|(i, c)| {
                    let seed_ = seed::derive(self.config.seed, "diffusion-train", &[task as u64, i as u64]);
                    let generator = c.generator.as_mut().expect("generator exists for dfeddgm");
                    generator
                        .train_epochs(self.dataset, self.schedule.shard(i, task), self.config.diffusion_epochs, &cfg, seed_)
                        .map(|_| ())
                        .map_err(|e| e.context(format!("client {i} generator")))
                })
                .collect::<Result<()>>()
        })
    }

    /// Expand the head for `task` and run its rounds.
    fn run_task(
        &self,
        mut global: Classifier,
        task: usize,
        frozen: &Frozen,
        clients: &mut [ClientState],
        ledger: &mut CommLedger,
        mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
    ) -> Result<Classifier> {
        let mut rng = seed::derived_rng(self.config.seed, "head-expand", &[task as u64]);
        global.expand_head(self.schedule.classes_through(task), &mut rng)?;
        let before = frozen.fingerprint();
        for round in 0..self.config.rounds {
            let plan = RoundPlan::draw(
                task,
                round,
                self.schedule.num_clients(),
                self.config.clients_per_round,
                self.config.seed,
            )?;
            let dispatch = Dispatch {
                global: &global,
                teacher: frozen.teacher.as_ref(),
            };
            let uploads = self
                .round_updates(&plan, &dispatch, frozen, clients)
                .map_err(|e| e.context(format!("round {}", round + 1)))?;
            let models: Vec<&Classifier> = uploads.iter().map(|u| &u.model).collect();
            let mut weights: Vec<f64> = uploads.iter().map(|u| u.weight).collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let next = Classifier::aggregate(&models, &weights)?;
            let bytes = ledger.record_round(plan.selected.len(), CommLedger::model_bytes(global.num_params()));
            global = next;
            if frozen.fingerprint() != before {
                return Err(Error::Integrity(format!(
                    "frozen teacher or generator changed during round {}",
                    round + 1
                )));
            }
            let record = RoundRecord {
                task: task + 1,
                round: round + 1,
                selected: plan.selected.clone(),
                clients: uploads.into_iter().map(|u| u.record).collect(),
                bytes_up: bytes.up,
                bytes_down: bytes.down,
                bytes_total: ledger.total,
                head_classes: global.current_classes(),
            };
            on_round(&record)?;
        }
        Ok(global)
    }

    fn round_updates(
        &self,
        plan: &RoundPlan,
        dispatch: &Dispatch<'_>,
        frozen: &Frozen,
        clients: &mut [ClientState],
    ) -> Result<Vec<Upload>> {
        let mut jobs: Vec<(usize, u64, &mut ClientState)> = Vec::with_capacity(plan.selected.len());
        let mut rest = clients.iter_mut().enumerate();
        for (&c, &s) in plan.selected.iter().zip(&plan.client_seeds) {
            let state = rest
                .by_ref()
                .find(|(i, _)| *i == c)
                .map(|(_, st)| st)
                .expect("selected clients are sorted and in range");
            jobs.push((c, s, state));
        }
        self.pool.install(|| {
            use rayon::prelude::*;
            jobs.into_par_iter()
                .map(|(c, s, state)| {
                    self.client_round(plan, c, s, state, dispatch, frozen.generators[c].as_deref())
                        .map_err(|e| e.context(format!("client {c}")))
                })
                .collect()
        })
    }

    /// One selected client's work for a round.
    fn client_round(
        &self,
        plan: &RoundPlan,
        client: usize,
        seed_: u64,
        state: &mut ClientState,
        dispatch: &Dispatch<'_>,
        prev_generator: Option<&DiffusionModel>,
    ) -> Result<Upload> {
        let task = plan.task;
        let shard = self.schedule.shard(client, task);
        let real = real_training_set(self.dataset, shard, &self.head)?;
        let teacher = dispatch.teacher.map(|t| t.as_ref());

        let refresh = state.replay.is_none() || self.config.replay_refresh == Cadence::PerRound;
        if let (Some(generator), Some(t), true) = (prev_generator, teacher, refresh) {
            let cfg = self.config.effective_replay();
            let replay_seed = match self.config.replay_refresh {
                Cadence::PerTask => seed::derive(self.config.seed, "replay", &[task as u64, client as u64]),
                Cadence::PerRound => seed::derive(seed_, "replay", &[]),
            };
            let batch = replay::build_replay(generator, t, &cfg, replay_seed)?;
            let (rows, labels) = batch.retained_rows();
            state.replay_stats = Some(ReplayStats {
                filter_enabled: cfg.entropy_filter,
                generated: batch.generated(),
                retained: batch.retained_count(),
            });
            state.replay = Some(TrainingSet::new(rows, labels)?);
        }
        let data = match &state.replay {
            Some(r) => real.concat(r)?,
            None => real,
        };

        let loss_cfg = self.config.effective_loss();
        let distill = loss_cfg.alpha > 0.0 || loss_cfg.gamma > 0.0;
        let mut model = dispatch.global.clone();
        let report = training::client_update(&mut model, &data, teacher.filter(|_| distill), &loss_cfg, seed_)?;

        let mut diffusion_loss = None;
        if let Some(generator) = state.generator.as_mut() {
            state.trained_this_task = true;
            if self.config.diffusion_training == Cadence::PerRound && !shard.is_empty() {
                let dseed = seed::derive(seed_, "diffusion-train", &[]);
                let losses = generator.train_epochs(
                    self.dataset,
                    shard,
                    self.config.diffusion_epochs,
                    &self.config.effective_diffusion(),
                    dseed,
                )?;
                if !losses.is_empty() {
                    diffusion_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
                }
            }
        }

        let weight = match self.config.weighting {
            Weighting::SampleCount => shard.len() as f64,
            Weighting::Uniform => 1.0,
        };
        Ok(Upload {
            model,
            weight,
            record: ClientRecord {
                client,
                real_samples: shard.len(),
                loss: report.overall(),
                steps: report.steps.len(),
                replay: state.replay_stats.clone(),
                diffusion_loss,
            },
        })
    }
}

/// Build and run a federation in one call.
pub fn run_experiment(
    dataset: &Dataset,
    schedule: &TaskSchedule,
    config: FederationConfig,
    on_event: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<RunResult> {
    Federation::new(dataset, schedule, config)?.run(on_event)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_matches_hand_count() {
        // T=2, R=10, m=4, 1000 parameters
        let mut ledger = CommLedger::default();
        for _ in 0..2 * 10 {
            ledger.record_round(4, CommLedger::model_bytes(1000));
        }
        assert_eq!(ledger.total, 640_000);
        assert!(ledger.rounds.iter().all(|r| r.up == 16_000 && r.down == 16_000));
    }

    #[test]
    fn selection_is_seeded_and_sorted() {
        let a = RoundPlan::draw(1, 3, 10, 4, 9).unwrap();
        assert_eq!(a, RoundPlan::draw(1, 3, 10, 4, 9).unwrap());
        assert_eq!(a.selected.len(), 4);
        assert!(a.selected.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(RoundPlan::draw(0, 0, 3, 3, 1).unwrap().selected, vec![0, 1, 2]);
        assert!(RoundPlan::draw(0, 0, 3, 0, 1).is_err());
        assert!(RoundPlan::draw(0, 0, 3, 4, 1).is_err());
    }
}
