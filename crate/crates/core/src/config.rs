//! Run configuration: a sectioned TOML file, named profiles, and dotted
//! `section.key=value` overrides. Every run writes the fully resolved config
//! back out so it can be replayed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSpec;
use crate::dataset::{self, Dataset, ImageShape, PartitionConfig, TaskSchedule};
use crate::diffusion::{DenoiserSpec, DiffusionTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::federation::{Ablation, Cadence, FederationConfig, Method, Weighting};
use crate::optim::AdamConfig;
use crate::replay::{FilterDirection, ReplayConfig};
use crate::seed;
use crate::training::{KdDirection, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Hyperparameters as published.
    Paper,
    /// Small enough for a full run on one CPU core in a couple of minutes.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Bundle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear with both endpoints scaled by `1000 / steps`.
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle_path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_tasks: usize,
    pub num_clients: usize,
    pub partition: PartitionKind,
    pub beta: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub method: Method,
    pub rounds: usize,
    /// All clients when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    pub weighting: Weighting,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap per step; unclipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
    pub kd_temperature: f64,
    pub kd_direction: KdDirection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub n_s: usize,
    pub lambda: f64,
    pub filter_direction: FilterDirection,
    pub refresh: Cadence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_schedule: BetaSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub training: Cadence,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub plots: bool,
    /// Number of generator samples written as a PNG grid per client; 0 disables.
    pub sample_grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DataSection,
    pub federation: FederationSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub replay: ReplaySection,
    pub diffusion: DiffusionSection,
    pub model: ModelSection,
    pub ablation: Ablation,
    pub run: RunSection,
}

impl RunConfig {
    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            data: DataSection {
                source: DataSource::Synthetic,
                bundle_path: None,
                classes: 10,
                per_class: 600,
                channels: 1,
                height: 16,
                width: 16,
                num_tasks: 5,
                num_clients: 10,
                partition: PartitionKind::Dirichlet,
                beta: 0.5,
                test_fraction: 0.2,
            },
            federation: FederationSection {
                method: Method::Dfeddgm,
                rounds: 100,
                clients_per_round: None,
                weighting: Weighting::SampleCount,
                workers: 0,
            },
            train: TrainSection {
                local_epochs: 5,
                batch_size: 128,
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                clip_grad_norm: None,
            },
            loss: LossSection {
                alpha: 3.0,
                gamma: 2.0,
                kd_temperature: 1.0,
                kd_direction: KdDirection::StudentToTeacher,
            },
            replay: ReplaySection {
                n_s: 2000,
                lambda: 0.9,
                filter_direction: FilterDirection::High,
                refresh: Cadence::PerRound,
            },
            diffusion: DiffusionSection {
                steps: 1000,
                beta_schedule: BetaSchedule::Linear,
                beta_start: 1e-4,
                beta_end: 0.02,
                epochs: 200,
                training: Cadence::PerRound,
                learning_rate: 5e-5,
                batch_size: 16,
                base_channels: 8,
                mid_channels: 16,
                time_dim: 16,
            },
            model: ModelSection {
                conv_channels: vec![8, 16, 32],
                feature_dim: 64,
            },
            ablation: Ablation::default(),
            run: RunSection {
                seed: 0,
                plots: true,
                sample_grid: 0,
            },
        }
    }

    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.profile = Profile::Desk;
        c.data.per_class = 200;
        c.data.num_clients = 4;
        c.federation.rounds = 10;
        c.train.local_epochs = 3;
        c.train.batch_size = 32;
        c.train.learning_rate = 0.05;
        c.train.clip_grad_norm = Some(5.0);
        // a small network trained from scratch: γ = 2 destabilizes it
        c.loss.gamma = 0.1;
        c.replay.n_s = 200;
        c.replay.refresh = Cadence::PerTask;
        c.diffusion.steps = 200;
        c.diffusion.beta_schedule = BetaSchedule::ScaledLinear;
        c.diffusion.epochs = 50;
        c.diffusion.training = Cadence::PerTask;
        c.diffusion.learning_rate = 5e-3;
        c
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Overlay a TOML document on this config. Keys absent from the
    /// document keep their current values.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        let mut base = self.to_table();
        merge_tables(&mut base, overlay);
        Self::from_table(base)
    }

    /// Read a config file. A top-level `profile` key picks the base the
    /// file is laid over; desk otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e).context(path.display().to_string()))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        let profile = match table.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile: expected a string, got {other}"))),
            None => Profile::Desk,
        };
        Self::profile(profile).merge_toml(&text)
    }

    /// Apply one `section.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value = parse_literal(raw);
        let mut table = self.to_table();
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one item");
        let mut cursor = &mut table;
        for k in parents {
            cursor = match cursor.get_mut(*k) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("{path}: unknown section {k:?}"))),
            };
        }
        if !cursor.contains_key(*last) && !optional_key(path) {
            return Err(Error::Config(format!("{path}: unknown key")));
        }
        cursor.insert((*last).to_string(), value);
        Self::from_table(table).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{path}={raw}: {m}")),
            other => other,
        })
    }

    /// Switch off one component: `balanced_sampler`, `entropy_filter`,
    /// `kd_loss` or `fd_loss`, given as `name` or `name=off|on`.
    pub fn ablate(&self, spec: &str) -> Result<Self> {
        let (name, state) = spec.split_once('=').unwrap_or((spec, "off"));
        let on = match state.trim() {
            "on" | "true" => true,
            "off" | "false" => false,
            other => return Err(Error::Config(format!("ablate {name}: expected on/off, got {other:?}"))),
        };
        let mut c = self.clone();
        match name.trim() {
            "balanced_sampler" => c.ablation.balanced_sampler = on,
            "entropy_filter" => c.ablation.entropy_filter = on,
            "kd_loss" => c.ablation.kd_loss = on,
            "fd_loss" => c.ablation.fd_loss = on,
            other => return Err(Error::Config(format!("unknown component {other:?}"))),
        }
        Ok(c)
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let c: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Field-level checks; the first violation is reported by path.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let d = &self.data;
        if d.source == DataSource::Bundle && d.bundle_path.is_none() {
            return fail("data.bundle_path", "required when data.source = \"bundle\"".into());
        }
        if d.source == DataSource::Synthetic {
            if d.classes < 2 {
                return fail("data.classes", format!("need at least 2, got {}", d.classes));
            }
            if d.per_class == 0 {
                return fail("data.per_class", "must be positive".into());
            }
            if d.channels == 0 || d.height == 0 || d.width == 0 {
                return fail("data.channels", "image dimensions must be positive".into());
            }
            if d.num_tasks > d.classes {
                return fail("data.num_tasks", format!("{} tasks for {} classes", d.num_tasks, d.classes));
            }
        }
        if d.num_tasks == 0 {
            return fail("data.num_tasks", "must be at least 1".into());
        }
        if d.num_clients == 0 {
            return fail("data.num_clients", "must be at least 1".into());
        }
        if d.partition == PartitionKind::Dirichlet && !(d.beta > 0.0 && d.beta.is_finite()) {
            return fail("data.beta", format!("must be positive, got {}", d.beta));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return fail("data.test_fraction", format!("must lie in (0, 1), got {}", d.test_fraction));
        }
        if let Some(m) = self.federation.clients_per_round {
            if m == 0 || m > d.num_clients {
                return fail(
                    "federation.clients_per_round",
                    format!("must lie in 1..={}, got {m}", d.num_clients),
                );
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return fail("train.batch_size", "must be positive".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail("train.learning_rate", format!("must be positive, got {}", t.learning_rate));
        }
        if !(t.momentum >= 0.0 && t.momentum < 1.0) {
            return fail("train.momentum", format!("must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail("train.weight_decay", format!("must be non-negative, got {}", t.weight_decay));
        }
        if let Some(c) = t.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail("train.clip_grad_norm", format!("must be positive, got {c}"));
            }
        }
        for (field, v) in [("loss.alpha", self.loss.alpha), ("loss.gamma", self.loss.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(field, format!("must be non-negative, got {v}"));
            }
        }
        if !(self.loss.kd_temperature > 0.0 && self.loss.kd_temperature.is_finite()) {
            return fail("loss.kd_temperature", format!("must be positive, got {}", self.loss.kd_temperature));
        }
        if !(self.replay.lambda > 0.0 && self.replay.lambda <= 1.0) {
            return fail("replay.lambda", format!("must lie in (0, 1], got {}", self.replay.lambda));
        }
        let df = &self.diffusion;
        if df.steps == 0 {
            return fail("diffusion.steps", "must be positive".into());
        }
        if !(df.beta_start > 0.0 && df.beta_start <= df.beta_end && df.beta_end < 1.0) {
            return fail(
                "diffusion.beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got {} and {}", df.beta_start, df.beta_end),
            );
        }
        if !(df.learning_rate > 0.0 && df.learning_rate.is_finite()) {
            return fail("diffusion.learning_rate", format!("must be positive, got {}", df.learning_rate));
        }
        if df.batch_size == 0 {
            return fail("diffusion.batch_size", "must be positive".into());
        }
        if let Err(Error::Config(m)) = self.denoiser_spec().validate() {
            return fail("diffusion", m);
        }
        if let Err(Error::Config(m)) = self.classifier_spec().validate() {
            return fail("model", m);
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(self.data.channels, self.data.height, self.data.width)
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            image: self.image_shape(),
            conv_channels: self.model.conv_channels.clone(),
            feature_dim: self.model.feature_dim,
        }
    }

    pub fn denoiser_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            image: self.image_shape(),
            base_channels: self.diffusion.base_channels,
            mid_channels: self.diffusion.mid_channels,
            time_dim: self.diffusion.time_dim,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        let scale = match d.beta_schedule {
            BetaSchedule::Linear => 1.0,
            BetaSchedule::ScaledLinear => 1000.0 / d.steps as f64,
        };
        NoiseSchedule::linear(d.steps, d.beta_start * scale, (d.beta_end * scale).min(0.999))
    }

    /// Load or synthesize the dataset, then split it into tasks.
    pub fn build_data(&self) -> Result<(Dataset, TaskSchedule)> {
        let master = self.run.seed;
        let dataset = match self.data.source {
            DataSource::Synthetic => dataset::synth_dataset(
                self.data.classes,
                self.data.per_class,
                self.image_shape(),
                seed::derive(master, "synthetic-data", &[]),
            ),
            DataSource::Bundle => {
                let path = self.data.bundle_path.as_ref().expect("validated");
                dataset::ingest_bundle(path).map_err(|e| e.context(path.display().to_string()))?
            }
        };
        if dataset.shape() != self.image_shape() {
            return Err(Error::Config(format!(
                "data: bundle holds {:?} images but the config says {:?}",
                dataset.shape(),
                self.image_shape()
            )));
        }
        let partition_seed = seed::derive(master, "partition", &[]);
        let mut partition = match self.data.partition {
            PartitionKind::Dirichlet => PartitionConfig::dirichlet(self.data.beta, self.data.num_clients, partition_seed),
            PartitionKind::Iid => PartitionConfig::iid(self.data.num_clients, partition_seed),
        };
        partition.test_fraction = self.data.test_fraction;
        let schedule = dataset::build_schedule(
            &dataset,
            self.data.num_tasks,
            &partition,
            seed::derive(master, "class-order", &[]),
        )?;
        Ok((dataset, schedule))
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        Ok(FederationConfig {
            method: self.federation.method,
            ablation: self.ablation,
            rounds: self.federation.rounds,
            clients_per_round: self.federation.clients_per_round.unwrap_or(self.data.num_clients),
            weighting: self.federation.weighting,
            loss: LossConfig {
                alpha: self.loss.alpha,
                gamma: self.loss.gamma,
                kd_temperature: self.loss.kd_temperature,
                kd_direction: self.loss.kd_direction,
                ce_weight: 1.0,
                learning_rate: self.train.learning_rate,
                momentum: self.train.momentum,
                weight_decay: self.train.weight_decay,
                local_epochs: self.train.local_epochs,
                batch_size: self.train.batch_size,
                clip_grad_norm: self.train.clip_grad_norm,
            },
            replay: ReplayConfig {
                n_s: self.replay.n_s,
                lambda: self.replay.lambda,
                entropy_filter: true,
                direction: self.replay.filter_direction,
            },
            replay_refresh: self.replay.refresh,
            classifier: self.classifier_spec(),
            denoiser: self.denoiser_spec(),
            schedule: self.noise_schedule()?,
            diffusion: DiffusionTrainConfig {
                batch_size: self.diffusion.batch_size,
                adam: AdamConfig {
                    lr: self.diffusion.learning_rate,
                    ..AdamConfig::default()
                },
                balanced: true,
            },
            diffusion_epochs: self.diffusion.epochs,
            diffusion_training: self.diffusion.training,
            workers: self.federation.workers,
            seed: seed::derive(self.run.seed, "federation", &[]),
        })
    }
}

fn optional_key(path: &str) -> bool {
    matches!(
        path,
        "data.bundle_path" | "federation.clients_per_round" | "train.clip_grad_norm"
    )
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for c in [RunConfig::paper(), RunConfig::desk()] {
            c.validate().unwrap();
            let back = RunConfig::profile(c.profile).merge_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        let d = RunConfig::desk();
        assert_eq!((d.data.num_tasks, d.data.num_clients, d.federation.rounds), (5, 4, 10));
        assert_eq!((d.train.local_epochs, d.replay.n_s, d.diffusion.steps, d.diffusion.epochs), (3, 200, 200, 50));
        assert_eq!((d.data.per_class, d.train.learning_rate, d.train.clip_grad_norm, d.loss.gamma), (200, 0.05, Some(5.0), 0.1));
        let p = RunConfig::paper();
        assert_eq!((p.loss.alpha, p.loss.gamma, p.replay.lambda, p.replay.n_s), (3.0, 2.0, 0.9, 2000));
        assert_eq!((p.data.num_clients, p.data.beta, p.federation.rounds), (10, 0.5, 100));
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let c = RunConfig::desk().set("loss.alpha=1.5").unwrap();
        assert_eq!(c.loss.alpha, 1.5);
        let c = c.set("federation.method=fedavg_baseline").unwrap();
        assert_eq!(c.federation.method, Method::FedavgBaseline);
        let c = c.set("federation.clients_per_round=2").unwrap();
        assert_eq!(c.federation_config().unwrap().clients_per_round, 2);
        let err = c.set("replay.lambda=1.5").unwrap_err().to_string();
        assert!(err.contains("replay.lambda"), "{err}");
        assert!(c.set("loss.nope=1").is_err());
        assert!(c.set("nope.alpha=1").is_err());
        assert!(c.set("federation.clients_per_round=9").is_err());
        assert!(c.set("loss.alpha").is_err());
    }

    #[test]
    fn file_overlay_and_ablation() {
        let c = RunConfig::desk()
            .merge_toml("[loss]\ngamma = 0.5\n[ablation]\nkd_loss = false\n")
            .unwrap();
        assert_eq!(c.loss.gamma, 0.5);
        assert_eq!(c.loss.alpha, 3.0);
        assert!(!c.ablation.kd_loss);
        assert!(RunConfig::desk().merge_toml("[loss]\nunknown = 1\n").is_err());
        let c = RunConfig::desk().ablate("entropy_filter=off").unwrap();
        assert!(!c.ablation.entropy_filter);
        assert!(c.ablate("entropy_filter=on").unwrap().ablation.entropy_filter);
        assert!(RunConfig::desk().ablate("everything").is_err());
    }

    #[test]
    fn scaled_schedule_reaches_noise() {
        let s = RunConfig::desk().noise_schedule().unwrap();
        assert_eq!(s.num_steps(), 200);
        assert!(s.alpha_bar(200) < 1e-3);
        assert!((s.beta(1) - 5e-4).abs() < 1e-15);
    }
}
