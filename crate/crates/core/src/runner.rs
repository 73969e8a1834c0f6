//! End-to-end runs on disk: the run directory layout, the report pass that
//! recomputes metrics from persisted files, and IDX conversion.
//!
//! A run directory holds
//! `config.snapshot`, `rounds.jsonl`, `metrics.csv`, `summary.json`,
//! `checkpoints/` and, when enabled, `plots/`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Profile, RunConfig};
use crate::dataset;
use crate::error::{Error, Result, ResultExt};
use crate::federation::{self, Ablation, LogRecord, Method, RunResult};
use crate::metrics::{self, AccuracyRecord, Summary};
use crate::plot;
use crate::seed;

/// Environment variable naming the root under which run directories go.
pub const OUT_ENV: &str = "DFEDDGM_OUT";

pub const CONFIG_FILE: &str = "config.snapshot";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PLOT_DIR: &str = "plots";

/// Contents of `summary.json`. Contains nothing time- or host-dependent,
/// so identical configs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub metrics: Summary,
    pub method: Method,
    pub profile: Profile,
    pub ablation: Ablation,
    pub seed: u64,
    pub num_tasks: usize,
    pub rounds_per_task: usize,
    pub classifier_params: usize,
    pub bytes_total: u64,
}

/// `<method>-<profile>-seed<k>` plus `-no_<component>` for each switched-off
/// component.
pub fn run_name(config: &RunConfig) -> String {
    let method = match config.federation.method {
        Method::Dfeddgm => "dfeddgm",
        Method::FedavgBaseline => "fedavg",
    };
    let profile = match config.profile {
        Profile::Paper => "paper",
        Profile::Desk => "desk",
    };
    let mut name = format!("{method}-{profile}-seed{}", config.run.seed);
    let a = config.ablation;
    for (on, tag) in [
        (a.balanced_sampler, "balanced_sampler"),
        (a.entropy_filter, "entropy_filter"),
        (a.kd_loss, "kd_loss"),
        (a.fd_loss, "fd_loss"),
    ] {
        if !on {
            name.push_str("-no_");
            name.push_str(tag);
        }
    }
    name
}

/// `$DFEDDGM_OUT/<name>`, or `runs/<name>` when the variable is unset.
pub fn default_run_dir(config: &RunConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(run_name(config))
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(e).context(path.display().to_string())
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_at(path))?))
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(io_at(dir))?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::InvalidArgument(format!(
                "{} already exists and is not empty",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(io_at(dir))
}

/// Streams log records as JSON lines, flushing each one.
struct RoundLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RoundLog {
    fn create(path: PathBuf) -> Result<Self> {
        let out = create_file(&path)?;
        Ok(RoundLog { path, out })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(io_at(&self.path))?;
        self.out.flush().map_err(io_at(&self.path))
    }
}

/// What a finished run leaves behind, in memory.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub result: RunResult,
}

/// Run one experiment into `dir`. A non-empty `dir` is refused unless
/// `overwrite` is set. On failure the directory keeps the config snapshot
/// and every round logged so far, followed by an error record.
pub fn execute(config: &RunConfig, dir: &Path, overwrite: bool) -> Result<RunOutcome> {
    config.validate()?;
    prepare_dir(dir, overwrite)?;
    let snapshot = dir.join(CONFIG_FILE);
    fs::write(&snapshot, config.to_toml()).map_err(io_at(&snapshot))?;
    let mut log = RoundLog::create(dir.join(ROUNDS_FILE))?;

    let attempt: Result<_> = (|| {
        let (data, schedule) = config.build_data()?;
        log::info!(
            "{} examples, {} tasks, {} clients",
            data.len(),
            schedule.num_tasks(),
            schedule.num_clients()
        );
        let fed = config.federation_config()?;
        let result = federation::run_experiment(&data, &schedule, fed, |rec| {
            if let LogRecord::Round(r) = rec {
                log::info!("task {} round {}: {} bytes", r.task, r.round, r.bytes_total);
            }
            log.write(rec)
        })?;
        Ok((data, result))
    })();
    let (data, result) = match attempt {
        Ok(v) => v,
        Err(e) => {
            // best effort: the original error matters more than a failed log line
            let _ = log.write(&LogRecord::Error { message: e.to_string() });
            return Err(e);
        }
    };

    let metrics_path = dir.join(METRICS_FILE);
    let mut w = create_file(&metrics_path)?;
    metrics::write_metrics_csv(&result.accuracy, config.data.num_tasks, &mut w)?;
    w.flush().map_err(io_at(&metrics_path))?;

    let summary = RunSummary {
        metrics: Summary::from_record(&result.accuracy)?,
        method: config.federation.method,
        profile: config.profile,
        ablation: config.ablation,
        seed: config.run.seed,
        num_tasks: config.data.num_tasks,
        rounds_per_task: config.federation.rounds,
        classifier_params: result.model.num_params(),
        bytes_total: result.ledger.total,
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&summary_path, text).map_err(io_at(&summary_path))?;

    let ck = dir.join(CHECKPOINT_DIR);
    result.model.to_checkpoint().save(&ck.join("global.ckpt"))?;
    for (i, g) in result.generators.iter().enumerate() {
        if let Some(g) = g {
            g.to_checkpoint().save(&ck.join(format!("generator_client{i}.ckpt")))?;
        }
    }

    if config.run.plots || config.run.sample_grid > 0 {
        let plots = dir.join(PLOT_DIR);
        fs::create_dir_all(&plots).map_err(io_at(&plots))?;
        if config.run.plots {
            write_accuracy_plot(&result.accuracy, &run_name(config), &plots)?;
        }
        if config.run.sample_grid > 0 {
            for (i, g) in result.generators.iter().enumerate() {
                if let Some(g) = g {
                    let images = g.sample(config.run.sample_grid, seed::derive(config.run.seed, "sample-grid", &[i as u64]))?;
                    let cols = (config.run.sample_grid as f64).sqrt().ceil() as usize;
                    plot::save_image_grid(&images, data.shape(), cols, &plots.join(format!("samples_client{i}.png")))?;
                }
            }
        }
    }

    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
        result,
    })
}

fn write_accuracy_plot(record: &AccuracyRecord, title: &str, plots: &Path) -> Result<()> {
    let path = plots.join("accuracy.svg");
    fs::write(&path, plot::accuracy_curves_svg(record, title)).map_err(io_at(&path))
}

pub fn read_metrics(dir: &Path) -> Result<AccuracyRecord> {
    let path = dir.join(METRICS_FILE);
    let f = File::open(&path).map_err(io_at(&path))?;
    metrics::read_metrics_csv(BufReader::new(f)).context(|| path.display().to_string())
}

/// Rebuild the accuracy record from the task-end lines of `rounds.jsonl`.
pub fn read_log_accuracy(dir: &Path) -> Result<AccuracyRecord> {
    let path = dir.join(ROUNDS_FILE);
    let f = File::open(&path).map_err(io_at(&path))?;
    let mut record = AccuracyRecord::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_at(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Json(e).context(format!("{}:{}", path.display(), n + 1)))?;
        match rec {
            LogRecord::TaskEnd(t) => record.push(t.accuracy)?,
            LogRecord::Error { message } => {
                return Err(Error::Integrity(format!("run ended with an error: {message}")));
            }
            LogRecord::Round(_) => {}
        }
    }
    Ok(record)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json(e).context(path.display().to_string()))
}

#[derive(Clone, Debug)]
pub struct Report {
    pub dir: PathBuf,
    /// Recomputed from `metrics.csv`.
    pub recomputed: Summary,
    pub stored: RunSummary,
}

/// Recompute Acc and F from `metrics.csv`, check them against the run log
/// and `summary.json`, and redraw the accuracy plot.
pub fn report(dir: &Path, render_plots: bool) -> Result<Report> {
    let record = read_metrics(dir)?;
    let recomputed = Summary::from_record(&record)?;
    if let Ok(from_log) = read_log_accuracy(dir) {
        if from_log != record {
            return Err(Error::Integrity(format!(
                "{}: metrics.csv disagrees with the task-end records in rounds.jsonl",
                dir.display()
            )));
        }
    }
    let stored = read_summary(dir)?;
    if stored.metrics.acc != recomputed.acc || stored.metrics.f != recomputed.f {
        return Err(Error::Integrity(format!(
            "{}: summary.json says Acc {} F {:?}, metrics.csv gives Acc {} F {:?}",
            dir.display(),
            stored.metrics.acc,
            stored.metrics.f,
            recomputed.acc,
            recomputed.f
        )));
    }
    if render_plots {
        let plots = dir.join(PLOT_DIR);
        fs::create_dir_all(&plots).map_err(io_at(&plots))?;
        let title = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write_accuracy_plot(&record, &title, &plots)?;
    }
    Ok(Report {
        dir: dir.to_path_buf(),
        recomputed,
        stored,
    })
}

/// Bar chart of Acc and F across several reported runs.
pub fn comparison_svg(reports: &[Report]) -> String {
    let groups: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            let label = r.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (label, vec![r.recomputed.acc, r.recomputed.f.unwrap_or(0.0)])
        })
        .collect();
    plot::bar_chart_svg("Acc and F per run", &["Acc", "F"], &groups)
}

/// Convert an IDX image/label pair to a bundle file. Returns the class
/// histogram of what was written.
pub fn convert_idx(images: &Path, labels: &Path, out: &Path) -> Result<Vec<usize>> {
    let data = dataset::convert_idx(images, labels)
        .context(|| format!("reading {} and {}", images.display(), labels.display()))?;
    dataset::write_bundle_file(&data, out).context(|| format!("writing {}", out.display()))?;
    Ok(data.class_histogram())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_reflect_method_and_ablation() {
        let c = RunConfig::desk();
        assert_eq!(run_name(&c), "dfeddgm-desk-seed0");
        let c = c.ablate("kd_loss").unwrap().set("run.seed=3").unwrap();
        assert_eq!(run_name(&c), "dfeddgm-desk-seed3-no_kd_loss");
    }

    #[test]
    fn occupied_directories_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(prepare_dir(dir.path(), false).is_err());
        prepare_dir(dir.path(), true).unwrap();
        assert!(dir.path().join(CHECKPOINT_DIR).is_dir());
    }
}
