use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfeddgm::config::{Profile, RunConfig};
use dfeddgm::runner;

#[derive(Parser)]
#[command(name = "dfeddgm", version, about = "Federated class-incremental learning with diffusion replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run {
        /// TOML file laid over the chosen profile.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base profile when no config file names one.
        #[arg(long, value_parser = parse_profile)]
        profile: Option<Profile>,
        /// `dfeddgm` or `fedavg_baseline`.
        #[arg(long)]
        method: Option<String>,
        /// Switch off a component (repeatable): balanced_sampler,
        /// entropy_filter, kd_loss, fd_loss.
        #[arg(long)]
        ablate: Vec<String>,
        /// `section.key=value` override (repeatable).
        #[arg(long)]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `$DFEDDGM_OUT/<run name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Convert an IDX image/label pair into a bundle file.
    Convert {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute Acc and F from run directories and redraw plots.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write an Acc/F bar chart comparing the runs here.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        no_plots: bool,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: dfeddgm::Error| e.to_string())
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    config: Option<PathBuf>,
    profile: Option<Profile>,
    method: Option<String>,
    ablate: &[String],
    set: &[String],
    seed: Option<u64>,
) -> dfeddgm::Result<RunConfig> {
    let mut c = match (&config, profile) {
        (Some(path), None) => RunConfig::load(path)?,
        (Some(path), Some(p)) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::profile(p).merge_toml(&text)?
        }
        (None, p) => RunConfig::profile(p.unwrap_or(Profile::Desk)),
    };
    if let Some(m) = method {
        c = c.set(&format!("federation.method={m}"))?;
    }
    for a in ablate {
        c = c.ablate(a)?;
    }
    for s in set {
        c = c.set(s)?;
    }
    if let Some(s) = seed {
        c.run.seed = s;
    }
    Ok(c)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run {
            config,
            profile,
            method,
            ablate,
            set,
            seed,
            out,
            force,
        } => build_config(config, profile, method, &ablate, &set, seed).and_then(|c| {
            let dir = out.unwrap_or_else(|| runner::default_run_dir(&c));
            let outcome = runner::execute(&c, &dir, force)?;
            let s = &outcome.summary;
            println!(
                "{}: Acc {:.4} F {} bytes {}",
                dir.display(),
                s.metrics.acc,
                s.metrics.f.map_or("n/a".into(), |f| format!("{f:.4}")),
                s.bytes_total
            );
            Ok(())
        }),
        Command::Convert { images, labels, out } => runner::convert_idx(&images, &labels, &out).map(|hist| {
            println!("wrote {} ({} images)", out.display(), hist.iter().sum::<usize>());
            for (class, n) in hist.iter().enumerate() {
                println!("class {class}: {n}");
            }
        }),
        Command::Report { dirs, compare, no_plots } => (|| {
            let mut reports = Vec::new();
            for d in &dirs {
                let r = runner::report(d, !no_plots)?;
                println!(
                    "{}: Acc {:.4} F {} (matches summary.json)",
                    d.display(),
                    r.recomputed.acc,
                    r.recomputed.f.map_or("n/a".into(), |f| format!("{f:.4}"))
                );
                reports.push(r);
            }
            if let Some(path) = compare {
                std::fs::write(&path, runner::comparison_svg(&reports))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
