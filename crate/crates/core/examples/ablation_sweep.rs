//! Full method, each single-component-off variant and the FedAvg baseline
//! on one seed, with an Acc/F bar chart.
//!
//! ```text
//! cargo run --release --example ablation_sweep -- [seed]
//! ```

use dfeddgm::config::RunConfig;
use dfeddgm::runner;

fn main() -> dfeddgm::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let base = RunConfig::desk().set(&format!("run.seed={seed}"))?;
    let mut variants = vec![base.clone()];
    for component in ["balanced_sampler", "entropy_filter", "kd_loss", "fd_loss"] {
        variants.push(base.ablate(component)?);
    }
    variants.push(base.set("federation.method=fedavg_baseline")?);

    let mut reports = Vec::new();
    for config in &variants {
        let dir = runner::default_run_dir(config);
        let out = runner::execute(config, &dir, true)?;
        println!(
            "{:45} Acc {:.4} F {:.4}",
            runner::run_name(config),
            out.summary.metrics.acc,
            out.summary.metrics.f.unwrap_or(0.0)
        );
        reports.push(runner::report(&dir, false)?);
    }
    let chart = runner::default_run_dir(&base).with_file_name(format!("ablation-seed{seed}.svg"));
    std::fs::write(&chart, runner::comparison_svg(&reports))?;
    println!("wrote {}", chart.display());
    Ok(())
}
