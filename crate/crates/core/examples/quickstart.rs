//! One desk-profile run into a run directory.
//!
//! ```text
//! cargo run --release --example quickstart -- [section.key=value ...]
//! ```
//!
//! The directory is `$DFEDDGM_OUT/<run name>` (or `runs/<run name>`).

use dfeddgm::config::RunConfig;
use dfeddgm::runner;

fn main() -> dfeddgm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = RunConfig::desk();
    for arg in std::env::args().skip(1) {
        config = config.set(&arg)?;
    }
    let dir = runner::default_run_dir(&config);
    let out = runner::execute(&config, &dir, true)?;
    let s = &out.summary;
    println!("run directory: {}", dir.display());
    println!("Acc {:.4}  F {:?}  bytes {}", s.metrics.acc, s.metrics.f, s.bytes_total);
    for (l, step) in out.result.accuracy.steps.iter().enumerate() {
        let row: Vec<String> = step.per_task.iter().map(|f| format!("{:.2}", f.value())).collect();
        println!("after task {}: {}", l + 1, row.join(" "));
    }
    Ok(())
}
