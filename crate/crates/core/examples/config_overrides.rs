//! Profiles, file overlays, dotted overrides and ablation switches.

use dfeddgm::config::RunConfig;
use dfeddgm::runner::run_name;

fn main() -> dfeddgm::Result<()> {
    let paper = RunConfig::paper();
    let desk = RunConfig::desk();
    println!(
        "paper: {} clients, {} rounds, {} diffusion steps; desk: {} clients, {} rounds, {} steps",
        paper.data.num_clients,
        paper.federation.rounds,
        paper.diffusion.steps,
        desk.data.num_clients,
        desk.federation.rounds,
        desk.diffusion.steps
    );

    let tuned = desk
        .merge_toml("[replay]\nn_s = 100\nlambda = 0.8\n")?
        .set("loss.kd_direction=teacher_to_student")?
        .set("run.seed=4")?
        .ablate("fd_loss")?;
    println!("run name: {}", run_name(&tuned));
    println!("{}", tuned.to_toml());

    match desk.set("replay.lambda=1.5") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("lambda above 1 is invalid"),
    }
    Ok(())
}
