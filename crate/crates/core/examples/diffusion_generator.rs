//! Train a small DDPM on two synthetic classes and write a grid of samples.
//!
//! ```text
//! cargo run --release --example diffusion_generator -- [epochs] [out.png]
//! ```

use dfeddgm::config::RunConfig;
use dfeddgm::dataset::synth_dataset;
use dfeddgm::diffusion::{DiffusionModel, DiffusionTrainConfig};
use dfeddgm::{plot, seed};

fn main() -> dfeddgm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(30), |a| a.parse()).expect("epochs must be an integer");
    let out = args.next().unwrap_or_else(|| "samples.png".into());

    let config = RunConfig::desk();
    let shape = config.image_shape();
    let data = synth_dataset(10, 60, shape, 3);
    let shard: Vec<usize> = data
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == 2 || e.label == 6)
        .map(|(i, _)| i)
        .collect();

    let mut model = DiffusionModel::new(config.denoiser_spec(), config.noise_schedule()?, &mut seed::rng(0))?;
    let losses = model.train_epochs(&data, &shard, epochs, &DiffusionTrainConfig::desk(), 1)?;
    let tail = &losses[losses.len().saturating_sub(20)..];
    println!(
        "{} steps, first loss {:.3}, mean of last {} {:.3}",
        losses.len(),
        losses[0],
        tail.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );

    let images = model.sample(32, 2)?;
    plot::save_image_grid(&images, shape, 8, std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
