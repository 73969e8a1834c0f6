//! Pseudo-label generated images with a trained classifier and keep a
//! fraction by prediction entropy.
//!
//! The "generator" here emits half clean synthetic images and half pure
//! noise, so the effect of the filter direction is easy to see.

use dfeddgm::classifier::{Classifier, ClassifierSpec};
use dfeddgm::dataset::{synth_dataset, Dataset, ImageShape};
use dfeddgm::replay::{build_replay, FilterDirection, ImageSource, ReplayConfig};
use dfeddgm::seed;
use dfeddgm::training::{client_update, LossConfig, TrainingSet};
use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

struct HalfNoise<'a>(&'a Dataset);

impl ImageSource for HalfNoise<'_> {
    fn image_shape(&self) -> ImageShape {
        self.0.shape()
    }

    /// Clean rows first, noise rows after.
    fn generate(&self, count: usize, s: u64) -> dfeddgm::Result<Array2<f64>> {
        let mut rng = seed::rng(s);
        let clean: Vec<usize> = (0..count / 2).map(|_| rng.random_range(0..self.0.len())).collect();
        let noise = Array2::from_shape_simple_fn((count - clean.len(), self.0.shape().numel()), || rng.random_range(0.0..1.0));
        Ok(concatenate![Axis(0), self.0.image_rows(&clean)?, noise])
    }
}

fn main() -> dfeddgm::Result<()> {
    let shape = ImageShape::new(1, 16, 16);
    let data = synth_dataset(4, 60, shape, 5);
    let all: Vec<usize> = (0..data.len()).collect();
    let train = TrainingSet::new(data.image_rows(&all)?, data.labels().collect())?;
    let mut teacher = Classifier::new(ClassifierSpec::desk(shape), 4, &mut seed::rng(0))?;
    let config = LossConfig {
        learning_rate: 0.05,
        local_epochs: 20,
        batch_size: 32,
        ..LossConfig::default()
    };
    client_update(&mut teacher, &train, None, &config, 1)?;

    for (filter, direction) in [(true, FilterDirection::High), (true, FilterDirection::Low), (false, FilterDirection::High)] {
        let replay = ReplayConfig {
            n_s: 100,
            lambda: 0.5,
            entropy_filter: filter,
            direction,
        };
        let batch = build_replay(&HalfNoise(&data), &teacher, &replay, 9)?;
        let clean_rows = batch.generated() / 2;
        let kept = batch.retained_indices();
        let noisy_kept = kept.iter().filter(|&&i| i >= clean_rows).count();
        println!(
            "filter {filter:5} {direction:?}: generated {}, kept {} of which {} noise",
            batch.generated(),
            kept.len(),
            noisy_kept
        );
    }
    Ok(())
}
