//! Synthetic replay: sample images from a frozen generator, pseudo-label them
//! with the frozen previous global model, and keep a `λ` fraction ranked by
//! prediction entropy.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, Classifier};
use crate::dataset::{Dataset, ImageShape};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::nn;

/// Which end of the entropy ranking survives the filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterDirection {
    #[default]
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Target number of retained samples.
    pub n_s: usize,
    pub lambda: f64,
    /// When false every generated sample is kept and `λ` is treated as 1.
    pub entropy_filter: bool,
    pub direction: FilterDirection,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            n_s: 2000,
            lambda: 0.9,
            entropy_filter: true,
            direction: FilterDirection::High,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.entropy_filter {
            self.lambda
        } else {
            1.0
        }
    }

    /// `⌈n_s / λ⌉`
    pub fn generated_count(&self) -> usize {
        let q = self.n_s as f64 / self.effective_lambda();
        snap(q).map_or(q.ceil() as usize, |r| r)
    }
}

/// Nearest integer when `x` is within float noise of one.
fn snap(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * x.abs().max(1.0)).then_some(r as usize)
}

/// `round(λ · count)` with halves rounded up.
pub fn retained_count(count: usize, lambda: f64) -> usize {
    let x = lambda * count as f64;
    let half_up = x + 0.5;
    snap(half_up).unwrap_or(half_up.floor() as usize).min(count)
}

/// Shannon entropy in nats of one probability vector, `0 · ln 0 = 0`.
pub fn prediction_entropy(probabilities: &[f64]) -> Result<f64> {
    if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
    }
    let h: f64 = probabilities
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

/// Retention mask: rank by entropy (descending for `High`, ascending for
/// `Low`), ties by index, keep the first `round(λ·n)`.
pub fn select_retained(entropies: &[f64], lambda: f64, direction: FilterDirection) -> Vec<bool> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| {
        let by = match direction {
            FilterDirection::High => entropies[b].total_cmp(&entropies[a]),
            FilterDirection::Low => entropies[a].total_cmp(&entropies[b]),
        };
        by.then(a.cmp(&b))
    });
    let mut mask = vec![false; entropies.len()];
    for &i in order.iter().take(retained_count(entropies.len(), lambda)) {
        mask[i] = true;
    }
    mask
}

/// Something that can draw unlabeled images as `(n, c·h·w)` rows.
pub trait ImageSource {
    fn image_shape(&self) -> ImageShape;
    fn generate(&self, count: usize, seed: u64) -> Result<Array2<f64>>;
}

impl ImageSource for DiffusionModel {
    fn image_shape(&self) -> ImageShape {
        DiffusionModel::image_shape(self)
    }

    fn generate(&self, count: usize, seed: u64) -> Result<Array2<f64>> {
        self.sample(count, seed)
    }
}

/// Something that assigns class probabilities to image rows.
pub trait Labeler {
    fn num_classes(&self) -> usize;
    fn probabilities(&self, images: &Array2<f64>) -> Result<Array2<f64>>;
}

impl Labeler for Classifier {
    fn num_classes(&self) -> usize {
        self.current_classes()
    }

    fn probabilities(&self, images: &Array2<f64>) -> Result<Array2<f64>> {
        let (logits, _) = self.forward_batch(images)?;
        Ok(nn::softmax_rows(&logits))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub images: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
    pub entropies: Vec<f64>,
    pub retained: Vec<bool>,
}

impl ReplayBatch {
    pub fn empty(shape: ImageShape, num_classes: usize) -> Self {
        ReplayBatch {
            shape,
            num_classes,
            images: Array2::zeros((0, shape.numel())),
            pseudo_labels: Vec::new(),
            entropies: Vec::new(),
            retained: Vec::new(),
        }
    }

    pub fn generated(&self) -> usize {
        self.retained.len()
    }

    pub fn retained_count(&self) -> usize {
        self.retained.iter().filter(|r| **r).count()
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&i| self.retained[i]).collect()
    }

    /// Retained images and labels as rows.
    pub fn retained_rows(&self) -> (Array2<f64>, Vec<usize>) {
        let idx = self.retained_indices();
        let rows = self.images.select(ndarray::Axis(0), &idx);
        let labels = idx.iter().map(|&i| self.pseudo_labels[i]).collect();
        (rows, labels)
    }

    /// The retained samples as a labeled dataset; labels are head indices.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let (rows, labels) = self.retained_rows();
        Dataset::from_rows(self.shape, self.num_classes.max(1), &rows, &labels)
    }

    /// Audit table: `index,pseudo_label,entropy,retained`.
    pub fn write_sidecar_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "index,pseudo_label,entropy,retained")?;
        for i in 0..self.generated() {
            writeln!(
                w,
                "{i},{},{},{}",
                self.pseudo_labels[i], self.entropies[i], self.retained[i]
            )?;
        }
        Ok(())
    }

    pub fn save_sidecar_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_sidecar_csv(f)
    }
}

/// Pseudo-label `images` and apply the entropy filter.
pub fn label_and_filter(
    images: Array2<f64>,
    shape: ImageShape,
    labeler: &impl Labeler,
    config: &ReplayConfig,
) -> Result<ReplayBatch> {
    config.validate()?;
    let num_classes = labeler.num_classes();
    if images.nrows() == 0 {
        return Ok(ReplayBatch::empty(shape, num_classes));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("labeler has no classes".into()));
    }
    let probs = labeler.probabilities(&images)?;
    if probs.dim() != (images.nrows(), num_classes) {
        return Err(Error::Shape(format!(
            "labeler returned {:?} for {} images and {num_classes} classes",
            probs.dim(),
            images.nrows()
        )));
    }
    let mut pseudo_labels = Vec::with_capacity(probs.nrows());
    let mut entropies = Vec::with_capacity(probs.nrows());
    for row in probs.outer_iter() {
        let p = row.to_vec();
        entropies.push(prediction_entropy(&p)?);
        pseudo_labels.push(argmax(&p));
    }
    let retained = select_retained(&entropies, config.effective_lambda(), config.direction);
    Ok(ReplayBatch {
        shape,
        num_classes,
        images,
        pseudo_labels,
        entropies,
        retained,
    })
}

/// Generate `⌈n_s/λ⌉` images from `source`, label them with `labeler`, and
/// retain `round(λ·count)` by entropy.
pub fn build_replay(
    source: &impl ImageSource,
    labeler: &impl Labeler,
    config: &ReplayConfig,
    seed: u64,
) -> Result<ReplayBatch> {
    config.validate()?;
    let shape = source.image_shape();
    let count = config.generated_count();
    if count == 0 {
        return Ok(ReplayBatch::empty(shape, labeler.num_classes()));
    }
    let images = source.generate(count, seed)?;
    if images.dim() != (count, shape.numel()) {
        return Err(Error::Shape(format!(
            "generator returned {:?}, expected ({count}, {})",
            images.dim(),
            shape.numel()
        )));
    }
    label_and_filter(images, shape, labeler, config)
}
