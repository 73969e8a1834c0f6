//! Convolutional feature extractor with an expandable linear head.
//!
//! The extractor is a stack of 3×3 conv + ReLU blocks with 2× average pooling
//! between them, global average pooling, and a fully connected ReLU layer that
//! yields the `feature_dim`-dimensional representation. The head maps
//! features to one logit per class seen so far and grows as tasks arrive.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, FeatureMap};
use crate::tensor::{Checkpoint, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub image: ImageShape,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
}

impl ClassifierSpec {
    /// Three conv blocks (8, 16, 32 channels) and 64-d features.
    pub fn desk(image: ImageShape) -> Self {
        ClassifierSpec {
            image,
            conv_channels: vec![8, 16, 32],
            feature_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("classifier needs at least one non-empty conv block".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let factor = 1usize << (self.conv_channels.len() - 1);
        if !self.image.height.is_multiple_of(factor) || !self.image.width.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "{} conv blocks need image sides divisible by {factor}, got {}×{}",
                self.conv_channels.len(),
                self.image.height,
                self.image.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    params: ParamSet,
    current_classes: usize,
}

/// Activations kept from a training forward pass.
pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
    blocks: Vec<(ConvCache, FeatureMap)>,
    pooled: Array2<f64>,
}

fn conv_name(i: usize, part: &str) -> String {
    format!("conv{i}.{part}")
}

/// Negative slope of every activation; keeps units from dying when a new
/// task's head rows produce large early gradients.
const LEAK: f64 = 0.1;

/// Shift pixels from `[0, 1]` to `[-0.5, 0.5]`.
fn center_input(x: &mut FeatureMap) {
    x.data.mapv_inplace(|v| v - 0.5);
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut in_ch = spec.image.channels;
        for (i, &out_ch) in spec.conv_channels.iter().enumerate() {
            let (w, b) = nn::conv3x3_he_init(rng, in_ch, out_ch);
            params.push(conv_name(i, "weight"), w);
            params.push(conv_name(i, "bias"), b);
            in_ch = out_ch;
        }
        let (w, b) = nn::linear_he_init(rng, in_ch, spec.feature_dim);
        params.push("fc.weight", w);
        params.push("fc.bias", b);
        params.push("head.weight", Tensor::zeros(&[0, spec.feature_dim]));
        params.push("head.bias", Tensor::zeros(&[0]));
        let mut model = Classifier {
            spec,
            params,
            current_classes: 0,
        };
        model.expand_head(num_classes, rng)?;
        Ok(model)
    }

    /// Rebuild a model from parameters, checking them against `spec`.
    pub fn from_params(spec: ClassifierSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let template = Classifier::new(spec.clone(), 0, &mut crate::seed::rng(0))?;
        if params.names() != template.params.names() {
            return Err(Error::Shape(format!(
                "parameter names {:?} do not match classifier layout {:?}",
                params.names(),
                template.params.names()
            )));
        }
        let classes = params.get("head.weight").shape().first().copied().unwrap_or(0);
        for ((name, got), (_, want)) in params.iter().zip(template.params.iter()) {
            let ok = match name {
                "head.weight" => got.shape() == [classes, spec.feature_dim],
                "head.bias" => got.shape() == [classes],
                _ => got.shape() == want.shape(),
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Classifier {
            spec,
            params,
            current_classes: classes,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn current_classes(&self) -> usize {
        self.current_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, images: &Array2<f64>) -> Result<()> {
        if images.ncols() != self.spec.image.numel() {
            return Err(Error::Shape(format!(
                "image rows have {} values, model expects {:?} ({} values)",
                images.ncols(),
                self.spec.image,
                self.spec.image.numel()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every activation needed by [`Classifier::backward`].
    pub fn forward_train(&self, images: &Array2<f64>) -> Result<ForwardPass> {
        self.check_input(images)?;
        let img = self.spec.image;
        let mut x = FeatureMap::from_chw_rows(images.view(), img.channels, img.height, img.width);
        center_input(&mut x);
        let last = self.spec.conv_channels.len() - 1;
        let mut blocks = Vec::with_capacity(last + 1);
        for i in 0..=last {
            let (mut y, cache) = nn::conv3x3_forward(
                &x,
                self.params.get(&conv_name(i, "weight")),
                self.params.get(&conv_name(i, "bias")),
            );
            nn::leaky_relu_inplace(&mut y.data, LEAK);
            x = if i < last { nn::avgpool2_forward(&y) } else { y.clone() };
            blocks.push((cache, y));
        }
        let pooled = nn::global_avg_pool_forward(&x);
        let mut features = nn::linear_forward(&pooled, self.params.get("fc.weight"), self.params.get("fc.bias"));
        nn::leaky_relu_inplace(&mut features, LEAK);
        let logits = nn::linear_forward(&features, self.params.get("head.weight"), self.params.get("head.bias"));
        Ok(ForwardPass {
            logits,
            features,
            blocks,
            pooled,
        })
    }

    /// Logits and features without keeping intermediate state.
    pub fn forward_batch(&self, images: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(images)?;
        let img = self.spec.image;
        let mut x = FeatureMap::from_chw_rows(images.view(), img.channels, img.height, img.width);
        center_input(&mut x);
        let last = self.spec.conv_channels.len() - 1;
        for i in 0..=last {
            let mut y = nn::conv3x3_infer(
                &x,
                self.params.get(&conv_name(i, "weight")),
                self.params.get(&conv_name(i, "bias")),
            );
            nn::leaky_relu_inplace(&mut y.data, LEAK);
            x = if i < last { nn::avgpool2_forward(&y) } else { y };
        }
        let pooled = nn::global_avg_pool_forward(&x);
        let mut features = nn::linear_forward(&pooled, self.params.get("fc.weight"), self.params.get("fc.bias"));
        nn::leaky_relu_inplace(&mut features, LEAK);
        let logits = nn::linear_forward(&features, self.params.get("head.weight"), self.params.get("head.bias"));
        Ok((logits, features))
    }

    pub fn forward(&self, images: &Array2<f64>) -> Result<Vec<Prediction>> {
        if images.nrows() == 0 {
            self.check_input(images)?;
            return Ok(Vec::new());
        }
        let (logits, features) = self.forward_batch(images)?;
        let probs = nn::softmax_rows(&logits);
        Ok(logits
            .outer_iter()
            .zip(probs.outer_iter())
            .zip(features.outer_iter())
            .map(|((l, p), f)| Prediction {
                logits: l.to_vec(),
                probabilities: p.to_vec(),
                features: f.to_vec(),
            })
            .collect())
    }

    /// Argmax class for each image row.
    pub fn predict(&self, images: &Array2<f64>) -> Result<Vec<usize>> {
        if images.nrows() == 0 {
            return Ok(Vec::new());
        }
        let (logits, _) = self.forward_batch(images)?;
        Ok(logits.outer_iter().map(|row| argmax(row.as_slice().expect("row"))).collect())
    }

    /// Parameter gradients given upstream gradients on logits and/or features.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: Option<&Array2<f64>>,
        d_features: Option<&Array2<f64>>,
    ) -> ParamSet {
        let mut grads = self.params.zeros_like();
        let mut d_feat = match d_features {
            Some(d) => d.clone(),
            None => Array2::zeros(pass.features.dim()),
        };
        if let Some(dl) = d_logits {
            let (dx, dw, db) = nn::linear_backward(&pass.features, self.params.get("head.weight"), dl, true);
            d_feat += &dx.expect("requested");
            grads.replace("head.weight", dw);
            grads.replace("head.bias", db);
        }
        nn::leaky_relu_backward(&pass.features, &mut d_feat, LEAK);
        let (d_pooled, dw, db) = nn::linear_backward(&pass.pooled, self.params.get("fc.weight"), &d_feat, true);
        grads.replace("fc.weight", dw);
        grads.replace("fc.bias", db);

        let last = pass.blocks.len() - 1;
        let (_, last_out) = &pass.blocks[last];
        let mut d = nn::global_avg_pool_backward(&d_pooled.expect("requested"), last_out.height, last_out.width);
        for i in (0..=last).rev() {
            if i < last {
                d = nn::avgpool2_backward(&d);
            }
            let (cache, out) = &pass.blocks[i];
            nn::leaky_relu_backward(&out.data, &mut d.data, LEAK);
            let w = self.params.get(&conv_name(i, "weight"));
            let (dx, dw, db) = nn::conv3x3_backward(cache, w, &d, i > 0);
            grads.replace(&conv_name(i, "weight"), dw);
            grads.replace(&conv_name(i, "bias"), db);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        grads
    }

    /// Grow the head to `new_total` classes, keeping existing rows exactly.
    pub fn expand_head(&mut self, new_total: usize, rng: &mut impl Rng) -> Result<()> {
        if new_total < self.current_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink head from {} to {new_total} classes",
                self.current_classes
            )));
        }
        if new_total == self.current_classes {
            return Ok(());
        }
        let d = self.spec.feature_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let added = new_total - self.current_classes;
        let mut w = self.params.get("head.weight").data().to_vec();
        w.extend(nn::uniform_tensor(rng, &[added, d], bound).data());
        let mut b = self.params.get("head.bias").data().to_vec();
        b.extend(nn::uniform_tensor(rng, &[added], bound).data());
        self.params.replace("head.weight", Tensor::from_vec(&[new_total, d], w)?);
        self.params.replace("head.bias", Tensor::from_vec(&[new_total], b)?);
        self.current_classes = new_total;
        Ok(())
    }

    /// Weighted parameter average of models with identical architecture.
    pub fn aggregate(models: &[&Classifier], weights: &[f64]) -> Result<Classifier> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidArgument("no models to aggregate".into()))?;
        for m in &models[1..] {
            if m.spec != first.spec {
                return Err(Error::Shape("aggregating models with different architectures".into()));
            }
        }
        let sets: Vec<&ParamSet> = models.iter().map(|m| &m.params).collect();
        let params = ParamSet::weighted_average(&sets, weights)?;
        Ok(Classifier {
            spec: first.spec.clone(),
            params,
            current_classes: first.current_classes,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.metadata.insert("kind".into(), "classifier".into());
        ck.metadata.insert(
            "spec".into(),
            serde_json::to_string(&self.spec).expect("spec serializes"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").map(String::as_str) != Some("classifier") {
            return Err(Error::Format("checkpoint is not a classifier".into()));
        }
        let spec: ClassifierSpec = serde_json::from_str(
            ck.metadata
                .get("spec")
                .ok_or_else(|| Error::Format("classifier checkpoint lacks spec".into()))?,
        )?;
        Classifier::from_params(spec, ck.params.clone())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
