//! Per-client DDPM generative memory.
//!
//! Training minimizes the ε-prediction MSE `‖ε_θ(√ᾱ_t x₀ + √(1−ᾱ_t) ε, t) − ε‖²`
//! with `t` uniform per example. Sampling runs the ancestral reverse chain
//! `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε_θ(x_t, t)) / √α_t + σ_t z` from pure
//! noise, without noise on the last step, and clamps the result to `[0, 1]`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, FeatureMap};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{self, EpochBatchPlan};
use crate::seed;
use crate::tensor::{Checkpoint, ParamSet, Tensor};

/// β/α/ᾱ/σ sequences, stored for `t = 1..=T` at index `t − 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β from `beta_start` to `beta_end`, σ_t = √β_t.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            (0..num_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Linear schedule whose endpoints `1e-4, 0.02` are scaled by
    /// `1000 / num_steps`, keeping ᾱ_T near zero for short chains.
    pub fn scaled_linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let scale = 1000.0 / num_steps as f64;
        Self::linear(num_steps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Replace the reverse-process noise scales.
    pub fn with_sigmas(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.betas.len() || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("sigmas must be non-negative, one per step".into()));
        }
        self.sigmas = sigmas;
        Ok(self)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `√ᾱ_t · x₀ + √(1 − ᾱ_t) · noise`
    pub fn forward_diffuse(&self, x0: &Array2<f64>, t: usize, noise: &Array2<f64>) -> Result<Array2<f64>> {
        let i = self.check(t)?;
        if x0.dim() != noise.dim() {
            return Err(Error::Shape(format!(
                "x0 {:?} and noise {:?} differ",
                x0.dim(),
                noise.dim()
            )));
        }
        let ab = self.alpha_bars[i];
        Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
    }

    /// Row-wise forward diffusion with one timestep per row.
    fn forward_diffuse_rows(&self, x0: &Array2<f64>, ts: &[usize], noise: &Array2<f64>) -> Array2<f64> {
        let mut out = x0.clone();
        for (r, &t) in ts.iter().enumerate() {
            let ab = self.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut row = out.row_mut(r);
            row.zip_mut_with(&noise.row(r), |x, n| *x = a * *x + b * n);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub image: ImageShape,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
}

impl DenoiserSpec {
    pub fn desk(image: ImageShape) -> Self {
        DenoiserSpec {
            image,
            base_channels: 8,
            mid_channels: 16,
            time_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image.height.is_multiple_of(2) || !self.image.width.is_multiple_of(2) {
            return Err(Error::Config("denoiser needs even image sides".into()));
        }
        if self.base_channels == 0 || self.mid_channels == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("denoiser widths must be positive, time_dim even".into()));
        }
        Ok(())
    }
}

/// ε_θ: conv encoder at full resolution, one pooled level, conv decoder,
/// upsampling with an additive skip from the encoder, and a sinusoidal time
/// embedding injected as per-channel biases. A time-dependent per-channel
/// gain on the input is added to the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    spec: DenoiserSpec,
    params: ParamSet,
}

struct DenoiserPass {
    sinusoid: Array2<f64>,
    emb: Array2<f64>,
    enc: (ConvCache, FeatureMap),
    mid: (ConvCache, FeatureMap),
    dec: (ConvCache, FeatureMap),
    out: ConvCache,
    out_dims: (usize, usize, usize),
    input: Array2<f64>,
}

/// Add `gain[r, c] · x[r, c·hw + i]` to chw rows.
fn apply_gain(out: &mut Array2<f64>, x: &Array2<f64>, gain: &Array2<f64>) {
    let hw = x.ncols() / gain.ncols();
    for ((mut o, xr), g) in out.outer_iter_mut().zip(x.outer_iter()).zip(gain.outer_iter()) {
        for (i, (ov, xv)) in o.iter_mut().zip(xr.iter()).enumerate() {
            *ov += g[i / hw] * xv;
        }
    }
}

fn gain_backward(d_out: &Array2<f64>, x: &Array2<f64>, channels: usize) -> Array2<f64> {
    let hw = x.ncols() / channels;
    let mut dg = Array2::zeros((x.nrows(), channels));
    for ((mut g, dr), xr) in dg.outer_iter_mut().zip(d_out.outer_iter()).zip(x.outer_iter()) {
        for (i, (d, xv)) in dr.iter().zip(xr.iter()).enumerate() {
            g[i / hw] += d * xv;
        }
    }
    dg
}

fn time_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((ts.len(), dim), |(r, j)| {
        let k = j % half;
        // geometric frequencies from 1 down to 1/1000
        let freq = if half > 1 { 1000f64.powf(-(k as f64) / (half - 1) as f64) } else { 1.0 };
        let angle = ts[r] as f64 * freq;
        if j < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (c, b, m, td) = (spec.image.channels, spec.base_channels, spec.mid_channels, spec.time_dim);
        let hd = 2 * td;
        let mut params = ParamSet::new();
        let (w, bias) = nn::linear_init(rng, td, hd);
        params.push("time_hidden.weight", w);
        params.push("time_hidden.bias", bias);
        let (w, bias) = nn::linear_init(rng, hd, b);
        params.push("time_enc.weight", w);
        params.push("time_enc.bias", bias);
        let (w, bias) = nn::linear_init(rng, hd, m);
        params.push("time_mid.weight", w);
        params.push("time_mid.bias", bias);
        let (w, bias) = nn::linear_init(rng, hd, c);
        params.push("time_gain.weight", w);
        params.push("time_gain.bias", bias);
        for (name, i, o) in [("enc", c, b), ("mid", b, m), ("dec", m, b), ("out", b, c)] {
            let (w, bias) = nn::conv3x3_init(rng, i, o);
            params.push(format!("{name}.weight"), w);
            params.push(format!("{name}.bias"), bias);
        }
        Ok(Denoiser { spec, params })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn run(&self, x: &Array2<f64>, ts: &[usize]) -> (Array2<f64>, DenoiserPass) {
        let img = self.spec.image;
        let p = &self.params;
        let sinusoid = time_embedding(ts, self.spec.time_dim);
        let mut emb = nn::linear_forward(&sinusoid, p.get("time_hidden.weight"), p.get("time_hidden.bias"));
        nn::relu_inplace(&mut emb);
        let tb_enc = nn::linear_forward(&emb, p.get("time_enc.weight"), p.get("time_enc.bias"));
        let tb_mid = nn::linear_forward(&emb, p.get("time_mid.weight"), p.get("time_mid.bias"));

        let input = FeatureMap::from_chw_rows(x.view(), img.channels, img.height, img.width);
        let (mut h1, c1) = nn::conv3x3_forward(&input, p.get("enc.weight"), p.get("enc.bias"));
        nn::add_image_bias(&mut h1, &tb_enc);
        nn::relu_inplace(&mut h1.data);
        let pooled = nn::avgpool2_forward(&h1);
        let (mut h2, c2) = nn::conv3x3_forward(&pooled, p.get("mid.weight"), p.get("mid.bias"));
        nn::add_image_bias(&mut h2, &tb_mid);
        nn::relu_inplace(&mut h2.data);
        let (mut h3, c3) = nn::conv3x3_forward(&h2, p.get("dec.weight"), p.get("dec.bias"));
        nn::relu_inplace(&mut h3.data);
        let mut skip = nn::upsample2_forward(&h3);
        skip.data += &h1.data;
        let (out, c4) = nn::conv3x3_forward(&skip, p.get("out.weight"), p.get("out.bias"));
        let mut rows = out.to_chw_rows();
        let gain = nn::linear_forward(&emb, p.get("time_gain.weight"), p.get("time_gain.bias"));
        apply_gain(&mut rows, x, &gain);
        (
            rows,
            DenoiserPass {
                sinusoid,
                emb,
                enc: (c1, h1),
                mid: (c2, h2),
                dec: (c3, h3),
                out: c4,
                out_dims: (out.batch, out.height, out.width),
                input: x.clone(),
            },
        )
    }

    /// Predicted noise for each image row at its timestep.
    pub fn predict(&self, x: &Array2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check(x, ts)?;
        let img = self.spec.image;
        let p = &self.params;
        let mut emb = nn::linear_forward(
            &time_embedding(ts, self.spec.time_dim),
            p.get("time_hidden.weight"),
            p.get("time_hidden.bias"),
        );
        nn::relu_inplace(&mut emb);
        let tb_enc = nn::linear_forward(&emb, p.get("time_enc.weight"), p.get("time_enc.bias"));
        let tb_mid = nn::linear_forward(&emb, p.get("time_mid.weight"), p.get("time_mid.bias"));
        let gain = nn::linear_forward(&emb, p.get("time_gain.weight"), p.get("time_gain.bias"));

        let input = FeatureMap::from_chw_rows(x.view(), img.channels, img.height, img.width);
        let mut h1 = nn::conv3x3_infer(&input, p.get("enc.weight"), p.get("enc.bias"));
        nn::add_image_bias(&mut h1, &tb_enc);
        nn::relu_inplace(&mut h1.data);
        let mut h2 = nn::conv3x3_infer(&nn::avgpool2_forward(&h1), p.get("mid.weight"), p.get("mid.bias"));
        nn::add_image_bias(&mut h2, &tb_mid);
        nn::relu_inplace(&mut h2.data);
        let mut h3 = nn::conv3x3_infer(&h2, p.get("dec.weight"), p.get("dec.bias"));
        nn::relu_inplace(&mut h3.data);
        let mut skip = nn::upsample2_forward(&h3);
        skip.data += &h1.data;
        let mut rows = nn::conv3x3_infer(&skip, p.get("out.weight"), p.get("out.bias")).to_chw_rows();
        apply_gain(&mut rows, x, &gain);
        Ok(rows)
    }

    fn check(&self, x: &Array2<f64>, ts: &[usize]) -> Result<()> {
        if x.ncols() != self.spec.image.numel() || x.nrows() != ts.len() {
            return Err(Error::Shape(format!(
                "{} rows of width {} with {} timesteps for image {:?}",
                x.nrows(),
                x.ncols(),
                ts.len(),
                self.spec.image
            )));
        }
        Ok(())
    }

    fn backward(&self, pass: &DenoiserPass, d_out_rows: &Array2<f64>) -> ParamSet {
        let img = self.spec.image;
        let p = &self.params;
        let mut g = self.params.zeros_like();
        let (b, h, w) = pass.out_dims;
        let d_out = FeatureMap::from_chw_rows(d_out_rows.view(), img.channels, h, w);
        debug_assert_eq!(d_out.batch, b);

        let (d_skip, dw, db) = nn::conv3x3_backward(&pass.out, p.get("out.weight"), &d_out, true);
        g.replace("out.weight", dw);
        g.replace("out.bias", db);
        let d_skip = d_skip.expect("requested");

        let mut d_h3 = nn::upsample2_backward(&d_skip);
        nn::relu_backward(&pass.dec.1.data, &mut d_h3.data);
        let (d_h2, dw, db) = nn::conv3x3_backward(&pass.dec.0, p.get("dec.weight"), &d_h3, true);
        g.replace("dec.weight", dw);
        g.replace("dec.bias", db);

        let mut d_h2 = d_h2.expect("requested");
        nn::relu_backward(&pass.mid.1.data, &mut d_h2.data);
        let d_tb_mid = nn::image_bias_backward(&d_h2);
        let (d_pooled, dw, db) = nn::conv3x3_backward(&pass.mid.0, p.get("mid.weight"), &d_h2, true);
        g.replace("mid.weight", dw);
        g.replace("mid.bias", db);

        let mut d_h1 = d_skip;
        d_h1.data += &nn::avgpool2_backward(&d_pooled.expect("requested")).data;
        nn::relu_backward(&pass.enc.1.data, &mut d_h1.data);
        let d_tb_enc = nn::image_bias_backward(&d_h1);
        let (_, dw, db) = nn::conv3x3_backward(&pass.enc.0, p.get("enc.weight"), &d_h1, false);
        g.replace("enc.weight", dw);
        g.replace("enc.bias", db);

        let (d_emb_part, dw, db) = nn::linear_backward(&pass.emb, p.get("time_enc.weight"), &d_tb_enc, true);
        let mut d_emb = d_emb_part.expect("requested");
        g.replace("time_enc.weight", dw);
        g.replace("time_enc.bias", db);
        let (d_emb_part, dw, db) = nn::linear_backward(&pass.emb, p.get("time_mid.weight"), &d_tb_mid, true);
        d_emb += &d_emb_part.expect("requested");
        g.replace("time_mid.weight", dw);
        g.replace("time_mid.bias", db);
        let d_gain = gain_backward(d_out_rows, &pass.input, img.channels);
        let (d_emb_part, dw, db) = nn::linear_backward(&pass.emb, p.get("time_gain.weight"), &d_gain, true);
        d_emb += &d_emb_part.expect("requested");
        g.replace("time_gain.weight", dw);
        g.replace("time_gain.bias", db);
        nn::relu_backward(&pass.emb, &mut d_emb);
        let (_, dw, db) = nn::linear_backward(&pass.sinusoid, p.get("time_hidden.weight"), &d_emb, false);
        g.replace("time_hidden.weight", dw);
        g.replace("time_hidden.bias", db);
        g
    }

    /// Noise-prediction MSE (mean over all elements) and its gradient.
    pub fn loss_and_grad(&self, x_t: &Array2<f64>, ts: &[usize], noise: &Array2<f64>) -> Result<(f64, ParamSet)> {
        self.check(x_t, ts)?;
        if noise.dim() != x_t.dim() {
            return Err(Error::Shape("noise and input differ".into()));
        }
        let (pred, pass) = self.run(x_t, ts);
        let diff = &pred - noise;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad_rows = diff * (2.0 / n);
        Ok((loss, self.backward(&pass, &grad_rows)))
    }
}

/// Denoiser plus its noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Class-balanced batches when true, plain shuffled batches otherwise.
    pub balanced: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            batch_size: 16,
            adam: AdamConfig {
                lr: 5e-5,
                ..AdamConfig::default()
            },
            balanced: true,
        }
    }
}

impl DiffusionTrainConfig {
    /// Larger step size for short CPU-scale runs.
    pub fn desk() -> Self {
        DiffusionTrainConfig {
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

impl DiffusionModel {
    pub fn new(spec: DenoiserSpec, schedule: NoiseSchedule, rng: &mut impl Rng) -> Result<Self> {
        Ok(DiffusionModel {
            denoiser: Denoiser::new(spec, rng)?,
            schedule,
        })
    }

    pub fn image_shape(&self) -> ImageShape {
        self.denoiser.spec.image
    }

    /// Train for `epochs` passes over the shard `indices` of `dataset`,
    /// continuing from the current parameters. Returns per-step losses.
    pub fn train_epochs(
        &mut self,
        dataset: &Dataset,
        indices: &[usize],
        epochs: usize,
        config: &DiffusionTrainConfig,
        seed_: u64,
    ) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Ok(Vec::new());
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("diffusion training needs a non-empty shard".into()));
        }
        if dataset.shape() != self.image_shape() {
            return Err(Error::Shape(format!(
                "dataset images {:?} vs model {:?}",
                dataset.shape(),
                self.image_shape()
            )));
        }
        let groups = sampler::group_by_class(dataset, indices)?;
        let mut adam = Adam::new(config.adam);
        let mut losses = Vec::new();
        let steps = self.schedule.num_steps();
        for epoch in 0..epochs {
            let plan_seed = seed::derive(seed_, "diffusion-plan", &[epoch as u64]);
            let plan: EpochBatchPlan = if config.balanced {
                sampler::plan_epoch(&groups, config.batch_size, plan_seed)?
            } else {
                sampler::plan_uniform_epoch(&groups, config.batch_size, plan_seed)?
            };
            let mut rng = seed::derived_rng(seed_, "diffusion-noise", &[epoch as u64]);
            for batch in plan.iterate(dataset) {
                let x0 = batch?;
                let ts: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=steps)).collect();
                let noise = gaussian(&mut rng, x0.nrows(), x0.ncols());
                let x_t = self.schedule.forward_diffuse_rows(&x0, &ts, &noise);
                let (loss, grads) = self.denoiser.loss_and_grad(&x_t, &ts, &noise)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "diffusion loss became {loss} at epoch {epoch}, step {}",
                        losses.len()
                    )));
                }
                losses.push(loss);
                adam.step(&mut self.denoiser.params, &grads);
            }
        }
        Ok(losses)
    }

    /// Reverse chain from `x_T` without clamping.
    pub fn reverse_from(&self, mut x: Array2<f64>, rng: &mut impl Rng) -> Result<Array2<f64>> {
        let n = x.nrows();
        for t in (1..=self.schedule.num_steps()).rev() {
            let ts = vec![t; n];
            let eps = self.denoiser.predict(&x, &ts)?;
            let a = self.schedule.alpha(t);
            let ab = self.schedule.alpha_bar(t);
            let coef = (1.0 - a) / (1.0 - ab).sqrt();
            let inv = 1.0 / a.sqrt();
            x.zip_mut_with(&eps, |xv, e| *xv = inv * (*xv - coef * e));
            if t > 1 {
                let sigma = self.schedule.sigma(t);
                if sigma > 0.0 {
                    let z = gaussian(rng, n, x.ncols());
                    x.scaled_add(sigma, &z);
                }
            }
        }
        Ok(x)
    }

    /// Draw `n` images in `[0, 1]` as rows `(c·h·w)`.
    pub fn sample(&self, n: usize, seed_: u64) -> Result<Array2<f64>> {
        const CHUNK: usize = 16;
        let d = self.image_shape().numel();
        let mut out = Array2::zeros((n, d));
        let mut start = 0;
        let mut chunk_id = 0u64;
        while start < n {
            let m = CHUNK.min(n - start);
            let mut rng = seed::derived_rng(seed_, "diffusion-sample", &[chunk_id]);
            let x_t = gaussian(&mut rng, m, d);
            let x0 = self.reverse_from(x_t, &mut rng)?;
            out.slice_mut(ndarray::s![start..start + m, ..]).assign(&x0);
            start += m;
            chunk_id += 1;
        }
        out.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.denoiser.params.clone());
        ck.metadata.insert("kind".into(), "diffusion".into());
        ck.metadata.insert("spec".into(), serde_json::to_string(&self.denoiser.spec).expect("spec"));
        ck.metadata.insert("schedule".into(), serde_json::to_string(&self.schedule).expect("schedule"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").map(String::as_str) != Some("diffusion") {
            return Err(Error::Format("checkpoint is not a diffusion model".into()));
        }
        let field = |k: &str| {
            ck.metadata
                .get(k)
                .ok_or_else(|| Error::Format(format!("diffusion checkpoint lacks {k}")))
        };
        let spec: DenoiserSpec = serde_json::from_str(field("spec")?)?;
        let schedule: NoiseSchedule = serde_json::from_str(field("schedule")?)?;
        let template = Denoiser::new(spec.clone(), &mut seed::rng(0))?;
        template.params.check_layout(&ck.params)?;
        Ok(DiffusionModel {
            denoiser: Denoiser {
                spec,
                params: ck.params.clone(),
            },
            schedule,
        })
    }
}

/// Zero every denoiser parameter, making ε_θ ≡ 0.
pub fn zero_params(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DenoiserSpec {
        DenoiserSpec {
            image: ImageShape::new(1, 4, 4),
            base_channels: 2,
            mid_channels: 3,
            time_dim: 4,
        }
    }

    #[test]
    fn schedule_is_consistent() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut acc = 1.0;
        for t in 1..=1000 {
            acc *= 1.0 - s.beta(t);
            assert!((acc - s.alpha_bar(t)).abs() < 1e-12);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn forward_diffuse_closed_form() {
        // two steps of beta 0.5 give alpha_bar 0.25
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let x0 = Array2::from_shape_vec((1, 3), vec![0.2, -1.0, 4.0]).unwrap();
        let z = Array2::zeros((1, 3));
        let xt = s.forward_diffuse(&x0, 2, &z).unwrap();
        assert_eq!(xt, &x0 * 0.5);
        assert!(s.forward_diffuse(&x0, 0, &z).is_err());
        assert!(s.forward_diffuse(&x0, 3, &z).is_err());
        let tiny = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let near = tiny.forward_diffuse(&x0, 1, &z).unwrap();
        assert!((&near - &x0).iter().all(|d| d.abs() < 1e-11));
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let mut d = Denoiser::new(tiny_spec(), &mut seed::rng(2)).unwrap();
        assert!(d.params().num_scalars() <= 500);
        let mut rng = seed::rng(3);
        let x = gaussian(&mut rng, 3, 16);
        let noise = gaussian(&mut rng, 3, 16);
        let ts = [1, 7, 40];
        let (_, grads) = d.loss_and_grad(&x, &ts, &noise).unwrap();
        let grads = grads.flatten();
        let base = d.params().flatten();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            d.params_mut().set_flat(&p);
            let up = d.loss_and_grad(&x, &ts, &noise).unwrap().0;
            p[i] -= 2.0 * eps;
            d.params_mut().set_flat(&p);
            let down = d.loss_and_grad(&x, &ts, &noise).unwrap().0;
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn inference_path_matches_training_forward() {
        let d = Denoiser::new(tiny_spec(), &mut seed::rng(2)).unwrap();
        let x = gaussian(&mut seed::rng(4), 3, 16);
        let ts = [1, 5, 9];
        let fast = d.predict(&x, &ts).unwrap();
        let (slow, _) = d.run(&x, &ts);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = crate::dataset::synth_dataset(2, 4, ImageShape::new(1, 4, 4), 0);
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut m = DiffusionModel::new(tiny_spec(), sched, &mut seed::rng(1)).unwrap();
        let before = m.clone();
        let losses = m
            .train_epochs(&data, &[0, 1, 4], 0, &DiffusionTrainConfig::default(), 5)
            .unwrap();
        assert!(losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let m = DiffusionModel::new(tiny_spec(), sched, &mut seed::rng(1)).unwrap();
        let a = m.sample(5, 9).unwrap();
        assert_eq!(a, m.sample(5, 9).unwrap());
        assert_ne!(a, m.sample(5, 10).unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.sample(0, 9).unwrap().nrows(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let m = DiffusionModel::new(tiny_spec(), sched, &mut seed::rng(1)).unwrap();
        let mut bytes = Vec::new();
        m.to_checkpoint().write_to(&mut bytes).unwrap();
        let back = DiffusionModel::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
