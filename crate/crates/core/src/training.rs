//! Client-side optimization of `CE + α·KD + γ·FD` against a frozen teacher.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::Sgd;
use crate::seed;
use crate::tensor::ParamSet;

/// Argument order of the distillation KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(student ‖ teacher)`
    #[default]
    StudentToTeacher,
    /// `KL(teacher ‖ student)`
    TeacherToStudent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub kd_temperature: f64,
    pub kd_direction: KdDirection,
    /// Weight on the cross-entropy term; 1 outside of test harnesses.
    pub ce_weight: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Rescale each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 3.0,
            gamma: 2.0,
            kd_temperature: 1.0,
            kd_direction: KdDirection::StudentToTeacher,
            ce_weight: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            local_epochs: 5,
            batch_size: 128,
            clip_grad_norm: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.alpha) || !nonneg(self.gamma) || !nonneg(self.ce_weight) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(Error::Config(format!(
                "kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !nonneg(self.momentum) || !nonneg(self.weight_decay) {
            return Err(Error::Config("optimizer settings must be positive".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub kd: f64,
    pub fd: f64,
    pub total: f64,
}

impl LossTerms {
    fn mean(items: &[LossTerms]) -> LossTerms {
        let n = items.len().max(1) as f64;
        let mut m = LossTerms::default();
        for t in items {
            m.ce += t.ce / n;
            m.kd += t.kd / n;
            m.fd += t.fd / n;
            m.total += t.total / n;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub steps: Vec<LossTerms>,
    pub epochs: Vec<LossTerms>,
}

impl LossReport {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean over all steps.
    pub fn overall(&self) -> LossTerms {
        LossTerms::mean(&self.steps)
    }
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
pub fn ce_loss_and_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside head of {k} classes")));
    }
    if b == 0 {
        return Ok((0.0, logits.clone()));
    }
    let log_p = nn::log_softmax_rows(logits);
    let loss = -labels.iter().enumerate().map(|(r, &y)| log_p[[r, y]]).sum::<f64>() / b as f64;
    let mut grad = log_p.mapv(f64::exp);
    for (r, &y) in labels.iter().enumerate() {
        grad[[r, y]] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss, grad))
}

pub fn ce_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(ce_loss_and_grad(logits, labels)?.0)
}

/// Batch-mean KL between temperature-softened distributions over the
/// teacher's classes, with the gradient on the full student logits.
pub fn kd_loss_and_grad(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    direction: KdDirection,
) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let (b, ks) = student_logits.dim();
    let (bt, k) = teacher_logits.dim();
    if b != bt || k > ks {
        return Err(Error::Shape(format!(
            "student {:?} cannot be distilled from teacher {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    let mut grad = Array2::zeros((b, ks));
    if b == 0 || k == 0 {
        return Ok((0.0, grad));
    }
    let u = student_logits.slice(s![.., ..k]).mapv(|v| v / temperature);
    let log_s = nn::log_softmax_rows(&u);
    let log_q = nn::log_softmax_rows(&teacher_logits.mapv(|v| v / temperature));
    let s_p = log_s.mapv(f64::exp);
    let q_p = log_q.mapv(f64::exp);
    let scale = 1.0 / (b as f64 * temperature);
    let mut total = 0.0;
    for r in 0..b {
        match direction {
            KdDirection::StudentToTeacher => {
                let kl: f64 = (0..k).map(|j| s_p[[r, j]] * (log_s[[r, j]] - log_q[[r, j]])).sum();
                total += kl;
                for j in 0..k {
                    let f = log_s[[r, j]] - log_q[[r, j]];
                    grad[[r, j]] = s_p[[r, j]] * (f - kl) * scale;
                }
            }
            KdDirection::TeacherToStudent => {
                let kl: f64 = (0..k).map(|j| q_p[[r, j]] * (log_q[[r, j]] - log_s[[r, j]])).sum();
                total += kl;
                for j in 0..k {
                    grad[[r, j]] = (s_p[[r, j]] - q_p[[r, j]]) * scale;
                }
            }
        }
    }
    Ok((total / b as f64, grad))
}

pub fn kd_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    direction: KdDirection,
) -> Result<f64> {
    Ok(kd_loss_and_grad(student_logits, teacher_logits, temperature, direction)?.0)
}

/// Batch mean of `‖h_s − h_t‖²` and its gradient on the student features.
pub fn fd_loss_and_grad(student: &Array2<f64>, teacher: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!(
            "feature shapes {:?} and {:?} differ",
            student.dim(),
            teacher.dim()
        )));
    }
    let b = student.nrows();
    if b == 0 {
        return Ok((0.0, student.clone()));
    }
    let diff = student - teacher;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b as f64;
    Ok((loss, diff * (2.0 / b as f64)))
}

pub fn fd_loss(student: &Array2<f64>, teacher: &Array2<f64>) -> Result<f64> {
    Ok(fd_loss_and_grad(student, teacher)?.0)
}

/// Images as rows with head-index labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(images: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images with {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        Ok(TrainingSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenate two sets with equal image width.
    pub fn concat(&self, other: &TrainingSet) -> Result<TrainingSet> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        TrainingSet::new(images, labels)
    }
}

/// Frozen teacher outputs for every row of a training set.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
}

impl TeacherOutputs {
    pub fn compute(teacher: &Classifier, images: &Array2<f64>) -> Result<Self> {
        const CHUNK: usize = 128;
        let mut logits = Array2::zeros((images.nrows(), teacher.current_classes()));
        let mut features = Array2::zeros((images.nrows(), teacher.feature_dim()));
        let mut start = 0;
        while start < images.nrows() {
            let end = (start + CHUNK).min(images.nrows());
            let (l, f) = teacher.forward_batch(&images.slice(s![start..end, ..]).to_owned())?;
            logits.slice_mut(s![start..end, ..]).assign(&l);
            features.slice_mut(s![start..end, ..]).assign(&f);
            start = end;
        }
        Ok(TeacherOutputs { logits, features })
    }
}

/// Loss terms and parameter gradients of one mini-batch.
pub fn batch_loss_and_grad(
    model: &Classifier,
    images: &Array2<f64>,
    labels: &[usize],
    teacher: Option<(&Array2<f64>, &Array2<f64>)>,
    config: &LossConfig,
) -> Result<(LossTerms, ParamSet)> {
    let pass = model.forward_train(images)?;
    let (ce, mut d_logits) = ce_loss_and_grad(&pass.logits, labels)?;
    d_logits *= config.ce_weight;
    let mut terms = LossTerms {
        ce,
        ..LossTerms::default()
    };
    let mut d_features = None;
    if let Some((t_logits, t_features)) = teacher {
        let (kd, g_kd) = kd_loss_and_grad(&pass.logits, t_logits, config.kd_temperature, config.kd_direction)?;
        let (fd, g_fd) = fd_loss_and_grad(&pass.features, t_features)?;
        d_logits.scaled_add(config.alpha, &g_kd);
        d_features = Some(g_fd * config.gamma);
        terms.kd = kd;
        terms.fd = fd;
    }
    terms.total = config.ce_weight * terms.ce + config.alpha * terms.kd + config.gamma * terms.fd;
    if ![terms.ce, terms.kd, terms.fd, terms.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite loss {terms:?}")));
    }
    let grads = model.backward(&pass, Some(&d_logits), d_features.as_ref());
    Ok((terms, grads))
}

fn clip_to_norm(grads: &mut ParamSet, max_norm: f64) {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Run `E` epochs of SGD over shuffled mini-batches of `data`. With a
/// teacher the objective is `CE + α·KD + γ·FD`, otherwise CE only.
pub fn client_update(
    model: &mut Classifier,
    data: &TrainingSet,
    teacher: Option<&Classifier>,
    config: &LossConfig,
    seed_: u64,
) -> Result<LossReport> {
    config.validate()?;
    let mut report = LossReport::default();
    if config.local_epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        log::debug!("client has no local or replay data; returning the model unchanged");
        return Ok(report);
    }
    let cached = teacher
        .map(|t| TeacherOutputs::compute(t, &data.images))
        .transpose()?;
    let mut sgd = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.local_epochs {
        order.shuffle(&mut seed::derived_rng(seed_, "local-epoch", &[epoch as u64]));
        let first = report.steps.len();
        for batch in order.chunks(config.batch_size) {
            let images = data.images.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let t_out = cached
                .as_ref()
                .map(|c| (c.logits.select(Axis(0), batch), c.features.select(Axis(0), batch)));
            let (terms, mut grads) = batch_loss_and_grad(
                model,
                &images,
                &labels,
                t_out.as_ref().map(|(l, f)| (l, f)),
                config,
            )?;
            if let Some(max_norm) = config.clip_grad_norm {
                clip_to_norm(&mut grads, max_norm);
            }
            sgd.step(model.params_mut(), &grads);
            report.steps.push(terms);
        }
        report.epochs.push(LossTerms::mean(&report.steps[first..]));
    }
    if !model.params().all_finite() {
        return Err(Error::Divergence("classifier parameters became non-finite".into()));
    }
    Ok(report)
}
