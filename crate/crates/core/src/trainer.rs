//! AdamW training of the reconstructor under the three objectives.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::feature_io::SampleRecord;
use crate::losses::{self, LossConfig, LossError};
use crate::model::{reconstruct, tokenize, ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training set is empty")]
    Empty,
    #[error("loss {loss} needs {what}, missing on sample {sample}")]
    MissingAnnotation {
        loss: LossKind,
        what: &'static str,
        sample: String,
    },
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Normal-only reconstruction loss.
    Norm,
    /// Pixel-level push-pull loss; needs masks.
    Px,
    /// Image-level push-pull loss on the top-k score; needs labels.
    Img,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Norm => "norm",
            LossKind::Px => "px",
            LossKind::Img => "img",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "norm" => Ok(LossKind::Norm),
            "px" => Ok(LossKind::Px),
            "img" => Ok(LossKind::Img),
            _ => Err(format!("unknown loss {s:?} (expected norm, px or img)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule: 500 epochs, learning rate 1e-4 dropped by 0.1
    /// after 400, weight decay 1e-4, batch 16.
    pub fn paper() -> Self {
        Self {
            epochs: 500,
            lr_initial: 1e-4,
            lr_drop_epoch: 400,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            loss_kind: LossKind::Norm,
            loss: LossConfig::default(),
            seed: 0,
        }
    }

    /// Same schedule shape at 200 epochs for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            lr_initial: 2e-3,
            lr_drop_epoch: 160,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.lr_drop_epoch > self.epochs {
            return bad(format!("lr_drop_epoch {} exceeds epochs {}", self.lr_drop_epoch, self.epochs));
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_drop_factor", self.lr_drop_factor),
            ("adam_epsilon", self.adam_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay = {} must be nonnegative", self.weight_decay));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros = || params.iter().map(|(k, p)| (k.to_string(), Tensor::zeros(p.tensor.shape()))).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Decay skips layer-norm
/// parameters and embeddings.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if let Some(name) = params.names().find(|n| !grads.contains_key(*n)) {
        return Err(TrainError::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::MissingGrad(name.to_string()))?;
        let v = state.v.get_mut(name).ok_or_else(|| TrainError::MissingGrad(name.to_string()))?;
        if g.shape() != p.tensor.shape() || m.shape() != p.tensor.shape() {
            return Err(TrainError::Config(format!("shape mismatch for {name}")));
        }
        let wd = if p.kind.decays() { config.weight_decay } else { 0.0 };
        let theta = p.tensor.data_mut();
        for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = f64::from(gi);
            let mn = b1 * f64::from(*mi) + (1.0 - b1) * gi;
            let vn = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = (mn / c1) / ((vn / c2).sqrt() + config.adam_epsilon) + wd * f64::from(*th);
            *th = (f64::from(*th) - lr * step) as f32;
        }
    }
    Ok(())
}

/// Step schedule: `lr_initial` before `lr_drop_epoch`, scaled by
/// `lr_drop_factor` from then on.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_drop_epoch {
        config.lr_initial
    } else {
        config.lr_initial * config.lr_drop_factor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub trace: Vec<EpochRecord>,
}

/// Rejects samples lacking the annotation `kind` needs, before any
/// training happens.
pub fn check_annotations(samples: &[SampleRecord], kind: LossKind) -> Result<(), TrainError> {
    for s in samples {
        let missing = match kind {
            LossKind::Norm => None,
            LossKind::Px => s.pixel_mask.is_none().then_some("a pixel mask"),
            LossKind::Img => s.effective_label().is_none().then_some("an image label"),
        };
        if let Some(what) = missing {
            return Err(TrainError::MissingAnnotation {
                loss: kind,
                what,
                sample: s.sample_id.clone(),
            });
        }
    }
    Ok(())
}

/// Loss of one sample on `tape`, from its `K×C` reconstruction.
pub fn sample_loss<'t>(
    tape: &'t Tape<f32>,
    sample: &SampleRecord,
    tokens: Var<'t, f32>,
    recon: Var<'t, f32>,
    kind: LossKind,
    loss: &LossConfig,
) -> Result<Var<'t, f32>, TrainError> {
    Ok(match kind {
        LossKind::Norm => losses::loss_norm_tokens(tokens, recon)?,
        LossKind::Px => {
            let phi = losses::pseudo_huber_tokens(tokens.sub(recon).map_err(LossError::from)?)?;
            let mask = sample.pixel_mask.as_deref().unwrap_or(&[]);
            losses::loss_px_tokens(tape, phi, mask, loss.alpha, loss.epsilon)?
        }
        LossKind::Img => {
            let phi = losses::pseudo_huber_tokens(tokens.sub(recon).map_err(LossError::from)?)?;
            let q = losses::topk_score_tokens(phi, loss.k)?;
            losses::loss_img_tokens(q, sample.effective_label().unwrap_or(0), loss.alpha, loss.epsilon)?
        }
    })
}

/// Trains from `init` for `config.epochs` epochs. Sample order is shuffled
/// each epoch from `config.seed`; each step follows the mean gradient of its
/// batch.
pub fn fit(
    samples: &[SampleRecord],
    model: &ModelConfig,
    init: ModelParams<f32>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    check_annotations(samples, config.loss_kind)?;
    let tokens: Vec<Tensor<f32>> = samples.iter().map(|s| tokenize(&s.features, model)).collect::<Result<_, _>>()?;
    if config.loss_kind == LossKind::Px {
        if let Some(s) = samples.iter().find(|s| s.pixel_mask.as_ref().map(Vec::len) != Some(model.tokens())) {
            return Err(TrainError::Config(format!("mask of {} does not match the grid", s.sample_id)));
        }
    }
    if config.loss_kind == LossKind::Img && config.loss.k > model.tokens() {
        return Err(TrainError::Config(format!("k = {} exceeds {} positions", config.loss.k, model.tokens())));
    }

    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut sum: IndexMap<String, Tensor<f32>> =
                params.iter().map(|(k, p)| (k.to_string(), Tensor::zeros(p.tensor.shape()))).collect();
            for &i in batch {
                let tape = Tape::new();
                let bound = params.bind(&tape, true);
                let x = tape.constant(tokens[i].clone());
                let recon = reconstruct(&bound, model, x)?;
                let loss = sample_loss(&tape, &samples[i], x, recon, config.loss_kind, &config.loss)?;
                total += f64::from(loss.item());
                tape.backward(loss).map_err(LossError::from)?;
                for (name, g) in bound.grads() {
                    let acc = sum.get_mut(&name).ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adamw_step(&mut params, &sum, &mut state, lr, config)?;
        }
        let mean_loss = total / samples.len() as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(TrainError::NonFinite(epoch));
        }
        trace.push(EpochRecord { epoch, lr, mean_loss });
    }
    Ok(TrainOutcome { params, trace })
}

/// `epoch\tlr\tmean_loss`, one line per epoch.
pub fn trace_text(trace: &[EpochRecord]) -> String {
    trace
        .iter()
        .map(|r| format!("{}\t{:e}\t{:.9e}\n", r.epoch, r.lr, r.mean_loss))
        .collect()
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(trace_text(trace).as_bytes()).map_err(io)
}

/// Runs [`fit`] and writes the final checkpoint and the epoch log.
pub fn fit_to(
    samples: &[SampleRecord],
    model: &ModelConfig,
    init: ModelParams<f32>,
    config: &TrainConfig,
    checkpoint_path: &Path,
    log_path: &Path,
) -> Result<TrainOutcome, TrainError> {
    let outcome = fit(samples, model, init, config)?;
    checkpoint::save(checkpoint_path, model, &outcome.params)?;
    write_trace(log_path, &outcome.trace)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamKind, Variant};

    fn scalar_params(kind: ParamKind, v: f32) -> ModelParams<f32> {
        let mut p = ModelParams::new();
        p.insert("theta".into(), Tensor::new(&[1], vec![v]).unwrap(), kind);
        p
    }

    fn grads(v: f32) -> IndexMap<String, Tensor<f32>> {
        [("theta".to_string(), Tensor::new(&[1], vec![v]).unwrap())].into_iter().collect()
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr_initial: lr,
            weight_decay: wd,
            ..TrainConfig::paper()
        }
    }

    #[test]
    fn adamw_hand_steps() {
        let c = cfg(0.1, 0.0);
        let mut p = scalar_params(ParamKind::Weight, 1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(1.0), &mut s, 0.1, &c).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 0.9).abs() < 1e-6);

        let c = cfg(0.1, 0.1);
        let mut p = scalar_params(ParamKind::Weight, 1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 0.1, &c).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 0.99).abs() < 1e-7);

        // embeddings skip decay
        let mut p = scalar_params(ParamKind::Embedding, 1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 0.1, &c).unwrap();
        assert_eq!(p.get("theta").unwrap().data()[0], 1.0);
    }

    #[test]
    fn adamw_zero_grad_fixed_point_and_missing() {
        let c = cfg(0.1, 0.0);
        let mut p = scalar_params(ParamKind::Bias, 0.25);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 0.1, &c).unwrap();
        assert_eq!(p.get("theta").unwrap().data()[0], 0.25);
        assert!(matches!(
            adamw_step(&mut p, &IndexMap::new(), &mut s, 0.1, &c),
            Err(TrainError::MissingGrad(_))
        ));
    }

    #[test]
    fn schedule_boundaries() {
        let c = TrainConfig::paper();
        assert_eq!(lr_at(0, &c), 1e-4);
        assert_eq!(lr_at(399, &c), 1e-4);
        assert!((lr_at(400, &c) - 1e-5).abs() < 1e-18);
        assert!((lr_at(499, &c) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        TrainConfig::paper().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        for bad in [
            TrainConfig { lr_drop_epoch: 600, ..TrainConfig::paper() },
            TrainConfig { lr_initial: 0.0, ..TrainConfig::paper() },
            TrainConfig { batch_size: 0, ..TrainConfig::paper() },
            TrainConfig { beta2: 1.0, ..TrainConfig::paper() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn loss_kind_names() {
        for k in [LossKind::Norm, LossKind::Px, LossKind::Img] {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("mse".parse::<LossKind>().is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let model = ModelConfig {
            in_channels: 3,
            token_dim: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_heads: 2,
            ffn_hidden: 4,
            height: 2,
            width: 2,
            variant: Variant::AttnQuery,
        };
        let init = crate::model::init_params(&model, 0).unwrap();
        let f = crate::feature_io::FeatureMap::zeros(3, 2, 2);
        let samples = vec![SampleRecord::unlabeled(f, "s")];
        let config = TrainConfig {
            epochs: 0,
            lr_drop_epoch: 0,
            ..TrainConfig::desk()
        };
        let out = fit(&samples, &model, init.clone(), &config).unwrap();
        assert_eq!(out.params, init);
        assert!(out.trace.is_empty());
        let px = TrainConfig {
            loss_kind: LossKind::Px,
            ..config
        };
        assert!(matches!(fit(&samples, &model, init, &px), Err(TrainError::MissingAnnotation { .. })));
    }
}
