//! Identity-shortcut experiment: a per-token affine reconstructor against a
//! single query-attention reconstructor `x̂ = softmax(q xᵀ/√C)·x`.
//!
//! Normal tokens are positional prototypes on a circle in a low-dimensional
//! subspace, plus a per-sample shared offset and isotropic noise, so the data
//! spans all channels. Anomalous samples displace a few tokens along
//! directions orthogonal to the subspace.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, TensorError, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ShortcutError {
    #[error("invalid shortcut config: {0}")]
    Config(String),
    #[error("empty sample set")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutConfig {
    /// Tokens per sample.
    pub tokens: usize,
    pub channels: usize,
    pub n_normal_train: usize,
    pub n_normal_test: usize,
    pub n_anomalous_test: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub prototype_scale: f64,
    pub shared_scale: f64,
    pub noise_std: f64,
    pub anomaly_shift: f64,
    /// Displaced tokens per anomalous sample.
    pub anomalous_tokens: usize,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            channels: 16,
            n_normal_train: 64,
            n_normal_test: 32,
            n_anomalous_test: 32,
            steps: 3000,
            lr: 0.02,
            seed: 0,
            prototype_scale: 2.0,
            shared_scale: 0.5,
            noise_std: 0.1,
            anomaly_shift: 2.0,
            anomalous_tokens: 4,
        }
    }
}

impl ShortcutConfig {
    pub fn validate(&self) -> Result<(), ShortcutError> {
        let counts = [
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("n_normal_train", self.n_normal_train),
            ("n_normal_test", self.n_normal_test),
            ("n_anomalous_test", self.n_anomalous_test),
            ("anomalous_tokens", self.anomalous_tokens),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ShortcutError::Config(format!("{name} must be positive")));
        }
        if self.channels < 8 {
            return Err(ShortcutError::Config("channels must be at least 8".into()));
        }
        if self.anomalous_tokens > self.tokens {
            return Err(ShortcutError::Config("anomalous_tokens exceeds tokens".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ShortcutError::Config("lr must be positive".into()));
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("shared_scale", self.shared_scale),
            ("noise_std", self.noise_std),
            ("anomaly_shift", self.anomaly_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ShortcutError::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Rank of the subspace that holds prototypes and shared offsets.
    pub fn subspace_rank(&self) -> usize {
        (self.channels / 4).max(2)
    }
}

/// A sample as a `K×C` row-major matrix.
pub type Tokens = Tensor<f64>;

#[derive(Debug, Clone)]
pub struct ShortcutData {
    pub train: Vec<Tokens>,
    pub test_normal: Vec<Tokens>,
    pub test_anomalous: Vec<Tokens>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// The first `rank` rows of a random orthogonal frame of R^C.
fn orthonormal_frame(rng: &mut impl Rng, channels: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while frame.len() < rank {
        let mut v = gaussian_vec(rng, channels);
        for b in &frame {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            frame.push(v);
        }
    }
    frame
}

fn orthogonal_to(rng: &mut impl Rng, frame: &[Vec<f64>], channels: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, channels);
        for b in frame {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

struct Generator<'a> {
    config: &'a ShortcutConfig,
    frame: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn normal(&self, rng: &mut impl Rng) -> Tokens {
        let c = self.config;
        let shared: Vec<f64> = (2..self.frame.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                c.shared_scale * z
            })
            .collect();
        let mut data = Vec::with_capacity(c.tokens * c.channels);
        for k in 0..c.tokens {
            let angle = std::f64::consts::TAU * k as f64 / c.tokens as f64;
            for ch in 0..c.channels {
                let proto = c.prototype_scale * (angle.cos() * self.frame[0][ch] + angle.sin() * self.frame[1][ch]);
                let offset: f64 = shared.iter().zip(&self.frame[2..]).map(|(a, b)| a * b[ch]).sum();
                data.push(proto + offset + self.noise.sample(rng));
            }
        }
        Tensor::new(&[c.tokens, c.channels], data).expect("positive extents")
    }

    fn anomalous(&self, rng: &mut impl Rng) -> Tokens {
        let c = self.config;
        let mut x = self.normal(rng);
        for k in sample_indices(rng, c.tokens, c.anomalous_tokens) {
            let dir = orthogonal_to(rng, &self.frame, c.channels);
            let row = &mut x.data_mut()[k * c.channels..(k + 1) * c.channels];
            row.iter_mut().zip(&dir).for_each(|(v, d)| *v += c.anomaly_shift * d);
        }
        x
    }
}

pub fn generate(config: &ShortcutConfig) -> Result<ShortcutData, ShortcutError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = Generator {
        config,
        frame: orthonormal_frame(&mut rng, config.channels, config.subspace_rank()),
        noise: Normal::new(0.0, config.noise_std).map_err(|e| ShortcutError::Config(e.to_string()))?,
    };
    let train = (0..config.n_normal_train).map(|_| g.normal(&mut rng)).collect();
    let test_normal = (0..config.n_normal_test).map(|_| g.normal(&mut rng)).collect();
    let test_anomalous = (0..config.n_anomalous_test).map(|_| g.anomalous(&mut rng)).collect();
    Ok(ShortcutData {
        train,
        test_normal,
        test_anomalous,
    })
}

/// Isotropic Gaussian tokens spanning all of R^C.
pub fn generate_full_rank(config: &ShortcutConfig, n: usize) -> Result<Vec<Tokens>, ShortcutError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    Ok((0..n)
        .map(|_| {
            Tensor::new(&[config.tokens, config.channels], gaussian_vec(&mut rng, config.tokens * config.channels))
                .expect("positive extents")
        })
        .collect())
}

/// Reconstructor under study.
pub trait Reconstructor {
    fn reconstruct(&self, x: &Tokens) -> Result<Tokens, ShortcutError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    /// `C×C`, applied as `x w + b`.
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAttentionModel {
    /// `K×C` learned queries.
    pub q: Tensor<f64>,
    pub trace: Vec<f64>,
}

fn affine_forward<'t>(x: Var<'t, f64>, w: Var<'t, f64>, b: Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> {
    x.matmul(w)?.add_bias(b)
}

fn attention_weights<'t, T: Scalar>(q: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    let c = T::from_usize(x.shape()[1]).expect("channel count fits");
    q.matmul(x.transpose()?)?.scale(T::one() / c.sqrt()).softmax_rows()
}

fn attention_forward<'t>(q: Var<'t, f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> {
    attention_weights(q, x)?.matmul(x)
}

impl Reconstructor for AffineModel {
    fn reconstruct(&self, x: &Tokens) -> Result<Tokens, ShortcutError> {
        let tape = Tape::new();
        let out = affine_forward(tape.constant(x.clone()), tape.constant(self.w.clone()), tape.constant(self.b.clone()))?;
        Ok(out.value())
    }
}

impl Reconstructor for QueryAttentionModel {
    fn reconstruct(&self, x: &Tokens) -> Result<Tokens, ShortcutError> {
        let tape = Tape::new();
        Ok(attention_forward(tape.constant(self.q.clone()), tape.constant(x.clone()))?.value())
    }
}

impl QueryAttentionModel {
    /// Mean Shannon entropy (nats) of the attention rows over `samples`.
    pub fn mean_row_entropy(&self, samples: &[Tokens]) -> Result<f64, ShortcutError> {
        if samples.is_empty() {
            return Err(ShortcutError::Empty);
        }
        let mut total = 0.0;
        let mut rows = 0usize;
        for x in samples {
            let tape = Tape::new();
            let a = attention_weights(tape.constant(self.q.clone()), tape.constant(x.clone()))?.value();
            for row in a.data().chunks_exact(x.shape()[0]) {
                total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
                rows += 1;
            }
        }
        Ok(total / rows as f64)
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("positive extents")
}

/// Full-batch Adam on one tensor list; returns the loss before each step.
fn adam<F>(params: &mut [Tensor<f64>], steps: usize, lr: f64, loss: F) -> Result<Vec<f64>, ShortcutError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut v = m.clone();
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let l = loss(&tape, &vars)?;
        trace.push(l.item());
        tape.backward(l)?;
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for (i, var) in vars.iter().enumerate() {
            let g = var.grad().expect("parameter reached by the loss");
            for (j, (theta, &gj)) in params[i].data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
                *theta -= lr * (m[i][j] / c1) / ((v[i][j] / c2).sqrt() + eps);
            }
        }
    }
    Ok(trace)
}

fn stacked(samples: &[Tokens]) -> Result<Tensor<f64>, ShortcutError> {
    let first = samples.first().ok_or(ShortcutError::Empty)?;
    let c = first.shape()[1];
    let data: Vec<f64> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    Ok(Tensor::new(&[data.len() / c, c], data)?)
}

/// Mean squared error per entry of `x w + b` against `x`.
pub fn train_affine(samples: &[Tokens], config: &ShortcutConfig) -> Result<AffineModel, ShortcutError> {
    config.validate()?;
    let x = stacked(samples)?;
    let c = x.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xaff1);
    let mut params = vec![uniform(&mut rng, &[c, c], 1.0 / (c as f64).sqrt()), Tensor::zeros(&[c])];
    let trace = adam(&mut params, config.steps, config.lr, |tape, p| {
        let xv = tape.constant(x.clone());
        affine_forward(xv, p[0], p[1])?.sub(xv).map(|d| d.square().mean_all())
    })?;
    let b = params.pop().expect("two tensors");
    let w = params.pop().expect("two tensors");
    Ok(AffineModel { w, b, trace })
}

/// Learns `q` so that `softmax(q xᵀ/√C)·x` reproduces each training sample
/// from its own tokens.
pub fn train_query_attention(samples: &[Tokens], config: &ShortcutConfig) -> Result<QueryAttentionModel, ShortcutError> {
    config.validate()?;
    let first = samples.first().ok_or(ShortcutError::Empty)?;
    let (k, c) = (first.shape()[0], first.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e4e);
    let mut params = vec![uniform(&mut rng, &[k, c], 0.1)];
    let inv = 1.0 / samples.len() as f64;
    let trace = adam(&mut params, config.steps, config.lr, |tape, p| {
        let mut total: Option<Var<'_, f64>> = None;
        for s in samples {
            let xv = tape.constant(s.clone());
            let err = attention_forward(p[0], xv)?.sub(xv)?.square().mean_all();
            total = Some(match total {
                Some(t) => t.add(err)?,
                None => err,
            });
        }
        Ok(total.expect("non-empty").scale(inv))
    })?;
    Ok(QueryAttentionModel {
        q: params.pop().expect("one tensor"),
        trace,
    })
}

/// Mean per-entry squared reconstruction error.
pub fn mean_mse(model: &dyn Reconstructor, samples: &[Tokens]) -> Result<f64, ShortcutError> {
    if samples.is_empty() {
        return Err(ShortcutError::Empty);
    }
    let mut total = 0.0;
    for x in samples {
        let r = model.reconstruct(x)?;
        total += r.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.numel() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub normal_mse: f64,
    pub anomalous_mse: f64,
    /// `anomalous_mse / normal_mse`; `None` when the normal error is zero.
    pub ratio: Option<f64>,
}

pub fn generalization_gap(model: &dyn Reconstructor, normal: &[Tokens], anomalous: &[Tokens]) -> Result<Gap, ShortcutError> {
    let normal_mse = mean_mse(model, normal)?;
    let anomalous_mse = mean_mse(model, anomalous)?;
    let ratio = (normal_mse > 0.0).then(|| anomalous_mse / normal_mse);
    Ok(Gap {
        normal_mse,
        anomalous_mse,
        ratio,
    })
}

fn frobenius_from_identity(w: &Tensor<f64>) -> f64 {
    let c = w.shape()[0];
    w.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let id = if i / c == i % c { 1.0 } else { 0.0 };
            (v - id).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub config: ShortcutConfig,
    pub affine_gap: Gap,
    pub attention_gap: Gap,
    /// `attention ratio / affine ratio`.
    pub ratio_of_ratios: Option<f64>,
    pub affine_identity_distance: f64,
    pub affine_bias_norm: f64,
    /// Same affine trainer on isotropic data spanning all channels.
    pub full_rank_identity_distance: f64,
    pub full_rank_bias_norm: f64,
    pub attention_row_entropy: f64,
    pub entropy_bound: f64,
    /// `1 - final / initial` normal training MSE.
    pub affine_mse_reduction: f64,
    pub attention_mse_reduction: f64,
    pub affine_trace: Vec<f64>,
    pub attention_trace: Vec<f64>,
}

impl ShortcutReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report fields serialize");
        s.push('\n');
        s
    }
}

pub fn run(config: &ShortcutConfig) -> Result<ShortcutReport, ShortcutError> {
    let data = generate(config)?;
    let affine = train_affine(&data.train, config)?;
    let attention = train_query_attention(&data.train, config)?;
    let affine_gap = generalization_gap(&affine, &data.test_normal, &data.test_anomalous)?;
    let attention_gap = generalization_gap(&attention, &data.test_normal, &data.test_anomalous)?;
    let ratio_of_ratios = match (attention_gap.ratio, affine_gap.ratio) {
        (Some(a), Some(b)) => Some(a / b),
        _ => None,
    };
    let full = generate_full_rank(config, config.n_normal_train)?;
    let full_affine = train_affine(&full, config)?;
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let reduction = |model: &dyn Reconstructor, trace: &[f64]| -> Result<f64, ShortcutError> {
        Ok(match trace.first() {
            Some(&initial) if initial > 0.0 => 1.0 - mean_mse(model, &data.train)? / initial,
            _ => 0.0,
        })
    };
    let affine_mse_reduction = reduction(&affine, &affine.trace)?;
    let attention_mse_reduction = reduction(&attention, &attention.trace)?;
    Ok(ShortcutReport {
        config: config.clone(),
        affine_gap,
        attention_gap,
        ratio_of_ratios,
        affine_identity_distance: frobenius_from_identity(&affine.w),
        affine_bias_norm: norm(&affine.b),
        full_rank_identity_distance: frobenius_from_identity(&full_affine.w),
        full_rank_bias_norm: norm(&full_affine.b),
        attention_row_entropy: attention.mean_row_entropy(&data.test_normal)?,
        entropy_bound: 0.75 * (config.tokens as f64).ln(),
        affine_mse_reduction,
        attention_mse_reduction,
        affine_trace: affine.trace,
        attention_trace: attention.trace,
    })
}
