//! Reconstruction objectives and anomaly scores.
//!
//! Training losses are built on the tape over `K×C` token matrices so they can
//! be differentiated; the plain functions evaluate the same graphs on
//! constants, so scoring and training never disagree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, TensorError, Var};
use crate::feature_io::FeatureMap;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("pool window {window} must be odd and at most 2·min(H, W) = {limit}")]
    Window { window: usize, limit: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the push term.
    pub alpha: f64,
    /// Number of largest φ values pooled into the image score.
    pub k: usize,
    /// Average-pool window for the image anomaly score.
    pub pool_window: usize,
    /// Floor for the argument of `log(1 − exp(−x))`.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.003,
            k: 20,
            pool_window: 3,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(LossError::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.k == 0 {
            return Err(LossError::Config("k must be at least 1".into()));
        }
        if self.pool_window == 0 || self.pool_window % 2 == 0 {
            return Err(LossError::Config(format!("pool_window {} must be odd", self.pool_window)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(LossError::Config(format!("epsilon {} must lie in (0, 1e-3)", self.epsilon)));
        }
        Ok(())
    }
}

/// Nonnegative H×W map; used for both the score map `s(u)` and the
/// pseudo-Huber map `φ(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

pub type ScoreMap = SpatialMap;
pub type HuberMap = SpatialMap;

impl SpatialMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, LossError> {
        if values.len() != height * width {
            return Err(LossError::Shape(vec![values.len()], vec![height, width]));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, h: usize, w: usize) -> f32 {
        self.values[h * self.width + w]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

fn check_same<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<(), LossError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(LossError::Shape(sa, sb));
    }
    Ok(())
}

/// `‖f − f̂‖² / K` over `K×C` tokens. The normalizer is the number of
/// positions only, not positions × channels.
pub fn loss_norm_tokens<'t, T: Scalar>(f: Var<'t, T>, f_hat: Var<'t, T>) -> Result<Var<'t, T>, LossError> {
    check_same(&f, &f_hat)?;
    let positions = f.shape()[0];
    Ok(f.sub(f_hat)?.square().sum_all().scale(T::one() / lit::<T>(positions as f64)))
}

/// `φ(u) = √(m(u)² + 1) − 1` with `m(u)` the channel mean of `|d(:, u)|`,
/// from a `K×C` token difference. Returns a length-K vector.
pub fn pseudo_huber_tokens<'t, T: Scalar>(d: Var<'t, T>) -> Result<Var<'t, T>, LossError> {
    let m = d.abs().mean_axis(1)?;
    Ok(m.square().add_scalar(T::one()).sqrt()?.add_scalar(-T::one()))
}

/// `−α·log(clamp(1 − exp(−x), ε, 1))`.
fn push_term<'t, T: Scalar>(x: Var<'t, T>, alpha: f64, epsilon: f64) -> Result<Var<'t, T>, LossError> {
    let inner = x.neg().exp()?.neg().add_scalar(T::one());
    let clamped = inner.clamp(lit(epsilon), T::one());
    Ok(clamped.log()?.scale(lit(-alpha)))
}

/// Push-pull loss: mean of `(1 − y)·φ` minus `α·log(1 − exp(−mean(y·φ)))`.
/// Both means run over all positions.
pub fn loss_px_tokens<'t, T: Scalar>(
    tape: &'t Tape<T>,
    phi: Var<'t, T>,
    mask: &[u8],
    alpha: f64,
    epsilon: f64,
) -> Result<Var<'t, T>, LossError> {
    let k = phi.shape()[0];
    if mask.len() != k {
        return Err(LossError::Shape(vec![mask.len()], vec![k]));
    }
    let y: Vec<T> = mask.iter().map(|&b| if b != 0 { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let y = tape.constant(Tensor::new(&[k], y)?);
    let not_y = tape.constant(Tensor::new(&[k], not_y)?);
    let pull = phi.mul(not_y)?.mean_all();
    let anomalous = phi.mul(y)?.mean_all();
    Ok(pull.add(push_term(anomalous, alpha, epsilon)?)?)
}

/// Mean of the `k` largest φ values.
pub fn topk_score_tokens<'t, T: Scalar>(phi: Var<'t, T>, k: usize) -> Result<Var<'t, T>, LossError> {
    Ok(phi.topk_mean(k)?)
}

/// `(1 − y)·q − α·y·log(1 − exp(−q))`; for `y = 0` this is `q` itself.
pub fn loss_img_tokens<'t, T: Scalar>(q: Var<'t, T>, label: u8, alpha: f64, epsilon: f64) -> Result<Var<'t, T>, LossError> {
    if label == 0 {
        Ok(q)
    } else {
        push_term(q, alpha, epsilon)
    }
}

fn feature_tensor<T: Scalar>(f: &FeatureMap) -> Tensor<T> {
    f.tensor().cast()
}

fn check_maps(f: &FeatureMap, g: &FeatureMap) -> Result<(), LossError> {
    let (a, b) = (f.tensor().shape(), g.tensor().shape());
    if a != b {
        return Err(LossError::Shape(a.to_vec(), b.to_vec()));
    }
    Ok(())
}

pub fn loss_norm(f: &FeatureMap, f_hat: &FeatureMap) -> Result<f64, LossError> {
    check_maps(f, f_hat)?;
    let tape = Tape::<f64>::new();
    let to_tokens = |m: &FeatureMap| -> Result<Var<'_, f64>, LossError> {
        let c = m.channels();
        Ok(tape.constant(feature_tensor(m)).reshape(&[c, m.positions()])?.transpose()?)
    };
    Ok(loss_norm_tokens(to_tokens(f)?, to_tokens(f_hat)?)?.item())
}

/// Signed difference `f − f̂`, C×H×W.
pub fn diff_map(f: &FeatureMap, f_hat: &FeatureMap) -> Result<Tensor<f32>, LossError> {
    check_maps(f, f_hat)?;
    let values = f.data().iter().zip(f_hat.data()).map(|(a, b)| a - b).collect();
    Ok(Tensor::new(f.tensor().shape(), values)?)
}

fn chw(d: &Tensor<f32>) -> Result<(usize, usize, usize), LossError> {
    match d.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(LossError::Shape(s.to_vec(), vec![0, 0, 0])),
    }
}

/// `s(u) = ‖d(:, u)‖₂`.
pub fn score_map(d: &Tensor<f32>) -> Result<ScoreMap, LossError> {
    let (c, h, w) = chw(d)?;
    let k = h * w;
    let values = (0..k)
        .map(|u| {
            let sq: f64 = (0..c).map(|ch| f64::from(d.data()[ch * k + u]).powi(2)).sum();
            sq.sqrt() as f32
        })
        .collect();
    SpatialMap::new(h, w, values)
}

/// Half-sample symmetric reflection of an out-of-range index; valid for
/// offsets up to `n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r as usize
}

/// Stride-1 mean pool with symmetric reflection at the borders.
pub fn average_pool(s: &SpatialMap, window: usize) -> Result<SpatialMap, LossError> {
    let limit = 2 * s.height.min(s.width);
    if window == 0 || window % 2 == 0 || window > limit {
        return Err(LossError::Window { window, limit });
    }
    let r = (window / 2) as isize;
    let area = (window * window) as f64;
    let mut out = Vec::with_capacity(s.values.len());
    for y in 0..s.height as isize {
        for x in 0..s.width as isize {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                let yy = reflect(y + dy, s.height);
                for dx in -r..=r {
                    acc += f64::from(s.get(yy, reflect(x + dx, s.width)));
                }
            }
            out.push((acc / area) as f32);
        }
    }
    SpatialMap::new(s.height, s.width, out)
}

/// Image anomaly score: maximum of the average-pooled score map.
pub fn image_score(s: &ScoreMap, pool_window: usize) -> Result<f32, LossError> {
    Ok(average_pool(s, pool_window)?.max())
}

fn difference_tokens<'t>(tape: &'t Tape<f64>, d: &Tensor<f32>) -> Result<Var<'t, f64>, LossError> {
    let (c, h, w) = chw(d)?;
    Ok(tape.constant(d.cast()).reshape(&[c, h * w])?.transpose()?)
}

pub fn pseudo_huber(d: &Tensor<f32>) -> Result<HuberMap, LossError> {
    let (_, h, w) = chw(d)?;
    let tape = Tape::<f64>::new();
    let phi = pseudo_huber_tokens(difference_tokens(&tape, d)?)?;
    SpatialMap::new(h, w, phi.value().data().iter().map(|&v| v as f32).collect())
}

fn phi_var<'t>(tape: &'t Tape<f64>, phi: &HuberMap) -> Result<Var<'t, f64>, LossError> {
    let values: Vec<f64> = phi.values.iter().map(|&v| f64::from(v)).collect();
    Ok(tape.constant(Tensor::new(&[values.len()], values)?))
}

pub fn loss_px(phi: &HuberMap, mask: &[u8], config: &LossConfig) -> Result<f64, LossError> {
    let tape = Tape::<f64>::new();
    let p = phi_var(&tape, phi)?;
    Ok(loss_px_tokens(&tape, p, mask, config.alpha, config.epsilon)?.item())
}

pub fn topk_score(phi: &HuberMap, k: usize) -> Result<f64, LossError> {
    let tape = Tape::<f64>::new();
    Ok(topk_score_tokens(phi_var(&tape, phi)?, k)?.item())
}

pub fn loss_img(q: f64, label: u8, config: &LossConfig) -> Result<f64, LossError> {
    if !(q >= 0.0) {
        return Err(LossError::Config(format!("image score {q} must be nonnegative")));
    }
    let tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::scalar(q));
    Ok(loss_img_tokens(q, label, config.alpha, config.epsilon)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, v: Vec<f32>) -> FeatureMap {
        FeatureMap::new(c, h, w, v).unwrap()
    }

    #[test]
    fn pool_examples() {
        let s = SpatialMap::new(3, 3, vec![0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(image_score(&s, 3).unwrap(), 1.0);
        assert_eq!(image_score(&s, 1).unwrap(), 9.0);
        let c = SpatialMap::new(3, 3, vec![2.5; 9]).unwrap();
        for w in [1, 3, 5] {
            assert_eq!(image_score(&c, w).unwrap(), 2.5);
        }
        assert!(image_score(&c, 7).is_err());
        assert!(image_score(&c, 2).is_err());
    }

    #[test]
    fn score_map_pythagorean() {
        let d = Tensor::new(&[2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(score_map(&d).unwrap().values, vec![5.0]);
    }

    #[test]
    fn diff_map_sign() {
        let a = map(1, 1, 2, vec![3.0, 0.5]);
        let b = map(1, 1, 2, vec![1.0, 0.5]);
        assert_eq!(diff_map(&a, &b).unwrap().data(), &[2.0, 0.0]);
        assert_eq!(diff_map(&b, &a).unwrap().data(), &[-2.0, 0.0]);
        assert!(diff_map(&a, &map(2, 1, 1, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn loss_config_validation() {
        LossConfig::default().validate().unwrap();
        for bad in [
            LossConfig { alpha: 0.0, ..Default::default() },
            LossConfig { k: 0, ..Default::default() },
            LossConfig { pool_window: 4, ..Default::default() },
            LossConfig { epsilon: 1e-2, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn loss_img_rejects_negative_score() {
        assert!(loss_img(-0.1, 1, &LossConfig::default()).is_err());
    }
}
