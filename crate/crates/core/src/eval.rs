//! AUROC metrics, run reports and score-map export.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_io::SampleRecord;
use crate::losses::{self, LossConfig, LossError, ScoreMap};
use crate::model::{forward, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUROC needs both classes, got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("test split is empty")]
    Empty,
    #[error("sample {0} has no image label")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Probability that a random positive outscores a random negative, ties
/// counted half: Mann–Whitney U from midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the midrank sum of the positives keeps everything integral
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank (i+j+2)/2
        let doubled_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o] != 0).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u128, negatives as u128);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub image_auroc: f64,
    /// Absent when no test sample carries a pixel mask.
    pub pixel_auroc: Option<f64>,
    pub pixel_auroc_missing_masks: bool,
    pub pixel_resolution: String,
    pub per_sample: Vec<SampleScore>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report fields serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_json()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Score map and image score of one sample.
pub fn score_sample(
    sample: &SampleRecord,
    params: &ModelParams<f32>,
    model: &ModelConfig,
    loss: &LossConfig,
) -> Result<(ScoreMap, f64), EvalError> {
    let recon = forward(&sample.features, params, model)?;
    let d = losses::diff_map(&sample.features, &recon)?;
    let s = losses::score_map(&d)?;
    let score = f64::from(losses::image_score(&s, loss.pool_window)?);
    Ok((s, score))
}

/// Image AUROC over image scores and pixel AUROC over every score-map value
/// of mask-bearing samples, both at feature resolution.
pub fn evaluate(
    samples: &[SampleRecord],
    params: &ModelParams<f32>,
    model: &ModelConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<RunReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut missing_masks = false;
    for sample in samples {
        let label = sample.effective_label().ok_or_else(|| EvalError::Unlabeled(sample.sample_id.clone()))?;
        let (s, score) = score_sample(sample, params, model, loss)?;
        match &sample.pixel_mask {
            Some(mask) => {
                pixel_scores.extend(s.values.iter().map(|&v| f64::from(v)));
                pixel_labels.extend(mask.iter().copied());
            }
            None => missing_masks = true,
        }
        per_sample.push(SampleScore {
            id: sample.sample_id.clone(),
            score,
            label,
        });
    }
    let scores: Vec<f64> = per_sample.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = per_sample.iter().map(|s| s.label).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel_auroc = if pixel_scores.is_empty() {
        None
    } else {
        Some(auroc(&pixel_scores, &pixel_labels)?)
    };
    Ok(RunReport {
        model: model.clone(),
        loss: loss.clone(),
        seed,
        image_auroc,
        pixel_auroc,
        pixel_auroc_missing_masks: missing_masks,
        pixel_resolution: format!("feature grid {}x{}", model.height, model.width),
        per_sample,
    })
}

/// Binary PGM bytes of `s`, min–max normalized to 0..=255; constant maps
/// become all zeros.
pub fn score_map_pgm(s: &ScoreMap) -> Vec<u8> {
    let lo = s.values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = s.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = f64::from(hi) - f64::from(lo);
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(s.values.iter().map(|&v| {
        if range > 0.0 {
            ((f64::from(v) - f64::from(lo)) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn export_score_map(s: &ScoreMap, path: &Path) -> Result<(), EvalError> {
    fs::write(path, score_map_pgm(s)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClass { .. })));
        assert!(matches!(auroc(&[0.1], &[1, 0]), Err(EvalError::Length { .. })));
        assert!(auroc(&[f64::NAN, 0.0], &[1, 0]).is_err());
    }

    #[test]
    fn pgm_examples() {
        let s = ScoreMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = score_map_pgm(&s);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 85, 170, 255]);
        let c = ScoreMap::new(1, 3, vec![4.0; 3]).unwrap();
        let bytes = score_map_pgm(&c);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
    }
}
