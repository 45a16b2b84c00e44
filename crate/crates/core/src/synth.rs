//! Seeded feature-space benchmark: normal maps live on a low-rank channel
//! subspace with smooth spatial coefficients; anomalies displace a patch of
//! positions along directions orthogonal to that subspace.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::feature_io::{write_sample_file, DatasetManifest, DeclaredLabel, FeatureMap, FormatError, ManifestEntry, SampleRecord, Split};

/// Manifest holding the train split of normal samples plus the test split.
pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Same test split; the train split adds confetti-style labeled anomalies
/// for fine-tuning.
pub const AUX_MANIFEST_FILE: &str = "manifest_aux.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Labeled anomalies synthesized from fresh normal draws for the
    /// anomaly-available case. Written only to the auxiliary manifest.
    pub n_aux_anomalous: usize,
    pub basis_rank: usize,
    pub noise_std: f64,
    pub anomaly_patch: (usize, usize),
    pub anomaly_shift: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 16,
            width: 16,
            n_train: 200,
            n_test_normal: 50,
            n_test_anomalous: 50,
            n_aux_anomalous: 40,
            basis_rank: 4,
            noise_std: 0.05,
            anomaly_patch: (3, 6),
            anomaly_shift: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::Invalid(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("generator extents must be positive".into());
        }
        if self.basis_rank == 0 || self.basis_rank >= self.channels {
            return bad(format!(
                "basis_rank {} must be in 1..{} so anomalies have an orthogonal direction",
                self.basis_rank, self.channels
            ));
        }
        let (lo, hi) = self.anomaly_patch;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return bad(format!("anomaly patch sides {lo}..={hi} do not fit a {}×{} grid", self.height, self.width));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be a finite nonnegative number", self.noise_std));
        }
        if !self.anomaly_shift.is_finite() {
            return bad("anomaly_shift must be finite".into());
        }
        Ok(())
    }
}

/// Independent random streams derived from the config seed.
#[derive(Clone, Copy)]
enum Stream {
    Basis,
    Layout,
    Normal(usize),
    AnomalyBase(usize),
    AnomalyPatch(usize),
    ConfettiBase(usize),
    ConfettiPatch(usize),
}

fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let (kind, index) = match stream {
        Stream::Basis => (0u64, 0usize),
        Stream::Layout => (1, 0),
        Stream::Normal(i) => (2, i),
        Stream::AnomalyBase(i) => (3, i),
        Stream::AnomalyPatch(i) => (4, i),
        Stream::ConfettiBase(i) => (5, i),
        Stream::ConfettiPatch(i) => (6, i),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 40) | index as u64);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram–Schmidt on Gaussian draws; returns `rank` orthonormal channel
/// vectors.
pub fn normal_basis(config: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_for(config.seed, Stream::Basis);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(config.basis_rank);
    while basis.len() < config.basis_rank {
        let mut v = gaussian_vec(&mut rng, config.channels);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Random unit vector orthogonal to every basis vector.
fn orthogonal_direction(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], channels: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, channels);
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Separable low-frequency profile `A·cos(2π fy h/H + φy)·cos(2π fx w/W + φx)`.
#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    fy: f64,
    fx: f64,
    py: f64,
    px: f64,
}

impl Wave {
    fn draw(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let tau = std::f64::consts::TAU;
        Self {
            amp: amp * rng.gen_range(0.5..1.0),
            fy: rng.gen_range(0..=2) as f64,
            fx: rng.gen_range(0..=2) as f64,
            py: rng.gen_range(0.0..tau),
            px: rng.gen_range(0.0..tau),
        }
    }

    fn at(&self, h: usize, w: usize, height: usize, width: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        self.amp
            * (tau * self.fy * h as f64 / height as f64 + self.py).cos()
            * (tau * self.fx * w as f64 / width as f64 + self.px).cos()
    }
}

const LAYOUT_WAVES: usize = 2;
const LAYOUT_AMP: f64 = 1.0;
const SAMPLE_WAVES: usize = 2;
const SAMPLE_AMP: f64 = 0.5;

/// Coefficient fields for each basis direction: a layout shared by every
/// sample of the seed plus a per-draw variation.
fn coefficient_fields(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut layout_rng = rng_for(config.seed, Stream::Layout);
    let (h, w) = (config.height, config.width);
    (0..config.basis_rank)
        .map(|_| {
            let waves: Vec<Wave> = (0..LAYOUT_WAVES)
                .map(|_| Wave::draw(&mut layout_rng, LAYOUT_AMP))
                .chain((0..SAMPLE_WAVES).map(|_| Wave::draw(rng, SAMPLE_AMP)))
                .collect();
            let mut field = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    field.push(waves.iter().map(|wv| wv.at(y, x, h, w)).sum());
                }
            }
            field
        })
        .collect()
}

fn normal_features(config: &GeneratorConfig, basis: &[Vec<f64>], stream: Stream) -> FeatureMap {
    let mut rng = rng_for(config.seed, stream);
    let fields = coefficient_fields(config, &mut rng);
    let (c, h, w) = (config.channels, config.height, config.width);
    let positions = h * w;
    let mut values = vec![0.0f64; c * positions];
    for (field, b) in fields.iter().zip(basis) {
        for ch in 0..c {
            let plane = &mut values[ch * positions..(ch + 1) * positions];
            for (v, &a) in plane.iter_mut().zip(field) {
                *v += a * b[ch];
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("validated std");
        values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    FeatureMap::new(c, h, w, values.into_iter().map(|v| v as f32).collect()).expect("finite synthetic values")
}

fn labeled(features: FeatureMap, mask: Vec<u8>, id: String) -> SampleRecord {
    let label = u8::from(mask.contains(&1));
    SampleRecord {
        features,
        pixel_mask: Some(mask),
        image_label: Some(label),
        sample_id: id,
    }
}

/// Normal draw `index`; indices below `n_train` form the train split and the
/// rest the normal half of the test split.
pub fn gen_normal(config: &GeneratorConfig, index: usize) -> Result<SampleRecord, FormatError> {
    config.validate()?;
    let limit = config.n_train + config.n_test_normal;
    if index >= limit {
        return Err(FormatError::Invalid(format!("normal index {index} >= {limit}")));
    }
    let basis = normal_basis(config);
    let f = normal_features(config, &basis, Stream::Normal(index));
    let positions = f.positions();
    Ok(labeled(f, vec![0; positions], format!("normal_{index:04}")))
}

/// The normal map that anomalous sample `index` is built on.
pub fn anomaly_base(config: &GeneratorConfig, index: usize) -> Result<FeatureMap, FormatError> {
    config.validate()?;
    Ok(normal_features(config, &normal_basis(config), Stream::AnomalyBase(index)))
}

fn displace_rect(f: &mut FeatureMap, mask: &mut [u8], top: usize, left: usize, rows: usize, cols: usize, direction: &[f64], shift: f64) {
    let (h, w) = (f.height(), f.width());
    for y in top..top + rows {
        for x in left..left + cols {
            mask[y * w + x] = 1;
            for (ch, d) in direction.iter().enumerate() {
                let i = (ch * h + y) * w + x;
                f.data_mut()[i] += (shift * d) as f32;
            }
        }
    }
}

/// Anomalous test sample: one rectangular patch displaced by
/// `anomaly_shift` along a direction orthogonal to the normal subspace.
pub fn gen_anomalous(config: &GeneratorConfig, index: usize) -> Result<SampleRecord, FormatError> {
    config.validate()?;
    if index >= config.n_test_anomalous {
        return Err(FormatError::Invalid(format!(
            "anomalous index {index} >= {}",
            config.n_test_anomalous
        )));
    }
    let basis = normal_basis(config);
    let mut f = normal_features(config, &basis, Stream::AnomalyBase(index));
    let mut rng = rng_for(config.seed, Stream::AnomalyPatch(index));
    let (lo, hi) = config.anomaly_patch;
    let rows = rng.gen_range(lo..=hi);
    let cols = rng.gen_range(lo..=hi);
    let top = rng.gen_range(0..=config.height - rows);
    let left = rng.gen_range(0..=config.width - cols);
    let direction = orthogonal_direction(&mut rng, &basis, config.channels);
    let mut mask = vec![0u8; f.positions()];
    displace_rect(&mut f, &mut mask, top, left, rows, cols, &direction, config.anomaly_shift);
    let mut record = labeled(f, mask, format!("anomalous_{index:04}"));
    record.image_label = Some(1);
    Ok(record)
}

/// Confetti-style labeled anomaly for fine-tuning: a fresh normal draw with
/// one to four small rectangles, each displaced along its own orthogonal
/// direction.
pub fn gen_confetti(config: &GeneratorConfig, index: usize) -> Result<SampleRecord, FormatError> {
    config.validate()?;
    let basis = normal_basis(config);
    let mut f = normal_features(config, &basis, Stream::ConfettiBase(index));
    let mut rng = rng_for(config.seed, Stream::ConfettiPatch(index));
    let max_side = config.anomaly_patch.0.clamp(1, 3);
    let mut mask = vec![0u8; f.positions()];
    let pieces = rng.gen_range(1..=4);
    for _ in 0..pieces {
        let rows = rng.gen_range(1..=max_side);
        let cols = rng.gen_range(1..=max_side);
        let top = rng.gen_range(0..=config.height - rows);
        let left = rng.gen_range(0..=config.width - cols);
        let direction = orthogonal_direction(&mut rng, &basis, config.channels);
        displace_rect(&mut f, &mut mask, top, left, rows, cols, &direction, config.anomaly_shift);
    }
    let mut record = labeled(f, mask, format!("confetti_{index:04}"));
    record.image_label = Some(1);
    Ok(record)
}

fn write_entry(out_dir: &Path, rel: PathBuf, record: &SampleRecord, split: Split) -> Result<ManifestEntry, FormatError> {
    write_sample_file(&out_dir.join(&rel), record)?;
    Ok(ManifestEntry {
        path: rel,
        split,
        label: DeclaredLabel::from_label(record.image_label),
    })
}

/// Writes every sample plus [`MANIFEST_FILE`] and [`AUX_MANIFEST_FILE`] under
/// `out_dir`, returning the primary manifest.
pub fn build_benchmark(config: &GeneratorConfig, out_dir: &Path) -> Result<DatasetManifest, FormatError> {
    config.validate()?;
    for sub in ["train", "test", "aux"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|source| FormatError::Io { path: dir, source })?;
    }
    let mut train = Vec::new();
    for i in 0..config.n_train {
        let r = gen_normal(config, i)?;
        train.push(write_entry(out_dir, PathBuf::from(format!("train/{}.adtrft", r.sample_id)), &r, Split::Train)?);
    }
    let mut test = Vec::new();
    for i in 0..config.n_test_normal {
        let r = gen_normal(config, config.n_train + i)?;
        test.push(write_entry(out_dir, PathBuf::from(format!("test/{}.adtrft", r.sample_id)), &r, Split::Test)?);
    }
    for i in 0..config.n_test_anomalous {
        let r = gen_anomalous(config, i)?;
        test.push(write_entry(out_dir, PathBuf::from(format!("test/{}.adtrft", r.sample_id)), &r, Split::Test)?);
    }
    let mut aux = Vec::new();
    for i in 0..config.n_aux_anomalous {
        let r = gen_confetti(config, i)?;
        aux.push(write_entry(out_dir, PathBuf::from(format!("aux/{}.adtrft", r.sample_id)), &r, Split::Train)?);
    }

    let manifest = DatasetManifest {
        entries: train.iter().chain(&test).cloned().collect(),
        seed: config.seed,
        notes: "synthetic feature benchmark; train split holds normal samples only".into(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    let aux_manifest = DatasetManifest {
        entries: train.iter().chain(&aux).chain(&test).cloned().collect(),
        seed: config.seed,
        notes: "anomaly-available variant: train split adds confetti anomalies with pixel masks".into(),
    };
    aux_manifest.save(&out_dir.join(AUX_MANIFEST_FILE))?;
    Ok(manifest)
}
