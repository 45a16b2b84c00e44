//! Feature sample files (`ADTRFT01`), dataset manifests, and multi-scale
//! feature concatenation.
//!
//! Sample layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADTRFT01"
//! C, H, W  3 × u32
//! flags    u8       bit0 mask present, bit1 label present, other bits zero
//! label    u8       only if bit1; 0 or 1
//! mask     H·W × u8 only if bit0; 0 or 1, row-major
//! payload  C·H·W × f32, index (c·H + h)·W + w
//! ```

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 8] = b"ADTRFT01";
/// Bytes before the optional label, mask and payload sections.
pub const FIXED_HEADER_LEN: usize = 8 + 12 + 1;

const FLAG_MASK: u8 = 0b01;
const FLAG_LABEL: u8 = 0b10;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"ADTRFT01\"")]
    BadMagic,
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("reserved flag bits set: {0:#010b}")]
    BadFlags(u8),
    #[error("label byte {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("mask byte {value} at position {index} is not 0 or 1")]
    BadMaskByte { index: usize, value: u8 },
    #[error("non-finite value at payload index {index}")]
    NonFinite { index: usize },
    #[error("zero extent in header ({c}×{h}×{w})")]
    ZeroExtent { c: u32, h: u32, w: u32 },
    #[error("header extents {c}×{h}×{w} overflow the addressable size")]
    Oversize { c: u32, h: u32, w: u32 },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<FormatError>,
    },
}

impl FormatError {
    /// Stable short name of the error kind, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic => "bad-magic",
            FormatError::Truncated { .. } => "truncated",
            FormatError::TrailingBytes { .. } => "trailing-bytes",
            FormatError::BadFlags(_) => "bad-flags",
            FormatError::BadLabel(_) => "bad-label",
            FormatError::BadMaskByte { .. } => "bad-mask-byte",
            FormatError::NonFinite { .. } => "non-finite",
            FormatError::ZeroExtent { .. } => "zero-extent",
            FormatError::Oversize { .. } => "oversize",
            FormatError::Invalid(_) => "invalid-record",
            FormatError::Manifest { .. } => "bad-manifest",
            FormatError::Io { .. } => "io",
            FormatError::InFile { source, .. } => source.kind(),
        }
    }

    fn in_file(self, path: &Path) -> Self {
        FormatError::InFile {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

/// A C×H×W feature map stored row-major.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor<f32>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMap({}×{}×{})", self.channels(), self.height(), self.width())
    }
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self, FormatError> {
        let values = Tensor::new(&[channels, height, width], values).map_err(|e| FormatError::Invalid(e.to_string()))?;
        if let Some(index) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn from_tensor(values: Tensor<f32>) -> Result<Self, FormatError> {
        match values.shape() {
            [c, h, w] => Self::new(*c, *h, *w, values.into_data()),
            s => Err(FormatError::Invalid(format!("feature map needs rank 3, got shape {s:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.values.data_mut()
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height() + h) * self.width() + w
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data()[self.index(c, h, w)]
    }

    /// Channel vector at one spatial position.
    pub fn vector_at(&self, h: usize, w: usize) -> Vec<f32> {
        (0..self.channels()).map(|c| self.get(c, h, w)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub features: FeatureMap,
    /// H×W, 1 marks an anomalous position.
    pub pixel_mask: Option<Vec<u8>>,
    /// 1 marks an anomalous image.
    pub image_label: Option<u8>,
    /// Not stored in the file; filled from the file stem on read.
    pub sample_id: String,
}

impl SampleRecord {
    pub fn unlabeled(features: FeatureMap, sample_id: impl Into<String>) -> Self {
        Self {
            features,
            pixel_mask: None,
            image_label: None,
            sample_id: sample_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if let Some(index) = self.features.data().iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        if let Some(label) = self.image_label {
            if label > 1 {
                return Err(FormatError::BadLabel(label));
            }
        }
        if let Some(mask) = &self.pixel_mask {
            let positions = self.features.positions();
            if mask.len() != positions {
                return Err(FormatError::Invalid(format!(
                    "mask has {} entries, feature grid has {positions}",
                    mask.len()
                )));
            }
            if let Some(index) = mask.iter().position(|&b| b > 1) {
                return Err(FormatError::BadMaskByte { index, value: mask[index] });
            }
            if self.image_label == Some(0) && mask.contains(&1) {
                return Err(FormatError::Invalid("mask marks anomalous positions but image label is 0".into()));
            }
        }
        Ok(())
    }

    /// Image label, falling back to "any masked position" when only a mask
    /// is present.
    pub fn effective_label(&self) -> Option<u8> {
        self.image_label
            .or_else(|| self.pixel_mask.as_ref().map(|m| u8::from(m.contains(&1))))
    }

    pub fn encoded_len(&self) -> usize {
        let mut n = FIXED_HEADER_LEN + self.features.data().len() * 4;
        if self.image_label.is_some() {
            n += 1;
        }
        if self.pixel_mask.is_some() {
            n += self.features.positions();
        }
        n
    }
}

/// Serializes a validated record; nothing is written if validation fails.
pub fn write_sample(record: &SampleRecord, sink: &mut impl Write) -> Result<usize, FormatError> {
    record.validate()?;
    let bytes = encode_sample(record);
    sink.write_all(&bytes).map_err(|source| FormatError::Io {
        path: PathBuf::from("<sink>"),
        source,
    })?;
    Ok(bytes.len())
}

fn encode_sample(record: &SampleRecord) -> Vec<u8> {
    let f = &record.features;
    let mut out = Vec::with_capacity(record.encoded_len());
    out.extend_from_slice(SAMPLE_MAGIC);
    for extent in [f.channels(), f.height(), f.width()] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    let mut flags = 0;
    if record.pixel_mask.is_some() {
        flags |= FLAG_MASK;
    }
    if record.image_label.is_some() {
        flags |= FLAG_LABEL;
    }
    out.push(flags);
    if let Some(label) = record.image_label {
        out.push(label);
    }
    if let Some(mask) = &record.pixel_mask {
        out.extend_from_slice(mask);
    }
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_sample(source: &mut impl Read) -> Result<SampleRecord, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(|source| FormatError::Io {
        path: PathBuf::from("<stream>"),
        source,
    })?;
    decode_sample(&bytes)
}

/// Parses and validates one complete sample. Extents are checked against
/// the input length before anything is allocated.
pub fn decode_sample(bytes: &[u8]) -> Result<SampleRecord, FormatError> {
    if bytes.len() < SAMPLE_MAGIC.len() || &bytes[..8] != SAMPLE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: FIXED_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let extent = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let (c, h, w) = (extent(0), extent(1), extent(2));
    if c == 0 || h == 0 || w == 0 {
        return Err(FormatError::ZeroExtent { c, h, w });
    }
    let flags = bytes[20];
    if flags & !(FLAG_MASK | FLAG_LABEL) != 0 {
        return Err(FormatError::BadFlags(flags));
    }
    let oversize = FormatError::Oversize { c, h, w };
    let positions = (h as usize).checked_mul(w as usize).ok_or(FormatError::Oversize { c, h, w })?;
    let payload_len = positions
        .checked_mul(c as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or(oversize)?;
    let label_len = usize::from(flags & FLAG_LABEL != 0);
    let mask_len = if flags & FLAG_MASK != 0 { positions } else { 0 };
    let expected = FIXED_HEADER_LEN
        .checked_add(label_len + mask_len)
        .and_then(|n| n.checked_add(payload_len))
        .ok_or(FormatError::Oversize { c, h, w })?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }

    let mut at = FIXED_HEADER_LEN;
    let image_label = if label_len == 1 {
        let label = bytes[at];
        if label > 1 {
            return Err(FormatError::BadLabel(label));
        }
        at += 1;
        Some(label)
    } else {
        None
    };
    let pixel_mask = if mask_len > 0 {
        let mask = &bytes[at..at + mask_len];
        if let Some(index) = mask.iter().position(|&b| b > 1) {
            return Err(FormatError::BadMaskByte { index, value: mask[index] });
        }
        at += mask_len;
        Some(mask.to_vec())
    } else {
        None
    };
    let mut values = Vec::with_capacity(payload_len / 4);
    for (index, chunk) in bytes[at..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite { index });
        }
        values.push(v);
    }
    let record = SampleRecord {
        features: FeatureMap::new(c as usize, h as usize, w as usize, values)?,
        pixel_mask,
        image_label,
        sample_id: String::new(),
    };
    record.validate()?;
    Ok(record)
}

pub fn write_sample_file(path: &Path, record: &SampleRecord) -> Result<usize, FormatError> {
    record.validate().map_err(|e| e.in_file(path))?;
    let bytes = encode_sample(record);
    fs::write(path, &bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.len())
}

/// Reads a sample and names it after the file stem.
pub fn read_sample_file(path: &Path) -> Result<SampleRecord, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut record = decode_sample(&bytes).map_err(|e| e.in_file(path))?;
    record.sample_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeclaredLabel {
    Normal,
    Anomalous,
    Unlabeled,
}

impl DeclaredLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DeclaredLabel::Normal => "normal",
            DeclaredLabel::Anomalous => "anomalous",
            DeclaredLabel::Unlabeled => "unlabeled",
        }
    }

    pub fn from_label(label: Option<u8>) -> Self {
        match label {
            Some(0) => DeclaredLabel::Normal,
            Some(_) => DeclaredLabel::Anomalous,
            None => DeclaredLabel::Unlabeled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub label: DeclaredLabel,
}

/// Ordered list of sample files. Besides the tab-separated records, the text
/// form carries `# seed=<n>` and `# notes: <text>` comment lines; other
/// `#` lines and blank lines are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub notes: String,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut manifest = DatasetManifest::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |detail: String| FormatError::Manifest { line: line_no, detail };
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(seed) = comment.strip_prefix("seed=") {
                    manifest.seed = seed.trim().parse().map_err(|_| err(format!("bad seed {seed:?}")))?;
                } else if let Some(notes) = comment.strip_prefix("notes:") {
                    if !manifest.notes.is_empty() {
                        manifest.notes.push('\n');
                    }
                    manifest.notes.push_str(notes.trim());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, split, label] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            if path.is_empty() {
                return Err(err("empty path".into()));
            }
            let path = PathBuf::from(path);
            if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(err(format!("path {path:?} must be relative and stay inside the dataset")));
            }
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err(format!("unknown split {other:?}"))),
            };
            let label = match label {
                "normal" => DeclaredLabel::Normal,
                "anomalous" => DeclaredLabel::Anomalous,
                "unlabeled" => DeclaredLabel::Unlabeled,
                other => return Err(err(format!("unknown label {other:?}"))),
            };
            if !seen.insert(path.clone()) {
                return Err(err(format!("duplicate path {path:?}")));
            }
            manifest.entries.push(ManifestEntry { path, split, label });
        }
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for line in self.notes.lines() {
            out.push_str(&format!("# notes: {line}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.to_string_lossy(),
                e.split.as_str(),
                e.label.as_str()
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_text()).map_err(|source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every record of `split`, resolving paths against `base`.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<SampleRecord>, FormatError> {
        self.split(split).map(|e| load_entry(base, e)).collect()
    }

    /// Reads every referenced file and checks it against its declared label.
    pub fn validate_files(&self, base: &Path) -> Result<usize, FormatError> {
        for e in &self.entries {
            load_entry(base, e)?;
        }
        Ok(self.entries.len())
    }
}

fn load_entry(base: &Path, entry: &ManifestEntry) -> Result<SampleRecord, FormatError> {
    let path = base.join(&entry.path);
    let record = read_sample_file(&path)?;
    let consistent = match (entry.label, record.effective_label()) {
        (DeclaredLabel::Unlabeled, _) | (_, None) => true,
        (DeclaredLabel::Normal, Some(l)) => l == 0,
        (DeclaredLabel::Anomalous, Some(l)) => l == 1,
    };
    if !consistent {
        return Err(FormatError::Invalid(format!("declared {} but file says otherwise", entry.label.as_str())).in_file(&path));
    }
    Ok(record)
}

/// Bilinear resize of one channel plane with pixel-center alignment.
fn resize_plane(src: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize, out: &mut Vec<f32>) {
    if in_h == out_h && in_w == out_w {
        out.extend_from_slice(src);
        return;
    }
    let coords = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    for y in 0..out_h {
        let (y0, y1, ty) = coords(y, in_h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = coords(x, in_w, out_w);
            let a = src[y0 * in_w + x0];
            let b = src[y0 * in_w + x1];
            let c = src[y1 * in_w + x0];
            let d = src[y1 * in_w + x1];
            // difference form keeps constant regions exact
            let top = a + tx * (b - a);
            let bottom = c + tx * (d - c);
            out.push(top + ty * (bottom - top));
        }
    }
}

/// Resizes every map to `target_h`×`target_w` and stacks their channels in
/// list order.
pub fn concat_multiscale(maps: &[FeatureMap], target_h: usize, target_w: usize) -> Result<FeatureMap, FormatError> {
    if maps.is_empty() {
        return Err(FormatError::Invalid("concat_multiscale needs at least one map".into()));
    }
    if target_h == 0 || target_w == 0 {
        return Err(FormatError::Invalid("target size must be positive".into()));
    }
    let channels: usize = maps.iter().map(FeatureMap::channels).sum();
    let mut values = Vec::with_capacity(channels * target_h * target_w);
    for m in maps {
        let plane = m.positions();
        for c in 0..m.channels() {
            resize_plane(&m.data()[c * plane..(c + 1) * plane], m.height(), m.width(), target_h, target_w, &mut values);
        }
    }
    FeatureMap::new(channels, target_h, target_w, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SampleRecord {
        SampleRecord::unlabeled(FeatureMap::zeros(1, 1, 1), "tiny")
    }

    #[test]
    fn minimal_record_is_25_bytes() {
        let mut buf = Vec::new();
        assert_eq!(write_sample(&tiny(), &mut buf).unwrap(), 25);
        assert_eq!(buf.len(), 25);
        assert_eq!(&buf[..8], b"ADTRFT01");
        assert_eq!(&buf[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(buf[20], 0);
    }

    #[test]
    fn mask_mismatch_writes_nothing() {
        let mut r = tiny();
        r.pixel_mask = Some(vec![0, 0]);
        let mut buf = Vec::new();
        assert!(write_sample(&r, &mut buf).is_err());
        assert!(buf.is_empty());
    }

    #[test]
    fn positive_mask_with_normal_label_is_invalid() {
        let mut r = tiny();
        r.pixel_mask = Some(vec![1]);
        r.image_label = Some(0);
        assert!(matches!(r.validate(), Err(FormatError::Invalid(_))));
        r.image_label = Some(1);
        r.validate().unwrap();
    }

    #[test]
    fn empty_stream_is_bad_magic() {
        let mut empty: &[u8] = &[];
        assert!(matches!(read_sample(&mut empty), Err(FormatError::BadMagic)));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let mut r = SampleRecord::unlabeled(FeatureMap::new(2, 2, 2, (0..8).map(|v| v as f32).collect()).unwrap(), "x");
        r.pixel_mask = Some(vec![0, 1, 0, 0]);
        r.image_label = Some(1);
        let mut buf = Vec::new();
        let n = write_sample(&r, &mut buf).unwrap();
        assert_eq!(n, 21 + 1 + 4 + 32);
        buf.truncate(40);
        match decode_sample(&buf) {
            Err(FormatError::Truncated { expected, found }) => {
                assert_eq!(expected, 58);
                assert_eq!(found, 40);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let mut r = tiny();
        r.pixel_mask = Some(vec![0]);
        r.image_label = Some(0);
        let mut good = Vec::new();
        write_sample(&r, &mut good).unwrap();
        decode_sample(&good).unwrap();

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_sample(&trailing), Err(FormatError::TrailingBytes { extra: 1 })));

        let mut flags = good.clone();
        flags[20] |= 0b100;
        assert!(matches!(decode_sample(&flags), Err(FormatError::BadFlags(_))));

        let mut label = good.clone();
        label[21] = 2;
        assert!(matches!(decode_sample(&label), Err(FormatError::BadLabel(2))));

        let mut mask = good.clone();
        mask[22] = 7;
        assert!(matches!(decode_sample(&mask), Err(FormatError::BadMaskByte { index: 0, value: 7 })));

        let mut nan = good.clone();
        nan[23..27].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_sample(&nan), Err(FormatError::NonFinite { index: 0 })));

        let mut zero = good;
        zero[8] = 0;
        assert!(matches!(decode_sample(&zero), Err(FormatError::ZeroExtent { .. })));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = b"ADTRFT01".to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        bytes.push(0);
        assert!(matches!(
            decode_sample(&bytes),
            Err(FormatError::Truncated { .. } | FormatError::Oversize { .. })
        ));
    }

    #[test]
    fn manifest_parse_and_render() {
        let text = "# seed=42\n# notes: synthetic\ntrain/a.adtrft\ttrain\tnormal\ntest/b.adtrft\ttest\tanomalous\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.seed, 42);
        assert_eq!(m.notes, "synthetic");
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].label, DeclaredLabel::Anomalous);
        assert_eq!(m.to_text(), text);
    }

    #[test]
    fn manifest_rejects_bad_lines() {
        for bad in [
            "a\ttrain\n",
            "a\tval\tnormal\n",
            "a\ttrain\tweird\n",
            "a\ttrain\tnormal\na\ttest\tnormal\n",
            "/abs\ttrain\tnormal\n",
            "../up\ttrain\tnormal\n",
        ] {
            assert!(DatasetManifest::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn concat_identity_and_order() {
        let a = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = FeatureMap::new(1, 2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let same = concat_multiscale(std::slice::from_ref(&a), 2, 2).unwrap();
        assert_eq!(same, a);
        let both = concat_multiscale(&[a, b], 2, 2).unwrap();
        assert_eq!(both.channels(), 2);
        assert_eq!(both.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(concat_multiscale(&[], 2, 2).is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let c = FeatureMap::new(1, 2, 2, vec![0.3; 4]).unwrap();
        let up = concat_multiscale(&[c], 4, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bilinear_upsample_values() {
        // 1×2 → 1×4 with pixel-center alignment: source coords -0.25, 0.25, 0.75, 1.25
        let m = FeatureMap::new(1, 1, 2, vec![0.0, 4.0]).unwrap();
        let up = concat_multiscale(&[m], 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
