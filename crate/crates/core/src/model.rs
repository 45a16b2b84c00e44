//! Transformer feature reconstructor and its ablation variants.
//!
//! Feature maps are split into `H·W` tokens, reduced from `C_in` to `D`
//! channels by a per-token affine map, encoded by self-attention layers,
//! decoded from a learned query embedding with cross-attention over the
//! encoder memory, and restored to `C_in` channels. Position embeddings are
//! added to attention queries and keys in every attention layer, never to
//! values.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{concat, Tape, TensorError, Var};
use crate::feature_io::FeatureMap;
use crate::tensor::{lit, Scalar, Tensor};

/// Upper bound on any configured width or grid extent.
pub const MAX_EXTENT: usize = 1 << 16;
pub const MAX_LAYERS: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature map {got:?} does not match configured C×H×W {expected:?}")]
    InputMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model: attention layers, decoder driven by the query embedding.
    AttnQuery,
    /// Every attention replaced by per-token concatenation and projection.
    NoAttn,
    /// Decoder queries are the encoder output; no query embedding.
    NoQuery,
    /// Per-position affine+ReLU stack with a matched parameter budget.
    CnnBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::AttnQuery, Variant::NoAttn, Variant::NoQuery, Variant::CnnBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AttnQuery => "attn_query",
            Variant::NoAttn => "no_attn",
            Variant::NoQuery => "no_query",
            Variant::CnnBaseline => "cnn_baseline",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::AttnQuery => 0,
            Variant::NoAttn => 1,
            Variant::NoQuery => 2,
            Variant::CnnBaseline => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected attn_query, no_attn, no_query or cnn_baseline)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub token_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub height: usize,
    pub width: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size architecture: 720 input channels reduced to 256, four
    /// encoder and four decoder layers, eight heads, FFN 256→1024→256.
    pub fn paper(height: usize, width: usize) -> Self {
        Self {
            in_channels: 720,
            token_dim: 256,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            n_heads: 8,
            ffn_hidden: 1024,
            height,
            width,
            variant: Variant::AttnQuery,
        }
    }

    /// Small architecture that trains on one CPU core in minutes.
    pub fn desk(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            token_dim: 16,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
            height,
            width,
            variant: Variant::AttnQuery,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("in_channels", self.in_channels),
            ("token_dim", self.token_dim),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if let Some((name, v)) = positive.iter().find(|(_, v)| *v > MAX_EXTENT) {
            return Err(ModelError::Config(format!("{name} = {v} exceeds {MAX_EXTENT}")));
        }
        if self.n_encoder_layers > MAX_LAYERS || self.n_decoder_layers > MAX_LAYERS {
            return Err(ModelError::Config(format!("at most {MAX_LAYERS} layers per stack")));
        }
        if self.token_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "token_dim {} is not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        if self.variant != Variant::CnnBaseline && self.n_decoder_layers == 0 {
            return Err(ModelError::Config("transformer variants need at least one decoder layer".into()));
        }
        Ok(())
    }
}

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
}

impl ParamKind {
    /// Decoupled weight decay applies to affine weights and biases only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Every learnable tensor, keyed by name in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub(crate) fn insert(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind) {
        let old = self.entries.insert(name, Param { tensor, kind });
        debug_assert!(old.is_none(), "duplicate parameter name");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape`; `trainable` decides whether their
    /// gradients are tracked.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.tensor.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Pairs `names` with already-recorded vars, in order.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var<'t, T>]) -> Self {
        Self {
            vars: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after backward, keyed like the parameters. Parameters the
    /// loss never reached are absent.
    pub fn grads(&self) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Name, shape and kind of one parameter, before initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Default)]
struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.specs.push(ParamSpec { name, shape, kind });
    }

    fn affine(&mut self, name: &str, inp: usize, out: usize) {
        self.push(format!("{name}.weight"), vec![inp, out], ParamKind::Weight);
        self.push(format!("{name}.bias"), vec![out], ParamKind::Bias);
    }

    fn norm(&mut self, name: &str, width: usize) {
        self.push(format!("{name}.gain"), vec![width], ParamKind::NormGain);
        self.push(format!("{name}.bias"), vec![width], ParamKind::NormBias);
    }

    fn attention(&mut self, name: &str, d: usize, mix: bool) {
        if mix {
            self.affine(&format!("{name}.mix"), 2 * d, d);
        } else {
            for proj in ["q", "k", "v", "o"] {
                self.affine(&format!("{name}.{proj}"), d, d);
            }
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.affine(&format!("{name}.fc1"), d, hidden);
        self.affine(&format!("{name}.fc2"), hidden, d);
    }
}

/// Affine widths of the baseline stack: `C_in → h → h → h → C_in`.
pub fn cnn_baseline_widths(config: &ModelConfig) -> Vec<usize> {
    let target = transformer_param_count(config) as f64;
    let c = config.in_channels as f64;
    // params(h) = 2h² + (2c + 3)h + c
    let (a, b, k) = (2.0, 2.0 * c + 3.0, c - target);
    let h = ((-b + (b * b - 4.0 * a * k).sqrt()) / (2.0 * a)).round().max(1.0) as usize;
    vec![config.in_channels, h, h, h, config.in_channels]
}

/// Parameter count of the full attention+query transformer for `config`.
pub fn transformer_param_count(config: &ModelConfig) -> usize {
    let (c, d, f, k) = (config.in_channels, config.token_dim, config.ffn_hidden, config.tokens());
    let affine = |i: usize, o: usize| i * o + o;
    let attn = 4 * affine(d, d);
    let ffn = affine(d, f) + affine(f, d);
    let norm = 2 * d;
    let enc = attn + ffn + 2 * norm;
    let dec = 2 * attn + ffn + 3 * norm;
    affine(c, d) + affine(d, c) + 2 * k * d + config.n_encoder_layers * enc + config.n_decoder_layers * dec
}

/// Parameters of `config` in canonical order.
pub fn param_layout(config: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    config.validate()?;
    let mut l = Layout::default();
    let (c, d, k) = (config.in_channels, config.token_dim, config.tokens());
    if config.variant == Variant::CnnBaseline {
        let widths = cnn_baseline_widths(config);
        for (i, pair) in widths.windows(2).enumerate() {
            l.affine(&format!("cnn.{i}"), pair[0], pair[1]);
        }
        return Ok(l.specs);
    }
    let mix = config.variant == Variant::NoAttn;
    l.affine("reduce", c, d);
    l.push("pos_embed".into(), vec![k, d], ParamKind::Embedding);
    if config.variant != Variant::NoQuery {
        l.push("query_embed".into(), vec![k, d], ParamKind::Embedding);
    }
    for i in 0..config.n_encoder_layers {
        l.attention(&format!("enc.{i}.self_attn"), d, mix);
        l.norm(&format!("enc.{i}.norm1"), d);
        l.ffn(&format!("enc.{i}.ffn"), d, config.ffn_hidden);
        l.norm(&format!("enc.{i}.norm2"), d);
    }
    for i in 0..config.n_decoder_layers {
        l.attention(&format!("dec.{i}.self_attn"), d, mix);
        l.norm(&format!("dec.{i}.norm1"), d);
        l.attention(&format!("dec.{i}.cross_attn"), d, mix);
        l.norm(&format!("dec.{i}.norm2"), d);
        l.ffn(&format!("dec.{i}.ffn"), d, config.ffn_hidden);
        l.norm(&format!("dec.{i}.norm3"), d);
    }
    l.affine("restore", d, c);
    Ok(l.specs)
}

/// Parameters of `config` with every tensor zero.
pub fn zero_params(config: &ModelConfig) -> Result<ModelParams<f32>, ModelError> {
    let mut params = ModelParams::new();
    for spec in param_layout(config)? {
        params.insert(spec.name, Tensor::zeros(&spec.shape), spec.kind);
    }
    Ok(params)
}

/// Seeded initialization: affine weights uniform in ±1/√fan_in with zero
/// biases, layer-norm gains 1 and biases 0, embeddings Gaussian with
/// standard deviation 0.02.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut params = ModelParams::new();
    for spec in param_layout(config)? {
        let n: usize = spec.shape.iter().product();
        let values: Vec<f32> = match spec.kind {
            ParamKind::Weight => {
                let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect()
            }
            ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
            ParamKind::NormGain => vec![1.0; n],
            ParamKind::Embedding => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
        };
        params.insert(spec.name, Tensor::new(&spec.shape, values)?, spec.kind);
    }
    Ok(params)
}

/// Feature map to `K×C` tokens, token index `h·W + w`.
pub fn tokenize(f: &FeatureMap, config: &ModelConfig) -> Result<Tensor<f32>, ModelError> {
    check_input(f, config)?;
    let (c, k) = (f.channels(), f.positions());
    let mut out = vec![0.0f32; k * c];
    for ch in 0..c {
        for (t, &v) in f.data()[ch * k..(ch + 1) * k].iter().enumerate() {
            out[t * c + ch] = v;
        }
    }
    Ok(Tensor::new(&[k, c], out)?)
}

/// Inverse of [`tokenize`].
pub fn detokenize<T: Scalar>(tokens: &Tensor<T>, config: &ModelConfig) -> Result<FeatureMap, ModelError> {
    let (k, c) = (config.tokens(), config.in_channels);
    if tokens.shape() != [k, c] {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "detokenize",
            left: tokens.shape().to_vec(),
            right: vec![k, c],
        }));
    }
    let mut values = vec![0.0f32; k * c];
    for (t, row) in tokens.data().chunks_exact(c).enumerate() {
        for (ch, v) in row.iter().enumerate() {
            values[ch * k + t] = v.to_f32().unwrap_or(f32::NAN);
        }
    }
    FeatureMap::new(c, config.height, config.width, values).map_err(|e| ModelError::Config(e.to_string()))
}

fn check_input(f: &FeatureMap, config: &ModelConfig) -> Result<(), ModelError> {
    let got = [f.channels(), f.height(), f.width()];
    let expected = [config.in_channels, config.height, config.width];
    if got != expected {
        return Err(ModelError::InputMismatch { expected, got });
    }
    Ok(())
}

/// Multi-head attention: per-head `D/n_heads` slices of the projections,
/// concatenated and output-projected.
pub fn multi_head_attention<'t, T: Scalar>(
    p: &Bound<'t, T>,
    name: &str,
    query: Var<'t, T>,
    key: Var<'t, T>,
    value: Var<'t, T>,
    n_heads: usize,
) -> Result<Var<'t, T>, ModelError> {
    let proj = |which: &str, x: Var<'t, T>| -> Result<Var<'t, T>, ModelError> {
        Ok(x.linear(p.get(&format!("{name}.{which}.weight"))?, p.get(&format!("{name}.{which}.bias"))?)?)
    };
    let q = proj("q", query)?;
    let k = proj("k", key)?;
    let v = proj("v", value)?;
    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.narrow(1, h * dh, dh)?;
        let kh = k.narrow(1, h * dh, dh)?;
        let vh = v.narrow(1, h * dh, dh)?;
        let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows()?;
        heads.push(attn.matmul(vh)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { concat(&heads, 1)? };
    proj("o", merged)
}

/// Attention stand-in for the `no_attn` variant: per-token concatenation of
/// the query-side and value-side inputs followed by a projection.
fn token_mix<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, query: Var<'t, T>, value: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
    let joined = concat(&[query, value], 1)?;
    Ok(joined.linear(p.get(&format!("{name}.mix.weight"))?, p.get(&format!("{name}.mix.bias"))?)?)
}

fn attention_block<'t, T: Scalar>(
    p: &Bound<'t, T>,
    config: &ModelConfig,
    name: &str,
    query: Var<'t, T>,
    key: Var<'t, T>,
    value: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    if config.variant == Variant::NoAttn {
        token_mix(p, name, query, value)
    } else {
        multi_head_attention(p, name, query, key, value, config.n_heads)
    }
}

fn norm<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
    Ok(x.layer_norm(p.get(&format!("{name}.gain"))?, p.get(&format!("{name}.bias"))?)?)
}

fn ffn<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
    let h = x
        .linear(p.get(&format!("{name}.fc1.weight"))?, p.get(&format!("{name}.fc1.bias"))?)?
        .relu();
    Ok(h.linear(p.get(&format!("{name}.fc2.weight"))?, p.get(&format!("{name}.fc2.bias"))?)?)
}

/// `x' = LN(x + MHSA(x+pos, x+pos, x))`, `out = LN(x' + FFN(x'))`.
pub fn encoder_layer<'t, T: Scalar>(
    p: &Bound<'t, T>,
    config: &ModelConfig,
    layer: usize,
    x: Var<'t, T>,
    pos: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    let name = format!("enc.{layer}");
    let qk = x.add(pos)?;
    let attn = attention_block(p, config, &format!("{name}.self_attn"), qk, qk, x)?;
    let x1 = norm(p, &format!("{name}.norm1"), x.add(attn)?)?;
    let ff = ffn(p, &format!("{name}.ffn"), x1)?;
    norm(p, &format!("{name}.norm2"), x1.add(ff)?)
}

/// Self-attention over the queries, cross-attention into the memory, then
/// the feed-forward block, each closed by a residual and layer norm.
pub fn decoder_layer<'t, T: Scalar>(
    p: &Bound<'t, T>,
    config: &ModelConfig,
    layer: usize,
    queries: Var<'t, T>,
    memory: Var<'t, T>,
    pos: Var<'t, T>,
    qpos: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    let name = format!("dec.{layer}");
    let qk = queries.add(qpos)?;
    let sa = attention_block(p, config, &format!("{name}.self_attn"), qk, qk, queries)?;
    let t1 = norm(p, &format!("{name}.norm1"), queries.add(sa)?)?;
    let ca = attention_block(p, config, &format!("{name}.cross_attn"), t1.add(qpos)?, memory.add(pos)?, memory)?;
    let t2 = norm(p, &format!("{name}.norm2"), t1.add(ca)?)?;
    let ff = ffn(p, &format!("{name}.ffn"), t2)?;
    norm(p, &format!("{name}.norm3"), t2.add(ff)?)
}

/// Reconstructs `K×C_in` tokens on the tape.
pub fn reconstruct<'t, T: Scalar>(p: &Bound<'t, T>, config: &ModelConfig, tokens: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
    let expected = vec![config.tokens(), config.in_channels];
    if tokens.shape() != expected {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "reconstruct",
            left: tokens.shape(),
            right: expected,
        }));
    }
    if config.variant == Variant::CnnBaseline {
        let layers = cnn_baseline_widths(config).len() - 1;
        let mut x = tokens;
        for i in 0..layers {
            x = x.linear(p.get(&format!("cnn.{i}.weight"))?, p.get(&format!("cnn.{i}.bias"))?)?;
            if i + 1 < layers {
                x = x.relu();
            }
        }
        return Ok(x);
    }
    let pos = p.get("pos_embed")?;
    let mut memory = tokens.linear(p.get("reduce.weight")?, p.get("reduce.bias")?)?;
    for layer in 0..config.n_encoder_layers {
        memory = encoder_layer(p, config, layer, memory, pos)?;
    }
    let mut target = match config.variant {
        Variant::NoQuery => memory,
        _ => p.get("query_embed")?,
    };
    for layer in 0..config.n_decoder_layers {
        target = decoder_layer(p, config, layer, target, memory, pos, pos)?;
    }
    Ok(target.linear(p.get("restore.weight")?, p.get("restore.bias")?)?)
}

/// Inference: the reconstruction `f̂` of `f`.
pub fn forward(f: &FeatureMap, params: &ModelParams<f32>, config: &ModelConfig) -> Result<FeatureMap, ModelError> {
    let tokens = tokenize(f, config)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out = reconstruct(&bound, config, tape.constant(tokens))?;
    detokenize(&out.value(), config)
}
