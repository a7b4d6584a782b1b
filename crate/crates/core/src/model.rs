//! Model configuration, presets, parameter allocation, and the forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mabvit_tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attention::{
    transformer_block_with, AttentionParams, BlockKind, BlockParams, BlockStructure, ForwardCtx,
    ValueProjection, ValueVariant,
};
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, LayerNormParams, LinearParams, MlpParams, MlpVariant};

/// Full architectural description of one ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub structure: BlockStructure,
    pub value_variant: ValueVariant,
    pub mlp_variant: MlpVariant,
    pub class_token: bool,
    pub dropout: f64,
    /// Standard deviation of the truncated-normal weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// The desk-scale model: 32x32 RGB, 4x4 patches, 4 layers of width 64.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            layers: 4,
            embed_dim: 64,
            mlp_dim: 256,
            heads: 4,
            num_classes: 10,
            structure: BlockStructure::PreLnSequential,
            value_variant: ValueVariant::Standard,
            mlp_variant: MlpVariant::StandardGelu,
            class_token: true,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

/// Named ViT sizes with 16-pixel patches at 224x224 and 1000 classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Ti16,
    S16,
    M16,
    B16,
    /// Two layers of width 8, two heads, on a 4x4 image cut into 2x2 patches.
    Tiny,
}

/// The experiment variants compared in the size tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    Base,
    Gelu,
    Glu,
    /// SwiGLU value gate with the MLP shrunk from 4x to 3x the width.
    PrGlu,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Ti16, Preset::S16, Preset::M16, Preset::B16];

    /// (layers, width, mlp dim, parameter-reduced mlp dim, heads)
    pub fn dims(self) -> (usize, usize, usize, usize, usize) {
        match self {
            Preset::Ti16 => (12, 192, 768, 576, 3),
            Preset::S16 => (12, 384, 1536, 1152, 6),
            Preset::M16 => (12, 512, 2048, 1536, 8),
            Preset::B16 => (12, 768, 3072, 2304, 12),
            Preset::Tiny => (2, 8, 16, 12, 2),
        }
    }

    pub fn config(self, variant: ModelVariant, structure: BlockStructure) -> ModelConfig {
        let (layers, embed_dim, mlp, mlp_pr, heads) = self.dims();
        let (image_size, patch_size, num_classes, init_std) = match self {
            Preset::Tiny => (4, 2, 3, 0.5),
            _ => (224, 16, 1000, 0.02),
        };
        let (value_variant, mlp_dim) = match variant {
            ModelVariant::Base => (ValueVariant::Standard, mlp),
            ModelVariant::Gelu => (ValueVariant::Gelu, mlp),
            ModelVariant::Glu => (ValueVariant::Swiglu, mlp),
            ModelVariant::PrGlu => (ValueVariant::Swiglu, mlp_pr),
        };
        ModelConfig {
            image_size,
            patch_size,
            channels: 3,
            layers,
            embed_dim,
            mlp_dim,
            heads,
            num_classes,
            structure,
            value_variant,
            mlp_variant: MlpVariant::StandardGelu,
            class_token: true,
            dropout: 0.0,
            init_std,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ti16" => Ok(Preset::Ti16),
            "s16" => Ok(Preset::S16),
            "m16" => Ok(Preset::M16),
            "b16" => Ok(Preset::B16),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::Base => "base",
            ModelVariant::Gelu => "gelu",
            ModelVariant::Glu => "glu",
            ModelVariant::PrGlu => "pr-glu",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModelVariant::Base),
            "gelu" => Ok(ModelVariant::Gelu),
            "glu" => Ok(ModelVariant::Glu),
            "pr-glu" => Ok(ModelVariant::PrGlu),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected base, gelu, glu, pr-glu)"
            ))),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length seen by the blocks, including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn block_kind(&self) -> BlockKind {
        BlockKind {
            structure: self.structure,
            value: self.value_variant,
            mlp: self.mlp_variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("layers", self.layers.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("mlp_dim", self.mlp_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("structure", self.structure.to_string()),
            ("value_variant", self.value_variant.to_string()),
            ("mlp_variant", self.mlp_variant.to_string()),
            ("class_token", self.class_token.to_string()),
            ("dropout", self.dropout.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub const KEYS: [&'static str; 14] = [
        "image_size",
        "patch_size",
        "channels",
        "layers",
        "embed_dim",
        "mlp_dim",
        "heads",
        "num_classes",
        "structure",
        "value_variant",
        "mlp_variant",
        "class_token",
        "dropout",
        "init_std",
    ];

    /// Applies one `key=value` setting; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "mlp_dim" => self.mlp_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "structure" => self.structure = value.parse()?,
            "value_variant" => self.value_variant = value.parse()?,
            "mlp_variant" => self.mlp_variant = value.parse()?,
            "class_token" => self.class_token = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses canonical `key=value` text; every model key is required once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = ModelConfig::default();
        for key in Self::KEYS {
            if !map.contains_key(key) {
                return Err(Error::config(format!("missing key {key}")));
            }
        }
        for (k, v) in &map {
            if !cfg.set(k, v)? {
                return Err(Error::config(format!("unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable hash of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments; duplicate
/// keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(map)
}

/// Every learnable tensor of one ViT.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch: LinearParams,
    pub class_token: Option<Tensor>,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub head: LinearParams,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, p: &'a LinearParams) {
    out.push((format!("{name}.weight"), &p.weight));
    if let Some(b) = &p.bias {
        out.push((format!("{name}.bias"), b));
    }
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: &str, p: &'a mut LinearParams) {
    out.push((format!("{name}.weight"), &mut p.weight));
    if let Some(b) = &mut p.bias {
        out.push((format!("{name}.bias"), b));
    }
}

impl ModelParams {
    /// All tensors with hierarchical names, sorted by name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "patch", &self.patch);
        if let Some(c) = &self.class_token {
            out.push(("cls_token".into(), c));
        }
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i:03}");
            out.push((format!("{p}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1.beta));
            out.push((format!("{p}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2.beta));
            push_linear(&mut out, &format!("{p}.attn.query"), &b.attn.query);
            push_linear(&mut out, &format!("{p}.attn.key"), &b.attn.key);
            match &b.attn.value {
                ValueProjection::Single(v) => push_linear(&mut out, &format!("{p}.attn.value"), v),
                ValueProjection::Gated { gate, linear } => {
                    push_linear(&mut out, &format!("{p}.attn.value_gate"), gate);
                    push_linear(&mut out, &format!("{p}.attn.value_linear"), linear);
                }
            }
            push_linear(&mut out, &format!("{p}.attn.output"), &b.attn.output);
            match &b.mlp {
                MlpParams::Standard { fc1, fc2 } => {
                    push_linear(&mut out, &format!("{p}.mlp.fc1"), fc1);
                    push_linear(&mut out, &format!("{p}.mlp.fc2"), fc2);
                }
                MlpParams::Gated { gate, up, down } => {
                    push_linear(&mut out, &format!("{p}.mlp.gate"), gate);
                    push_linear(&mut out, &format!("{p}.mlp.up"), up);
                    push_linear(&mut out, &format!("{p}.mlp.down"), down);
                }
            }
        }
        out.push(("norm.gamma".into(), &self.final_norm.gamma));
        out.push(("norm.beta".into(), &self.final_norm.beta));
        push_linear(&mut out, "head", &self.head);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], in the same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "patch", &mut self.patch);
        if let Some(c) = &mut self.class_token {
            out.push(("cls_token".into(), c));
        }
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i:03}");
            out.push((format!("{p}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &mut b.ln1.beta));
            out.push((format!("{p}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &mut b.ln2.beta));
            push_linear_mut(&mut out, &format!("{p}.attn.query"), &mut b.attn.query);
            push_linear_mut(&mut out, &format!("{p}.attn.key"), &mut b.attn.key);
            match &mut b.attn.value {
                ValueProjection::Single(v) => push_linear_mut(&mut out, &format!("{p}.attn.value"), v),
                ValueProjection::Gated { gate, linear } => {
                    push_linear_mut(&mut out, &format!("{p}.attn.value_gate"), gate);
                    push_linear_mut(&mut out, &format!("{p}.attn.value_linear"), linear);
                }
            }
            push_linear_mut(&mut out, &format!("{p}.attn.output"), &mut b.attn.output);
            match &mut b.mlp {
                MlpParams::Standard { fc1, fc2 } => {
                    push_linear_mut(&mut out, &format!("{p}.mlp.fc1"), fc1);
                    push_linear_mut(&mut out, &format!("{p}.mlp.fc2"), fc2);
                }
                MlpParams::Gated { gate, up, down } => {
                    push_linear_mut(&mut out, &format!("{p}.mlp.gate"), gate);
                    push_linear_mut(&mut out, &format!("{p}.mlp.up"), up);
                    push_linear_mut(&mut out, &format!("{p}.mlp.down"), down);
                }
            }
        }
        out.push(("norm.gamma".into(), &mut self.final_norm.gamma));
        out.push(("norm.beta".into(), &mut self.final_norm.beta));
        push_linear_mut(&mut out, "head", &mut self.head);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Rebuilds the structure around replacement tensors given in
    /// [`ModelParams::named`] order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<ModelParams> {
        let mut out = self.clone();
        let slots = out.named_mut();
        if slots.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::config(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.named().iter().for_each(|(_, t)| t.zero_grad());
    }
}

/// Whether weight decay applies to the named tensor: only weight matrices,
/// never biases, norms, the class token, or positional embeddings.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Expected `(name, shape)` of every tensor for `config`, sorted by name.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let m = config.mlp_dim;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let lin = |out: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize, bias: bool| {
        out.push((format!("{name}.weight"), vec![i, o]));
        if bias {
            out.push((format!("{name}.bias"), vec![o]));
        }
    };
    lin(&mut out, "patch".into(), config.patch_dim(), d, true);
    if config.class_token {
        out.push(("cls_token".into(), vec![1, d]));
    }
    out.push(("pos_embed".into(), vec![config.num_tokens(), d]));
    for i in 0..config.layers {
        let p = format!("blocks.{i:03}");
        for ln in ["ln1", "ln2"] {
            out.push((format!("{p}.{ln}.gamma"), vec![d]));
            out.push((format!("{p}.{ln}.beta"), vec![d]));
        }
        lin(&mut out, format!("{p}.attn.query"), d, d, true);
        lin(&mut out, format!("{p}.attn.key"), d, d, true);
        match config.value_variant {
            ValueVariant::Swiglu => {
                lin(&mut out, format!("{p}.attn.value_gate"), d, d, false);
                lin(&mut out, format!("{p}.attn.value_linear"), d, d, false);
            }
            _ => lin(&mut out, format!("{p}.attn.value"), d, d, true),
        }
        lin(&mut out, format!("{p}.attn.output"), d, d, true);
        if config.mlp_variant.is_gated() {
            lin(&mut out, format!("{p}.mlp.gate"), d, m, false);
            lin(&mut out, format!("{p}.mlp.up"), d, m, false);
            lin(&mut out, format!("{p}.mlp.down"), m, d, true);
        } else {
            lin(&mut out, format!("{p}.mlp.fc1"), d, m, true);
            lin(&mut out, format!("{p}.mlp.fc2"), m, d, true);
        }
    }
    out.push(("norm.gamma".into(), vec![d]));
    out.push(("norm.beta".into(), vec![d]));
    lin(&mut out, "head".into(), d, config.num_classes, true);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Exact number of learnable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.embed_dim;
    let m = config.mlp_dim;
    let patch = config.patch_dim() * d + d;
    let cls = if config.class_token { d } else { 0 };
    let pos = config.num_tokens() * d;
    let norms = 4 * d;
    let qko = 3 * (d * d + d);
    let value = match config.value_variant {
        ValueVariant::Swiglu => 2 * d * d,
        ValueVariant::Standard | ValueVariant::Gelu => d * d + d,
    };
    let mlp = if config.mlp_variant.is_gated() {
        3 * d * m + d
    } else {
        2 * d * m + m + d
    };
    let per_layer = norms + qko + value + mlp;
    let head = d * config.num_classes + config.num_classes;
    patch + cls + pos + config.layers * per_layer + 2 * d + head
}

struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    /// Normal draws rejected outside two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                data.push(z * self.std);
            }
        }
        Ok(Tensor::param(data, shape)?)
    }

    fn linear(&mut self, i: usize, o: usize, bias: bool) -> Result<LinearParams> {
        let weight = self.trunc_normal(&[i, o])?;
        let bias = if bias {
            Some(Tensor::zeros(&[o])?.to_leaf(true))
        } else {
            None
        };
        LinearParams::new(weight, bias)
    }
}

/// Deterministically initializes every tensor of `config` from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let d = config.embed_dim;
    let m = config.mlp_dim;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        std: config.init_std,
    };
    let patch = init.linear(config.patch_dim(), d, true)?;
    let class_token = if config.class_token {
        Some(init.trunc_normal(&[1, d])?)
    } else {
        None
    };
    let pos_embed = init.trunc_normal(&[config.num_tokens(), d])?;
    let mut blocks = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let query = init.linear(d, d, true)?;
        let key = init.linear(d, d, true)?;
        let value = match config.value_variant {
            ValueVariant::Swiglu => ValueProjection::Gated {
                gate: init.linear(d, d, false)?,
                linear: init.linear(d, d, false)?,
            },
            _ => ValueProjection::Single(init.linear(d, d, true)?),
        };
        let output = init.linear(d, d, true)?;
        let mlp = if config.mlp_variant.is_gated() {
            MlpParams::Gated {
                gate: init.linear(d, m, false)?,
                up: init.linear(d, m, false)?,
                down: init.linear(m, d, true)?,
            }
        } else {
            MlpParams::Standard {
                fc1: init.linear(d, m, true)?,
                fc2: init.linear(m, d, true)?,
            }
        };
        blocks.push(BlockParams {
            ln1: LayerNormParams::identity(d, true)?,
            ln2: LayerNormParams::identity(d, true)?,
            attn: AttentionParams {
                query,
                key,
                value,
                output,
                heads: config.heads,
            },
            mlp,
        });
    }
    let final_norm = LayerNormParams::identity(d, true)?;
    let head = init.linear(d, config.num_classes, true)?;
    Ok(ModelParams {
        patch,
        class_token,
        pos_embed,
        blocks,
        final_norm,
        head,
    })
}

/// Cuts `B x H x W x C` images into flattened non-overlapping patches,
/// `B x (H/P * W/P) x (P*P*C)`: patches in row-major grid order, pixels
/// row-major within a patch, channels fastest.
pub fn extract_patches(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(TensorError::InvalidShape {
            op: "extract_patches",
            shape: s.to_vec(),
            msg: format!("expected B x H x W x C with H and W divisible by {patch}"),
        }
        .into());
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(&[b, gh, patch, gw, patch * c])?
        .transpose(2, 3)?
        .reshape(&[b, gh * gw, patch * patch * c])?)
}

fn as_image_batch(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let batched = match s.len() {
        3 => images.reshape(&[1, s[0], s[1], s[2]])?,
        4 => images.clone(),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "vit_forward",
                shape: s.to_vec(),
                msg: "expected H x W x C or B x H x W x C".into(),
            }
            .into())
        }
    };
    let s = batched.shape();
    let expect = [config.image_size, config.image_size, config.channels];
    if s[1..] != expect {
        return Err(TensorError::ShapeMismatch {
            op: "vit_forward",
            lhs: s.to_vec(),
            rhs: expect.to_vec(),
        }
        .into());
    }
    Ok(batched)
}

/// Patch projection, class token, and positional embedding:
/// `B x H x W x C -> B x tokens x D` (or `H x W x C -> tokens x D`).
pub fn patch_embed(images: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let single = images.rank() == 3;
    let batched = as_image_batch(images, config)?;
    let b = batched.shape()[0];
    let tokens = linear(&extract_patches(&batched, config.patch_size)?, &params.patch)?;
    let tokens = match &params.class_token {
        Some(cls) => {
            let cls = cls.reshape(&[1, 1, config.embed_dim])?;
            let mut parts: Vec<&Tensor> = vec![&cls; b];
            parts.push(&tokens);
            let cls_b = Tensor::cat(&parts[..b], 0)?;
            Tensor::cat(&[&cls_b, &tokens], 1)?
        }
        None => tokens,
    };
    let x = tokens.add(&params.pos_embed)?;
    if single {
        let s = x.shape().to_vec();
        Ok(x.reshape(&s[1..])?)
    } else {
        Ok(x)
    }
}

/// Runs the block stack on embedded tokens (`B x tokens x D`).
pub fn encode_tokens(
    tokens: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor> {
    let kind = config.block_kind();
    let mut x = tokens.clone();
    for (i, block) in params.blocks.iter().enumerate() {
        x = transformer_block_with(&x, block, kind, i, ctx)?;
    }
    Ok(x)
}

/// Final norm, class-token (or mean-token) pooling, and the linear head.
pub fn classify_tokens(x: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let x = layer_norm(x, &params.final_norm)?;
    let b = x.shape()[0];
    let pooled = if config.class_token {
        x.narrow(1, 0, 1)?.reshape(&[b, config.embed_dim])?
    } else {
        x.mean_axis(1)?
    };
    linear(&pooled, &params.head)
}

pub fn vit_forward(images: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    vit_forward_with(images, params, config, &mut ForwardCtx::default())
}

/// Logits `B x num_classes` for a `B x H x W x C` image batch, or
/// `num_classes` for a single `H x W x C` image.
pub fn vit_forward_with(
    images: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor> {
    let batched = as_image_batch(images, config)?;
    let tokens = patch_embed(&batched, params, config)?;
    let x = encode_tokens(&tokens, params, config, ctx)?;
    let logits = classify_tokens(&x, params, config)?;
    if images.rank() == 3 {
        Ok(logits.reshape(&[config.num_classes])?)
    } else {
        Ok(logits)
    }
}
