//! Toy CLIP-style dual encoder with an explicit prefix/suffix split.
//!
//! Both towers are pre-LN transformers. The image tower patchifies a
//! `[channels, size, size]` image, embeds patches, prepends a CLS token and
//! pools the CLS row; the text tower looks up token embeddings and pools the
//! last position. Every encoder is exposed as `prefix` (input features up to
//! and including block `l`) and `suffix` (blocks `l+1..L`, final LN, pooling,
//! projection), and the unsplit forward is literally `suffix(prefix(x, l))`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Start-of-text token id.
pub const BOS: usize = 0;
/// End-of-text token id; text pooling reads this position.
pub const EOS: usize = 1;

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Parameter(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Cls,
    Patch,
    Text,
    Special,
}

impl TokenRole {
    /// Whether the token is reported in attribution maps.
    pub fn is_reported(self) -> bool {
        matches!(self, TokenRole::Patch | TokenRole::Text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub proj_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            d_model: 32,
            heads: 4,
            layers: 4,
            proj_dim: 16,
            vocab: 64,
            max_len: 8,
            ln_eps: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("proj_dim", self.proj_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "layers must be >= 2, got {}",
                self.layers
            )));
        }
        if self.vocab <= EOS + 1 {
            return Err(Error::Config(format!(
                "vocab {} leaves no content tokens",
                self.vocab
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(
                "max_len must fit BOS, one token and EOS".into(),
            ));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!(
                "ln_eps must be > 0, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn image_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Bottleneck layer used when none is given: three quarters of the depth,
    /// rounded, which is layer 3 of 4 at toy scale and 9 of 12 for ViT-B/32.
    pub fn default_bottleneck_layer(&self) -> usize {
        ((self.layers * 3 + 2) / 4).clamp(1, self.layers)
    }
}

/// Parameters of one pre-LN transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl Block {
    fn shapes(d: usize) -> [Vec<usize>; 16] {
        let h = d * MLP_RATIO;
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_tensors(t: [Tensor; 16]) -> Self {
        let [ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2] =
            t;
        Self {
            ln1_gain,
            ln1_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// A block whose output equals its input: both residual branches are
    /// multiplied by zero output weights.
    pub fn identity(d: usize) -> Self {
        let shapes = Self::shapes(d);
        let t = std::array::from_fn(|i| {
            let is_gain = BLOCK_FIELDS[i].ends_with("gain");
            let fill = if is_gain { 1.0 } else { 0.0 };
            Tensor::filled(&shapes[i], fill).expect("finite fill")
        });
        Self::from_tensors(t)
    }
}

/// Weights shared by both towers' layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    /// Image: patch-embed `[patch_dim, d]`. Text: token table `[vocab, d]`.
    pub embed: Tensor,
    /// Image only: `[d]`.
    pub cls: Option<Tensor>,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub proj: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    config: ModelConfig,
    pub image: Tower,
    pub text: Tower,
}

/// Intermediate activations `z` at layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub tokens: Tensor,
    pub layer: usize,
    pub modality: Modality,
    pub roles: Vec<TokenRole>,
}

/// Model input for one modality.
#[derive(Clone, Debug)]
pub enum Input<'a> {
    Image(&'a Tensor),
    Text(&'a [usize]),
}

impl Input<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            Input::Image(_) => Modality::Image,
            Input::Text(_) => Modality::Text,
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    scale: f64,
}

impl Sampler {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                v * self.scale
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

impl DualEncoderModel {
    /// Deterministic random initialization. Weights, biases, positions and
    /// the CLS vector are drawn from `N(0, 1/d_model)`, the token table from
    /// `N(0, 1)`; layer-norm gains are 1.
    pub fn init_toy(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut sampler = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: 1.0 / (config.d_model as f64).sqrt(),
        };
        let d = config.d_model;
        let mut tower = |embed_shape: [usize; 2], pos_rows: usize, cls: bool| -> Tower {
            let embed = sampler.normal(&embed_shape);
            let cls = cls.then(|| sampler.normal(&[d]));
            let pos = sampler.normal(&[pos_rows, d]);
            let blocks = (0..config.layers)
                .map(|_| {
                    let shapes = Block::shapes(d);
                    Block::from_tensors(std::array::from_fn(|i| {
                        if BLOCK_FIELDS[i].ends_with("gain") {
                            Tensor::filled(&shapes[i], 1.0).expect("finite fill")
                        } else {
                            sampler.normal(&shapes[i])
                        }
                    }))
                })
                .collect();
            let ln_final_gain = Tensor::filled(&[d], 1.0).expect("finite fill");
            let ln_final_bias = sampler.normal(&[d]);
            let proj = sampler.normal(&[d, config.proj_dim]);
            Tower {
                embed,
                cls,
                pos,
                blocks,
                ln_final_gain,
                ln_final_bias,
                proj,
            }
        };
        let image = tower([config.patch_dim(), d], config.image_tokens(), true);
        let mut text = tower([config.vocab, d], config.max_len, false);
        text.embed = text.embed.scaled((d as f64).sqrt())?;
        Ok(Self {
            config,
            image,
            text,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    fn tower_mut(&mut self, modality: Modality) -> &mut Tower {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    /// Expected name and shape of every weight, in a fixed order.
    pub fn weight_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = Vec::new();
        for m in [Modality::Image, Modality::Text] {
            let p = m.name();
            match m {
                Modality::Image => {
                    out.push((format!("{p}.embed"), vec![config.patch_dim(), d]));
                    out.push((format!("{p}.cls"), vec![d]));
                    out.push((format!("{p}.pos"), vec![config.image_tokens(), d]));
                }
                Modality::Text => {
                    out.push((format!("{p}.embed"), vec![config.vocab, d]));
                    out.push((format!("{p}.pos"), vec![config.max_len, d]));
                }
            }
            for b in 0..config.layers {
                for (field, shape) in BLOCK_FIELDS.iter().zip(Block::shapes(d)) {
                    out.push((format!("{p}.blocks.{b}.{field}"), shape));
                }
            }
            out.push((format!("{p}.ln_final.gain"), vec![d]));
            out.push((format!("{p}.ln_final.bias"), vec![d]));
            out.push((format!("{p}.proj"), vec![d, config.proj_dim]));
        }
        out
    }

    /// All weights in [`Self::weight_schema`] order.
    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for m in [Modality::Image, Modality::Text] {
            let p = m.name();
            let t = self.tower(m);
            out.push((format!("{p}.embed"), &t.embed));
            if let Some(cls) = &t.cls {
                out.push((format!("{p}.cls"), cls));
            }
            out.push((format!("{p}.pos"), &t.pos));
            for (b, block) in t.blocks.iter().enumerate() {
                for (field, tensor) in BLOCK_FIELDS.iter().zip(block.tensors()) {
                    out.push((format!("{p}.blocks.{b}.{field}"), tensor));
                }
            }
            out.push((format!("{p}.ln_final.gain"), &t.ln_final_gain));
            out.push((format!("{p}.ln_final.bias"), &t.ln_final_bias));
            out.push((format!("{p}.proj"), &t.proj));
        }
        out
    }

    /// Rebuilds a model from named weights, checking every name and shape.
    pub fn from_named(config: ModelConfig, mut weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in Self::weight_schema(&config) {
            let t = weights
                .get(&name)
                .ok_or_else(|| Error::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::WeightShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
        }
        let mut take = |name: String| weights.remove(&name).expect("checked above");
        let mut tower = |m: Modality| -> Tower {
            let p = m.name();
            let embed = take(format!("{p}.embed"));
            let cls = (m == Modality::Image).then(|| take(format!("{p}.cls")));
            let pos = take(format!("{p}.pos"));
            let blocks = (0..config.layers)
                .map(|b| {
                    Block::from_tensors(std::array::from_fn(|i| {
                        take(format!("{p}.blocks.{b}.{}", BLOCK_FIELDS[i]))
                    }))
                })
                .collect();
            Tower {
                embed,
                cls,
                pos,
                blocks,
                ln_final_gain: take(format!("{p}.ln_final.gain")),
                ln_final_bias: take(format!("{p}.ln_final.bias")),
                proj: take(format!("{p}.proj")),
            }
        };
        let image = tower(Modality::Image);
        let text = tower(Modality::Text);
        Ok(Self {
            config,
            image,
            text,
        })
    }

    /// Functionally identical model with an identity block inserted after
    /// block `after` in both towers.
    pub fn with_identity_block(&self, after: usize) -> Result<Self> {
        self.check_layer(after)?;
        let mut out = self.clone();
        for m in [Modality::Image, Modality::Text] {
            out.tower_mut(m)
                .blocks
                .insert(after, Block::identity(self.config.d_model));
        }
        out.config.layers += 1;
        Ok(out)
    }

    /// Functionally equivalent reparameterization: final layer-norm affine
    /// scaled by `factor`, projection scaled by `1 / factor`.
    pub fn with_rescaled_projection(&self, modality: Modality, factor: f64) -> Result<Self> {
        if factor == 0.0 || !factor.is_finite() {
            return Err(Error::Parameter(format!("rescale factor {factor}")));
        }
        let mut out = self.clone();
        let t = out.tower_mut(modality);
        t.ln_final_gain = t.ln_final_gain.scaled(factor)?;
        t.ln_final_bias = t.ln_final_bias.scaled(factor)?;
        t.proj = t.proj.scaled(1.0 / factor)?;
        Ok(out)
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.config.layers,
            });
        }
        Ok(())
    }

    /// Rearranges a `[C, H, W]` image into `[patches, C * p * p]` rows, patches
    /// in row-major grid order, features ordered `(channel, dy, dx)`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if image.shape() != c.image_shape() {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!("expected {:?}, got {:?}", c.image_shape(), image.shape()),
            });
        }
        let (s, p, g) = (c.image_size, c.patch, c.grid_side());
        let x = image.data();
        let mut out = Vec::with_capacity(image.len());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        let row = ch * s * s + (gy * p + dy) * s + gx * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(
            vec![c.num_patches(), c.patch_dim()],
            out,
        ))
    }

    /// Inverse of [`Self::patchify`].
    pub fn unpatchify(&self, patches: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if patches.shape() != [c.num_patches(), c.patch_dim()] {
            return Err(Error::Shape {
                op: "unpatchify",
                detail: format!("got {:?}", patches.shape()),
            });
        }
        let (s, p, g) = (c.image_size, c.patch, c.grid_side());
        let src = patches.data();
        let mut out = vec![0.0; src.len()];
        let mut i = 0;
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        let row = ch * s * s + (gy * p + dy) * s + gx * p;
                        out[row..row + p].copy_from_slice(&src[i..i + p]);
                        i += p;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(c.image_shape().to_vec(), out))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token list"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::OutOfRange {
                context: "text length",
                index: tokens.len(),
                limit: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::OutOfRange {
                context: "token id",
                index: bad,
                limit: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Input-space features for a modality: image patch rows, or token
    /// embedding rows (before positional embeddings).
    pub fn input_features(&self, input: &Input<'_>) -> Result<Tensor> {
        match input {
            Input::Image(x) => self.patchify(x),
            Input::Text(tokens) => {
                self.check_tokens(tokens)?;
                let mut g = Graph::new();
                let table = g.constant(self.text.embed.clone());
                let e = g.embedding_lookup(table, tokens)?;
                Ok(g.value(e).clone())
            }
        }
    }

    /// Token roles of the hidden state produced for `input`.
    pub fn roles(&self, input: &Input<'_>) -> Vec<TokenRole> {
        match input {
            Input::Image(_) => std::iter::once(TokenRole::Cls)
                .chain(std::iter::repeat_n(
                    TokenRole::Patch,
                    self.config.num_patches(),
                ))
                .collect(),
            Input::Text(tokens) => tokens
                .iter()
                .map(|&t| {
                    if t == BOS || t == EOS {
                        TokenRole::Special
                    } else {
                        TokenRole::Text
                    }
                })
                .collect(),
        }
    }

    /// Records `f^{1..l}` on `g` starting from input features
    /// (see [`Self::input_features`]).
    pub fn prefix_graph(
        &self,
        g: &mut Graph,
        modality: Modality,
        features: Var,
        layer: usize,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let tower = self.tower(modality);
        let rows = g.value(features).dims2()?.0;
        let mut h = match modality {
            Modality::Image => {
                let w = g.constant(tower.embed.clone());
                let patches = g.matmul(features, w)?;
                let cls = g.constant(tower.cls.clone().expect("image tower has CLS"));
                g.concat_rows(&[cls, patches])?
            }
            Modality::Text => {
                if rows == 0 || rows > self.config.max_len {
                    return Err(Error::OutOfRange {
                        context: "text length",
                        index: rows,
                        limit: self.config.max_len,
                    });
                }
                features
            }
        };
        let tokens = g.value(h).dims2()?.0;
        if tokens > tower.pos.shape()[0] {
            return Err(Error::OutOfRange {
                context: "positions",
                index: tokens,
                limit: tower.pos.shape()[0],
            });
        }
        let pos = Tensor::from_parts(
            vec![tokens, self.config.d_model],
            tower.pos.data()[..tokens * self.config.d_model].to_vec(),
        );
        let pos = g.constant(pos);
        h = g.add(h, pos)?;
        for block in &tower.blocks[..layer] {
            h = self.block_graph(g, block, h)?;
        }
        Ok(h)
    }

    /// Records `f^{l+1..L}` on `g`: remaining blocks, final LN, pooling and
    /// projection. Returns the `[proj_dim]` embedding.
    pub fn suffix_graph(
        &self,
        g: &mut Graph,
        modality: Modality,
        z: Var,
        layer: usize,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let tower = self.tower(modality);
        let (tokens, width) = g.value(z).dims2()?;
        if width != self.config.d_model {
            return Err(Error::Shape {
                op: "suffix",
                detail: format!("hidden width {width}, expected {}", self.config.d_model),
            });
        }
        let mut h = z;
        for block in &tower.blocks[layer..] {
            h = self.block_graph(g, block, h)?;
        }
        let gain = g.constant(tower.ln_final_gain.clone());
        let bias = g.constant(tower.ln_final_bias.clone());
        let h = g.layer_norm(h, gain, bias, self.config.ln_eps)?;
        let pooled_row = match modality {
            Modality::Image => 0,
            Modality::Text => tokens - 1,
        };
        let pooled = g.select_row(h, pooled_row)?;
        let pooled = g.concat_rows(&[pooled])?;
        let proj = g.constant(tower.proj.clone());
        let e = g.matmul(pooled, proj)?;
        g.select_row(e, 0)
    }

    fn block_graph(&self, g: &mut Graph, b: &Block, x: Var) -> Result<Var> {
        let eps = self.config.ln_eps;
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;

        let lin = |g: &mut Graph, x: Var, w: &Tensor, bias: &Tensor| -> Result<Var> {
            let w = g.constant(w.clone());
            let bias = g.constant(bias.clone());
            let y = g.matmul(x, w)?;
            g.add_row(y, bias)
        };

        let g1 = g.constant(b.ln1_gain.clone());
        let b1 = g.constant(b.ln1_bias.clone());
        let h = g.layer_norm(x, g1, b1, eps)?;
        let q = lin(g, h, &b.wq, &b.bq)?;
        let k = lin(g, h, &b.wk, &b.bk)?;
        let v = lin(g, h, &b.wv, &b.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&outs)?;
        let attn_out = lin(g, merged, &b.wo, &b.bo)?;
        let x = g.add(x, attn_out)?;

        let g2 = g.constant(b.ln2_gain.clone());
        let b2 = g.constant(b.ln2_bias.clone());
        let h = g.layer_norm(x, g2, b2, eps)?;
        let h = lin(g, h, &b.w1, &b.b1)?;
        let h = g.gelu(h)?;
        let mlp_out = lin(g, h, &b.w2, &b.b2)?;
        g.add(x, mlp_out)
    }

    pub fn encode_prefix(&self, input: &Input<'_>, layer: usize) -> Result<HiddenState> {
        let features = self.input_features(input)?;
        let modality = input.modality();
        let mut g = Graph::new();
        let f = g.constant(features);
        let z = self.prefix_graph(&mut g, modality, f, layer)?;
        Ok(HiddenState {
            tokens: g.value(z).clone(),
            layer,
            modality,
            roles: self.roles(input),
        })
    }

    pub fn encode_suffix(&self, z: &HiddenState) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.tokens.clone());
        let e = self.suffix_graph(&mut g, z.modality, zv, z.layer)?;
        Ok(g.value(e).clone())
    }

    pub fn encode_image_prefix(&self, image: &Tensor, layer: usize) -> Result<HiddenState> {
        self.encode_prefix(&Input::Image(image), layer)
    }

    pub fn encode_image_suffix(&self, z: &HiddenState) -> Result<Tensor> {
        if z.modality != Modality::Image {
            return Err(Error::Modality { expected: "image" });
        }
        self.encode_suffix(z)
    }

    pub fn encode_text_prefix(&self, tokens: &[usize], layer: usize) -> Result<HiddenState> {
        self.encode_prefix(&Input::Text(tokens), layer)
    }

    pub fn encode_text_suffix(&self, z: &HiddenState) -> Result<Tensor> {
        if z.modality != Modality::Text {
            return Err(Error::Modality { expected: "text" });
        }
        self.encode_suffix(z)
    }

    /// Full forward to the projected embedding.
    pub fn embed(&self, input: &Input<'_>) -> Result<Tensor> {
        self.embed_features(input.modality(), &self.input_features(input)?)
    }

    /// Full forward from input-space features (patch rows or token embeddings).
    pub fn embed_features(&self, modality: Modality, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let z = self.prefix_graph(&mut g, modality, f, self.config.layers)?;
        let e = self.suffix_graph(&mut g, modality, z, self.config.layers)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        self.embed(&Input::Image(image))
    }

    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor> {
        self.embed(&Input::Text(tokens))
    }

    /// Cosine similarity of the two projected embeddings.
    pub fn similarity(&self, image: &Tensor, tokens: &[usize]) -> Result<f64> {
        cosine(&self.embed_image(image)?, &self.embed_text(tokens)?)
    }
}

/// Cosine similarity of two plain tensors.
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(u.clone()), g.constant(v.clone()));
    let c = g.cosine_similarity(a, b)?;
    Ok(g.value(c).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DualEncoderModel {
        DualEncoderModel::init_toy(42, ModelConfig::default()).unwrap()
    }

    fn image(seed: u64, cfg: &ModelConfig) -> Tensor {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: 1.0,
        };
        s.normal(&cfg.image_shape())
    }

    #[test]
    fn config_validation() {
        let with = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c
        };
        assert_eq!(
            with(|c| c.layers = 1).validate().unwrap_err().code(),
            "invalid_config"
        );
        assert!(with(|c| c.patch = 7).validate().is_err());
        assert!(with(|c| c.heads = 5).validate().is_err());
        assert!(DualEncoderModel::init_toy(
            0,
            ModelConfig {
                layers: 1,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = model();
        let b = model();
        assert_eq!(a, b);
        let c = DualEncoderModel::init_toy(43, ModelConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_token_count_and_layer() {
        let m = model();
        let x = image(1, m.config());
        let z = m.encode_image_prefix(&x, 2).unwrap();
        assert_eq!(z.tokens.shape(), &[17, 32]);
        assert_eq!(z.roles.len(), 17);
        assert_eq!(z.roles[0], TokenRole::Cls);
        assert_eq!(m.config().default_bottleneck_layer(), 3);
        let vit = ModelConfig {
            layers: 12,
            ..Default::default()
        };
        assert_eq!(vit.default_bottleneck_layer(), 9);
    }

    #[test]
    fn patchify_roundtrip() {
        let m = model();
        let x = image(2, m.config());
        let p = m.patchify(&x).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        assert!(m.unpatchify(&p).unwrap().bitwise_eq(&x));
        // first feature of patch (0, 1) is pixel (c=0, y=0, x=8)
        assert_eq!(p.data()[192], x.data()[8]);
    }

    #[test]
    fn split_identity_every_layer() {
        let m = model();
        let x = image(3, m.config());
        let tokens = [BOS, 5, 9, 12, EOS];
        let full_img = m.embed_image(&x).unwrap();
        let full_txt = m.embed_text(&tokens).unwrap();
        for l in 1..=m.config().layers {
            let zi = m.encode_image_prefix(&x, l).unwrap();
            assert!(
                m.encode_image_suffix(&zi).unwrap().bitwise_eq(&full_img),
                "image l={l}"
            );
            let zt = m.encode_text_prefix(&tokens, l).unwrap();
            assert!(
                m.encode_text_suffix(&zt).unwrap().bitwise_eq(&full_txt),
                "text l={l}"
            );
        }
    }

    #[test]
    fn layer_errors() {
        let m = model();
        let x = image(3, m.config());
        assert_eq!(
            m.encode_image_prefix(&x, 0).unwrap_err().code(),
            "layer_out_of_range"
        );
        assert!(m.encode_image_prefix(&x, 5).is_err());
        let z = m.encode_image_prefix(&x, 2).unwrap();
        assert_eq!(
            m.encode_text_suffix(&z).unwrap_err().code(),
            "wrong_modality"
        );
        let bad = Tensor::zeros(&[3, 16, 16]);
        assert_eq!(
            m.encode_image_prefix(&bad, 1).unwrap_err().code(),
            "shape_mismatch"
        );
    }

    #[test]
    fn text_errors() {
        let m = model();
        assert_eq!(
            m.encode_text_prefix(&[], 1).unwrap_err().code(),
            "empty_input"
        );
        assert!(m.encode_text_prefix(&[0; 9], 1).is_err());
        assert!(m.encode_text_prefix(&[0, 64, 1], 1).is_err());
    }

    #[test]
    fn text_roles() {
        let m = model();
        let roles = m.roles(&Input::Text(&[BOS, 7, 8, EOS]));
        assert_eq!(
            roles,
            vec![
                TokenRole::Special,
                TokenRole::Text,
                TokenRole::Text,
                TokenRole::Special
            ]
        );
    }

    #[test]
    fn similarity_bounds_and_identity() {
        let m = model();
        for seed in 0..5 {
            let x = image(seed, m.config());
            let s = m.similarity(&x, &[BOS, 3 + seed as usize, EOS]).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
        let e = m.embed_image(&image(9, m.config())).unwrap();
        assert_eq!(cosine(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn outputs_finite_for_constant_inputs() {
        let m = model();
        for fill in [0.0, 1.0] {
            let x = Tensor::filled(&m.config().image_shape(), fill).unwrap();
            let e = m.embed_image(&x).unwrap();
            assert!(e.data().iter().all(|v| v.is_finite()));
            assert!(e.norm() > 0.0);
        }
    }

    #[test]
    fn seeds_change_values_not_structure() {
        let a = model();
        let b = DualEncoderModel::init_toy(7, ModelConfig::default()).unwrap();
        let x = image(1, a.config());
        let za = a.encode_image_prefix(&x, 2).unwrap();
        let zb = b.encode_image_prefix(&x, 2).unwrap();
        assert_eq!(za.tokens.shape(), zb.tokens.shape());
        assert_eq!(za.roles, zb.roles);
        assert_ne!(za.tokens, zb.tokens);
    }

    #[test]
    fn identity_block_preserves_forward() {
        let m = model();
        let aug = m.with_identity_block(2).unwrap();
        assert_eq!(aug.config().layers, 5);
        let x = image(4, m.config());
        assert!(aug
            .embed_image(&x)
            .unwrap()
            .bitwise_eq(&m.embed_image(&x).unwrap()));
        let t = [BOS, 4, EOS];
        assert!(aug
            .embed_text(&t)
            .unwrap()
            .bitwise_eq(&m.embed_text(&t).unwrap()));
    }

    #[test]
    fn schema_matches_named_weights() {
        let m = model();
        let schema = DualEncoderModel::weight_schema(m.config());
        let named = m.named_weights();
        assert_eq!(schema.len(), named.len());
        for ((sn, ss), (nn, t)) in schema.iter().zip(&named) {
            assert_eq!(sn, nn);
            assert_eq!(ss.as_slice(), t.shape());
        }
        let map = named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(
            DualEncoderModel::from_named(m.config().clone(), map).unwrap(),
            m
        );
    }
}
