//! Pre-norm ViT encoder whose FFN slots can hold MoE layers.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::moe::{MoELayer, MoeMode, Routing, RoutingStats};
use crate::tensor::Tensor;
use crate::{Rng, EVAL_SEED};

pub(crate) const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub stochastic_depth: f64,
}

fn default_channels() -> usize {
    3
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// Desk-scale default: depth 4, width 64, 4 heads, patch 4 on 32x32 inputs.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_model: 64,
            n_heads: 4,
            depth: 4,
            mlp_ratio: 4,
            n_classes: 10,
            dropout: 0.0,
            stochastic_depth: 0.1,
        }
    }

    /// ViT-S/4 for 32x32 inputs with 100 classes.
    pub fn vit_small_cifar() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_model: 384,
            n_heads: 6,
            depth: 12,
            mlp_ratio: 4,
            n_classes: 100,
            dropout: 0.0,
            stochastic_depth: 0.1,
        }
    }

    /// ViT-S/16 at 224x224 with 1000 classes.
    pub fn vit_small_imagenet() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            n_classes: 1000,
            ..Self::vit_small_cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 2 || self.depth == 0 || self.mlp_ratio == 0 || self.n_classes == 0 || self.channels == 0 {
            return bad("d_model >= 2 and positive depth, mlp_ratio, n_classes, channels required".into());
        }
        for (name, p) in [("dropout", self.dropout), ("stochastic_depth", self.stochastic_depth)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn d_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Parameters of one FFN (two weight matrices plus biases).
    pub fn ffn_param_count(&self) -> usize {
        let (d, h) = (self.d_model, self.d_hidden());
        d * h + h + h * d + d
    }

    /// Closed-form parameter count of the plain (all-FFN) model.
    pub fn dense_param_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.patch_dim() * d + d + d + self.seq_len() * d;
        let attn = d * 3 * d + 3 * d + d * d + d;
        let block = 4 * d + attn + self.ffn_param_count();
        embed + self.depth * block + 2 * d + d * self.n_classes + self.n_classes
    }
}

/// One FFN / one expert: `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FFNParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FFNParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let f = Self { w1, b1, w2, b2 };
        f.check_shapes()?;
        Ok(f)
    }

    pub fn zeros(d_model: usize, d_hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![d_model, d_hidden]),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::zeros(vec![d_hidden, d_model]),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn random(d_model: usize, d_hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Tensor::trunc_normal(vec![d_model, d_hidden], INIT_STD, rng),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::trunc_normal(vec![d_hidden, d_model], INIT_STD, rng),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    fn check_shapes(&self) -> Result<()> {
        let (s1, s2) = (self.w1.shape(), self.w2.shape());
        let ok = s1.len() == 2
            && s2 == [s1[1], s1[0]]
            && self.b1.shape() == [s1[1]]
            && self.b2.shape() == [s1[0]];
        if !ok {
            return dim_err(format!(
                "inconsistent FFN shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                s1,
                self.b1.shape(),
                s2,
                self.b2.shape()
            ));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &FFNParams) -> bool {
        self.arrays()
            .iter()
            .zip(other.arrays())
            .all(|(a, b)| a.shape() == b.shape())
    }

    /// `[w1, b1, w2, b2]`
    pub fn arrays(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn arrays_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|t| t.numel()).sum()
    }

    /// All four arrays concatenated in `w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for t in self.arrays() {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten), reusing `self`'s shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return dim_err(format!(
                "flat vector of {} for FFN with {} parameters",
                flat.len(),
                self.param_count()
            ));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in out.arrays_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            t.zero_grad();
            off += n;
        }
        Ok(out)
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(self.arrays()) {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (n, t) in ["w1", "b1", "w2", "b2"].into_iter().zip(self.arrays_mut()) {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    /// Records the FFN on `x [T×d]`, with dropout after the activation and
    /// after the output projection.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let d = self.d_model();
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return dim_err(format!("FFN of width {d} applied to tokens {:?}", g.shape(x)));
        }
        let w1 = binder.bind(g, &format!("{prefix}.w1"), &self.w1)?;
        let b1 = binder.bind(g, &format!("{prefix}.b1"), &self.b1)?;
        let w2 = binder.bind(g, &format!("{prefix}.w2"), &self.w2)?;
        let b2 = binder.bind(g, &format!("{prefix}.b2"), &self.b2)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_broadcast(h, b1)?;
        let h = g.gelu(h)?;
        let h = ctx.dropout(g, h)?;
        let y = g.matmul(h, w2)?;
        let y = g.add_broadcast(y, b2)?;
        ctx.dropout(g, y)
    }
}

/// `gelu(tokens·w1 + b1)·w2 + b2`, row by row, outside of any training graph.
pub fn ffn_forward(ffn: &FFNParams, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let x = g.constant(tokens.clone());
    let mut rng = Rng::seed_from_u64(EVAL_SEED);
    let mut ctx = Ctx::eval(&mut rng);
    let y = ffn.forward_graph(&mut g, &mut binder, "ffn", x, &mut ctx)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![d]),
            beta: Tensor::zeros(vec![d]),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let gamma = binder.bind(g, &format!("{prefix}.gamma"), &self.gamma)?;
        let beta = binder.bind(g, &format!("{prefix}.beta"), &self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

impl AttentionParams {
    fn random(d: usize, rng: &mut Rng) -> Self {
        Self {
            qkv_weight: Tensor::trunc_normal(vec![d, 3 * d], INIT_STD, rng),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            proj_weight: Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
            proj_bias: Tensor::zeros(vec![d]),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            qkv_weight: Tensor::zeros(vec![d, 3 * d]),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            proj_weight: Tensor::zeros(vec![d, d]),
            proj_bias: Tensor::zeros(vec![d]),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.qkv.weight"), &self.qkv_weight));
        out.push((format!("{prefix}.qkv.bias"), &self.qkv_bias));
        out.push((format!("{prefix}.proj.weight"), &self.proj_weight));
        out.push((format!("{prefix}.proj.bias"), &self.proj_bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.qkv.weight"), &mut self.qkv_weight));
        out.push((format!("{prefix}.qkv.bias"), &mut self.qkv_bias));
        out.push((format!("{prefix}.proj.weight"), &mut self.proj_weight));
        out.push((format!("{prefix}.proj.bias"), &mut self.proj_bias));
    }

    /// Multi-head self-attention on `x [B·T × d]` (already normalized).
    /// Returns the projected output and the attention probabilities `[B·H × T × T]`.
    #[allow(clippy::too_many_arguments)]
    fn forward_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        batch: usize,
        seq: usize,
        n_heads: usize,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Var)> {
        let d = g.shape(x)[1];
        let dh = d / n_heads;
        let wqkv = binder.bind(g, &format!("{prefix}.qkv.weight"), &self.qkv_weight)?;
        let bqkv = binder.bind(g, &format!("{prefix}.qkv.bias"), &self.qkv_bias)?;
        let wo = binder.bind(g, &format!("{prefix}.proj.weight"), &self.proj_weight)?;
        let bo = binder.bind(g, &format!("{prefix}.proj.bias"), &self.proj_bias)?;

        let qkv = g.matmul(x, wqkv)?;
        let qkv = g.add_broadcast(qkv, bqkv)?;
        let qkv = g.reshape(qkv, vec![batch, seq, 3, n_heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [None; 3];
        for (i, slot) in parts.iter_mut().enumerate() {
            let p = g.narrow0(qkv, i, 1)?;
            *slot = Some(g.reshape(p, vec![batch * n_heads, seq, dh])?);
        }
        let [q, k, v] = parts.map(|p| p.expect("filled above"));

        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = g.softmax(scores)?;
        let attn = ctx.dropout(g, probs)?;
        let out = g.bmm(attn, v, false)?;
        let out = g.reshape(out, vec![batch, n_heads, seq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, vec![batch * seq, d])?;
        let out = g.matmul(out, wo)?;
        let out = g.add_broadcast(out, bo)?;
        let out = ctx.dropout(g, out)?;
        Ok((out, probs))
    }
}

/// FFN slot of a block: a plain FFN or a MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Mlp {
    Dense(FFNParams),
    Moe(MoELayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

impl Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        match &self.mlp {
            Mlp::Dense(f) => f.collect(&format!("{prefix}.ffn"), out),
            Mlp::Moe(m) => m.collect(&format!("{prefix}.moe"), out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        match &mut self.mlp {
            Mlp::Dense(f) => f.collect_mut(&format!("{prefix}.ffn"), out),
            Mlp::Moe(m) => m.collect_mut(&format!("{prefix}.moe"), out),
        }
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.mlp, Mlp::Moe(_))
    }

    /// `tokens + attention(ln1(tokens))` for a single sequence `[T×d]`, eval mode.
    pub fn attention_forward(&self, tokens: &Tensor, n_heads: usize) -> Result<Tensor> {
        Ok(self.attention_eval(tokens, n_heads)?.0)
    }

    /// Attention probabilities `[H×T×T]` for a single sequence.
    pub fn attention_probs(&self, tokens: &Tensor, n_heads: usize) -> Result<Tensor> {
        Ok(self.attention_eval(tokens, n_heads)?.1)
    }

    fn attention_eval(&self, tokens: &Tensor, n_heads: usize) -> Result<(Tensor, Tensor)> {
        let (t, d) = match tokens.shape() {
            [t, d] if *t >= 1 => (*t, *d),
            s => return dim_err(format!("attention expects [T x d] tokens, got {s:?}")),
        };
        if n_heads == 0 || d % n_heads != 0 || self.attn.proj_weight.shape()[0] != d {
            return dim_err(format!("attention width {d} with {n_heads} heads"));
        }
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let mut rng = Rng::seed_from_u64(EVAL_SEED);
        let mut ctx = Ctx::eval(&mut rng);
        let x = g.constant(tokens.clone());
        let h = self.ln1.forward_graph(&mut g, &mut binder, "ln1", x)?;
        let (a, probs) = self
            .attn
            .forward_graph(&mut g, &mut binder, "attn", h, 1, t, n_heads, &mut ctx)?;
        let y = g.add(x, a)?;
        Ok((g.value(y).clone(), g.value(probs).clone()))
    }
}

/// Randomness and train/eval switch threaded through a forward pass.
pub(crate) struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut Rng,
    pub dropout: f64,
}

impl<'a> Ctx<'a> {
    pub fn eval(rng: &'a mut Rng) -> Self {
        Self {
            train: false,
            rng,
            dropout: 0.0,
        }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = g.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, mask)
    }

    /// Per-sample residual-branch dropping on `x [B·T × d]`.
    fn drop_path(&mut self, g: &mut Graph, x: Var, rate: f64, batch: usize) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let per_sample = g.value(x).numel() / batch;
        let mut mask = Vec::with_capacity(g.value(x).numel());
        for _ in 0..batch {
            let m = if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            mask.extend(std::iter::repeat_n(m, per_sample));
        }
        g.mul_const(x, mask)
    }
}

/// How model parameters enter a graph.
pub struct Binder {
    kind: BindKind,
    bound: Vec<(String, Var)>,
}

enum BindKind {
    Trainable,
    Frozen,
    Flat { var: Var, offsets: HashMap<String, usize> },
}

impl Binder {
    /// Parameters become differentiable leaves.
    pub fn trainable() -> Self {
        Self {
            kind: BindKind::Trainable,
            bound: Vec::new(),
        }
    }

    /// Parameters become constants.
    pub fn frozen() -> Self {
        Self {
            kind: BindKind::Frozen,
            bound: Vec::new(),
        }
    }

    /// Parameters are slices of one flat vector `var`, laid out in
    /// [`Model::params`] order. Used for whole-model gradient checks.
    pub fn flat(var: Var, layout: &[(String, usize)]) -> Self {
        let mut offsets = HashMap::new();
        let mut off = 0;
        for (name, n) in layout {
            offsets.insert(name.clone(), off);
            off += n;
        }
        Self {
            kind: BindKind::Flat { var, offsets },
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, t: &Tensor) -> Result<Var> {
        let v = match &self.kind {
            BindKind::Trainable => g.leaf(t.clone()),
            BindKind::Frozen => g.constant(t.clone()),
            BindKind::Flat { var, offsets } => {
                let off = *offsets
                    .get(name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no flat slot for {name}")))?;
                let s = g.narrow0(*var, off, t.numel())?;
                g.reshape(s, t.shape().to_vec())?
            }
        };
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}

/// Output of a recorded forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Sum of the load-balance losses of all top-k layers.
    pub aux_loss: Option<Var>,
    /// Per MoE block: `(block index, stats)`.
    pub routing: Vec<(usize, RoutingStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl Model {
    /// Randomly initialized plain ViT.
    pub fn new_dense(config: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let patch_weight = Tensor::trunc_normal(vec![config.patch_dim(), d], INIT_STD, rng);
        let cls_token = Tensor::trunc_normal(vec![d], INIT_STD, rng);
        let pos_embed = Tensor::trunc_normal(vec![config.seq_len(), d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1: LayerNormParams::new(d),
                attn: AttentionParams::random(d, rng),
                ln2: LayerNormParams::new(d),
                mlp: Mlp::Dense(FFNParams::random(d, config.d_hidden(), rng)),
            })
            .collect();
        let head_weight = Tensor::trunc_normal(vec![d, config.n_classes], INIT_STD, rng);
        Ok(Self {
            config: config.clone(),
            patch_weight,
            patch_bias: Tensor::zeros(vec![d]),
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNormParams::new(d),
            head_weight,
            head_bias: Tensor::zeros(vec![config.n_classes]),
        })
    }

    /// All-zero model with the given MoE blocks: `(block, experts, routing)`.
    pub(crate) fn skeleton(config: &ViTConfig, moe: &[(usize, usize, Routing)]) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.d_hidden());
        let blocks = (0..config.depth)
            .map(|i| {
                let mlp = match moe.iter().find(|(b, _, _)| *b == i) {
                    Some((_, n, routing)) => Mlp::Moe(MoELayer {
                        experts: vec![FFNParams::zeros(d, h); *n],
                        routing: routing.clone(),
                    }),
                    None => Mlp::Dense(FFNParams::zeros(d, h)),
                };
                Block {
                    ln1: LayerNormParams::new(d),
                    attn: AttentionParams::zeros(d),
                    ln2: LayerNormParams::new(d),
                    mlp,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_weight: Tensor::zeros(vec![config.patch_dim(), d]),
            patch_bias: Tensor::zeros(vec![d]),
            cls_token: Tensor::zeros(vec![d]),
            pos_embed: Tensor::zeros(vec![config.seq_len(), d]),
            blocks,
            norm: LayerNormParams::new(d),
            head_weight: Tensor::zeros(vec![d, config.n_classes]),
            head_bias: Tensor::zeros(vec![config.n_classes]),
        })
    }

    /// Rebuilds a model from named parameters. Block structure (dense FFN,
    /// RUP MoE or routed MoE) is read off the names; routed layers take their
    /// hyperparameters from `topk` (or the routed defaults).
    pub fn from_named(config: &ViTConfig, params: Vec<(String, Tensor)>, topk: Option<&MoeMode>) -> Result<Self> {
        let mut by_name: BTreeMap<String, Tensor> = params.into_iter().collect();
        let mut moe = Vec::new();
        for b in 0..config.depth {
            let prefix = format!("blocks.{b}.moe");
            let n = (0..)
                .take_while(|j| by_name.contains_key(&format!("{prefix}.experts.{j}.w1")))
                .count();
            if n == 0 {
                continue;
            }
            let routing = if by_name.contains_key(&format!("{prefix}.router")) {
                let (k, capacity_ratio, balance_weight) = match topk {
                    Some(MoeMode::TopK {
                        k,
                        capacity_ratio,
                        balance_weight,
                    }) => (*k, *capacity_ratio, *balance_weight),
                    _ => (1, 1.05, 0.01),
                };
                Routing::TopK {
                    router: Tensor::zeros(vec![config.d_model, n]),
                    k,
                    capacity_ratio,
                    balance_weight,
                }
            } else {
                Routing::Rup
            };
            moe.push((b, n, routing));
        }
        let mut model = Self::skeleton(config, &moe)?;
        for (name, slot) in model.params_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.detached();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("patch_embed.weight".to_string(), &self.patch_weight));
        out.push(("patch_embed.bias".to_string(), &self.patch_bias));
        out.push(("cls_token".to_string(), &self.cls_token));
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        self.norm.collect("norm", &mut out);
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("patch_embed.weight".to_string(), &mut self.patch_weight));
        out.push(("patch_embed.bias".to_string(), &mut self.patch_bias));
        out.push(("cls_token".to_string(), &mut self.cls_token));
        out.push(("pos_embed".to_string(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}"), &mut out);
        }
        self.norm.collect_mut("norm", &mut out);
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    /// `(name, shape)` inventory in parameter order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero-based indices of blocks holding a MoE layer.
    pub fn moe_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_moe())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn moe_layers_mut(&mut self) -> impl Iterator<Item = &mut MoELayer> {
        self.blocks.iter_mut().filter_map(|b| match &mut b.mlp {
            Mlp::Moe(m) => Some(m),
            Mlp::Dense(_) => None,
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoELayer> {
        self.blocks.iter().filter_map(|b| match &b.mlp {
            Mlp::Moe(m) => Some(m),
            Mlp::Dense(_) => None,
        })
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Flattens all parameters in [`params`](Self::params) order.
    pub fn flatten(&self) -> (Tensor, Vec<(String, usize)>) {
        let mut data = Vec::with_capacity(self.param_count());
        let mut layout = Vec::new();
        for (n, t) in self.params() {
            data.extend_from_slice(t.data());
            layout.push((n, t.numel()));
        }
        let len = data.len();
        (Tensor::from_parts(vec![len], data), layout)
    }

    /// Records the forward pass. `images` is `[B×C×H×W]`.
    ///
    /// In train mode `rng` drives dropout, stochastic depth and RUP
    /// partitions and is required. In eval mode it is ignored: MoE layers
    /// draw partitions from a generator seeded with [`EVAL_SEED`].
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        images: &Tensor,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (b, patches) = patchify(images, cfg)?;
        let mut eval_rng;
        let rng = match (mode, rng) {
            (Mode::Train, Some(r)) => r,
            (Mode::Train, None) => {
                return Err(Error::InvalidArgument("train-mode forward needs an rng".into()))
            }
            (Mode::Eval, _) => {
                eval_rng = Rng::seed_from_u64(EVAL_SEED);
                &mut eval_rng
            }
        };
        let mut ctx = Ctx {
            train: mode == Mode::Train,
            rng,
            dropout: cfg.dropout,
        };
        let (d, t) = (cfg.d_model, cfg.seq_len());

        let p = g.constant(patches);
        let wpe = binder.bind(g, "patch_embed.weight", &self.patch_weight)?;
        let bpe = binder.bind(g, "patch_embed.bias", &self.patch_bias)?;
        let cls = binder.bind(g, "cls_token", &self.cls_token)?;
        let pos = binder.bind(g, "pos_embed", &self.pos_embed)?;
        let x = g.matmul(p, wpe)?;
        let x = g.add_broadcast(x, bpe)?;
        let x = g.reshape(x, vec![b, cfg.n_patches(), d])?;
        let x = g.prepend_row(x, cls)?;
        let x = g.add_broadcast(x, pos)?;
        let mut x = g.reshape(x, vec![b * t, d])?;

        let mut aux: Option<Var> = None;
        let mut routing = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            // linearly increasing stochastic-depth rate over blocks
            let dp = if cfg.depth > 1 {
                cfg.stochastic_depth * i as f64 / (cfg.depth - 1) as f64
            } else {
                cfg.stochastic_depth
            };
            let h = block.ln1.forward_graph(g, binder, &format!("{prefix}.ln1"), x)?;
            let (a, _) = block
                .attn
                .forward_graph(g, binder, &format!("{prefix}.attn"), h, b, t, cfg.n_heads, &mut ctx)?;
            let a = ctx.drop_path(g, a, dp, b)?;
            x = g.add(x, a)?;
            let h = block.ln2.forward_graph(g, binder, &format!("{prefix}.ln2"), x)?;
            let f = match &block.mlp {
                Mlp::Dense(ffn) => ffn.forward_graph(g, binder, &format!("{prefix}.ffn"), h, &mut ctx)?,
                Mlp::Moe(layer) => {
                    let out = layer.forward_graph(g, binder, &format!("{prefix}.moe"), h, &mut ctx)?;
                    if let Some(l) = out.aux_loss {
                        aux = Some(match aux {
                            Some(acc) => g.add(acc, l)?,
                            None => l,
                        });
                    }
                    routing.push((i, out.stats));
                    out.y
                }
            };
            let f = ctx.drop_path(g, f, dp, b)?;
            x = g.add(x, f)?;
        }
        let x = self.norm.forward_graph(g, binder, "norm", x)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let c = g.take_rows(x, &cls_rows)?;
        let wh = binder.bind(g, "head.weight", &self.head_weight)?;
        let bh = binder.bind(g, "head.bias", &self.head_bias)?;
        let logits = g.matmul(c, wh)?;
        let logits = g.add_broadcast(logits, bh)?;
        Ok(ForwardOutput {
            logits,
            aux_loss: aux,
            routing,
        })
    }

    /// Logits `[B × n_classes]` without recording gradients.
    pub fn logits(&self, images: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let out = self.forward(&mut g, &mut binder, images, mode, rng)?;
        Ok(g.value(out.logits).clone())
    }

    /// Adds the gradients of the bound leaves into each parameter's buffer.
    pub fn accumulate_grads(&mut self, grads: &crate::Gradients, bound: &[(String, Var)]) -> Result<()> {
        let by_name: HashMap<&str, Var> = bound.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        for (name, t) in self.params_mut() {
            if let Some(g) = by_name.get(name.as_str()).and_then(|v| grads.get(*v)) {
                t.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }
}

/// `[B×C×H×W]` images to `[B·P × C·p·p]` patch rows (row-major patch grid,
/// features ordered channel, row, column).
pub fn patchify(images: &Tensor, cfg: &ViTConfig) -> Result<(usize, Tensor)> {
    let (b, c, h, w) = match images.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return dim_err(format!("expected [B, C, H, W] images, got {s:?}")),
    };
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return dim_err(format!(
            "images [{b}, {c}, {h}, {w}] for a model expecting [*, {}, {s}, {s}]",
            cfg.channels,
            s = cfg.image_size
        ));
    }
    let p = cfg.patch_size;
    let grid = h / p;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok((b, Tensor::from_parts(vec![b * grid * grid, cfg.patch_dim()], out)))
}

/// `(1-ε)·onehot + ε/K` targets.
pub fn smoothed_targets(labels: &[usize], n_classes: usize, smoothing: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label batch".into()));
    }
    let mut data = vec![smoothing / n_classes as f64; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        data[i * n_classes + l] += 1.0 - smoothing;
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

/// Mean label-smoothed cross-entropy of `logits [B×K]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let k = *g.shape(logits).last().unwrap_or(&0);
    let targets = smoothed_targets(labels, k, smoothing)?;
    g.softmax_cross_entropy(logits, &targets)
}
