//! Mixture-of-experts layers.
//!
//! Two dispatch rules share one [`MoELayer`] type:
//!
//! * **RUP** (random uniform partition): the pooled tokens are shuffled and
//!   cut into `N` near-equal chunks, one per expert. No router, no auxiliary
//!   loss, same FLOPs as the FFN it replaces.
//! * **Top-k**: a learned router `softmax(x·W_g)` keeps the `k` largest gates
//!   per token (not renormalized), each expert accepts at most
//!   `⌈C·T·k/N⌉` tokens in token order, and overflow falls through to the
//!   block's residual. A switch-style balance loss is returned alongside.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{as_matrix, Tensor};
use crate::vit::{Binder, Ctx, FFNParams, Mode};
use crate::{Rng, EVAL_SEED};

/// How a MoE layer dispatches tokens. Serialized in configs as
/// `mode = "rup"` or `mode = "topk"`.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    Rup,
    TopK {
        /// `[d_model × N]`
        router: Tensor,
        k: usize,
        capacity_ratio: f64,
        balance_weight: f64,
    },
}

/// Routing choice without the learned router weights, used to build layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MoeMode {
    Rup,
    TopK {
        k: usize,
        capacity_ratio: f64,
        balance_weight: f64,
    },
}

impl MoeMode {
    /// Top-1 routing with capacity ratio 1.05 and balance weight 0.01.
    pub fn top1() -> Self {
        MoeMode::TopK {
            k: 1,
            capacity_ratio: 1.05,
            balance_weight: 0.01,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MoeMode::Rup => "rup",
            MoeMode::TopK { .. } => "topk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    pub experts: Vec<FFNParams>,
    pub routing: Routing,
}

/// Token-to-expert assignment of one RUP draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionAssignment {
    pub expert_of_token: Vec<usize>,
    /// `token_lists[i]` holds the tokens of expert `i` in draw order.
    pub token_lists: Vec<Vec<usize>>,
}

impl PartitionAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        self.token_lists.iter().map(Vec::len).collect()
    }
}

/// Per-call dispatch summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    /// Tokens processed by each expert.
    pub expert_counts: Vec<usize>,
    /// Token-expert assignments rejected for lack of capacity.
    pub dropped: usize,
    pub capacity: Option<usize>,
}

/// Output of a recorded MoE forward pass.
pub(crate) struct MoeOutput {
    pub y: Var,
    pub aux_loss: Option<Var>,
    pub stats: RoutingStats,
}

/// Shuffles `[0, T)` and cuts it into `N` contiguous chunks; the first
/// `T mod N` experts take `⌈T/N⌉` tokens, the rest `⌊T/N⌋`.
pub fn rup_partition(tokens: usize, experts: usize, rng: &mut Rng) -> Result<PartitionAssignment> {
    if experts == 0 || tokens < experts {
        return Err(Error::InvalidArgument(format!(
            "cannot partition {tokens} tokens over {experts} experts"
        )));
    }
    let mut perm: Vec<usize> = (0..tokens).collect();
    perm.shuffle(rng);
    let (base, extra) = (tokens / experts, tokens % experts);
    let mut expert_of_token = vec![0; tokens];
    let mut token_lists = Vec::with_capacity(experts);
    let mut start = 0;
    for e in 0..experts {
        let len = base + usize::from(e < extra);
        let chunk = perm[start..start + len].to_vec();
        for &t in &chunk {
            expert_of_token[t] = e;
        }
        token_lists.push(chunk);
        start += len;
    }
    Ok(PartitionAssignment {
        expert_of_token,
        token_lists,
    })
}

/// Top-`k` expert indices of a probability row, highest first; ties go to
/// the lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal probabilities
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

impl MoELayer {
    /// `n` independently initialized experts.
    pub fn random(d_model: usize, d_hidden: usize, n: usize, mode: &MoeMode, rng: &mut Rng) -> Result<Self> {
        let experts = (0..n).map(|_| FFNParams::random(d_model, d_hidden, rng)).collect();
        let routing = Self::routing_for(mode, d_model, n, rng)?;
        let layer = Self { experts, routing };
        layer.validate()?;
        Ok(layer)
    }

    pub(crate) fn routing_for(mode: &MoeMode, d_model: usize, n: usize, rng: &mut Rng) -> Result<Routing> {
        Ok(match mode {
            MoeMode::Rup => Routing::Rup,
            MoeMode::TopK {
                k,
                capacity_ratio,
                balance_weight,
            } => {
                if *k == 0 || *k > n {
                    return Err(Error::InvalidArgument(format!("top-k with k={k} over {n} experts")));
                }
                if !(*capacity_ratio > 0.0) || *balance_weight < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "capacity ratio {capacity_ratio} / balance weight {balance_weight}"
                    )));
                }
                Routing::TopK {
                    router: Tensor::trunc_normal(vec![d_model, n], 0.02, rng),
                    k: *k,
                    capacity_ratio: *capacity_ratio,
                    balance_weight: *balance_weight,
                }
            }
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn mode(&self) -> MoeMode {
        match &self.routing {
            Routing::Rup => MoeMode::Rup,
            Routing::TopK {
                k,
                capacity_ratio,
                balance_weight,
                ..
            } => MoeMode::TopK {
                k: *k,
                capacity_ratio: *capacity_ratio,
                balance_weight: *balance_weight,
            },
        }
    }

    fn mode_name(&self) -> &'static str {
        match self.routing {
            Routing::Rup => "rup",
            Routing::TopK { .. } => "topk",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .experts
            .first()
            .ok_or_else(|| Error::ExpertShape("MoE layer needs at least one expert".into()))?;
        if self.experts.iter().any(|e| !e.same_shape(first)) {
            return Err(Error::ExpertShape("experts have differing shapes".into()));
        }
        if let Routing::TopK { router, k, .. } = &self.routing {
            if router.shape() != [first.d_model(), self.n_experts()] {
                return dim_err(format!(
                    "router {:?} for {} experts of width {}",
                    router.shape(),
                    self.n_experts(),
                    first.d_model()
                ));
            }
            if *k == 0 || *k > self.n_experts() {
                return Err(Error::InvalidArgument(format!("k={k} with {} experts", self.n_experts())));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let router = match &self.routing {
            Routing::TopK { router, .. } => router.numel(),
            Routing::Rup => 0,
        };
        self.experts.iter().map(FFNParams::param_count).sum::<usize>() + router
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (j, e) in self.experts.iter().enumerate() {
            e.collect(&format!("{prefix}.experts.{j}"), out);
        }
        if let Routing::TopK { router, .. } = &self.routing {
            out.push((format!("{prefix}.router"), router));
        }
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (j, e) in self.experts.iter_mut().enumerate() {
            e.collect_mut(&format!("{prefix}.experts.{j}"), out);
        }
        if let Routing::TopK { router, .. } = &mut self.routing {
            out.push((format!("{prefix}.router"), router));
        }
    }

    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<MoeOutput> {
        match &self.routing {
            Routing::Rup => {
                let t = g.shape(x)[0];
                let part = rup_partition(t, self.n_experts(), ctx.rng)?;
                self.rup_graph(g, binder, prefix, x, &part, ctx)
            }
            Routing::TopK { .. } => self.topk_graph(g, binder, prefix, x, ctx),
        }
    }

    fn rup_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        part: &PartitionAssignment,
        ctx: &mut Ctx<'_>,
    ) -> Result<MoeOutput> {
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        if part.expert_of_token.len() != t || part.token_lists.len() != self.n_experts() {
            return dim_err(format!(
                "partition of {} tokens / {} experts for {t} tokens / {} experts",
                part.expert_of_token.len(),
                part.token_lists.len(),
                self.n_experts()
            ));
        }
        let mut parts = Vec::with_capacity(self.n_experts());
        for (e, (expert, rows)) in self.experts.iter().zip(&part.token_lists).enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = g.take_rows(x, rows)?;
            let ye = expert.forward_graph(g, binder, &format!("{prefix}.experts.{e}"), xe, ctx)?;
            parts.push((ye, rows.clone()));
        }
        let y = g.assemble(parts, t, d)?;
        Ok(MoeOutput {
            y,
            aux_loss: None,
            stats: RoutingStats {
                expert_counts: part.sizes(),
                dropped: 0,
                capacity: None,
            },
        })
    }

    fn topk_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<MoeOutput> {
        let Routing::TopK {
            router,
            k,
            capacity_ratio,
            balance_weight,
        } = &self.routing
        else {
            return Err(self.mismatch("topk"));
        };
        let n = self.n_experts();
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        let wg = binder.bind(g, &format!("{prefix}.router"), router)?;
        let logits = g.matmul(x, wg)?;
        let probs = g.softmax(logits)?;

        let cap = capacity(*capacity_ratio, t, *k, n);
        let p = g.value(probs).data().to_vec();
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut top1 = Vec::with_capacity(t);
        let mut dropped = 0;
        for tok in 0..t {
            let choice = top_k(&p[tok * n..(tok + 1) * n], *k);
            top1.push(choice[0]);
            for e in choice {
                if lists[e].len() < cap {
                    lists[e].push(tok);
                } else {
                    dropped += 1;
                }
            }
        }
        assert!(lists.iter().all(|l| l.len() <= cap), "expert capacity exceeded");

        let mut parts = Vec::new();
        for (e, rows) in lists.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = g.take_rows(x, rows)?;
            let ye = self.experts[e].forward_graph(g, binder, &format!("{prefix}.experts.{e}"), xe, ctx)?;
            let gate_idx: Vec<usize> = rows.iter().map(|&tok| tok * n + e).collect();
            let gates = g.take_elems(probs, &gate_idx)?;
            let ye = g.mul_row_scalars(ye, gates)?;
            parts.push((ye, rows.clone()));
        }
        let y = g.assemble(parts, t, d)?;
        let aux = balance_loss_graph(g, probs, &top1, *balance_weight)?;
        Ok(MoeOutput {
            y,
            aux_loss: Some(aux),
            stats: RoutingStats {
                expert_counts: lists.iter().map(Vec::len).collect(),
                dropped,
                capacity: Some(cap),
            },
        })
    }

    fn mismatch(&self, expected: &'static str) -> Error {
        Error::ModeMismatch {
            expected,
            actual: self.mode_name(),
        }
    }
}

/// Per-expert capacity `⌈C·T·k/N⌉`.
pub fn capacity(capacity_ratio: f64, tokens: usize, k: usize, experts: usize) -> usize {
    (capacity_ratio * tokens as f64 * k as f64 / experts as f64).ceil() as usize
}

/// `λ · N · Σ_i f_i · P_i` on the graph; `f` is treated as a constant.
fn balance_loss_graph(g: &mut Graph, probs: Var, top1: &[usize], weight: f64) -> Result<Var> {
    let (t, n) = as_matrix(g.value(probs))?;
    let mut frac = vec![0.0; n];
    for &e in top1 {
        frac[e] += 1.0 / t as f64;
    }
    let mean_p = g.mean_rows(probs)?;
    let weighted = g.mul_const(mean_p, frac)?;
    let s = g.sum(weighted)?;
    g.scale(s, weight * n as f64)
}

fn check_tokens(layer: &MoELayer, tokens: &Tensor) -> Result<()> {
    layer.validate()?;
    let (_, d) = as_matrix(tokens)?;
    if d != layer.experts[0].d_model() {
        return dim_err(format!(
            "tokens of width {d} for experts of width {}",
            layer.experts[0].d_model()
        ));
    }
    Ok(())
}

/// RUP forward on `tokens [T×d]`. The partition is drawn from `rng`; in
/// eval mode dropout is off.
pub fn moe_rup_forward(layer: &MoELayer, tokens: &Tensor, rng: &mut Rng, mode: Mode) -> Result<Tensor> {
    if !matches!(layer.routing, Routing::Rup) {
        return Err(layer.mismatch("rup"));
    }
    check_tokens(layer, tokens)?;
    let part = rup_partition(tokens.shape()[0], layer.n_experts(), rng)?;
    moe_rup_forward_with(layer, tokens, &part, rng, mode)
}

/// RUP forward with a given partition.
pub fn moe_rup_forward_with(
    layer: &MoELayer,
    tokens: &Tensor,
    part: &PartitionAssignment,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor> {
    if !matches!(layer.routing, Routing::Rup) {
        return Err(layer.mismatch("rup"));
    }
    check_tokens(layer, tokens)?;
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let x = g.constant(tokens.clone());
    let mut ctx = Ctx {
        train: mode == Mode::Train,
        rng,
        dropout: 0.0,
    };
    let out = layer.rup_graph(&mut g, &mut binder, "moe", x, part, &mut ctx)?;
    Ok(g.value(out.y).clone())
}

/// Gate matrix `[T×N]`: the router softmax with all but the top-k entries
/// of each row zeroed.
pub fn router_scores(layer: &MoELayer, tokens: &Tensor) -> Result<Tensor> {
    let Routing::TopK { router, k, .. } = &layer.routing else {
        return Err(layer.mismatch("topk"));
    };
    check_tokens(layer, tokens)?;
    let n = layer.n_experts();
    let logits = tokens.matmul(router)?;
    let probs = softmax_rows(logits.data(), n);
    let mut gates = vec![0.0; probs.len()];
    for (row, out) in probs.chunks(n).zip(gates.chunks_mut(n)) {
        for e in top_k(row, *k) {
            out[e] = row[e];
        }
    }
    Tensor::new(vec![tokens.shape()[0], n], gates)
}

/// Routed forward on `tokens [T×d]`: output, balance loss and dispatch stats.
pub fn moe_topk_forward(layer: &MoELayer, tokens: &Tensor, mode: Mode) -> Result<(Tensor, f64, RoutingStats)> {
    if !matches!(layer.routing, Routing::TopK { .. }) {
        return Err(layer.mismatch("topk"));
    }
    check_tokens(layer, tokens)?;
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let x = g.constant(tokens.clone());
    let mut rng = Rng::seed_from_u64(EVAL_SEED);
    let mut ctx = Ctx {
        train: mode == Mode::Train,
        rng: &mut rng,
        dropout: 0.0,
    };
    let out = layer.topk_graph(&mut g, &mut binder, "moe", x, &mut ctx)?;
    let aux = out.aux_loss.map(|v| g.value(v).item()).unwrap_or(0.0);
    Ok((g.value(out.y).clone(), aux, out.stats))
}

/// `λ · N · Σ_i f_i · P_i`, with `f_i` the fraction of tokens whose top-1
/// choice is expert `i` and `P_i` the mean gate probability of expert `i`.
pub fn load_balance_loss(gate_probs: &Tensor, top1: &[usize], weight: f64) -> Result<f64> {
    let (t, n) = as_matrix(gate_probs)?;
    if top1.len() != t || top1.iter().any(|&e| e >= n) {
        return Err(Error::InvalidArgument(format!(
            "{} top-1 choices for {t} tokens over {n} experts",
            top1.len()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(gate_probs.clone());
    let l = balance_loss_graph(&mut g, p, top1, weight)?;
    Ok(g.value(l).item())
}
