//! Experts weights averaging: the per-step mixing rule, share-rate
//! schedules, MoE placement, and the conversions between MoE and dense form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoELayer, MoeMode, Routing};
use crate::tensor::Tensor;
use crate::vit::{FFNParams, Mlp, Model, ViTConfig};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
}

/// Unit in which a schedule's `position` and `horizon` are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Epoch,
    Step,
}

/// Produces the share rate β used at each EWA application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareSchedule {
    pub kind: ScheduleKind,
    pub share_rate: f64,
    /// Total epochs or steps, depending on `granularity`. Filled in by the
    /// trainer when left at zero.
    #[serde(default)]
    pub horizon: u64,
    pub granularity: Granularity,
    /// EWA is switched off from `early_cutoff_fraction · horizon` onward;
    /// `1.0` keeps it on for the whole run.
    #[serde(default = "one")]
    pub early_cutoff_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ShareSchedule {
    fn default() -> Self {
        Self::linear(0.3, 0, Granularity::Epoch)
    }
}

impl ShareSchedule {
    pub fn linear(share_rate: f64, horizon: u64, granularity: Granularity) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            share_rate,
            horizon,
            granularity,
            early_cutoff_fraction: 1.0,
        }
    }

    pub fn constant(share_rate: f64, horizon: u64, granularity: Granularity) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            ..Self::linear(share_rate, horizon, granularity)
        }
    }

    /// Constant share rate for the first half of the run only.
    pub fn early(share_rate: f64, horizon: u64, granularity: Granularity) -> Self {
        Self {
            early_cutoff_fraction: 0.5,
            ..Self::constant(share_rate, horizon, granularity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.share_rate) {
            return Err(Error::Config(format!("share_rate {} outside [0, 1]", self.share_rate)));
        }
        if !(self.early_cutoff_fraction > 0.0 && self.early_cutoff_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "early_cutoff_fraction {} outside (0, 1]",
                self.early_cutoff_fraction
            )));
        }
        Ok(())
    }
}

/// Share rate at `position` (0-based epoch or step).
///
/// Linear: `share_rate · position / horizon`; constant: `share_rate`.
/// Zero once `position ≥ early_cutoff_fraction · horizon` when the cutoff
/// is below one. Positions past the horizon are clamped to it.
pub fn schedule_beta(schedule: &ShareSchedule, position: u64) -> f64 {
    let horizon = schedule.horizon.max(1);
    let pos = position.min(horizon);
    if schedule.early_cutoff_fraction < 1.0
        && pos as f64 >= schedule.early_cutoff_fraction * horizon as f64
    {
        return 0.0;
    }
    match schedule.kind {
        ScheduleKind::Constant => schedule.share_rate,
        ScheduleKind::Linear => schedule.share_rate * (pos as f64 / horizon as f64),
    }
}

fn check_experts(experts: &[FFNParams]) -> Result<()> {
    let first = experts
        .first()
        .ok_or_else(|| Error::ExpertShape("no experts".into()))?;
    if experts.iter().any(|e| !e.same_shape(first)) {
        return Err(Error::ExpertShape("experts have differing shapes".into()));
    }
    Ok(())
}

/// One EWA mixing step: for every array of every expert,
/// `p̄_i = (1-β)·p_i + Σ_{j≠i} β/(N-1)·p_j`. Weights and biases are both
/// mixed. A single expert is returned unchanged.
pub fn ewa_step(experts: &[FFNParams], beta: f64) -> Result<Vec<FFNParams>> {
    check_experts(experts)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("share rate {beta} outside [0, 1]")));
    }
    let n = experts.len();
    if n == 1 {
        return Ok(experts.to_vec());
    }
    let keep = 1.0 - beta;
    let share = beta / (n - 1) as f64;
    let mut out: Vec<FFNParams> = experts.iter().map(|e| e.with_flat(&e.flatten())).collect::<Result<_>>()?;
    for a in 0..4 {
        let src: Vec<&[f64]> = experts.iter().map(|e| e.arrays()[a].data()).collect();
        for (i, expert) in out.iter_mut().enumerate() {
            let dst = expert.arrays_mut()[a].data_mut();
            for (p, v) in dst.iter_mut().enumerate() {
                let own = src[i][p];
                // coordinates on which all experts agree are an exact fixed point
                if src.iter().all(|s| s[p] == own) {
                    *v = own;
                    continue;
                }
                let mut others = 0.0;
                for (j, s) in src.iter().enumerate() {
                    if j != i {
                        others += s[p];
                    }
                }
                *v = keep * own + share * others;
            }
        }
    }
    Ok(out)
}

/// Applies [`ewa_step`] to a MoE layer's experts in place.
pub fn ewa_layer(layer: &mut MoELayer, beta: f64) -> Result<()> {
    layer.experts = ewa_step(&layer.experts, beta)?;
    Ok(())
}

/// Collapses a MoE layer to one FFN by averaging every expert array.
pub fn convert_moe_to_ffn(layer: &MoELayer) -> Result<FFNParams> {
    check_experts(&layer.experts)?;
    let n = layer.experts.len() as f64;
    let mut out = layer.experts[0].with_flat(&layer.experts[0].flatten())?;
    for a in 0..4 {
        let dst = out.arrays_mut()[a].data_mut();
        for (p, v) in dst.iter_mut().enumerate() {
            let first = layer.experts[0].arrays()[a].data()[p];
            if layer.experts.iter().all(|e| e.arrays()[a].data()[p] == first) {
                *v = first;
                continue;
            }
            let s: f64 = layer.experts.iter().map(|e| e.arrays()[a].data()[p]).sum();
            *v = s / n;
        }
    }
    Ok(out)
}

/// `n` exact copies of `ffn`; routed layers get a freshly drawn router.
pub fn expand_ffn_to_moe(ffn: &FFNParams, n: usize, mode: &MoeMode, router_rng: &mut Rng) -> Result<MoELayer> {
    if n == 0 {
        return Err(Error::InvalidArgument("a MoE layer needs at least one expert".into()));
    }
    let expert = ffn.with_flat(&ffn.flatten())?;
    let routing = MoELayer::routing_for(mode, ffn.d_model(), n, router_rng)?;
    Ok(MoELayer {
        experts: vec![expert; n],
        routing,
    })
}

/// Which blocks carry MoE layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// No MoE layers: a plain ViT.
    #[serde(rename = "none")]
    None,
    /// Every other block, odd zero-based indices.
    #[serde(rename = "every-2")]
    Every2,
    /// The final four blocks.
    #[serde(rename = "last-4")]
    Last4,
}

impl Placement {
    pub fn blocks(self, depth: usize) -> Result<Vec<usize>> {
        match self {
            Placement::None => Ok(Vec::new()),
            Placement::Every2 => Ok((1..depth).step_by(2).collect()),
            Placement::Last4 if depth >= 4 => Ok((depth - 4..depth).collect()),
            Placement::Last4 => Err(Error::Placement(format!("last-4 needs depth >= 4, got {depth}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Every2 => "every-2",
            Placement::Last4 => "last-4",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Placement::None),
            "every-2" => Ok(Placement::Every2),
            "last-4" => Ok(Placement::Last4),
            other => Err(Error::Placement(format!("unknown placement {other:?}"))),
        }
    }
}

/// Randomly initialized ViT whose FFNs at `placement` are MoE layers with
/// `n_experts` independently initialized experts.
pub fn build_ewa_model(
    config: &ViTConfig,
    placement: Placement,
    n_experts: usize,
    mode: &MoeMode,
    rng: &mut Rng,
) -> Result<Model> {
    let at = placement.blocks(config.depth)?;
    if !at.is_empty() && n_experts == 0 {
        return Err(Error::InvalidArgument("n_experts must be at least 1".into()));
    }
    let mut model = Model::new_dense(config, rng)?;
    for &b in &at {
        let layer = MoELayer::random(config.d_model, config.d_hidden(), n_experts, mode, rng)?;
        model.blocks[b].mlp = Mlp::Moe(layer);
    }
    Ok(model)
}

/// Fine-tuning initialization: every FFN at `placement` becomes `n_experts`
/// copies of itself; everything else is inherited verbatim.
pub fn expand_model(
    dense: &Model,
    placement: Placement,
    n_experts: usize,
    mode: &MoeMode,
    router_rng: &mut Rng,
) -> Result<Model> {
    let at = placement.blocks(dense.config.depth)?;
    let mut model = dense.clone();
    for &b in &at {
        let Mlp::Dense(ffn) = &model.blocks[b].mlp else {
            return Err(Error::Placement(format!("block {b} already holds a MoE layer")));
        };
        let layer = expand_ffn_to_moe(ffn, n_experts, mode, router_rng)?;
        model.blocks[b].mlp = Mlp::Moe(layer);
    }
    Ok(model)
}

/// Replaces every MoE layer by the average of its experts. All other
/// parameters are copied unchanged, so the result is a plain ViT.
pub fn convert_model(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for block in &mut out.blocks {
        if let Mlp::Moe(layer) = &block.mlp {
            block.mlp = Mlp::Dense(convert_moe_to_ffn(layer)?);
        }
    }
    for (_, t) in out.params_mut() {
        t.zero_grad();
    }
    Ok(out)
}

/// Applies one EWA step with share rate `beta` to every MoE layer.
/// Returns the number of layers mixed.
pub fn ewa_model(model: &mut Model, beta: f64) -> Result<usize> {
    let mut n = 0;
    for layer in model.moe_layers_mut() {
        ewa_layer(layer, beta)?;
        n += 1;
    }
    Ok(n)
}

/// Per-parameter mean over experts, flattened.
pub fn expert_mean(experts: &[FFNParams]) -> Vec<f64> {
    let flats: Vec<Vec<f64>> = experts.iter().map(FFNParams::flatten).collect();
    let n = flats.len() as f64;
    (0..flats[0].len())
        .map(|p| flats.iter().map(|f| f[p]).sum::<f64>() / n)
        .collect()
}

/// Root-sum-square deviation of experts from their mean.
pub fn expert_spread(experts: &[FFNParams]) -> f64 {
    let mean = expert_mean(experts);
    experts
        .iter()
        .map(|e| {
            e.flatten()
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m) * (a - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Factor by which one EWA step scales deviations from the expert mean.
pub fn contraction_factor(beta: f64, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    1.0 - beta * n as f64 / (n - 1) as f64
}

/// Scalar expert helper for tests and examples: every array is `[1×1]`/`[1]`
/// filled with `v`.
pub fn scalar_expert(v: f64) -> FFNParams {
    FFNParams {
        w1: Tensor::full(vec![1, 1], v),
        b1: Tensor::full(vec![1], v),
        w2: Tensor::full(vec![1, 1], v),
        b2: Tensor::full(vec![1], v),
    }
}

/// Whether a layer is routed (carries a learned router).
pub fn is_routed(layer: &MoELayer) -> bool {
    matches!(layer.routing, Routing::TopK { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::moe_rup_forward;
    use crate::vit::{ffn_forward, Mode};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use crate::Rng;

    fn values(experts: &[FFNParams]) -> Vec<f64> {
        experts.iter().map(|e| e.w1.data()[0]).collect()
    }

    #[test]
    fn ewa_step_examples() {
        let two = [scalar_expert(1.0), scalar_expert(3.0)];
        assert_eq!(values(&ewa_step(&two, 0.5).unwrap()), vec![2.0, 2.0]);

        let four: Vec<FFNParams> = (1..=4).map(|v| scalar_expert(v as f64)).collect();
        assert_eq!(ewa_step(&four, 0.0).unwrap(), four);
        let mixed = ewa_step(&four, 0.3).unwrap();
        for (got, want) in values(&mixed).iter().zip([1.6, 2.2, 2.8, 3.4]) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        // biases are mixed too
        assert!((mixed[0].b2.data()[0] - 1.6).abs() < 1e-14);

        let one = [scalar_expert(5.0)];
        assert_eq!(ewa_step(&one, 0.7).unwrap(), one.to_vec());
    }

    #[test]
    fn ewa_step_errors() {
        let mut rng = Rng::seed_from_u64(0);
        let mismatched = [FFNParams::random(2, 4, &mut rng), FFNParams::random(2, 3, &mut rng)];
        assert!(matches!(ewa_step(&mismatched, 0.1), Err(Error::ExpertShape(_))));
        assert!(ewa_step(&[scalar_expert(1.0), scalar_expert(2.0)], 1.5).is_err());
    }

    #[test]
    fn schedule_examples() {
        let lin = ShareSchedule::linear(0.4, 10, Granularity::Epoch);
        assert_eq!(schedule_beta(&lin, 0), 0.0);
        assert_eq!(schedule_beta(&lin, 10), 0.4);
        assert!((schedule_beta(&lin, 5) - 0.2).abs() < 1e-15);

        let c = ShareSchedule::constant(0.3, 10, Granularity::Step);
        assert_eq!(schedule_beta(&c, 0), 0.3);
        assert_eq!(schedule_beta(&c, 9), 0.3);

        let early = ShareSchedule::early(0.3, 20, Granularity::Epoch);
        assert!((0..10).all(|e| schedule_beta(&early, e) == 0.3));
        assert!((10..20).all(|e| schedule_beta(&early, e) == 0.0));
    }

    #[test]
    fn placement_examples() {
        assert_eq!(Placement::Every2.blocks(12).unwrap(), vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(Placement::Last4.blocks(12).unwrap(), vec![8, 9, 10, 11]);
        assert!(Placement::Last4.blocks(3).is_err());
        assert!(Placement::None.blocks(5).unwrap().is_empty());
        assert_eq!("every-2".parse::<Placement>().unwrap(), Placement::Every2);
    }

    #[test]
    fn convert_examples() {
        let layer = MoELayer {
            experts: (1..=4).map(|v| scalar_expert(v as f64)).collect(),
            routing: Routing::Rup,
        };
        let f = convert_moe_to_ffn(&layer).unwrap();
        assert_eq!(f.w1.data()[0], 2.5);

        let mut rng = Rng::seed_from_u64(1);
        let p = FFNParams::random(3, 6, &mut rng);
        let expanded = expand_ffn_to_moe(&p, 4, &MoeMode::Rup, &mut rng).unwrap();
        assert!(expanded.experts.iter().all(|e| *e == p));
        assert_eq!(convert_moe_to_ffn(&expanded).unwrap(), p);
        assert_eq!(ewa_step(&expanded.experts, 0.4).unwrap(), expanded.experts);

        let x = Tensor::randn(vec![7, 3], 1.0, &mut rng);
        let dense = ffn_forward(&p, &x).unwrap();
        let y = moe_rup_forward(&expanded, &x, &mut rng, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-12);

        let routed = expand_ffn_to_moe(&p, 4, &MoeMode::top1(), &mut rng).unwrap();
        assert!(is_routed(&routed));
        assert!(expand_ffn_to_moe(&p, 0, &MoeMode::Rup, &mut rng).is_err());
    }

    #[test]
    fn convert_model_without_moe_is_identity() {
        let mut rng = Rng::seed_from_u64(2);
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 8,
            n_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            n_classes: 3,
            dropout: 0.0,
            stochastic_depth: 0.0,
        };
        let m = Model::new_dense(&cfg, &mut rng).unwrap();
        assert_eq!(convert_model(&m).unwrap(), m);
    }

    fn arb_experts() -> impl Strategy<Value = (Vec<FFNParams>, f64)> {
        (prop::sample::select(vec![2usize, 3, 4, 8]), 0.0f64..=1.0, any::<u64>()).prop_map(|(n, beta, seed)| {
            let mut rng = Rng::seed_from_u64(seed);
            let experts = (0..n)
                .map(|_| {
                    let mut f = FFNParams::random(3, 5, &mut rng);
                    for t in f.arrays_mut() {
                        for v in t.data_mut() {
                            *v += rand::Rng::random_range(&mut rng, -1.0..1.0);
                        }
                    }
                    f
                })
                .collect();
            (experts, beta)
        })
    }

    proptest! {
        #[test]
        fn ewa_preserves_mean_and_contracts((experts, beta) in arb_experts()) {
            let n = experts.len();
            let before = expert_mean(&experts);
            let mixed = ewa_step(&experts, beta).unwrap();
            let after = expert_mean(&mixed);
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-14);
            }
            let factor = contraction_factor(beta, n);
            let mean = before;
            for (e0, e1) in experts.iter().zip(&mixed) {
                for ((x0, x1), m) in e0.flatten().iter().zip(e1.flatten()).zip(&mean) {
                    prop_assert!(((x1 - m) - factor * (x0 - m)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn convert_commutes_with_ewa((experts, beta) in arb_experts()) {
            let layer = MoELayer { experts: experts.clone(), routing: Routing::Rup };
            let before = convert_moe_to_ffn(&layer).unwrap().flatten();
            let mixed = MoELayer { experts: ewa_step(&experts, beta).unwrap(), routing: Routing::Rup };
            let after = convert_moe_to_ffn(&mixed).unwrap().flatten();
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }

        #[test]
        fn equal_experts_are_a_fixed_point(seed in any::<u64>(), beta in 0.0f64..=1.0, n in 2usize..6) {
            let mut rng = Rng::seed_from_u64(seed);
            let p = FFNParams::random(2, 4, &mut rng);
            let experts = vec![p; n];
            let mixed = ewa_step(&experts, beta).unwrap();
            for (a, b) in experts.iter().zip(&mixed) {
                for (x, y) in a.flatten().iter().zip(b.flatten()) {
                    prop_assert_eq!(*x, y);
                }
            }
        }
    }
}
