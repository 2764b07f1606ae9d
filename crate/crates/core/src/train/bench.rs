//! Per-step latency of vanilla vs EWA training and of dense vs converted
//! inference.

use std::time::Instant;

use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ewa::{build_ewa_model, convert_model, Placement, ShareSchedule};
use crate::tensor::Tensor;
use crate::train::config::TrainConfig;
use crate::train::trainer::Session;
use crate::vit::{Mode, Model};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Dispersion {
    pub n: usize,
    pub median: f64,
    /// Median absolute deviation.
    pub mad: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Dispersion {
    pub fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |f: f64| s[((s.len() - 1) as f64 * f).round() as usize];
        let median = median(&s);
        let mut dev: Vec<f64> = s.iter().map(|v| (v - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        Self {
            n: s.len(),
            median,
            mad: median_sorted(&dev),
            p10: q(0.1),
            p90: q(0.9),
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    median_sorted(sorted)
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub placement: &'static str,
    pub n_experts: usize,
    pub vanilla_step: Dispersion,
    /// A second vanilla run measured alongside; its ratio to the first is
    /// the noise floor.
    pub vanilla_repeat_step: Dispersion,
    pub ewa_step: Dispersion,
    pub train_ratio: f64,
    pub noise_ratio: f64,
    pub dense_inference: Dispersion,
    pub converted_inference: Dispersion,
    pub inference_ratio: f64,
}

impl LatencyReport {
    pub fn to_text(&self) -> String {
        let ms = |d: &Dispersion| {
            format!(
                "median {:.3} ms (mad {:.3}, p10 {:.3}, p90 {:.3}, n={})",
                d.median * 1e3,
                d.mad * 1e3,
                d.p10 * 1e3,
                d.p90 * 1e3,
                d.n
            )
        };
        format!(
            "batch {}, placement {}, {} experts\n\
             train step vanilla:  {}\n\
             train step vanilla': {}\n\
             train step EWA:      {}\n\
             EWA/vanilla training ratio {:.3} (vanilla'/vanilla {:.3})\n\
             inference dense:     {}\n\
             inference converted: {}\n\
             converted/dense inference ratio {:.3}\n",
            self.batch_size,
            self.placement,
            self.n_experts,
            ms(&self.vanilla_step),
            ms(&self.vanilla_repeat_step),
            ms(&self.ewa_step),
            self.train_ratio,
            self.noise_ratio,
            ms(&self.dense_inference),
            ms(&self.converted_inference),
            self.inference_ratio
        )
    }
}

/// Times `steps` training steps (after `warmup` untimed ones) of a vanilla
/// model and of the configured EWA model on one fixed random batch,
/// interleaving the runs so drift affects both alike. The EWA run uses a
/// constant share rate so mixing does real work on every step. Inference
/// compares a dense model against the converted EWA model.
pub fn bench_latency(cfg: &TrainConfig, steps: usize, warmup: usize) -> Result<LatencyReport> {
    if steps == 0 {
        return Err(Error::InvalidArgument("bench needs at least one timed step".into()));
    }
    if cfg.moe.placement == Placement::None {
        return Err(Error::Config("bench compares against an EWA model; moe.placement is none".into()));
    }
    let mut cfg = cfg.clone();
    cfg.ewa = ShareSchedule::constant(cfg.ewa.share_rate.max(0.1), 1, cfg.ewa.granularity);
    cfg.lr_schedule.warmup_epochs = 0.0;
    cfg.validate()?;
    let m = &cfg.model;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let images = Tensor::randn(vec![cfg.batch_size, m.channels, m.image_size, m.image_size], 1.0, &mut rng);
    let labels: Vec<usize> = (0..cfg.batch_size).map(|i| i % m.n_classes).collect();

    let total = (steps + warmup) * cfg.batch_size;
    let mut runs = [
        Session::new(&cfg, Model::new_dense(m, &mut rng)?, total)?,
        Session::new(&cfg, Model::new_dense(m, &mut rng)?, total)?,
        Session::new(
            &cfg,
            build_ewa_model(m, cfg.moe.placement, cfg.moe.n_experts, &cfg.moe.moe_mode(), &mut rng)?,
            total,
        )?,
    ];
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..steps + warmup {
        // rotate the order so no run always goes first
        for k in 0..3 {
            let r = (i + k) % 3;
            let t0 = Instant::now();
            runs[r].train_step(images.clone(), &labels, 0)?;
            if i >= warmup {
                times[r].push(t0.elapsed().as_secs_f64());
            }
        }
    }
    let [v, v2, e] = times.map(|t| Dispersion::of(&t));

    let dense = runs[0].model.clone();
    let converted = convert_model(&runs[2].model)?;
    let mut inf = [Vec::new(), Vec::new()];
    for i in 0..steps + warmup {
        for k in 0..2 {
            let r = (i + k) % 2;
            let model = if r == 0 { &dense } else { &converted };
            let t0 = Instant::now();
            model.logits(&images, Mode::Eval, None)?;
            if i >= warmup {
                inf[r].push(t0.elapsed().as_secs_f64());
            }
        }
    }
    let [di, ci] = inf.map(|t| Dispersion::of(&t));
    Ok(LatencyReport {
        batch_size: cfg.batch_size,
        placement: cfg.moe.placement.name(),
        n_experts: cfg.moe.n_experts,
        vanilla_step: v,
        vanilla_repeat_step: v2,
        ewa_step: e,
        train_ratio: e.median / v.median,
        noise_ratio: v2.median / v.median,
        dense_inference: di,
        converted_inference: ci,
        inference_ratio: ci.median / di.median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersion_examples() {
        let d = Dispersion::of(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(d.median, 2.5);
        assert_eq!(d.mad, 1.0);
        assert_eq!(d.n, 4);
        let d = Dispersion::of(&[5.0]);
        assert_eq!((d.median, d.mad, d.p10, d.p90), (5.0, 0.0, 5.0, 5.0));
    }

    #[test]
    fn tiny_bench_runs() {
        let mut cfg = TrainConfig::desk();
        cfg.model = crate::vit::ViTConfig {
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
        cfg.batch_size = 4;
        cfg.dataset = "synthetic:n=8,classes=3,size=8,channels=1".into();
        let r = bench_latency(&cfg, 5, 1).unwrap();
        assert_eq!(r.ewa_step.n, 5);
        assert!(r.train_ratio > 0.0 && r.inference_ratio > 0.0);
        assert!(r.to_text().contains("inference ratio"));
        cfg.moe.placement = Placement::None;
        assert!(bench_latency(&cfg, 5, 1).is_err());
    }
}
