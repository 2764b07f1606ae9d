//! Training, fine-tuning, evaluation and offline conversion.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::ewa::{build_ewa_model, convert_model, ewa_model, expand_model, schedule_beta, Granularity, Placement};
use crate::moe::Routing;
use crate::tensor::Tensor;
use crate::train::checkpoint::{Checkpoint, RngState};
use crate::train::config::TrainConfig;
use crate::train::data::{load_dataset, Dataset};
use crate::train::optim::Optimizer;
use crate::train::schedule::cosine_lr;
use crate::vit::{smoothed_targets, Binder, Mode, Model, ViTConfig};
use crate::Rng;

const INIT_STREAM: u64 = 0;
const RUN_STREAM: u64 = 2;
const ROUTER_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub aux_loss: f64,
    pub lr: f64,
    pub beta: f64,
    /// MoE layers mixed by the EWA hook at this step.
    pub ewa_layers: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// `converted` for RUP and dense models, `moe` for routed models.
    pub eval_form: &'static str,
    pub beta_first: f64,
    pub beta_last: f64,
    /// Steps of this epoch at which EWA ran with β > 0.
    pub ewa_active_steps: u64,
    pub mean_step_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final model in training form (MoE layers kept).
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.eval_accuracy)
    }
}

/// Loads the training set and the held-out set named by the config. When
/// no eval set is configured a synthetic dataset gets a fresh companion and
/// file datasets give up a seeded 10% split.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let spec = cfg.dataset_spec()?;
    let train = load_dataset(&spec)?;
    match cfg.eval_dataset_spec()? {
        Some(e) => Ok((train, load_dataset(&e)?)),
        None => match spec.eval_companion() {
            Some(e) => Ok((train, load_dataset(&e)?)),
            None => train.split(0.1, cfg.seed),
        },
    }
}

fn check_data(model: &ViTConfig, data: &Dataset) -> Result<()> {
    if data.channels != model.channels || data.height != model.image_size || data.width != model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.height, data.width, model.channels, model.image_size, model.image_size
        )));
    }
    if data.n_classes > model.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.n_classes, model.n_classes
        )));
    }
    Ok(())
}

/// Mean loss (without label smoothing) and top-1 accuracy in eval mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    check_data(&model.config, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let logits = model.logits(&images, Mode::Eval, None)?;
        let k = model.config.n_classes;
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += (pred == l) as usize;
        }
    }
    let n = data.len();
    Ok(EvalReport {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        n,
    })
}

fn is_routed(model: &Model) -> bool {
    model.moe_layers().any(|l| matches!(l.routing, Routing::TopK { .. }))
}

/// Evaluates the inference form: the converted dense model for RUP (and
/// dense) models, the MoE model itself for routed ones.
pub fn evaluate_inference_form(model: &Model, data: &Dataset, batch_size: usize) -> Result<(EvalReport, &'static str)> {
    if is_routed(model) {
        Ok((evaluate(model, data, batch_size)?, "moe"))
    } else {
        Ok((evaluate(&convert_model(model)?, data, batch_size)?, "converted"))
    }
}

/// One training run's mutable state: model, optimizer and run generator.
pub struct Session {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub rng: Rng,
    pub step: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps_per_epoch: u64,
    /// Schedule with the horizon filled in.
    pub ewa: crate::ewa::ShareSchedule,
}

impl Session {
    pub fn new(cfg: &TrainConfig, model: Model, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        let spe = n_train.div_ceil(cfg.batch_size).max(1) as u64;
        let total_steps = match cfg.max_steps {
            Some(m) => m.min(cfg.epochs * spe),
            None => cfg.epochs * spe,
        };
        let warmup_steps = ((cfg.lr_schedule.warmup_epochs * spe as f64).round() as u64).min(total_steps);
        let mut ewa = cfg.ewa.clone();
        if ewa.horizon == 0 {
            ewa.horizon = match ewa.granularity {
                Granularity::Epoch => total_steps.div_ceil(spe),
                Granularity::Step => total_steps,
            };
        }
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer.clone())?,
            rng: stream_rng(cfg.seed, RUN_STREAM),
            cfg: cfg.clone(),
            model,
            step: 0,
            total_steps,
            warmup_steps,
            steps_per_epoch: spe,
            ewa,
        })
    }

    pub fn lr(&self) -> f64 {
        let lr = self.cfg.optimizer.lr;
        if self.cfg.lr_schedule.cosine {
            cosine_lr(self.step, self.total_steps, self.warmup_steps, lr)
        } else if self.step < self.warmup_steps {
            lr * self.step as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }

    pub fn beta(&self, epoch: u64) -> f64 {
        let pos = match self.ewa.granularity {
            Granularity::Epoch => epoch,
            Granularity::Step => self.step,
        };
        schedule_beta(&self.ewa, pos)
    }

    fn augment(&mut self, images: &mut Tensor, labels: &[usize]) -> Result<Tensor> {
        let k = self.model.config.n_classes;
        let mut targets = smoothed_targets(labels, k, self.cfg.label_smoothing)?;
        let shape = images.shape().to_vec();
        let (b, w) = (shape[0], shape[3]);
        if self.cfg.augment.flip {
            let per = images.numel() / b;
            let data = images.data_mut();
            for i in 0..b {
                if self.rng.random::<bool>() {
                    for row in data[i * per..(i + 1) * per].chunks_mut(w) {
                        row.reverse();
                    }
                }
            }
        }
        let alpha = self.cfg.augment.mixup_alpha;
        if alpha > 0.0 && b > 1 {
            let lam: f64 = Beta::new(alpha, alpha)
                .map_err(|e| Error::Config(format!("mixup: {e}")))?
                .sample(&mut self.rng);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut self.rng);
            let mix = |t: &Tensor| -> Vec<f64> {
                let per = t.numel() / b;
                let d = t.data();
                let mut out = Vec::with_capacity(d.len());
                for (i, &j) in perm.iter().enumerate() {
                    for p in 0..per {
                        out.push(lam * d[i * per + p] + (1.0 - lam) * d[j * per + p]);
                    }
                }
                out
            };
            *images = Tensor::new(shape, mix(images))?;
            targets = Tensor::new(vec![b, k], mix(&targets))?;
        }
        Ok(targets)
    }

    fn diverged(&self, reason: String) -> Error {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.step = self.step;
        ck.epoch = self.step / self.steps_per_epoch;
        ck.rng = Some(RngState::capture(&self.rng));
        ck.train = Some(self.cfg.clone());
        ck.provenance.push(format!("last good state before divergence at step {}", self.step));
        Error::Diverged {
            step: self.step,
            reason,
            last_good: Some(Box::new(ck)),
        }
    }

    /// forward → loss (+ aux) → backward → optimizer → EWA on every MoE layer.
    pub fn train_step(&mut self, mut images: Tensor, labels: &[usize], epoch: u64) -> Result<StepRecord> {
        let start = Instant::now();
        let targets = self.augment(&mut images, labels)?;
        let mut g = Graph::new();
        let mut binder = Binder::trainable();
        let recorded = (|| -> Result<_> {
            let out = self.model.forward(&mut g, &mut binder, &images, Mode::Train, Some(&mut self.rng))?;
            let ce = g.softmax_cross_entropy(out.logits, &targets)?;
            let (loss, aux) = match out.aux_loss {
                Some(a) => (g.add(ce, a)?, g.value(a).item()),
                None => (ce, 0.0),
            };
            Ok((loss, aux))
        })();
        let (loss, aux) = match recorded {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(self.diverged(format!("non-finite {op} in forward"))),
            Err(e) => return Err(e),
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(self.diverged(format!("loss is {loss_value}")));
        }
        let grads = match g.backward(loss) {
            Ok(gr) => gr,
            Err(Error::NonFinite { op }) => return Err(self.diverged(format!("non-finite {op} in backward"))),
            Err(e) => return Err(e),
        };
        self.model.zero_grad();
        self.model.accumulate_grads(&grads, binder.bound())?;
        let lr = self.lr();
        if let Err(e) = self.optimizer.step(self.model.params_mut(), lr) {
            return Err(match e {
                Error::NonFiniteGradient { .. } | Error::NonFiniteUpdate { .. } => self.diverged(e.to_string()),
                e => e,
            });
        }
        let beta = self.beta(epoch);
        let ewa_layers = ewa_model(&mut self.model, beta)?;
        let rec = StepRecord {
            step: self.step,
            epoch,
            loss: loss_value,
            aux_loss: aux,
            lr,
            beta,
            ewa_layers,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self, epoch: u64, provenance: Vec<String>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.step = self.step;
        ck.epoch = epoch;
        ck.rng = Some(RngState::capture(&self.rng));
        ck.train = Some(self.cfg.clone());
        ck.provenance = provenance;
        ck
    }
}

/// Runs the training loop on an already built model.
pub fn train_model(
    cfg: &TrainConfig,
    model: Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    provenance: Vec<String>,
) -> Result<TrainOutcome> {
    check_data(&model.config, data)?;
    if let Some(e) = eval {
        check_data(&model.config, e)?;
    }
    let mut s = Session::new(cfg, model, data.len())?;
    info!(
        "training {} params ({} MoE blocks {:?}), {} steps of batch {}, ewa {:?} share {} horizon {}",
        s.model.param_count(),
        s.model.moe_blocks().len(),
        s.model.moe_blocks(),
        s.total_steps,
        cfg.batch_size,
        s.ewa.kind,
        s.ewa.share_rate,
        s.ewa.horizon
    );
    let mut steps = Vec::with_capacity(s.total_steps as usize);
    let mut epochs = Vec::new();
    let mut epoch = 0;
    while s.step < s.total_steps {
        let order = data.epoch_order(cfg.seed, epoch);
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            if s.step >= s.total_steps {
                break;
            }
            let (images, labels) = data.batch(chunk)?;
            let rec = s.train_step(images, &labels, epoch)?;
            debug!(
                "step {} loss {:.4} aux {:.4} lr {:.3e} beta {:.4} {:.3}s",
                rec.step, rec.loss, rec.aux_loss, rec.lr, rec.beta, rec.seconds
            );
            steps.push(rec);
        }
        let ep: &[StepRecord] = &steps[first..];
        let n = ep.len().max(1) as f64;
        let due = (epoch + 1) % cfg.eval_every == 0 || s.step >= s.total_steps;
        let (report, form) = match eval {
            Some(e) if due => {
                let (r, f) = evaluate_inference_form(&s.model, e, 256)?;
                (Some(r), f)
            }
            _ => (None, "none"),
        };
        let rec = EpochRecord {
            epoch,
            steps: ep.len() as u64,
            train_loss: ep.iter().map(|r| r.loss).sum::<f64>() / n,
            eval_loss: report.map_or(f64::NAN, |r| r.loss),
            eval_accuracy: report.map_or(f64::NAN, |r| r.accuracy),
            eval_form: form,
            beta_first: ep.first().map_or(0.0, |r| r.beta),
            beta_last: ep.last().map_or(0.0, |r| r.beta),
            ewa_active_steps: ep.iter().filter(|r| r.beta > 0.0 && r.ewa_layers > 0).count() as u64,
            mean_step_seconds: ep.iter().map(|r| r.seconds).sum::<f64>() / n,
        };
        info!(
            "epoch {} train loss {:.4} eval loss {:.4} acc {:.4} ({}) beta {:.4}..{:.4} {:.3}s/step",
            rec.epoch,
            rec.train_loss,
            rec.eval_loss,
            rec.eval_accuracy,
            rec.eval_form,
            rec.beta_first,
            rec.beta_last,
            rec.mean_step_seconds
        );
        epochs.push(rec);
        epoch += 1;
    }
    let checkpoint = s.checkpoint(epoch, provenance);
    Ok(TrainOutcome {
        model: s.model,
        checkpoint,
        steps,
        epochs,
    })
}

/// From-scratch training: builds the MoE-form model from the config seed.
pub fn train(cfg: &TrainConfig, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init = stream_rng(cfg.seed, INIT_STREAM);
    let model = build_ewa_model(
        &cfg.model,
        cfg.moe.placement,
        cfg.moe.n_experts,
        &cfg.moe.moe_mode(),
        &mut init,
    )?;
    let provenance = vec![format!(
        "trained from scratch: seed {} placement {} experts {} mode {}",
        cfg.seed,
        cfg.moe.placement.name(),
        cfg.moe.n_experts,
        cfg.moe.moe_mode().name()
    )];
    train_model(cfg, model, data, eval, provenance)
}

fn same_architecture(a: &ViTConfig, b: &ViTConfig) -> bool {
    (a.image_size, a.patch_size, a.channels, a.d_model, a.n_heads, a.depth, a.mlp_ratio, a.n_classes)
        == (b.image_size, b.patch_size, b.channels, b.d_model, b.n_heads, b.depth, b.mlp_ratio, b.n_classes)
}

/// Builds the MoE model for fine-tuning from a dense checkpoint: FFNs at
/// the configured placement become copies, everything else is inherited.
/// Dropout rates come from `cfg`.
pub fn finetune_init(cfg: &TrainConfig, source: &Checkpoint) -> Result<Model> {
    if source.is_moe() {
        return Err(Error::Checkpoint(
            "fine-tuning starts from a dense checkpoint; convert it first".into(),
        ));
    }
    if !same_architecture(&cfg.model, &source.model) {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match config {:?}",
            source.model, cfg.model
        )));
    }
    let mut dense = source.to_model()?;
    dense.config.dropout = cfg.model.dropout;
    dense.config.stochastic_depth = cfg.model.stochastic_depth;
    let mut router_rng = stream_rng(cfg.seed, ROUTER_STREAM);
    expand_model(
        &dense,
        cfg.moe.placement,
        cfg.moe.n_experts,
        &cfg.moe.moe_mode(),
        &mut router_rng,
    )
}

/// Fine-tuning with a per-step share schedule (the schedule's granularity
/// is forced to steps).
pub fn finetune(cfg: &TrainConfig, source: &Checkpoint, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.ewa.granularity = Granularity::Step;
    cfg.validate()?;
    let model = finetune_init(&cfg, source)?;
    let mut provenance = source.provenance.clone();
    provenance.push(format!(
        "fine-tuned from dense checkpoint at step {}: placement {} experts {}",
        source.step,
        cfg.moe.placement.name(),
        cfg.moe.n_experts
    ));
    train_model(&cfg, model, data, eval, provenance)
}

/// Averages every MoE layer of a checkpoint into a dense FFN. Dense
/// checkpoints are returned unchanged.
pub fn convert_checkpoint(ck: &Checkpoint) -> Result<Checkpoint> {
    if !ck.is_moe() {
        return Ok(ck.clone());
    }
    let model = ck.to_model()?;
    let blocks = model.moe_blocks();
    let dense = convert_model(&model)?;
    let mut out = Checkpoint::from_model(&dense);
    out.step = ck.step;
    out.epoch = ck.epoch;
    out.rng = ck.rng.clone();
    out.train = ck.train.clone().map(|mut t| {
        t.moe.placement = Placement::None;
        t
    });
    out.provenance = ck.provenance.clone();
    out.provenance.push(format!(
        "converted to dense: averaged experts of blocks {blocks:?}, {} -> {} parameters",
        ck.param_count(),
        out.param_count()
    ));
    Ok(out)
}

/// Writes records as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ewa::ShareSchedule;
    use crate::moe::MoeMode;
    use crate::train::data::{synthetic, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.model = ViTConfig {
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
        cfg.moe.placement = Placement::Every2;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.dataset = "synthetic:n=24,classes=3,size=8,channels=1".into();
        cfg
    }

    fn tiny_data() -> Dataset {
        synthetic(&SyntheticSpec {
            n: 24,
            classes: 3,
            size: 8,
            channels: 1,
            ..Default::default()
        })
    }

    #[test]
    fn logged_beta_matches_schedule() {
        let cfg = tiny_cfg();
        let out = train(&cfg, &tiny_data(), None).unwrap();
        let sched = ShareSchedule {
            horizon: 2,
            ..cfg.ewa.clone()
        };
        for r in &out.steps {
            assert_eq!(r.beta, schedule_beta(&sched, r.epoch));
            assert_eq!(r.ewa_layers, 1);
        }
        assert_eq!(out.steps.len(), 6);
        assert_eq!(out.checkpoint.step, 6);
    }

    #[test]
    fn dense_config_never_mixes() {
        let mut cfg = tiny_cfg();
        cfg.moe.placement = Placement::None;
        let out = train(&cfg, &tiny_data(), None).unwrap();
        assert!(out.steps.iter().all(|r| r.ewa_layers == 0));
        assert!(!out.checkpoint.is_moe());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = tiny_cfg();
        let a = train(&cfg, &tiny_data(), None).unwrap().checkpoint.to_bytes().unwrap();
        let b = train(&cfg, &tiny_data(), None).unwrap().checkpoint.to_bytes().unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 1;
        let c = train(&other, &tiny_data(), None).unwrap().checkpoint.to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nan_lr_diverges_with_last_good_state() {
        let mut cfg = tiny_cfg();
        cfg.optimizer.lr = 1e300;
        cfg.optimizer.kind = crate::train::optim::OptimizerKind::Sgd;
        cfg.lr_schedule.warmup_epochs = 0.0;
        match train(&cfg, &tiny_data(), None) {
            Err(Error::Diverged { step, last_good: Some(ck), .. }) => {
                assert_eq!(ck.step, step);
                let m = ck.to_model().unwrap();
                assert!(m.params().iter().all(|(_, t)| t.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.steps.len())),
        }
    }

    #[test]
    fn convert_dense_is_identity_and_moe_drops_experts() {
        let cfg = tiny_cfg();
        let out = train(&cfg, &tiny_data(), None).unwrap();
        let dense = convert_checkpoint(&out.checkpoint).unwrap();
        assert!(!dense.is_moe());
        assert_eq!(dense.param_count(), cfg.model.dense_param_count());
        assert_eq!(convert_checkpoint(&dense).unwrap(), dense);
    }

    #[test]
    fn finetune_rejects_moe_and_mismatched_sources() {
        let cfg = tiny_cfg();
        let out = train(&cfg, &tiny_data(), None).unwrap();
        assert!(finetune_init(&cfg, &out.checkpoint).is_err());
        let dense = convert_checkpoint(&out.checkpoint).unwrap();
        let mut wrong = cfg.clone();
        wrong.model.d_model = 16;
        assert!(finetune_init(&wrong, &dense).is_err());
        let mut topk = cfg.clone();
        topk.moe.mode = crate::train::config::RoutingKind::TopK;
        let m = finetune_init(&topk, &dense).unwrap();
        assert_eq!(m.moe_layers().next().unwrap().mode(), MoeMode::top1());
    }

    #[test]
    fn data_shape_mismatch_is_reported() {
        let cfg = tiny_cfg();
        let bad = synthetic(&SyntheticSpec {
            n: 8,
            size: 8,
            channels: 3,
            ..Default::default()
        });
        assert!(matches!(train(&cfg, &bad, None), Err(Error::Config(_))));
    }
}
