//! Training configuration: TOML files, named profiles and dotted overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewa::{Granularity, Placement, ShareSchedule};
use crate::moe::MoeMode;
use crate::train::data::DatasetSpec;
use crate::train::optim::OptimizerConfig;
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    Rup,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub mode: RoutingKind,
    pub placement: Placement,
    #[serde(default = "one_usize")]
    pub k: usize,
    #[serde(default = "default_capacity")]
    pub capacity_ratio: f64,
    #[serde(default = "default_balance")]
    pub balance_weight: f64,
}

fn one_usize() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_capacity() -> f64 {
    1.05
}

fn default_balance() -> f64 {
    0.01
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            mode: RoutingKind::Rup,
            placement: Placement::Every2,
            k: 1,
            capacity_ratio: default_capacity(),
            balance_weight: default_balance(),
        }
    }
}

impl MoeConfig {
    pub fn moe_mode(&self) -> MoeMode {
        match self.mode {
            RoutingKind::Rup => MoeMode::Rup,
            RoutingKind::TopK => MoeMode::TopK {
                k: self.k,
                capacity_ratio: self.capacity_ratio,
                balance_weight: self.balance_weight,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Cosine decay after warmup; `false` keeps the rate flat after warmup.
    pub cosine: bool,
    /// Warmup length in epochs (fractions allowed).
    pub warmup_epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            cosine: true,
            warmup_epochs: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Random horizontal flips.
    pub flip: bool,
    /// Mixup Beta(α, α) parameter; 0 disables mixup.
    pub mixup_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Stops after this many optimizer steps when set; schedules still span
    /// the truncated run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    /// Held-out set; defaults to a synthetic companion or a 10% split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<String>,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    #[serde(default = "one_u64")]
    pub eval_every: u64,
    pub label_smoothing: f64,
    pub model: ViTConfig,
    pub moe: MoeConfig,
    pub ewa: ShareSchedule,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Minutes-scale CPU run: depth-4 width-64 ViT on 4,096 synthetic
    /// 32x32 images for 20 epochs, RUP MoE with 4 experts on every other
    /// block.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            max_steps: None,
            batch_size: 64,
            seed: 0,
            dataset: "synthetic:n=4096,classes=10,size=32,seed=0".into(),
            eval_dataset: None,
            eval_every: 1,
            label_smoothing: 0.1,
            model: ViTConfig::desk(),
            moe: MoeConfig::default(),
            ewa: ShareSchedule::linear(0.3, 0, Granularity::Epoch),
            optimizer: OptimizerConfig::adamw(1e-3, 0.05),
            lr_schedule: LrSchedule::default(),
            augment: Augment::default(),
        }
    }

    /// The full-size hyperparameters: ViT-S, AdamW lr 6e-4, wd 0.06,
    /// batch 128, 10% warmup, 300 epochs.
    pub fn full() -> Self {
        let epochs = 300;
        Self {
            epochs,
            batch_size: 128,
            dataset: "synthetic:n=50000,classes=100,size=32,seed=0".into(),
            model: ViTConfig::vit_small_cifar(),
            optimizer: OptimizerConfig::adamw(6e-4, 0.06),
            lr_schedule: LrSchedule {
                cosine: true,
                warmup_epochs: epochs as f64 * 0.1,
            },
            augment: Augment {
                flip: true,
                mixup_alpha: 0.8,
            },
            ..Self::desk()
        }
    }

    /// Fine-tuning defaults: SGD with momentum 0.9 and a per-step share
    /// schedule.
    pub fn finetune() -> Self {
        Self {
            epochs: 5,
            optimizer: OptimizerConfig::sgd(0.01, 0.9, 0.0),
            ewa: ShareSchedule::linear(0.3, 0, Granularity::Step),
            lr_schedule: LrSchedule {
                cosine: true,
                warmup_epochs: 0.0,
            },
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "finetune" => Ok(Self::finetune()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk, full or finetune)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ewa.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.augment.mixup_alpha < 0.0 {
            return Err(Error::Config("augment.mixup_alpha must be non-negative".into()));
        }
        if self.lr_schedule.warmup_epochs < 0.0 {
            return Err(Error::Config("lr_schedule.warmup_epochs must be non-negative".into()));
        }
        let m = &self.moe;
        if m.placement != Placement::None && m.n_experts == 0 {
            return Err(Error::Config("moe.n_experts must be at least 1".into()));
        }
        if m.mode == RoutingKind::TopK && !(1..=m.n_experts).contains(&m.k) {
            return Err(Error::Config(format!("moe.k {} outside 1..={}", m.k, m.n_experts)));
        }
        m.placement.blocks(self.model.depth)?;
        self.dataset_spec()?;
        self.eval_dataset_spec()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        self.dataset.parse()
    }

    pub fn eval_dataset_spec(&self) -> Result<Option<DatasetSpec>> {
        self.eval_dataset.as_deref().map(str::parse).transpose()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses TOML text. A top-level `profile = "desk" | "full" | "finetune"`
    /// picks the base (desk by default); every other key overrides it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match overlay.remove("profile") {
            Some(toml::Value::String(p)) => Self::profile(&p)?,
            Some(v) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
            None => Self::desk(),
        };
        let mut table = base.to_table()?;
        merge(&mut table, overlay);
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    /// Applies `key.path=value` overrides. Values are read as TOML literals
    /// and fall back to strings, so `--set dataset=synthetic:n=64` works
    /// unquoted.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table()?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    // integers given for float fields would fail to deserialize otherwise
    let value = match (cur.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ewa::ScheduleKind;

    #[test]
    fn profiles_validate_and_round_trip() {
        for name in ["desk", "full", "finetune"] {
            let cfg = TrainConfig::profile(name).unwrap();
            cfg.validate().unwrap();
            let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn full_profile_values() {
        let p = TrainConfig::full();
        assert_eq!(p.optimizer.lr, 0.0006);
        assert_eq!(p.optimizer.weight_decay, 0.06);
        assert_eq!(p.batch_size, 128);
        assert_eq!(p.lr_schedule.warmup_epochs, 30.0);
    }

    #[test]
    fn partial_file_over_profile() {
        let cfg = TrainConfig::from_toml(
            "profile = \"full\"\nepochs = 3\n[moe]\nplacement = \"last-4\"\nn_experts = 2\nmode = \"rup\"\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.moe.placement, Placement::Last4);
        assert_eq!(cfg.batch_size, 128);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn overrides() {
        let cfg = TrainConfig::desk()
            .with_overrides(&[
                "optimizer.lr=1",
                "ewa.kind=constant",
                "ewa.share_rate=0.5",
                "dataset=synthetic:n=64,classes=4",
                "moe.placement=\"none\"",
                "seed=9",
            ])
            .unwrap();
        assert_eq!(cfg.optimizer.lr, 1.0);
        assert_eq!(cfg.ewa.kind, ScheduleKind::Constant);
        assert_eq!(cfg.dataset, "synthetic:n=64,classes=4");
        assert_eq!(cfg.moe.placement, Placement::None);
        assert_eq!(cfg.seed, 9);
        assert!(TrainConfig::desk().with_overrides(&["epochs"]).is_err());
        assert!(TrainConfig::desk().with_overrides(&["epochs=0"]).is_err());
        assert!(TrainConfig::desk().with_overrides(&["moe.k=9", "moe.mode=topk"]).is_err());
    }
}
