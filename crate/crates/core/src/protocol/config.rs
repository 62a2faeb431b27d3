use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::variant::Variant;
use crate::error::{Error, Result};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Refiner hidden width.
    pub hidden: usize,
    /// Zero new-class posterior means at fine-tuning; otherwise `N(0, 0.01)`.
    pub zero_new_mu: bool,
    /// Initial new-class posterior variance.
    pub init_variance: f64,
    /// Monte Carlo samples per score at inference.
    pub mc_samples: usize,
    /// Monte Carlo samples per (proposal, class) pair in training.
    pub mc_train_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            zero_new_mu: true,
            init_variance: 1.0,
            mc_samples: 10,
            mc_train_samples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Multiplies both rates.
    pub lr_scale: f64,
    /// Box-head rate relative to the classifier's.
    pub box_lr_factor: f64,
    /// Maximum L2 norm of each box-head gradient block; 0 disables clipping.
    pub box_grad_clip: f64,
    /// Joint classifier, refiner and mask training on base classes.
    pub pretrain_iters: usize,
    /// Box-head-only training that follows.
    pub box_iters: usize,
    /// Fractions of a phase after which the rate is divided by `lr_drop_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub box_batch_size: usize,
    pub mask_batch_size: usize,
    /// Fine-tuning length at `K = 1` and at `K = finetune_k_max`; linear in between.
    pub finetune_iters_min: usize,
    pub finetune_iters_max: usize,
    pub finetune_k_max: usize,
    /// Fixed fine-tuning length, overriding the schedule.
    pub finetune_iters: Option<usize>,
    /// Iterations between re-pooling features at the initially predicted boxes.
    pub refresh_every: usize,
    /// Treat `ln u` as a constant where it enters the refiner.
    pub stop_grad_u: bool,
    /// Cap on stored mask-training examples.
    pub max_mask_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 0.02,
            lr_finetune: 0.01,
            lr_scale: 50.0,
            box_lr_factor: 0.3,
            box_grad_clip: 0.1,
            pretrain_iters: 4000,
            box_iters: 2000,
            lr_drops: vec![0.72, 0.91],
            lr_drop_factor: 10.0,
            batch_size: 64,
            box_batch_size: 32,
            mask_batch_size: 8,
            finetune_iters_min: 500,
            finetune_iters_max: 6000,
            finetune_k_max: 30,
            finetune_iters: None,
            refresh_every: 50,
            stop_grad_u: false,
            max_mask_examples: 1500,
        }
    }
}

impl TrainConfig {
    /// `lr` divided by `lr_drop_factor` once per drop point already passed.
    pub fn rate(&self, lr: f64, iter: usize, total: usize) -> f64 {
        let frac = iter as f64 / total.max(1) as f64;
        let drops = self.lr_drops.iter().filter(|&&d| frac >= d).count();
        self.lr_scale * lr / self.lr_drop_factor.powi(drops as i32)
    }

    pub fn finetune_rate(&self) -> f64 {
        self.lr_scale * self.lr_finetune
    }

    pub fn finetune_schedule(&self, k: usize) -> usize {
        if let Some(n) = self.finetune_iters {
            return n;
        }
        let (lo, hi) = (self.finetune_iters_min as f64, self.finetune_iters_max as f64);
        let span = self.finetune_k_max.saturating_sub(1).max(1) as f64;
        let t = (k.saturating_sub(1) as f64 / span).min(1.0);
        (lo + t * (hi - lo)).round() as usize
    }
}

/// `auto` scales the prior by one over the number of fine-tuning proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KlWeight {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl KlWeight {
    pub fn resolve(self, examples: usize) -> f64 {
        match self {
            KlWeight::Fixed(w) => w,
            KlWeight::Auto(_) => 1.0 / examples.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub kl_weight: KlWeight,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            kl_weight: KlWeight::Auto(AutoTag::Auto),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_filter: f64,
    pub nms_iou: f64,
    /// Classification foreground threshold.
    pub match_iou: f64,
    /// Box-training eligibility threshold.
    pub box_iou: f64,
    pub max_per_class: usize,
    pub base_only_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_filter: 0.05,
            nms_iou: 0.5,
            match_iou: 0.5,
            box_iou: 0.7,
            max_per_class: 20,
            base_only_scenes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            variant: Variant::IfsRcnn,
            seeds: (0..10).collect(),
            shots: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentSection,
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses dotted `section.key = value` text; unknown keys are errors.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, parse_scalar(v))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.exists() => return Err(Error::MissingArtifact(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let w = &self.world;
        if w.shots == 0 || self.experiment.shots.contains(&0) {
            return bad("K must be at least 1");
        }
        if w.n_base == 0 || w.n_new == 0 {
            return bad("need at least one base and one new class");
        }
        if !(self.train.lr_pretrain > 0.0 && self.train.lr_finetune > 0.0 && self.train.lr_scale > 0.0 && self.train.box_lr_factor > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.train.lr_drop_factor <= 0.0 {
            return bad("lr_drop_factor must be positive");
        }
        for (name, t) in [
            ("eval.nms_iou", self.eval.nms_iou),
            ("eval.match_iou", self.eval.match_iou),
            ("eval.box_iou", self.eval.box_iou),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.eval.score_filter) {
            return bad("eval.score_filter must lie in [0, 1)");
        }
        if !(self.loss.focal_gamma >= 0.0 && (0.0..=1.0).contains(&self.loss.focal_alpha)) {
            return bad("focal parameters out of range");
        }
        if matches!(self.loss.kl_weight, KlWeight::Fixed(w) if !(w >= 0.0)) {
            return bad("loss.kl_weight must be non-negative or `auto`");
        }
        if !(self.model.init_variance > 0.0) {
            return bad("model.init_variance must be positive");
        }
        if self.model.mc_samples == 0 || self.model.mc_train_samples == 0 {
            return bad("Monte Carlo sample counts must be positive");
        }
        if self.train.batch_size == 0 || self.train.box_batch_size == 0 || self.train.mask_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if w.min_size <= 0.0 || w.min_size > w.max_size || w.max_size >= 1.0 {
            return bad("object size range must satisfy 0 < min ≤ max < 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Copy with the experiment fields relevant to one sweep cell.
    pub fn for_cell(&self, variant: Variant, k: usize) -> Self {
        let mut c = self.clone();
        c.experiment.variant = variant;
        c.world.shots = k;
        c
    }

    /// Everything that shapes the pretrained base model of `variant`.
    pub fn pretrain_fingerprint(&self, variant: Variant, seed: u64) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            world: &'a WorldConfig,
            model_hidden: usize,
            train: &'a TrainConfig,
            focal: (f64, f64),
            match_iou: f64,
            box_iou: f64,
            family: super::variant::PretrainFamily,
            seed: u64,
        }
        let mut world = self.world.clone();
        world.shots = 0;
        let key = Key {
            world: &world,
            model_hidden: self.model.hidden,
            train: &self.train,
            focal: (self.loss.focal_gamma, self.loss.focal_alpha),
            match_iou: self.eval.match_iou,
            box_iou: self.eval.box_iou,
            family: variant.pretrain_family(),
            seed,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("key serializes")))
    }
}
