//! The run configuration: one JSON document describing model, adapters,
//! masking, optimizer, task and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{AdapterSpec, BackboneConfig};
use crate::data::TaskSpec;
use crate::error::{param_err, Result};
use crate::masking::{MaskSchedule, Pattern, Strategy};
use crate::Error;

/// Masking strategy before it is resolved against a model depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub strategy: Strategy,
    pub pattern: Pattern,
    /// Drop probability for uniform stochastic and mixed masking.
    pub p: f64,
    /// Total experts for fixed and mixed masking; `r · blocks` when absent.
    pub budget: Option<usize>,
    /// Seed of the random fixed allocation.
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            strategy: Strategy::Stochastic,
            pattern: Pattern::Uniform,
            p: 0.5,
            budget: None,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn resolve(&self, layers: usize, r: usize) -> Result<MaskSchedule> {
        let budget = self.budget.unwrap_or(r * layers);
        match self.strategy {
            Strategy::Stochastic => MaskSchedule::stochastic(self.pattern, layers, r, self.p),
            Strategy::Fixed => MaskSchedule::fixed(self.pattern, layers, budget, self.seed),
            Strategy::Mixed => MaskSchedule::mixed(self.pattern, layers, budget, self.p, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Expert initialization.
    pub init: u64,
    /// Batch shuffling.
    pub data: u64,
    /// Mask sampling.
    pub dropout: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            init: seed,
            data: seed,
            dropout: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Apply weight decay to the classifier head as well.
    pub decay_head: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 100,
            decay_head: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seeds: Seeds::default(),
        }
    }
}

/// Dataset files, one split each (`.csv` or a bundle manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    Synthetic(TaskSpec),
    Files(TaskFiles),
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(TaskSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterSpec,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    pub task: TaskSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            adapter: AdapterSpec::default(),
            masking: MaskingConfig::default(),
            train: TrainConfig::default(),
            task: TaskSource::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Sets the field at dotted `path` to `raw`, parsed as JSON when
    /// possible and as a string otherwise.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = self.to_value()?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut root;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| Error::Format(format!("`{}` is not a table", keys[..i].join("."))))?;
            if i + 1 == keys.len() {
                if !obj.contains_key(*key) && !is_optional(path) {
                    return Err(Error::Format(format!("unknown config key `{path}`")));
                }
                obj.insert(key.to_string(), value.clone());
                break;
            }
            cur = obj
                .get_mut(*key)
                .ok_or_else(|| Error::Format(format!("unknown config key `{path}`")))?;
        }
        *self = serde_json::from_value(root).map_err(|e| Error::Format(format!("`{path}`: {e}")))?;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seeds = Seeds::all(seed);
    }

    /// Cross-field checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let a = &self.adapter;
        if a.r == 0 || a.sub_rank == 0 {
            return Err(param_err("adapter.r and adapter.sub_rank must be positive"));
        }
        if !(a.init_std > 0.0) || !(a.coeff_init > 0.0) {
            return Err(param_err("adapter.init_std and adapter.coeff_init must be positive"));
        }
        if !(0.0..1.0).contains(&a.flags.delta_dropout) {
            return Err(param_err("adapter.flags.delta_dropout must lie in [0, 1)"));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(param_err("train.batch_size and train.lr must be positive, weight_decay non-negative"));
        }
        if let TaskSource::Synthetic(s) = &self.task {
            let b = &self.backbone;
            if s.tokens != b.patch_tokens || s.token_dim != b.token_dim || s.n_classes != b.n_classes {
                return Err(param_err(format!(
                    "task grid {}x{} with {} classes does not match backbone {}x{} with {} classes",
                    s.tokens, s.token_dim, s.n_classes, b.patch_tokens, b.token_dim, b.n_classes
                )));
            }
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<MaskSchedule> {
        self.masking.resolve(self.backbone.blocks, self.adapter.r)
    }
}

fn is_optional(path: &str) -> bool {
    matches!(path, "masking.budget" | "task.files.test")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_headline_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.adapter.r, c.adapter.sub_rank), (8, 1));
        assert_eq!(c.adapter.coeff_init, 1.0);
        assert_eq!((c.train.batch_size, c.train.lr, c.train.weight_decay), (64, 5e-4, 1e-4));
        assert_eq!(c.masking.strategy, crate::masking::Strategy::Stochastic);
        assert_eq!(c.masking.pattern, Pattern::Uniform);
        c.validate().unwrap();
        assert_eq!(c.schedule().unwrap().budget(), 96);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = RunConfig::default().to_value().unwrap();
        v["adapter"]["rank"] = 3.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Format(_))));
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("train.epochs", "3").unwrap();
        c.set("adapter.flags.masking", "false").unwrap();
        c.set("masking.pattern", "hourglass").unwrap();
        c.set("task.synthetic.difficulty", "0.25").unwrap();
        c.set("masking.budget", "48").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(!c.adapter.flags.masking);
        assert_eq!(c.masking.pattern, Pattern::Hourglass);
        assert_eq!(c.masking.budget, Some(48));
        let TaskSource::Synthetic(s) = &c.task else { panic!() };
        assert_eq!(s.difficulty, 0.25);
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("train.epochs", "\"many\"").is_err());
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let mut c = RunConfig::default();
        c.backbone.n_classes = 5;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip(
            blocks in 2usize..13,
            r in 1usize..16,
            p in prop::sample::select(vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9]),
            coeff in prop::sample::select(vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0]),
            epochs in 0usize..500,
            seed in any::<u32>(),
            masking in any::<bool>(),
            diff in 0.0f64..3.0,
        ) {
            let mut c = RunConfig::default();
            c.backbone.blocks = blocks;
            c.adapter.r = r;
            c.adapter.coeff_init = coeff;
            c.adapter.flags.masking = masking;
            c.masking.p = p;
            c.train.epochs = epochs;
            c.set_seed(seed as u64);
            if let TaskSource::Synthetic(s) = &mut c.task {
                s.difficulty = diff;
            }
            let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
