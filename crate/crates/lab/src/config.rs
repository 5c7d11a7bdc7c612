//! JSON experiment configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use icl_core::analysis::{GridSpec, GridVariant};
use icl_core::attention::ModelKind;
use icl_core::baselines::BaselinePredictor;
use icl_core::taskgen::TaskConfig;
use icl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

pub const CONFIG_VERSION: u32 = 1;

/// Sizes of the evaluation sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCounts {
    /// Contexts used for alignment metrics.
    pub alignment: usize,
    /// Contexts used for training evaluation and per-context scatter data.
    pub scatter: usize,
    /// Contexts used to fit baselines by grid search.
    pub grid: usize,
}

impl Default for EvalCounts {
    fn default() -> Self {
        Self {
            alignment: 100,
            scatter: 512,
            grid: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSettings {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub variant: GridVariant,
    pub spec: GridSpec,
}

/// How `align` obtains the baseline it compares against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineChoice {
    Fixed { predictor: BaselinePredictor },
    Fit { variant: GridVariant, spec: GridSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSettings {
    pub baseline: BaselineChoice,
}

fn default_lengths() -> Vec<usize> {
    vec![10, 20, 50, 100]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    /// Trained checkpoints; a model whose path is absent is skipped.
    #[serde(default)]
    pub linear: Option<PathBuf>,
    #[serde(default)]
    pub frozen_qk: Option<PathBuf>,
    #[serde(default)]
    pub softmax: Option<PathBuf>,
    pub gd_grid: GridSpec,
    pub kernel_grid: GridSpec,
    #[serde(default)]
    pub adaptive_grid: Option<GridSpec>,
}

fn default_transience_eval() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransienceSettings {
    /// Number of fixed class-vector sets seen in training.
    pub m: usize,
    #[serde(default = "default_transience_eval")]
    pub eval_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Drives every random choice of a run; overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalCounts,
    #[serde(default)]
    pub gen: Option<GenSettings>,
    #[serde(default)]
    pub grid: Option<GridSettings>,
    #[serde(default)]
    pub align: Option<AlignSettings>,
    #[serde(default)]
    pub compare: Option<CompareSettings>,
    #[serde(default)]
    pub transience: Option<TransienceSettings>,
    /// Write measured wall-clock times into traces. Off by default so that
    /// outputs are byte-identical across runs.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            task,
            model: None,
            train: None,
            eval: EvalCounts::default(),
            gen: None,
            grid: None,
            align: None,
            compare: None,
            transience: None,
            record_timing: false,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> LabResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> LabResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(LabError::Validation(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.task.validate()?;
        if let Some(kind) = &self.model {
            kind.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if self.eval.alignment == 0 || self.eval.scatter == 0 || self.eval.grid == 0 {
            return Err(LabError::Validation("evaluation set sizes must be >= 1".into()));
        }
        if let Some(g) = &self.grid {
            g.spec.validate(&g.variant)?;
        }
        if let Some(a) = &self.align {
            match &a.baseline {
                BaselineChoice::Fixed { predictor } => predictor.validate()?,
                BaselineChoice::Fit { variant, spec } => spec.validate(variant)?,
            }
        }
        if let Some(c) = &self.compare {
            if c.lengths.is_empty() {
                return Err(LabError::Validation("compare.lengths is empty".into()));
            }
            for &n in &c.lengths {
                TaskConfig { n, ..self.task.clone() }.validate()?;
            }
            c.gd_grid.validate(&GridVariant::GdStep)?;
            c.kernel_grid.validate(&GridVariant::KernelGd)?;
            if let Some(g) = &c.adaptive_grid {
                g.validate(&GridVariant::Adaptive { include_self: false })?;
            }
        }
        if let Some(t) = &self.transience {
            if t.m == 0 || t.eval_count == 0 {
                return Err(LabError::Validation("transience.m and eval_count must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> LabResult<TrainConfig> {
        let mut t = self
            .train
            .clone()
            .ok_or_else(|| LabError::Validation("config has no 'train' section".into()))?;
        t.seed = self.seed;
        Ok(t)
    }

    pub fn model_kind(&self) -> LabResult<ModelKind> {
        self.model
            .ok_or_else(|| LabError::Validation("config has no 'model' section".into()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serialises"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> LabResult<ExperimentConfig> {
        ExperimentConfig::from_json(text, Path::new("test.json"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(r#"{"version": 1, "task": {"d": 2, "classes": 5, "n": 100}}"#).unwrap();
        assert_eq!(cfg.eval, EvalCounts::default());
        assert_eq!(cfg.seed, 0);
        assert!(!cfg.record_timing);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(
            parse(r#"{"version": 1, "task": {"d": 2, "classes": 5, "n": 100}, "sede": 3}"#),
            Err(LabError::Parse { .. })
        ));
        assert!(matches!(
            parse(r#"{"version": 1, "task": {"d": 2, "classes": 5, "n": 100, "dd": 1}}"#),
            Err(LabError::Parse { .. })
        ));
        let err = parse(r#"{"version": 2, "task": {"d": 2, "classes": 5, "n": 100}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_task_is_a_validation_error() {
        let err = parse(r#"{"version": 1, "task": {"d": 2, "classes": 5, "n": 101}}"#).unwrap_err();
        assert!(err.to_string().contains("n not divisible by C"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::new(TaskConfig::new(2, 5, 100));
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_json() {
        let text = r#"{
            "version": 1, "seed": 4,
            "task": {"d": 3, "classes": 5, "n": 100},
            "model": {"type": "softmax"},
            "train": {"learning_rate": 0.001, "batch_size": 8, "iterations": 10, "eval_every": 5},
            "align": {"baseline": {"mode": "fit", "variant": {"variant": "gd_step"},
                      "spec": {"axes": [{"min": 1.0, "max": 100.0, "count": 10, "log": true}]}}}
        }"#;
        let cfg = parse(text).unwrap();
        assert_eq!(parse(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.train_config().unwrap().seed, 4);
    }
}
