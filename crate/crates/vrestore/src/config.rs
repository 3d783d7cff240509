//! Run configuration: one JSON file, validated strictly, with dotted-path
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DegradationProfile;
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::stage1::StageIConfig;
use crate::stage2::{Stage2TrainOptions, StageIIConfig};
use crate::train::{PhasePlan, TrainOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sequences: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory where prepared data (gt/, lq/, manifest.json) lives.
    pub root: PathBuf,
    /// Directory of raw GT sequences (one subdirectory of frames each).
    /// When absent, `synth` must be set and sequences are generated.
    #[serde(default)]
    pub raw_gt_dir: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Number of sequences held out for offline validation.
    pub val_sequences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Divides all paper-scale iteration budgets; 1 = paper-faithful.
    pub toy_divisor: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub profile: DegradationProfile,
    pub stage1: StageIConfig,
    pub stage2: StageIIConfig,
    /// Explicit phase plan; when absent it is built from `toy_divisor`.
    #[serde(default)]
    pub plan: Option<PhasePlan>,
    pub train: TrainOptions,
    pub stage2_train: Stage2TrainOptions,
    pub ensemble: EnsembleSpec,
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub luma_only: bool,
}

impl RunConfig {
    pub fn toy_default(root: &Path) -> RunConfig {
        RunConfig {
            seed: 0,
            toy_divisor: crate::train::TOY_DIVISOR,
            output_dir: root.join("out"),
            dataset: DatasetConfig {
                root: root.join("data"),
                raw_gt_dir: None,
                synth: Some(SynthSpec {
                    sequences: 32,
                    height: 64,
                    width: 64,
                    frames: 24,
                }),
                val_sequences: 10,
            },
            profile: DegradationProfile::default(),
            stage1: StageIConfig::default(),
            stage2: StageIIConfig::default(),
            plan: None,
            train: TrainOptions::default(),
            stage2_train: Stage2TrainOptions::default(),
            ensemble: EnsembleSpec::default(),
            eval_mode: EvalMode::All,
            luma_only: false,
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        for item in overrides {
            let Some((key, raw)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override '{item}' is not of the form dotted.path=value"
                )));
            };
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.toy_divisor == 0 {
            return Err(Error::Config("toy_divisor must be >= 1".into()));
        }
        self.profile.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if let Some(plan) = &self.plan {
            plan.validate()?;
        }
        if self.dataset.raw_gt_dir.is_none() && self.dataset.synth.is_none() {
            return Err(Error::Config(
                "dataset needs either raw_gt_dir or a synth block".into(),
            ));
        }
        if self.dataset.val_sequences == 0 {
            return Err(Error::Config("val_sequences must be >= 1".into()));
        }
        Ok(())
    }

    pub fn phase_plan(&self) -> PhasePlan {
        self.plan
            .clone()
            .unwrap_or_else(|| crate::train::build_phase_plan_scaled(self.toy_divisor))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.root.join("manifest.json")
    }
}

fn set_path(root: &mut serde_json::Value, dotted: &str, new: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let mut new = Some(new);
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i == parts.len() - 1;
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {dotted}: {part} is not an object")))?;
        if last {
            obj.insert(part.to_string(), new.take().unwrap());
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}
