//! Run configuration: a single JSON document that names the dataset, the
//! architecture, the method and its policies, and where the reports go.
//! The resolved copy written into the run directory re-runs bit-identically.

use crate::data::{generate_synth, load_csv, load_idx_dir, DatasetBundle, SynthSpec};
use crate::error::{Result, TfmError};
use crate::growth::GrowthPolicy;
use crate::harness::{
    build_sequence, run_scenario, write_run_dir, MethodKind, Scenario, ScenarioOutcome,
    SequenceConfig,
};
use crate::network::{ArchSpec, MaskedNetwork};
use crate::rng::RngSeed;
use crate::trainer::{evaluate, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Seeded Gaussian-cluster generator.
    Synth {
        #[serde(flatten, default)]
        spec: SynthSpec,
    },
    /// Directory holding big-endian IDX image/label files.
    Idx { path: PathBuf },
    /// `label,v1,...,vN` rows, no header.
    Csv { path: PathBuf },
}

impl DatasetConfig {
    pub fn load(&self, seed: RngSeed) -> Result<DatasetBundle> {
        match self {
            DatasetConfig::Synth { spec } => generate_synth(spec, seed),
            DatasetConfig::Idx { path } => load_idx_dir(path),
            DatasetConfig::Csv { path } => load_csv(path),
        }
    }
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Inline architecture. Alternatively point `arch_file` at a JSON file;
    /// resolution inlines it so the persisted config is self-contained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_file: Option<PathBuf>,
    pub method: MethodKind,
    #[serde(default)]
    pub sequence: SequenceConfig,
    /// Defaults to no growth (full width up front) when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthPolicy>,
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Root seed. Dataset synthesis, class order, per-class splits, network
    /// initialization and training order all derive from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub augment_hflip: bool,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| TfmError::Config(format!("run config: {}", e)))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
        RunConfig::from_json(&text)
            .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))
    }

    /// Fill in everything a run needs before any training starts: inline the
    /// architecture file, default the growth policy, and push the root seed
    /// into the trainer.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut resolved = self.clone();
        if let Some(path) = resolved.arch_file.take() {
            if resolved.arch.is_some() {
                return Err(TfmError::Config(
                    "config gives both an inline arch and an arch_file".into(),
                ));
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            let arch: ArchSpec = serde_json::from_str(&text)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            resolved.arch = Some(arch);
        }
        if resolved.arch.is_none() {
            return Err(TfmError::Config(
                "config names no architecture (arch or arch_file)".into(),
            ));
        }
        if resolved.growth.is_none() {
            resolved.growth = Some(GrowthPolicy::none(resolved.sequence.num_tasks));
        }
        resolved.trainer.seed = RngSeed(resolved.seed);
        resolved.sequence.validate()?;
        resolved.trainer.validate()?;
        if resolved.method.grows() {
            resolved
                .growth
                .as_ref()
                .expect("growth defaulted above")
                .validate(resolved.sequence.num_tasks)?;
        }
        Ok(resolved)
    }

    /// Run the configured scenario end to end and write the run directory.
    /// Returns the outcome and the directory written.
    pub fn execute(&self) -> Result<(ScenarioOutcome, PathBuf)> {
        let resolved = self.resolve()?;
        let arch = resolved.arch.clone().expect("resolve() guarantees an arch");
        let bundle = resolved.dataset.load(RngSeed(resolved.seed))?;
        if resolved.augment_hflip && !bundle.is_image() {
            return Err(TfmError::Config(
                "horizontal-flip augmentation needs image-shaped samples".into(),
            ));
        }
        let sequence = build_sequence(&bundle, &resolved.sequence, RngSeed(resolved.seed))?;
        let scenario = Scenario {
            bundle: &bundle,
            arch: arch.clone(),
            method: resolved.method,
            growth: resolved.growth.clone().expect("resolve() defaults growth"),
            trainer: resolved.trainer,
            augment_hflip: resolved.augment_hflip,
        };
        let outcome = run_scenario(&scenario, &sequence)?;
        let config_value = serde_json::to_value(&resolved)
            .map_err(|e| TfmError::Contract(format!("config serialization: {}", e)))?;
        write_run_dir(&resolved.out_dir, &outcome, &config_value, &arch)?;
        Ok((outcome, resolved.out_dir.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl FromStr for EvalSplit {
    type Err = TfmError;

    fn from_str(s: &str) -> Result<EvalSplit> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(TfmError::Config(format!(
                "unknown split '{}' (expected train, val or test)",
                other
            ))),
        }
    }
}

/// Restore a snapshot and evaluate one task's split, rebuilding the exact
/// data carve from the run's config. Returns (mean loss, accuracy).
pub fn evaluate_snapshot(
    config: &RunConfig,
    snapshot: &Path,
    task: u32,
    split: EvalSplit,
) -> Result<(f64, f64)> {
    let resolved = config.resolve()?;
    let bundle = resolved.dataset.load(RngSeed(resolved.seed))?;
    let sequence = build_sequence(&bundle, &resolved.sequence, RngSeed(resolved.seed))?;
    let task_split = sequence
        .tasks
        .iter()
        .find(|t| t.task_id == task)
        .ok_or_else(|| TfmError::TaskLookup {
            task,
            context: "task sequence".into(),
        })?;
    let net = MaskedNetwork::load(snapshot)?;
    let specs = match split {
        EvalSplit::Train => &task_split.train,
        EvalSplit::Val => &task_split.val,
        EvalSplit::Test => &task_split.test,
    };
    evaluate(&net, &bundle, specs)
}
