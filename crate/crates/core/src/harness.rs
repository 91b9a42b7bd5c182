//! Scenario execution: carve a dataset into a task sequence, run one of the
//! continual-learning methods over it, and report accuracy, forgetting and
//! growth decisions.

use crate::data::{split_class_indices, DatasetBundle, SampleSpec};
use crate::error::{Result, TfmError};
use crate::growth::{choose_rate, CandidateOutcome, GrowthDecision, GrowthMode, GrowthPolicy};
use crate::network::{ArchSpec, MaskedNetwork, NetOptions};
use crate::overhead::{count_params, write_overhead_csv};
use crate::rng::RngSeed;
use crate::trainer::{evaluate, fit_task, TrainContext, TrainRecord, TrainerConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle classes and split them evenly across tasks.
    Random,
    /// Class groups read from a JSON file: an array of arrays of class ids.
    Grouped,
    /// Task 1 takes a configured fraction of the classes; the rest split
    /// evenly across the remaining tasks.
    SizedFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SequenceConfig {
    pub num_tasks: usize,
    pub split: SplitMode,
    /// Fraction of classes given to task 1 in sized-first mode.
    pub first_fraction: f64,
    /// Fraction of each class carved out as its test set when the dataset
    /// has no designated test portion.
    pub test_fraction: f64,
    /// Fraction of the remaining (non-test) samples used for validation,
    /// carved per class.
    pub val_fraction: f64,
    pub grouping_file: Option<PathBuf>,
}

impl Default for SequenceConfig {
    fn default() -> SequenceConfig {
        SequenceConfig {
            num_tasks: 5,
            split: SplitMode::Random,
            first_fraction: 0.55,
            test_fraction: 0.2,
            val_fraction: 0.10,
            grouping_file: None,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(TfmError::Config("a scenario needs at least one task".into()));
        }
        for (name, v) in [
            ("first_fraction", self.first_fraction),
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(TfmError::Config(format!("{} must lie in (0, 1)", name)));
            }
        }
        if self.split == SplitMode::Grouped && self.grouping_file.is_none() {
            return Err(TfmError::Config(
                "grouped split needs a grouping file".into(),
            ));
        }
        Ok(())
    }
}

/// One task's classes and data splits. Labels in the sample specs are local
/// to the task (position within `classes`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_id: u32,
    pub classes: Vec<u32>,
    pub train: Vec<SampleSpec>,
    pub val: Vec<SampleSpec>,
    pub test: Vec<SampleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSequence {
    pub source: String,
    pub tasks: Vec<TaskSplit>,
}

fn class_groups(
    bundle: &DatasetBundle,
    cfg: &SequenceConfig,
    seed: RngSeed,
) -> Result<Vec<Vec<u32>>> {
    let total = bundle.classes();
    let all: Vec<u32> = (0..total as u32).collect();
    match cfg.split {
        SplitMode::Random => {
            if total % cfg.num_tasks != 0 {
                return Err(TfmError::Config(format!(
                    "{} classes do not split evenly into {} tasks",
                    total, cfg.num_tasks
                )));
            }
            let mut shuffled = all;
            shuffled.shuffle(&mut seed.child("class-order").stream());
            let per = total / cfg.num_tasks;
            Ok(shuffled.chunks(per).map(|c| c.to_vec()).collect())
        }
        SplitMode::SizedFirst => {
            let first = crate::growth::round_half_up(cfg.first_fraction * total as f64);
            if first == 0 || first > total {
                return Err(TfmError::Config(format!(
                    "first task would take {} of {} classes",
                    first, total
                )));
            }
            let rest = total - first;
            if cfg.num_tasks == 1 {
                if rest != 0 {
                    return Err(TfmError::Config(
                        "single-task sized-first split must take all classes".into(),
                    ));
                }
            } else if rest == 0 || rest % (cfg.num_tasks - 1) != 0 {
                return Err(TfmError::Config(format!(
                    "{} remaining classes do not split evenly into {} tasks",
                    rest,
                    cfg.num_tasks - 1
                )));
            }
            let mut shuffled = all;
            shuffled.shuffle(&mut seed.child("class-order").stream());
            let mut groups = vec![shuffled[..first].to_vec()];
            if cfg.num_tasks > 1 {
                let per = rest / (cfg.num_tasks - 1);
                groups.extend(shuffled[first..].chunks(per).map(|c| c.to_vec()));
            }
            Ok(groups)
        }
        SplitMode::Grouped => {
            let path = cfg.grouping_file.as_ref().ok_or_else(|| {
                TfmError::Config("grouped split needs a grouping file".into())
            })?;
            let text = fs::read_to_string(path)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            let groups: Vec<Vec<u32>> = serde_json::from_str(&text)
                .map_err(|e| TfmError::Config(format!("{}: {}", path.display(), e)))?;
            if groups.len() != cfg.num_tasks {
                return Err(TfmError::Config(format!(
                    "grouping file lists {} groups, scenario has {} tasks",
                    groups.len(),
                    cfg.num_tasks
                )));
            }
            let mut seen = vec![false; total];
            for group in &groups {
                if group.is_empty() {
                    return Err(TfmError::Config("empty class group".into()));
                }
                for &c in group {
                    if c as usize >= total {
                        return Err(TfmError::Config(format!(
                            "group class {} outside dataset's {} classes",
                            c, total
                        )));
                    }
                    if seen[c as usize] {
                        return Err(TfmError::Config(format!(
                            "class {} appears in two groups",
                            c
                        )));
                    }
                    seen[c as usize] = true;
                }
            }
            Ok(groups)
        }
    }
}

/// Deterministic task sequence: classes grouped per the split mode, then a
/// per-class test/validation/train carve.
pub fn build_sequence(
    bundle: &DatasetBundle,
    cfg: &SequenceConfig,
    seed: RngSeed,
) -> Result<TaskSequence> {
    cfg.validate()?;
    let groups = class_groups(bundle, cfg, seed)?;
    let mut tasks = Vec::with_capacity(groups.len());
    for (i, classes) in groups.into_iter().enumerate() {
        let task_id = (i + 1) as u32;
        let mut split = TaskSplit {
            task_id,
            classes: classes.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (label, &class) in classes.iter().enumerate() {
            let indices = bundle.indices_of_class(class);
            if indices.is_empty() {
                return Err(TfmError::Data(format!("class {} has no samples", class)));
            }
            let (train, val, test) = split_class_indices(
                &indices,
                bundle.fixed_test(),
                cfg.test_fraction,
                cfg.val_fraction,
                seed.child_idx("split-class", class as u64),
            )?;
            let to_specs = |v: Vec<usize>| {
                v.into_iter().map(|index| SampleSpec {
                    index,
                    label,
                    head_task: task_id,
                })
            };
            split.train.extend(to_specs(train));
            split.val.extend(to_specs(val));
            split.test.extend(to_specs(test));
        }
        tasks.push(split);
    }
    Ok(TaskSequence {
        source: bundle.source().to_string(),
        tasks,
    })
}

/// Test accuracy of every task after each checkpoint: row k holds the
/// accuracies of tasks 1..=k measured after training task k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> AccuracyMatrix {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(TfmError::Contract(format!(
                "checkpoint {} row must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(TfmError::Contract("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn checkpoints(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy of task `s` after checkpoint `k`, both 1-based, s ≤ k.
    pub fn get(&self, k: u32, s: u32) -> Result<f64> {
        if s == 0 || k == 0 || s > k || k as usize > self.rows.len() {
            return Err(TfmError::Contract(format!(
                "matrix entry ({}, {}) undefined",
                k, s
            )));
        }
        Ok(self.rows[k as usize - 1][s as usize - 1])
    }

    pub fn final_row(&self) -> Result<&[f64]> {
        self.rows
            .last()
            .map(|r| r.as_slice())
            .ok_or_else(|| TfmError::Contract("empty accuracy matrix".into()))
    }

    /// Per-task forgetting after the final checkpoint: A[s][s] − A[K][s].
    pub fn forgetting(&self) -> Result<Vec<f64>> {
        let last = self.final_row()?;
        Ok(self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row[i] - last[i])
            .collect())
    }

    /// Mean forgetting over tasks before the final one.
    pub fn mean_forgetting(&self) -> Result<f64> {
        let f = self.forgetting()?;
        if f.len() < 2 {
            return Ok(0.0);
        }
        Ok(f[..f.len() - 1].iter().sum::<f64>() / (f.len() - 1) as f64)
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        let last = self.final_row()?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean of the final row excluding task 1 (reported for sized-first
    /// scenarios, where task 1 dwarfs the rest).
    pub fn average_accuracy_excluding_first(&self) -> Result<Option<f64>> {
        let last = self.final_row()?;
        if last.len() < 2 {
            return Ok(None);
        }
        Ok(Some(last[1..].iter().sum::<f64>() / (last.len() - 1) as f64))
    }

    /// Rectangular CSV: one row per checkpoint, blank cells where a task
    /// did not exist yet.
    pub fn to_csv(&self) -> String {
        let k = self.rows.len();
        let mut out = String::from("after_task");
        for s in 1..=k {
            out.push_str(&format!(",task_{}", s));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for s in 0..k {
                out.push(',');
                if s < row.len() {
                    out.push_str(&format!("{:.6}", row[s]));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl Default for AccuracyMatrix {
    fn default() -> AccuracyMatrix {
        AccuracyMatrix::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Ternary feature masks with task-specific feature normalization.
    Tfm,
    /// Ternary feature masks without the normalization.
    TfmNoFn,
    /// Disjoint per-task feature blocks, binary masks.
    BinaryMask,
    /// Sequential training of a shared network, no protection.
    Finetune,
    /// Task 1 trains everything; later tasks train only their heads.
    Freeze,
    /// Training on the union of all data seen so far (upper bound).
    Joint,
}

impl MethodKind {
    pub fn all() -> [MethodKind; 6] {
        [
            MethodKind::Tfm,
            MethodKind::TfmNoFn,
            MethodKind::BinaryMask,
            MethodKind::Finetune,
            MethodKind::Freeze,
            MethodKind::Joint,
        ]
    }

    pub fn grows(self) -> bool {
        matches!(self, MethodKind::Tfm | MethodKind::TfmNoFn)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MethodKind::Tfm => "tfm",
            MethodKind::TfmNoFn => "tfm_no_fn",
            MethodKind::BinaryMask => "binary_mask",
            MethodKind::Finetune => "finetune",
            MethodKind::Freeze => "freeze",
            MethodKind::Joint => "joint",
        };
        f.write_str(name)
    }
}

impl FromStr for MethodKind {
    type Err = TfmError;

    fn from_str(s: &str) -> Result<MethodKind> {
        match s {
            "tfm" => Ok(MethodKind::Tfm),
            "tfm_no_fn" => Ok(MethodKind::TfmNoFn),
            "binary_mask" => Ok(MethodKind::BinaryMask),
            "finetune" => Ok(MethodKind::Finetune),
            "freeze" => Ok(MethodKind::Freeze),
            "joint" => Ok(MethodKind::Joint),
            other => Err(TfmError::Config(format!(
                "unknown method '{}' (expected tfm, tfm_no_fn, binary_mask, finetune, freeze or joint)",
                other
            ))),
        }
    }
}

/// Everything needed to run one method over one task sequence.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub bundle: &'a DatasetBundle,
    pub arch: ArchSpec,
    pub method: MethodKind,
    pub growth: GrowthPolicy,
    pub trainer: TrainerConfig,
    pub augment_hflip: bool,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: u32,
    pub record: TrainRecord,
    /// Serialized model snapshot taken right after this task finished.
    pub snapshot: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub method: MethodKind,
    pub matrix: AccuracyMatrix,
    pub forgetting: Vec<f64>,
    pub mean_forgetting: f64,
    pub average_accuracy: f64,
    pub average_accuracy_excluding_first: Option<f64>,
    pub growth_decisions: Vec<GrowthDecision>,
    pub tasks: Vec<TaskOutcome>,
}

fn build_network(scenario: &Scenario<'_>, num_tasks: usize) -> Result<MaskedNetwork> {
    let caps = scenario.arch.caps();
    let opts = match scenario.method {
        MethodKind::Tfm | MethodKind::TfmNoFn => NetOptions {
            initial_widths: scenario.growth.initial_widths(&caps),
            ..NetOptions::ternary(scenario.method == MethodKind::Tfm)
        },
        MethodKind::BinaryMask => NetOptions::binary(num_tasks as u32),
        MethodKind::Finetune | MethodKind::Freeze | MethodKind::Joint => NetOptions::plain(),
    };
    MaskedNetwork::new(scenario.arch.clone(), opts, scenario.trainer.seed)
}

/// Growth preparation for one task. Returns the decision made; the network
/// has the task registered afterwards.
fn prepare_task(
    scenario: &Scenario<'_>,
    net: &mut MaskedNetwork,
    task: &TaskSplit,
) -> Result<GrowthDecision> {
    let zeros = vec![0usize; net.feature_layer_count()];
    if !scenario.method.grows() {
        net.grow(task.task_id, &zeros)?;
        return Ok(GrowthDecision::new(task.task_id, 0.0, zeros));
    }
    let caps = scenario.arch.caps();
    match scenario.growth.mode {
        GrowthMode::FixedSchedule => {
            if task.task_id == 1 {
                // The network was built at the first schedule fraction; the
                // decision records those widths as this task's additions.
                net.grow(1, &zeros)?;
                let mut d =
                    GrowthDecision::new(1, scenario.growth.schedule[0], net.current_widths());
                d.effectively_zero = false;
                Ok(d)
            } else {
                let added = scenario.growth.scheduled_added(
                    task.task_id,
                    &caps,
                    &net.current_widths(),
                )?;
                net.grow(task.task_id, &added)?;
                Ok(GrowthDecision::new(
                    task.task_id,
                    scenario.growth.schedule[task.task_id as usize - 1],
                    added,
                ))
            }
        }
        GrowthMode::ValidationSearch => {
            if task.task_id == 1 {
                // Task 1 trains the declared network as is.
                net.grow(1, &zeros)?;
                let mut d = GrowthDecision::new(1, 0.0, net.current_widths());
                d.effectively_zero = false;
                return Ok(d);
            }
            let mut search_cfg = scenario.trainer;
            if let Some(cap) = scenario.growth.search_epochs {
                search_cfg.max_epochs = cap;
            }
            let mut outcomes: Vec<CandidateOutcome> = Vec::new();
            for &rate in &scenario.growth.candidate_rates {
                let added = GrowthPolicy::added_for_rate(rate, &caps);
                let mut candidate = net.clone();
                match candidate.grow(task.task_id, &added) {
                    Ok(()) => {}
                    Err(TfmError::Capacity(_)) => continue,
                    Err(e) => return Err(e),
                }
                candidate.begin_task(task.task_id, task.classes.len())?;
                fit_task(
                    &mut candidate,
                    task.task_id,
                    TrainContext {
                        bundle: scenario.bundle,
                        train: &task.train,
                        val: &task.val,
                        augment_hflip: scenario.augment_hflip,
                        head_only: false,
                    },
                    &search_cfg,
                )?;
                let (_, val_accuracy) = evaluate(&candidate, scenario.bundle, &task.val)?;
                outcomes.push(CandidateOutcome { rate, val_accuracy, added });
            }
            if outcomes.is_empty() {
                return Err(TfmError::Capacity(format!(
                    "no candidate growth rate fits before task {}",
                    task.task_id
                )));
            }
            let chosen = choose_rate(&outcomes, scenario.growth.margin)?.clone();
            net.grow(task.task_id, &chosen.added)?;
            let mut decision =
                GrowthDecision::new(task.task_id, chosen.rate, chosen.added.clone());
            decision.candidates = outcomes;
            Ok(decision)
        }
    }
}

/// Run one method over the sequence: per task, prepare growth, train, then
/// evaluate every task seen so far on its test split.
pub fn run_scenario(scenario: &Scenario<'_>, sequence: &TaskSequence) -> Result<ScenarioOutcome> {
    let num_tasks = sequence.tasks.len();
    if num_tasks == 0 {
        return Err(TfmError::Config("empty task sequence".into()));
    }
    scenario.trainer.validate()?;
    if scenario.method.grows() {
        scenario.growth.validate(num_tasks)?;
    }
    let mut net = build_network(scenario, num_tasks)?;
    let mut matrix = AccuracyMatrix::new();
    let mut growth_decisions = Vec::with_capacity(num_tasks);
    let mut tasks = Vec::with_capacity(num_tasks);

    // Joint training accumulates the union of splits seen so far.
    let mut joint_train: Vec<SampleSpec> = Vec::new();
    let mut joint_val: Vec<SampleSpec> = Vec::new();

    for task in &sequence.tasks {
        growth_decisions.push(prepare_task(scenario, &mut net, task)?);
        net.begin_task(task.task_id, task.classes.len())?;

        let (train, val): (&[SampleSpec], &[SampleSpec]) = match scenario.method {
            MethodKind::Joint => {
                joint_train.extend(task.train.iter().copied());
                joint_val.extend(task.val.iter().copied());
                (&joint_train, &joint_val)
            }
            _ => (&task.train, &task.val),
        };
        let head_only = scenario.method == MethodKind::Freeze && task.task_id > 1;
        let record = fit_task(
            &mut net,
            task.task_id,
            TrainContext {
                bundle: scenario.bundle,
                train,
                val,
                augment_hflip: scenario.augment_hflip,
                head_only,
            },
            &scenario.trainer,
        )?;
        log::info!(
            "{}: task {} finished after {} epochs (best val loss {:.4})",
            scenario.method,
            task.task_id,
            record.epochs.len(),
            record.best_val_loss
        );

        let mut row = Vec::with_capacity(task.task_id as usize);
        for earlier in &sequence.tasks[..task.task_id as usize] {
            let (_, acc) = evaluate(&net, scenario.bundle, &earlier.test)?;
            row.push(acc);
        }
        matrix.push_row(row)?;
        tasks.push(TaskOutcome {
            task: task.task_id,
            record,
            snapshot: net.to_bytes()?,
        });
    }

    let forgetting = matrix.forgetting()?;
    Ok(ScenarioOutcome {
        method: scenario.method,
        mean_forgetting: matrix.mean_forgetting()?,
        average_accuracy: matrix.average_accuracy()?,
        average_accuracy_excluding_first: matrix.average_accuracy_excluding_first()?,
        forgetting,
        growth_decisions,
        matrix,
        tasks,
    })
}

/// Write the run directory: resolved config, accuracy matrix, forgetting
/// table, growth decisions, overhead comparison, per-task training records
/// and model snapshots.
pub fn write_run_dir(
    dir: &Path,
    outcome: &ScenarioOutcome,
    resolved_config: &serde_json::Value,
    arch: &ArchSpec,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(resolved_config)
            .map_err(|e| TfmError::Contract(format!("config serialization: {}", e)))?,
    )?;
    fs::write(dir.join("matrix.csv"), outcome.matrix.to_csv())?;

    let mut forgetting = String::from("task,forgetting\n");
    for (i, f) in outcome.forgetting.iter().enumerate() {
        forgetting.push_str(&format!("{},{:.6}\n", i + 1, f));
    }
    forgetting.push_str(&format!("mean,{:.6}\n", outcome.mean_forgetting));
    fs::write(dir.join("forgetting.csv"), forgetting)?;

    fs::write(
        dir.join("growth.json"),
        serde_json::to_string_pretty(&outcome.growth_decisions)
            .map_err(|e| TfmError::Contract(format!("growth serialization: {}", e)))?,
    )?;

    let (weights, features) = count_params(arch)?;
    let mut overhead = Vec::new();
    write_overhead_csv(&mut overhead, weights, features, outcome.tasks.len() as u32)?;
    fs::write(dir.join("overhead.csv"), overhead)?;

    let records = dir.join("train_records");
    fs::create_dir_all(&records)?;
    let snapshots = dir.join("snapshots");
    fs::create_dir_all(&snapshots)?;
    for t in &outcome.tasks {
        fs::write(
            records.join(format!("task_{}.json", t.task)),
            serde_json::to_string_pretty(&t.record)
                .map_err(|e| TfmError::Contract(format!("record serialization: {}", e)))?,
        )?;
        let mut f = fs::File::create(snapshots.join(format!("task_{:03}.tfm", t.task)))?;
        f.write_all(&t.snapshot)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthSpec};
    use crate::network::{InputSpec, LayerSpec};

    fn synth_bundle(classes: usize, per_class: usize, dim: usize) -> DatasetBundle {
        generate_synth(
            &SynthSpec {
                classes,
                samples_per_class: per_class,
                dim,
                ..SynthSpec::default()
            },
            RngSeed(400),
        )
        .unwrap()
    }

    fn tiny_arch(dim: usize, w1: usize, w2: usize, cap: usize) -> ArchSpec {
        ArchSpec {
            input: InputSpec::Vector { dim },
            layers: vec![
                LayerSpec::Dense { width: w1, cap: Some(cap) },
                LayerSpec::Dense { width: w2, cap: Some(cap) },
            ],
        }
    }

    fn quick_trainer(seed: u64) -> TrainerConfig {
        TrainerConfig {
            max_epochs: 4,
            batch_size: 16,
            seed: RngSeed(seed),
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn sequences_partition_classes_and_reproduce() {
        let bundle = synth_bundle(10, 30, 6);
        let cfg = SequenceConfig { num_tasks: 5, ..SequenceConfig::default() };
        let seq = build_sequence(&bundle, &cfg, RngSeed(8)).unwrap();
        assert_eq!(seq.tasks.len(), 5);
        let mut all: Vec<u32> = seq.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<u32>>());
        for t in &seq.tasks {
            assert_eq!(t.classes.len(), 2);
            // 30 per class: 6 test, 2 val (10% of 24), 22 train.
            assert_eq!(t.test.len(), 12);
            assert_eq!(t.val.len(), 4);
            assert_eq!(t.train.len(), 44);
            for s in t.train.iter().chain(&t.val).chain(&t.test) {
                assert!(s.label < t.classes.len());
                assert_eq!(s.head_task, t.task_id);
                assert_eq!(bundle.label(s.index), t.classes[s.label]);
            }
        }
        let again = build_sequence(&bundle, &cfg, RngSeed(8)).unwrap();
        for (a, b) in seq.tasks.iter().zip(&again.tasks) {
            assert_eq!(a.classes, b.classes);
            assert_eq!(a.train, b.train);
        }
        let other = build_sequence(&bundle, &cfg, RngSeed(9)).unwrap();
        assert_ne!(
            seq.tasks[0].classes, other.tasks[0].classes,
            "different seeds should reshuffle classes (possible but astronomically unlikely collision)"
        );
    }

    #[test]
    fn random_split_requires_divisibility() {
        let bundle = synth_bundle(10, 10, 4);
        let cfg = SequenceConfig { num_tasks: 3, ..SequenceConfig::default() };
        assert!(matches!(
            build_sequence(&bundle, &cfg, RngSeed(1)),
            Err(TfmError::Config(_))
        ));
    }

    #[test]
    fn sized_first_takes_the_big_share() {
        let bundle = synth_bundle(20, 10, 4);
        let cfg = SequenceConfig {
            num_tasks: 3,
            split: SplitMode::SizedFirst,
            first_fraction: 0.5,
            ..SequenceConfig::default()
        };
        let seq = build_sequence(&bundle, &cfg, RngSeed(2)).unwrap();
        assert_eq!(seq.tasks[0].classes.len(), 10);
        assert_eq!(seq.tasks[1].classes.len(), 5);
        assert_eq!(seq.tasks[2].classes.len(), 5);
    }

    #[test]
    fn grouped_split_reads_and_validates_the_file() {
        let bundle = synth_bundle(6, 10, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.json");
        std::fs::write(&path, "[[0,3],[1,4],[2,5]]").unwrap();
        let cfg = SequenceConfig {
            num_tasks: 3,
            split: SplitMode::Grouped,
            grouping_file: Some(path.clone()),
            ..SequenceConfig::default()
        };
        let seq = build_sequence(&bundle, &cfg, RngSeed(3)).unwrap();
        assert_eq!(seq.tasks[0].classes, vec![0, 3]);
        assert_eq!(seq.tasks[2].classes, vec![2, 5]);

        std::fs::write(&path, "[[0,3],[1,0],[2,5]]").unwrap();
        assert!(matches!(
            build_sequence(&bundle, &cfg, RngSeed(3)),
            Err(TfmError::Config(_))
        ));
        std::fs::write(&path, "[[0,3],[1,9],[2,5]]").unwrap();
        assert!(matches!(
            build_sequence(&bundle, &cfg, RngSeed(3)),
            Err(TfmError::Config(_))
        ));
    }

    #[test]
    fn matrix_metrics_match_hand_arithmetic() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]).unwrap();
        m.push_row(vec![0.6, 0.8]).unwrap();
        assert_eq!(m.get(2, 1).unwrap(), 0.6);
        let f = m.forgetting().unwrap();
        assert!((f[0] - 0.3).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        assert!((m.mean_forgetting().unwrap() - 0.3).abs() < 1e-12);
        assert!((m.average_accuracy().unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(m.average_accuracy_excluding_first().unwrap(), Some(0.8));

        let csv = m.to_csv();
        assert_eq!(
            csv,
            "after_task,task_1,task_2\n1,0.900000,\n2,0.600000,0.800000\n"
        );

        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.get(1, 2).is_err());

        let mut constant = AccuracyMatrix::new();
        constant.push_row(vec![0.5]).unwrap();
        constant.push_row(vec![0.5, 0.5]).unwrap();
        constant.push_row(vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(constant.forgetting().unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(constant.average_accuracy().unwrap(), 0.5);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::all() {
            assert_eq!(m.to_string().parse::<MethodKind>().unwrap(), m);
        }
        assert!("spam".parse::<MethodKind>().is_err());
    }

    #[test]
    fn masked_methods_have_constant_columns() {
        let bundle = synth_bundle(6, 20, 6);
        let cfg = SequenceConfig { num_tasks: 3, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(5)).unwrap();
        for method in [MethodKind::Tfm, MethodKind::TfmNoFn, MethodKind::BinaryMask, MethodKind::Freeze] {
            let scenario = Scenario {
                bundle: &bundle,
                arch: tiny_arch(6, 12, 8, 24),
                method,
                growth: GrowthPolicy::validation_search(vec![0.0, 0.25], 0.015),
                trainer: quick_trainer(61),
                augment_hflip: false,
            };
            let outcome = run_scenario(&scenario, &sequence).unwrap();
            assert_eq!(outcome.matrix.checkpoints(), 3);
            for s in 1..=3u32 {
                for k in s..=3u32 {
                    assert_eq!(
                        outcome.matrix.get(k, s).unwrap(),
                        outcome.matrix.get(s, s).unwrap(),
                        "{}: column {} moved at checkpoint {}",
                        method,
                        s,
                        k
                    );
                }
            }
            assert!(outcome.forgetting.iter().all(|&f| f == 0.0), "{}", method);
            assert_eq!(outcome.mean_forgetting, 0.0);
        }
    }

    #[test]
    fn search_mode_records_candidates_and_grows_the_live_network() {
        let bundle = synth_bundle(4, 20, 6);
        let cfg = SequenceConfig { num_tasks: 2, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(6)).unwrap();
        let scenario = Scenario {
            bundle: &bundle,
            arch: tiny_arch(6, 8, 6, 20),
            method: MethodKind::Tfm,
            growth: GrowthPolicy {
                search_epochs: Some(2),
                ..GrowthPolicy::validation_search(vec![0.0, 0.5], 0.015)
            },
            trainer: quick_trainer(62),
            augment_hflip: false,
        };
        let outcome = run_scenario(&scenario, &sequence).unwrap();
        assert_eq!(outcome.growth_decisions.len(), 2);
        let d1 = &outcome.growth_decisions[0];
        assert_eq!(d1.added, vec![8, 6]);
        assert!(d1.candidates.is_empty());
        let d2 = &outcome.growth_decisions[1];
        assert_eq!(d2.candidates.len(), 2);
        assert!(d2.chosen_rate == 0.0 || d2.chosen_rate == 0.5);
        assert!(d2.candidates.iter().any(|c| c.added == vec![10, 10]));
        // The chosen candidate's additions are what the live network got.
        let restored = MaskedNetwork::from_bytes(&outcome.tasks[1].snapshot).unwrap();
        let expect: Vec<usize> = d2
            .added
            .iter()
            .zip([8usize, 6])
            .map(|(&a, w)| a + w)
            .collect();
        assert_eq!(restored.current_widths(), expect);
    }

    #[test]
    fn fixed_schedule_starts_small_and_grows_on_schedule() {
        let bundle = synth_bundle(4, 20, 6);
        let cfg = SequenceConfig { num_tasks: 2, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(7)).unwrap();
        let scenario = Scenario {
            bundle: &bundle,
            arch: tiny_arch(6, 20, 20, 20),
            method: MethodKind::TfmNoFn,
            growth: GrowthPolicy::fixed_schedule(vec![0.55, 0.05]),
            trainer: quick_trainer(63),
            augment_hflip: false,
        };
        let outcome = run_scenario(&scenario, &sequence).unwrap();
        let net1 = MaskedNetwork::from_bytes(&outcome.tasks[0].snapshot).unwrap();
        assert_eq!(net1.current_widths(), vec![11, 11]);
        let net2 = MaskedNetwork::from_bytes(&outcome.tasks[1].snapshot).unwrap();
        assert_eq!(net2.current_widths(), vec![12, 12]);
        assert_eq!(outcome.growth_decisions[1].added, vec![1, 1]);
        assert_eq!(outcome.growth_decisions[1].chosen_rate, 0.05);
    }

    #[test]
    fn freeze_keeps_the_body_from_task_one() {
        let bundle = synth_bundle(6, 15, 6);
        let cfg = SequenceConfig { num_tasks: 3, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(8)).unwrap();
        let scenario = Scenario {
            bundle: &bundle,
            arch: tiny_arch(6, 10, 6, 10),
            method: MethodKind::Freeze,
            growth: GrowthPolicy::none(3),
            trainer: quick_trainer(64),
            augment_hflip: false,
        };
        let outcome = run_scenario(&scenario, &sequence).unwrap();
        let nets: Vec<MaskedNetwork> = outcome
            .tasks
            .iter()
            .map(|t| MaskedNetwork::from_bytes(&t.snapshot).unwrap())
            .collect();
        for later in &nets[1..] {
            for (a, b) in nets[0].nodes().iter().zip(later.nodes()) {
                if let (
                    crate::network::LayerNode::Dense(x),
                    crate::network::LayerNode::Dense(y),
                ) = (a, b)
                {
                    assert_eq!(x.weights().bytes_le(), y.weights().bytes_le());
                    assert_eq!(x.biases().bytes_le(), y.biases().bytes_le());
                }
            }
        }
    }

    #[test]
    fn scenario_outcomes_are_deterministic() {
        let bundle = synth_bundle(4, 15, 6);
        let cfg = SequenceConfig { num_tasks: 2, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(9)).unwrap();
        let scenario = Scenario {
            bundle: &bundle,
            arch: tiny_arch(6, 8, 6, 16),
            method: MethodKind::Tfm,
            growth: GrowthPolicy::validation_search(vec![0.0, 0.25], 0.015),
            trainer: quick_trainer(65),
            augment_hflip: false,
        };
        let a = run_scenario(&scenario, &sequence).unwrap();
        let b = run_scenario(&scenario, &sequence).unwrap();
        assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.snapshot, y.snapshot);
        }
    }

    #[test]
    fn run_dir_holds_every_report() {
        let bundle = synth_bundle(4, 15, 6);
        let cfg = SequenceConfig { num_tasks: 2, ..SequenceConfig::default() };
        let sequence = build_sequence(&bundle, &cfg, RngSeed(10)).unwrap();
        let arch = tiny_arch(6, 8, 6, 16);
        let scenario = Scenario {
            bundle: &bundle,
            arch: arch.clone(),
            method: MethodKind::Finetune,
            growth: GrowthPolicy::none(2),
            trainer: quick_trainer(66),
            augment_hflip: false,
        };
        let outcome = run_scenario(&scenario, &sequence).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        write_run_dir(&run, &outcome, &serde_json::json!({"method": "finetune"}), &arch).unwrap();
        for name in ["config.json", "matrix.csv", "forgetting.csv", "growth.json", "overhead.csv"] {
            assert!(run.join(name).is_file(), "{} missing", name);
        }
        assert!(run.join("train_records/task_1.json").is_file());
        assert!(run.join("train_records/task_2.json").is_file());
        let snap = run.join("snapshots/task_002.tfm");
        assert!(snap.is_file());
        let net = MaskedNetwork::load(&snap).unwrap();
        assert_eq!(net.task_classes().len(), 2);
        let matrix = std::fs::read_to_string(run.join("matrix.csv")).unwrap();
        assert!(matrix.starts_with("after_task,task_1,task_2\n"));
        let records: TrainRecord = serde_json::from_str(
            &std::fs::read_to_string(run.join("train_records/task_1.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(records.task, 1);
    }
}
