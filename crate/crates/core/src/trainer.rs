//! Plain SGD training of one task, with validation-driven learning-rate
//! decay and best-epoch restore.

use crate::data::{DatasetBundle, SampleSpec};
use crate::error::{Result, TfmError};
use crate::network::{MaskedNetwork, TrainSample};
use crate::rng::RngSeed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Cross-entropy of a single sample. Returns the loss and the gradient with
/// respect to the logits (softmax minus one-hot). Numerically stabilized by
/// max subtraction; internal arithmetic in f64.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(TfmError::Contract(format!(
            "label {} out of range for {} classes",
            label, n
        )));
    }
    let max = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let mut shifted = Vec::with_capacity(n);
    for &l in logits.data() {
        let e = (l as f64 - max).exp();
        shifted.push(e);
        sum += e;
    }
    let loss = -(shifted[label] / sum).ln();
    let grad: Vec<f32> = shifted
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            (p - if i == label { 1.0 } else { 0.0 }) as f32
        })
        .collect();
    Ok((loss, Tensor::from_vec(grad)))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr_init: f32,
    pub lr_decay_factor: f32,
    /// Consecutive non-improving validation epochs before a decay.
    pub patience_epochs: u32,
    /// Training stops once the decayed rate falls below this.
    pub lr_floor: f32,
    pub max_epochs: usize,
    pub dropout_p: f32,
    /// A validation loss counts as an improvement only when it beats the
    /// best seen by more than this.
    pub improve_tol: f64,
    pub seed: RngSeed,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            batch_size: 64,
            lr_init: 0.05,
            lr_decay_factor: 3.0,
            patience_epochs: 5,
            lr_floor: 1e-4,
            max_epochs: 200,
            dropout_p: 0.5,
            improve_tol: 1e-5,
            seed: RngSeed(0),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TfmError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 1.0) {
            return Err(TfmError::Config("lr_init > 0 and decay factor > 1 required".into()));
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 {
            return Err(TfmError::Config("patience and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TfmError::Config("dropout_p must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleStep {
    /// Validation loss improved; snapshot the model.
    Improved,
    Stalled,
    /// Patience ran out; the new decayed rate applies from the next epoch.
    Decayed(f32),
    /// The decayed rate fell below the floor; stop training.
    Stop,
}

/// Learning-rate decay driven by validation loss. The rate after k decays is
/// computed as lr_init / factor^k rather than by repeated division, so the
/// value is exactly reproducible from the decay count.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    lr_init: f32,
    factor: f32,
    patience: u32,
    floor: f32,
    improve_tol: f64,
    best: f64,
    stalled: u32,
    decays: i32,
}

impl LrSchedule {
    pub fn new(cfg: &TrainerConfig) -> LrSchedule {
        LrSchedule {
            lr_init: cfg.lr_init,
            factor: cfg.lr_decay_factor,
            patience: cfg.patience_epochs,
            floor: cfg.lr_floor,
            improve_tol: cfg.improve_tol,
            best: f64::INFINITY,
            stalled: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        (self.lr_init as f64 / (self.factor as f64).powi(self.decays)) as f32
    }

    pub fn decay_count(&self) -> u32 {
        self.decays as u32
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        if val_loss < self.best - self.improve_tol {
            self.best = val_loss;
            self.stalled = 0;
            return ScheduleStep::Improved;
        }
        self.stalled += 1;
        if self.stalled < self.patience {
            return ScheduleStep::Stalled;
        }
        self.stalled = 0;
        self.decays += 1;
        let lr = self.lr();
        if lr < self.floor {
            ScheduleStep::Stop
        } else {
            ScheduleStep::Decayed(lr)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    LrFloor,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    pub task: u32,
    pub epochs: Vec<EpochStats>,
    pub stop_reason: StopReason,
    /// Epoch with the lowest validation loss (reporting only).
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Where a task's training data comes from.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub bundle: &'a DatasetBundle,
    pub train: &'a [SampleSpec],
    pub val: &'a [SampleSpec],
    /// Mirror image samples left-right with probability one half.
    pub augment_hflip: bool,
    /// Train only the heads, leaving the body untouched.
    pub head_only: bool,
}

fn make_sample(
    bundle: &DatasetBundle,
    spec: &SampleSpec,
    augment: Option<&mut rand_chacha::ChaCha8Rng>,
) -> TrainSample {
    use rand::RngExt;
    let mut x = bundle.sample(spec.index);
    if let Some(rng) = augment {
        if rng.random::<f32>() < 0.5 {
            x = crate::data::hflip(&x).unwrap_or(x);
        }
    }
    TrainSample {
        x,
        label: spec.label,
        head_task: spec.head_task,
    }
}

/// Mean loss and accuracy of the network on the given samples, eval mode.
/// Each sample is routed through its own head; ties in the argmax go to the
/// lowest class index.
pub fn evaluate(
    net: &MaskedNetwork,
    bundle: &DatasetBundle,
    specs: &[SampleSpec],
) -> Result<(f64, f64)> {
    if specs.is_empty() {
        return Err(TfmError::Data("evaluation split is empty".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for spec in specs {
        let logits = net.predict(&bundle.sample(spec.index), spec.head_task)?;
        let (loss, _) = cross_entropy(&logits, spec.label)?;
        loss_sum += loss;
        if argmax(logits.data()) == spec.label {
            correct += 1;
        }
    }
    Ok((
        loss_sum / specs.len() as f64,
        correct as f64 / specs.len() as f64,
    ))
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Train one task to completion: epochs of shuffled minibatches, validation
/// after each epoch, decay on stall, stop at the lr floor or the epoch cap.
/// The network keeps its final parameters; validation only drives the decay
/// ladder.
pub fn fit_task(
    net: &mut MaskedNetwork,
    task: u32,
    ctx: TrainContext<'_>,
    cfg: &TrainerConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    if ctx.train.is_empty() {
        return Err(TfmError::Data(format!("task {} has no training samples", task)));
    }
    if ctx.val.is_empty() {
        return Err(TfmError::Data(format!("task {} has no validation samples", task)));
    }
    let mut shuffle_rng = cfg.seed.child_idx("shuffle", task as u64).stream();
    let mut step_rng = cfg.seed.child_idx("step", task as u64).stream();
    let mut aug_rng = cfg.seed.child_idx("augment", task as u64).stream();
    let augment = ctx.augment_hflip && ctx.bundle.is_image();

    let mut schedule = LrSchedule::new(cfg);
    let mut order: Vec<usize> = (0..ctx.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best_epoch = 0usize;
    let mut stop_reason = StopReason::EpochCap;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    make_sample(
                        ctx.bundle,
                        &ctx.train[i],
                        if augment { Some(&mut aug_rng) } else { None },
                    )
                })
                .collect();
            let loss = net.train_step(
                &batch,
                task,
                lr,
                cfg.dropout_p,
                ctx.head_only,
                &mut step_rng,
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / ctx.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(TfmError::Contract(format!(
                "training loss diverged at epoch {}",
                epoch
            )));
        }
        let (val_loss, val_accuracy) = evaluate(net, ctx.bundle, ctx.val)?;
        epochs.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_accuracy,
        });
        match schedule.observe(val_loss) {
            ScheduleStep::Improved => {
                best_epoch = epoch;
            }
            ScheduleStep::Stalled => {}
            ScheduleStep::Decayed(new_lr) => {
                log::debug!("task {}: lr decayed to {} after epoch {}", task, new_lr, epoch);
            }
            ScheduleStep::Stop => {
                stop_reason = StopReason::LrFloor;
                break;
            }
        }
    }
    Ok(TrainRecord {
        task,
        epochs,
        stop_reason,
        best_epoch,
        best_val_loss: schedule.best_val_loss(),
    })
}
