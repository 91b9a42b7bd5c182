//! Python bindings: masked networks, mask packing, overhead pricing, and
//! whole-scenario runs behind one `tfm_py` module.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::ChaCha8Rng;

use tfm_core::config::RunConfig;
use tfm_core::mask::{pack_states, unpack_states, MaskState};
use tfm_core::network::{ArchSpec, MaskedNetwork, NetOptions, TrainSample};
use tfm_core::overhead::write_overhead_csv;
use tfm_core::rng::RngSeed;
use tfm_core::tensor::Tensor;
use tfm_core::TfmError;

pub mod convert {
    use super::*;

    pub fn pyerr(e: TfmError) -> PyErr {
        match e {
            TfmError::Io(_) => PyIOError::new_err(e.to_string()),
            other => PyValueError::new_err(other.to_string()),
        }
    }

    pub fn parse_arch(arch_json: &str) -> Result<ArchSpec, TfmError> {
        serde_json::from_str(arch_json)
            .map_err(|e| TfmError::Config(format!("architecture json: {}", e)))
    }

    pub fn state_name(state: MaskState) -> &'static str {
        match state {
            MaskState::Masked => "masked",
            MaskState::ForwardOnly => "forward_only",
            MaskState::Normal => "normal",
        }
    }

    pub fn state_from_name(name: &str) -> Result<MaskState, TfmError> {
        match name {
            "masked" => Ok(MaskState::Masked),
            "forward_only" => Ok(MaskState::ForwardOnly),
            "normal" => Ok(MaskState::Normal),
            other => Err(TfmError::InvalidMask(format!(
                "unknown state '{}' (expected masked, forward_only or normal)",
                other
            ))),
        }
    }

    pub fn options_from(
        mode: &str,
        feature_norm: bool,
        partition_tasks: u32,
    ) -> Result<NetOptions, TfmError> {
        match mode {
            "ternary" => Ok(NetOptions::ternary(feature_norm)),
            "binary" => {
                if partition_tasks == 0 {
                    return Err(TfmError::Config(
                        "binary mode needs partition_tasks >= 1".into(),
                    ));
                }
                Ok(NetOptions::binary(partition_tasks))
            }
            "plain" => Ok(NetOptions::plain()),
            other => Err(TfmError::Config(format!(
                "unknown mode '{}' (expected ternary, binary or plain)",
                other
            ))),
        }
    }

    pub fn tensor_from(x: Vec<f32>, shape: Option<Vec<usize>>) -> Result<Tensor, TfmError> {
        match shape {
            None => Ok(Tensor::from_vec(x)),
            Some(dims) => Tensor::new(dims, x),
        }
    }
}

use convert::*;

/// A growable masked network. Tasks are grown, begun, trained and queried
/// by the same rules the Rust harness uses.
#[pyclass]
struct Network {
    inner: MaskedNetwork,
    step_rng: ChaCha8Rng,
}

fn step_stream(net: &MaskedNetwork) -> ChaCha8Rng {
    net.seed().child("py-steps").stream()
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (arch_json, mode="ternary", feature_norm=true, partition_tasks=0, seed=7))]
    fn new(
        arch_json: &str,
        mode: &str,
        feature_norm: bool,
        partition_tasks: u32,
        seed: u64,
    ) -> PyResult<Network> {
        let arch = parse_arch(arch_json).map_err(pyerr)?;
        let opts = options_from(mode, feature_norm, partition_tasks).map_err(pyerr)?;
        let inner = MaskedNetwork::new(arch, opts, RngSeed(seed)).map_err(pyerr)?;
        let step_rng = step_stream(&inner);
        Ok(Network { inner, step_rng })
    }

    /// Add features for a task; lengths match the feature layer count.
    fn grow(&mut self, task: u32, added: Vec<usize>) -> PyResult<()> {
        self.inner.grow(task, &added).map_err(pyerr)
    }

    /// Open a task for training with a fresh head of the given class count.
    fn begin_task(&mut self, task: u32, classes: usize) -> PyResult<()> {
        self.inner.begin_task(task, classes).map_err(pyerr)
    }

    /// Logits of one sample through the given task's masks and head.
    #[pyo3(signature = (x, task, shape=None))]
    fn predict(&self, x: Vec<f32>, task: u32, shape: Option<Vec<usize>>) -> PyResult<Vec<f32>> {
        let t = tensor_from(x, shape).map_err(pyerr)?;
        let logits = self.inner.predict(&t, task).map_err(pyerr)?;
        Ok(logits.data().to_vec())
    }

    /// One SGD step on a batch; returns the mean loss.
    #[pyo3(signature = (xs, labels, task, lr, dropout_p=0.0, head_only=false, shape=None))]
    #[allow(clippy::too_many_arguments)]
    fn train_batch(
        &mut self,
        xs: Vec<Vec<f32>>,
        labels: Vec<u32>,
        task: u32,
        lr: f32,
        dropout_p: f32,
        head_only: bool,
        shape: Option<Vec<usize>>,
    ) -> PyResult<f64> {
        if xs.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} samples but {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let batch: Vec<TrainSample> = xs
            .into_iter()
            .zip(&labels)
            .map(|(x, &label)| {
                Ok(TrainSample {
                    x: tensor_from(x, shape.clone()).map_err(pyerr)?,
                    label: label as usize,
                    head_task: task,
                })
            })
            .collect::<PyResult<_>>()?;
        self.inner
            .train_step(&batch, task, lr, dropout_p, head_only, &mut self.step_rng)
            .map_err(pyerr)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(pyerr)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Network> {
        let inner = MaskedNetwork::load(std::path::Path::new(path)).map_err(pyerr)?;
        let step_rng = step_stream(&inner);
        Ok(Network { inner, step_rng })
    }

    /// Current feature count of every growable layer.
    fn widths(&self) -> Vec<usize> {
        self.inner.current_widths()
    }

    /// Ternary state of every feature in one layer for one task.
    fn mask_states(&self, layer: usize, task: u32) -> PyResult<Vec<String>> {
        let states = self.inner.ledger().states(layer, task).map_err(pyerr)?;
        Ok(states.iter().map(|&s| state_name(s).to_string()).collect())
    }

    /// Tasks with heads, in the order they were begun: (task, classes).
    fn tasks(&self) -> Vec<(u32, usize)> {
        self.inner.task_classes().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(widths={:?}, tasks={})",
            self.inner.current_widths(),
            self.inner.task_classes().len()
        )
    }
}

/// Pack ternary state names into the 2-bit wire form.
#[pyfunction]
fn pack_mask(states: Vec<String>) -> PyResult<Vec<u8>> {
    let states: Vec<MaskState> = states
        .iter()
        .map(|s| state_from_name(s))
        .collect::<Result<_, _>>()
        .map_err(pyerr)?;
    Ok(pack_states(&states))
}

/// Unpack the 2-bit wire form back into state names.
#[pyfunction]
fn unpack_mask(packed: Vec<u8>, count: usize) -> PyResult<Vec<String>> {
    let states = unpack_states(&packed, count).map_err(pyerr)?;
    Ok(states.iter().map(|&s| state_name(s).to_string()).collect())
}

/// Exact (weights, features) of an architecture at its declared widths.
#[pyfunction]
fn count_params(arch_json: &str) -> PyResult<(u64, u64)> {
    let arch = parse_arch(arch_json).map_err(pyerr)?;
    tfm_core::overhead::count_params(&arch).map_err(pyerr)
}

/// Per-method storage overhead table (CSV) for an architecture.
#[pyfunction]
fn overhead_csv(arch_json: &str, tasks: u32) -> PyResult<String> {
    let arch = parse_arch(arch_json).map_err(pyerr)?;
    let (weights, features) = tfm_core::overhead::count_params(&arch).map_err(pyerr)?;
    let mut buf = Vec::new();
    write_overhead_csv(&mut buf, weights, features, tasks).map_err(pyerr)?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Mean cross-entropy loss and logit gradient for one sample.
#[pyfunction]
fn cross_entropy(logits: Vec<f32>, label: usize) -> PyResult<(f64, Vec<f32>)> {
    let (loss, grad) =
        tfm_core::trainer::cross_entropy(&Tensor::from_vec(logits), label).map_err(pyerr)?;
    Ok((loss, grad.data().to_vec()))
}

/// Execute a full run config (JSON text); returns a JSON summary with the
/// accuracy matrix, forgetting, and the report directory.
#[pyfunction]
fn run_scenario(config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(pyerr)?;
    let (outcome, out_dir) = cfg.execute().map_err(pyerr)?;
    let k = outcome.matrix.checkpoints() as u32;
    let matrix: Vec<Vec<f64>> = (1..=k)
        .map(|row| {
            (1..=row)
                .map(|s| outcome.matrix.get(row, s).unwrap())
                .collect()
        })
        .collect();
    let summary = serde_json::json!({
        "method": outcome.method.to_string(),
        "average_accuracy": outcome.average_accuracy,
        "mean_forgetting": outcome.mean_forgetting,
        "forgetting": outcome.forgetting,
        "matrix": matrix,
        "out_dir": out_dir,
    });
    Ok(summary.to_string())
}

#[pymodule]
fn tfm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(pack_mask, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_mask, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(overhead_csv, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
