//! Closed-form memory overhead accounting: what each continual-learning
//! family stores per task, evaluated on a concrete architecture.

use crate::error::Result;
use crate::network::{ArchSpec, FeatureKind, LayerSpec};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Per-task storage formula of one method family. All terms are additive;
/// bit terms are rounded up to whole bytes per task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct OverheadModel {
    pub id: String,
    /// Mask bits stored per feature, per task.
    pub bits_per_feature_per_task: u64,
    /// Extra f32 parameters per feature, per task.
    pub floats_per_feature_per_task: u64,
    /// Mask bits stored per weight, per task.
    pub bits_per_weight_per_task: u64,
    /// One-off f32 parameters per weight (stored once any task exists).
    pub floats_per_weight_once: u64,
    /// Full f32 copy of the network per task.
    pub network_copy: bool,
}

impl OverheadModel {
    fn new(id: &str) -> OverheadModel {
        OverheadModel {
            id: id.to_string(),
            bits_per_feature_per_task: 0,
            floats_per_feature_per_task: 0,
            bits_per_weight_per_task: 0,
            floats_per_weight_once: 0,
            network_copy: false,
        }
    }

    /// Two mask bits per feature per task.
    pub fn feature_mask() -> OverheadModel {
        OverheadModel {
            bits_per_feature_per_task: 2,
            ..OverheadModel::new("tfm_mask")
        }
    }

    /// Two mask bits plus two normalization floats per feature per task.
    pub fn feature_mask_with_fn() -> OverheadModel {
        OverheadModel {
            bits_per_feature_per_task: 2,
            floats_per_feature_per_task: 2,
            ..OverheadModel::new("tfm_mask_fn")
        }
    }

    /// One mask bit per weight per task.
    pub fn weight_mask() -> OverheadModel {
        OverheadModel {
            bits_per_weight_per_task: 1,
            ..OverheadModel::new("weight_mask")
        }
    }

    /// One importance float per weight, stored once.
    pub fn importance_weight() -> OverheadModel {
        OverheadModel {
            floats_per_weight_once: 1,
            ..OverheadModel::new("importance_weight")
        }
    }

    /// A full network copy per task.
    pub fn network_copy() -> OverheadModel {
        OverheadModel {
            network_copy: true,
            ..OverheadModel::new("network_copy")
        }
    }

    /// The families compared in reports, cheapest first by design.
    pub fn builtin() -> Vec<OverheadModel> {
        vec![
            OverheadModel::feature_mask(),
            OverheadModel::feature_mask_with_fn(),
            OverheadModel::weight_mask(),
            OverheadModel::importance_weight(),
            OverheadModel::network_copy(),
        ]
    }

    /// Total extra bytes after `tasks` tasks on a network with the given
    /// weight and feature counts.
    pub fn overhead_bytes(&self, weights: u64, features: u64, tasks: u32) -> u64 {
        if tasks == 0 {
            return 0;
        }
        let t = tasks as u64;
        let per_task = (self.bits_per_feature_per_task * features).div_ceil(8)
            + self.floats_per_feature_per_task * features * 4
            + (self.bits_per_weight_per_task * weights).div_ceil(8)
            + if self.network_copy { 4 * weights } else { 0 };
        t * per_task + self.floats_per_weight_once * weights * 4
    }

    /// Bytes after each task count 0..=tasks.
    pub fn overhead_curve(&self, weights: u64, features: u64, tasks: u32) -> Vec<(u32, u64)> {
        (0..=tasks)
            .map(|t| (t, self.overhead_bytes(weights, features, t)))
            .collect()
    }
}

/// Exact parameter counts of an architecture at its declared widths:
/// weights including biases, and the number of features (dense units plus
/// conv channels). Heads are excluded.
pub fn count_params(arch: &ArchSpec) -> Result<(u64, u64)> {
    let widths = arch.spec_widths();
    let (geoms, _, _) = arch.resolve(&widths)?;
    let mut weights = 0u64;
    let mut features = 0u64;
    for g in &geoms {
        features += g.width as u64;
        let per_feature = match g.kind {
            FeatureKind::Dense => g.in_units as u64,
            FeatureKind::Conv => {
                let k = match arch.layers[g.spec_index] {
                    LayerSpec::Conv { kernel, .. } => kernel as u64,
                    _ => unreachable!(),
                };
                g.in_units as u64 * k * k
            }
        };
        weights += g.width as u64 * (per_feature + 1);
    }
    Ok((weights, features))
}

/// Write the comparison table: one row per builtin model and task count.
pub fn write_overhead_csv<W: Write>(w: &mut W, weights: u64, features: u64, tasks: u32) -> Result<()> {
    writeln!(w, "method,tasks,bytes")?;
    for model in OverheadModel::builtin() {
        for (t, bytes) in model.overhead_curve(weights, features, tasks) {
            writeln!(w, "{},{},{}", model.id, t, bytes)?;
        }
    }
    Ok(())
}
