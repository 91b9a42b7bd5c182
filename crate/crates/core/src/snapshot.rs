//! Binary model snapshots. Layout:
//!
//! ```text
//! "TFMNET01"
//! u32 manifest length, manifest JSON (arch, mode, seed, task records, owners)
//! per growable layer: kind tag, shape header, weights, biases, FN params
//! mask section: packed per-task per-layer masks (integrity copy)
//! head section: per-task linear heads
//! ```
//!
//! All integers and floats are little-endian. The mask section duplicates
//! what the manifest's ownership records imply; load verifies they agree
//! before accepting the file.

use crate::error::{Result, TfmError};
use crate::layers::{FnParams, MaskedConv, MaskedDense, TaskHead};
use crate::mask::{
    read_exact_at, read_mask_snapshots, read_u32_le, write_mask_snapshots, LayerTaskMask,
    OwnershipLedger,
};
use crate::network::{ArchSpec, LayerNode, MaskMode, MaskedNetwork, NetOptions};
use crate::rng::RngSeed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TFMNET01";

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TaskRecord {
    task: u32,
    classes: usize,
    widths: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: ArchSpec,
    mask_mode: MaskMode,
    fn_enabled: bool,
    seed: u64,
    partition_tasks: Option<u32>,
    tasks: Vec<TaskRecord>,
    owners: Vec<Vec<u32>>,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&t.bytes_le())?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, count: usize, offset: &mut u64) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_fn_params<W: Write>(w: &mut W, params: &[(u32, FnParams)]) -> Result<()> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (task, p) in params {
        w.write_all(&task.to_le_bytes())?;
        w.write_all(&(p.gamma.len() as u32).to_le_bytes())?;
        write_tensor(w, &p.gamma)?;
        write_tensor(w, &p.beta)?;
    }
    Ok(())
}

fn read_fn_params<R: Read>(r: &mut R, offset: &mut u64) -> Result<Vec<(u32, FnParams)>> {
    let count = read_u32_le(r, offset)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let task = read_u32_le(r, offset)?;
        let width = read_u32_le(r, offset)? as usize;
        let gamma = Tensor::from_vec(read_f32s(r, width, offset)?);
        let beta = Tensor::from_vec(read_f32s(r, width, offset)?);
        out.push((task, FnParams { gamma, beta }));
    }
    Ok(out)
}

fn save_to<W: Write>(net: &MaskedNetwork, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    let ledger = net.ledger();
    let manifest = Manifest {
        arch: net.arch().clone(),
        mask_mode: net.mask_mode(),
        fn_enabled: net.fn_enabled(),
        seed: net.seed().0,
        partition_tasks: net.partition_tasks(),
        tasks: net
            .task_classes()
            .iter()
            .map(|&(task, classes)| {
                Ok(TaskRecord {
                    task,
                    classes,
                    widths: (0..ledger.layer_count())
                        .map(|l| ledger.width_at(l, task))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?,
        owners: (0..ledger.layer_count())
            .map(|l| ledger.owners(l).to_vec())
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| TfmError::Contract(format!("manifest serialization: {}", e)))?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;

    for (fl, g) in net.geoms().iter().enumerate() {
        w.write_all(&(fl as u32).to_le_bytes())?;
        match &net.nodes()[g.spec_index] {
            LayerNode::Dense(l) => {
                w.write_all(&[KIND_DENSE])?;
                w.write_all(&(l.out_features() as u32).to_le_bytes())?;
                w.write_all(&(l.in_features() as u32).to_le_bytes())?;
                write_tensor(w, l.weights())?;
                write_tensor(w, l.biases())?;
                write_fn_params(w, l.all_fn_params())?;
            }
            LayerNode::Conv(l) => {
                w.write_all(&[KIND_CONV])?;
                w.write_all(&(l.out_channels() as u32).to_le_bytes())?;
                w.write_all(&(l.in_channels() as u32).to_le_bytes())?;
                w.write_all(&(l.kernel() as u32).to_le_bytes())?;
                write_tensor(w, l.kernels())?;
                write_tensor(w, l.biases())?;
                write_fn_params(w, l.all_fn_params())?;
            }
            _ => unreachable!("geoms point at feature layers"),
        }
    }

    let mut masks: Vec<LayerTaskMask> = Vec::new();
    if net.mask_mode() != MaskMode::None {
        for &(task, _) in net.task_classes() {
            for fl in 0..ledger.layer_count() {
                masks.push(ledger.ternary_mask(fl, task)?);
            }
        }
    }
    write_mask_snapshots(w, &masks)?;

    w.write_all(&(net.heads().len() as u32).to_le_bytes())?;
    for head in net.heads() {
        w.write_all(&head.task_id.to_le_bytes())?;
        w.write_all(&(head.classes() as u32).to_le_bytes())?;
        w.write_all(&(head.in_features() as u32).to_le_bytes())?;
        write_tensor(w, head.weights())?;
        write_tensor(w, head.biases())?;
    }
    Ok(())
}

fn load_from<R: Read>(r: &mut R) -> Result<MaskedNetwork> {
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    read_exact_at(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(TfmError::Format {
            offset: 0,
            reason: format!("bad magic {:02x?}", magic),
        });
    }
    let manifest_len = read_u32_le(r, &mut offset)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_exact_at(r, &mut manifest_bytes, &mut offset)?;
    let manifest_offset = offset - manifest_len as u64;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| {
        TfmError::Format {
            offset: manifest_offset,
            reason: format!("manifest: {}", e),
        }
    })?;
    if manifest.tasks.is_empty() {
        return Err(TfmError::Format {
            offset: manifest_offset,
            reason: "snapshot has no tasks".into(),
        });
    }

    let final_widths: Vec<usize> = manifest.owners.iter().map(|o| o.len()).collect();
    let opts = NetOptions {
        mask_mode: manifest.mask_mode,
        fn_enabled: manifest.fn_enabled,
        initial_widths: Some(final_widths.clone()),
        partition_tasks: manifest.partition_tasks,
    };
    let mut net = MaskedNetwork::new(manifest.arch.clone(), opts, RngSeed(manifest.seed))?;

    let layer_count = net.feature_layer_count();
    if manifest.owners.len() != layer_count {
        return Err(TfmError::Format {
            offset: manifest_offset,
            reason: format!(
                "manifest lists {} layers, architecture has {}",
                manifest.owners.len(),
                layer_count
            ),
        });
    }

    for fl in 0..layer_count {
        let stored_fl = read_u32_le(r, &mut offset)?;
        if stored_fl as usize != fl {
            return Err(TfmError::Format {
                offset: offset - 4,
                reason: format!("expected layer {}, found {}", fl, stored_fl),
            });
        }
        let mut kind = [0u8; 1];
        read_exact_at(r, &mut kind, &mut offset)?;
        let spec_index = net.geoms()[fl].spec_index;
        match kind[0] {
            KIND_DENSE => {
                let out = read_u32_le(r, &mut offset)? as usize;
                let inp = read_u32_le(r, &mut offset)? as usize;
                let w = Tensor::new(vec![out, inp], read_f32s(r, out * inp, &mut offset)?)?;
                let b = Tensor::from_vec(read_f32s(r, out, &mut offset)?);
                let fn_params = read_fn_params(r, &mut offset)?;
                net.nodes_mut()[spec_index] =
                    LayerNode::Dense(MaskedDense::from_parts(fl as u32, w, b, fn_params)?);
            }
            KIND_CONV => {
                let out = read_u32_le(r, &mut offset)? as usize;
                let inp = read_u32_le(r, &mut offset)? as usize;
                let k = read_u32_le(r, &mut offset)? as usize;
                let kernels = Tensor::new(
                    vec![out, inp, k, k],
                    read_f32s(r, out * inp * k * k, &mut offset)?,
                )?;
                let b = Tensor::from_vec(read_f32s(r, out, &mut offset)?);
                let fn_params = read_fn_params(r, &mut offset)?;
                let (stride, pad) = match &net.nodes()[spec_index] {
                    LayerNode::Conv(c) => (c.stride, c.pad),
                    _ => {
                        return Err(TfmError::Format {
                            offset,
                            reason: format!("layer {} is not convolutional", fl),
                        })
                    }
                };
                net.nodes_mut()[spec_index] = LayerNode::Conv(MaskedConv::from_parts(
                    fl as u32, kernels, b, stride, pad, fn_params,
                )?);
            }
            other => {
                return Err(TfmError::Format {
                    offset: offset - 1,
                    reason: format!("unknown layer kind {}", other),
                })
            }
        }
    }

    let stored_masks = read_mask_snapshots(r, &mut offset)?;

    let head_count = read_u32_le(r, &mut offset)? as usize;
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let task = read_u32_le(r, &mut offset)?;
        let classes = read_u32_le(r, &mut offset)? as usize;
        let in_features = read_u32_le(r, &mut offset)? as usize;
        let w = Tensor::new(
            vec![classes, in_features],
            read_f32s(r, classes * in_features, &mut offset)?,
        )?;
        let b = Tensor::from_vec(read_f32s(r, classes, &mut offset)?);
        heads.push(TaskHead::from_parts(task, w, b)?);
    }

    let widths_per_task: Vec<(u32, Vec<usize>)> = manifest
        .tasks
        .iter()
        .map(|t| (t.task, t.widths.clone()))
        .collect();
    let ledger = OwnershipLedger::from_owners(
        manifest.owners,
        &widths_per_task,
        manifest.partition_tasks.is_some(),
    )?;

    // The packed mask section must agree with what the ownership records
    // derive; a mismatch means the file is corrupt or tampered with.
    if manifest.mask_mode != MaskMode::None {
        let mut expected = Vec::new();
        for t in &manifest.tasks {
            for fl in 0..layer_count {
                expected.push(ledger.ternary_mask(fl, t.task)?);
            }
        }
        if stored_masks.len() != expected.len() {
            return Err(TfmError::Format {
                offset,
                reason: format!(
                    "mask section holds {} masks, ownership implies {}",
                    stored_masks.len(),
                    expected.len()
                ),
            });
        }
        for (s, e) in stored_masks.iter().zip(&expected) {
            if s != e {
                return Err(TfmError::Format {
                    offset,
                    reason: format!(
                        "mask for layer {} task {} disagrees with ownership records",
                        e.layer_id, e.task_id
                    ),
                });
            }
        }
    } else if !stored_masks.is_empty() {
        return Err(TfmError::Format {
            offset,
            reason: "unmasked snapshot carries masks".into(),
        });
    }

    let task_classes: Vec<(u32, usize)> =
        manifest.tasks.iter().map(|t| (t.task, t.classes)).collect();
    net.set_state(heads, ledger, task_classes)?;
    Ok(net)
}

impl MaskedNetwork {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        save_to(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MaskedNetwork> {
        let mut r = BufReader::new(File::open(path)?);
        load_from(&mut r)
    }

    /// Serialized snapshot in memory.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        save_to(self, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MaskedNetwork> {
        let mut r = bytes;
        load_from(&mut r)
    }
}
