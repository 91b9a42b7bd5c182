//! Ternary per-feature masks and their storage.
//!
//! Each feature of each layer is, for a given task, in one of three states:
//!
//! * `Normal`: the task owns the feature, it is visible and trainable,
//! * `ForwardOnly`: an earlier task owns it, it is visible but frozen,
//! * `Masked`: a later task owns it, it does not exist for this task.
//!
//! The states are never stored per task during training. Instead an
//! append-only [`OwnershipLedger`] records which task added each feature,
//! and both the trainability mask `m` and the visibility mask `n` are
//! derived from it on demand. Packed 2-bit snapshots are materialized only
//! at task boundaries for persistence and audits.

use crate::error::{Result, TfmError};
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MaskState {
    /// Feature does not exist for this task (m=0, n=0).
    Masked = 0,
    /// Feature is used in the forward pass but frozen (m=0, n=1).
    ForwardOnly = 1,
    /// Feature is owned by this task: used and trained (m=1, n=1).
    Normal = 2,
}

impl MaskState {
    pub fn bits(self) -> u8 {
        self as u8
    }

    pub fn from_bits(b: u8) -> Result<MaskState> {
        match b {
            0 => Ok(MaskState::Masked),
            1 => Ok(MaskState::ForwardOnly),
            2 => Ok(MaskState::Normal),
            other => Err(TfmError::InvalidMask(format!(
                "bit pattern {:#04b} is not a valid mask state",
                other
            ))),
        }
    }

    pub fn trainable(self) -> bool {
        self == MaskState::Normal
    }

    pub fn visible(self) -> bool {
        self != MaskState::Masked
    }

    /// Combine the m and n bits back into a state. m=1,n=0 cannot occur.
    pub fn from_m_n(m: bool, n: bool) -> Result<MaskState> {
        match (m, n) {
            (true, true) => Ok(MaskState::Normal),
            (false, true) => Ok(MaskState::ForwardOnly),
            (false, false) => Ok(MaskState::Masked),
            (true, false) => Err(TfmError::InvalidMask(
                "trainable but invisible feature".into(),
            )),
        }
    }
}

/// Pack states at 2 bits per feature. Feature f lands in byte f/4, occupying
/// bits (2f mod 8, 2f mod 8 + 1) with the low bit first; the final byte is
/// zero padded.
pub fn pack_states(states: &[MaskState]) -> Vec<u8> {
    let mut out = vec![0u8; states.len().div_ceil(4)];
    for (f, s) in states.iter().enumerate() {
        out[f / 4] |= s.bits() << ((2 * f) % 8);
    }
    out
}

/// Inverse of [`pack_states`]. Rejects the reserved bit pattern 3 and
/// non-zero padding bits.
pub fn unpack_states(packed: &[u8], count: usize) -> Result<Vec<MaskState>> {
    let want = count.div_ceil(4);
    if packed.len() != want {
        return Err(TfmError::InvalidMask(format!(
            "packed length {} does not match {} features",
            packed.len(),
            count
        )));
    }
    let mut out = Vec::with_capacity(count);
    for f in 0..count {
        let bits = (packed[f / 4] >> ((2 * f) % 8)) & 0b11;
        out.push(MaskState::from_bits(bits)?);
    }
    if count % 4 != 0 {
        let used = 2 * (count % 4);
        let tail = packed[packed.len() - 1] >> used;
        if tail != 0 {
            return Err(TfmError::InvalidMask(
                "non-zero padding bits in packed mask".into(),
            ));
        }
    }
    Ok(out)
}

/// Packed mask of one layer for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTaskMask {
    pub layer_id: u32,
    pub task_id: u32,
    count: u32,
    packed: Vec<u8>,
}

impl LayerTaskMask {
    pub fn from_states(layer_id: u32, task_id: u32, states: &[MaskState]) -> LayerTaskMask {
        LayerTaskMask {
            layer_id,
            task_id,
            count: states.len() as u32,
            packed: pack_states(states),
        }
    }

    pub fn feature_count(&self) -> usize {
        self.count as usize
    }

    pub fn packed_bytes(&self) -> &[u8] {
        &self.packed
    }

    pub fn states(&self) -> Result<Vec<MaskState>> {
        unpack_states(&self.packed, self.count as usize)
    }

    /// Serialized form: layer id, task id, feature count (u32 little endian
    /// each), then the packed payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.layer_id.to_le_bytes())?;
        w.write_all(&self.task_id.to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        w.write_all(&self.packed)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, offset: &mut u64) -> Result<LayerTaskMask> {
        let layer_id = read_u32_le(r, offset)?;
        let task_id = read_u32_le(r, offset)?;
        let count = read_u32_le(r, offset)?;
        let mut packed = vec![0u8; (count as usize).div_ceil(4)];
        read_exact_at(r, &mut packed, offset)?;
        let mask = LayerTaskMask {
            layer_id,
            task_id,
            count,
            packed,
        };
        // Validate eagerly so corrupt payloads fail at a known offset.
        mask.states().map_err(|e| TfmError::Format {
            offset: *offset,
            reason: e.to_string(),
        })?;
        Ok(mask)
    }
}

pub(crate) fn read_u32_le<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| TfmError::Format {
        offset: *offset,
        reason: e.to_string(),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Write a sequence of layer/task mask records preceded by a record count.
pub fn write_mask_snapshots<W: Write>(w: &mut W, masks: &[LayerTaskMask]) -> Result<()> {
    w.write_all(&(masks.len() as u32).to_le_bytes())?;
    for m in masks {
        m.write_to(w)?;
    }
    Ok(())
}

pub fn read_mask_snapshots<R: Read>(r: &mut R, offset: &mut u64) -> Result<Vec<LayerTaskMask>> {
    let n = read_u32_le(r, offset)?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        out.push(LayerTaskMask::read_from(r, offset)?);
    }
    Ok(out)
}

/// Append-only record of which task owns each feature of each growable
/// layer. Total storage for the mask machinery is this ledger plus any
/// materialized packed snapshots; nothing is kept per task during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipLedger {
    layers: Vec<LayerOwnership>,
    /// Widths are fixed up front and owners preassigned (disjoint blocks);
    /// used by the binary-mask baseline instead of growth.
    partitioned: bool,
    last_task: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerOwnership {
    owner: Vec<u32>,
    /// Layer width after each registered task, in task order.
    width_at: Vec<(u32, usize)>,
}

impl OwnershipLedger {
    /// Ledger over layers with the given initial widths. Initial features
    /// belong to task 1; [`register_task`](Self::register_task) must still
    /// be called for task 1 before masks can be derived.
    pub fn new(initial_widths: &[usize]) -> OwnershipLedger {
        OwnershipLedger {
            layers: initial_widths
                .iter()
                .map(|&w| LayerOwnership {
                    owner: vec![1; w],
                    width_at: Vec::new(),
                })
                .collect(),
            partitioned: false,
            last_task: None,
        }
    }

    /// Fixed-width ledger with features split into contiguous per-task
    /// blocks of equal size; remainder features go to the earlier tasks.
    pub fn with_partition(widths: &[usize], num_tasks: u32) -> Result<OwnershipLedger> {
        if num_tasks == 0 {
            return Err(TfmError::Config("partition needs at least one task".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            if w < num_tasks as usize {
                return Err(TfmError::Capacity(format!(
                    "cannot split {} features across {} tasks",
                    w, num_tasks
                )));
            }
            let base = w / num_tasks as usize;
            let extra = w % num_tasks as usize;
            let mut owner = Vec::with_capacity(w);
            for t in 1..=num_tasks {
                let n = base + if (t as usize) <= extra { 1 } else { 0 };
                owner.extend(std::iter::repeat_n(t, n));
            }
            layers.push(LayerOwnership {
                owner,
                width_at: Vec::new(),
            });
        }
        Ok(OwnershipLedger {
            layers,
            partitioned: true,
            last_task: None,
        })
    }

    /// Rebuild a ledger from per-layer owner vectors (snapshot restore).
    pub fn from_owners(
        owners: Vec<Vec<u32>>,
        widths_per_task: &[(u32, Vec<usize>)],
        partitioned: bool,
    ) -> Result<OwnershipLedger> {
        let mut layers: Vec<LayerOwnership> = owners
            .into_iter()
            .map(|owner| LayerOwnership {
                owner,
                width_at: Vec::new(),
            })
            .collect();
        let mut last = None;
        for (task, widths) in widths_per_task {
            if widths.len() != layers.len() {
                return Err(TfmError::Contract(
                    "width record does not match layer count".into(),
                ));
            }
            for (l, &w) in layers.iter_mut().zip(widths) {
                if w > l.owner.len() {
                    return Err(TfmError::Contract(format!(
                        "task {} records width {} beyond {} owned features",
                        task,
                        w,
                        l.owner.len()
                    )));
                }
                l.width_at.push((*task, w));
            }
            last = Some(*task);
        }
        Ok(OwnershipLedger {
            layers,
            partitioned,
            last_task: last,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn partitioned(&self) -> bool {
        self.partitioned
    }

    pub fn last_task(&self) -> Option<u32> {
        self.last_task
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layers[layer].owner.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.owner.len()).collect()
    }

    pub fn owner(&self, layer: usize, feature: usize) -> u32 {
        self.layers[layer].owner[feature]
    }

    pub fn owners(&self, layer: usize) -> &[u32] {
        &self.layers[layer].owner
    }

    /// Layer width as of the given task.
    pub fn width_at(&self, layer: usize, task: u32) -> Result<usize> {
        self.layers[layer]
            .width_at
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, w)| *w)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no width recorded for task".into(),
            })
    }

    pub fn widths_per_task(&self) -> Vec<(u32, Vec<usize>)> {
        match &self.layers.first() {
            None => Vec::new(),
            Some(first) => first
                .width_at
                .iter()
                .enumerate()
                .map(|(i, (t, _))| (*t, self.layers.iter().map(|l| l.width_at[i].1).collect()))
                .collect(),
        }
    }

    /// Register a task and append `added[layer]` features owned by it. Tasks
    /// must arrive in order 1, 2, 3, ... with no gaps.
    pub fn register_task(&mut self, task: u32, added: &[usize]) -> Result<()> {
        let expected = self.last_task.map_or(1, |t| t + 1);
        if task != expected {
            return Err(TfmError::Contract(format!(
                "task {} registered out of order, expected {}",
                task, expected
            )));
        }
        if added.len() != self.layers.len() {
            return Err(TfmError::Contract(format!(
                "growth vector has {} entries for {} layers",
                added.len(),
                self.layers.len()
            )));
        }
        if self.partitioned && added.iter().any(|&a| a > 0) {
            return Err(TfmError::Contract(
                "partitioned ledger cannot grow".into(),
            ));
        }
        for (l, &a) in self.layers.iter_mut().zip(added) {
            l.owner.extend(std::iter::repeat_n(task, a));
            l.width_at.push((task, l.owner.len()));
        }
        self.last_task = Some(task);
        Ok(())
    }

    fn check_task(&self, task: u32) -> Result<()> {
        match self.last_task {
            Some(last) if task >= 1 && task <= last => Ok(()),
            _ => Err(TfmError::TaskLookup {
                task,
                context: "task not registered in ledger".into(),
            }),
        }
    }

    /// Trainability mask at the time of `task`: exactly the features owned
    /// by it. Length is the layer width as of that task.
    pub fn derive_m(&self, layer: usize, task: u32) -> Result<Vec<bool>> {
        self.check_task(task)?;
        let w = self.width_at(layer, task)?;
        Ok(self.layers[layer].owner[..w]
            .iter()
            .map(|&o| o == task)
            .collect())
    }

    /// Visibility mask at the time of `task`: features owned by it or by any
    /// earlier task. Length is the layer width as of that task.
    pub fn derive_n(&self, layer: usize, task: u32) -> Result<Vec<bool>> {
        self.check_task(task)?;
        let w = self.width_at(layer, task)?;
        Ok(self.layers[layer].owner[..w]
            .iter()
            .map(|&o| o <= task)
            .collect())
    }

    /// Ternary states for one layer at one task, over the features existing
    /// at that task.
    pub fn states(&self, layer: usize, task: u32) -> Result<Vec<MaskState>> {
        let m = self.derive_m(layer, task)?;
        let n = self.derive_n(layer, task)?;
        m.iter()
            .zip(&n)
            .map(|(&m, &n)| MaskState::from_m_n(m, n))
            .collect()
    }

    pub fn ternary_mask(&self, layer: usize, task: u32) -> Result<LayerTaskMask> {
        Ok(LayerTaskMask::from_states(
            layer as u32,
            task,
            &self.states(layer, task)?,
        ))
    }
}

/// Per-connection gradient gate from the ownership rule: a weight from input
/// feature j to output feature i is trainable for a task when either endpoint
/// is owned by it.
pub fn grad_gate_ownership(m_out: &[bool], m_in: &[bool]) -> Vec<Vec<bool>> {
    m_out
        .iter()
        .map(|&mo| m_in.iter().map(|&mi| mo || mi).collect())
        .collect()
}

/// The same gate computed from visibility deltas: a connection is trainable
/// for task t when it is active now but was not active for task t-1
/// (n^t_i n^t_j - n^{t-1}_i n^{t-1}_j = 1). `n_prev_*` are zero-padded to
/// the current lengths; pass all-false for the first task.
pub fn grad_gate_visibility_delta(
    n_out: &[bool],
    n_in: &[bool],
    n_prev_out: &[bool],
    n_prev_in: &[bool],
) -> Vec<Vec<bool>> {
    n_out
        .iter()
        .zip(n_prev_out)
        .map(|(&no, &po)| {
            n_in.iter()
                .zip(n_prev_in)
                .map(|(&ni, &pi)| (no && ni) && !(po && pi))
                .collect()
        })
        .collect()
}

pub fn pad_right(mask: &[bool], len: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    out.resize(len, false);
    out
}
