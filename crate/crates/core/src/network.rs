//! A whole network: feature layers joined by pooling/flatten glue, one
//! ownership ledger across all growable layers, and one output head per
//! task.

use crate::error::{Result, TfmError};
use crate::layers::{
    maxpool2d, maxpool2d_backward, DropoutMode, FeatureGrads, GradRule, HeadGrads, LayerCache,
    LayerGates, MaskedConv, MaskedDense, TaskHead,
};
use crate::mask::{pad_right, OwnershipLedger};
use crate::rng::RngSeed;
use crate::tensor::Tensor;
use crate::trainer::cross_entropy;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Growable fully connected feature layer.
    Dense {
        width: usize,
        #[serde(default)]
        cap: Option<usize>,
    },
    /// Growable convolutional feature layer; features are output channels.
    Conv {
        channels: usize,
        #[serde(default)]
        cap: Option<usize>,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    MaxPool { kernel: usize, stride: usize },
    Flatten,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArchSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Vector(usize),
    Image(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Dense,
    Conv,
}

/// Geometry of one growable layer under a concrete width assignment.
#[derive(Debug, Clone)]
pub struct FeatureLayerGeom {
    /// Index into `ArchSpec::layers`.
    pub spec_index: usize,
    pub kind: FeatureKind,
    pub width: usize,
    pub cap: usize,
    /// Input units (dense) or input channels (conv) at these widths.
    pub in_units: usize,
    /// Units of this layer's input contributed by each feature of the
    /// previous growable layer. Greater than one when a flatten sits in
    /// between, in which case it is the spatial area at the flatten.
    pub in_expand: usize,
    /// Previous growable layer, if any.
    pub prev: Option<usize>,
}

impl ArchSpec {
    pub fn feature_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv { .. }))
            .count()
    }

    pub fn spec_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { width, .. } => Some(*width),
                LayerSpec::Conv { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    pub fn caps(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { width, cap } => Some(cap.unwrap_or(*width)),
                LayerSpec::Conv { channels, cap, .. } => Some(cap.unwrap_or(*channels)),
                _ => None,
            })
            .collect()
    }

    /// Resolve per-layer geometry for the given feature-layer widths.
    /// Returns the geometries, the flattened output feature count, and the
    /// flattened units per final-layer feature.
    pub fn resolve(&self, widths: &[usize]) -> Result<(Vec<FeatureLayerGeom>, usize, usize)> {
        if widths.len() != self.feature_layer_count() {
            return Err(TfmError::Config(format!(
                "{} widths supplied for {} growable layers",
                widths.len(),
                self.feature_layer_count()
            )));
        }
        let caps = self.caps();
        let mut shape = match self.input {
            InputSpec::Vector { dim } => {
                if dim == 0 {
                    return Err(TfmError::Config("input dim must be positive".into()));
                }
                Shape::Vector(dim)
            }
            InputSpec::Image { channels, height, width } => {
                if channels == 0 || height == 0 || width == 0 {
                    return Err(TfmError::Config("input dims must be positive".into()));
                }
                Shape::Image(channels, height, width)
            }
        };
        let mut geoms: Vec<FeatureLayerGeom> = Vec::new();
        let mut fl = 0usize;
        let mut prev: Option<usize> = None;
        // Units of the current shape contributed per feature of the previous
        // growable layer.
        let mut expand = 1usize;
        for (idx, spec) in self.layers.iter().enumerate() {
            match spec {
                LayerSpec::Dense { .. } => {
                    let in_units = match shape {
                        Shape::Vector(d) => d,
                        Shape::Image(..) => {
                            return Err(TfmError::Config(format!(
                                "layer {}: dense after image output needs an explicit flatten",
                                idx
                            )))
                        }
                    };
                    let width = widths[fl];
                    if width == 0 {
                        return Err(TfmError::Config(format!("layer {}: zero width", idx)));
                    }
                    if width > caps[fl] {
                        return Err(TfmError::Config(format!(
                            "layer {}: width {} exceeds cap {}",
                            idx, width, caps[fl]
                        )));
                    }
                    geoms.push(FeatureLayerGeom {
                        spec_index: idx,
                        kind: FeatureKind::Dense,
                        width,
                        cap: caps[fl],
                        in_units,
                        in_expand: expand,
                        prev,
                    });
                    prev = Some(fl);
                    expand = 1;
                    shape = Shape::Vector(width);
                    fl += 1;
                }
                LayerSpec::Conv { kernel, stride, pad, .. } => {
                    let (c, h, w) = match shape {
                        Shape::Image(c, h, w) => (c, h, w),
                        Shape::Vector(_) => {
                            return Err(TfmError::Config(format!(
                                "layer {}: conv needs an image input",
                                idx
                            )))
                        }
                    };
                    if *kernel == 0 || *stride == 0 {
                        return Err(TfmError::Config(format!(
                            "layer {}: kernel and stride must be positive",
                            idx
                        )));
                    }
                    if *kernel > h + 2 * pad || *kernel > w + 2 * pad {
                        return Err(TfmError::Config(format!(
                            "layer {}: kernel {} exceeds padded input {}x{}",
                            idx,
                            kernel,
                            h + 2 * pad,
                            w + 2 * pad
                        )));
                    }
                    let width = widths[fl];
                    if width == 0 {
                        return Err(TfmError::Config(format!("layer {}: zero width", idx)));
                    }
                    if width > caps[fl] {
                        return Err(TfmError::Config(format!(
                            "layer {}: channels {} exceed cap {}",
                            idx, width, caps[fl]
                        )));
                    }
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    geoms.push(FeatureLayerGeom {
                        spec_index: idx,
                        kind: FeatureKind::Conv,
                        width,
                        cap: caps[fl],
                        in_units: c,
                        in_expand: expand,
                        prev,
                    });
                    prev = Some(fl);
                    expand = 1;
                    shape = Shape::Image(width, oh, ow);
                    fl += 1;
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let (c, h, w) = match shape {
                        Shape::Image(c, h, w) => (c, h, w),
                        Shape::Vector(_) => {
                            return Err(TfmError::Config(format!(
                                "layer {}: pooling needs an image input",
                                idx
                            )))
                        }
                    };
                    if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w {
                        return Err(TfmError::Config(format!(
                            "layer {}: bad pooling geometry",
                            idx
                        )));
                    }
                    shape = Shape::Image(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1);
                }
                LayerSpec::Flatten => {
                    let (c, h, w) = match shape {
                        Shape::Image(c, h, w) => (c, h, w),
                        Shape::Vector(_) => {
                            return Err(TfmError::Config(format!(
                                "layer {}: flatten needs an image input",
                                idx
                            )))
                        }
                    };
                    expand *= h * w;
                    shape = Shape::Vector(c * h * w);
                }
            }
        }
        if geoms.is_empty() {
            return Err(TfmError::Config("network has no growable layers".into()));
        }
        let (final_features, head_expand) = match shape {
            Shape::Vector(d) => (d, 1),
            Shape::Image(c, h, w) => (c * h * w, h * w),
        };
        Ok((geoms, final_features, head_expand))
    }

    /// Weight count (feature-layer weight matrices and kernels, no biases,
    /// no heads) and feature count at cap widths.
    pub fn count_params_at_cap(&self) -> Result<(u64, u64)> {
        let caps = self.caps();
        let (geoms, _, _) = self.resolve(&caps)?;
        let mut weights = 0u64;
        let mut features = 0u64;
        for g in &geoms {
            features += g.width as u64;
            let per_feature = match g.kind {
                FeatureKind::Dense => g.in_units as u64,
                FeatureKind::Conv => {
                    let k = match self.layers[g.spec_index] {
                        LayerSpec::Conv { kernel, .. } => kernel as u64,
                        _ => unreachable!(),
                    };
                    g.in_units as u64 * k * k
                }
            };
            weights += g.width as u64 * per_feature;
        }
        Ok((weights, features))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Ternary masks from the ownership ledger; the gradient gate opens when
    /// either endpoint is owned.
    Ternary,
    /// Binary ownership masks: only owned features are visible and only
    /// fully owned connections train.
    Binary,
    /// No masking; plain shared network.
    None,
}

#[derive(Debug, Clone)]
pub enum LayerNode {
    Dense(MaskedDense),
    Conv(MaskedConv),
    MaxPool { kernel: usize, stride: usize },
    Flatten,
}

enum NodeCache {
    Dense(LayerCache),
    Conv(LayerCache),
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    None,
}

#[derive(Debug, Clone)]
pub struct NetOptions {
    pub mask_mode: MaskMode,
    pub fn_enabled: bool,
    /// Feature-layer widths to build with instead of the spec widths (used
    /// by scheduled growth to start small). Caps still come from the spec.
    pub initial_widths: Option<Vec<usize>>,
    /// For binary masks: split every layer into this many ownership blocks
    /// up front.
    pub partition_tasks: Option<u32>,
}

impl NetOptions {
    pub fn ternary(fn_enabled: bool) -> NetOptions {
        NetOptions {
            mask_mode: MaskMode::Ternary,
            fn_enabled,
            initial_widths: None,
            partition_tasks: None,
        }
    }

    pub fn binary(tasks: u32) -> NetOptions {
        NetOptions {
            mask_mode: MaskMode::Binary,
            fn_enabled: false,
            initial_widths: None,
            partition_tasks: Some(tasks),
        }
    }

    pub fn plain() -> NetOptions {
        NetOptions {
            mask_mode: MaskMode::None,
            fn_enabled: false,
            initial_widths: None,
            partition_tasks: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x: Tensor,
    pub label: usize,
    /// Head the sample's loss goes through. Equal to the current task except
    /// in joint training, which mixes earlier tasks into the batch.
    pub head_task: u32,
}

#[derive(Debug, Clone)]
pub struct MaskedNetwork {
    arch: ArchSpec,
    mask_mode: MaskMode,
    fn_enabled: bool,
    seed: RngSeed,
    partition_tasks: Option<u32>,
    pub(crate) nodes: Vec<LayerNode>,
    pub(crate) heads: Vec<TaskHead>,
    ledger: OwnershipLedger,
    geoms: Vec<FeatureLayerGeom>,
    final_features: usize,
    head_expand: usize,
    task_classes: Vec<(u32, usize)>,
}

impl MaskedNetwork {
    pub fn new(arch: ArchSpec, opts: NetOptions, seed: RngSeed) -> Result<MaskedNetwork> {
        if opts.fn_enabled && opts.mask_mode != MaskMode::Ternary {
            return Err(TfmError::Config(
                "feature normalization requires ternary masks".into(),
            ));
        }
        if opts.partition_tasks.is_some() && opts.mask_mode != MaskMode::Binary {
            return Err(TfmError::Config(
                "ownership partition only applies to binary masks".into(),
            ));
        }
        let widths = match &opts.initial_widths {
            Some(w) => w.clone(),
            None => arch.spec_widths(),
        };
        let (geoms, final_features, head_expand) = arch.resolve(&widths)?;
        let ledger = match (opts.mask_mode, opts.partition_tasks) {
            (MaskMode::Binary, Some(n)) => OwnershipLedger::with_partition(&widths, n)?,
            (MaskMode::Binary, None) => {
                return Err(TfmError::Config(
                    "binary masks need a task partition".into(),
                ))
            }
            _ => OwnershipLedger::new(&widths),
        };
        let mut nodes = Vec::with_capacity(arch.layers.len());
        let mut fl = 0usize;
        for (idx, spec) in arch.layers.iter().enumerate() {
            match spec {
                LayerSpec::Dense { .. } => {
                    let g = &geoms[fl];
                    let mut rng = seed.child_idx("init-layer", idx as u64).stream();
                    nodes.push(LayerNode::Dense(MaskedDense::new(
                        g.in_units, g.width, fl as u32, &mut rng,
                    )));
                    fl += 1;
                }
                LayerSpec::Conv { kernel, stride, pad, .. } => {
                    let g = &geoms[fl];
                    let mut rng = seed.child_idx("init-layer", idx as u64).stream();
                    nodes.push(LayerNode::Conv(MaskedConv::new(
                        g.in_units, g.width, *kernel, *stride, *pad, fl as u32, &mut rng,
                    )));
                    fl += 1;
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    nodes.push(LayerNode::MaxPool { kernel: *kernel, stride: *stride });
                }
                LayerSpec::Flatten => nodes.push(LayerNode::Flatten),
            }
        }
        Ok(MaskedNetwork {
            arch,
            mask_mode: opts.mask_mode,
            fn_enabled: opts.fn_enabled,
            seed,
            partition_tasks: opts.partition_tasks,
            nodes,
            heads: Vec::new(),
            ledger,
            geoms,
            final_features,
            head_expand,
            task_classes: Vec::new(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn fn_enabled(&self) -> bool {
        self.fn_enabled
    }

    pub fn seed(&self) -> RngSeed {
        self.seed
    }

    pub fn partition_tasks(&self) -> Option<u32> {
        self.partition_tasks
    }

    pub fn ledger(&self) -> &OwnershipLedger {
        &self.ledger
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [LayerNode] {
        &mut self.nodes
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn head(&self, task: u32) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.task_id == task)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no head for task".into(),
            })
    }

    pub fn task_classes(&self) -> &[(u32, usize)] {
        &self.task_classes
    }

    pub fn current_widths(&self) -> Vec<usize> {
        self.ledger.widths()
    }

    pub fn final_features(&self) -> usize {
        self.final_features
    }

    pub fn feature_layer_count(&self) -> usize {
        self.geoms.len()
    }

    pub fn geoms(&self) -> &[FeatureLayerGeom] {
        &self.geoms
    }

    pub(crate) fn set_state(
        &mut self,
        heads: Vec<TaskHead>,
        ledger: OwnershipLedger,
        task_classes: Vec<(u32, usize)>,
    ) -> Result<()> {
        let widths = ledger.widths();
        let (geoms, final_features, head_expand) = self.arch.resolve(&widths)?;
        self.heads = heads;
        self.ledger = ledger;
        self.geoms = geoms;
        self.final_features = final_features;
        self.head_expand = head_expand;
        self.task_classes = task_classes;
        Ok(())
    }

    /// Register the next task and append the requested features to each
    /// growable layer. Downstream input sides grow accordingly; old weight
    /// blocks are untouched.
    pub fn grow(&mut self, task: u32, added: &[usize]) -> Result<()> {
        if added.len() != self.geoms.len() {
            return Err(TfmError::Contract(format!(
                "growth vector has {} entries for {} growable layers",
                added.len(),
                self.geoms.len()
            )));
        }
        for (fl, g) in self.geoms.iter().enumerate() {
            if g.width + added[fl] > g.cap {
                return Err(TfmError::Capacity(format!(
                    "layer {}: {} + {} features exceeds cap {}",
                    g.spec_index,
                    g.width,
                    added[fl],
                    g.cap
                )));
            }
        }
        // Validate ordering before touching any layer.
        let expected = self.ledger.last_task().map_or(1, |t| t + 1);
        if task != expected {
            return Err(TfmError::Contract(format!(
                "task {} grown out of order, expected {}",
                task, expected
            )));
        }
        for fl in 0..self.geoms.len() {
            let added_out = added[fl];
            let added_in = match self.geoms[fl].prev {
                Some(p) => added[p] * self.geoms[fl].in_expand,
                None => 0,
            };
            if added_out == 0 && added_in == 0 {
                continue;
            }
            let mut rng = self
                .seed
                .child_idx("grow", ((task as u64) << 24) | fl as u64)
                .stream();
            match &mut self.nodes[self.geoms[fl].spec_index] {
                LayerNode::Dense(l) => l.grow(added_in, added_out, &mut rng),
                LayerNode::Conv(l) => l.grow(added_in, added_out, &mut rng),
                _ => unreachable!(),
            }
        }
        self.ledger.register_task(task, added)?;
        let widths = self.ledger.widths();
        let (geoms, final_features, head_expand) = self.arch.resolve(&widths)?;
        self.geoms = geoms;
        self.final_features = final_features;
        self.head_expand = head_expand;
        Ok(())
    }

    /// Create the task's head (and, when enabled, its normalization
    /// parameters) at the current widths. Must follow `grow` for the task.
    pub fn begin_task(&mut self, task: u32, classes: usize) -> Result<()> {
        if self.ledger.last_task() != Some(task) {
            return Err(TfmError::Contract(
                "begin_task must follow grow for the same task".into(),
            ));
        }
        if self.heads.iter().any(|h| h.task_id == task) {
            return Err(TfmError::Contract(format!("task {} already begun", task)));
        }
        if classes == 0 {
            return Err(TfmError::Config("task needs at least one class".into()));
        }
        if self.fn_enabled {
            for node in &mut self.nodes {
                match node {
                    LayerNode::Dense(l) => l.begin_task_fn(task)?,
                    LayerNode::Conv(l) => l.begin_task_fn(task)?,
                    _ => {}
                }
            }
        }
        let mut rng = self.seed.child_idx("head", task as u64).stream();
        self.heads
            .push(TaskHead::new(task, classes, self.final_features, &mut rng));
        self.task_classes.push((task, classes));
        Ok(())
    }

    /// Mask bundles per growable layer for one task, at current widths.
    pub fn layer_gates(&self, task: u32) -> Result<Vec<LayerGates>> {
        let rule = match self.mask_mode {
            MaskMode::Binary => GradRule::BothEndpoints,
            _ => GradRule::AnyEndpoint,
        };
        let mut out = Vec::with_capacity(self.geoms.len());
        for (fl, g) in self.geoms.iter().enumerate() {
            let width = g.width;
            let (m_out, n_out) = match self.mask_mode {
                MaskMode::Ternary => (
                    pad_right(&self.ledger.derive_m(fl, task)?, width),
                    pad_right(&self.ledger.derive_n(fl, task)?, width),
                ),
                MaskMode::Binary => {
                    let m = pad_right(&self.ledger.derive_m(fl, task)?, width);
                    (m.clone(), m)
                }
                MaskMode::None => {
                    // Widths must still be registered for the task.
                    self.ledger.width_at(fl, task)?;
                    (vec![true; width], vec![true; width])
                }
            };
            let (m_in, n_in) = match g.prev {
                None => {
                    let m = match self.mask_mode {
                        MaskMode::Ternary => vec![task == 1; g.in_units],
                        _ => vec![true; g.in_units],
                    };
                    (m, vec![true; g.in_units])
                }
                Some(p) => {
                    let prev_gates: &LayerGates = &out[p];
                    (
                        expand_mask(&prev_gates.train_out, g.in_expand),
                        expand_mask(&prev_gates.visible_out, g.in_expand),
                    )
                }
            };
            debug_assert_eq!(m_in.len(), g.in_units);
            out.push(LayerGates {
                train_out: m_out,
                train_in: m_in,
                visible_out: n_out,
                visible_in: n_in,
                rule,
            });
        }
        Ok(out)
    }

    fn forward_features(
        &self,
        x: &Tensor,
        task: u32,
        gates: &[LayerGates],
        mut dropout: Option<(f32, &mut ChaCha8Rng)>,
        mut caches: Option<&mut Vec<NodeCache>>,
    ) -> Result<Tensor> {
        let mut cur = x.clone();
        let mut fl = 0usize;
        for node in &self.nodes {
            let cache = match node {
                LayerNode::Dense(l) => {
                    let mode = match &mut dropout {
                        Some((p, rng)) => DropoutMode::Sample { p: *p, rng: &mut **rng },
                        None => DropoutMode::Off,
                    };
                    let (y, c) =
                        l.forward(&cur, task, &gates[fl].visible_out, self.fn_enabled, mode)?;
                    cur = y;
                    fl += 1;
                    NodeCache::Dense(c)
                }
                LayerNode::Conv(l) => {
                    let (y, c) = l.forward(&cur, task, &gates[fl].visible_out, self.fn_enabled)?;
                    cur = y;
                    fl += 1;
                    NodeCache::Conv(c)
                }
                LayerNode::MaxPool { kernel, stride } => {
                    let in_shape = cur.shape().to_vec();
                    let (y, argmax) = maxpool2d(&cur, *kernel, *stride)?;
                    cur = y;
                    NodeCache::Pool { argmax, in_shape }
                }
                LayerNode::Flatten => {
                    let in_shape = cur.shape().to_vec();
                    let n = cur.len();
                    cur = cur.reshape(vec![n])?;
                    NodeCache::Flatten { in_shape }
                }
            };
            if let Some(c) = &mut caches {
                c.push(cache);
            }
        }
        if cur.rank() > 1 {
            let n = cur.len();
            if let Some(c) = &mut caches {
                c.push(NodeCache::Flatten { in_shape: cur.shape().to_vec() });
            }
            cur = cur.reshape(vec![n])?;
        } else if caches.is_some() {
            if let Some(c) = &mut caches {
                c.push(NodeCache::None);
            }
        }
        Ok(cur)
    }

    /// Logits of the task's head in eval mode (no dropout).
    pub fn predict(&self, x: &Tensor, task: u32) -> Result<Tensor> {
        let head = self.head(task)?;
        let gates = self.layer_gates(task)?;
        let feats = self.forward_features(x, task, &gates, None, None)?;
        head.forward(&feats)
    }

    /// Mean loss and mean gated gradients of a batch, computed exactly as a
    /// training step computes them but with dropout off and nothing applied.
    pub fn batch_gradients(
        &self,
        batch: &[TrainSample],
        task: u32,
        head_only: bool,
    ) -> Result<(f64, BatchGrads)> {
        let (loss, layers, heads) = self.gradient_pass(batch, task, head_only, None)?;
        Ok((loss, BatchGrads { layers, heads }))
    }

    /// One SGD step on a batch. Gradients flow only where the task's masks
    /// allow; with `head_only` set the body is left untouched entirely.
    /// Returns the mean loss.
    pub fn train_step(
        &mut self,
        batch: &[TrainSample],
        task: u32,
        lr: f32,
        dropout_p: f32,
        head_only: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let (loss, layers, heads) =
            self.gradient_pass(batch, task, head_only, Some((dropout_p, rng)))?;
        for (fl, acc) in layers.into_iter().enumerate() {
            if let Some(gr) = acc {
                match &mut self.nodes[self.geoms[fl].spec_index] {
                    LayerNode::Dense(l) => l.sgd_step(task, lr, &gr)?,
                    LayerNode::Conv(l) => l.sgd_step(task, lr, &gr)?,
                    _ => unreachable!(),
                }
            }
        }
        for (head_task, gr) in heads {
            let head = self
                .heads
                .iter_mut()
                .find(|h| h.task_id == head_task)
                .ok_or(TfmError::TaskLookup {
                    task: head_task,
                    context: "no head for task".into(),
                })?;
            head.sgd_step(lr, &gr)?;
        }
        Ok(loss)
    }

    fn gradient_pass(
        &self,
        batch: &[TrainSample],
        task: u32,
        head_only: bool,
        mut dropout: Option<(f32, &mut ChaCha8Rng)>,
    ) -> Result<(f64, Vec<Option<FeatureGrads>>, BTreeMap<u32, HeadGrads>)> {
        if batch.is_empty() {
            return Err(TfmError::Contract("empty training batch".into()));
        }
        if self.ledger.last_task() != Some(task) {
            return Err(TfmError::Contract(format!(
                "task {} is not the newest registered task",
                task
            )));
        }
        let gates = self.layer_gates(task)?;
        let mut layer_acc: Vec<Option<FeatureGrads>> = vec![None; self.geoms.len()];
        let mut head_acc: BTreeMap<u32, HeadGrads> = BTreeMap::new();
        let mut loss_sum = 0.0f64;

        for sample in batch {
            if sample.head_task != task && self.mask_mode != MaskMode::None {
                return Err(TfmError::Contract(
                    "masked training cannot route other tasks' heads".into(),
                ));
            }
            let mut caches: Vec<NodeCache> = Vec::with_capacity(self.nodes.len() + 1);
            let feats = self.forward_features(
                &sample.x,
                task,
                &gates,
                dropout.as_mut().map(|(p, r)| (*p, &mut **r)),
                Some(&mut caches),
            )?;
            let head = self.head(sample.head_task)?;
            let logits = head.forward(&feats)?;
            let (loss, dlogits) = cross_entropy(&logits, sample.label)?;
            loss_sum += loss;
            let (gfeats, hgrads) = head.backward(&dlogits, &feats)?;
            match head_acc.get_mut(&sample.head_task) {
                Some(acc) => {
                    acc.w.axpy_in_place(1.0, &hgrads.w)?;
                    acc.b.axpy_in_place(1.0, &hgrads.b)?;
                }
                None => {
                    head_acc.insert(sample.head_task, hgrads);
                }
            }
            if head_only {
                continue;
            }
            // Pad the head gradient out to the full feature width; features
            // beyond the head's prefix get zero.
            let mut g = vec![0.0f32; self.final_features];
            g[..gfeats.len()].copy_from_slice(gfeats.data());
            let mut grad = Tensor::from_vec(g);
            // Undo the implicit flatten when the body ends in image shape.
            if let Some(NodeCache::Flatten { in_shape }) = caches.last() {
                if caches.len() == self.nodes.len() + 1 {
                    grad = grad.reshape(in_shape.clone())?;
                }
            }
            let mut fl = self.geoms.len();
            for (node, cache) in self.nodes.iter().zip(caches[..self.nodes.len()].iter()).rev() {
                match (node, cache) {
                    (LayerNode::Dense(l), NodeCache::Dense(c)) => {
                        fl -= 1;
                        let (gx, gr) =
                            l.backward(&grad, task, &gates[fl], self.fn_enabled, c)?;
                        grad = gx;
                        accumulate(&mut layer_acc[fl], gr)?;
                    }
                    (LayerNode::Conv(l), NodeCache::Conv(c)) => {
                        fl -= 1;
                        let (gx, gr) =
                            l.backward(&grad, task, &gates[fl], self.fn_enabled, c)?;
                        grad = gx;
                        accumulate(&mut layer_acc[fl], gr)?;
                    }
                    (LayerNode::MaxPool { .. }, NodeCache::Pool { argmax, in_shape }) => {
                        grad = maxpool2d_backward(&grad, argmax, in_shape)?;
                    }
                    (LayerNode::Flatten, NodeCache::Flatten { in_shape }) => {
                        grad = grad.reshape(in_shape.clone())?;
                    }
                    _ => {
                        return Err(TfmError::Contract(
                            "cache does not line up with layers".into(),
                        ))
                    }
                }
            }
        }

        let scale = 1.0 / batch.len() as f32;
        for acc in layer_acc.iter_mut() {
            if let Some(gr) = acc {
                gr.w.scale_in_place(scale);
                gr.b.scale_in_place(scale);
                if let Some(g) = &mut gr.gamma {
                    g.scale_in_place(scale);
                }
                if let Some(b) = &mut gr.beta {
                    b.scale_in_place(scale);
                }
            }
        }
        for gr in head_acc.values_mut() {
            gr.w.scale_in_place(scale);
            gr.b.scale_in_place(scale);
        }
        Ok((loss_sum / batch.len() as f64, layer_acc, head_acc))
    }
}

/// Gradients of one batch: per feature layer in geometry order (layers that
/// received nothing hold `None`) and per head, keyed by task.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub layers: Vec<Option<FeatureGrads>>,
    pub heads: BTreeMap<u32, HeadGrads>,
}

fn accumulate(slot: &mut Option<FeatureGrads>, gr: FeatureGrads) -> Result<()> {
    match slot {
        None => *slot = Some(gr),
        Some(acc) => {
            acc.w.axpy_in_place(1.0, &gr.w)?;
            acc.b.axpy_in_place(1.0, &gr.b)?;
            if let (Some(a), Some(g)) = (&mut acc.gamma, &gr.gamma) {
                a.axpy_in_place(1.0, g)?;
            }
            if let (Some(a), Some(g)) = (&mut acc.beta, &gr.beta) {
                a.axpy_in_place(1.0, g)?;
            }
        }
    }
    Ok(())
}

/// Repeat each mask bit `expand` times (channel mask to flattened units).
pub fn expand_mask(mask: &[bool], expand: usize) -> Vec<bool> {
    if expand == 1 {
        return mask.to_vec();
    }
    let mut out = Vec::with_capacity(mask.len() * expand);
    for &b in mask {
        out.extend(std::iter::repeat_n(b, expand));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn two_dense(widths: (usize, usize), cap: usize) -> ArchSpec {
        ArchSpec {
            input: InputSpec::Vector { dim: 4 },
            layers: vec![
                LayerSpec::Dense { width: widths.0, cap: Some(cap) },
                LayerSpec::Dense { width: widths.1, cap: Some(cap) },
            ],
        }
    }

    fn dense_at(net: &MaskedNetwork, fl: usize) -> &MaskedDense {
        let idx = net.geoms()[fl].spec_index;
        match &net.nodes()[idx] {
            LayerNode::Dense(l) => l,
            _ => panic!("layer {} is not dense", fl),
        }
    }

    fn random_batch(n: usize, dim: usize, classes: usize, head: u32, seed: u64) -> Vec<TrainSample> {
        let mut rng = RngSeed(seed).child("batch").stream();
        (0..n)
            .map(|i| TrainSample {
                x: Tensor::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                label: i % classes,
                head_task: head,
            })
            .collect()
    }

    /// Like `random_batch` but with a class-dependent shift, so a small
    /// network can actually separate the labels.
    fn separable_batch(n: usize, dim: usize, classes: usize, head: u32, seed: u64) -> Vec<TrainSample> {
        let mut batch = random_batch(n, dim, classes, head, seed);
        for s in &mut batch {
            s.x.data_mut()[s.label % dim] += 2.0;
        }
        batch
    }

    #[test]
    fn resolve_walks_shapes_and_expansion() {
        let arch = ArchSpec {
            input: InputSpec::Image { channels: 1, height: 8, width: 8 },
            layers: vec![
                LayerSpec::Conv { channels: 4, cap: Some(16), kernel: 3, stride: 1, pad: 1 },
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 10, cap: Some(20) },
            ],
        };
        let (geoms, final_features, head_expand) = arch.resolve(&[4, 10]).unwrap();
        assert_eq!(geoms.len(), 2);
        assert_eq!(geoms[0].kind, FeatureKind::Conv);
        assert_eq!(geoms[0].in_units, 1);
        assert_eq!(geoms[0].in_expand, 1);
        assert_eq!(geoms[0].prev, None);
        // Conv keeps 8x8 (pad 1), pool halves to 4x4, so each conv channel
        // contributes 16 flattened units to the dense input.
        assert_eq!(geoms[1].kind, FeatureKind::Dense);
        assert_eq!(geoms[1].in_units, 64);
        assert_eq!(geoms[1].in_expand, 16);
        assert_eq!(geoms[1].prev, Some(0));
        assert_eq!(final_features, 10);
        assert_eq!(head_expand, 1);

        // A body that ends on a conv exposes flattened channel features.
        let conv_tail = ArchSpec {
            input: InputSpec::Image { channels: 1, height: 6, width: 6 },
            layers: vec![LayerSpec::Conv { channels: 3, cap: None, kernel: 3, stride: 1, pad: 0 }],
        };
        let (_, ff, he) = conv_tail.resolve(&[3]).unwrap();
        assert_eq!(ff, 3 * 16);
        assert_eq!(he, 16);
    }

    #[test]
    fn resolve_rejects_bad_compositions() {
        let no_flatten = ArchSpec {
            input: InputSpec::Image { channels: 1, height: 4, width: 4 },
            layers: vec![
                LayerSpec::Conv { channels: 2, cap: None, kernel: 3, stride: 1, pad: 0 },
                LayerSpec::Dense { width: 5, cap: None },
            ],
        };
        assert!(matches!(no_flatten.resolve(&[2, 5]), Err(TfmError::Config(_))));

        let conv_on_vector = ArchSpec {
            input: InputSpec::Vector { dim: 8 },
            layers: vec![LayerSpec::Conv { channels: 2, cap: None, kernel: 3, stride: 1, pad: 0 }],
        };
        assert!(matches!(conv_on_vector.resolve(&[2]), Err(TfmError::Config(_))));

        let arch = two_dense((6, 2), 8);
        assert!(matches!(arch.resolve(&[9, 2]), Err(TfmError::Config(_))));
        assert!(matches!(arch.resolve(&[6]), Err(TfmError::Config(_))));
    }

    #[test]
    fn count_params_at_cap_counts_weights_and_features() {
        let arch = ArchSpec {
            input: InputSpec::Image { channels: 3, height: 8, width: 8 },
            layers: vec![
                LayerSpec::Conv { channels: 4, cap: Some(8), kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 10, cap: Some(20) },
            ],
        };
        let (weights, features) = arch.count_params_at_cap().unwrap();
        // Conv at cap: 8 channels x 3 in x 3x3 kernel = 216.
        // Dense at cap: 20 x (8 * 64) = 10240.
        assert_eq!(weights, 216 + 10240);
        assert_eq!(features, 8 + 20);
    }

    #[test]
    fn growth_matches_the_worked_example() {
        // Two feature layers holding 6 and 2 features; the connections
        // between them form a 2x6 matrix, 12 weights. Growing by (3, 2)
        // twice adds 24 then 36 connections.
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 32),
            NetOptions::ternary(false),
            RngSeed(5),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        let before = dense_at(&net, 1).weights().clone();
        assert_eq!(before.len(), 12);

        net.grow(2, &[3, 2]).unwrap();
        net.begin_task(2, 2).unwrap();
        let after2 = dense_at(&net, 1).weights().clone();
        assert_eq!(after2.shape(), &[4, 9]);
        assert_eq!(after2.len() - before.len(), 24);

        net.grow(3, &[3, 2]).unwrap();
        net.begin_task(3, 2).unwrap();
        let after3 = dense_at(&net, 1).weights().clone();
        assert_eq!(after3.shape(), &[6, 12]);
        assert_eq!(after3.len() - after2.len(), 36);

        // The old block survives verbatim in the grown matrix.
        for r in 0..2 {
            for c in 0..6 {
                assert_eq!(
                    before.data()[r * 6 + c].to_bits(),
                    after3.data()[r * 12 + c].to_bits()
                );
            }
        }
        // New biases are zero; new weights respect the fan-in bound of the
        // growth step that created them.
        let b = dense_at(&net, 1).biases();
        assert_eq!(&b.data()[2..], &[0.0; 4]);
        let bound2 = 1.0 / (9.0f32).sqrt();
        for r in 0..4 {
            for c in 0..9 {
                if r < 2 && c < 6 {
                    continue;
                }
                let v = after2.data()[r * 9 + c];
                assert!(v.abs() <= bound2, "entry ({}, {}) = {}", r, c, v);
            }
        }
        let bound3 = 1.0 / (12.0f32).sqrt();
        for r in 0..6 {
            for c in 0..12 {
                if r < 4 && c < 9 {
                    continue;
                }
                let v = after3.data()[r * 12 + c];
                assert!(v.abs() <= bound3, "entry ({}, {}) = {}", r, c, v);
            }
        }
        assert_eq!(net.current_widths(), vec![12, 6]);
        assert_eq!(net.final_features(), 6);
    }

    #[test]
    fn growth_expands_dense_inputs_through_flatten() {
        let arch = ArchSpec {
            input: InputSpec::Image { channels: 1, height: 6, width: 6 },
            layers: vec![
                LayerSpec::Conv { channels: 2, cap: Some(8), kernel: 3, stride: 1, pad: 0 },
                LayerSpec::Flatten,
                LayerSpec::Dense { width: 5, cap: Some(10) },
            ],
        };
        let mut net = MaskedNetwork::new(arch, NetOptions::ternary(false), RngSeed(3)).unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        assert_eq!(dense_at(&net, 1).in_features(), 2 * 16);
        // One added channel contributes its full 4x4 spatial block of
        // flattened inputs to the dense layer.
        net.grow(2, &[1, 2]).unwrap();
        net.begin_task(2, 2).unwrap();
        assert_eq!(dense_at(&net, 1).in_features(), 3 * 16);
        assert_eq!(dense_at(&net, 1).out_features(), 7);
        assert_eq!(net.geoms()[1].in_expand, 16);
    }

    #[test]
    fn grow_rejects_cap_overflow_and_out_of_order_tasks() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 8),
            NetOptions::ternary(false),
            RngSeed(1),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        assert!(matches!(
            net.grow(2, &[3, 7]),
            Err(TfmError::Capacity(_))
        ));
        assert!(matches!(net.grow(3, &[1, 1]), Err(TfmError::Contract(_))));
        // The failed calls left the ledger untouched.
        assert_eq!(net.current_widths(), vec![6, 2]);
        net.grow(2, &[1, 1]).unwrap();
    }

    #[test]
    fn gates_freeze_old_features_and_walk_forward() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 32),
            NetOptions::ternary(false),
            RngSeed(5),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        let g1 = net.layer_gates(1).unwrap();
        assert_eq!(g1[0].train_out, vec![true; 6]);
        assert_eq!(g1[0].train_in, vec![true; 4]);
        assert_eq!(g1[1].train_in, vec![true; 6]);

        net.grow(2, &[3, 2]).unwrap();
        net.begin_task(2, 2).unwrap();
        let g2 = net.layer_gates(2).unwrap();
        let mut expect = vec![false; 6];
        expect.extend([true; 3]);
        assert_eq!(g2[0].train_out, expect);
        assert_eq!(g2[0].visible_out, vec![true; 9]);
        // The input pseudo-layer belongs to task 1, so first-layer inputs
        // are frozen from task 2 on.
        assert_eq!(g2[0].train_in, vec![false; 4]);
        assert_eq!(g2[0].visible_in, vec![true; 4]);
        // The next layer's input gates are the previous layer's output gates.
        assert_eq!(g2[1].train_in, g2[0].train_out);
        assert_eq!(g2[1].visible_in, g2[0].visible_out);

        // Task 1 gates padded to current widths: new features invisible.
        let g1b = net.layer_gates(1).unwrap();
        let mut vis = vec![true; 6];
        vis.extend([false; 3]);
        assert_eq!(g1b[0].visible_out, vis);
        assert_eq!(g1b[0].train_out, vis);
    }

    #[test]
    fn binary_gates_use_ownership_for_visibility() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 8),
            NetOptions::binary(2),
            RngSeed(5),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        net.grow(2, &[0, 0]).unwrap();
        net.begin_task(2, 2).unwrap();
        let g = net.layer_gates(2).unwrap();
        assert_eq!(g[0].rule, GradRule::BothEndpoints);
        // Layer 0 splits 6 features into blocks of 3; task 2 sees only its
        // own block.
        assert_eq!(g[0].train_out, vec![false, false, false, true, true, true]);
        assert_eq!(g[0].visible_out, g[0].train_out);
        assert_eq!(g[0].train_in, vec![true; 4]);
    }

    #[test]
    fn train_step_reduces_loss_on_a_plain_network() {
        let mut net = MaskedNetwork::new(
            two_dense((16, 8), 32),
            NetOptions::plain(),
            RngSeed(11),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 3).unwrap();
        let batch = separable_batch(12, 4, 3, 1, 2);
        let mut rng = RngSeed(11).child("step").stream();
        let first = net
            .train_step(&batch, 1, 0.2, 0.0, false, &mut rng)
            .unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = net
                .train_step(&batch, 1, 0.2, 0.0, false, &mut rng)
                .unwrap();
        }
        assert!(
            last < 0.2 * first,
            "loss did not drop: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn later_task_training_leaves_old_task_byte_identical() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 32),
            NetOptions::ternary(true),
            RngSeed(21),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 3).unwrap();
        let mut rng = RngSeed(21).child("step").stream();
        let batch1 = random_batch(8, 4, 3, 1, 31);
        for _ in 0..10 {
            net.train_step(&batch1, 1, 0.05, 0.5, false, &mut rng).unwrap();
        }

        net.grow(2, &[3, 2]).unwrap();
        net.begin_task(2, 3).unwrap();

        let probes = random_batch(16, 4, 3, 1, 77);
        let logits_before: Vec<Vec<u8>> = probes
            .iter()
            .map(|s| net.predict(&s.x, 1).unwrap().bytes_le())
            .collect();
        let head1_before = (
            net.head(1).unwrap().weights().bytes_le(),
            net.head(1).unwrap().biases().bytes_le(),
        );
        let l0_before = dense_at(&net, 0).weights().clone();
        let l1_before = dense_at(&net, 1).weights().clone();
        let b0_before = dense_at(&net, 0).biases().clone();
        let fn1_l0_before = dense_at(&net, 0).fn_params(1).unwrap().clone();

        let batch2 = random_batch(8, 4, 3, 2, 32);
        for _ in 0..25 {
            net.train_step(&batch2, 2, 0.05, 0.5, false, &mut rng).unwrap();
        }

        // Old-task logits and head are byte-identical.
        for (s, before) in probes.iter().zip(&logits_before) {
            assert_eq!(&net.predict(&s.x, 1).unwrap().bytes_le(), before);
        }
        assert_eq!(net.head(1).unwrap().weights().bytes_le(), head1_before.0);
        assert_eq!(net.head(1).unwrap().biases().bytes_le(), head1_before.1);

        // Layer 0: inputs are frozen after task 1, so rows of task-1
        // features are untouched; task-2 rows moved.
        let l0_after = dense_at(&net, 0).weights();
        for r in 0..6 {
            for c in 0..4 {
                assert_eq!(
                    l0_before.data()[r * 4 + c].to_bits(),
                    l0_after.data()[r * 4 + c].to_bits()
                );
            }
        }
        assert!((0..3).any(|r| {
            (0..4).any(|c| {
                l0_before.data()[(6 + r) * 4 + c].to_bits()
                    != l0_after.data()[(6 + r) * 4 + c].to_bits()
            })
        }));
        for i in 0..6 {
            assert_eq!(
                b0_before.data()[i].to_bits(),
                dense_at(&net, 0).biases().data()[i].to_bits()
            );
        }

        // Layer 1: connections with both endpoints owned by task 1 are
        // frozen; connections touching any task-2 feature trained.
        let l1_after = dense_at(&net, 1).weights();
        for r in 0..2 {
            for c in 0..6 {
                assert_eq!(
                    l1_before.data()[r * 9 + c].to_bits(),
                    l1_after.data()[r * 9 + c].to_bits()
                );
            }
        }
        assert!((0..2).any(|r| {
            (6..9).any(|c| {
                l1_before.data()[r * 9 + c].to_bits() != l1_after.data()[r * 9 + c].to_bits()
            })
        }));

        // Task-1 normalization parameters are untouched; task 2 has its own.
        let fn1_l0_after = dense_at(&net, 0).fn_params(1).unwrap();
        assert_eq!(fn1_l0_before.gamma.bytes_le(), fn1_l0_after.gamma.bytes_le());
        assert_eq!(fn1_l0_before.beta.bytes_le(), fn1_l0_after.beta.bytes_le());
        assert_eq!(dense_at(&net, 0).fn_params(2).unwrap().gamma.len(), 9);
    }

    #[test]
    fn masked_training_rejects_foreign_heads_but_plain_routes_them() {
        let mut masked = MaskedNetwork::new(
            two_dense((6, 2), 8),
            NetOptions::ternary(false),
            RngSeed(2),
        )
        .unwrap();
        masked.grow(1, &[0, 0]).unwrap();
        masked.begin_task(1, 2).unwrap();
        masked.grow(2, &[1, 1]).unwrap();
        masked.begin_task(2, 2).unwrap();
        let mut rng = RngSeed(2).child("step").stream();
        let bad = random_batch(2, 4, 2, 1, 5);
        assert!(matches!(
            masked.train_step(&bad, 2, 0.1, 0.0, false, &mut rng),
            Err(TfmError::Contract(_))
        ));

        let mut plain =
            MaskedNetwork::new(two_dense((6, 2), 8), NetOptions::plain(), RngSeed(2)).unwrap();
        plain.grow(1, &[0, 0]).unwrap();
        plain.begin_task(1, 2).unwrap();
        plain.grow(2, &[0, 0]).unwrap();
        plain.begin_task(2, 2).unwrap();
        let mut mixed = random_batch(4, 4, 2, 1, 6);
        mixed.extend(random_batch(4, 4, 2, 2, 7));
        let head1_before = plain.head(1).unwrap().weights().bytes_le();
        plain.train_step(&mixed, 2, 0.1, 0.0, false, &mut rng).unwrap();
        assert_ne!(plain.head(1).unwrap().weights().bytes_le(), head1_before);
    }

    #[test]
    fn head_only_training_freezes_the_body() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 8),
            NetOptions::plain(),
            RngSeed(13),
        )
        .unwrap();
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        net.grow(2, &[0, 0]).unwrap();
        net.begin_task(2, 2).unwrap();
        let l0 = dense_at(&net, 0).weights().bytes_le();
        let l1 = dense_at(&net, 1).weights().bytes_le();
        let h2 = net.head(2).unwrap().weights().bytes_le();
        let mut rng = RngSeed(13).child("step").stream();
        let batch = random_batch(6, 4, 2, 2, 40);
        net.train_step(&batch, 2, 0.1, 0.0, true, &mut rng).unwrap();
        assert_eq!(dense_at(&net, 0).weights().bytes_le(), l0);
        assert_eq!(dense_at(&net, 1).weights().bytes_le(), l1);
        assert_ne!(net.head(2).unwrap().weights().bytes_le(), h2);
    }

    #[test]
    fn lifecycle_contracts_are_enforced() {
        let mut net = MaskedNetwork::new(
            two_dense((6, 2), 8),
            NetOptions::ternary(false),
            RngSeed(1),
        )
        .unwrap();
        // Head creation requires the task to be registered first.
        assert!(matches!(
            net.begin_task(1, 2),
            Err(TfmError::Contract(_))
        ));
        net.grow(1, &[0, 0]).unwrap();
        net.begin_task(1, 2).unwrap();
        assert!(matches!(
            net.begin_task(1, 2),
            Err(TfmError::Contract(_))
        ));
        assert!(matches!(net.begin_task(1, 0), Err(TfmError::Contract(_))));
        assert!(matches!(net.head(9), Err(TfmError::TaskLookup { .. })));

        // Feature normalization needs ternary masks; binary needs a split.
        assert!(matches!(
            MaskedNetwork::new(
                two_dense((6, 2), 8),
                NetOptions { fn_enabled: true, ..NetOptions::plain() },
                RngSeed(1),
            ),
            Err(TfmError::Config(_))
        ));
        assert!(matches!(
            MaskedNetwork::new(
                two_dense((6, 2), 8),
                NetOptions { partition_tasks: None, ..NetOptions::binary(2) },
                RngSeed(1),
            ),
            Err(TfmError::Config(_))
        ));
    }
}
