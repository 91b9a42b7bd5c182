//! Masked dense and convolutional layers, task heads, and the gradient
//! gating rules.
//!
//! The fixed stage order inside a feature layer is: linear map, bias,
//! per-task feature normalization, visibility mask, ReLU, then dropout in
//! training mode. Gradients never reach parameters the current task does
//! not own; those entries of the gradient tensors are written as exact
//! zeros, so frozen parameters survive an SGD step byte for byte.

use crate::error::{Result, TfmError};
use crate::tensor::{conv2d, matvec, Tensor};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// How per-connection trainability is derived from the endpoint masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRule {
    /// A connection is trainable when either endpoint is owned by the
    /// current task. Used with ternary masks, where inputs from frozen
    /// features still feed newly owned features.
    AnyEndpoint,
    /// A connection is trainable only when both endpoints belong to the
    /// current task. Used by the binary-mask ablation.
    BothEndpoints,
}

impl GradRule {
    fn gate(self, out_owned: bool, in_owned: bool) -> bool {
        match self {
            GradRule::AnyEndpoint => out_owned || in_owned,
            GradRule::BothEndpoints => out_owned && in_owned,
        }
    }
}

/// Mask bundle for one feature layer at one task, at current layer widths.
#[derive(Debug, Clone)]
pub struct LayerGates {
    pub train_out: Vec<bool>,
    pub train_in: Vec<bool>,
    pub visible_out: Vec<bool>,
    pub visible_in: Vec<bool>,
    pub rule: GradRule,
}

impl LayerGates {
    /// Everything visible and trainable; plain unmasked training.
    pub fn open(in_features: usize, out_features: usize) -> LayerGates {
        LayerGates {
            train_out: vec![true; out_features],
            train_in: vec![true; in_features],
            visible_out: vec![true; out_features],
            visible_in: vec![true; in_features],
            rule: GradRule::AnyEndpoint,
        }
    }
}

/// Per-task feature normalization: an elementwise affine map with one
/// (gamma, beta) pair per feature, no batch statistics involved.
#[derive(Debug, Clone, PartialEq)]
pub struct FnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl FnParams {
    pub fn identity(width: usize) -> FnParams {
        FnParams {
            gamma: Tensor::new(vec![width], vec![1.0; width]).unwrap(),
            beta: Tensor::zeros(vec![width]),
        }
    }
}

#[derive(Debug)]
pub enum DropoutMode<'r> {
    Off,
    Sample { p: f32, rng: &'r mut ChaCha8Rng },
}

/// Intermediate values one backward pass needs.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Tensor,
    /// Pre-normalization linear output.
    pub z: Tensor,
    /// Post-mask, pre-ReLU value.
    pub v: Tensor,
    /// Per-feature multiplier applied after ReLU: 0 for dropped features,
    /// 1/(1-p) for kept ones. Absent in eval mode.
    pub dropout_scale: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn sample_dropout(
    y: &mut [f32],
    visible: &[bool],
    dropout: DropoutMode<'_>,
) -> Option<Vec<f32>> {
    match dropout {
        DropoutMode::Off => None,
        DropoutMode::Sample { p, rng } => {
            if p <= 0.0 {
                return Some(vec![1.0; y.len()]);
            }
            let keep_scale = 1.0 / (1.0 - p);
            let mut scale = vec![1.0f32; y.len()];
            for i in 0..y.len() {
                if !visible[i] {
                    continue;
                }
                let u: f32 = rng.random();
                scale[i] = if u < p { 0.0 } else { keep_scale };
                y[i] *= scale[i];
            }
            Some(scale)
        }
    }
}

/// Fully connected feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDense {
    pub layer_id: u32,
    w: Tensor,
    b: Tensor,
    /// Per-task normalization parameters in task order. Each entry is sized
    /// to the layer width at the time its task started.
    fn_params: Vec<(u32, FnParams)>,
}

impl MaskedDense {
    pub fn new(in_features: usize, out_features: usize, layer_id: u32, rng: &mut ChaCha8Rng) -> MaskedDense {
        MaskedDense {
            layer_id,
            w: Tensor::init_uniform(vec![out_features, in_features], in_features, rng),
            b: Tensor::zeros(vec![out_features]),
            fn_params: Vec::new(),
        }
    }

    pub fn from_parts(layer_id: u32, w: Tensor, b: Tensor, fn_params: Vec<(u32, FnParams)>) -> Result<MaskedDense> {
        if w.rank() != 2 || b.rank() != 1 || w.shape()[0] != b.shape()[0] {
            return Err(TfmError::Shape("dense parts disagree".into()));
        }
        Ok(MaskedDense { layer_id, w, b, fn_params })
    }

    pub fn in_features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn biases(&self) -> &Tensor {
        &self.b
    }

    pub fn biases_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn fn_tasks(&self) -> Vec<u32> {
        self.fn_params.iter().map(|(t, _)| *t).collect()
    }

    pub fn fn_params(&self, task: u32) -> Result<&FnParams> {
        self.fn_params
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no normalization parameters for task".into(),
            })
    }

    pub fn fn_params_mut(&mut self, task: u32) -> Result<&mut FnParams> {
        self.fn_params
            .iter_mut()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no normalization parameters for task".into(),
            })
    }

    pub fn all_fn_params(&self) -> &[(u32, FnParams)] {
        &self.fn_params
    }

    /// Install identity normalization parameters for a new task at the
    /// current width.
    pub fn begin_task_fn(&mut self, task: u32) -> Result<()> {
        if self.fn_params.iter().any(|(t, _)| *t == task) {
            return Err(TfmError::Contract(format!(
                "normalization parameters for task {} already exist",
                task
            )));
        }
        if let Some((last, _)) = self.fn_params.last() {
            if *last >= task {
                return Err(TfmError::Contract(
                    "normalization parameters must be added in task order".into(),
                ));
            }
        }
        self.fn_params.push((task, FnParams::identity(self.out_features())));
        Ok(())
    }

    pub fn restore_fn_params(&mut self, params: Vec<(u32, FnParams)>) {
        self.fn_params = params;
    }

    /// Append `added_in` input columns and `added_out` output rows. The old
    /// weight block is copied verbatim; new entries are drawn with the
    /// post-growth fan-in. New biases start at zero.
    pub fn grow(&mut self, added_in: usize, added_out: usize, rng: &mut ChaCha8Rng) {
        if added_in == 0 && added_out == 0 {
            return;
        }
        let (p, q) = (self.out_features(), self.in_features());
        let (np, nq) = (p + added_out, q + added_in);
        let bound = 1.0 / (nq as f32).sqrt();
        let old = self.w.data();
        let mut data = Vec::with_capacity(np * nq);
        for i in 0..np {
            for j in 0..nq {
                if i < p && j < q {
                    data.push(old[i * q + j]);
                } else {
                    data.push(rng.random_range(-bound..=bound));
                }
            }
        }
        self.w = Tensor::new(vec![np, nq], data).unwrap();
        let mut b = self.b.data().to_vec();
        b.resize(np, 0.0);
        self.b = Tensor::from_vec(b);
    }

    /// Run the layer. `x` must already be masked by the previous layer's
    /// visibility; the output is masked by `visible_out`. When `use_fn` is
    /// set the task's normalization parameters are applied before masking.
    pub fn forward(
        &self,
        x: &Tensor,
        task: u32,
        visible_out: &[bool],
        use_fn: bool,
        dropout: DropoutMode<'_>,
    ) -> Result<(Tensor, LayerCache)> {
        let p = self.out_features();
        if visible_out.len() != p {
            return Err(TfmError::Shape("visibility mask length mismatch".into()));
        }
        let mut z = matvec(&self.w, x)?;
        for (zi, bi) in z.data_mut().iter_mut().zip(self.b.data()) {
            *zi += bi;
        }
        let fnp = if use_fn { Some(self.fn_params(task)?) } else { None };
        let mut v = vec![0.0f32; p];
        for i in 0..p {
            if !visible_out[i] {
                continue;
            }
            let zi = z.data()[i];
            v[i] = match fnp {
                Some(fp) if i < fp.gamma.len() => {
                    fp.gamma.data()[i] * zi + fp.beta.data()[i]
                }
                _ => zi,
            };
        }
        let mut y: Vec<f32> = v.iter().map(|&vi| relu(vi)).collect();
        let dropout_scale = sample_dropout(&mut y, visible_out, dropout);
        let v = Tensor::from_vec(v);
        Ok((
            Tensor::from_vec(y),
            LayerCache {
                x: x.clone(),
                z,
                v,
                dropout_scale,
            },
        ))
    }

    /// Backpropagate through the layer. Gradient entries for parameters the
    /// gate rule excludes are exact zeros; the returned input gradient is
    /// zeroed on invisible input features.
    pub fn backward(
        &self,
        grad_y: &Tensor,
        task: u32,
        gates: &LayerGates,
        use_fn: bool,
        cache: &LayerCache,
    ) -> Result<(Tensor, FeatureGrads)> {
        let (p, q) = (self.out_features(), self.in_features());
        if grad_y.len() != p {
            return Err(TfmError::Shape("output gradient length mismatch".into()));
        }
        let fnp = if use_fn { Some(self.fn_params(task)?) } else { None };

        let mut d = grad_y.data().to_vec();
        if let Some(scale) = &cache.dropout_scale {
            for (di, si) in d.iter_mut().zip(scale) {
                *di *= si;
            }
        }
        for i in 0..p {
            if cache.v.data()[i] <= 0.0 || !gates.visible_out[i] {
                d[i] = 0.0;
            }
        }

        let (mut ggamma, mut gbeta) = (None, None);
        let mut dz = d;
        if let Some(fp) = fnp {
            let width = fp.gamma.len();
            let mut gg = vec![0.0f32; width];
            let mut gb = vec![0.0f32; width];
            for i in 0..p.min(width) {
                gg[i] = dz[i] * cache.z.data()[i];
                gb[i] = dz[i];
            }
            for i in 0..p {
                let g = if i < width { fp.gamma.data()[i] } else { 1.0 };
                dz[i] *= g;
            }
            ggamma = Some(Tensor::from_vec(gg));
            gbeta = Some(Tensor::from_vec(gb));
        }

        let mut gw = vec![0.0f32; p * q];
        let mut gb = vec![0.0f32; p];
        for i in 0..p {
            if dz[i] == 0.0 && !gates.train_out[i] {
                continue;
            }
            for j in 0..q {
                if gates.rule.gate(gates.train_out[i], gates.train_in[j]) {
                    gw[i * q + j] = dz[i] * cache.x.data()[j];
                }
            }
            if gates.train_out[i] {
                gb[i] = dz[i];
            }
        }

        let mut gx = vec![0.0f32; q];
        for j in 0..q {
            if !gates.visible_in[j] {
                continue;
            }
            let mut acc = 0.0f64;
            for i in 0..p {
                acc += self.w.data()[i * q + j] as f64 * dz[i] as f64;
            }
            gx[j] = acc as f32;
        }

        Ok((
            Tensor::from_vec(gx),
            FeatureGrads {
                w: Tensor::new(vec![p, q], gw)?,
                b: Tensor::from_vec(gb),
                gamma: ggamma,
                beta: gbeta,
            },
        ))
    }

    pub fn sgd_step(&mut self, task: u32, lr: f32, grads: &FeatureGrads) -> Result<()> {
        self.w.axpy_in_place(-lr, &grads.w)?;
        self.b.axpy_in_place(-lr, &grads.b)?;
        if let (Some(gg), Some(gb)) = (&grads.gamma, &grads.beta) {
            let fp = self.fn_params_mut(task)?;
            fp.gamma.axpy_in_place(-lr, gg)?;
            fp.beta.axpy_in_place(-lr, gb)?;
        }
        Ok(())
    }
}

/// Convolutional feature layer; features are output channels. Kernels are
/// square, inputs are [c,h,w].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConv {
    pub layer_id: u32,
    k: Tensor,
    b: Tensor,
    pub stride: usize,
    pub pad: usize,
    fn_params: Vec<(u32, FnParams)>,
}

impl MaskedConv {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        layer_id: u32,
        rng: &mut ChaCha8Rng,
    ) -> MaskedConv {
        let fan_in = in_channels * kernel * kernel;
        MaskedConv {
            layer_id,
            k: Tensor::init_uniform(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
            b: Tensor::zeros(vec![out_channels]),
            stride,
            pad,
            fn_params: Vec::new(),
        }
    }

    pub fn from_parts(
        layer_id: u32,
        k: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
        fn_params: Vec<(u32, FnParams)>,
    ) -> Result<MaskedConv> {
        if k.rank() != 4 || b.rank() != 1 || k.shape()[0] != b.shape()[0] {
            return Err(TfmError::Shape("conv parts disagree".into()));
        }
        Ok(MaskedConv { layer_id, k, b, stride, pad, fn_params })
    }

    pub fn in_channels(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn kernels(&self) -> &Tensor {
        &self.k
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor {
        &mut self.k
    }

    pub fn biases(&self) -> &Tensor {
        &self.b
    }

    pub fn biases_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn fn_params(&self, task: u32) -> Result<&FnParams> {
        self.fn_params
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no normalization parameters for task".into(),
            })
    }

    pub fn fn_params_mut(&mut self, task: u32) -> Result<&mut FnParams> {
        self.fn_params
            .iter_mut()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p)
            .ok_or(TfmError::TaskLookup {
                task,
                context: "no normalization parameters for task".into(),
            })
    }

    pub fn all_fn_params(&self) -> &[(u32, FnParams)] {
        &self.fn_params
    }

    pub fn begin_task_fn(&mut self, task: u32) -> Result<()> {
        if self.fn_params.iter().any(|(t, _)| *t == task) {
            return Err(TfmError::Contract(format!(
                "normalization parameters for task {} already exist",
                task
            )));
        }
        self.fn_params.push((task, FnParams::identity(self.out_channels())));
        Ok(())
    }

    pub fn restore_fn_params(&mut self, params: Vec<(u32, FnParams)>) {
        self.fn_params = params;
    }

    pub fn grow(&mut self, added_in: usize, added_out: usize, rng: &mut ChaCha8Rng) {
        if added_in == 0 && added_out == 0 {
            return;
        }
        let (co, ci, kh, kw) = (
            self.out_channels(),
            self.in_channels(),
            self.k.shape()[2],
            self.k.shape()[3],
        );
        let (nco, nci) = (co + added_out, ci + added_in);
        let bound = 1.0 / ((nci * kh * kw) as f32).sqrt();
        let old = self.k.data();
        let mut data = Vec::with_capacity(nco * nci * kh * kw);
        for o in 0..nco {
            for c in 0..nci {
                for y in 0..kh {
                    for x in 0..kw {
                        if o < co && c < ci {
                            data.push(old[((o * ci + c) * kh + y) * kw + x]);
                        } else {
                            data.push(rng.random_range(-bound..=bound));
                        }
                    }
                }
            }
        }
        self.k = Tensor::new(vec![nco, nci, kh, kw], data).unwrap();
        let mut b = self.b.data().to_vec();
        b.resize(nco, 0.0);
        self.b = Tensor::from_vec(b);
    }

    pub fn forward(
        &self,
        x: &Tensor,
        task: u32,
        visible_out: &[bool],
        use_fn: bool,
    ) -> Result<(Tensor, LayerCache)> {
        let co = self.out_channels();
        if visible_out.len() != co {
            return Err(TfmError::Shape("visibility mask length mismatch".into()));
        }
        let mut z = conv2d(x, &self.k, self.stride, self.pad)?;
        let (oh, ow) = (z.shape()[1], z.shape()[2]);
        let area = oh * ow;
        for o in 0..co {
            let bo = self.b.data()[o];
            for s in &mut z.data_mut()[o * area..(o + 1) * area] {
                *s += bo;
            }
        }
        let fnp = if use_fn { Some(self.fn_params(task)?) } else { None };
        let mut v = vec![0.0f32; co * area];
        for o in 0..co {
            if !visible_out[o] {
                continue;
            }
            let (g, be) = match fnp {
                Some(fp) if o < fp.gamma.len() => (fp.gamma.data()[o], fp.beta.data()[o]),
                _ => (1.0, 0.0),
            };
            for s in 0..area {
                v[o * area + s] = g * z.data()[o * area + s] + be;
            }
        }
        let y: Vec<f32> = v.iter().map(|&vi| relu(vi)).collect();
        let shape = z.shape().to_vec();
        Ok((
            Tensor::new(shape.clone(), y)?,
            LayerCache {
                x: x.clone(),
                z,
                v: Tensor::new(shape, v)?,
                dropout_scale: None,
            },
        ))
    }

    pub fn backward(
        &self,
        grad_y: &Tensor,
        task: u32,
        gates: &LayerGates,
        use_fn: bool,
        cache: &LayerCache,
    ) -> Result<(Tensor, FeatureGrads)> {
        let (co, ci, kh, kw) = (
            self.out_channels(),
            self.in_channels(),
            self.k.shape()[2],
            self.k.shape()[3],
        );
        let (h, w) = (cache.x.shape()[1], cache.x.shape()[2]);
        let (oh, ow) = (grad_y.shape()[1], grad_y.shape()[2]);
        let area = oh * ow;
        let fnp = if use_fn { Some(self.fn_params(task)?) } else { None };

        let mut d = grad_y.data().to_vec();
        for o in 0..co {
            for s in 0..area {
                let idx = o * area + s;
                if cache.v.data()[idx] <= 0.0 || !gates.visible_out[o] {
                    d[idx] = 0.0;
                }
            }
        }

        let (mut ggamma, mut gbeta) = (None, None);
        if let Some(fp) = fnp {
            let width = fp.gamma.len();
            let mut gg = vec![0.0f32; width];
            let mut gb = vec![0.0f32; width];
            for o in 0..co.min(width) {
                let mut ag = 0.0f64;
                let mut ab = 0.0f64;
                for s in 0..area {
                    let idx = o * area + s;
                    ag += d[idx] as f64 * cache.z.data()[idx] as f64;
                    ab += d[idx] as f64;
                }
                gg[o] = ag as f32;
                gb[o] = ab as f32;
            }
            for o in 0..co {
                let g = if o < width { fp.gamma.data()[o] } else { 1.0 };
                for s in 0..area {
                    d[o * area + s] *= g;
                }
            }
            ggamma = Some(Tensor::from_vec(gg));
            gbeta = Some(Tensor::from_vec(gb));
        }
        let dz = d;

        let mut gk = vec![0.0f32; co * ci * kh * kw];
        let mut gb = vec![0.0f32; co];
        for o in 0..co {
            for c in 0..ci {
                if !gates.rule.gate(gates.train_out[o], gates.train_in[c]) {
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += dz[(o * oh + oy) * ow + ox] as f64
                                    * cache.x.data()[(c * h + iy as usize) * w + ix as usize]
                                        as f64;
                            }
                        }
                        gk[((o * ci + c) * kh + ky) * kw + kx] = acc as f32;
                    }
                }
            }
            if gates.train_out[o] {
                let mut acc = 0.0f64;
                for s in 0..area {
                    acc += dz[o * area + s] as f64;
                }
                gb[o] = acc as f32;
            }
        }

        let mut gx = vec![0.0f32; ci * h * w];
        for c in 0..ci {
            if !gates.visible_in[c] {
                continue;
            }
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0f64;
                    for o in 0..co {
                        for ky in 0..kh {
                            let oy_num = iy as isize + self.pad as isize - ky as isize;
                            if oy_num < 0 || oy_num % self.stride as isize != 0 {
                                continue;
                            }
                            let oy = (oy_num / self.stride as isize) as usize;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox_num = ix as isize + self.pad as isize - kx as isize;
                                if ox_num < 0 || ox_num % self.stride as isize != 0 {
                                    continue;
                                }
                                let ox = (ox_num / self.stride as isize) as usize;
                                if ox >= ow {
                                    continue;
                                }
                                acc += dz[(o * oh + oy) * ow + ox] as f64
                                    * self.k.data()[((o * ci + c) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    gx[(c * h + iy) * w + ix] = acc as f32;
                }
            }
        }

        Ok((
            Tensor::new(vec![ci, h, w], gx)?,
            FeatureGrads {
                w: Tensor::new(vec![co, ci, kh, kw], gk)?,
                b: Tensor::from_vec(gb),
                gamma: ggamma,
                beta: gbeta,
            },
        ))
    }

    pub fn sgd_step(&mut self, task: u32, lr: f32, grads: &FeatureGrads) -> Result<()> {
        self.k.axpy_in_place(-lr, &grads.w)?;
        self.b.axpy_in_place(-lr, &grads.b)?;
        if let (Some(gg), Some(gb)) = (&grads.gamma, &grads.beta) {
            let fp = self.fn_params_mut(task)?;
            fp.gamma.axpy_in_place(-lr, gg)?;
            fp.beta.axpy_in_place(-lr, gb)?;
        }
        Ok(())
    }
}

/// Max pooling over square windows; returns the output and the flat input
/// index of each selected maximum (first occurrence wins ties).
pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(TfmError::Shape("maxpool expects [c,h,w]".into()));
    }
    if kernel == 0 || stride == 0 {
        return Err(TfmError::Shape("maxpool kernel and stride must be positive".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if kernel > h || kernel > w {
        return Err(TfmError::Shape("maxpool kernel exceeds input".into()));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
                arg[(ch * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(
    grad_y: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape.to_vec());
    for (g, &idx) in grad_y.data().iter().zip(argmax) {
        gx.data_mut()[idx] += g;
    }
    Ok(gx)
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w: Tensor,
    pub b: Tensor,
}

/// Task-specific linear output head. Feature normalization never applies
/// here; heads are created at the width the network had when their task
/// started and read exactly that prefix of the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub task_id: u32,
    w: Tensor,
    b: Tensor,
}

impl TaskHead {
    pub fn new(task_id: u32, classes: usize, in_features: usize, rng: &mut ChaCha8Rng) -> TaskHead {
        TaskHead {
            task_id,
            w: Tensor::init_uniform(vec![classes, in_features], in_features, rng),
            b: Tensor::zeros(vec![classes]),
        }
    }

    pub fn from_parts(task_id: u32, w: Tensor, b: Tensor) -> Result<TaskHead> {
        if w.rank() != 2 || b.rank() != 1 || w.shape()[0] != b.shape()[0] {
            return Err(TfmError::Shape("head parts disagree".into()));
        }
        Ok(TaskHead { task_id, w, b })
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn biases(&self) -> &Tensor {
        &self.b
    }

    /// `feats` may be wider than the head (the network grew since); only the
    /// prefix the head was built for is read.
    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        let (classes, q) = (self.classes(), self.in_features());
        if feats.len() < q {
            return Err(TfmError::Shape(format!(
                "head expects at least {} features, got {}",
                q,
                feats.len()
            )));
        }
        let mut out = vec![0.0f32; classes];
        for c in 0..classes {
            let mut acc = 0.0f64;
            for j in 0..q {
                acc += self.w.data()[c * q + j] as f64 * feats.data()[j] as f64;
            }
            out[c] = acc as f32 + self.b.data()[c];
        }
        Ok(Tensor::from_vec(out))
    }

    /// Returns the gradient with respect to the feature prefix the head
    /// reads, plus parameter gradients.
    pub fn backward(&self, grad_logits: &Tensor, feats: &Tensor) -> Result<(Tensor, HeadGrads)> {
        let (classes, q) = (self.classes(), self.in_features());
        if grad_logits.len() != classes {
            return Err(TfmError::Shape("logit gradient length mismatch".into()));
        }
        let mut gw = vec![0.0f32; classes * q];
        for c in 0..classes {
            for j in 0..q {
                gw[c * q + j] = grad_logits.data()[c] * feats.data()[j];
            }
        }
        let mut gx = vec![0.0f32; q];
        for j in 0..q {
            let mut acc = 0.0f64;
            for c in 0..classes {
                acc += self.w.data()[c * q + j] as f64 * grad_logits.data()[c] as f64;
            }
            gx[j] = acc as f32;
        }
        Ok((
            Tensor::from_vec(gx),
            HeadGrads {
                w: Tensor::new(vec![classes, q], gw)?,
                b: grad_logits.clone(),
            },
        ))
    }

    pub fn sgd_step(&mut self, lr: f32, grads: &HeadGrads) -> Result<()> {
        self.w.axpy_in_place(-lr, &grads.w)?;
        self.b.axpy_in_place(-lr, &grads.b)?;
        Ok(())
    }
}
