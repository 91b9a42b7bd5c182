//! Dataset loading: IDX image files, labeled CSV, and a synthetic Gaussian
//! generator. All loaders produce a [`DatasetBundle`] of normalized samples.

use crate::error::{Result, TfmError};
use crate::rng::RngSeed;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// One sample reference inside a task split: a bundle index, the label
/// local to the task's class list, and the head the sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub index: usize,
    pub label: usize,
    pub head_task: u32,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    source: String,
    sample_shape: Vec<usize>,
    samples: Vec<Tensor>,
    labels: Vec<u32>,
    classes: usize,
    /// Indices that came from a designated test portion, if the source has
    /// one (the t10k pair of an IDX directory).
    fixed_test: Option<Vec<usize>>,
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
}

impl DatasetBundle {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn is_image(&self) -> bool {
        self.sample_shape.len() == 3
    }

    pub fn sample(&self, idx: usize) -> Tensor {
        self.samples[idx].clone()
    }

    pub fn label(&self, idx: usize) -> u32 {
        self.labels[idx]
    }

    pub fn fixed_test(&self) -> Option<&[usize]> {
        self.fixed_test.as_deref()
    }

    pub fn normalization(&self) -> (&[f32], &[f32]) {
        (&self.norm_mean, &self.norm_std)
    }

    /// All indices with the given label, in bundle order.
    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Build from raw samples: computes per-channel (images) or
    /// per-dimension (vectors) statistics over the non-test portion and
    /// normalizes everything with them.
    fn from_raw(
        source: String,
        sample_shape: Vec<usize>,
        mut samples: Vec<Tensor>,
        labels: Vec<u32>,
        fixed_test: Option<Vec<usize>>,
    ) -> Result<DatasetBundle> {
        if samples.is_empty() {
            return Err(TfmError::Data(format!("{}: no samples", source)));
        }
        if samples.len() != labels.len() {
            return Err(TfmError::Data(format!(
                "{}: {} samples but {} labels",
                source,
                samples.len(),
                labels.len()
            )));
        }
        let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let is_image = sample_shape.len() == 3;
        let stats_dims = if is_image { sample_shape[0] } else { sample_shape[0] };
        let area: usize = if is_image {
            sample_shape[1] * sample_shape[2]
        } else {
            1
        };

        let in_stats: Vec<bool> = match &fixed_test {
            None => vec![true; samples.len()],
            Some(test) => {
                let mut mask = vec![true; samples.len()];
                for &i in test {
                    mask[i] = false;
                }
                mask
            }
        };
        let mut sums = vec![0.0f64; stats_dims];
        let mut sq = vec![0.0f64; stats_dims];
        let mut count = 0u64;
        for (s, _) in samples.iter().zip(&in_stats).filter(|(_, &keep)| keep) {
            count += 1;
            for d in 0..stats_dims {
                for a in 0..area {
                    let v = s.data()[d * area + a] as f64;
                    sums[d] += v;
                    sq[d] += v * v;
                }
            }
        }
        if count == 0 {
            return Err(TfmError::Data(format!("{}: no training samples for statistics", source)));
        }
        let n = (count * area as u64) as f64;
        let mut norm_mean = Vec::with_capacity(stats_dims);
        let mut norm_std = Vec::with_capacity(stats_dims);
        for d in 0..stats_dims {
            let mean = sums[d] / n;
            let var = (sq[d] / n - mean * mean).max(0.0);
            norm_mean.push(mean as f32);
            norm_std.push((var.sqrt() as f32).max(1e-6));
        }
        for s in &mut samples {
            for d in 0..stats_dims {
                for a in 0..area {
                    let v = &mut s.data_mut()[d * area + a];
                    *v = (*v - norm_mean[d]) / norm_std[d];
                }
            }
        }
        Ok(DatasetBundle {
            source,
            sample_shape,
            samples,
            labels,
            classes,
            fixed_test,
            norm_mean,
            norm_std,
        })
    }
}

/// Mirror an image tensor left to right. Vectors pass through unchanged
/// by way of an error the caller may ignore.
pub fn hflip(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(TfmError::Shape("horizontal flip needs [c,h,w]".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * h + y) * w + xx] = x.data()[(ch * h + y) * w + (w - 1 - xx)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Synthetic Gaussian mixture: each class gets `modes_per_class` centers
/// drawn from a scaled normal; with two modes the second is the mirror of
/// the first, which keeps classes linearly inseparable.
///
/// With `latent_dim` set, every center lives in the first `latent_dim`
/// coordinates and the remaining dimensions carry pure noise, so all
/// classes share one signal subspace and tasks built from them are
/// related rather than independent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub modes_per_class: usize,
    pub center_scale: f64,
    pub noise_scale: f64,
    pub latent_dim: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            classes: 10,
            samples_per_class: 100,
            dim: 64,
            modes_per_class: 2,
            center_scale: 1.0,
            noise_scale: 1.0,
            latent_dim: None,
        }
    }
}

pub fn generate_synth(spec: &SynthSpec, seed: RngSeed) -> Result<DatasetBundle> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.dim == 0 {
        return Err(TfmError::Config("synthetic spec needs positive sizes".into()));
    }
    if spec.modes_per_class == 0 || spec.modes_per_class > 2 {
        return Err(TfmError::Config("modes_per_class must be 1 or 2".into()));
    }
    let latent = spec.latent_dim.unwrap_or(spec.dim);
    if latent == 0 || latent > spec.dim {
        return Err(TfmError::Config(format!(
            "latent_dim {} must be in 1..={}",
            latent, spec.dim
        )));
    }
    let mut center_rng = seed.child("synth-centers").stream();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes * spec.modes_per_class);
    for _ in 0..spec.classes {
        let first: Vec<f64> = (0..spec.dim)
            .map(|d| {
                let v: f64 = StandardNormal.sample(&mut center_rng);
                if d < latent {
                    v * spec.center_scale
                } else {
                    0.0
                }
            })
            .collect();
        if spec.modes_per_class == 2 {
            let mirrored: Vec<f64> = first.iter().map(|v| -v).collect();
            centers.push(first);
            centers.push(mirrored);
        } else {
            centers.push(first);
        }
    }
    let mut sample_rng = seed.child("synth-samples").stream();
    let total = spec.classes * spec.samples_per_class;
    let mut samples = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for class in 0..spec.classes {
        for s in 0..spec.samples_per_class {
            let mode = s % spec.modes_per_class;
            let center = &centers[class * spec.modes_per_class + mode];
            let data: Vec<f32> = center
                .iter()
                .map(|&c| {
                    let v: f64 = StandardNormal.sample(&mut sample_rng);
                    (c + v * spec.noise_scale) as f32
                })
                .collect();
            samples.push(Tensor::from_vec(data));
            labels.push(class as u32);
        }
    }
    DatasetBundle::from_raw(
        format!("synth(classes={},dim={})", spec.classes, spec.dim),
        vec![spec.dim],
        samples,
        labels,
        None,
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| TfmError::Format {
        offset: *offset,
        reason: format!("{}: {}", what, e),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let mut f = BufReader::new(File::open(path).map_err(|e| {
        TfmError::Data(format!("{}: {}", path.display(), e))
    })?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut f, &mut offset, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TfmError::Format {
            offset: 0,
            reason: format!("bad image magic {:#010x} in {}", magic, path.display()),
        });
    }
    let count = read_u32_be(&mut f, &mut offset, "image count")? as usize;
    let h = read_u32_be(&mut f, &mut offset, "rows")? as usize;
    let w = read_u32_be(&mut f, &mut offset, "cols")? as usize;
    if h == 0 || w == 0 {
        return Err(TfmError::Format {
            offset: 8,
            reason: "zero image dimensions".into(),
        });
    }
    let mut samples = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w];
    for _ in 0..count {
        f.read_exact(&mut buf).map_err(|e| TfmError::Format {
            offset,
            reason: format!("truncated image data: {}", e),
        })?;
        offset += buf.len() as u64;
        let data: Vec<f32> = buf.iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Tensor::new(vec![1, h, w], data)?);
    }
    Ok(samples)
}

fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let mut f = BufReader::new(File::open(path).map_err(|e| {
        TfmError::Data(format!("{}: {}", path.display(), e))
    })?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut f, &mut offset, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TfmError::Format {
            offset: 0,
            reason: format!("bad label magic {:#010x} in {}", magic, path.display()),
        });
    }
    let count = read_u32_be(&mut f, &mut offset, "label count")? as usize;
    let mut buf = vec![0u8; count];
    f.read_exact(&mut buf).map_err(|e| TfmError::Format {
        offset,
        reason: format!("truncated labels: {}", e),
    })?;
    Ok(buf.into_iter().map(u32::from).collect())
}

/// Load an IDX directory: `train-images-idx3-ubyte` and
/// `train-labels-idx1-ubyte`, plus the optional `t10k-*` pair which becomes
/// the designated test portion.
pub fn load_idx_dir(dir: &Path) -> Result<DatasetBundle> {
    let train_images = dir.join("train-images-idx3-ubyte");
    let train_labels = dir.join("train-labels-idx1-ubyte");
    if !train_images.is_file() || !train_labels.is_file() {
        return Err(TfmError::Data(format!(
            "{}: expected train-images-idx3-ubyte and train-labels-idx1-ubyte",
            dir.display()
        )));
    }
    let mut samples = read_idx_images(&train_images)?;
    let mut labels = read_idx_labels(&train_labels)?;
    if samples.len() != labels.len() {
        return Err(TfmError::Data(format!(
            "{}: {} images but {} labels",
            dir.display(),
            samples.len(),
            labels.len()
        )));
    }
    let mut fixed_test = None;
    let test_images = dir.join("t10k-images-idx3-ubyte");
    let test_labels = dir.join("t10k-labels-idx1-ubyte");
    if test_images.is_file() && test_labels.is_file() {
        let ti = read_idx_images(&test_images)?;
        let tl = read_idx_labels(&test_labels)?;
        if ti.len() != tl.len() {
            return Err(TfmError::Data(format!(
                "{}: {} test images but {} labels",
                dir.display(),
                ti.len(),
                tl.len()
            )));
        }
        let start = samples.len();
        fixed_test = Some((start..start + ti.len()).collect());
        samples.extend(ti);
        labels.extend(tl);
    }
    let shape = samples[0].shape().to_vec();
    if samples.iter().any(|s| s.shape() != shape.as_slice()) {
        return Err(TfmError::Data(format!(
            "{}: inconsistent image shapes",
            dir.display()
        )));
    }
    DatasetBundle::from_raw(dir.display().to_string(), shape, samples, labels, fixed_test)
}

/// Load a CSV of `label,v1,...,vN` rows (no header).
pub fn load_csv(path: &Path) -> Result<DatasetBundle> {
    let f = File::open(path).map_err(|e| TfmError::Data(format!("{}: {}", path.display(), e)))?;
    let reader = BufReader::new(f);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TfmError::Data(format!("{}: {}", path.display(), e)))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: u32 = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| TfmError::Data(format!("{}:{}: bad label: {}", path.display(), lineno + 1, e)))?;
        let values: Vec<f32> = fields
            .map(|v| {
                v.trim().parse::<f32>().map_err(|e| {
                    TfmError::Data(format!("{}:{}: bad value: {}", path.display(), lineno + 1, e))
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(TfmError::Data(format!(
                "{}:{}: row has no feature values",
                path.display(),
                lineno + 1
            )));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(TfmError::Data(format!(
                    "{}:{}: expected {} values, got {}",
                    path.display(),
                    lineno + 1,
                    d,
                    values.len()
                )))
            }
            _ => {}
        }
        samples.push(Tensor::from_vec(values));
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| TfmError::Data(format!("{}: empty file", path.display())))?;
    DatasetBundle::from_raw(path.display().to_string(), vec![dim], samples, labels, None)
}

/// Deterministic per-class index split into test, validation, and train.
pub fn split_class_indices(
    indices: &[usize],
    fixed_test: Option<&[usize]>,
    test_fraction: f64,
    val_fraction: f64,
    seed: RngSeed,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut rng = seed.stream();
    let (test, mut pool): (Vec<usize>, Vec<usize>) = match fixed_test {
        Some(ft) => {
            let test: Vec<usize> = indices.iter().copied().filter(|i| ft.binary_search(i).is_ok()).collect();
            let pool = indices.iter().copied().filter(|i| ft.binary_search(i).is_err()).collect();
            (test, pool)
        }
        None => {
            let mut shuffled = indices.to_vec();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let n_test = ((test_fraction * shuffled.len() as f64) + 0.5).floor() as usize;
            let test = shuffled[..n_test].to_vec();
            let pool = shuffled[n_test..].to_vec();
            (test, pool)
        }
    };
    if fixed_test.is_some() {
        // Still shuffle the pool so the validation carve is not biased by
        // file order.
        use rand::seq::SliceRandom;
        pool.shuffle(&mut rng);
    }
    let n_val = ((val_fraction * pool.len() as f64) + 0.5).floor() as usize;
    let val = pool[..n_val].to_vec();
    let train = pool[n_val..].to_vec();
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(TfmError::Data(format!(
            "class split too small: {} train, {} val, {} test",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok((train, val, test))
}
