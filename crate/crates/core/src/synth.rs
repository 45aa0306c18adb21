//! Seeded synthetic stand-ins for the two downstream tasks, plus
//! preprocessing: Z-score normalization, patch extraction, few-shot
//! sampling, and the train/val split.
//!
//! Each generator re-verifies a built-in learnability oracle on every call
//! (a thresholding baseline for segmentation, an affine readout for
//! regression), so a training failure downstream indicts the learner, not
//! the data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::checkpoint::{Checkpoint, MAGIC_STORE};
use crate::backbone::store::ParamStore;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Additive lesion intensity over the unit-variance noise background.
pub const LESION_CONTRAST: f64 = 4.0;
/// Threshold used by the segmentation learnability oracle.
pub const ORACLE_THRESHOLD: f64 = 0.55 * LESION_CONTRAST;
/// The annotated mask is the bright core dilated by this factor per axis.
pub const MASK_DILATION: f64 = 1.0;
/// Intensity drop inside the regression task's central cavity. Subtle on
/// purpose: reading the radius through voxel noise takes real feature
/// aggregation, not a one-voxel threshold.
pub const CAVITY_DEPTH: f64 = 0.8;

#[derive(Debug, Clone)]
pub enum Label {
    /// Binary mask [1, D, H, W].
    Mask(Tensor),
    /// Scalar regression target.
    Scalar(f64),
}

#[derive(Debug, Clone)]
pub struct LabeledVolume {
    pub subject_id: String,
    /// [channels, D, H, W]
    pub volume: Tensor,
    pub label: Label,
    /// Marks labels imputed upstream rather than measured.
    pub imputed: bool,
}

impl LabeledVolume {
    pub fn mask(&self) -> Result<&Tensor> {
        match &self.label {
            Label::Mask(m) => Ok(m),
            Label::Scalar(_) => Err(Error::Manifest(format!(
                "subject '{}' has a scalar label, expected a mask",
                self.subject_id
            ))),
        }
    }

    pub fn scalar(&self) -> Result<f64> {
        match &self.label {
            Label::Scalar(s) => Ok(*s),
            Label::Mask(_) => Err(Error::Manifest(format!(
                "subject '{}' has a mask label, expected a scalar",
                self.subject_id
            ))),
        }
    }
}

fn noise_background(channels: usize, size: usize, rng: &mut Rng) -> Vec<f64> {
    let vox = size * size * size;
    // channels share a common component so they correlate, like multi-modal
    // scans of one anatomy
    let common: Vec<f64> = (0..vox).map(|_| rng.gaussian()).collect();
    let mut data = Vec::with_capacity(channels * vox);
    for _c in 0..channels {
        for item in common.iter().take(vox) {
            data.push(0.5 * item + (0.75f64).sqrt() * rng.gaussian());
        }
    }
    data
}

/// Add one ellipsoid of the given intensity to a scalar structure field.
fn add_ellipsoid(
    field: &mut [f64],
    mask: Option<&mut [f64]>,
    size: usize,
    center: [f64; 3],
    axes: [f64; 3],
    intensity: f64,
) {
    let mut mask = mask;
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let dz = (z as f64 - center[0]) / axes[0];
                let dy = (y as f64 - center[1]) / axes[1];
                let dx = (x as f64 - center[2]) / axes[2];
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    let v = (z * size + y) * size + x;
                    field[v] += intensity;
                    if let Some(m) = mask.as_deref_mut() {
                        m[v] = 1.0;
                    }
                }
            }
        }
    }
}

/// Mark an ellipsoid in a binary mask.
fn mark_ellipsoid(mask: &mut [f64], size: usize, center: [f64; 3], axes: [f64; 3]) {
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let dz = (z as f64 - center[0]) / axes[0];
                let dy = (y as f64 - center[1]) / axes[1];
                let dx = (x as f64 - center[2]) / axes[2];
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    mask[(z * size + y) * size + x] = 1.0;
                }
            }
        }
    }
}

/// Superimpose a structure field on the noise background with a per-channel
/// polarity. Same-sign channels mimic one acquisition family; an inverted
/// channel mimics a modality whose tissue contrast flips (T1- vs T2-like).
fn apply_structure(data: &mut [f64], structure: &[f64], channels: usize, signs: &[f64]) {
    let vox = structure.len();
    for c in 0..channels {
        let sign = signs[c % signs.len()];
        for v in 0..vox {
            data[c * vox + v] += sign * structure[v];
        }
    }
}

/// Binary segmentation task: 1-3 bright ellipsoidal lesions on correlated
/// Gaussian noise. Fully determined by the seed.
pub fn gen_seg_dataset(
    n: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<LabeledVolume>> {
    if size < 8 {
        return Err(Error::Config(format!("volume size must be >= 8, got {size}")));
    }
    let vox = size * size * size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::derive(seed, &format!("seg.subject.{i}"));
        let mut data = noise_background(channels, size, &mut rng);
        let mut structure = vec![0.0; vox];
        let mut mask = vec![0.0; vox];
        let lesions = 1 + rng.below(2);
        for _ in 0..lesions {
            let margin = size as f64 / 5.0;
            let center = [
                rng.uniform(margin, size as f64 - margin),
                rng.uniform(margin, size as f64 - margin),
                rng.uniform(margin, size as f64 - margin),
            ];
            let axes = [
                rng.uniform(size as f64 / 8.0, size as f64 / 5.0),
                rng.uniform(size as f64 / 8.0, size as f64 / 5.0),
                rng.uniform(size as f64 / 8.0, size as f64 / 5.0),
            ];
            // the bright core; the annotation includes a treatment margin
            // around it, so the target is a dilated version of what
            // intensity alone delineates
            add_ellipsoid(&mut structure, None, size, center, axes, LESION_CONTRAST);
            let dilated = [
                MASK_DILATION * axes[0],
                MASK_DILATION * axes[1],
                MASK_DILATION * axes[2],
            ];
            mark_ellipsoid(&mut mask, size, center, dilated);
        }
        // all channels carry the structure with the same polarity
        apply_structure(&mut data, &structure, channels, &[1.0]);
        let frac = mask.iter().sum::<f64>() / vox as f64;
        debug_assert!(frac > 0.0 && frac < 0.5, "mask fraction {frac} out of range");
        out.push(LabeledVolume {
            subject_id: format!("seg{i:04}"),
            volume: Tensor::new(vec![channels, size, size, size], data)?,
            label: Label::Mask(Tensor::new(vec![1, size, size, size], mask)?),
            imputed: false,
        });
    }
    verify_seg_learnable(&out)?;
    Ok(out)
}

/// The thresholding baseline must already score Dice > 0.5; otherwise the
/// task itself is broken and no learner should be blamed.
fn verify_seg_learnable(dataset: &[LabeledVolume]) -> Result<()> {
    let mut total = 0.0;
    for sample in dataset {
        let mask = sample.mask()?;
        let vox = mask.numel();
        let pred: Vec<f64> = sample.volume.data()[..vox]
            .iter()
            .map(|&v| if v > ORACLE_THRESHOLD { 1.0 } else { 0.0 })
            .collect();
        let pred = Tensor::new(mask.shape().to_vec(), pred)?;
        total += metrics::dice(&pred, mask, metrics::EVAL_DICE_SMOOTH)?;
    }
    let mean = total / dataset.len() as f64;
    if mean <= 0.5 {
        return Err(Error::Config(format!(
            "segmentation learnability oracle failed: threshold Dice {mean:.3} <= 0.5"
        )));
    }
    Ok(())
}

/// Fraction of regression subjects whose label is imputed to the constant
/// [`IMPUTED_VALUE`] instead of the anatomy-implied target, mirroring
/// datasets where missing metadata is filled with a population default.
pub const IMPUTED_FRACTION: f64 = 0.2;
pub const IMPUTED_VALUE: f64 = 0.5;

/// Regression task: the target in [0, 1] controls the radius of a dark
/// central cavity; noise perturbs the realized radius. A fixed fraction of
/// labels is imputed to a constant, so the label function is deliberately
/// contradictory on part of the data.
pub fn gen_reg_dataset(
    n: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<LabeledVolume>> {
    if size < 8 {
        return Err(Error::Config(format!("volume size must be >= 8, got {size}")));
    }
    let vox = size * size * size;
    let center = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::derive(seed, &format!("reg.subject.{i}"));
        let mut data = noise_background(channels, size, &mut rng);
        let mut structure = vec![0.0; vox];
        let target = rng.uniform(0.05, 0.95);
        let radius = ((0.12 + 0.18 * target) * size as f64 + 0.2 * rng.gaussian())
            .clamp(1.0, size as f64 / 3.0);
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    let dz = z as f64 - center;
                    let dy = y as f64 - center;
                    let dx = x as f64 - center;
                    if dz * dz + dy * dy + dx * dx <= radius * radius {
                        structure[(z * size + y) * size + x] -= CAVITY_DEPTH;
                    }
                }
            }
        }
        // bright lesion-like blobs in a mid-radius shell. They activate the
        // same detectors the segmentation task trains, and they corrupt the
        // pooled intensity readout of the cavity, so fitting this task
        // rewrites those shared features instead of leaving them dormant.
        let blobs = 2 + rng.below(3);
        for _ in 0..blobs {
            let c0 = loop {
                let margin = size as f64 / 10.0;
                let cand = [
                    rng.uniform(margin, size as f64 - margin),
                    rng.uniform(margin, size as f64 - margin),
                    rng.uniform(margin, size as f64 - margin),
                ];
                let d = cand
                    .iter()
                    .map(|c| (c - center) * (c - center))
                    .sum::<f64>()
                    .sqrt();
                if (0.33 * size as f64..=0.46 * size as f64).contains(&d) {
                    break cand;
                }
            };
            let axes = [
                rng.uniform(size as f64 / 10.0, size as f64 / 7.0),
                rng.uniform(size as f64 / 10.0, size as f64 / 7.0),
                rng.uniform(size as f64 / 10.0, size as f64 / 7.0),
            ];
            add_ellipsoid(&mut structure, None, size, c0, axes, LESION_CONTRAST);
        }
        apply_structure(&mut data, &structure, channels, &[1.0]);
        let imputed = rng.next_f64() < IMPUTED_FRACTION;
        out.push(LabeledVolume {
            subject_id: format!("reg{i:04}"),
            volume: Tensor::new(vec![channels, size, size, size], data)?,
            label: Label::Scalar(if imputed { IMPUTED_VALUE } else { target }),
            imputed,
        });
    }
    verify_reg_learnable(&out)?;
    Ok(out)
}

/// Mean intensity of channel 0 over a central ball that the cavity spans
/// but the shell blobs barely reach.
fn central_intensity(volume: &Tensor) -> f64 {
    let size = volume.shape()[1];
    let center = (size as f64 - 1.0) / 2.0;
    let radius = 0.27 * size as f64;
    let mut acc = 0.0;
    let mut count = 0.0;
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let dz = z as f64 - center;
                let dy = y as f64 - center;
                let dx = x as f64 - center;
                if dz * dz + dy * dy + dx * dx <= radius * radius {
                    acc += volume.data()[(z * size + y) * size + x];
                    count += 1.0;
                }
            }
        }
    }
    acc / count
}

/// Least-squares affine readout of central intensity must predict the
/// target with MAE < 0.1, over the subjects whose labels are genuine.
/// Imputed labels are constant by construction and carry no signal to learn.
fn verify_reg_learnable(dataset: &[LabeledVolume]) -> Result<()> {
    let genuine: Vec<&LabeledVolume> = dataset.iter().filter(|s| !s.imputed).collect();
    if genuine.is_empty() {
        return Err(Error::Config("regression dataset has no genuine labels".into()));
    }
    let xs: Vec<f64> = genuine.iter().map(|s| central_intensity(&s.volume)).collect();
    let ts: Vec<f64> = genuine.iter().map(|s| s.scalar()).collect::<Result<_>>()?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mt = ts.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ts).map(|(x, t)| (x - mx) * (t - mt)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let a = cov / var;
    let b = mt - a * mx;
    let mae = xs
        .iter()
        .zip(&ts)
        .map(|(x, t)| (a * x + b - t).abs())
        .sum::<f64>()
        / n;
    if mae >= 0.1 {
        return Err(Error::Config(format!(
            "regression learnability oracle failed: affine MAE {mae:.3} >= 0.1"
        )));
    }
    Ok(())
}

/// Per-channel (x - mean) / max(std, 1e-8).
pub fn zscore_normalize(volume: &Tensor) -> Tensor {
    let shape = volume.shape().to_vec();
    let channels = shape[0];
    let vox: usize = shape[1..].iter().product();
    let mut data = volume.data().to_vec();
    for c in 0..channels {
        let chunk = &mut data[c * vox..(c + 1) * vox];
        // a constant channel is exactly zero after centering; skipping the
        // arithmetic avoids summation round-off leaking through the eps guard
        if chunk.iter().all(|&v| v == chunk[0]) {
            chunk.fill(0.0);
            continue;
        }
        let mean = chunk.iter().sum::<f64>() / vox as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vox as f64;
        let denom = var.sqrt().max(1e-8);
        for v in chunk.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    Tensor::new(shape, data).expect("same shape")
}

/// Ordered subjects plus the deterministic 80/20 split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub subjects: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Split subjects 80/20 by seeded shuffle of the sorted id list.
pub fn make_manifest(subject_ids: &[String], seed: u64) -> DatasetManifest {
    let mut sorted: Vec<String> = subject_ids.to_vec();
    sorted.sort();
    let mut shuffled = sorted.clone();
    Rng::derive(seed, "split").shuffle(&mut shuffled);
    let val_n = shuffled.len() / 5;
    let train_n = shuffled.len() - val_n;
    DatasetManifest {
        seed,
        subjects: sorted,
        train: shuffled[..train_n].to_vec(),
        val: shuffled[train_n..].to_vec(),
    }
}

/// Deterministic few-shot subset of the train split: sorted ids, seeded
/// shuffle, prefix. Same seed means n=16 is a prefix of n=32 of n=64.
pub fn few_shot_sample(manifest: &DatasetManifest, n_shot: usize, seed: u64) -> Result<Vec<String>> {
    if n_shot > manifest.train.len() {
        return Err(Error::NotEnoughSubjects { n_shot, available: manifest.train.len() });
    }
    let mut ids = manifest.train.clone();
    ids.sort();
    Rng::derive(seed, "fewshot").shuffle(&mut ids);
    ids.truncate(n_shot);
    Ok(ids)
}

/// Foreground-biased training crop for segmentation: with probability 0.5
/// center on a random mask voxel, else crop uniformly.
pub fn patch_extract_seg(
    volume: &Tensor,
    mask: &Tensor,
    patch: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let shape = volume.shape();
    for axis in 1..4 {
        if patch > shape[axis] {
            return Err(Error::PatchTooLarge { axis, patch, extent: shape[axis] });
        }
    }
    let foreground: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let start = if rng.next_f64() < 0.5 && !foreground.is_empty() {
        let idx = foreground[rng.below(foreground.len())];
        let (d, h, w) = (shape[1], shape[2], shape[3]);
        let (z, rem) = (idx / (h * w), idx % (h * w));
        let (y, x) = (rem / w, rem % w);
        [
            clamp_start(z, patch, d),
            clamp_start(y, patch, h),
            clamp_start(x, patch, w),
        ]
    } else {
        let mut s = [0usize; 3];
        for (axis, slot) in s.iter_mut().enumerate() {
            let room = shape[axis + 1] - patch;
            *slot = if room == 0 { 0 } else { rng.below(room + 1) };
        }
        s
    };
    Ok((volume.crop(start, patch)?, mask.crop(start, patch)?))
}

fn clamp_start(center: usize, patch: usize, extent: usize) -> usize {
    let half = patch / 2;
    center.saturating_sub(half).min(extent - patch)
}

/// Deterministic center crop, used for regression and evaluation.
pub fn patch_extract_center(volume: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = volume.shape();
    let mut start = [0usize; 3];
    for (axis, slot) in start.iter_mut().enumerate() {
        if patch > shape[axis + 1] {
            return Err(Error::PatchTooLarge { axis: axis + 1, patch, extent: shape[axis + 1] });
        }
        *slot = (shape[axis + 1] - patch) / 2;
    }
    volume.crop(start, patch)
}

// ---------------------------------------------------------------------------
// Raw on-disk datasets: manifest.json plus per-subject tensor containers.

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SubjectJson {
    id: String,
    volume_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    imputed: Option<bool>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SplitJson {
    train: Vec<String>,
    val: Vec<String>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ManifestJson {
    seed: u64,
    subjects: Vec<SubjectJson>,
    split: SplitJson,
}

fn tensor_file(dir: &Path, name: &str, key: &str, t: &Tensor) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert(key, t.clone())?;
    let bytes = Checkpoint::from_store(&store).to_bytes(MAGIC_STORE);
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn read_tensor_file(path: &Path, key: &str) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes, MAGIC_STORE)?;
    let (shape, data) = ckpt
        .entries
        .get(key)
        .ok_or_else(|| Error::Manifest(format!("tensor file {path:?} missing entry '{key}'")))?;
    Tensor::new(shape.clone(), data.clone())
}

/// Write a dataset to disk: `manifest.json` plus raw tensor files.
pub fn save_raw_dataset(
    dir: &Path,
    dataset: &[LabeledVolume],
    manifest: &DatasetManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let volume_file = format!("{}.vol.fgls", sample.subject_id);
        tensor_file(dir, &volume_file, "volume", &sample.volume)?;
        let (label, mask_file) = match &sample.label {
            Label::Scalar(s) => (Some(*s), None),
            Label::Mask(m) => {
                let mask_file = format!("{}.mask.fgls", sample.subject_id);
                tensor_file(dir, &mask_file, "mask", m)?;
                (None, Some(mask_file))
            }
        };
        subjects.push(SubjectJson {
            id: sample.subject_id.clone(),
            volume_file,
            label,
            mask_file,
            imputed: if sample.imputed { Some(true) } else { None },
        });
    }
    let json = ManifestJson {
        seed: manifest.seed,
        subjects,
        split: SplitJson { train: manifest.train.clone(), val: manifest.val.clone() },
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&json)?)?;
    Ok(())
}

/// Load a dataset directory written by [`save_raw_dataset`] (or prepared
/// externally in the same layout).
pub fn load_raw_dataset(dir: &Path) -> Result<(Vec<LabeledVolume>, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read(&manifest_path)
        .map_err(|e| Error::Manifest(format!("cannot read {manifest_path:?}: {e}")))?;
    let json: ManifestJson =
        serde_json::from_slice(&raw).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut dataset = Vec::with_capacity(json.subjects.len());
    let mut ids = Vec::with_capacity(json.subjects.len());
    for subject in &json.subjects {
        let volume = read_tensor_file(&dir.join(&subject.volume_file), "volume")?;
        if volume.shape().len() != 4 {
            return Err(Error::Manifest(format!(
                "subject '{}' volume must be rank 4, got rank {}",
                subject.id,
                volume.shape().len()
            )));
        }
        let label = match (&subject.mask_file, subject.label) {
            (Some(mask_file), None) => {
                let mask = read_tensor_file(&dir.join(mask_file), "mask")?;
                if mask.shape()[1..] != volume.shape()[1..] {
                    return Err(Error::Manifest(format!(
                        "subject '{}' mask extents {:?} do not match volume {:?}",
                        subject.id,
                        mask.shape(),
                        volume.shape()
                    )));
                }
                if let Some(bad) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(Error::Manifest(format!(
                        "subject '{}' mask is not binary (found {bad})",
                        subject.id
                    )));
                }
                Label::Mask(mask)
            }
            (None, Some(value)) => {
                if !value.is_finite() {
                    return Err(Error::Manifest(format!(
                        "subject '{}' has a non-finite label",
                        subject.id
                    )));
                }
                Label::Scalar(value)
            }
            (None, None) => {
                return Err(Error::Manifest(format!(
                    "subject '{}' has neither a label nor a mask_file",
                    subject.id
                )))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Manifest(format!(
                    "subject '{}' has both a label and a mask_file",
                    subject.id
                )))
            }
        };
        ids.push(subject.id.clone());
        dataset.push(LabeledVolume {
            subject_id: subject.id.clone(),
            volume,
            label,
            imputed: subject.imputed.unwrap_or(false),
        });
    }
    let manifest = DatasetManifest {
        seed: json.seed,
        subjects: {
            let mut sorted = ids;
            sorted.sort();
            sorted
        },
        train: json.split.train,
        val: json.split.val,
    };
    Ok((dataset, manifest))
}

/// Index volumes by subject id.
pub fn by_id(dataset: Vec<LabeledVolume>) -> BTreeMap<String, LabeledVolume> {
    dataset.into_iter().map(|s| (s.subject_id.clone(), s)).collect()
}
