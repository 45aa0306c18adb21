//! Task-sequence training engine: adapter isolation plus the five baselines,
//! producing the R[i][j] result matrix.
//!
//! The data-access contract is enforced here, not assumed: training reads go
//! through revocable, counted handles, and a non-replay method touching a
//! prior task's training data raises instead of silently leaking.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::backbone::bind::Leaves;
use crate::backbone::checkpoint::save_checkpoint;
use crate::backbone::store::ParamStore;
use crate::backbone::unet::{make_reg_head, make_seg_head, UNet};
use crate::error::{Error, Result};
use crate::lora::{
    count_trainable, create_adapter, load_adapter, save_adapter, LoRAAdapter, LoRAConfig,
    LoraBind, Placement, TrainableCount,
};
use crate::metrics::{MetricKind, MetricValue, ResultMatrix, EVAL_DICE_SMOOTH};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::synth::{
    few_shot_sample, patch_extract_center, patch_extract_seg, zscore_normalize, DatasetManifest,
    LabeledVolume,
};
use crate::tensor::{Tape, Tensor};

/// Loss smooth for the soft-Dice term (evaluation uses a tiny one instead).
pub const LOSS_DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    Regression,
}

impl TaskKind {
    pub fn metric(&self) -> MetricKind {
        match self {
            TaskKind::Segmentation => MetricKind::Dice,
            TaskKind::Regression => MetricKind::Mae,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub n_shot: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub enum MethodConfig {
    Lora(LoRAConfig),
    SeqLinear,
    SeqFt,
    Ewc { lambda: f64, fisher_batches: usize },
    Lwf { distill_weight: f64 },
    Replay { buffer_size: usize, distill_weight: f64 },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Lora(_) => "lora",
            MethodConfig::SeqLinear => "seq_linear",
            MethodConfig::SeqFt => "seq_ft",
            MethodConfig::Ewc { .. } => "ewc",
            MethodConfig::Lwf { .. } => "lwf",
            MethodConfig::Replay { .. } => "replay",
        }
    }

    pub fn is_replay(&self) -> bool {
        matches!(self, MethodConfig::Replay { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub tasks: Vec<TaskSpec>,
    pub method: MethodConfig,
    pub order_label: String,
}

// ---------------------------------------------------------------------------
// Revocable, counted data handles.

/// One task's dataset behind the access contract. Volumes are Z-scored at
/// ingest; masks and scalar targets are untouched.
pub struct TaskData {
    pub manifest: DatasetManifest,
    volumes: BTreeMap<String, LabeledVolume>,
    train_reads: AtomicUsize,
    revoked: AtomicBool,
}

impl TaskData {
    pub fn new(dataset: Vec<LabeledVolume>, manifest: DatasetManifest) -> Self {
        let volumes = dataset
            .into_iter()
            .map(|mut s| {
                s.volume = zscore_normalize(&s.volume);
                (s.subject_id.clone(), s)
            })
            .collect();
        TaskData {
            manifest,
            volumes,
            train_reads: AtomicUsize::new(0),
            revoked: AtomicBool::new(false),
        }
    }

    /// Training-split access: counted, and refused once revoked.
    pub fn get_train(&self, id: &str, method: &str, task_id: &str) -> Result<&LabeledVolume> {
        if self.revoked.load(Ordering::Relaxed) {
            return Err(Error::DataAccessViolation {
                method: method.to_string(),
                task_id: task_id.to_string(),
            });
        }
        self.train_reads.fetch_add(1, Ordering::Relaxed);
        self.volumes
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(format!("{task_id}/{id}")))
    }

    /// Validation-split access for evaluation; never revoked or counted.
    pub fn get_val(&self, id: &str, task_id: &str) -> Result<&LabeledVolume> {
        self.volumes
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(format!("{task_id}/{id}")))
    }

    pub fn revoke(&self) {
        self.revoked.store(true, Ordering::Relaxed);
    }

    pub fn train_reads(&self) -> usize {
        self.train_reads.load(Ordering::Relaxed)
    }
}

/// Datasets keyed by task id.
#[derive(Default)]
pub struct DatasetRegistry {
    tasks: BTreeMap<String, TaskData>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task_id: &str, data: TaskData) {
        self.tasks.insert(task_id.to_string(), data);
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskData> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownDataset(task_id.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Method-specific loss context.

struct ReplayEntry {
    input: Tensor,
    /// Snapshot model output on `input`, recorded at storage time.
    stored_output: Tensor,
    kind: TaskKind,
}

enum MethodCtx<'a> {
    Plain,
    Ewc {
        anchor: &'a BTreeMap<String, Vec<f64>>,
        fisher: &'a BTreeMap<String, Vec<f64>>,
        lambda: f64,
    },
    Lwf {
        snapshot: &'a ParamStore,
        weight: f64,
    },
    Replay {
        buffer: &'a [ReplayEntry],
        weight: f64,
        prior_head: Option<ParamStore>,
    },
}

// ---------------------------------------------------------------------------
// Outcome of one schedule run.

#[derive(Debug)]
pub struct ScheduleOutcome {
    pub matrix: ResultMatrix,
    pub task_ids: Vec<String>,
    pub kinds: Vec<MetricKind>,
    /// Per task: exact trainable accounting at training time.
    pub counts: Vec<TrainableCount>,
    /// Per task: mean training loss per epoch.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Per task, per epoch: digest over backbone + heads + adapter bytes.
    pub epoch_hashes: Vec<Vec<u64>>,
    /// Per task: qualified names that ever received a nonzero gradient.
    pub census: Vec<Vec<String>>,
    /// Per task: prior-task training reads observed while it trained.
    pub prior_train_reads: Vec<usize>,
    pub artifact_dirs: Vec<PathBuf>,
}

/// Evaluation record written next to each task's artifacts.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsJson {
    pub task_id: String,
    pub metric_kind: MetricKind,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------------------

fn make_head(kind: TaskKind, unet: &UNet, seed: u64) -> ParamStore {
    match kind {
        TaskKind::Segmentation => make_seg_head(&unet.cfg, seed),
        TaskKind::Regression => make_reg_head(&unet.cfg, seed),
    }
}

/// LoRA placement per task kind: segmentation uses the configured placement,
/// regression runs encoder-only since its forward never enters the decoder.
fn lora_config_for(kind: TaskKind, base: &LoRAConfig) -> LoRAConfig {
    match kind {
        TaskKind::Segmentation => base.clone(),
        TaskKind::Regression => LoRAConfig {
            placement: Placement::EncoderOnly,
            target_patterns: Vec::new(),
            ..base.clone()
        },
    }
}

/// Training-split patch for one subject, by task kind. Both kinds crop with
/// per-draw jitter: fixed training views would let the few-shot set be
/// memorized in a handful of epochs, which no patch-based training pipeline
/// on full-size volumes behaves like. Evaluation still uses the
/// deterministic center crop for regression.
fn train_patch(
    sample: &LabeledVolume,
    kind: TaskKind,
    patch: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Label)> {
    match kind {
        TaskKind::Segmentation => {
            let mask = sample.mask()?;
            let (vol, m) = patch_extract_seg(&sample.volume, mask, patch, rng)?;
            Ok((vol, Label::Mask(m)))
        }
        TaskKind::Regression => {
            let shape = sample.volume.shape();
            let mut start = [0usize; 3];
            for (axis, slot) in start.iter_mut().enumerate() {
                let room = shape[axis + 1]
                    .checked_sub(patch)
                    .ok_or(Error::PatchTooLarge {
                        axis: axis + 1,
                        patch,
                        extent: shape[axis + 1],
                    })?;
                *slot = if room == 0 { 0 } else { rng.below(room + 1) };
            }
            let vol = sample.volume.crop(start, patch)?;
            Ok((vol, Label::Scalar(sample.scalar()?)))
        }
    }
}

use crate::synth::Label;

/// Deterministic evaluation patch: stream keyed by task seed and subject id,
/// so the inputs are identical no matter when the evaluation happens.
/// Segmentation evaluates on a uniform crop (no label-dependent placement);
/// regression on the center crop.
fn eval_patch(
    sample: &LabeledVolume,
    kind: TaskKind,
    patch: usize,
    task_seed: u64,
) -> Result<(Tensor, Label)> {
    match kind {
        TaskKind::Segmentation => {
            let mut rng = Rng::derive(task_seed, &format!("evalpatch.{}", sample.subject_id));
            let mask = sample.mask()?;
            let shape = sample.volume.shape();
            let mut start = [0usize; 3];
            for (axis, slot) in start.iter_mut().enumerate() {
                if patch > shape[axis + 1] {
                    return Err(Error::PatchTooLarge {
                        axis: axis + 1,
                        patch,
                        extent: shape[axis + 1],
                    });
                }
                let room = shape[axis + 1] - patch;
                *slot = if room == 0 { 0 } else { rng.below(room + 1) };
            }
            Ok((
                sample.volume.crop(start, patch)?,
                Label::Mask(mask.crop(start, patch)?),
            ))
        }
        TaskKind::Regression => {
            let vol = patch_extract_center(&sample.volume, patch)?;
            Ok((vol, Label::Scalar(sample.scalar()?)))
        }
    }
}

/// Task-kind-appropriate prediction from persisted or in-memory artifacts.
#[derive(Debug, Clone)]
pub enum Prediction {
    /// Sigmoid-thresholded at 0.5; a logit of exactly 0 maps to background.
    Mask(Tensor),
    Scalar(f64),
}

pub fn infer(
    unet: &UNet,
    backbone: &ParamStore,
    adapter: Option<&LoRAAdapter>,
    head: &ParamStore,
    kind: TaskKind,
    volume: &Tensor,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let mut leaves = Leaves::new();
    leaves.bind_store(&mut tape, "backbone.", backbone, false);
    leaves.bind_store(&mut tape, "head.", head, false);
    let bind = adapter.map(|a| LoraBind::bind(a, &mut tape, &mut leaves, false));
    let x = tape.leaf(volume, false);
    match kind {
        TaskKind::Segmentation => {
            let logits = unet.forward_seg(&mut tape, &leaves, x, bind.as_ref(), None)?;
            let t = tape.value(logits);
            let mask: Vec<f64> =
                t.data().iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect();
            Ok(Prediction::Mask(Tensor::new(t.shape().to_vec(), mask)?))
        }
        TaskKind::Regression => {
            let out = unet.forward_reg(&mut tape, &leaves, x, bind.as_ref(), None)?;
            Ok(Prediction::Scalar(tape.value(out).data()[0]))
        }
    }
}

/// Evaluate one task on its validation split.
pub fn evaluate_task(
    unet: &UNet,
    backbone: &ParamStore,
    adapter: Option<&LoRAAdapter>,
    head: &ParamStore,
    task: &TaskSpec,
    data: &TaskData,
) -> Result<MetricValue> {
    let patch = unet.cfg.patch_size;
    let ids = &data.manifest.val;
    if ids.is_empty() {
        return Err(Error::EmptyData("validation split"));
    }
    let score_one = |id: &String| -> Result<f64> {
        let sample = data.get_val(id, &task.task_id)?;
        let (vol, label) = eval_patch(sample, task.kind, patch, task.seed)?;
        match (infer(unet, backbone, adapter, head, task.kind, &vol)?, label) {
            (Prediction::Mask(pred), Label::Mask(gt)) => {
                crate::metrics::dice(&pred, &gt, EVAL_DICE_SMOOTH)
            }
            (Prediction::Scalar(pred), Label::Scalar(t)) => Ok((pred - t).abs()),
            _ => unreachable!("prediction kind follows task kind"),
        }
    };
    // independent samples evaluate in parallel; the collect preserves index
    // order so the reduction below is identical either way
    #[cfg(feature = "parallel")]
    let scores: Result<Vec<f64>> = ids.par_iter().map(score_one).collect();
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<f64>> = ids.iter().map(score_one).collect();
    let scores = scores?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(MetricValue { kind: task.kind.metric(), value: mean })
}

// ---------------------------------------------------------------------------
// The generic per-task trainer.

struct TaskTrainOutput {
    epoch_losses: Vec<f64>,
    epoch_hashes: Vec<u64>,
    census: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn train_one_task(
    unet: &UNet,
    backbone: &mut ParamStore,
    head: &mut ParamStore,
    adapter: Option<&mut LoRAAdapter>,
    task: &TaskSpec,
    data: &TaskData,
    method_name: &str,
    ctx: &MethodCtx<'_>,
) -> Result<TaskTrainOutput> {
    let patch = unet.cfg.patch_size;
    let shots = few_shot_sample(&data.manifest, task.n_shot, task.seed)?;
    let mut adam = AdamState::new(task.lr);
    let mut dropout_rng = Rng::derive(task.seed, &format!("dropout.{}", task.task_id));
    let mut replay_rng = Rng::derive(task.seed, &format!("replaydraw.{}", task.task_id));
    let mut census: BTreeSet<String> = BTreeSet::new();
    let mut epoch_losses = Vec::with_capacity(task.epochs);
    let mut epoch_hashes = Vec::with_capacity(task.epochs);
    let mut adapter = adapter;

    for epoch in 0..task.epochs {
        let mut order: Vec<usize> = (0..shots.len()).collect();
        Rng::derive(task.seed, &format!("shuffle.{}.{epoch}", task.task_id)).shuffle(&mut order);
        let mut patch_rng = Rng::derive(task.seed, &format!("patch.{}.{epoch}", task.task_id));
        let mut total = 0.0;
        let mut batches = 0.0;

        for chunk in order.chunks(task.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut leaves = Leaves::new();
            leaves.bind_store(&mut tape, "backbone.", backbone, true);
            leaves.bind_store(&mut tape, "head.", head, true);
            let bind = adapter
                .as_deref()
                .map(|a| LoraBind::bind(a, &mut tape, &mut leaves, true));

            // task loss over the batch
            let mut sample_losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = data.get_train(&shots[idx], method_name, &task.task_id)?;
                let (vol, label) = train_patch(sample, task.kind, patch, &mut patch_rng)?;
                let x = tape.leaf(&vol, false);
                let loss = match (task.kind, label) {
                    (TaskKind::Segmentation, Label::Mask(mask)) => {
                        let logits = unet.forward_seg(
                            &mut tape,
                            &leaves,
                            x,
                            bind.as_ref(),
                            Some(&mut dropout_rng),
                        )?;
                        tape.dice_bce_loss(logits, &mask, LOSS_DICE_SMOOTH)?
                    }
                    (TaskKind::Regression, Label::Scalar(t)) => {
                        let out = unet.forward_reg(
                            &mut tape,
                            &leaves,
                            x,
                            bind.as_ref(),
                            Some(&mut dropout_rng),
                        )?;
                        tape.mse_loss(out, &Tensor::scalar(t))?
                    }
                    _ => unreachable!("label kind follows task kind"),
                };
                sample_losses.push((loss, x));
            }
            let mut task_loss = sample_losses[0].0;
            for &(l, _) in &sample_losses[1..] {
                task_loss = tape.add(task_loss, l)?;
            }
            let mut loss = tape.scale(task_loss, 1.0 / sample_losses.len() as f64);

            // method-specific terms
            match ctx {
                MethodCtx::Plain => {}
                MethodCtx::Ewc { anchor, fisher, lambda } => {
                    for (name, anchor_data) in anchor.iter() {
                        let leaf = leaves.id(&format!("backbone.{name}"))?;
                        let f = fisher
                            .get(name)
                            .ok_or_else(|| Error::MissingGradient(format!("fisher[{name}]")))?;
                        let pen =
                            tape.quad_penalty(leaf, anchor_data, f, lambda / 2.0)?;
                        loss = tape.add(loss, pen)?;
                    }
                }
                MethodCtx::Lwf { snapshot, weight } => {
                    let mut distill_terms = Vec::with_capacity(sample_losses.len());
                    for &(_, x) in &sample_losses {
                        let old = snapshot_features(unet, snapshot, tape.value(x).clone())?;
                        let new_feats =
                            unet.forward_encoder(&mut tape, &leaves, x, bind.as_ref(), None)?;
                        distill_terms.push(tape.mse_loss(new_feats, &old)?);
                    }
                    let mut distill = distill_terms[0];
                    for &d in &distill_terms[1..] {
                        distill = tape.add(distill, d)?;
                    }
                    let distill =
                        tape.scale(distill, *weight / distill_terms.len() as f64);
                    loss = tape.add(loss, distill)?;
                }
                MethodCtx::Replay { buffer, weight, prior_head } => {
                    if !buffer.is_empty() {
                        let prior = prior_head.as_ref().ok_or(Error::SnapshotMissing)?;
                        if prior.names().any(|n| head.contains(n)) {
                            return Err(Error::Config(
                                "replay distillation needs distinct head kinds per task".into(),
                            ));
                        }
                        leaves.bind_store(&mut tape, "head.", prior, true);
                        let mut terms = Vec::new();
                        for _ in 0..task.batch_size.max(1) {
                            let entry = &buffer[replay_rng.below(buffer.len())];
                            let x = tape.leaf(&entry.input, false);
                            let current = match entry.kind {
                                TaskKind::Segmentation => {
                                    unet.forward_seg(&mut tape, &leaves, x, None, None)?
                                }
                                TaskKind::Regression => {
                                    unet.forward_reg(&mut tape, &leaves, x, None, None)?
                                }
                            };
                            terms.push(tape.mse_loss(current, &entry.stored_output)?);
                        }
                        let mut replay = terms[0];
                        for &t in &terms[1..] {
                            replay = tape.add(replay, t)?;
                        }
                        let replay = tape.scale(replay, *weight / terms.len() as f64);
                        loss = tape.add(loss, replay)?;
                    }
                }
            }

            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "{method_name} on task '{}'",
                    task.task_id
                )));
            }
            tape.backward(loss)?;
            leaves.write_grads_back(&tape, "backbone.", backbone)?;
            leaves.write_grads_back(&tape, "head.", head)?;
            if let Some(a) = adapter.as_deref_mut() {
                leaves.write_grads_back(&tape, "adapter.", &mut a.params)?;
            }
            for name in leaves.nonzero_grad_census(&tape) {
                census.insert(name);
            }

            let mut groups: Vec<(&str, &mut ParamStore)> =
                vec![("backbone.", backbone), ("head.", head)];
            if let Some(a) = adapter.as_deref_mut() {
                groups.push(("adapter.", &mut a.params));
            }
            adam.step_groups(&mut groups)?;

            total += loss_value;
            batches += 1.0;
        }
        epoch_losses.push(total / batches);
        let mut h = backbone.store_hash();
        h = h.rotate_left(7) ^ head.store_hash();
        if let Some(a) = adapter.as_deref() {
            h = h.rotate_left(7) ^ a.params.store_hash();
        }
        epoch_hashes.push(h);
    }

    Ok(TaskTrainOutput {
        epoch_losses,
        epoch_hashes,
        census: census.into_iter().collect(),
    })
}

/// Encoder bottleneck vector under a snapshot of the model, detached.
fn snapshot_features(unet: &UNet, snapshot: &ParamStore, input: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut leaves = Leaves::new();
    leaves.bind_store(&mut tape, "backbone.", snapshot, false);
    let x = tape.leaf(&input, false);
    let f = unet.forward_encoder(&mut tape, &leaves, x, None, None)?;
    Ok(tape.value(f).clone())
}

/// Diagonal empirical Fisher: mean over samples of squared task-loss
/// gradients, per backbone parameter.
pub fn compute_fisher_diag(
    unet: &UNet,
    backbone: &ParamStore,
    head: &ParamStore,
    task: &TaskSpec,
    data: &TaskData,
    n_samples: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let shots = few_shot_sample(&data.manifest, task.n_shot, task.seed)?;
    let use_n = n_samples.min(shots.len());
    if use_n == 0 {
        return Err(Error::EmptyData("fisher samples"));
    }
    let patch = unet.cfg.patch_size;
    let mut rng = Rng::derive(task.seed, &format!("fisher.{}", task.task_id));
    let mut fisher: BTreeMap<String, Vec<f64>> = backbone
        .iter()
        .map(|(name, p)| (name.to_string(), vec![0.0; p.tensor.numel()]))
        .collect();
    let mut scratch = backbone.clone();
    for id in shots.iter().take(use_n) {
        let sample = data.get_train(id, "ewc-fisher", &task.task_id)?;
        let (vol, label) = train_patch(sample, task.kind, patch, &mut rng)?;
        let mut tape = Tape::new();
        let mut leaves = Leaves::new();
        leaves.bind_store(&mut tape, "backbone.", &scratch, true);
        leaves.bind_store(&mut tape, "head.", head, true);
        let x = tape.leaf(&vol, false);
        let loss = match (task.kind, label) {
            (TaskKind::Segmentation, Label::Mask(mask)) => {
                let logits = unet.forward_seg(&mut tape, &leaves, x, None, None)?;
                tape.dice_bce_loss(logits, &mask, LOSS_DICE_SMOOTH)?
            }
            (TaskKind::Regression, Label::Scalar(t)) => {
                let out = unet.forward_reg(&mut tape, &leaves, x, None, None)?;
                tape.mse_loss(out, &Tensor::scalar(t))?
            }
            _ => unreachable!(),
        };
        tape.backward(loss)?;
        leaves.write_grads_back(&tape, "backbone.", &mut scratch)?;
        for (name, p) in scratch.iter() {
            if let Some(g) = &p.tensor.grad {
                let acc = fisher.get_mut(name).expect("same keys");
                for (slot, gv) in acc.iter_mut().zip(g) {
                    *slot += gv * gv;
                }
            }
        }
        scratch.zero_grads();
    }
    for acc in fisher.values_mut() {
        for v in acc.iter_mut() {
            *v /= use_n as f64;
        }
    }
    Ok(fisher)
}

// ---------------------------------------------------------------------------
// Schedule orchestration.

/// Run a task sequence with the configured method.
///
/// After each task i, every task j <= i is evaluated on its validation split
/// and recorded as R[i][j]. Artifacts (adapter/head/checkpoint, metrics.json)
/// are persisted under `out_dir/<task_id>/`.
pub fn run_schedule(
    unet: &UNet,
    pretrained: &ParamStore,
    schedule: &Schedule,
    registry: &DatasetRegistry,
    out_dir: &Path,
) -> Result<ScheduleOutcome> {
    let method = &schedule.method;
    let mut backbone = pretrained.clone();
    let mut heads: BTreeMap<String, ParamStore> = BTreeMap::new();
    let mut adapters: BTreeMap<String, LoRAAdapter> = BTreeMap::new();
    let mut matrix = ResultMatrix::new();
    let mut outcome_counts = Vec::new();
    let mut outcome_losses = Vec::new();
    let mut outcome_hashes = Vec::new();
    let mut outcome_census = Vec::new();
    let mut outcome_dirs = Vec::new();
    let mut prior_train_reads = Vec::new();

    // EWC state, established after the first task.
    let mut ewc_anchor: Option<BTreeMap<String, Vec<f64>>> = None;
    let mut ewc_fisher: Option<BTreeMap<String, Vec<f64>>> = None;
    // Replay buffer carried forward from the previous task.
    let mut replay_buffer: Vec<ReplayEntry> = Vec::new();
    let mut replay_head_task: Option<String> = None;

    for (pos, task) in schedule.tasks.iter().enumerate() {
        let i = pos + 1;
        let data = registry.get(&task.task_id)?;

        // Revoke prior-task training handles before this task begins.
        // Replay keeps its handles per protocol but only ever reads the
        // buffer it filled while the previous task was still current.
        if !method.is_replay() {
            for prior in &schedule.tasks[..pos] {
                registry.get(&prior.task_id)?.revoke();
            }
        }
        let reads_before: usize = schedule.tasks[..pos]
            .iter()
            .map(|t| registry.get(&t.task_id).map(|d| d.train_reads()).unwrap_or(0))
            .sum();

        // Per-method setup: freeze policy, head, adapter, loss context.
        let head_seed = Rng::derive(task.seed, &format!("head.{}", task.task_id)).next_u64();
        heads.insert(task.task_id.clone(), make_head(task.kind, unet, head_seed));
        let mut task_adapter: Option<LoRAAdapter> = None;
        let mut snapshot: Option<ParamStore> = None;

        match method {
            MethodConfig::Lora(cfg) => {
                backbone.freeze_all();
                let cfg = lora_config_for(task.kind, cfg);
                task_adapter =
                    Some(create_adapter(&backbone, &cfg, &task.task_id, task.seed)?);
            }
            MethodConfig::SeqLinear => match task.kind {
                TaskKind::Segmentation => backbone.set_trainable(&["decoder."])?,
                TaskKind::Regression => backbone.freeze_all(),
            },
            MethodConfig::SeqFt | MethodConfig::Ewc { .. } | MethodConfig::Replay { .. } => {
                backbone.set_trainable(&[""])?;
            }
            MethodConfig::Lwf { .. } => {
                backbone.set_trainable(&[""])?;
                if pos > 0 {
                    snapshot = Some(backbone.clone());
                }
            }
        }

        let ctx = match method {
            MethodConfig::Ewc { lambda, .. } if pos > 0 => MethodCtx::Ewc {
                anchor: ewc_anchor.as_ref().expect("anchor recorded after task 1"),
                fisher: ewc_fisher.as_ref().expect("fisher recorded after task 1"),
                lambda: *lambda,
            },
            MethodConfig::Lwf { distill_weight } if pos > 0 => MethodCtx::Lwf {
                snapshot: snapshot.as_ref().expect("snapshot taken above"),
                weight: *distill_weight,
            },
            MethodConfig::Replay { distill_weight, .. } if pos > 0 => MethodCtx::Replay {
                buffer: &replay_buffer,
                weight: *distill_weight,
                prior_head: replay_head_task.as_ref().and_then(|t| heads.get(t)).cloned(),
            },
            _ => MethodCtx::Plain,
        };

        // hashes that must survive this task untouched
        let frozen_before: BTreeMap<String, u64> = backbone
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, p)| (n.to_string(), p.tensor.content_hash()))
            .collect();
        let prior_adapter_hashes: BTreeMap<String, u64> =
            adapters.iter().map(|(t, a)| (t.clone(), a.params.store_hash())).collect();

        // the current head trains; prior heads stay frozen in the map and
        // never enter the tape
        let mut current_head = heads.remove(&task.task_id).expect("inserted above");
        let train_out = train_one_task(
            unet,
            &mut backbone,
            &mut current_head,
            task_adapter.as_mut(),
            task,
            data,
            method.name(),
            &ctx,
        )?;
        heads.insert(task.task_id.clone(), current_head);

        // freeze-contract check: frozen backbone entries are bit-identical
        for (name, before) in &frozen_before {
            let after = backbone.param_hash(name)?;
            if after != *before {
                return Err(Error::FrozenParamUpdate(name.clone()));
            }
        }
        for (tid, before) in &prior_adapter_hashes {
            if adapters[tid].params.store_hash() != *before {
                return Err(Error::FrozenParamUpdate(format!("adapter '{tid}'")));
            }
        }

        let reads_after: usize = schedule.tasks[..pos]
            .iter()
            .map(|t| registry.get(&t.task_id).map(|d| d.train_reads()).unwrap_or(0))
            .sum();
        prior_train_reads.push(reads_after - reads_before);

        // EWC bookkeeping after the first task
        if let MethodConfig::Ewc { fisher_batches, .. } = method {
            if pos == 0 {
                ewc_anchor = Some(
                    backbone
                        .iter()
                        .map(|(n, p)| (n.to_string(), p.tensor.data().to_vec()))
                        .collect(),
                );
                let n = if *fisher_batches == 0 { task.n_shot } else { *fisher_batches };
                ewc_fisher = Some(compute_fisher_diag(
                    unet,
                    &backbone,
                    &heads[&task.task_id],
                    task,
                    data,
                    n,
                )?);
            }
        }

        // Replay bookkeeping: fill the buffer from this task's few-shot
        // samples while its data handle is still live.
        if let MethodConfig::Replay { buffer_size, .. } = method {
            let cap = if *buffer_size == 0 { task.n_shot / 2 } else { *buffer_size };
            replay_buffer = fill_replay_buffer(
                unet,
                &backbone,
                &heads[&task.task_id],
                task,
                data,
                cap.min(task.n_shot),
                method.name(),
            )?;
            replay_head_task = Some(task.task_id.clone());
        }

        // persist artifacts
        let task_dir = out_dir.join(&task.task_id);
        std::fs::create_dir_all(&task_dir)?;
        if let Some(adapter) = &task_adapter {
            save_adapter(adapter, &task_dir.join("adapter.fgla"))?;
        }
        save_checkpoint(&heads[&task.task_id], &task_dir.join("head.fgls"))?;
        if task_adapter.is_none() {
            save_checkpoint(&backbone, &task_dir.join("checkpoint.fgls"))?;
        }

        let count = count_trainable(
            &backbone,
            task_adapter.as_ref(),
            Some(&heads[&task.task_id]),
        );
        outcome_counts.push(count);

        if let Some(adapter) = task_adapter.take() {
            adapters.insert(task.task_id.clone(), adapter);
        }
        heads.get_mut(&task.task_id).expect("inserted above").freeze_all();

        // evaluate all tasks seen so far
        for (jpos, tj) in schedule.tasks[..=pos].iter().enumerate() {
            let j = jpos + 1;
            let dj = registry.get(&tj.task_id)?;
            let value = evaluate_task(
                unet,
                &backbone,
                adapters.get(&tj.task_id),
                &heads[&tj.task_id],
                tj,
                dj,
            )?;
            matrix.set(i, j, value);
            if j == i {
                let record = MetricsJson {
                    task_id: tj.task_id.clone(),
                    metric_kind: value.kind,
                    value: value.value,
                    n_samples: dj.manifest.val.len(),
                    seed: tj.seed,
                };
                std::fs::write(
                    task_dir.join("metrics.json"),
                    serde_json::to_vec_pretty(&record)?,
                )?;
            }
        }

        outcome_losses.push(train_out.epoch_losses);
        outcome_hashes.push(train_out.epoch_hashes);
        outcome_census.push(train_out.census);
        outcome_dirs.push(task_dir);
    }

    Ok(ScheduleOutcome {
        matrix,
        task_ids: schedule.tasks.iter().map(|t| t.task_id.clone()).collect(),
        kinds: schedule.tasks.iter().map(|t| t.kind.metric()).collect(),
        counts: outcome_counts,
        epoch_losses: outcome_losses,
        epoch_hashes: outcome_hashes,
        census: outcome_census,
        prior_train_reads,
        artifact_dirs: outcome_dirs,
    })
}

/// Store up to `cap` training patches with the just-trained model's outputs.
fn fill_replay_buffer(
    unet: &UNet,
    backbone: &ParamStore,
    head: &ParamStore,
    task: &TaskSpec,
    data: &TaskData,
    cap: usize,
    method_name: &str,
) -> Result<Vec<ReplayEntry>> {
    let shots = few_shot_sample(&data.manifest, task.n_shot, task.seed)?;
    let mut rng = Rng::derive(task.seed, &format!("replaybuf.{}", task.task_id));
    let mut picks: Vec<usize> = (0..shots.len()).collect();
    rng.shuffle(&mut picks);
    picks.truncate(cap);
    picks.sort_unstable();
    let mut buffer = Vec::with_capacity(picks.len());
    for idx in picks {
        let sample = data.get_train(&shots[idx], method_name, &task.task_id)?;
        let (vol, _) = train_patch(sample, task.kind, unet.cfg.patch_size, &mut rng)?;
        let mut tape = Tape::new();
        let mut leaves = Leaves::new();
        leaves.bind_store(&mut tape, "backbone.", backbone, false);
        leaves.bind_store(&mut tape, "head.", head, false);
        let x = tape.leaf(&vol, false);
        let out = match task.kind {
            TaskKind::Segmentation => unet.forward_seg(&mut tape, &leaves, x, None, None)?,
            TaskKind::Regression => unet.forward_reg(&mut tape, &leaves, x, None, None)?,
        };
        buffer.push(ReplayEntry {
            input: vol,
            stored_output: tape.value(out).clone(),
            kind: task.kind,
        });
    }
    Ok(buffer)
}

/// Reload a task's persisted artifacts for inference or recomputation.
pub fn load_task_artifacts(
    task_dir: &Path,
    backbone_for_validation: &ParamStore,
) -> Result<(Option<LoRAAdapter>, ParamStore)> {
    let head_path = task_dir.join("head.fgls");
    if !head_path.exists() {
        return Err(Error::MissingArtifact(format!("{}", head_path.display())));
    }
    let head = crate::backbone::checkpoint::load_checkpoint(&head_path)?;
    let adapter_path = task_dir.join("adapter.fgla");
    let adapter = if adapter_path.exists() {
        Some(load_adapter(&adapter_path, backbone_for_validation)?)
    } else {
        None
    };
    Ok((adapter, head))
}
