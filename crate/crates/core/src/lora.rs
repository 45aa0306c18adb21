//! Low-rank adapters injected into conv layers as 1x1x1 convolution pairs.
//!
//! A frozen conv with weight W gains a parallel path
//! `scaling * B(A(dropout(x)))` where A: [r, C_in] and B: [C_out, r] act as
//! 1x1x1 convs on the channel dimension and `scaling = alpha / r`. B starts
//! at zero, so a fresh adapter changes nothing: the adapted network and the
//! frozen one are bit-identical until training moves B.
//!
//! For k=1 layers the pair is exactly a rank-r update of the kernel and can
//! be merged (`W' = W + scaling * B*A`); for k>1 layers the path runs on the
//! center-tap grid of the receptive field and merging is refused.

use std::path::Path;

use crate::backbone::bind::Leaves;
use crate::backbone::checkpoint::{Checkpoint, MAGIC_ADAPTER};
use crate::backbone::store::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Which backbone paths receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    EncoderOnly,
    EncoderAndDecoder,
}

impl Placement {
    pub fn as_str(&self) -> &'static str {
        match self {
            Placement::EncoderOnly => "encoder_only",
            Placement::EncoderAndDecoder => "encoder_and_decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder_only" => Ok(Placement::EncoderOnly),
            "encoder_and_decoder" => Ok(Placement::EncoderAndDecoder),
            other => Err(Error::Config(format!("unknown placement '{other}'"))),
        }
    }

    fn covers(&self, layer: &str) -> bool {
        match self {
            Placement::EncoderOnly => layer.starts_with("encoder."),
            Placement::EncoderAndDecoder => {
                layer.starts_with("encoder.") || layer.starts_with("decoder.")
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LoRAConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub placement: Placement,
    /// Optional name-prefix filters inside the placement scope; empty means
    /// every conv the placement covers.
    #[serde(default)]
    pub target_patterns: Vec<String>,
}

impl Default for LoRAConfig {
    fn default() -> Self {
        // rank 2 is the largest rank the desk-scale stem conv admits
        // (rank <= min(C_in, C_out) must hold for every targeted layer).
        LoRAConfig {
            rank: 2,
            alpha: 16.0,
            dropout_p: 0.1,
            placement: Placement::EncoderAndDecoder,
            target_patterns: Vec::new(),
        }
    }
}

impl LoRAConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn matches(&self, layer: &str) -> bool {
        self.placement.covers(layer)
            && (self.target_patterns.is_empty()
                || self.target_patterns.iter().any(|p| layer.starts_with(p.as_str())))
    }
}

/// Per-task adapter: one (A, B) pair per targeted conv layer.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub task_id: String,
    pub config: LoRAConfig,
    /// Entries `<layer>.a` with shape [r, C_in] and `<layer>.b` with
    /// shape [C_out, r].
    pub params: ParamStore,
    /// Targeted layer names, in store order.
    pub targets: Vec<String>,
    pub merged: bool,
}

/// Conv layers of a store: entries named `*.weight` with rank-5 tensors.
fn conv_layers_of(store: &ParamStore) -> Vec<(String, usize, usize, usize)> {
    store
        .iter()
        .filter_map(|(name, p)| {
            let layer = name.strip_suffix(".weight")?;
            let shape = p.tensor.shape();
            if shape.len() != 5 {
                return None;
            }
            Some((layer.to_string(), shape[1], shape[0], shape[2]))
        })
        .collect()
}

/// Build a fresh adapter against a backbone store.
///
/// A is seeded Gaussian with std 1/r, B is zero, so attaching the adapter
/// leaves every forward output unchanged until training starts.
pub fn create_adapter(
    store: &ParamStore,
    config: &LoRAConfig,
    task_id: &str,
    seed: u64,
) -> Result<LoRAAdapter> {
    let mut params = ParamStore::new();
    let mut targets = Vec::new();
    for (layer, c_in, c_out, _k) in conv_layers_of(store) {
        if !config.matches(&layer) {
            continue;
        }
        if config.rank > c_in.min(c_out) {
            return Err(Error::RankExceedsChannels {
                layer,
                rank: config.rank,
                c_in,
                c_out,
            });
        }
        let mut rng = Rng::derive(seed, &format!("lora.{task_id}.{layer}.a"));
        let std = 1.0 / config.rank as f64;
        params.insert(
            &format!("{layer}.a"),
            Tensor::gaussian(vec![config.rank, c_in], std, &mut rng),
        )?;
        params.insert(&format!("{layer}.b"), Tensor::zeros(vec![c_out, config.rank]))?;
        targets.push(layer);
    }
    if targets.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    targets.sort();
    Ok(LoRAAdapter {
        task_id: task_id.to_string(),
        config: config.clone(),
        params,
        targets,
        merged: false,
    })
}

/// The low-rank path on the tape: `scaling * B(A(dropout(x)))`, aligned with
/// a stride-s conv via its center-tap grid. Dropout is drawn from `rng` only
/// in training mode.
pub fn lora_branch(
    tape: &mut Tape,
    x: NodeId,
    a: NodeId,
    b: NodeId,
    scaling: f64,
    stride: usize,
    dropout_p: f64,
    training: bool,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let mut h = x;
    if training && dropout_p > 0.0 {
        if let Some(rng) = rng {
            h = tape.dropout(h, dropout_p, rng);
        }
    }
    let sub = tape.subsample(h, stride, 0)?;
    let lo = tape.conv1x1(sub, a)?;
    let hi = tape.conv1x1(lo, b)?;
    Ok(tape.scale(hi, scaling))
}

/// Frozen conv plus the low-rank path, as one call. Used directly by tests
/// and mirrored inside the UNet forward.
#[allow(clippy::too_many_arguments)]
pub fn adapted_conv_forward(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    padding: usize,
    a: NodeId,
    b: NodeId,
    scaling: f64,
    dropout_p: f64,
    training: bool,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let base = tape.conv3d(x, w, bias, stride, padding)?;
    let branch = lora_branch(tape, x, a, b, scaling, stride, dropout_p, training, rng)?;
    tape.add(base, branch)
}

/// Adapter bound to a tape for one pass.
pub struct LoraBind<'a> {
    pub adapter: &'a LoRAAdapter,
    pub training: bool,
}

impl<'a> LoraBind<'a> {
    /// Register adapter parameters as tape leaves under the `adapter.` prefix.
    pub fn bind(
        adapter: &'a LoRAAdapter,
        tape: &mut Tape,
        leaves: &mut Leaves,
        training: bool,
    ) -> Self {
        leaves.bind_store(tape, "adapter.", &adapter.params, training);
        LoraBind { adapter, training }
    }

    pub fn targets(&self, layer: &str) -> bool {
        self.adapter.targets.iter().any(|t| t == layer)
    }

    pub fn branch(
        &self,
        tape: &mut Tape,
        leaves: &Leaves,
        layer: &str,
        x: NodeId,
        stride: usize,
        rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        let a = leaves.id(&format!("adapter.{layer}.a"))?;
        let b = leaves.id(&format!("adapter.{layer}.b"))?;
        lora_branch(
            tape,
            x,
            a,
            b,
            self.adapter.config.scaling(),
            stride,
            self.adapter.config.dropout_p,
            self.training,
            rng,
        )
    }
}

/// Merge the adapter into a copy of the store: for each k=1 target,
/// `W += scaling * B*A` lands on the single kernel tap. Refused outright if
/// any target has k>1, and refused again after a successful merge.
pub fn merge_adapter(store: &ParamStore, adapter: &mut LoRAAdapter) -> Result<ParamStore> {
    if adapter.merged {
        return Err(Error::AlreadyMerged(adapter.task_id.clone()));
    }
    let non_mergeable: Vec<String> = adapter
        .targets
        .iter()
        .filter(|layer| {
            store
                .tensor(&format!("{layer}.weight"))
                .map(|t| t.shape()[2] != 1)
                .unwrap_or(true)
        })
        .cloned()
        .collect();
    if !non_mergeable.is_empty() {
        return Err(Error::MergeRefused(non_mergeable));
    }
    let mut merged = store.clone();
    let scaling = adapter.config.scaling();
    let r = adapter.config.rank;
    for layer in &adapter.targets {
        let a = adapter.params.tensor(&format!("{layer}.a"))?;
        let b = adapter.params.tensor(&format!("{layer}.b"))?;
        let c_in = a.shape()[1];
        let c_out = b.shape()[0];
        let w = &mut merged.get_mut(&format!("{layer}.weight"))?.tensor;
        let wdata = w.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                let mut acc = 0.0;
                for j in 0..r {
                    acc += b.data()[co * r + j] * a.data()[j * c_in + ci];
                }
                wdata[co * c_in + ci] += scaling * acc;
            }
        }
    }
    merged.set_metadata("merged_adapter", &adapter.task_id);
    adapter.merged = true;
    Ok(merged)
}

/// Exact trainable-parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableCount {
    pub adapter_params: usize,
    pub head_params: usize,
    pub backbone_params: usize,
}

impl TrainableCount {
    pub fn fraction(&self) -> f64 {
        if self.backbone_params == 0 {
            return 0.0;
        }
        (self.adapter_params + self.head_params) as f64 / self.backbone_params as f64
    }
}

pub fn count_trainable(
    backbone: &ParamStore,
    adapter: Option<&LoRAAdapter>,
    head: Option<&ParamStore>,
) -> TrainableCount {
    TrainableCount {
        adapter_params: adapter.map_or(0, |a| a.params.total_params()),
        head_params: head.map_or(0, |h| h.total_params()),
        backbone_params: backbone.total_params(),
    }
}

/// Render an integer with thousands separators, e.g. 46872 -> "46,872".
pub fn format_count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn save_adapter(adapter: &LoRAAdapter, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_store(&adapter.params);
    ckpt.metadata.insert("task_id".into(), adapter.task_id.clone());
    ckpt.metadata.insert("rank".into(), adapter.config.rank.to_string());
    ckpt.metadata.insert("alpha".into(), adapter.config.alpha.to_string());
    ckpt.metadata.insert("dropout_p".into(), adapter.config.dropout_p.to_string());
    ckpt.metadata.insert("placement".into(), adapter.config.placement.as_str().into());
    ckpt.metadata.insert("patterns".into(), adapter.config.target_patterns.join(";"));
    ckpt.metadata.insert("merged".into(), adapter.merged.to_string());
    let bytes = ckpt.to_bytes(MAGIC_ADAPTER);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load an adapter and validate it against the backbone it will attach to.
pub fn load_adapter(path: &Path, backbone: &ParamStore) -> Result<LoRAAdapter> {
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes, MAGIC_ADAPTER)?;
    let meta = |key: &str| -> Result<&String> {
        ckpt.metadata
            .get(key)
            .ok_or_else(|| Error::Config(format!("adapter file missing metadata '{key}'")))
    };
    let task_id = meta("task_id")?.clone();
    let rank: usize = meta("rank")?
        .parse()
        .map_err(|_| Error::Config("bad rank metadata".into()))?;
    let alpha: f64 = meta("alpha")?
        .parse()
        .map_err(|_| Error::Config("bad alpha metadata".into()))?;
    let dropout_p: f64 = meta("dropout_p")?
        .parse()
        .map_err(|_| Error::Config("bad dropout metadata".into()))?;
    let placement = Placement::parse(meta("placement")?)?;
    let patterns: Vec<String> = match ckpt.metadata.get("patterns") {
        Some(s) if !s.is_empty() => s.split(';').map(|p| p.to_string()).collect(),
        _ => Vec::new(),
    };
    let merged = meta("merged")?.parse().unwrap_or(false);
    let config = LoRAConfig { rank, alpha, dropout_p, placement, target_patterns: patterns };

    let params = ckpt.clone().into_store()?;
    // validate against the backbone: every expected target present with
    // shapes consistent with the stored rank
    let mut targets = Vec::new();
    for (layer, c_in, c_out, _k) in conv_layers_of(backbone) {
        if !config.matches(&layer) {
            continue;
        }
        let a = params.tensor(&format!("{layer}.a")).map_err(|_| {
            Error::Config(format!("adapter has no entry for targeted layer '{layer}'"))
        })?;
        let b = params.tensor(&format!("{layer}.b")).map_err(|_| {
            Error::Config(format!("adapter has no entry for targeted layer '{layer}'"))
        })?;
        if a.shape() != [rank, c_in] {
            return Err(Error::AdapterRankMismatch {
                layer,
                expected: rank,
                got: a.shape()[0],
            });
        }
        if b.shape() != [c_out, rank] {
            return Err(Error::AdapterRankMismatch {
                layer,
                expected: rank,
                got: b.shape()[1],
            });
        }
        targets.push(layer);
    }
    if targets.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    targets.sort();
    Ok(LoRAAdapter { task_id, config, params, targets, merged })
}
