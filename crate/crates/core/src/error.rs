use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch on axis {axis} in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{context}: expected rank-{expected} tensor, got rank {got}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("channel mismatch in {context}: weight expects {expected} input channels, input has {got}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("stride must be positive, got {0}")]
    NonPositiveStride(usize),

    #[error("kernel extent {kernel} exceeds padded input extent {padded} on axis {axis}")]
    KernelTooLarge {
        axis: usize,
        kernel: usize,
        padded: usize,
    },

    #[error("target mask must be binary (0/1); found {0} at index {1}")]
    NonBinaryTarget(f64, usize),

    #[error("backward requires a scalar loss; got {0} elements")]
    NonScalarLoss(usize),

    #[error("backward on a detached graph: loss is a leaf, not a recorded op")]
    DetachedGraph,

    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),

    #[error("attempt to update frozen parameter '{0}'")]
    FrozenParamUpdate(String),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("prefix '{0}' matches no parameters")]
    UnknownPrefix(String),

    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),

    #[error("LoRA rank {rank} exceeds min(C_in={c_in}, C_out={c_out}) for layer '{layer}'")]
    RankExceedsChannels {
        layer: String,
        rank: usize,
        c_in: usize,
        c_out: usize,
    },

    #[error("LoRA target set is empty")]
    EmptyTargetSet,

    #[error("adapter for layer '{layer}' expects rank {expected}, found {got}")]
    AdapterRankMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("merge refused: non-mergeable (k>1) layers: {0:?}")]
    MergeRefused(Vec<String>),

    #[error("adapter '{0}' was already merged")]
    AlreadyMerged(String),

    #[error("checkpoint magic mismatch: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),

    #[error("checkpoint checksum mismatch (file corrupt)")]
    ChecksumMismatch,

    #[error("checkpoint entry '{name}' has shape {ckpt:?}, store expects {store:?}")]
    CheckpointShapeMismatch {
        name: String,
        ckpt: Vec<usize>,
        store: Vec<usize>,
    },

    #[error("patch size {patch} exceeds volume extent {extent} on axis {axis}")]
    PatchTooLarge {
        axis: usize,
        patch: usize,
        extent: usize,
    },

    #[error("n_shot {n_shot} exceeds train split size {available}")]
    NotEnoughSubjects { n_shot: usize, available: usize },

    #[error("patch size {patch} not divisible by 2^(depth-1) = {required}")]
    PatchDepthMismatch { patch: usize, required: usize },

    #[error("data access violation: method '{method}' read revoked dataset '{task_id}'")]
    DataAccessViolation { method: String, task_id: String },

    #[error("dataset '{0}' not registered")]
    UnknownDataset(String),

    #[error("training diverged (non-finite loss) in {0}")]
    Divergence(String),

    #[error("snapshot model missing for distillation")]
    SnapshotMissing,

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("need at least {need} nonzero residuals, got {got}")]
    TooFewResiduals { need: usize, got: usize },

    #[error("all residuals are zero")]
    AllZeroResiduals,

    #[error("zero variance of paired differences")]
    ZeroVariance,

    #[error("missing result matrix cell R[{i}][{j}]")]
    MissingCell { i: usize, j: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
