//! Backbone: parameter store, checkpoint container, the 3D UNet, and the
//! reconstruction pretext used to pretrain it.

pub mod bind;
pub mod checkpoint;
pub mod pretrain;
pub mod store;
pub mod unet;

pub use bind::Leaves;
pub use checkpoint::{
    load_checkpoint, load_partial, save_checkpoint, Checkpoint, LoadReport, MAGIC_ADAPTER,
    MAGIC_STORE,
};
pub use pretrain::pretrain_backbone;
pub use store::{Param, ParamStore};
pub use unet::{
    layer_geometry, make_recon_head, make_reg_head, make_seg_head, LayerSpec, UNet, UNetConfig,
};
