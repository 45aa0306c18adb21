//! Reconstruction-pretext pretraining.
//!
//! Stand-in for a large pretrained checkpoint: the backbone learns to
//! reproduce the channel-mean of its input through a 1x1x1 reconstruction
//! head. After pretraining the head is discarded and the backbone is frozen
//! downstream, which is what makes "frozen pretrained backbone" meaningful
//! for every method built on top.

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::synth::zscore_normalize;
use crate::tensor::{Tape, Tensor};

use super::bind::Leaves;
use super::store::ParamStore;
use super::unet::{make_recon_head, UNet};

/// Train the backbone in place on voxelwise reconstruction.
/// Returns the mean training loss per epoch.
pub fn pretrain_backbone(
    unet: &UNet,
    store: &mut ParamStore,
    volumes: &[Tensor],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(Error::EmptyData("pretraining volumes"));
    }
    let patch = unet.cfg.patch_size;
    let normalized: Vec<Tensor> = volumes.iter().map(zscore_normalize).collect();
    let mut head = make_recon_head(&unet.cfg, seed);
    let mut adam = AdamState::new(lr);
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        Rng::derive(seed, &format!("pretrain.shuffle.{epoch}")).shuffle(&mut order);
        let mut patch_rng = Rng::derive(seed, &format!("pretrain.patch.{epoch}"));
        let mut total = 0.0;
        let mut batches = 0.0;

        for chunk in order.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut leaves = Leaves::new();
            leaves.bind_store(&mut tape, "backbone.", store, true);
            leaves.bind_store(&mut tape, "head.", &head, true);

            let mut loss_ids = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let vol = &normalized[idx];
                let start = random_start(vol.shape(), patch, &mut patch_rng);
                let input = vol.crop(start, patch)?;
                let target = input.channel_mean()?;
                let x = tape.leaf(&input, false);
                let recon = unet.forward_recon(&mut tape, &leaves, x)?;
                loss_ids.push(tape.mse_loss(recon, &target)?);
            }
            let mut loss = loss_ids[0];
            for &l in &loss_ids[1..] {
                loss = tape.add(loss, l)?;
            }
            let loss = tape.scale(loss, 1.0 / loss_ids.len() as f64);
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence("pretraining".into()));
            }
            tape.backward(loss)?;
            leaves.write_grads_back(&tape, "backbone.", store)?;
            leaves.write_grads_back(&tape, "head.", &mut head)?;
            adam.step_groups(&mut [("backbone.", store), ("head.", &mut head)])?;
            total += loss_value;
            batches += 1.0;
        }
        epoch_losses.push(total / batches);
    }
    Ok(epoch_losses)
}

fn random_start(shape: &[usize], patch: usize, rng: &mut Rng) -> [usize; 3] {
    let mut start = [0usize; 3];
    for (axis, s) in start.iter_mut().enumerate() {
        let room = shape[axis + 1] - patch;
        *s = if room == 0 { 0 } else { rng.below(room + 1) };
    }
    start
}
