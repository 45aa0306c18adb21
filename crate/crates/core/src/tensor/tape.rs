//! Reverse-mode autodiff over a Wengert list.
//!
//! Nodes are appended in execution order, so the list is topological by
//! construction and one reverse sweep populates gradients for every
//! reachable `requires_grad` leaf. Gradient accumulation is plain summation
//! in index order; the backward pass is strictly sequential so training is
//! bit-reproducible.

use super::conv::{
    conv3d_forward, conv3d_grad_bias, conv3d_grad_input, conv3d_grad_kernel, ConvGeom,
};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    /// 1x1x1 convolution: per-voxel channel mixing with weight [C_out, C_in].
    ChannelMix { input: NodeId, weight: NodeId },
    /// Center-tap gather aligning a 1x1x1 branch with a strided/padded conv.
    Subsample { input: NodeId, stride: usize, offset: usize },
    Relu { input: NodeId },
    Upsample2x { input: NodeId },
    ConcatChannels { a: NodeId, b: NodeId, split: usize },
    GlobalAvgPool { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Dropout { input: NodeId, mask: Vec<f64> },
    DiceBce { logits: NodeId, target: Vec<f64>, smooth: f64, sig: Vec<f64> },
    Mse { pred: NodeId, target: Vec<f64> },
    /// coef * sum_i weights[i] * (x[i] - anchor[i])^2
    QuadPenalty { input: NodeId, anchor: Vec<f64>, weights: Vec<f64>, coef: f64 },
    Sum { input: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node is a requires_grad leaf or depends on one.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded forward computation; replayable in reverse for the chain rule.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sweep_finite(data: &[f64], what: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {what}"
    );
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        sweep_finite(value.data(), "forward op");
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register a leaf holding a copy of `tensor`'s data.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> NodeId {
        let mut value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor invariant");
        value.requires_grad = requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn check_spatial(a: &[usize], b: &[usize], context: &'static str) -> Result<()> {
        for axis in 1..4 {
            if a[axis] != b[axis] {
                return Err(Error::ShapeMismatch {
                    context,
                    axis,
                    expected: a[axis],
                    got: b[axis],
                });
            }
        }
        Ok(())
    }

    fn expect_rank(t: &Tensor, rank: usize, context: &'static str) -> Result<()> {
        if t.shape().len() != rank {
            return Err(Error::RankMismatch { context, expected: rank, got: t.shape().len() });
        }
        Ok(())
    }

    /// Direct 3D convolution, input [C_in,D,H,W], kernel [C_out,C_in,k,k,k].
    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::NonPositiveStride(stride));
        }
        let (ishape, kshape) = {
            let it = self.value(input);
            let kt = self.value(kernel);
            Self::expect_rank(it, 4, "conv3d input")?;
            Self::expect_rank(kt, 5, "conv3d kernel")?;
            (it.shape().to_vec(), kt.shape().to_vec())
        };
        if ishape[0] != kshape[1] {
            return Err(Error::ChannelMismatch {
                context: "conv3d",
                expected: kshape[1],
                got: ishape[0],
            });
        }
        if kshape[2] != kshape[3] || kshape[2] != kshape[4] {
            return Err(Error::ShapeMismatch {
                context: "conv3d kernel must be cubic",
                axis: 3,
                expected: kshape[2],
                got: kshape[3].max(kshape[4]),
            });
        }
        let k = kshape[2];
        for axis in 1..4 {
            let padded = ishape[axis] + 2 * padding;
            if k > padded {
                return Err(Error::KernelTooLarge { axis, kernel: k, padded });
            }
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [kshape[0]] {
                return Err(Error::ShapeMismatch {
                    context: "conv3d bias",
                    axis: 0,
                    expected: kshape[0],
                    got: bt.numel(),
                });
            }
        }
        let geom = ConvGeom::new(&ishape, &kshape, stride, padding);
        let mut out = vec![0.0; geom.out_numel()];
        {
            let it = self.value(input).data();
            let kt = self.value(kernel).data();
            let bt = bias.map(|b| self.value(b).data());
            conv3d_forward(it, kt, bt, &geom, &mut out);
        }
        let needs = self.needs(input)
            || self.needs(kernel)
            || bias.map_or(false, |b| self.needs(b));
        let value = Tensor::new(vec![geom.c_out, geom.od, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv3d { input, kernel, bias, geom }, needs))
    }

    /// 1x1x1 convolution (linear in the channel dimension), weight [C_out, C_in].
    pub fn conv1x1(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let (ishape, wshape) = {
            let it = self.value(input);
            let wt = self.value(weight);
            Self::expect_rank(it, 4, "conv1x1 input")?;
            Self::expect_rank(wt, 2, "conv1x1 weight")?;
            (it.shape().to_vec(), wt.shape().to_vec())
        };
        if wshape[1] != ishape[0] {
            return Err(Error::ChannelMismatch {
                context: "conv1x1",
                expected: wshape[1],
                got: ishape[0],
            });
        }
        let (c_in, c_out) = (ishape[0], wshape[0]);
        let vox = ishape[1] * ishape[2] * ishape[3];
        let mut out = vec![0.0; c_out * vox];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            for co in 0..c_out {
                for v in 0..vox {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        acc += w[co * c_in + ci] * x[ci * vox + v];
                    }
                    out[co * vox + v] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight);
        let value = Tensor::new(vec![c_out, ishape[1], ishape[2], ishape[3]], out)?;
        Ok(self.push(value, Op::ChannelMix { input, weight }, needs))
    }

    /// Gather the center-tap grid of a strided conv so a 1x1x1 branch can run
    /// in parallel with it. `offset` is the in-bounds center position of the
    /// first receptive field; identity when stride == 1 and offset == 0.
    pub fn subsample(&mut self, input: NodeId, stride: usize, offset: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::NonPositiveStride(stride));
        }
        let ishape = {
            let it = self.value(input);
            Self::expect_rank(it, 4, "subsample input")?;
            it.shape().to_vec()
        };
        if stride == 1 && offset == 0 {
            return Ok(input);
        }
        let (c, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let ext = |e: usize| (e - offset - 1) / stride + 1;
        let (od, oh, ow) = (ext(d), ext(h), ext(w));
        let mut out = vec![0.0; c * od * oh * ow];
        {
            let x = self.value(input).data();
            let mut i = 0;
            for ci in 0..c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[i] = x[ci * d * h * w
                                + (z * stride + offset) * h * w
                                + (y * stride + offset) * w
                                + (xx * stride + offset)];
                            i += 1;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![c, od, oh, ow], out)?;
        Ok(self.push(value, Op::Subsample { input, stride, offset }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = {
            let t = self.value(input);
            let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    /// Nearest-neighbor 2x upsampling: each voxel becomes a 2x2x2 block.
    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = {
            let it = self.value(input);
            Self::expect_rank(it, 4, "upsample input")?;
            it.shape().to_vec()
        };
        let (c, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * od * oh * ow];
        {
            let x = self.value(input).data();
            for ci in 0..c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[ci * od * oh * ow + (z * oh + y) * ow + xx] =
                                x[ci * d * h * w + ((z / 2) * h + y / 2) * w + xx / 2];
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![c, od, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2x { input }, needs))
    }

    /// Concatenate along the channel axis; spatial extents must match.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = {
            let at = self.value(a);
            let bt = self.value(b);
            Self::expect_rank(at, 4, "concat lhs")?;
            Self::expect_rank(bt, 4, "concat rhs")?;
            (at.shape().to_vec(), bt.shape().to_vec())
        };
        Self::check_spatial(&ashape, &bshape, "concat_channels")?;
        let mut out = Vec::with_capacity((ashape[0] + bshape[0]) * ashape[1..].iter().product::<usize>());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(
            vec![ashape[0] + bshape[0], ashape[1], ashape[2], ashape[3]],
            out,
        )?;
        Ok(self.push(value, Op::ConcatChannels { a, b, split: ashape[0] }, needs))
    }

    /// Mean over spatial sites: [C,D,H,W] -> [C].
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = {
            let it = self.value(input);
            Self::expect_rank(it, 4, "global_avg_pool input")?;
            it.shape().to_vec()
        };
        let vox = ishape[1] * ishape[2] * ishape[3];
        let mut out = vec![0.0; ishape[0]];
        {
            let x = self.value(input).data();
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for v in &x[c * vox..(c + 1) * vox] {
                    acc += v;
                }
                *o = acc / vox as f64;
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![ishape[0]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, needs))
    }

    /// Dense layer on a vector: weight [C_out, C_in], optional bias [C_out].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (ishape, wshape) = {
            let it = self.value(input);
            let wt = self.value(weight);
            Self::expect_rank(it, 1, "linear input")?;
            Self::expect_rank(wt, 2, "linear weight")?;
            (it.shape().to_vec(), wt.shape().to_vec())
        };
        if wshape[1] != ishape[0] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                axis: 1,
                expected: wshape[1],
                got: ishape[0],
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [wshape[0]] {
                return Err(Error::ShapeMismatch {
                    context: "linear bias",
                    axis: 0,
                    expected: wshape[0],
                    got: self.value(b).numel(),
                });
            }
        }
        let (c_out, c_in) = (wshape[0], wshape[1]);
        let mut out = vec![0.0; c_out];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            for (o, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..c_in {
                    acc += w[o * c_in + i] * x[i];
                }
                *slot = acc;
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (slot, bv) in out.iter_mut().zip(bd) {
                    *slot += bv;
                }
            }
        }
        let needs =
            self.needs(input) || self.needs(weight) || bias.map_or(false, |b| self.needs(b));
        let value = Tensor::new(vec![c_out], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ashape != bshape {
            return Err(Error::ShapeMismatch {
                context: "add",
                axis: 0,
                expected: self.value(a).numel(),
                got: self.value(b).numel(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(ashape, data)?;
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = {
            let t = self.value(input);
            let data = t.data().iter().map(|v| v * factor).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Inverted dropout: keep with probability 1-p, scale kept values by
    /// 1/(1-p). The mask is drawn from `rng` once and saved for backward.
    pub fn dropout(&mut self, input: NodeId, p: f64, rng: &mut Rng) -> NodeId {
        debug_assert!((0.0..1.0).contains(&p));
        let keep = 1.0 / (1.0 - p);
        let n = self.value(input).numel();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.next_f64() < p { 0.0 } else { keep }).collect();
        let value = {
            let t = self.value(input);
            let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let needs = self.needs(input);
        self.push(value, Op::Dropout { input, mask }, needs)
    }

    /// Soft Dice plus mean BCE, both on sigmoid(logits). Returns a scalar.
    ///
    /// dice = 1 - (2*sum(sig*t) + smooth) / (sum(sig) + sum(t) + smooth)
    /// bce  = mean over voxels of the stable logit form.
    pub fn dice_bce_loss(&mut self, logits: NodeId, target: &Tensor, smooth: f64) -> Result<NodeId> {
        {
            let lt = self.value(logits);
            if lt.shape() != target.shape() {
                return Err(Error::ShapeMismatch {
                    context: "dice_bce_loss",
                    axis: 0,
                    expected: lt.numel(),
                    got: target.numel(),
                });
            }
        }
        for (i, &t) in target.data().iter().enumerate() {
            if t != 0.0 && t != 1.0 {
                return Err(Error::NonBinaryTarget(t, i));
            }
        }
        let (total, sig) = {
            let z = self.value(logits).data();
            let t = target.data();
            let n = z.len() as f64;
            let sig: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let mut inter = 0.0;
            let mut ssum = 0.0;
            let mut tsum = 0.0;
            let mut bce = 0.0;
            for i in 0..z.len() {
                inter += sig[i] * t[i];
                ssum += sig[i];
                tsum += t[i];
                bce += z[i].max(0.0) - z[i] * t[i] + (1.0 + (-z[i].abs()).exp()).ln();
            }
            let dice = 1.0 - (2.0 * inter + smooth) / (ssum + tsum + smooth);
            (dice + bce / n, sig)
        };
        let needs = self.needs(logits);
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::DiceBce { logits, target: target.data().to_vec(), smooth, sig },
            needs,
        ))
    }

    /// Mean squared error against a constant target. Returns a scalar.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        {
            let pt = self.value(pred);
            if pt.shape() != target.shape() {
                return Err(Error::ShapeMismatch {
                    context: "mse_loss",
                    axis: 0,
                    expected: pt.numel(),
                    got: target.numel(),
                });
            }
        }
        let value = {
            let p = self.value(pred).data();
            let t = target.data();
            let mut acc = 0.0;
            for i in 0..p.len() {
                let d = p[i] - t[i];
                acc += d * d;
            }
            Tensor::scalar(acc / p.len() as f64)
        };
        let needs = self.needs(pred);
        Ok(self.push(value, Op::Mse { pred, target: target.data().to_vec() }, needs))
    }

    /// coef * sum_i weights[i] * (x[i] - anchor[i])^2, as a scalar node.
    pub fn quad_penalty(
        &mut self,
        input: NodeId,
        anchor: &[f64],
        weights: &[f64],
        coef: f64,
    ) -> Result<NodeId> {
        let n = self.value(input).numel();
        if anchor.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                context: "quad_penalty",
                axis: 0,
                expected: n,
                got: anchor.len().min(weights.len()),
            });
        }
        let value = {
            let x = self.value(input).data();
            let mut acc = 0.0;
            for i in 0..n {
                let d = x[i] - anchor[i];
                acc += weights[i] * d * d;
            }
            Tensor::scalar(coef * acc)
        };
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::QuadPenalty {
                input,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
                coef,
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = {
            let mut acc = 0.0;
            for v in self.value(input).data() {
                acc += v;
            }
            Tensor::scalar(acc)
        };
        let needs = self.needs(input);
        self.push(value, Op::Sum { input }, needs)
    }

    /// Reverse sweep from a scalar loss. Clears previous gradients first, so
    /// repeated calls are independent and bit-identical.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).numel()));
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Err(Error::DetachedGraph);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked");
            sweep_finite(&grad, "backward op");
            self.propagate(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        // Unreached requires_grad leaves get an explicit zero gradient.
        for node in &mut self.nodes {
            if node.grad.is_none()
                && node.value.requires_grad
                && matches!(node.op, Op::Leaf)
            {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) -> &mut Vec<f64> {
        let n = self.nodes[id.0].value.numel();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Ops are decomposed here by taking needed context out of the node.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, geom } => {
                if self.needs(*kernel) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gk = self.ensure_grad(*kernel);
                    // grad buffers accumulate in place
                    let mut tmp = std::mem::take(gk);
                    conv3d_grad_kernel(&x, g, geom, &mut tmp);
                    *self.ensure_grad(*kernel) = tmp;
                }
                if self.needs(*input) {
                    let k = self.nodes[kernel.0].value.data().to_vec();
                    let mut tmp = std::mem::take(self.ensure_grad(*input));
                    conv3d_grad_input(&k, g, geom, &mut tmp);
                    *self.ensure_grad(*input) = tmp;
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut tmp = std::mem::take(self.ensure_grad(*b));
                        conv3d_grad_bias(g, geom, &mut tmp);
                        *self.ensure_grad(*b) = tmp;
                    }
                }
            }
            Op::ChannelMix { input, weight } => {
                let ishape = self.nodes[input.0].value.shape().to_vec();
                let wshape = self.nodes[weight.0].value.shape().to_vec();
                let (c_in, c_out) = (ishape[0], wshape[0]);
                let vox = ishape[1] * ishape[2] * ishape[3];
                if self.needs(*weight) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gw = self.ensure_grad(*weight);
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            let mut acc = 0.0;
                            for v in 0..vox {
                                acc += g[co * vox + v] * x[ci * vox + v];
                            }
                            gw[co * c_in + ci] += acc;
                        }
                    }
                }
                if self.needs(*input) {
                    let w = self.nodes[weight.0].value.data().to_vec();
                    let gx = self.ensure_grad(*input);
                    for ci in 0..c_in {
                        for v in 0..vox {
                            let mut acc = 0.0;
                            for co in 0..c_out {
                                acc += g[co * vox + v] * w[co * c_in + ci];
                            }
                            gx[ci * vox + v] += acc;
                        }
                    }
                }
            }
            Op::Subsample { input, stride, offset } => {
                if self.needs(*input) {
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let oshape = self.nodes[i].value.shape().to_vec();
                    let (d, h, w) = (ishape[1], ishape[2], ishape[3]);
                    let (od, oh, ow) = (oshape[1], oshape[2], oshape[3]);
                    let gx = self.ensure_grad(*input);
                    let mut gi = 0;
                    for c in 0..ishape[0] {
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    gx[c * d * h * w
                                        + (z * stride + offset) * h * w
                                        + (y * stride + offset) * w
                                        + (xx * stride + offset)] += g[gi];
                                    gi += 1;
                                }
                            }
                        }
                    }
                    debug_assert_eq!(gi, g.len());
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gx = self.ensure_grad(*input);
                    for (j, gv) in g.iter().enumerate() {
                        if x[j] > 0.0 {
                            gx[j] += gv;
                        }
                    }
                }
            }
            Op::Upsample2x { input } => {
                if self.needs(*input) {
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let (c, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
                    let gx = self.ensure_grad(*input);
                    for ci in 0..c {
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    let mut acc = 0.0;
                                    for dz in 0..2 {
                                        for dy in 0..2 {
                                            for dx in 0..2 {
                                                acc += g[ci * od * oh * ow
                                                    + ((2 * z + dz) * oh + 2 * y + dy) * ow
                                                    + 2 * xx
                                                    + dx];
                                            }
                                        }
                                    }
                                    gx[ci * d * h * w + (z * h + y) * w + xx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b, split } => {
                let vox: usize = self.nodes[i].value.shape()[1..].iter().product();
                let cut = split * vox;
                if self.needs(*a) {
                    let ga = self.ensure_grad(*a);
                    for (slot, gv) in ga.iter_mut().zip(&g[..cut]) {
                        *slot += gv;
                    }
                }
                if self.needs(*b) {
                    let gb = self.ensure_grad(*b);
                    for (slot, gv) in gb.iter_mut().zip(&g[cut..]) {
                        *slot += gv;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let vox = ishape[1] * ishape[2] * ishape[3];
                    let gx = self.ensure_grad(*input);
                    for c in 0..ishape[0] {
                        let share = g[c] / vox as f64;
                        for slot in &mut gx[c * vox..(c + 1) * vox] {
                            *slot += share;
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let wshape = self.nodes[weight.0].value.shape().to_vec();
                let (c_out, c_in) = (wshape[0], wshape[1]);
                if self.needs(*weight) {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gw = self.ensure_grad(*weight);
                    for o in 0..c_out {
                        for ii in 0..c_in {
                            gw[o * c_in + ii] += g[o] * x[ii];
                        }
                    }
                }
                if self.needs(*input) {
                    let w = self.nodes[weight.0].value.data().to_vec();
                    let gx = self.ensure_grad(*input);
                    for ii in 0..c_in {
                        let mut acc = 0.0;
                        for o in 0..c_out {
                            acc += g[o] * w[o * c_in + ii];
                        }
                        gx[ii] += acc;
                    }
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = self.ensure_grad(*b);
                        for (slot, gv) in gb.iter_mut().zip(g) {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let ga = self.ensure_grad(*a);
                    for (slot, gv) in ga.iter_mut().zip(g) {
                        *slot += gv;
                    }
                }
                if self.needs(*b) {
                    let gb = self.ensure_grad(*b);
                    for (slot, gv) in gb.iter_mut().zip(g) {
                        *slot += gv;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    let gx = self.ensure_grad(*input);
                    for (slot, gv) in gx.iter_mut().zip(g) {
                        *slot += gv * factor;
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let gx = self.ensure_grad(*input);
                    for ((slot, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *slot += gv * m;
                    }
                }
            }
            Op::DiceBce { logits, target, smooth, sig } => {
                if self.needs(*logits) {
                    let up = g[0];
                    let n = sig.len() as f64;
                    let mut inter = 0.0;
                    let mut ssum = 0.0;
                    let mut tsum = 0.0;
                    for j in 0..sig.len() {
                        inter += sig[j] * target[j];
                        ssum += sig[j];
                        tsum += target[j];
                    }
                    let num = 2.0 * inter + smooth;
                    let den = ssum + tsum + smooth;
                    let gx = self.ensure_grad(*logits);
                    for j in 0..sig.len() {
                        let dsig = sig[j] * (1.0 - sig[j]);
                        let ddice = (num - 2.0 * target[j] * den) / (den * den);
                        let dbce = (sig[j] - target[j]) / n;
                        gx[j] += up * (ddice * dsig + dbce);
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.needs(*pred) {
                    let up = g[0];
                    let n = target.len() as f64;
                    let p = self.nodes[pred.0].value.data().to_vec();
                    let gx = self.ensure_grad(*pred);
                    for j in 0..target.len() {
                        gx[j] += up * 2.0 * (p[j] - target[j]) / n;
                    }
                }
            }
            Op::QuadPenalty { input, anchor, weights, coef } => {
                if self.needs(*input) {
                    let up = g[0];
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gx = self.ensure_grad(*input);
                    for j in 0..anchor.len() {
                        gx[j] += up * coef * 2.0 * weights[j] * (x[j] - anchor[j]);
                    }
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let up = g[0];
                    let gx = self.ensure_grad(*input);
                    for slot in gx.iter_mut() {
                        *slot += up;
                    }
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar-valued closure.
    fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let hi = f(&xp);
            xp[i] = x[i] - eps;
            let lo = f(&xp);
            xp[i] = x[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    fn assert_close_rel(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (a, b)) in got.iter().zip(want).enumerate() {
            let err = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(err < tol, "index {i}: got {a}, want {b}, rel err {err}");
        }
    }

    /// Six-nested-loop reference convolution, written before the optimized
    /// kernel and kept deliberately naive.
    fn conv3d_reference(
        input: &[f64],
        ishape: [usize; 4],
        kernel: &[f64],
        kshape: [usize; 5],
        bias: Option<&[f64]>,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let [c_in, d, h, w] = ishape;
        let [c_out, _, k, _, _] = kshape;
        let od = (d + 2 * padding - k) / stride + 1;
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; c_out * od * oh * ow];
        for co in 0..c_out {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - padding as isize;
                                        let iy = (y * stride + ky) as isize - padding as isize;
                                        let ix = (x * stride + kx) as isize - padding as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        acc += input[((ci * d + iz) * h + iy) * w + ix]
                                            * kernel[(((co * c_in + ci) * k + kz) * k + ky) * k
                                                + kx];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn leaf_from(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> NodeId {
        let t = Tensor::new(shape, data).unwrap();
        tape.leaf(&t, rg)
    }

    #[test]
    fn conv3d_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1, 2, 2, 2], vec![1.0; 8], false);
        let k = leaf_from(&mut tape, vec![1, 1, 1, 1, 1], vec![2.0], false);
        let y = tape.conv3d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0; 8]);
    }

    #[test]
    fn conv3d_sum_of_27_ones() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1, 3, 3, 3], vec![1.0; 27], false);
        let k = leaf_from(&mut tape, vec![1, 1, 3, 3, 3], vec![1.0; 27], false);
        let y = tape.conv3d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[27.0]);
    }

    #[test]
    fn conv3d_matches_reference_loops() {
        let mut rng = Rng::new(1234);
        let ishape = [2usize, 4, 4, 4];
        let kshape = [3usize, 2, 3, 3, 3];
        let input: Vec<f64> = (0..2 * 64).map(|_| rng.gaussian()).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.gaussian()).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
        let want = conv3d_reference(&input, ishape, &kernel, kshape, Some(&bias), 1, 1);

        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, ishape.to_vec(), input, false);
        let k = leaf_from(&mut tape, kshape.to_vec(), kernel, false);
        let b = leaf_from(&mut tape, vec![3], bias, false);
        let y = tape.conv3d(x, k, Some(b), 1, 1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv3d_strided_matches_reference() {
        let mut rng = Rng::new(77);
        let ishape = [2usize, 6, 6, 6];
        let kshape = [4usize, 2, 2, 2, 2];
        let input: Vec<f64> = (0..2 * 216).map(|_| rng.gaussian()).collect();
        let kernel: Vec<f64> = (0..4 * 2 * 8).map(|_| rng.gaussian()).collect();
        let want = conv3d_reference(&input, ishape, &kernel, kshape, None, 2, 0);
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, ishape.to_vec(), input, false);
        let k = leaf_from(&mut tape, kshape.to_vec(), kernel, false);
        let y = tape.conv3d(x, k, None, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3, 3, 3]);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_shape_errors() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2, 4, 4, 4], vec![0.0; 2 * 64], false);
        let k = leaf_from(&mut tape, vec![1, 3, 3, 3, 3], vec![0.0; 81], false);
        match tape.conv3d(x, k, None, 1, 0) {
            Err(Error::ChannelMismatch { expected, got, .. }) => {
                assert_eq!((expected, got), (3, 2));
            }
            other => panic!("expected channel mismatch, got {other:?}"),
        }
        let k1 = leaf_from(&mut tape, vec![1, 2, 1, 1, 1], vec![0.0; 2], false);
        assert!(matches!(tape.conv3d(x, k1, None, 0, 0), Err(Error::NonPositiveStride(0))));
        let kbig = leaf_from(&mut tape, vec![1, 2, 5, 5, 5], vec![0.0; 250], false);
        assert!(matches!(tape.conv3d(x, kbig, None, 1, 0), Err(Error::KernelTooLarge { .. })));
    }

    #[test]
    fn conv1x1_identity_and_zero() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..3 * 8).map(|_| rng.gaussian()).collect();
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![3, 2, 2, 2], data.clone(), false);
        let eye = leaf_from(
            &mut tape,
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            false,
        );
        let y = tape.conv1x1(x, eye).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
        let zeros = leaf_from(&mut tape, vec![2, 3], vec![0.0; 6], false);
        let z = tape.conv1x1(x, zeros).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1x1_matches_conv3d_k1() {
        let mut rng = Rng::new(6);
        let data: Vec<f64> = (0..3 * 27).map(|_| rng.gaussian()).collect();
        let w: Vec<f64> = (0..2 * 3).map(|_| rng.gaussian()).collect();
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![3, 3, 3, 3], data, false);
        let w2 = leaf_from(&mut tape, vec![2, 3], w.clone(), false);
        let w5 = leaf_from(&mut tape, vec![2, 3, 1, 1, 1], w, false);
        let a = tape.conv1x1(x, w2).unwrap();
        let b = tape.conv3d(x, w5, None, 1, 0).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![3, 2, 2, 2], vec![0.0; 24], false);
        let w = leaf_from(&mut tape, vec![2, 4], vec![0.0; 8], false);
        assert!(matches!(tape.conv1x1(x, w), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn upsample_replicates_and_conserves_mass() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1, 1, 1, 1], vec![5.0], false);
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0; 8]);

        let mut rng = Rng::new(8);
        let data: Vec<f64> = (0..2 * 27).map(|_| rng.gaussian()).collect();
        let sum_in: f64 = data.iter().sum();
        let x = leaf_from(&mut tape, vec![2, 3, 3, 3], data.clone(), false);
        let y = tape.upsample_nearest2x(x).unwrap();
        let sum_out: f64 = tape.value(y).data().iter().sum();
        assert!((sum_out - 8.0 * sum_in).abs() < 1e-9);

        // round trip: stride-2 decimation undoes the upsample exactly
        let back = tape.subsample(y, 2, 0).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
    }

    #[test]
    fn relu_pool_linear_trivials() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2], vec![-1.0, 2.0], false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let c = leaf_from(&mut tape, vec![2, 2, 2, 2], vec![3.5; 16], false);
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[3.5, 3.5]);

        let v = leaf_from(&mut tape, vec![3], vec![1.0, 2.0, 3.0], false);
        let eye = leaf_from(
            &mut tape,
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            false,
        );
        let zb = leaf_from(&mut tape, vec![3], vec![0.0; 3], false);
        let o = tape.linear(v, eye, Some(zb)).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_splits_channels() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1, 1, 1, 2], vec![1.0, 2.0], false);
        let b = leaf_from(&mut tape, vec![2, 1, 1, 2], vec![3.0, 4.0, 5.0, 6.0], false);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 1, 1, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dice_bce_perfect_prediction_is_tiny() {
        let mut tape = Tape::new();
        let z = leaf_from(&mut tape, vec![1, 2, 2, 2], vec![20.0; 8], false);
        let target = Tensor::new(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let l = tape.dice_bce_loss(z, &target, 1.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn dice_bce_hand_value() {
        // logits 0 on 8 voxels, target all ones, smooth 1:
        // bce = ln 2, dice = 1 - 9/13, total = 1.0008394882522529
        let mut tape = Tape::new();
        let z = leaf_from(&mut tape, vec![1, 2, 2, 2], vec![0.0; 8], false);
        let target = Tensor::new(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let l = tape.dice_bce_loss(z, &target, 1.0).unwrap();
        let want = std::f64::consts::LN_2 + (1.0 - 9.0 / 13.0);
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        assert!((want - 1.0008394882522529).abs() < 1e-15);
    }

    #[test]
    fn dice_bce_rejects_non_binary_target() {
        let mut tape = Tape::new();
        let z = leaf_from(&mut tape, vec![2], vec![0.0, 0.0], false);
        let target = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            tape.dice_bce_loss(z, &target, 1.0),
            Err(Error::NonBinaryTarget(v, 0)) if v == 0.5
        ));
    }

    #[test]
    fn dice_bce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(99);
        let logits: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
        let tmask: Vec<f64> = (0..16).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
        let target = Tensor::new(vec![1, 2, 2, 4], tmask).unwrap();

        let mut tape = Tape::new();
        let z = leaf_from(&mut tape, vec![1, 2, 2, 4], logits.clone(), true);
        let l = tape.dice_bce_loss(z, &target, 1.0).unwrap();
        tape.backward(l).unwrap();
        let got = tape.grad(z).unwrap().to_vec();

        let fd = finite_diff(
            |x| {
                let mut t = Tape::new();
                let z = leaf_from(&mut t, vec![1, 2, 2, 4], x.to_vec(), false);
                let l = t.dice_bce_loss(z, &target, 1.0).unwrap();
                t.value(l).data()[0]
            },
            &logits,
            1e-5,
        );
        assert_close_rel(&got, &fd, 1e-4);
    }

    #[test]
    fn mse_trivials_and_gradient() {
        let mut tape = Tape::new();
        let p = leaf_from(&mut tape, vec![3], vec![1.0, 2.0, 3.0], false);
        let t_same = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = tape.mse_loss(p, &t_same).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let p0 = leaf_from(&mut tape, vec![1], vec![0.0], false);
        let t2 = Tensor::new(vec![1], vec![2.0]).unwrap();
        let l = tape.mse_loss(p0, &t2).unwrap();
        assert_eq!(tape.value(l).data()[0], 4.0);

        let mut rng = Rng::new(3);
        let pred: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let tgt: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let target = Tensor::new(vec![6], tgt.clone()).unwrap();
        let mut tape = Tape::new();
        let p = leaf_from(&mut tape, vec![6], pred.clone(), true);
        let l = tape.mse_loss(p, &target).unwrap();
        tape.backward(l).unwrap();
        let got = tape.grad(p).unwrap().to_vec();
        // analytic 2(p-t)/n
        let want: Vec<f64> = pred.iter().zip(&tgt).map(|(a, b)| 2.0 * (a - b) / 6.0).collect();
        assert_close_rel(&got, &want, 1e-12);
        let fd = finite_diff(
            |x| {
                let mut t = Tape::new();
                let p = leaf_from(&mut t, vec![6], x.to_vec(), false);
                let l = t.mse_loss(p, &target).unwrap();
                t.value(l).data()[0]
            },
            &pred,
            1e-5,
        );
        assert_close_rel(&got, &fd, 1e-4);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_conv_weights_match_finite_differences() {
        let mut rng = Rng::new(11);
        let input: Vec<f64> = (0..2 * 64).map(|_| rng.gaussian()).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.gaussian()).collect();
        let tgt: Vec<f64> = (0..3 * 64).map(|_| rng.gaussian()).collect();
        let target = Tensor::new(vec![3, 4, 4, 4], tgt).unwrap();

        let run = |kdata: &[f64], want_grad: bool| {
            let mut tape = Tape::new();
            let x = leaf_from(&mut tape, vec![2, 4, 4, 4], input.clone(), false);
            let k = leaf_from(&mut tape, vec![3, 2, 3, 3, 3], kdata.to_vec(), want_grad);
            let y = tape.conv3d(x, k, None, 1, 1).unwrap();
            let l = tape.mse_loss(y, &target).unwrap();
            (tape, k, l)
        };
        let (mut tape, k, l) = run(&kernel, true);
        tape.backward(l).unwrap();
        let got = tape.grad(k).unwrap().to_vec();
        let fd = finite_diff(
            |kd| {
                let (t, _, l) = run(kd, false);
                t.value(l).data()[0]
            },
            &kernel,
            1e-5,
        );
        assert_close_rel(&got, &fd, 1e-4);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut rng = Rng::new(21);
        let input: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1, 2, 2, 2], input, true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2], vec![1.0, 2.0], true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(2))));
        let s = leaf_from(&mut tape, vec![1], vec![1.0], true);
        assert!(matches!(tape.backward(s), Err(Error::DetachedGraph)));
    }

    #[test]
    fn unreachable_leaves_get_zero_grad() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![2], vec![1.0, 2.0], true);
        let y = leaf_from(&mut tape, vec![2], vec![3.0, 4.0], true);
        let z = leaf_from(&mut tape, vec![2], vec![5.0, 6.0], false);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
        assert!(tape.grad(z).is_none());
    }

    #[test]
    fn dropout_zero_p_is_identity() {
        let mut rng = Rng::new(4);
        let data: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![16], data.clone(), false);
        let mut drop_rng = Rng::new(1);
        let y = tape.dropout(x, 0.0, &mut drop_rng);
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn quad_penalty_matches_hand_values() {
        let mut tape = Tape::new();
        // theta == anchor -> 0
        let x = leaf_from(&mut tape, vec![2], vec![1.0, -2.0], false);
        let l = tape.quad_penalty(x, &[1.0, -2.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        // F=1, theta-anchor=2, lambda=1: (1/2)*1*4 = 2
        let y = leaf_from(&mut tape, vec![1], vec![3.0], false);
        let l = tape.quad_penalty(y, &[1.0], &[1.0], 0.5).unwrap();
        assert_eq!(tape.value(l).data()[0], 2.0);
    }
}
