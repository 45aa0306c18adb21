//! 3D convolution kernels.
//!
//! The sequential and rayon variants share the same per-output-channel inner
//! routine, so they produce bit-identical results: parallelism only splits
//! the output across channels, never a floating-point reduction.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Output extent of a valid/padded strided convolution along one axis.
pub fn conv3d_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

/// Geometry of one conv3d call, precomputed by the caller.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvGeom {
            c_in: input_shape[0],
            d: input_shape[1],
            h: input_shape[2],
            w: input_shape[3],
            c_out: kernel_shape[0],
            k: kernel_shape[2],
            stride,
            padding,
            od: conv3d_out_extent(input_shape[1], kernel_shape[2], stride, padding),
            oh: conv3d_out_extent(input_shape[2], kernel_shape[2], stride, padding),
            ow: conv3d_out_extent(input_shape[3], kernel_shape[2], stride, padding),
        }
    }

    pub fn out_numel(&self) -> usize {
        self.c_out * self.od * self.oh * self.ow
    }
}

/// Valid kernel-tap range along one axis: taps whose input position
/// `o*stride + tap - padding` lands inside [0, extent).
#[inline]
fn tap_range(o: usize, stride: usize, padding: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = o * stride;
    let lo = padding.saturating_sub(base);
    let hi = (extent + padding - base).min(k);
    (lo, hi.max(lo))
}

/// One output channel: direct convolution over the receptive field.
///
/// The loop order (ci, kz, ky, kx) fixes the accumulation order per output
/// element; both execution modes go through here. Out-of-bounds taps are
/// excluded by range hoisting, which skips exactly the iterations the naive
/// boundary checks would, so values are unchanged.
fn conv3d_channel(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    co: usize,
    out_channel: &mut [f64],
) {
    let b = bias.map_or(0.0, |b| b[co]);
    let k3 = g.k * g.k * g.k;
    let kbase = co * g.c_in * k3;
    let plane = g.h * g.w;
    for od in 0..g.od {
        let (kz_lo, kz_hi) = tap_range(od, g.stride, g.padding, g.k, g.d);
        for oh in 0..g.oh {
            let (ky_lo, ky_hi) = tap_range(oh, g.stride, g.padding, g.k, g.h);
            for ow in 0..g.ow {
                let (kx_lo, kx_hi) = tap_range(ow, g.stride, g.padding, g.k, g.w);
                let xoff = ow * g.stride + kx_lo - g.padding;
                let span = kx_hi - kx_lo;
                let mut acc = b;
                for ci in 0..g.c_in {
                    let ibase = ci * g.d * plane;
                    let kcbase = kbase + ci * k3;
                    for kz in kz_lo..kz_hi {
                        let id = od * g.stride + kz - g.padding;
                        for ky in ky_lo..ky_hi {
                            let ih = oh * g.stride + ky - g.padding;
                            let irow = ibase + id * plane + ih * g.w + xoff;
                            let krow = kcbase + (kz * g.k + ky) * g.k + kx_lo;
                            let xs = &input[irow..irow + span];
                            let ks = &kernel[krow..krow + span];
                            for (x, kv) in xs.iter().zip(ks) {
                                acc += x * kv;
                            }
                        }
                    }
                }
                out_channel[(od * g.oh + oh) * g.ow + ow] = acc;
            }
        }
    }
}

/// Sequential conv3d forward.
pub fn conv3d_seq(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let per = g.od * g.oh * g.ow;
    for (co, chunk) in out.chunks_mut(per).enumerate() {
        conv3d_channel(input, kernel, bias, g, co, chunk);
    }
}

/// Parallel conv3d forward: one rayon task per output channel.
///
/// Bit-identical to [`conv3d_seq`] because each output element is written by
/// exactly one task with the same inner accumulation order.
#[cfg(feature = "parallel")]
pub fn conv3d_par(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let per = g.od * g.oh * g.ow;
    out.par_chunks_mut(per).enumerate().for_each(|(co, chunk)| {
        conv3d_channel(input, kernel, bias, g, co, chunk);
    });
}

/// Forward dispatch: parallel when the feature is enabled.
pub fn conv3d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    conv3d_par(input, kernel, bias, g, out);
    #[cfg(not(feature = "parallel"))]
    conv3d_seq(input, kernel, bias, g, out);
}

/// Valid output range along one axis for a fixed kernel tap: outputs whose
/// input position `o*stride + tap - padding` lands inside [0, extent).
#[inline]
fn out_range(tap: usize, stride: usize, padding: usize, out_ext: usize, extent: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap).div_ceil(stride);
    let hi = if extent + padding > tap {
        ((extent + padding - tap - 1) / stride + 1).min(out_ext)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Gradient w.r.t. the kernel. Sequential: the reduction over output sites
/// must keep a fixed order for bit-reproducible training.
pub fn conv3d_grad_kernel(input: &[f64], grad_out: &[f64], g: &ConvGeom, grad_kernel: &mut [f64]) {
    let k3 = g.k * g.k * g.k;
    let plane = g.h * g.w;
    for co in 0..g.c_out {
        let obase = co * g.od * g.oh * g.ow;
        for ci in 0..g.c_in {
            let ibase = ci * g.d * plane;
            let kcbase = (co * g.c_in + ci) * k3;
            for kz in 0..g.k {
                let (od_lo, od_hi) = out_range(kz, g.stride, g.padding, g.od, g.d);
                for ky in 0..g.k {
                    let (oh_lo, oh_hi) = out_range(ky, g.stride, g.padding, g.oh, g.h);
                    for kx in 0..g.k {
                        let (ow_lo, ow_hi) = out_range(kx, g.stride, g.padding, g.ow, g.w);
                        let mut acc = 0.0;
                        for od in od_lo..od_hi {
                            let id = od * g.stride + kz - g.padding;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + ky - g.padding;
                                let orow = obase + (od * g.oh + oh) * g.ow;
                                let irow = ibase + id * plane + ih * g.w;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kx - g.padding;
                                    acc += grad_out[orow + ow] * input[irow + iw];
                                }
                            }
                        }
                        grad_kernel[kcbase + (kz * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input (transposed convolution scatter), sequential.
pub fn conv3d_grad_input(kernel: &[f64], grad_out: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let k3 = g.k * g.k * g.k;
    let plane = g.h * g.w;
    for co in 0..g.c_out {
        let obase = co * g.od * g.oh * g.ow;
        let kbase = co * g.c_in * k3;
        for od in 0..g.od {
            let (kz_lo, kz_hi) = tap_range(od, g.stride, g.padding, g.k, g.d);
            for oh in 0..g.oh {
                let (ky_lo, ky_hi) = tap_range(oh, g.stride, g.padding, g.k, g.h);
                for ow in 0..g.ow {
                    let (kx_lo, kx_hi) = tap_range(ow, g.stride, g.padding, g.k, g.w);
                    let go = grad_out[obase + (od * g.oh + oh) * g.ow + ow];
                    let xoff = ow * g.stride + kx_lo - g.padding;
                    let span = kx_hi - kx_lo;
                    for ci in 0..g.c_in {
                        let ibase = ci * g.d * plane;
                        let kcbase = kbase + ci * k3;
                        for kz in kz_lo..kz_hi {
                            let id = od * g.stride + kz - g.padding;
                            for ky in ky_lo..ky_hi {
                                let ih = oh * g.stride + ky - g.padding;
                                let irow = ibase + id * plane + ih * g.w + xoff;
                                let krow = kcbase + (kz * g.k + ky) * g.k + kx_lo;
                                let gs = &mut grad_input[irow..irow + span];
                                let ks = &kernel[krow..krow + span];
                                for (slot, kv) in gs.iter_mut().zip(ks) {
                                    *slot += go * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the bias: per-channel sum of the output gradient.
pub fn conv3d_grad_bias(grad_out: &[f64], g: &ConvGeom, grad_bias: &mut [f64]) {
    let per = g.od * g.oh * g.ow;
    for co in 0..g.c_out {
        let mut acc = 0.0;
        for v in &grad_out[co * per..(co + 1) * per] {
            acc += v;
        }
        grad_bias[co] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[cfg(feature = "parallel")]
    #[test]
    fn par_matches_seq_bit_for_bit() {
        let mut rng = Rng::new(31);
        let input: Vec<f64> = (0..3 * 6 * 6 * 6).map(|_| rng.gaussian()).collect();
        let kernel: Vec<f64> = (0..5 * 3 * 27).map(|_| rng.gaussian()).collect();
        let bias: Vec<f64> = (0..5).map(|_| rng.gaussian()).collect();
        let g = ConvGeom::new(&[3, 6, 6, 6], &[5, 3, 3, 3, 3], 1, 1);
        let mut a = vec![0.0; g.out_numel()];
        let mut b = vec![0.0; g.out_numel()];
        conv3d_seq(&input, &kernel, Some(&bias), &g, &mut a);
        conv3d_par(&input, &kernel, Some(&bias), &g, &mut b);
        assert_eq!(a, b);
    }
}
