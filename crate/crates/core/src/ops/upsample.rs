//! Upsampling as a depthwise transposed convolution.
//!
//! For factor `f` the kernel has size `2f - f % 2` and is initialised to the
//! separable bilinear filter; with padding `ceil((f-1)/2)` the transposed
//! convolution reproduces half-pixel bilinear interpolation, treating samples
//! beyond the border as zero.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposeGeometry {
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn kernel_size(factor: usize) -> usize {
    2 * factor - factor % 2
}

/// `C×K×K` bilinear kernel for the given factor.
pub fn bilinear_kernel(channels: usize, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(invalid("upsample factor must be ≥ 1"));
    }
    let k = kernel_size(factor);
    let center = if k % 2 == 1 {
        (factor - 1) as f64
    } else {
        factor as f64 - 0.5
    };
    let f = factor as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / f)
        .collect();
    let plane: Vec<f64> = (0..k * k).map(|i| taps[i / k] * taps[i % k]).collect();
    let data = plane
        .iter()
        .copied()
        .cycle()
        .take(channels * k * k)
        .collect();
    Tensor::new(vec![channels, k, k], data)
}

/// Geometry producing exactly `factor×` the input size before cropping.
pub fn geometry_for(factor: usize, out_h: usize, out_w: usize) -> TransposeGeometry {
    TransposeGeometry {
        stride: factor,
        pad: (factor - 1).div_ceil(2),
        out_h,
        out_w,
    }
}

fn check(
    x: &[usize],
    k: &[usize],
    geo: &TransposeGeometry,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = match x {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(shape_err(format!(
                "upsample input must be C×H×W, got {s:?}"
            )))
        }
    };
    let ks = match k {
        &[kc, a, b] if kc == c && a == b => a,
        s => {
            return Err(shape_err(format!(
                "upsample kernel must be {c}×K×K, got {s:?}"
            )))
        }
    };
    if geo.stride == 0 || geo.out_h == 0 || geo.out_w == 0 {
        return Err(invalid("upsample geometry must be positive"));
    }
    Ok((c, h, w, ks))
}

pub fn transpose_forward(x: &Tensor, kernel: &Tensor, geo: &TransposeGeometry) -> Result<Tensor> {
    let (c, h, w, k) = check(x.shape(), kernel.shape(), geo)?;
    let (oh, ow) = (geo.out_h, geo.out_w);
    let mut out = vec![0.0; c * oh * ow];
    let xd = x.data();
    let kd = kernel.data();
    for ch in 0..c {
        let kp = &kd[ch * k * k..(ch + 1) * k * k];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = xd[(ch * h + iy) * w + ix];
                for ky in 0..k {
                    let oy = (iy * geo.stride + ky) as isize - geo.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * geo.stride + kx) as isize - geo.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        op[oy as usize * ow + ox as usize] += v * kp[ky * k + kx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn visit(
    x_shape: &[usize],
    k: usize,
    geo: &TransposeGeometry,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (geo.out_h, geo.out_w);
    for ch in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                for ky in 0..k {
                    let oy = (iy * geo.stride + ky) as isize - geo.pad as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * geo.stride + kx) as isize - geo.pad as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        f(
                            (ch * h + iy) * w + ix,
                            (ch * k + ky) * k + kx,
                            (ch * oh + oy as usize) * ow + ox as usize,
                        );
                    }
                }
            }
        }
    }
}

pub(crate) fn transpose_backward_input(
    x_shape: &[usize],
    kernel: &Tensor,
    geo: &TransposeGeometry,
    gout: &Tensor,
) -> Tensor {
    let k = kernel.shape()[1];
    let mut gx = Tensor::zeros(x_shape);
    let gxd = gx.data_mut();
    let (kd, gd) = (kernel.data(), gout.data());
    visit(x_shape, k, geo, |xi, ki, oi| gxd[xi] += kd[ki] * gd[oi]);
    gx
}

pub(crate) fn transpose_backward_kernel(
    x: &Tensor,
    k_shape: &[usize],
    geo: &TransposeGeometry,
    gout: &Tensor,
) -> Tensor {
    let mut gk = Tensor::zeros(k_shape);
    let gkd = gk.data_mut();
    let (xd, gd) = (x.data(), gout.data());
    visit(x.shape(), k_shape[1], geo, |xi, ki, oi| {
        gkd[ki] += xd[xi] * gd[oi]
    });
    gk
}

impl Graph {
    /// Depthwise transposed convolution with an explicit output size.
    pub fn conv_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        geometry: TransposeGeometry,
    ) -> Result<Var> {
        let out = transpose_forward(self.value(input), self.value(kernel), &geometry)?;
        self.push(
            out,
            Op::ConvTranspose {
                input,
                kernel,
                geometry,
            },
            "conv_transpose",
        )
    }

    /// Upsamples by `factor` and crops to `out_h×out_w` (at most `factor×`
    /// the input extent). `kernel` is typically [`bilinear_kernel`], bound as
    /// a constant when the upsampling is frozen.
    pub fn upsample(
        &mut self,
        input: Var,
        kernel: Var,
        factor: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        if factor < 1 {
            return Err(invalid("upsample factor must be ≥ 1"));
        }
        let (_, h, w) = self.value(input).dims3()?;
        if out_h > h * factor || out_w > w * factor {
            return Err(shape_err(format!(
                "cannot crop {}×{} upsampled map to {out_h}×{out_w}",
                h * factor,
                w * factor
            )));
        }
        if self.value(kernel).shape()[1..] != [kernel_size(factor), kernel_size(factor)] {
            return Err(shape_err(format!(
                "upsample kernel {:?} does not match factor {factor}",
                self.value(kernel).shape()
            )));
        }
        self.conv_transpose(input, kernel, geometry_for(factor, out_h, out_w))
    }
}

/// Convenience for frozen bilinear upsampling outside a graph.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let kernel = bilinear_kernel(c, factor)?;
    transpose_forward(x, &kernel, &geometry_for(factor, h * factor, w * factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Half-pixel bilinear interpolation evaluated pointwise, zero outside.
    fn oracle(x: &Tensor, factor: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let f = factor as f64;
        let tent = |d: f64| (1.0 - d.abs()).max(0.0);
        Tensor::from_fn(&[c, h * factor, w * factor], |i| {
            let ch = i / (h * factor * w * factor);
            let oy = (i / (w * factor)) % (h * factor);
            let ox = i % (w * factor);
            let sy = (oy as f64 + 0.5) / f - 0.5;
            let sx = (ox as f64 + 0.5) / f - 0.5;
            let mut acc = 0.0;
            for iy in 0..h {
                for ix in 0..w {
                    acc += tent(sy - iy as f64)
                        * tent(sx - ix as f64)
                        * x.data()[(ch * h + iy) * w + ix];
                }
            }
            acc
        })
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| (i as f64).sin());
        assert_eq!(upsample_bilinear(&x, 1).unwrap(), x);
    }

    #[test]
    fn constants_preserved_in_interior() {
        for factor in [2, 3, 4, 8] {
            let x = Tensor::full(&[1, 6, 6], 0.7);
            let y = upsample_bilinear(&x, factor).unwrap();
            let n = 6 * factor;
            for oy in factor..n - factor {
                for ox in factor..n - factor {
                    assert!((y.data()[oy * n + ox] - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ramp_matches_pointwise_bilinear() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        let want = oracle(&x, 2);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for factor in [3, 4, 5, 16] {
            let x = Tensor::from_fn(&[1, 3, 2], |i| (i as f64) * 0.3 - 0.2);
            let y = upsample_bilinear(&x, factor).unwrap();
            for (a, b) in y.data().iter().zip(oracle(&x, factor).data()) {
                assert!((a - b).abs() < 1e-12, "factor {factor}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(kernel_size(1), 1);
        assert_eq!(kernel_size(2), 4);
        assert_eq!(kernel_size(3), 5);
        assert_eq!(kernel_size(16), 32);
        assert!(bilinear_kernel(1, 0).is_err());
    }
}
