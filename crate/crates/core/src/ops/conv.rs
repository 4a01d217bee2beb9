//! 2-D cross-correlation with bias.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    /// Zero padding applied on every side.
    pub pad: usize,
}

impl Conv2dSpec {
    /// Stride 1 with `(k-1)/2` padding, which keeps `H×W` for odd `k`.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: (kernel - 1) / 2,
        }
    }
}

/// Output extent along one axis, or `None` when the window does not fit.
pub fn output_extent(input: usize, kernel: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = input + 2 * spec.pad;
    if padded < kernel || spec.stride == 0 {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let (cin, h, wd) = match x {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err(format!("conv2d input must be C×H×W, got {s:?}"))),
    };
    let (cout, wcin, kh, kw) = match w {
        &[o, i, kh, kw] => (o, i, kh, kw),
        s => {
            return Err(shape_err(format!(
                "conv2d weight must be O×I×kH×kW, got {s:?}"
            )))
        }
    };
    if wcin != cin {
        return Err(shape_err(format!(
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    let (Some(oh), Some(ow)) = (output_extent(h, kh, spec), output_extent(wd, kw, spec)) else {
        return Err(shape_err(format!(
            "conv2d output would be empty for input {h}×{wd}, kernel {kh}×{kw}, {spec:?}"
        )));
    };
    Ok(Geometry {
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Range of output columns `ox` for which `ox*stride + k - pad` lands in `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, spec: Conv2dSpec) -> (usize, usize) {
    let s = spec.stride as isize;
    let off = k as isize - spec.pad as isize;
    // ox*s + off >= 0  and  ox*s + off <= len-1
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_num = len as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).min(out as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), spec)?;
    if b.len() != g.cout {
        return Err(shape_err(format!(
            "conv2d bias has {} entries, expected {}",
            b.len(),
            g.cout
        )));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; g.cout * g.oh * g.ow];
    for oc in 0..g.cout {
        let plane = &mut out[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
        plane.fill(b.data()[oc]);
        for ic in 0..g.cin {
            let xin = &xd[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = valid_range(g.h, g.oh, ky, spec);
                for kx in 0..g.kw {
                    let wv = wd[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(g.w, g.ow, kx, spec);
                    for oy in ylo..yhi {
                        let iy = oy * spec.stride + ky - spec.pad;
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        if spec.stride == 1 {
                            let ix0 = xlo + kx - spec.pad;
                            let n = xhi - xlo;
                            for (o, i) in orow[xlo..xhi].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * spec.stride + kx - spec.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.cout, g.oh, g.ow], out)
}

pub(crate) fn conv2d_backward_input(
    x_shape: &[usize],
    w: &Tensor,
    spec: Conv2dSpec,
    gout: &Tensor,
) -> Tensor {
    let g = geometry(x_shape, w.shape(), spec).expect("validated in forward");
    let wd = w.data();
    let god = gout.data();
    let mut gx = vec![0.0; g.cin * g.h * g.w];
    for ic in 0..g.cin {
        let gin = &mut gx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for oc in 0..g.cout {
            let gplane = &god[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
            for ky in 0..g.kh {
                let (ylo, yhi) = valid_range(g.h, g.oh, ky, spec);
                for kx in 0..g.kw {
                    let wv = wd[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(g.w, g.ow, kx, spec);
                    for oy in ylo..yhi {
                        let iy = oy * spec.stride + ky - spec.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &mut gin[iy * g.w..(iy + 1) * g.w];
                        if spec.stride == 1 {
                            let ix0 = xlo + kx - spec.pad;
                            let n = xhi - xlo;
                            for (i, o) in irow[ix0..ix0 + n].iter_mut().zip(&grow[xlo..xhi]) {
                                *i += wv * o;
                            }
                        } else {
                            for ox in xlo..xhi {
                                irow[ox * spec.stride + kx - spec.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx).expect("shape preserved")
}

pub(crate) fn conv2d_backward_weight(
    x: &Tensor,
    w_shape: &[usize],
    spec: Conv2dSpec,
    gout: &Tensor,
) -> Tensor {
    let g = geometry(x.shape(), w_shape, spec).expect("validated in forward");
    let xd = x.data();
    let god = gout.data();
    let mut gw = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for oc in 0..g.cout {
        let gplane = &god[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
        for ic in 0..g.cin {
            let xin = &xd[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = valid_range(g.h, g.oh, ky, spec);
                for kx in 0..g.kw {
                    let (xlo, xhi) = valid_range(g.w, g.ow, kx, spec);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * spec.stride + ky - spec.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        if spec.stride == 1 {
                            let ix0 = xlo + kx - spec.pad;
                            let n = xhi - xlo;
                            acc += grow[xlo..xhi]
                                .iter()
                                .zip(&irow[ix0..ix0 + n])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in xlo..xhi {
                                acc += grow[ox] * irow[ox * spec.stride + kx - spec.pad];
                            }
                        }
                    }
                    gw[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), gw).expect("shape preserved")
}

pub(crate) fn conv2d_backward_bias(gout: &Tensor) -> Tensor {
    let (c, h, w) = gout.dims3().expect("conv output is C×H×W");
    let plane = h * w;
    let data = (0..c)
        .map(|oc| gout.data()[oc * plane..(oc + 1) * plane].iter().sum())
        .collect();
    Tensor::new(vec![c], data).expect("bias shape")
}

impl Graph {
    /// Cross-correlation of a `C×H×W` input with `O×C×kH×kW` weights plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            spec,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            "conv2d",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop with explicit bounds checks.
    fn oracle(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv2dSpec) -> Tensor {
        let (cin, h, wd) = x.dims3().unwrap();
        let s = w.shape();
        let (cout, kh, kw) = (s[0], s[2], s[3]);
        let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(i * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + i) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::same(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_same_padding() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        assert_eq!(y, oracle(&x, &w, &b, Conv2dSpec::same(3)));
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f64);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::same(3)).unwrap();
        for oc in 0..3 {
            assert!(y
                .channel(oc)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == b.data()[oc]));
        }
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (spec, k) in [
            (Conv2dSpec::same(3), 3),
            (Conv2dSpec::same(5), 5),
            (Conv2dSpec { stride: 2, pad: 1 }, 3),
            (Conv2dSpec { stride: 1, pad: 0 }, 3),
        ] {
            let x = random(&[1, 5, 5], &mut rng);
            let w = random(&[2, 1, k, k], &mut rng);
            let b = random(&[2], &mut rng);
            let got = conv2d_forward(&x, &w, &b, spec).unwrap();
            let want = oracle(&x, &w, &b, spec);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-12, "{a} vs {e} for {spec:?}");
            }
        }
    }

    #[test]
    fn channel_mismatch_and_empty_output() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, Conv2dSpec::same(3)).is_err());
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &w, &b, Conv2dSpec { stride: 1, pad: 0 }).is_err());
    }
}
