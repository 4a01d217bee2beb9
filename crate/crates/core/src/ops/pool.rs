//! 2×2 max pooling with stride 2.
//!
//! Odd extents are padded by replicating the last row/column, so the output
//! is `ceil(H/2)×ceil(W/2)`. The backward pass routes each output gradient to
//! the first maximal element of its window in row-major scan order.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// Flat input indices covered by the window at `(c, oy, ox)`, in scan order.
fn window(c: usize, oy: usize, ox: usize, h: usize, w: usize) -> [usize; 4] {
    let y0 = 2 * oy;
    let x0 = 2 * ox;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let base = c * h * w;
    [
        base + y0 * w + x0,
        base + y0 * w + x1,
        base + y1 * w + x0,
        base + y1 * w + x1,
    ]
}

pub fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if x.is_empty() {
        return Err(invalid("maxpool2 on empty input"));
    }
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = window(ch, oy, ox, h, w);
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub(crate) fn maxpool2_backward(x_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x_shape);
    let gd = gx.data_mut();
    for (&src, &g) in argmax.iter().zip(gout.data()) {
        gd[src] += g;
    }
    gx
}

/// Appends `x[winner] - x[other]` for every distinct non-winning element.
pub(crate) fn window_gaps(x: &Tensor, argmax: &[usize], out: &mut Vec<f64>) {
    let (c, h, w) = x.dims3().expect("pool input is C×H×W");
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let xd = x.data();
    let mut k = 0;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let win = argmax[k];
                for i in window(ch, oy, ox, h, w) {
                    if i != win {
                        out.push(xd[win] - xd[i]);
                    }
                }
                k += 1;
            }
        }
    }
}

impl Graph {
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(self.value(input))?;
        self.push(out, Op::MaxPool2 { input, argmax }, "maxpool2")
    }
}
