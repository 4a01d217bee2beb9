//! The 36-way augmentation: 4 rotations × 3 flips × 3 scales.

use crate::eval::LabelImage;
use crate::objective::BoundaryLabels;
use crate::tensor::Tensor;

use super::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    UpDown,
    LeftRight,
    None,
}

pub const AUGMENT_FLIPS: [Flip; 3] = [Flip::UpDown, Flip::LeftRight, Flip::None];
pub const AUGMENT_SCALES: [f64; 3] = [0.8, 1.0, 1.2];

/// Counter-clockwise quarter turns, then a flip, then a rescale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip: Flip,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        flip: Flip::None,
        scale: 1.0,
    };

    /// All 36 members in rotation-major order.
    pub fn all() -> Vec<Transform> {
        let mut out = Vec::with_capacity(36);
        for quarter_turns in 0..4 {
            for flip in AUGMENT_FLIPS {
                for scale in AUGMENT_SCALES {
                    out.push(Transform {
                        quarter_turns,
                        flip,
                        scale,
                    });
                }
            }
        }
        out
    }

    pub fn is_isometry(&self) -> bool {
        self.scale == 1.0
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.height(), sample.width());
        let (rh, rw) = if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        };
        let (oh, ow) = scaled_extent(rh, rw, self.scale);
        // Maps an isometry output coordinate back to the source raster.
        let iso = |y: usize, x: usize| -> (usize, usize) {
            let (y, x) = match self.flip {
                Flip::UpDown => (rh - 1 - y, x),
                Flip::LeftRight => (y, rw - 1 - x),
                Flip::None => (y, x),
            };
            match self.quarter_turns % 4 {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            }
        };

        let src = sample.image.data();
        let channels = sample.image.shape()[0];
        let mut rotated = vec![0.0; channels * rh * rw];
        for c in 0..channels {
            for y in 0..rh {
                for x in 0..rw {
                    let (sy, sx) = iso(y, x);
                    rotated[(c * rh + y) * rw + x] = src[(c * h + sy) * w + sx];
                }
            }
        }
        let image = Tensor::new(
            vec![channels, oh, ow],
            resize_bilinear(&rotated, channels, rh, rw, oh, ow),
        )
        .expect("extent is positive");

        let nearest = |values: &dyn Fn(usize) -> u32| -> Vec<u32> {
            let mut out = Vec::with_capacity(oh * ow);
            for y in 0..oh {
                for x in 0..ow {
                    let (ry, rx) = (nearest_src(y, oh, rh), nearest_src(x, ow, rw));
                    let (sy, sx) = iso(ry, rx);
                    out.push(values(sy * w + sx));
                }
            }
            out
        };

        match &sample.segments {
            Some(seg) => {
                let ids = nearest(&|i| seg.ids()[i]);
                let seg = LabelImage::new(oh, ow, ids).expect("extent is positive");
                Sample::from_segments(image, seg).expect("extents agree")
            }
            None => {
                let mask = sample.labels.mask();
                let bits = nearest(&|i| u32::from(mask[i]));
                let labels = BoundaryLabels::new(oh, ow, bits.iter().map(|&b| b == 1).collect())
                    .expect("extent is positive");
                Sample::new(image, labels, None).expect("extents agree")
            }
        }
    }
}

fn scaled_extent(h: usize, w: usize, s: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * s).round() as usize).max(1);
    (f(h), f(w))
}

fn nearest_src(o: usize, out: usize, src: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / out as f64).floor() as usize).min(src - 1)
}

/// Half-pixel-centred bilinear resize with edge clamping.
fn resize_bilinear(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if (oh, ow) == (h, w) {
        return src.to_vec();
    }
    let taps = |out: usize, n: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// The 36 transformed copies of `sample`, in [`Transform::all`] order.
pub fn augment36(sample: &Sample) -> Vec<Sample> {
    Transform::all().iter().map(|t| t.apply(sample)).collect()
}
