use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

pub fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(invalid("concat of an empty list"));
    };
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(shape_err(format!(
                "concat spatial mismatch: {h}×{w} vs {ph}×{pw}"
            )));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn fuse_forward(maps: &[&Tensor], weights: &Tensor) -> Result<Tensor> {
    if maps.len() != weights.len() || maps.is_empty() {
        return Err(invalid(format!(
            "fusion expects one weight per map: {} maps, {} weights",
            maps.len(),
            weights.len()
        )));
    }
    let shape = maps[0].shape();
    let mut out = Tensor::zeros(shape);
    for (m, &h) in maps.iter().zip(weights.data()) {
        if m.shape() != shape {
            return Err(shape_err(format!(
                "fusion maps differ: {:?} vs {:?}",
                shape,
                m.shape()
            )));
        }
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += h * v;
        }
    }
    Ok(out)
}

impl Graph {
    /// Stacks `C×H×W` parts along the channel axis in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_forward(&values)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat_channels")
    }

    /// `Σₙ hₙ·mapₙ`: a 1×1 convolution over the stacked maps without bias.
    pub fn fuse(&mut self, maps: &[Var], weights: Var) -> Result<Var> {
        let values: Vec<&Tensor> = maps.iter().map(|&m| self.value(m)).collect();
        let out = fuse_forward(&values, self.value(weights))?;
        self.push(
            out,
            Op::Fuse {
                maps: maps.to_vec(),
                weights,
            },
            "fuse",
        )
    }
}
