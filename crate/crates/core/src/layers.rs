//! Parameterised building blocks on top of the graph ops.

use crate::error::Result;
use crate::params::{glorot_bound, he_bound, uniform, Bound, ParamId, ParamStore};
use crate::rng::XorShift64Star;
use crate::tensor::{ConvMode, Graph, Tensor, Var};

/// Convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mode: ConvMode,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut XorShift64Star,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        mode: ConvMode,
    ) -> Self {
        let (shape, fan_in) = match mode {
            ConvMode::Depthwise => ([c_out, 1, k, k], k * k),
            ConvMode::Pointwise => ([c_out, c_in, 1, 1], c_in),
            ConvMode::Standard => ([c_out, c_in, k, k], c_in * k * k),
        };
        let weight = store.add(format!("{name}.weight"), uniform(rng, &shape, he_bound(fan_in)), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true);
        Self {
            weight,
            bias,
            mode,
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.mode, self.stride, self.pad)
    }
}

/// Token-wise affine map `[n, in] -> [n, out]`; weight stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut XorShift64Star,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[d_in, d_out], glorot_bound(d_in, d_out)),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]), true));
        Self { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }
}
