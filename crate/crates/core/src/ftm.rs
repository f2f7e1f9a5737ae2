//! Feature transition: parallel depthwise branches of kernel size 1, 3, 5 and
//! 7, each squeezed to a quarter of the channels by a pointwise convolution,
//! concatenated back to the input width.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, ParamStore};
use crate::rng::XorShift64Star;
use crate::tensor::{ConvMode, Graph, Var};

pub const BRANCH_KERNELS: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug)]
pub struct FtmParams {
    /// Depthwise convolutions in kernel-size order.
    pub depthwise: [Conv; 4],
    /// Pointwise squeeze `C -> C/4` per branch.
    pub pointwise: [Conv; 4],
    pub channels: usize,
}

impl FtmParams {
    pub fn init(store: &mut ParamStore, rng: &mut XorShift64Star, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!(
                "feature transition needs a channel count divisible by 4, got {channels}"
            )));
        }
        let depthwise = std::array::from_fn(|i| {
            let k = BRANCH_KERNELS[i];
            Conv::init(store, rng, &format!("ftm.dw{k}"), channels, channels, k, 1, ConvMode::Depthwise)
        });
        let pointwise = std::array::from_fn(|i| {
            let k = BRANCH_KERNELS[i];
            Conv::init(store, rng, &format!("ftm.pw{k}"), channels, channels / 4, 1, 1, ConvMode::Pointwise)
        });
        Ok(Self {
            depthwise,
            pointwise,
            channels,
        })
    }
}

/// Applies the transition to a `[C, h, w]` map; the output has the same shape.
pub fn feature_transition(g: &mut Graph, p: &Bound, params: &FtmParams, x: Var) -> Result<Var> {
    let c = g.shape(x).first().copied().unwrap_or(0);
    if c % 4 != 0 || c != params.channels {
        return Err(Error::Config(format!(
            "feature transition built for {} channels, input has {c}",
            params.channels
        )));
    }
    let mut branches = Vec::with_capacity(4);
    for (dw, pw) in params.depthwise.iter().zip(&params.pointwise) {
        let h = dw.apply(g, p, x)?;
        branches.push(pw.apply(g, p, h)?);
    }
    g.concat(&branches, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(c: usize) -> (ParamStore, FtmParams) {
        let mut store = ParamStore::new();
        let mut rng = XorShift64Star::new(11);
        let p = FtmParams::init(&mut store, &mut rng, c).unwrap();
        (store, p)
    }

    #[test]
    fn full_width_branches() {
        let (store, p) = setup(192);
        assert_eq!(store.get(p.pointwise[0].weight).shape(), &[48, 192, 1, 1]);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_fn(&[192, 4, 5], |i| (i as f64 * 0.01).sin()));
        let y = feature_transition(&mut g, &b, &p, x).unwrap();
        assert_eq!(g.shape(y), &[192, 4, 5]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, p) = setup(8);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_fn(&[8, 5, 5], |i| i as f64));
        let y = feature_transition(&mut g, &b, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let mut store = ParamStore::new();
        let mut rng = XorShift64Star::new(1);
        assert!(matches!(FtmParams::init(&mut store, &mut rng, 6), Err(Error::Config(_))));
    }
}
