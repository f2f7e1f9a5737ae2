//! Ground-truth labels and the training objective: focal matching loss on the
//! assignment matrix, masked offset regression and confidence BCE.

use std::collections::BTreeSet;

use log::warn;

use crate::backbone::COARSE_STRIDE;
use crate::error::{Error, Result};
use crate::geometry::{Correspondence, Homography};
use crate::tensor::{Graph, Tensor, Var};

/// Probability clamp used inside every logarithm.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the regression term.
    pub beta: f64,
    /// Weight of the classification term.
    pub phi: f64,
    /// Focal balance.
    pub alpha: f64,
    /// Focal exponent.
    pub eta: f64,
    /// Largest ground-truth offset (pixels) still supervised by regression.
    pub psi: f64,
    /// Normalize the negative focal term by `N − |E|` (rows minus positives)
    /// instead of by the number of negative entries.
    pub strict_negative_norm: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.2,
            phi: 0.2,
            alpha: 0.25,
            eta: 2.0,
            psi: 8.0,
            strict_negative_norm: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.eta, self.psi].iter().all(|v| v.is_finite() && *v > 0.0)
            && [self.beta, self.phi].iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Supervision for one image pair. `offsets`, `confidence` and `valid` are
/// indexed like the correspondences they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthLabels {
    pub matches: BTreeSet<(usize, usize)>,
    /// `[K, 2]` pixel offsets from each B-side point to the true location.
    pub offsets: Tensor,
    /// `[K, 1]` with 1 where `valid`.
    pub confidence: Tensor,
    pub valid: Vec<bool>,
}

fn cell_of(p: [f64; 2], grid_w: usize, grid_h: usize) -> Option<usize> {
    let s = COARSE_STRIDE as f64;
    let cx = ((p[0] + 0.5) / s).floor();
    let cy = ((p[1] + 0.5) / s).floor();
    if cx < 0.0 || cy < 0.0 || cx >= grid_w as f64 || cy >= grid_h as f64 {
        return None;
    }
    Some(cy as usize * grid_w + cx as usize)
}

/// Ground-truth coarse pairs for an `h × w` image pair related by `h_gt`
/// (A → B). A cell pair `(i, j)` qualifies when the centre of A-cell `i`
/// lands inside B-cell `j` and the centre of `j` maps back into `i`.
pub fn gt_coarse_labels(h_gt: &Homography, height: usize, width: usize) -> Result<BTreeSet<(usize, usize)>> {
    let centers = crate::backbone::grid_keypoints(height, width, COARSE_STRIDE)?;
    let inv = h_gt.inverse()?;
    let (gw, gh) = (width / COARSE_STRIDE, height / COARSE_STRIDE);
    let mut out = BTreeSet::new();
    for (i, &c) in centers.iter().enumerate() {
        let Ok(q) = h_gt.apply(c) else { continue };
        let Some(j) = cell_of(q, gw, gh) else { continue };
        let Ok(back) = inv.apply(centers[j]) else { continue };
        if cell_of(back, gw, gh) == Some(i) {
            out.insert((i, j));
        }
    }
    Ok(out)
}

/// Offset targets for correspondences `pairs`: `h_gt(pA) − pB`, supervised
/// when its length is at most `psi`.
pub fn fine_targets(h_gt: &Homography, pairs: &[Correspondence], psi: f64) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let mut off = Vec::with_capacity(2 * pairs.len());
    let mut conf = Vec::with_capacity(pairs.len());
    let mut valid = Vec::with_capacity(pairs.len());
    for (pa, pb) in pairs {
        let (d, ok) = match h_gt.apply(*pa) {
            Ok(q) => {
                let d = [q[0] - pb[0], q[1] - pb[1]];
                let ok = d[0].hypot(d[1]) <= psi;
                (if ok { d } else { [0.0, 0.0] }, ok)
            }
            Err(_) => ([0.0, 0.0], false),
        };
        off.extend_from_slice(&d);
        conf.push(if ok { 1.0 } else { 0.0 });
        valid.push(ok);
    }
    let k = pairs.len();
    Ok((Tensor::new(&[k, 2], off)?, Tensor::new(&[k, 1], conf)?, valid))
}

/// Focal loss of the assignment matrix `assign` against the positive set.
pub fn matching_loss(g: &mut Graph, assign: Var, positives: &BTreeSet<(usize, usize)>, w: &LossWeights) -> Result<Var> {
    let s = g.shape(assign).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("matching_loss", &s, &[0, 0]));
    }
    if positives.is_empty() {
        return Err(Error::InvalidArgument("no ground-truth matches".into()));
    }
    let (n, m) = (s[0], s[1]);
    let mut mask = Tensor::zeros(&[n, m]);
    for &(i, j) in positives {
        if i >= n || j >= m {
            return Err(Error::InvalidArgument(format!("ground-truth pair ({i}, {j}) outside {n}x{m}")));
        }
        mask.data_mut()[i * m + j] = 1.0;
    }
    let n_pos = positives.len() as f64;
    let n_neg_entries = (n * m) as f64 - n_pos;
    let neg_norm = if w.strict_negative_norm { n as f64 - n_pos } else { n_neg_entries };
    let neg_mask = Tensor::from_fn(&[n, m], |k| 1.0 - mask.data()[k]);

    let gc = g.clamp(assign, EPS, 1.0 - EPS);
    let one_minus = g.affine(gc, -1.0, 1.0);

    let pos_mask = g.constant(mask);
    let focal = g.powf(one_minus, w.eta);
    let lg = g.log(gc);
    let pos = g.mul(focal, lg)?;
    let pos = g.mul(pos, pos_mask)?;
    let pos = g.sum(pos);
    let pos = g.scale(pos, -w.alpha / n_pos);

    if n_neg_entries == 0.0 || neg_norm <= 0.0 {
        return Ok(pos);
    }
    let neg_mask = g.constant(neg_mask);
    let focal = g.powf(gc, w.eta);
    let lg = g.log(one_minus);
    let neg = g.mul(focal, lg)?;
    let neg = g.mul(neg, neg_mask)?;
    let neg = g.sum(neg);
    let neg = g.scale(neg, -(1.0 - w.alpha) / neg_norm);
    g.add(pos, neg)
}

/// Mean squared offset error over valid entries. With no valid entry the
/// result is a constant zero.
pub fn regression_loss(g: &mut Graph, offsets: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
    let s = g.shape(offsets).to_vec();
    let k = valid.len();
    if s != [k, 2] || target.shape() != [k, 2] {
        return Err(Error::shape("regression_loss", &s, target.shape()));
    }
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        warn!("regression loss has no valid entries; contributing 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(t, offsets)?;
    let sq = g.mul(diff, diff)?;
    let mask = g.constant(Tensor::from_fn(&[k, 2], |i| if valid[i / 2] { 1.0 } else { 0.0 }));
    let sq = g.mul(sq, mask)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n_valid as f64))
}

/// Mean binary cross-entropy of confidences `conf` against 0/1 labels.
pub fn classification_loss(g: &mut Graph, conf: Var, labels: &Tensor) -> Result<Var> {
    let s = g.shape(conf).to_vec();
    if s != labels.shape() || labels.numel() == 0 {
        return Err(Error::shape("classification_loss", &s, labels.shape()));
    }
    let c = g.clamp(conf, EPS, 1.0 - EPS);
    let one_minus = g.affine(c, -1.0, 1.0);
    let y = g.constant(labels.clone());
    let not_y = g.constant(Tensor::from_fn(labels.shape(), |i| 1.0 - labels.data()[i]));
    let lc = g.log(c);
    let pos = g.mul(y, lc)?;
    let l1 = g.log(one_minus);
    let neg = g.mul(not_y, l1)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.scale(m, -1.0))
}

/// `Lm + β·Lr + φ·Lc`.
pub fn total_loss(g: &mut Graph, lm: Var, lr: Var, lc: Var, w: &LossWeights) -> Result<Var> {
    let lr = g.scale(lr, w.beta);
    let lc = g.scale(lc, w.phi);
    let s = g.add(lm, lr)?;
    g.add(s, lc)
}
