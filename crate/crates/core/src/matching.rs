//! Coarse matching (score matrix, dual-softmax, mutual nearest neighbours)
//! and window-level fine refinement.

use crate::backbone::FINE_STRIDE;
use crate::error::{Error, Result};
use crate::geometry::Correspondence;
use crate::layers::Conv;
use crate::params::{Bound, ParamStore};
use crate::rng::XorShift64Star;
use crate::slimformer::{grid_coords, interleave, SlimConfig, SlimStack, TokenSeq};
use crate::tensor::{ConvMode, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLevel {
    Coarse,
    Fine,
}

/// Correspondences with confidences; coarse sets also carry token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub level: MatchLevel,
    pub pairs: Vec<Correspondence>,
    pub confidence: Vec<f64>,
    /// `(i, j)` token indices (coarse level only).
    pub indices: Vec<(usize, usize)>,
}

impl MatchSet {
    pub fn empty(level: MatchLevel) -> Self {
        Self {
            level,
            pairs: Vec::new(),
            confidence: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `S = FA · FBᵀ`, divided by `sqrt(C)` when `scaled`.
pub fn score_matrix(g: &mut Graph, fa: Var, fb: Var, scaled: bool) -> Result<Var> {
    let (sa, sb) = (g.shape(fa).to_vec(), g.shape(fb).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("score_matrix", &sa, &sb));
    }
    let fbt = g.transpose(fb)?;
    let s = g.matmul(fa, fbt)?;
    Ok(if scaled {
        g.scale(s, 1.0 / (sa[1] as f64).sqrt())
    } else {
        s
    })
}

/// Elementwise product of the column-wise and row-wise softmaxes of `s`.
pub fn dual_softmax(g: &mut Graph, s: Var) -> Result<Var> {
    let col = g.softmax(s, 0)?;
    let row = g.softmax(s, 1)?;
    g.mul(col, row)
}

/// Mutual-nearest-neighbour pairs of the assignment `assign` whose score
/// exceeds `threshold`. A pair qualifies only if its entry is the strict
/// maximum of both its row and its column; exact ties reject all tied entries.
pub fn mutual_nearest(assign: &Tensor, threshold: f64) -> Vec<(usize, usize)> {
    let (n, m) = (assign.shape()[0], assign.shape()[1]);
    let d = assign.data();
    let unique_max = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        let mut tied = false;
        for (idx, v) in it {
            match best {
                None => best = Some((idx, v)),
                Some((_, b)) if v > b => {
                    best = Some((idx, v));
                    tied = false;
                }
                Some((_, b)) if v == b => tied = true,
                _ => {}
            }
        }
        best.filter(|_| !tied).map(|(i, _)| i)
    };
    let col_best: Vec<Option<usize>> = (0..m)
        .map(|j| unique_max(&mut (0..n).map(|i| (i, d[i * m + j]))))
        .collect();
    let mut out = Vec::new();
    for i in 0..n {
        if let Some(j) = unique_max(&mut (0..m).map(|j| (j, d[i * m + j]))) {
            if col_best[j] == Some(i) && d[i * m + j] > threshold {
                out.push((i, j));
            }
        }
    }
    out
}

/// Coarse matches from an assignment matrix and the keypoints of both images.
pub fn extract_coarse_matches(assign: &Tensor, threshold: f64, pa: &[[f64; 2]], pb: &[[f64; 2]]) -> Result<MatchSet> {
    let s = assign.shape();
    if s.len() != 2 || s[0] != pa.len() || s[1] != pb.len() {
        return Err(Error::shape("extract_coarse_matches", s, &[pa.len(), pb.len()]));
    }
    let indices = mutual_nearest(assign, threshold);
    Ok(MatchSet {
        level: MatchLevel::Coarse,
        pairs: indices.iter().map(|&(i, j)| (pa[i], pb[j])).collect(),
        confidence: indices.iter().map(|&(i, j)| assign.at2(i, j)).collect(),
        indices,
    })
}

/// Fine-grid cell holding a pixel position: `p / stride` rounded to nearest,
/// ties toward +∞. Returned as `(x, y)`.
pub fn fine_center(p: [f64; 2]) -> [isize; 2] {
    let s = FINE_STRIDE as f64;
    [(p[0] / s + 0.5).floor() as isize, (p[1] / s + 0.5).floor() as isize]
}

/// Paired `w × w` crops of both fine maps around each coarse match.
#[derive(Clone, Debug)]
pub struct FineWindows {
    pub size: usize,
    /// `[C, w, w]` per match, image A.
    pub a: Vec<Var>,
    /// `[C, w, w]` per match, image B.
    pub b: Vec<Var>,
    /// Fine-grid centres `(x, y)` per match.
    pub centers_a: Vec<[isize; 2]>,
    pub centers_b: Vec<[isize; 2]>,
}

impl FineWindows {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Crops windows of odd size `w` centred on the fine cells of each
/// correspondence; out-of-map positions are zero.
pub fn crop_fine_windows(g: &mut Graph, pairs: &[Correspondence], fine_a: Var, fine_b: Var, w: usize) -> Result<FineWindows> {
    if w % 2 == 0 {
        return Err(Error::Config(format!("window size must be odd, got {w}")));
    }
    let half = (w / 2) as isize;
    let mut wins = FineWindows {
        size: w,
        a: Vec::with_capacity(pairs.len()),
        b: Vec::with_capacity(pairs.len()),
        centers_a: Vec::with_capacity(pairs.len()),
        centers_b: Vec::with_capacity(pairs.len()),
    };
    for (pa, pb) in pairs {
        let ca = fine_center(*pa);
        let cb = fine_center(*pb);
        wins.a.push(g.crop(fine_a, ca[1] - half, ca[0] - half, w, w)?);
        wins.b.push(g.crop(fine_b, cb[1] - half, cb[0] - half, w, w)?);
        wins.centers_a.push(ca);
        wins.centers_b.push(cb);
    }
    Ok(wins)
}

/// Refinement network: window attention followed by 1×1 convolutions,
/// global max pooling and the offset/confidence heads.
#[derive(Clone, Debug)]
pub struct FineParams {
    pub stack: SlimStack,
    pub pre: [Conv; 2],
    pub post: [Conv; 2],
    pub confidence: Conv,
    pub offset: Conv,
}

impl FineParams {
    pub fn init(store: &mut ParamStore, rng: &mut XorShift64Star, cfg: &SlimConfig, depth: usize) -> Result<Self> {
        let stack = SlimStack::init(store, rng, "fine.slim", cfg, depth)?;
        let c = cfg.channels;
        let pw = ConvMode::Pointwise;
        let pre = [
            Conv::init(store, rng, "fine.head.pre0", 2 * c, c, 1, 1, pw),
            Conv::init(store, rng, "fine.head.pre1", c, c, 1, 1, pw),
        ];
        let post = [
            Conv::init(store, rng, "fine.head.post0", c, c, 1, 1, pw),
            Conv::init(store, rng, "fine.head.post1", c, c, 1, 1, pw),
        ];
        Ok(Self {
            stack,
            pre,
            post,
            confidence: Conv::init(store, rng, "fine.head.confidence", c, 1, 1, 1, pw),
            offset: Conv::init(store, rng, "fine.head.offset", c, 2, 1, 1, pw),
        })
    }
}

fn to_tokens(g: &mut Graph, win: Var) -> Result<Var> {
    let s = g.shape(win).to_vec();
    let flat = g.reshape(win, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

fn to_map(g: &mut Graph, tokens: Var, w: usize) -> Result<Var> {
    let t = g.transpose(tokens)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, w, w])
}

/// Predicts a pixel offset `[K, 2]` for the B-side point of every window pair
/// and a confidence `[K, 1]` in `(0, 1)`.
pub fn fine_refine(g: &mut Graph, p: &Bound, params: &FineParams, wins: &FineWindows) -> Result<(Var, Var)> {
    if wins.is_empty() {
        return Err(Error::InvalidArgument("fine refinement needs at least one window".into()));
    }
    let w = wins.size;
    let coords = grid_coords(w, w);
    let mut offsets = Vec::with_capacity(wins.len());
    let mut confs = Vec::with_capacity(wins.len());
    for (&wa, &wb) in wins.a.iter().zip(&wins.b) {
        let a = TokenSeq {
            tokens: to_tokens(g, wa)?,
            coords: coords.clone(),
        };
        let b = TokenSeq {
            tokens: to_tokens(g, wb)?,
            coords: coords.clone(),
        };
        let (a, b) = interleave(g, p, &params.stack, a, b)?;
        let ma = to_map(g, a.tokens, w)?;
        let mb = to_map(g, b.tokens, w)?;
        let mut h = g.concat(&[ma, mb], 0)?;
        for conv in &params.pre {
            h = conv.apply(g, p, h)?;
            h = g.gelu(h);
        }
        h = g.max_pool_global(h)?;
        for conv in &params.post {
            h = conv.apply(g, p, h)?;
            h = g.gelu(h);
        }
        let c = params.confidence.apply(g, p, h)?;
        let c = g.sigmoid(c);
        confs.push(g.reshape(c, &[1, 1])?);
        let o = params.offset.apply(g, p, h)?;
        offsets.push(g.reshape(o, &[1, 2])?);
    }
    Ok((g.concat(&offsets, 0)?, g.concat(&confs, 0)?))
}

/// Shifts every B-side point by its predicted offset and drops matches whose
/// confidence is below `min_confidence`. A-side points are never modified.
pub fn assemble_fine_matches(coarse: &MatchSet, offsets: &Tensor, confidence: &Tensor, min_confidence: f64) -> Result<MatchSet> {
    let k = coarse.len();
    if offsets.numel() != 2 * k || confidence.numel() != k {
        return Err(Error::shape("assemble_fine_matches", offsets.shape(), confidence.shape()));
    }
    let mut out = MatchSet::empty(MatchLevel::Fine);
    for i in 0..k {
        let c = confidence.data()[i];
        if c < min_confidence {
            continue;
        }
        let (pa, pb) = coarse.pairs[i];
        let d = &offsets.data()[2 * i..2 * i + 2];
        out.pairs.push((pa, [pb[0] + d[0], pb[1] + d[1]]));
        out.confidence.push(c);
        if let Some(&ij) = coarse.indices.get(i) {
            out.indices.push(ij);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn mnn_examples() {
        let g = t2(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(mutual_nearest(&g, 0.2), vec![(0, 0), (1, 1)]);
        let g = t2(&[&[0.5, 0.6], &[0.7, 0.4]]);
        assert_eq!(mutual_nearest(&g, 0.2), vec![(0, 1), (1, 0)]);
        assert!(mutual_nearest(&g, 1.0).is_empty());
    }

    #[test]
    fn ties_reject() {
        let g = t2(&[&[0.5, 0.5], &[0.1, 0.2]]);
        assert_eq!(mutual_nearest(&g, 0.0), vec![]);
    }

    #[test]
    fn dual_softmax_examples() {
        let mut gr = Graph::new();
        let s = gr.constant(Tensor::zeros(&[2, 2]));
        let p = dual_softmax(&mut gr, s).unwrap();
        assert_eq!(gr.value(p).data(), &[0.25; 4]);
        let s = gr.constant(t2(&[&[2.0, 0.0], &[0.0, 2.0]]));
        let p = dual_softmax(&mut gr, s).unwrap();
        let hi = (2f64.exp() / (2f64.exp() + 1.0)).powi(2);
        let lo = (1.0 / (2f64.exp() + 1.0)).powi(2);
        let d = gr.value(p).data();
        assert!((d[0] - hi).abs() < 1e-15 && (d[1] - lo).abs() < 1e-15);
        assert!((d[0] - 0.7758).abs() < 1e-4 && (d[1] - 0.0142).abs() < 1e-4);
    }

    #[test]
    fn score_matrix_zero_and_scaled() {
        let mut g = Graph::new();
        let fa = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let fb = g.constant(Tensor::zeros(&[2, 4]));
        let s = score_matrix(&mut g, fa, fb, true).unwrap();
        assert_eq!(g.shape(s), &[3, 2]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[2, 5]));
        assert!(score_matrix(&mut g, fa, bad, true).is_err());
    }

    #[test]
    fn fine_center_rounding() {
        assert_eq!(fine_center([3.5, 3.5]), [2, 2]);
        assert_eq!(fine_center([11.5, 3.0]), [6, 2]);
        // 2.5 → 1.25 → 1; 1.0 → 0.5 → tie toward +∞ → 1
        assert_eq!(fine_center([2.5, 1.0]), [1, 1]);
    }

    #[test]
    fn no_matches_no_windows() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[4, 8, 8]));
        let w = crop_fine_windows(&mut g, &[], f, f, 5).unwrap();
        assert!(w.is_empty());
        assert!(crop_fine_windows(&mut g, &[], f, f, 4).is_err());
    }

    #[test]
    fn interior_window_equals_slice() {
        let mut g = Graph::new();
        let map = Tensor::from_fn(&[3, 10, 12], |i| i as f64);
        let f = g.constant(map.clone());
        let pair = ([13.0, 11.0], [9.5, 8.5]);
        let w = crop_fine_windows(&mut g, &[pair], f, f, 5).unwrap();
        let [cx, cy] = fine_center(pair.0);
        let crop = g.value(w.a[0]);
        for c in 0..3 {
            for dy in 0..5 {
                for dx in 0..5 {
                    let (y, x) = ((cy - 2 + dy) as usize, (cx - 2 + dx) as usize);
                    assert_eq!(crop.data()[(c * 5 + dy as usize) * 5 + dx as usize], map.data()[(c * 10 + y) * 12 + x]);
                }
            }
        }
    }

    #[test]
    fn assemble_examples() {
        let coarse = MatchSet {
            level: MatchLevel::Coarse,
            pairs: vec![([3.5, 3.5], [11.5, 3.5]), ([19.5, 3.5], [27.5, 11.5])],
            confidence: vec![0.9, 0.8],
            indices: vec![(0, 1), (2, 7)],
        };
        let zero = Tensor::zeros(&[2, 2]);
        let conf = Tensor::new(&[2, 1], vec![0.7, 0.4]).unwrap();
        let f = assemble_fine_matches(&coarse, &zero, &conf, 0.0).unwrap();
        assert_eq!(f.pairs, coarse.pairs);
        let off = Tensor::new(&[2, 2], vec![3.0, -4.0, 0.0, 0.0]).unwrap();
        let f = assemble_fine_matches(&coarse, &off, &conf, 0.5).unwrap();
        assert_eq!(f.pairs, vec![([3.5, 3.5], [14.5, -0.5])]);
        assert!(assemble_fine_matches(&coarse, &off, &conf, 1.0).unwrap().is_empty());
    }
}
