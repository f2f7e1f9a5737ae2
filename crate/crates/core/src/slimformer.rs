//! Vector-based attention layers with rotary relative position encoding,
//! a GELU feed-forward block and a learnable residual scale, interleaved as
//! self/cross passes over two token sequences.
//!
//! Per layer and role the update is
//!
//! ```text
//! Q = U·Wq   K = R·Wk   V = R·Wv
//! Q~ = rope(Q)   K~ = rope(K)
//! q = softmax_tokens(Q~·wq / sqrt(d))        (N weights)
//! Qg = qᵀ·Q~                                   (global query, 1 × C)
//! KQ = Qg ⊙ K~
//! k = softmax_tokens(KQ·wk / sqrt(d))
//! Kg = kᵀ·KQ                                   (global key, 1 × C)
//! M  = mlp(Kg ⊙ V) + Q~
//! U' = U + xi · ffn([U ‖ M])
//! ```
//!
//! Every step is a matrix-vector or row-broadcast product, so the MAC count
//! of a layer is linear in the token count.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::XorShift64Star;
use crate::tensor::{Graph, Tensor, Var};

/// How token positions enter the attention layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Rotary encoding of queries and keys inside every layer.
    Relative,
    /// Fixed sinusoidal features added once before the first layer.
    Absolute,
    /// No positional information.
    None,
}

impl PositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionMode::Relative => "relative",
            PositionMode::Absolute => "absolute",
            PositionMode::None => "none",
        }
    }
}

impl std::str::FromStr for PositionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(PositionMode::Relative),
            "absolute" => Ok(PositionMode::Absolute),
            "none" => Ok(PositionMode::None),
            other => Err(Error::Config(format!("unknown position mode {other:?}"))),
        }
    }
}

/// Tokens with their integer grid coordinates `(x, y)` = `(col, row)`.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    /// `[n, c]`.
    pub tokens: Var,
    pub coords: Vec<[usize; 2]>,
}

/// Row-major grid coordinates of an `h × w` token grid.
pub fn grid_coords(h: usize, w: usize) -> Vec<[usize; 2]> {
    (0..h * w).map(|i| [i % w, i / w]).collect()
}

/// Rotary angle table for a `c`-channel token: channels `[0, c/2)` encode x,
/// `[c/2, c)` encode y; within each half, pair `k` (0-based) rotates by
/// `coord · θ_k` with `θ_k = 10000^{-2k/(c/2)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    channels: usize,
    thetas: Vec<f64>,
}

impl RopeTable {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs channels divisible by 4, got {channels}"
            )));
        }
        let half = channels / 2;
        let thetas = (0..half / 2)
            .map(|k| 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64))
            .collect();
        Ok(Self { channels, thetas })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Angles per pair within one axis half.
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Cosine and sine tables, `[n, c/2]` each, for `rotate_pairs`.
    pub fn cos_sin(&self, coords: &[[usize; 2]]) -> (Vec<f64>, Vec<f64>) {
        let pairs = self.channels / 2;
        let per_axis = self.thetas.len();
        let mut cos = Vec::with_capacity(coords.len() * pairs);
        let mut sin = Vec::with_capacity(coords.len() * pairs);
        for c in coords {
            for axis in 0..2 {
                for &t in &self.thetas {
                    let a = c[axis] as f64 * t;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        debug_assert_eq!(cos.len(), coords.len() * 2 * per_axis);
        (cos, sin)
    }

    /// Additive sinusoidal features `[n, c]`: for axis half and pair `k`,
    /// `(sin(coord·θ_k), cos(coord·θ_k))`.
    pub fn sinusoid(&self, coords: &[[usize; 2]]) -> Tensor {
        let mut data = Vec::with_capacity(coords.len() * self.channels);
        for c in coords {
            for axis in 0..2 {
                for &t in &self.thetas {
                    let a = c[axis] as f64 * t;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
        Tensor::new(&[coords.len(), self.channels], data).expect("sinusoid table")
    }
}

/// Applies the rotary encoding to `[n, c]` tokens at `coords`.
pub fn rope_encode(g: &mut Graph, x: Var, coords: &[[usize; 2]], table: &RopeTable) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != table.channels || s[0] != coords.len() {
        return Err(Error::shape("rope_encode", s, &[coords.len(), table.channels]));
    }
    let (cos, sin) = table.cos_sin(coords);
    g.rotate_pairs(x, &cos, &sin)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlimConfig {
    pub channels: usize,
    pub heads: usize,
    /// FFN expansion rate γ; hidden width is `γ·channels`.
    pub ffn_scale: usize,
    pub position: PositionMode,
    pub xi_init: f64,
    /// When false, ξ is pinned to 1 and not trained.
    pub xi_enabled: bool,
}

impl SlimConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            heads: 1,
            ffn_scale: 4,
            position: PositionMode::Relative,
            xi_init: 0.1,
            xi_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "attention width must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.ffn_scale == 0 {
            return Err(Error::Config("ffn scale must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Parameters of one attention layer (one role).
#[derive(Clone, Debug)]
pub struct SlimParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Query importance `C -> heads`.
    pub q_importance: Linear,
    /// Key importance `C -> heads`.
    pub k_importance: Linear,
    /// Message MLP `C -> C`.
    pub mlp: Linear,
    /// `2C -> γC`.
    pub ffn_in: Linear,
    /// `γC -> C`.
    pub ffn_out: Linear,
    /// Residual scale, shape `[1]`.
    pub xi: ParamId,
}

impl SlimParams {
    pub fn init(store: &mut ParamStore, rng: &mut XorShift64Star, name: &str, cfg: &SlimConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = cfg.ffn_scale * c;
        let xi_val = if cfg.xi_enabled { cfg.xi_init } else { 1.0 };
        Ok(Self {
            wq: Linear::init(store, rng, &format!("{name}.wq"), c, c, false),
            wk: Linear::init(store, rng, &format!("{name}.wk"), c, c, false),
            wv: Linear::init(store, rng, &format!("{name}.wv"), c, c, false),
            q_importance: Linear::init(store, rng, &format!("{name}.q_importance"), c, cfg.heads, false),
            k_importance: Linear::init(store, rng, &format!("{name}.k_importance"), c, cfg.heads, false),
            mlp: Linear::init(store, rng, &format!("{name}.mlp"), c, c, true),
            ffn_in: Linear::init(store, rng, &format!("{name}.ffn_in"), 2 * c, hidden, true),
            ffn_out: Linear::init(store, rng, &format!("{name}.ffn_out"), hidden, c, true),
            xi: store.add(format!("{name}.xi"), Tensor::scalar(xi_val), cfg.xi_enabled),
        })
    }
}

/// Softmax-weighted token summary per head: `[n, c]` → `[1, c]`.
fn global_vector(g: &mut Graph, p: &Bound, imp: &Linear, x: Var, cfg: &SlimConfig) -> Result<Var> {
    let logits = imp.apply(g, p, x)?;
    let logits = g.scale(logits, 1.0 / (cfg.head_dim() as f64).sqrt());
    let weights = g.softmax(logits, 0)?;
    let wt = g.transpose(weights)?;
    if cfg.heads == 1 {
        return g.matmul(wt, x);
    }
    let d = cfg.head_dim();
    let mut parts = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wh = g.narrow(wt, 0, h, 1)?;
        let xh = g.narrow(x, 1, h * d, d)?;
        parts.push(g.matmul(wh, xh)?);
    }
    g.concat(&parts, 1)
}

/// Vector-based attention message for queries `u` attending to `r`.
pub fn vector_attention(
    g: &mut Graph,
    p: &Bound,
    params: &SlimParams,
    cfg: &SlimConfig,
    rope: &RopeTable,
    u: &TokenSeq,
    r: &TokenSeq,
) -> Result<Var> {
    let (su, sr) = (g.shape(u.tokens).to_vec(), g.shape(r.tokens).to_vec());
    if su.len() != 2 || sr.len() != 2 || su[1] != cfg.channels || sr[1] != cfg.channels {
        return Err(Error::shape("vector_attention", &su, &sr));
    }
    if su[0] != sr[0] || su[0] == 0 {
        // The message is added token-by-token to the query sequence.
        return Err(Error::shape("vector_attention (token counts)", &su, &sr));
    }
    let q = params.wq.apply(g, p, u.tokens)?;
    let k = params.wk.apply(g, p, r.tokens)?;
    let v = params.wv.apply(g, p, r.tokens)?;
    let (q, k) = if cfg.position == PositionMode::Relative {
        (rope_encode(g, q, &u.coords, rope)?, rope_encode(g, k, &r.coords, rope)?)
    } else {
        (q, k)
    };
    let q_global = global_vector(g, p, &params.q_importance, q, cfg)?;
    let kq = g.mul(k, q_global)?;
    let k_global = global_vector(g, p, &params.k_importance, kq, cfg)?;
    let lambda = g.mul(v, k_global)?;
    let m = params.mlp.apply(g, p, lambda)?;
    g.add(m, q)
}

/// Feed-forward block on `[u ‖ m]`: `2C → γC → GELU → C`.
pub fn ffn(g: &mut Graph, p: &Bound, params: &SlimParams, u: Var, m: Var) -> Result<Var> {
    if g.shape(u) != g.shape(m) {
        return Err(Error::shape("ffn", g.shape(u), g.shape(m)));
    }
    let cat = g.concat(&[u, m], 1)?;
    let h = params.ffn_in.apply(g, p, cat)?;
    let h = g.gelu(h);
    params.ffn_out.apply(g, p, h)
}

/// One attention layer with scaled residual: `U + ξ·ffn(U, attn(U, R))`.
pub fn slim_layer(
    g: &mut Graph,
    p: &Bound,
    params: &SlimParams,
    cfg: &SlimConfig,
    rope: &RopeTable,
    u: &TokenSeq,
    r: &TokenSeq,
) -> Result<TokenSeq> {
    let m = vector_attention(g, p, params, cfg, rope, u, r)?;
    let msg = ffn(g, p, params, u.tokens, m)?;
    let scaled = g.mul(msg, p[params.xi])?;
    Ok(TokenSeq {
        tokens: g.add(u.tokens, scaled)?,
        coords: u.coords.clone(),
    })
}

/// Parameters of one interleave step: self(A), self(B), cross(A←B), cross(B←A).
#[derive(Clone, Debug)]
pub struct InterleaveLayer {
    pub self_a: SlimParams,
    pub self_b: SlimParams,
    pub cross_a: SlimParams,
    pub cross_b: SlimParams,
}

#[derive(Clone, Debug)]
pub struct SlimStack {
    pub cfg: SlimConfig,
    pub layers: Vec<InterleaveLayer>,
    pub rope: RopeTable,
}

impl SlimStack {
    pub fn init(store: &mut ParamStore, rng: &mut XorShift64Star, name: &str, cfg: &SlimConfig, depth: usize) -> Result<Self> {
        cfg.validate()?;
        if depth == 0 {
            return Err(Error::Config("at least one attention layer is required".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let mut role = |r: &str| SlimParams::init(store, rng, &format!("{name}.layer{l}.{r}"), cfg);
            layers.push(InterleaveLayer {
                self_a: role("self_a")?,
                self_b: role("self_b")?,
                cross_a: role("cross_a")?,
                cross_b: role("cross_b")?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            rope: RopeTable::new(cfg.channels)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Runs `stack.depth()` interleave steps. Within a step the updates are
/// sequential: both self passes, then A attends to the self-updated B, then B
/// attends to the freshly updated A.
pub fn interleave(g: &mut Graph, p: &Bound, stack: &SlimStack, a: TokenSeq, b: TokenSeq) -> Result<(TokenSeq, TokenSeq)> {
    let cfg = &stack.cfg;
    let rope = &stack.rope;
    let (mut a, mut b) = (a, b);
    if cfg.position == PositionMode::Absolute {
        let pa = g.constant(rope.sinusoid(&a.coords));
        let pb = g.constant(rope.sinusoid(&b.coords));
        a.tokens = g.add(a.tokens, pa)?;
        b.tokens = g.add(b.tokens, pb)?;
    }
    for layer in &stack.layers {
        let a1 = slim_layer(g, p, &layer.self_a, cfg, rope, &a, &a)?;
        let b1 = slim_layer(g, p, &layer.self_b, cfg, rope, &b, &b)?;
        let a2 = slim_layer(g, p, &layer.cross_a, cfg, rope, &a1, &b1)?;
        let b2 = slim_layer(g, p, &layer.cross_b, cfg, rope, &b1, &a2)?;
        a = a2;
        b = b2;
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(c: usize) -> (ParamStore, SlimParams, SlimConfig, RopeTable) {
        let mut store = ParamStore::new();
        let mut rng = XorShift64Star::new(5);
        let cfg = SlimConfig::new(c);
        let p = SlimParams::init(&mut store, &mut rng, "t", &cfg).unwrap();
        (store, p, cfg, RopeTable::new(c).unwrap())
    }

    #[test]
    fn theta_table() {
        let t = RopeTable::new(16).unwrap();
        assert_eq!(t.thetas()[0], 1.0);
        assert!(t.thetas().windows(2).all(|w| w[1] < w[0]));
        assert!(RopeTable::new(6).is_err());
    }

    #[test]
    fn rope_zero_coordinate_is_identity() {
        let t = RopeTable::new(8).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 8], |i| i as f64 - 3.0));
        let y = rope_encode(&mut g, x, &[[0, 0], [0, 0]], &t).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn rope_first_pair_closed_form() {
        // 4 channels: the x half is one pair with θ = 1.
        let t = RopeTable::new(4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let y = rope_encode(&mut g, x, &[[1, 0]], &t).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1f64.cos()).abs() < 1e-15);
        assert!((d[1] - 1f64.sin()).abs() < 1e-15);
        assert!((d[0] - 0.5403).abs() < 1e-4 && (d[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (store, p, cfg, rope) = setup(8);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let u = TokenSeq {
            tokens: g.constant(Tensor::zeros(&[4, 8])),
            coords: grid_coords(2, 2),
        };
        let r = TokenSeq {
            tokens: g.constant(Tensor::zeros(&[4, 12])),
            coords: grid_coords(2, 2),
        };
        assert!(matches!(
            vector_attention(&mut g, &b, &p, &cfg, &rope, &u, &r),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identical_query_rows_give_that_row_as_global_query() {
        let (store, p, cfg, _) = setup(8);
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let q = g.constant(Tensor::from_fn(&[5, 8], |i| row[i % 8]));
        let qg = global_vector(&mut g, &b, &p.q_importance, q, &cfg).unwrap();
        for (a, e) in g.value(qg).data().iter().zip(&row) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn ffn_widths() {
        let (store, p, _, _) = setup(192);
        assert_eq!(store.get(p.ffn_in.weight).shape(), &[384, 768]);
        assert_eq!(store.get(p.ffn_out.weight).shape(), &[768, 192]);
    }
}
