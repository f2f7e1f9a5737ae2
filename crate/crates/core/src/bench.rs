//! Cost of one attention layer as a function of token count: analytic
//! multiply-accumulate counts from the ledger plus measured wall time.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, ParamStore};
use crate::rng::XorShift64Star;
use crate::slimformer::{grid_coords, rope_encode, vector_attention, RopeTable, SlimConfig, SlimParams, TokenSeq};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttentionKind {
    /// Global-vector attention, linear in the token count.
    Vector,
    /// Softmax(QKᵀ)V reference, quadratic in the token count.
    Vanilla,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vector => "vector",
            Self::Vanilla => "vanilla",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Self::Vector),
            "vanilla" => Ok(Self::Vanilla),
            _ => Err(Error::Config(format!("unknown attention kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub n: usize,
    pub macs: u64,
    pub seconds: f64,
}

/// One attention layer of either kind with shared projection weights.
pub struct Layer {
    store: ParamStore,
    params: SlimParams,
    cfg: SlimConfig,
    rope: RopeTable,
}

impl Layer {
    pub fn new(channels: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = XorShift64Star::new(0xbe7c);
        let cfg = SlimConfig::new(channels);
        let params = SlimParams::init(&mut store, &mut rng, "bench", &cfg)?;
        Ok(Self {
            store,
            params,
            cfg,
            rope: RopeTable::new(channels)?,
        })
    }

    fn vanilla(&self, g: &mut Graph, p: &Bound, x: &TokenSeq) -> Result<Var> {
        let proj = |g: &mut Graph, l: &Linear| l.apply(g, p, x.tokens);
        let q = proj(g, &self.params.wq)?;
        let q = rope_encode(g, q, &x.coords, &self.rope)?;
        let k = proj(g, &self.params.wk)?;
        let k = rope_encode(g, k, &x.coords, &self.rope)?;
        let v = proj(g, &self.params.wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.cfg.channels as f64).sqrt());
        let a = g.softmax(s, 1)?;
        let av = g.matmul(a, v)?;
        let m = self.params.mlp.apply(g, p, av)?;
        g.add(m, q)
    }

    /// Builds and evaluates the layer on `x`; returns the recorded MACs.
    pub fn run(&self, kind: AttentionKind, x: &Tensor) -> Result<u64> {
        let n = x.shape()[0];
        let side = (n as f64).sqrt().ceil() as usize;
        let mut coords = grid_coords(n.div_ceil(side), side);
        coords.truncate(n);
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let seq = TokenSeq {
            tokens: g.constant(x.clone()),
            coords,
        };
        g.ledger_mut().reset();
        match kind {
            AttentionKind::Vector => vector_attention(&mut g, &p, &self.params, &self.cfg, &self.rope, &seq, &seq)?,
            AttentionKind::Vanilla => self.vanilla(&mut g, &p, &seq)?,
        };
        Ok(g.ledger().total())
    }
}

/// Seeded `n × c` token matrix with entries in `[-1, 1)`.
pub fn tokens(n: usize, c: usize) -> Tensor {
    let mut rng = XorShift64Star::new(n as u64);
    Tensor::from_fn(&[n, c], |_| rng.uniform(-1.0, 1.0))
}

/// Analytic multiply-accumulate count of one layer over `n` tokens of width `c`.
pub fn attention_macs(kind: AttentionKind, n: usize, c: usize) -> Result<u64> {
    Layer::new(c)?.run(kind, &tokens(n, c))
}

/// MACs and median wall time over `runs` evaluations for every kind and `n`.
pub fn bench_attention_scaling(ns: &[usize], c: usize, kinds: &[AttentionKind], runs: usize) -> Result<Vec<BenchRow>> {
    if ns.windows(2).any(|w| w[1] <= w[0]) || ns.first() == Some(&0) {
        return Err(Error::InvalidArgument("token counts must be positive and ascending".into()));
    }
    let layer = Layer::new(c)?;
    let mut rows = Vec::new();
    for &kind in kinds {
        for &n in ns {
            let x = tokens(n, c);
            let macs = layer.run(kind, &x)?;
            let mut times: Vec<f64> = (0..runs.max(1))
                .map(|_| {
                    let t = Instant::now();
                    let _ = layer.run(kind, &x);
                    t.elapsed().as_secs_f64()
                })
                .collect();
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                kind,
                n,
                macs,
                seconds: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}

/// Checks the scaling claims over consecutive rows of the same kind whose
/// token counts double: exactly 2 for the vector kind, in `(2, 4]` and
/// non-decreasing for the vanilla kind.
pub fn check_mac_ratios(rows: &[BenchRow]) -> Result<()> {
    for kind in [AttentionKind::Vector, AttentionKind::Vanilla] {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.kind == kind).collect();
        let mut prev_ratio = 0.0;
        for w in mine.windows(2) {
            if w[1].n != 2 * w[0].n {
                continue;
            }
            let ratio = w[1].macs as f64 / w[0].macs as f64;
            let ok = match kind {
                AttentionKind::Vector => w[1].macs == 2 * w[0].macs,
                AttentionKind::Vanilla => ratio > 2.0 && ratio <= 4.0 && ratio >= prev_ratio,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{} MACs ratio {ratio} from N={} to N={}",
                    kind.as_str(),
                    w[0].n,
                    w[1].n
                )));
            }
            prev_ratio = ratio;
        }
    }
    Ok(())
}

pub const CSV_HEADER: &str = "kind,N,macs,seconds";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.kind.as_str(), r.n, r.macs, r.seconds);
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format(format!("benchmark CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad benchmark row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(BenchRow {
                kind: f[0].parse()?,
                n: f[1].parse().map_err(|_| bad())?,
                macs: f[2].parse().map_err(|_| bad())?,
                seconds: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_macs_double_exactly() {
        let a = attention_macs(AttentionKind::Vector, 512, 64).unwrap();
        let b = attention_macs(AttentionKind::Vector, 1024, 64).unwrap();
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn vanilla_ratio_near_four() {
        let a = attention_macs(AttentionKind::Vanilla, 512, 64).unwrap() as f64;
        let b = attention_macs(AttentionKind::Vanilla, 1024, 64).unwrap() as f64;
        let r = b / a;
        assert!(r > 3.5 && r <= 4.0, "{r}");
    }

    #[test]
    fn csv_round_trip_and_checks() {
        let rows = bench_attention_scaling(&[16, 32, 64], 8, &[AttentionKind::Vector, AttentionKind::Vanilla], 1).unwrap();
        assert_eq!(rows.len(), 6);
        check_mac_ratios(&rows).unwrap();
        assert_eq!(parse_csv(&rows_to_csv(&rows)).unwrap(), rows);
        assert!(bench_attention_scaling(&[32, 16], 8, &[AttentionKind::Vector], 1).is_err());
    }
}
