use std::collections::BTreeMap;
use std::fmt;

/// Operation families tracked by the [`FlopLedger`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    Conv,
    DepthwiseConv,
    Elementwise,
    Rotary,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv => "conv",
            OpKind::DepthwiseConv => "depthwise_conv",
            OpKind::Elementwise => "elementwise",
            OpKind::Rotary => "rotary",
        };
        f.write_str(s)
    }
}

/// Multiply-accumulate counts of the forward ops recorded on a graph.
/// Additions and activations are not counted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    counts: BTreeMap<OpKind, u64>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: OpKind, macs: u64) {
        *self.counts.entry(kind).or_insert(0) += macs;
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }
}
