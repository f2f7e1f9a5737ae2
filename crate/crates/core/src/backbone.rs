//! CNN+FPN encoder producing stride-8 coarse and stride-2 fine feature maps.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, ParamStore};
use crate::rng::XorShift64Star;
use crate::tensor::{ConvMode, Graph, Tensor, Var};

/// Spatial stride of the coarse level.
pub const COARSE_STRIDE: usize = 8;
/// Spatial stride of the fine level.
pub const FINE_STRIDE: usize = 2;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.clone()).expect("image buffer")
    }

    /// Errors unless both dimensions are positive multiples of the coarse
    /// stride; the message states the padding needed.
    pub fn check_dims(&self) -> Result<()> {
        let pad = |d: usize| (COARSE_STRIDE - d % COARSE_STRIDE) % COARSE_STRIDE;
        if self.height == 0 || self.width == 0 || pad(self.height) != 0 || pad(self.width) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} (HxW) must have dimensions divisible by {COARSE_STRIDE}; pad by {} rows and {} columns",
                self.height,
                self.width,
                pad(self.height),
                pad(self.width)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_width: usize,
    pub stage_widths: [usize; 3],
    pub coarse_dim: usize,
    pub fine_dim: usize,
}

impl BackboneConfig {
    /// Full-scale widths: stem 96, stages 96/128/192, coarse 192, fine 96.
    pub fn full() -> Self {
        Self {
            stem_width: 96,
            stage_widths: [96, 128, 192],
            coarse_dim: 192,
            fine_dim: 96,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stem_width: 16,
            stage_widths: [16, 24, 32],
            coarse_dim: 16,
            fine_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stem_width,
            self.stage_widths[0],
            self.stage_widths[1],
            self.stage_widths[2],
            self.coarse_dim,
            self.fine_dim,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("backbone widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn init(store: &mut ParamStore, rng: &mut XorShift64Star, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv1 = Conv::init(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, ConvMode::Standard);
        let conv2 = Conv::init(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, ConvMode::Standard);
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            Conv::init(store, rng, &format!("{name}.shortcut"), c_in, c_out, 1, stride, ConvMode::Standard)
        });
        Self { conv1, conv2, shortcut }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x)?;
        let h = g.gelu(h);
        let h = self.conv2.apply(g, p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.apply(g, p, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.gelu(y))
    }
}

/// Parameter layout of the encoder.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    stem: Conv,
    stages: [Vec<ResBlock>; 3],
    lateral3: Conv,
    lateral2: Conv,
    smooth2: Conv,
    lateral1: Conv,
    smooth1: Conv,
}

/// Stage strides after the stride-2 stem; the cumulative strides are 2, 4, 8.
const STAGE_STRIDES: [usize; 3] = [1, 2, 2];
const BLOCKS_PER_STAGE: usize = 2;

impl BackboneParams {
    pub fn init(store: &mut ParamStore, rng: &mut XorShift64Star, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::init(store, rng, "backbone.stem", 1, cfg.stem_width, 3, 2, ConvMode::Standard);
        let mut c_in = cfg.stem_width;
        let stages: [Vec<ResBlock>; 3] = std::array::from_fn(|s| {
            let c_out = cfg.stage_widths[s];
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|b| {
                    let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                    let blk = ResBlock::init(store, rng, &format!("backbone.stage{}.block{b}", s + 1), c_in, c_out, stride);
                    c_in = c_out;
                    blk
                })
                .collect();
            blocks
        });
        let [w1, w2, w3] = cfg.stage_widths;
        let pw = ConvMode::Pointwise;
        let st = ConvMode::Standard;
        Ok(Self {
            stem,
            stages,
            lateral3: Conv::init(store, rng, "backbone.fpn.lateral3", w3, cfg.coarse_dim, 1, 1, pw),
            lateral2: Conv::init(store, rng, "backbone.fpn.lateral2", w2, cfg.coarse_dim, 1, 1, pw),
            smooth2: Conv::init(store, rng, "backbone.fpn.smooth2", cfg.coarse_dim, w2, 3, 1, st),
            lateral1: Conv::init(store, rng, "backbone.fpn.lateral1", w1, w2, 1, 1, pw),
            smooth1: Conv::init(store, rng, "backbone.fpn.smooth1", w2, cfg.fine_dim, 3, 1, st),
        })
    }

    /// Stem convolution weight, exposed for gradient checks.
    pub fn stem_weight(&self) -> crate::params::ParamId {
        self.stem.weight
    }
}

/// Coarse and fine feature maps of one image plus its coarse keypoints.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[coarse_dim, H/8, W/8]`.
    pub coarse: Var,
    /// `[fine_dim, H/2, W/2]`.
    pub fine: Var,
    /// Pixel coordinates `(x, y)` of coarse cell centres, row-major.
    pub keypoints: Vec<[f64; 2]>,
}

/// Runs the encoder and the top-down FPN on one image.
pub fn extract_features(
    g: &mut Graph,
    p: &Bound,
    params: &BackboneParams,
    img: &Image,
) -> Result<FeaturePyramid> {
    img.check_dims()?;
    let x = g.constant(img.to_tensor());
    let h = params.stem.apply(g, p, x)?;
    let mut h = g.gelu(h);
    let mut levels = Vec::with_capacity(3);
    for stage in &params.stages {
        for blk in stage {
            h = blk.apply(g, p, h)?;
        }
        levels.push(h);
    }
    let p3 = params.lateral3.apply(g, p, levels[2])?;
    let l2 = params.lateral2.apply(g, p, levels[1])?;
    let up3 = g.upsample2(p3)?;
    let m2 = g.add(l2, up3)?;
    let m2 = g.gelu(m2);
    let p2 = params.smooth2.apply(g, p, m2)?;
    let l1 = params.lateral1.apply(g, p, levels[0])?;
    let up2 = g.upsample2(p2)?;
    let m1 = g.add(l1, up2)?;
    let m1 = g.gelu(m1);
    let p1 = params.smooth1.apply(g, p, m1)?;
    Ok(FeaturePyramid {
        coarse: p3,
        fine: p1,
        keypoints: grid_keypoints(img.height, img.width, COARSE_STRIDE)?,
    })
}

/// Centres of the `stride × stride` cells of an `h × w` image in row-major
/// order: cell `(r, c)` maps to `(stride·c + (stride−1)/2, stride·r + (stride−1)/2)`.
pub fn grid_keypoints(h: usize, w: usize, stride: usize) -> Result<Vec<[f64; 2]>> {
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is not divisible by stride {stride}"
        )));
    }
    let off = (stride as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity((h / stride) * (w / stride));
    for r in 0..h / stride {
        for c in 0..w / stride {
            out.push([(stride * c) as f64 + off, (stride * r) as f64 + off]);
        }
    }
    Ok(out)
}
