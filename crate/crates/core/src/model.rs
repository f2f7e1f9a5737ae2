//! The assembled matcher: configuration, parameters, the training loss of one
//! scene and inference on an image pair.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::backbone::{extract_features, BackboneConfig, BackboneParams, Image};
use crate::error::{Error, Result};
use crate::ftm::{feature_transition, FtmParams};
use crate::losses::{classification_loss, fine_targets, matching_loss, regression_loss, total_loss, LossWeights};
use crate::matching::{
    assemble_fine_matches, crop_fine_windows, dual_softmax, extract_coarse_matches, fine_refine, mutual_nearest,
    score_matrix, FineParams, MatchSet,
};
use crate::params::{Bound, ParamStore};
use crate::rng::XorShift64Star;
use crate::slimformer::{grid_coords, interleave, PositionMode, SlimConfig, SlimStack, TokenSeq};
use crate::synthetic::PlanarScene;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Gd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Self::Gd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected gd or adam)"))),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gd => "gd",
            Self::Adam => "adam",
        }
    }
}

/// Everything needed to rebuild a model and rerun its training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    /// Coarse interleave steps `L`.
    pub depth: usize,
    /// Window interleave steps `L₂`.
    pub fine_depth: usize,
    pub heads: usize,
    pub ffn_scale: usize,
    /// Coarse match threshold `λ`.
    pub threshold: f64,
    /// Fine window size `w`.
    pub window: usize,
    /// Fine confidence gate `τ_c`.
    pub min_confidence: f64,
    /// Divide coarse scores by `sqrt(C)`.
    pub scaled_scores: bool,
    pub loss: LossWeights,
    pub position: PositionMode,
    pub xi_enabled: bool,
    pub xi_init: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Train on a random label-preserving variant of each scene (dihedral
    /// transform, view swap) drawn per epoch.
    pub augment: bool,
    /// Decay the learning rate along a half cosine to zero over the run.
    pub cosine_lr: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            depth: 6,
            fine_depth: 1,
            heads: 1,
            ffn_scale: 4,
            threshold: 0.2,
            window: 5,
            min_confidence: 0.5,
            scaled_scores: true,
            loss: LossWeights::default(),
            position: PositionMode::Relative,
            xi_enabled: true,
            xi_init: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 8,
            clip_norm: 0.5,
            augment: false,
            cosine_lr: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Small widths for CPU training: coarse 16, fine 8, two coarse steps,
    /// augmented scenes.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            depth: 2,
            augment: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.coarse_slim().validate()?;
        self.fine_slim().validate()?;
        self.loss.validate()?;
        if self.depth == 0 || self.fine_depth == 0 {
            return Err(Error::Config("attention depths must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window size must be odd, got {}", self.window)));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("match threshold must be in [0, 1), got {}", self.threshold)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.clip_norm <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate, clip norm and batch size must be positive".into()));
        }
        Ok(())
    }

    fn slim(&self, channels: usize) -> SlimConfig {
        SlimConfig {
            channels,
            heads: self.heads,
            ffn_scale: self.ffn_scale,
            position: self.position,
            xi_init: self.xi_init,
            xi_enabled: self.xi_enabled,
        }
    }

    pub fn coarse_slim(&self) -> SlimConfig {
        self.slim(self.backbone.coarse_dim)
    }

    pub fn fine_slim(&self) -> SlimConfig {
        self.slim(self.backbone.fine_dim)
    }

    /// `key=value` view used by the model file header.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let l = &self.loss;
        vec![
            ("stem_width", b.stem_width.to_string()),
            (
                "stage_widths",
                format!("{},{},{}", b.stage_widths[0], b.stage_widths[1], b.stage_widths[2]),
            ),
            ("coarse_dim", b.coarse_dim.to_string()),
            ("fine_dim", b.fine_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("fine_depth", self.fine_depth.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_scale", self.ffn_scale.to_string()),
            ("threshold", self.threshold.to_string()),
            ("window", self.window.to_string()),
            ("min_confidence", self.min_confidence.to_string()),
            ("scaled_scores", self.scaled_scores.to_string()),
            ("beta", l.beta.to_string()),
            ("phi", l.phi.to_string()),
            ("alpha", l.alpha.to_string()),
            ("eta", l.eta.to_string()),
            ("psi", l.psi.to_string()),
            ("strict_negative_norm", l.strict_negative_norm.to_string()),
            ("position", self.position.as_str().to_string()),
            ("xi_enabled", self.xi_enabled.to_string()),
            ("xi_init", self.xi_init.to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("augment", self.augment.to_string()),
            ("cosine_lr", self.cosine_lr.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stem_width" => self.backbone.stem_width = parse(key, v)?,
            "stage_widths" => {
                let parts: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.backbone.stage_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs three widths")))?;
            }
            "coarse_dim" => self.backbone.coarse_dim = parse(key, v)?,
            "fine_dim" => self.backbone.fine_dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "fine_depth" => self.fine_depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_scale" => self.ffn_scale = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "min_confidence" => self.min_confidence = parse(key, v)?,
            "scaled_scores" => self.scaled_scores = parse_bool(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "phi" => self.loss.phi = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "eta" => self.loss.eta = parse(key, v)?,
            "psi" => self.loss.psi = parse(key, v)?,
            "strict_negative_norm" => self.loss.strict_negative_norm = parse_bool(key, v)?,
            "position" => self.position = v.parse()?,
            "xi_enabled" => self.xi_enabled = parse_bool(key, v)?,
            "xi_init" => self.xi_init = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "cosine_lr" => self.cosine_lr = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

/// Parameters of the whole matcher.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub ftm: FtmParams,
    pub coarse: SlimStack,
    pub fine: FineParams,
}

/// Coarse-level graph values for one pair.
#[derive(Clone, Debug)]
pub struct CoarseForward {
    /// `[N_A, N_B]` soft assignment.
    pub assign: Var,
    pub keypoints_a: Vec<[f64; 2]>,
    pub keypoints_b: Vec<[f64; 2]>,
    pub fine_a: Var,
    pub fine_b: Var,
}

/// Scalar loss terms of one scene.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub matching: Var,
    pub regression: Var,
    pub classification: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMatches {
    pub coarse: MatchSet,
    pub fine: MatchSet,
}

fn coarse_tokens(g: &mut Graph, map: Var) -> Result<TokenSeq> {
    let s = g.shape(map).to_vec();
    let flat = g.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok(TokenSeq {
        tokens: g.transpose(flat)?,
        coords: grid_coords(s[1], s[2]),
    })
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = XorShift64Star::derive(cfg.seed, 0x5eed);
        let backbone = BackboneParams::init(&mut store, &mut rng, &cfg.backbone)?;
        let ftm = FtmParams::init(&mut store, &mut rng, cfg.backbone.coarse_dim)?;
        let coarse = SlimStack::init(&mut store, &mut rng, "coarse.slim", &cfg.coarse_slim(), cfg.depth)?;
        let fine = FineParams::init(&mut store, &mut rng, &cfg.fine_slim(), cfg.fine_depth)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            ftm,
            coarse,
            fine,
        })
    }

    /// Backbone, feature transition, coarse attention and dual-softmax.
    pub fn coarse_forward(&self, g: &mut Graph, p: &Bound, a: &Image, b: &Image) -> Result<CoarseForward> {
        let fa = extract_features(g, p, &self.backbone, a)?;
        let fb = extract_features(g, p, &self.backbone, b)?;
        let ca = feature_transition(g, p, &self.ftm, fa.coarse)?;
        let cb = feature_transition(g, p, &self.ftm, fb.coarse)?;
        let ta = coarse_tokens(g, ca)?;
        let tb = coarse_tokens(g, cb)?;
        let (ta, tb) = interleave(g, p, &self.coarse, ta, tb)?;
        let s = score_matrix(g, ta.tokens, tb.tokens, self.cfg.scaled_scores)?;
        Ok(CoarseForward {
            assign: dual_softmax(g, s)?,
            keypoints_a: fa.keypoints,
            keypoints_b: fb.keypoints,
            fine_a: fa.fine,
            fine_b: fb.fine,
        })
    }

    /// Index pairs whose windows are supervised: the ground truth plus the
    /// current mutual-nearest predictions.
    pub fn supervised_pairs(&self, assign: &Tensor, scene: &PlanarScene) -> Vec<(usize, usize)> {
        let mut set: BTreeSet<(usize, usize)> = scene.gt_labels.matches.clone();
        set.extend(mutual_nearest(assign, self.cfg.threshold));
        set.into_iter().collect()
    }

    /// Training loss of one scene. `windows` fixes the supervised index pairs
    /// (otherwise [`supervised_pairs`](Self::supervised_pairs) decides).
    /// Returns `None` when the scene has no ground-truth match.
    pub fn scene_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        scene: &PlanarScene,
        windows: Option<&[(usize, usize)]>,
    ) -> Result<Option<LossTerms>> {
        if scene.gt_labels.matches.is_empty() {
            return Ok(None);
        }
        let cf = self.coarse_forward(g, p, &scene.image_a, &scene.image_b)?;
        let lm = matching_loss(g, cf.assign, &scene.gt_labels.matches, &self.cfg.loss)?;
        let idx = match windows {
            Some(w) => w.to_vec(),
            None => self.supervised_pairs(g.value(cf.assign), scene),
        };
        let pairs: Vec<_> = idx
            .iter()
            .map(|&(i, j)| (cf.keypoints_a[i], cf.keypoints_b[j]))
            .collect();
        let wins = crop_fine_windows(g, &pairs, cf.fine_a, cf.fine_b, self.cfg.window)?;
        let (offsets, conf) = fine_refine(g, p, &self.fine, &wins)?;
        let (target, labels, valid) = fine_targets(&scene.h_gt, &pairs, self.cfg.loss.psi)?;
        let lr = regression_loss(g, offsets, &target, &valid)?;
        let lc = classification_loss(g, conf, &labels)?;
        Ok(Some(LossTerms {
            total: total_loss(g, lm, lr, lc, &self.cfg.loss)?,
            matching: lm,
            regression: lr,
            classification: lc,
        }))
    }

    /// Coarse and fine matches of an image pair.
    pub fn match_pair(&self, a: &Image, b: &Image) -> Result<PairMatches> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let cf = self.coarse_forward(&mut g, &p, a, b)?;
        let coarse = extract_coarse_matches(g.value(cf.assign), self.cfg.threshold, &cf.keypoints_a, &cf.keypoints_b)?;
        if coarse.is_empty() {
            return Ok(PairMatches {
                fine: MatchSet::empty(crate::matching::MatchLevel::Fine),
                coarse,
            });
        }
        let wins = crop_fine_windows(&mut g, &coarse.pairs, cf.fine_a, cf.fine_b, self.cfg.window)?;
        let (offsets, conf) = fine_refine(&mut g, &p, &self.fine, &wins)?;
        let fine = assemble_fine_matches(&coarse, g.value(offsets), g.value(conf), self.cfg.min_confidence)?;
        Ok(PairMatches { coarse, fine })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_pair, HomographyLimits};

    #[test]
    fn config_round_trip() {
        let mut cfg = RunConfig::tiny();
        cfg.position = PositionMode::Absolute;
        cfg.loss.beta = 0.3;
        let mut back = RunConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("nope", "1").is_err());
        assert!(back.set("depth", "x").is_err());
    }

    #[test]
    fn tiny_forward_shapes() {
        let model = Model::init(&RunConfig::tiny()).unwrap();
        let scene = make_pair(32, 32, 1, &HomographyLimits::default(), 8.0).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let cf = model.coarse_forward(&mut g, &p, &scene.image_a, &scene.image_b).unwrap();
        assert_eq!(g.shape(cf.assign), &[16, 16]);
        assert_eq!(g.shape(cf.fine_a), &[8, 16, 16]);
        let terms = model.scene_loss(&mut g, &p, &scene, None).unwrap().unwrap();
        let v = g.value(terms.total).item();
        assert!(v.is_finite() && v > 0.0);
        let m = model.match_pair(&scene.image_a, &scene.image_b).unwrap();
        assert!(m.fine.len() <= m.coarse.len());
    }

    #[test]
    fn xi_disabled_is_frozen_at_one() {
        let cfg = RunConfig {
            xi_enabled: false,
            ..RunConfig::tiny()
        };
        let model = Model::init(&cfg).unwrap();
        let id = model.coarse.layers[0].self_a.xi;
        assert_eq!(model.store.get(id).item(), 1.0);
        assert!(!model.store.is_trainable(id));
    }
}
