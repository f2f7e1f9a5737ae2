//! Minibatch training on synthetic scenes.
//!
//! Per-scene gradients are computed independently (in parallel when the
//! `parallel` feature is on) and summed in scene order, so a seeded run is
//! bit-reproducible regardless of thread count.

use log::{debug, info};

use crate::error::{Error, Result};
use crate::model::{Model, OptimizerKind};
use crate::parallel;
use crate::params::{ParamId, ParamStore};
use crate::rng::XorShift64Star;
use crate::synthetic::{augment, PlanarScene, AUGMENT_VARIANTS};
use crate::tensor::{Graph, Tensor};

/// Loss values of one scene and its gradient w.r.t. every trainable
/// parameter (in [`ParamStore::ids`] order, trainable ids only).
#[derive(Clone, Debug)]
pub struct SceneGrad {
    pub total: f64,
    pub matching: f64,
    pub regression: f64,
    pub classification: f64,
    pub grads: Vec<Tensor>,
}

pub fn trainable_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.is_trainable(id)).collect()
}

/// Loss and gradients of one scene; `None` when it has no ground-truth match.
pub fn scene_gradient(model: &Model, scene: &PlanarScene) -> Result<Option<SceneGrad>> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let Some(terms) = model.scene_loss(&mut g, &p, scene, None)? else {
        return Ok(None);
    };
    g.backward(terms.total)?;
    let grads = trainable_ids(&model.store)
        .into_iter()
        .map(|id| g.grad_or_zeros(p[id]))
        .collect();
    Ok(Some(SceneGrad {
        total: g.value(terms.total).item(),
        matching: g.value(terms.matching).item(),
        regression: g.value(terms.regression).item(),
        classification: g.value(terms.classification).item(),
        grads,
    }))
}

/// Mean loss terms over the scenes seen in one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub matching: f64,
    pub regression: f64,
    pub classification: f64,
    pub scenes: usize,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter update rule with its running state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let adam = kind == OptimizerKind::Adam;
        Self {
            kind,
            lr,
            step: 0,
            m: if adam { zeros() } else { Vec::new() },
            v: if adam { zeros() } else { Vec::new() },
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor]) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Gd => {
                for (&id, gr) in ids.iter().zip(grads) {
                    for (w, d) in store.get_mut(id).data_mut().iter_mut().zip(gr.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (k, (&id, gr)) in ids.iter().zip(grads).enumerate() {
                    let w = store.get_mut(id).data_mut();
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (((w, m), v), &d) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(gr.data()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Training run failure that still carries the model as it was before the
/// failing step.
#[derive(Debug)]
pub struct Diverged {
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub error: Error,
}

/// Trains `model` on `scenes` for `model.cfg.epochs` epochs. `on_epoch` sees
/// each epoch's statistics and the updated model as soon as it finishes.
///
/// On a non-finite loss or gradient the parameters are restored to the last
/// finite state and [`Diverged`] is returned.
pub fn train(
    model: &mut Model,
    scenes: &[PlanarScene],
    mut on_epoch: impl FnMut(&EpochStats, &Model),
) -> std::result::Result<Vec<EpochStats>, Box<Diverged>> {
    let cfg = model.cfg.clone();
    let ids = trainable_ids(&model.store);
    let shapes: Vec<&[usize]> = ids.iter().map(|&id| model.store.get(id).shape()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &shapes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let total_steps = cfg.epochs * scenes.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = XorShift64Star::derive(cfg.seed, 0x7a1_0000 + epoch as u64);
        rng.shuffle(&mut order);
        let variants: Vec<u8> = if cfg.augment {
            let mut vr = XorShift64Star::derive(cfg.seed, 0xa06_0000 + epoch as u64);
            (0..scenes.len()).map(|_| vr.below(AUGMENT_VARIANTS as usize) as u8).collect()
        } else {
            vec![0; scenes.len()]
        };
        // summed in scene order afterwards so the epoch mean ignores shuffling
        let mut per_scene: Vec<Option<[f64; 4]>> = vec![None; scenes.len()];
        for batch in order.chunks(cfg.batch_size) {
            let fail = |error: Error, history: &Vec<EpochStats>| {
                Box::new(Diverged {
                    epoch,
                    history: history.clone(),
                    error,
                })
            };
            let results = parallel::map_ordered(batch, |&i| match variants[i] {
                0 => scene_gradient(model, &scenes[i]),
                v => scene_gradient(model, &augment(&scenes[i], v, cfg.loss.psi)?),
            });
            let mut sum: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for (r, &scene) in results.into_iter().zip(batch) {
                let Some(sg) = r.map_err(|e| fail(e, &history))? else {
                    continue;
                };
                if !sg.total.is_finite() || sg.grads.iter().any(|t| !t.is_finite()) {
                    return Err(fail(
                        Error::NonFinite(format!("loss {} in epoch {epoch}", sg.total)),
                        &history,
                    ));
                }
                per_scene[scene] = Some([sg.total, sg.matching, sg.regression, sg.classification]);
                used += 1;
                match &mut sum {
                    None => sum = Some(sg.grads),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&sg.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = sum else { continue };
            let inv = 1.0 / used as f64;
            for t in &mut grads {
                for v in t.data_mut() {
                    *v *= inv;
                }
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if cfg.cosine_lr {
                let frac = step as f64 / total_steps.max(1) as f64;
                opt.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
            }
            step += 1;
            debug!("epoch {epoch} batch of {used}: grad norm {norm:.4}");
            opt.apply(&mut model.store, &ids, &grads);
        }
        let seen: Vec<[f64; 4]> = per_scene.into_iter().flatten().collect();
        let n = seen.len().max(1) as f64;
        let mean = |k: usize| seen.iter().map(|v| v[k]).sum::<f64>() / n;
        let stats = EpochStats {
            epoch,
            total: mean(0),
            matching: mean(1),
            regression: mean(2),
            classification: mean(3),
            scenes: seen.len(),
        };
        info!(
            "epoch {epoch}: loss {:.5} (matching {:.5}, regression {:.5}, classification {:.5})",
            stats.total, stats.matching, stats.regression, stats.classification
        );
        on_epoch(&stats, model);
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RunConfig;
    use crate::synthetic::{make_pair, HomographyLimits};

    #[test]
    fn clip_scales_to_bound() {
        let mut g = vec![Tensor::from_rows(&[&[3.0, 4.0]])];
        assert_eq!(clip_global_norm(&mut g, 0.5), 5.0);
        assert!((g[0].data()[0] - 0.3).abs() < 1e-15);
        let mut small = vec![Tensor::from_rows(&[&[0.1]])];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = RunConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            augment: false,
            ..RunConfig::tiny()
        };
        let scenes: Vec<_> = (0..3)
            .map(|s| make_pair(32, 32, s, &HomographyLimits::default(), 8.0).unwrap())
            .collect();
        let mut model = Model::init(&cfg).unwrap();
        let h = train(&mut model, &scenes, |_, _| {}).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].total, h[1].total);
    }
}
