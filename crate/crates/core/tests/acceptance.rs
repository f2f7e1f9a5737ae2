//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness),
//! prints one PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! `SLIMMATCH_ACCEPT=1,4` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};

use slimmatch::backbone::{grid_keypoints, COARSE_STRIDE};
use slimmatch::bench::{attention_macs, bench_attention_scaling, AttentionKind};
use slimmatch::geometry::{auc_at_thresholds, homography_dlt, match_errors, mma, pose_error};
use slimmatch::losses::{classification_loss, matching_loss, regression_loss, LossWeights};
use slimmatch::matching::{dual_softmax, extract_coarse_matches};
use slimmatch::model::{Model, RunConfig};
use slimmatch::rng::XorShift64Star;
use slimmatch::slimformer::{rope_encode, PositionMode, RopeTable};
use slimmatch::synthetic::{make_pair, sample_homography, HomographyLimits, PlanarScene};
use slimmatch::tensor::{Graph, Tensor};
use slimmatch::train::train;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rope_identities() -> Outcome {
    let t0 = Instant::now();
    let c = 32;
    let table = RopeTable::new(c).unwrap();
    let mut rng = XorShift64Star::new(1);
    let coord = |rng: &mut XorShift64Star| [rng.below(200), rng.below(200)];
    let (mut norm_err, mut rel_err) = (0.0f64, 0.0f64);
    let encode = |x: &[f64], at: [usize; 2]| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[1, c], x.to_vec()).unwrap());
        let y = rope_encode(&mut g, v, &[at], &table).unwrap();
        g.value(y).data().to_vec()
    };
    for _ in 0..1000 {
        let q: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k: Vec<f64> = (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (m, n) = (coord(&mut rng), coord(&mut rng));
        let s = coord(&mut rng);
        let rq = encode(&q, m);
        norm_err = norm_err.max((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs());
        let rk = encode(&k, n);
        let rq2 = encode(&q, [m[0] + s[0], m[1] + s[1]]);
        let rk2 = encode(&k, [n[0] + s[0], n[1] + s[1]]);
        rel_err = rel_err.max((dot(&rq, &rk) - dot(&rq2, &rk2)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        norm_err <= 1e-12 && rel_err <= 1e-10 && secs < 5.0,
        format!("norm err {norm_err:.1e}, relative-position err {rel_err:.1e}, {secs:.2}s"),
    )
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig {
        seed: 3,
        ..RunConfig::tiny()
    };
    let model = Model::init(&cfg).unwrap();
    let scene = make_pair(32, 32, 17, &HomographyLimits::default(), 8.0).unwrap();

    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let cf = model.coarse_forward(&mut g, &p, &scene.image_a, &scene.image_b).unwrap();
    let windows = model.supervised_pairs(g.value(cf.assign), &scene);
    drop(g);

    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let terms = model.scene_loss(&mut g, &p, &scene, Some(&windows)).unwrap().unwrap();
    g.backward(terms.total).unwrap();
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zeros(p[id])).collect();
    drop(g);

    let loss_at = |m: &Model| {
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let t = m.scene_loss(&mut g, &p, &scene, Some(&windows)).unwrap().unwrap();
        g.value(t.total).item()
    };

    // Gradients below the central-difference noise floor cannot be compared
    // in relative terms, so candidates are drawn from the resolvable ones.
    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(k, t)| t.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-5).map(move |(e, _)| (k, e)))
        .collect();
    let mut rng = XorShift64Star::new(99);
    let mut picked = BTreeSet::new();
    while picked.len() < 24.min(candidates.len()) {
        picked.insert(candidates[rng.below(candidates.len())]);
    }
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for &(k, e) in &picked {
        let id = ids[k];
        let orig = probe.store.get(id).data()[e];
        probe.store.get_mut(id).data_mut()[e] = orig + step;
        let up = loss_at(&probe);
        probe.store.get_mut(id).data_mut()[e] = orig - step;
        let down = loss_at(&probe);
        probe.store.get_mut(id).data_mut()[e] = orig;
        let fd = (up - down) / (2.0 * step);
        let ad = grads[k].data()[e];
        worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-12));
    }
    let secs = t0.elapsed().as_secs_f64();
    let n = picked.len();
    Outcome::new(
        n >= 20 && worst < 1e-4 && secs < 120.0,
        format!("{n} parameters, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn complexity() -> Outcome {
    let c = 64;
    let v: Vec<u64> = [256, 512, 1024].iter().map(|&n| attention_macs(AttentionKind::Vector, n, c).unwrap()).collect();
    let exact = v[1] == 2 * v[0] && v[2] == 2 * v[1];
    let a = attention_macs(AttentionKind::Vanilla, 512, c).unwrap();
    let b = attention_macs(AttentionKind::Vanilla, 1024, c).unwrap();
    let vanilla = b as f64 / a as f64;
    let rows = bench_attention_scaling(&[4096, 8192], c, &[AttentionKind::Vector], 5).unwrap();
    let wall = rows[1].seconds / rows[0].seconds;
    // the wall-time bound depends on the machine and is only reported
    let soft = if (1.6..=2.8).contains(&wall) { "within" } else { "outside" };
    Outcome::new(
        exact && vanilla > 3.5 && vanilla <= 4.0,
        format!(
            "vector MACs {} / {} / {}, vanilla 1024/512 ratio {vanilla:.3}, vector wall ratio 8192/4096 {wall:.2} ({soft} the soft [1.6, 2.8] band)",
            v[0], v[1], v[2]
        ),
    )
}

fn matching_oracle() -> Outcome {
    let mut rng = XorShift64Star::new(4);
    let kp = grid_keypoints(8, 64, COARSE_STRIDE).unwrap();
    let (mut mismatches, mut softmax_err) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let s = Tensor::from_fn(&[8, 8], |_| rng.uniform(-3.0, 3.0));
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let pv = dual_softmax(&mut g, sv).unwrap();
        let p = g.value(pv).clone();
        for i in 0..8 {
            for j in 0..8 {
                let row: f64 = (0..8).map(|jj| (s.at2(i, jj) - s.at2(i, j)).exp()).sum();
                let col: f64 = (0..8).map(|ii| (s.at2(ii, j) - s.at2(i, j)).exp()).sum();
                softmax_err = softmax_err.max((p.at2(i, j) - 1.0 / (row * col)).abs());
            }
        }
        let threshold = rng.uniform(0.0, 0.4);
        let mut brute = BTreeSet::new();
        for i in 0..8 {
            for j in 0..8 {
                let v = p.at2(i, j);
                if v > threshold && (0..8).all(|k| (k == j || p.at2(i, k) < v) && (k == i || p.at2(k, j) < v)) {
                    brute.insert((i, j));
                }
            }
        }
        let got: BTreeSet<_> = extract_coarse_matches(&p, threshold, &kp, &kp).unwrap().indices.into_iter().collect();
        if got != brute {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && softmax_err <= 1e-12,
        format!("{mismatches} set mismatches in 1000, dual-softmax err {softmax_err:.1e}"),
    )
}

fn geometry_oracles() -> Outcome {
    let limits = HomographyLimits::default();
    let mut rng = XorShift64Star::new(5);
    let mut dlt_err = 0.0f64;
    for seed in 0..100 {
        let h = sample_homography(1000 + seed, &limits, 64, 64).unwrap();
        let pairs: Vec<_> = (0..8)
            .map(|_| {
                let p = [rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0)];
                (p, h.apply(p).unwrap())
            })
            .collect();
        dlt_err = dlt_err.max(homography_dlt(&pairs).unwrap().max_abs_diff(&h));
    }
    let id = Matrix3::identity();
    let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = Vector3::new(0.3, -0.2, 1.0);
    let rot = (pose_error(&id, &t, &rz, &t).unwrap().rotation_deg - 90.0).abs();
    let anti = (pose_error(&id, &t, &id, &(-t)).unwrap().translation_deg - 180.0).abs();
    let auc = auc_at_thresholds(&[10.0], &[20.0]).unwrap()[0];
    Outcome::new(
        dlt_err <= 1e-8 && rot <= 1e-9 && anti <= 1e-9 && auc == 0.5,
        format!("DLT err {dlt_err:.1e}, 90° case err {rot:.1e}, antiparallel err {anti:.1e}, AUC@20 {auc}"),
    )
}

fn loss_values() -> Outcome {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(&[2, 2], 0.25));
    let pos: BTreeSet<_> = [(0, 0), (1, 1)].into();
    let lm = matching_loss(&mut g, a, &pos, &w).unwrap();
    let lm = g.value(lm).item();
    let d = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let lr = regression_loss(&mut g, d, &Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(), &[true]).unwrap();
    let lr = g.value(lr).item();
    let c = g.constant(Tensor::full(&[3, 1], 0.5));
    let lc = classification_loss(&mut g, c, &Tensor::new(&[3, 1], vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
    let lc = g.value(lc).item();
    Outcome::new(
        (lm - 0.2084).abs() <= 1e-3 && lr == 25.0 && (lc - std::f64::consts::LN_2).abs() <= 1e-12,
        format!("matching {lm:.4}, regression {lr}, classification {lc:.12}"),
    )
}

const TRAIN_PAIRS: u64 = 200;
const HELD_OUT: std::ops::Range<u64> = 1_000_000..1_000_050;

fn scenes(seeds: impl Iterator<Item = u64>) -> Vec<PlanarScene> {
    seeds
        .map(|s| make_pair(64, 64, s, &HomographyLimits::default(), 8.0).unwrap())
        .collect()
}

fn mean_loss(model: &Model, data: &[PlanarScene]) -> f64 {
    let vals: Vec<f64> = data
        .iter()
        .filter_map(|s| {
            let mut g = Graph::new();
            let p = model.store.bind_frozen(&mut g);
            let t = model.scene_loss(&mut g, &p, s, None).unwrap()?;
            Some(g.value(t.total).item())
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

struct HeldOut {
    precision: f64,
    fine_mma3: f64,
    coarse_mma3: f64,
}

fn evaluate(model: &Model, test: &[PlanarScene]) -> HeldOut {
    let (mut hits, mut total) = (0usize, 0usize);
    let (mut fine, mut coarse) = (Vec::new(), Vec::new());
    for s in test {
        let m = model.match_pair(&s.image_a, &s.image_b).unwrap();
        total += m.coarse.len();
        hits += m.coarse.indices.iter().filter(|ij| s.gt_labels.matches.contains(ij)).count();
        fine.push(match_errors(&m.fine.pairs, &s.h_gt).unwrap());
        coarse.push(match_errors(&m.coarse.pairs, &s.h_gt).unwrap());
    }
    HeldOut {
        precision: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        fine_mma3: mma(&fine, 3.0),
        coarse_mma3: mma(&coarse, 3.0),
    }
}

struct Trained {
    initial: f64,
    final_loss: f64,
    eval: HeldOut,
    elapsed: Duration,
    diverged: bool,
}

fn train_and_eval(cfg: &RunConfig, data: &[PlanarScene], test: &[PlanarScene]) -> Trained {
    let t0 = Instant::now();
    let mut model = Model::init(cfg).unwrap();
    let initial = mean_loss(&model, data);
    let diverged = train(&mut model, data, |s, _| eprintln!("  epoch {:2} loss {:.4}", s.epoch, s.total)).is_err();
    let final_loss = mean_loss(&model, data);
    Trained {
        initial,
        final_loss,
        eval: evaluate(&model, test),
        elapsed: t0.elapsed(),
        diverged,
    }
}

fn desk_config() -> RunConfig {
    RunConfig {
        seed: 7,
        ..RunConfig::tiny()
    }
}

fn desk_scale(run: &Trained) -> Outcome {
    let e = &run.eval;
    let pass = !run.diverged
        && run.final_loss < 0.5 * run.initial
        && e.precision >= 0.90
        && e.fine_mma3 >= 0.70
        && run.elapsed < Duration::from_secs(30 * 60);
    Outcome::new(
        pass,
        format!(
            "loss {:.4} -> {:.4} (ratio {:.3}), coarse precision {:.3}, fine MMA@3 {:.3}, {:.0}s",
            run.initial,
            run.final_loss,
            run.final_loss / run.initial,
            e.precision,
            e.fine_mma3,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn ablation(with_rope: &Trained, without: &Trained) -> Outcome {
    let (a, b) = (&with_rope.eval, &without.eval);
    Outcome::new(
        a.precision >= b.precision && a.fine_mma3 >= a.coarse_mma3,
        format!(
            "coarse precision RoPE {:.3} vs none {:.3}; MMA@3 fine {:.3} vs coarse-only {:.3}",
            a.precision, b.precision, a.fine_mma3, a.coarse_mma3
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("SLIMMATCH_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |s| s.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "rope identities", rope_identities),
        (2, "gradient integrity", gradient_integrity),
        (3, "attention complexity", complexity),
        (4, "matching oracle", matching_oracle),
        (5, "geometry oracles", geometry_oracles),
        (6, "loss unit values", loss_values),
    ];
    for (k, name, f) in quick {
        if wanted(k) {
            let o = f();
            println!("{} criterion {k} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((k, name, o));
        }
    }
    if wanted(7) || wanted(8) {
        let data = scenes((0..TRAIN_PAIRS).map(|i| slimmatch::synthetic::scene_seed(7, i)));
        let test = scenes(HELD_OUT);
        eprintln!("training the tiny model with rotary positions");
        let rope = train_and_eval(&desk_config(), &data, &test);
        if wanted(7) {
            let o = desk_scale(&rope);
            println!("{} criterion 7 (desk-scale training): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((7, "desk-scale training", o));
        }
        if wanted(8) {
            eprintln!("training the tiny model without positions");
            let none = train_and_eval(
                &RunConfig {
                    position: PositionMode::None,
                    ..desk_config()
                },
                &data,
                &test,
            );
            let o = ablation(&rope, &none);
            println!("{} criterion 8 (ablation directions): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((8, "ablation directions", o));
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
