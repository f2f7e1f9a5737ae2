use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use slimmatch::bench::{bench_attention_scaling, check_mac_ratios, rows_to_csv, AttentionKind};
use slimmatch::formats::{
    list_pairs, matches_svg, pair_dir_name, read_homography, read_matches, read_model, read_pair, read_pgm,
    read_pose, write_matches, write_model, write_scene,
};
use slimmatch::geometry::{
    auc_at_thresholds, ccm, corner_error, homography_dlt, match_errors, mma, pose_error, AUC_THRESHOLDS,
    CCM_THRESHOLDS, MMA_THRESHOLDS,
};
use slimmatch::model::{Model, OptimizerKind, RunConfig};
use slimmatch::parallel;
use slimmatch::slimformer::PositionMode;
use slimmatch::synthetic::{make_pair, scene_seed, HomographyLimits, PlanarScene};
use slimmatch::train::train;
use slimmatch::Error;

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn input(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }

    fn numeric(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, err: err.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Self::numeric(e),
            _ => Self::input(e),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::NonFinite(_)) => 3,
            _ => 2,
        };
        Self { code, err }
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "slimmatch", version, about = "Detector-free image matching on the CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of homography-related image pairs.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset.
    Train(TrainArgs),
    /// Match two PGM images.
    Match(MatchArgs),
    /// Match every pair of a dataset, writing one TSV per pair.
    MatchDataset(MatchDatasetArgs),
    /// Score match files against ground truth.
    Eval(EvalArgs),
    /// Attention cost versus token count.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Square image side in pixels (multiple of 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Position {
    Relative,
    Absolute,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Gd,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Optim>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    fine_depth: Option<usize>,
    #[arg(long, value_enum)]
    position: Option<Position>,
    /// Pin the residual scale to 1 and freeze it.
    #[arg(long)]
    no_layer_scale: bool,
    /// Use raw inner products as coarse scores.
    #[arg(long)]
    unscaled_scores: bool,
    /// Train on random flips, transposes and view swaps of each pair.
    #[arg(long)]
    augment: bool,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    model: PathBuf,
    image_a: PathBuf,
    image_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Write coarse matches instead of refined ones.
    #[arg(long)]
    coarse: bool,
}

#[derive(Args)]
struct MatchDatasetArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    coarse: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Mma,
    Ccm,
    Auc,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `pair_XXXXX.tsv` match files (`pair_XXXXX.pose` or a
    /// single `pose_errors.txt` for auc).
    #[arg(long)]
    matches: PathBuf,
    /// Dataset directory with `pair_XXXXX/h.txt` (or `pose.txt` for auc).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096])]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_values_t = ["vector".to_string(), "vanilla".to_string()])]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))
        .map_err(Failure::input)?;
    let limits = HomographyLimits::default();
    let psi = RunConfig::default().loss.psi;
    let scenes = parallel::map_range(a.count, |i| make_pair(a.size, a.size, scene_seed(a.seed, i as u64), &limits, psi));
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        write_scene(&a.out_dir, i, &scene)
            .with_context(|| format!("cannot write into {}", a.out_dir.display()))
            .map_err(Failure::input)?;
        println!("{}\tseed={}\tgt_matches={}", pair_dir_name(i), scene.seed, scene.gt_labels.matches.len());
    }
    Ok(())
}

fn load_scenes(dir: &Path, psi: f64) -> Result<Vec<PlanarScene>, Failure> {
    let dirs = list_pairs(dir).with_context(|| format!("cannot read dataset {}", dir.display()))?;
    if dirs.is_empty() {
        return Err(Failure::input(anyhow!("no pair_* directories in {}", dir.display())));
    }
    let scenes = parallel::map_ordered(&dirs, |d| {
        let p = read_pair(d)?;
        PlanarScene::from_parts(p.image_a, p.image_b, p.h_gt, 0, psi)
    });
    scenes
        .into_iter()
        .zip(&dirs)
        .map(|(s, d)| s.with_context(|| format!("bad pair {}", d.display())).map_err(Failure::from))
        .collect()
}

fn train_config(a: &TrainArgs) -> RunConfig {
    let mut cfg = match a.preset {
        Preset::Tiny => RunConfig::tiny(),
        Preset::Full => RunConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = match v {
            Optim::Gd => OptimizerKind::Gd,
            Optim::Adam => OptimizerKind::Adam,
        };
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.depth {
        cfg.depth = v;
    }
    if let Some(v) = a.fine_depth {
        cfg.fine_depth = v;
    }
    if let Some(p) = a.position {
        cfg.position = match p {
            Position::Relative => PositionMode::Relative,
            Position::Absolute => PositionMode::Absolute,
            Position::None => PositionMode::None,
        };
    }
    cfg.xi_enabled &= !a.no_layer_scale;
    cfg.scaled_scores &= !a.unscaled_scores;
    cfg.augment |= a.augment;
    cfg
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = train_config(a);
    let mut model = Model::init(&cfg)?;
    let scenes = load_scenes(&a.data, cfg.loss.psi)?;
    info!("training on {} pairs, {} parameters", scenes.len(), model.store.num_scalars());
    let result = train(&mut model, &scenes, |s, _| {
        println!(
            "epoch {}\tloss {:.6}\tmatching {:.6}\tregression {:.6}\tclassification {:.6}",
            s.epoch, s.total, s.matching, s.regression, s.classification
        );
    });
    write_model(&a.out, &model)
        .with_context(|| format!("cannot write model {}", a.out.display()))
        .map_err(Failure::input)?;
    match result {
        Ok(_) => Ok(()),
        Err(d) => {
            warn!("last finite parameters saved to {}", a.out.display());
            Err(Failure::numeric(anyhow!("training diverged in epoch {}: {}", d.epoch, d.error)))
        }
    }
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    read_model(path)
        .with_context(|| format!("cannot load model {}", path.display()))
        .map_err(Failure::input)
}

fn cmd_match(a: &MatchArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let ia = read_pgm(&a.image_a).with_context(|| format!("cannot read {}", a.image_a.display()))?;
    let ib = read_pgm(&a.image_b).with_context(|| format!("cannot read {}", a.image_b.display()))?;
    let m = model.match_pair(&ia, &ib)?;
    let set = if a.coarse { &m.coarse } else { &m.fine };
    write_matches(&a.out, set).with_context(|| format!("cannot write {}", a.out.display()))?;
    if let Some(svg) = &a.svg {
        fs::write(svg, matches_svg(&ia, &ib, set)?).with_context(|| format!("cannot write {}", svg.display()))?;
    }
    info!("{} coarse, {} fine matches", m.coarse.len(), m.fine.len());
    Ok(())
}

fn cmd_match_dataset(a: &MatchDatasetArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let dirs = list_pairs(&a.data).with_context(|| format!("cannot read dataset {}", a.data.display()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let results = parallel::map_ordered(&dirs, |d| -> Result<_, Error> {
        let p = read_pair(d)?;
        let m = model.match_pair(&p.image_a, &p.image_b)?;
        Ok((p.name, if a.coarse { m.coarse } else { m.fine }))
    });
    for r in results {
        let (name, set) = r?;
        write_matches(&a.out.join(format!("{name}.tsv")), &set)?;
        println!("{name}\t{}", set.len());
    }
    Ok(())
}

/// Sorted `stem`s of files in `dir` with extension `ext`.
fn files_with_ext(dir: &Path, ext: &str) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == ext) {
            if let Some(s) = p.file_stem() {
                out.push(s.to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn require_gt(gt: &Path, name: &str, file: &str) -> Result<PathBuf, Failure> {
    let p = gt.join(name).join(file);
    if !p.is_file() {
        return Err(Failure::input(anyhow!("missing ground truth for {name}: {}", p.display())));
    }
    Ok(p)
}

fn print_metric(metric: &str, thresholds: &[f64], values: &[f64]) {
    for (t, v) in thresholds.iter().zip(values) {
        println!("{metric}\t{t}\t{v:.6}");
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    match a.metric {
        Metric::Mma | Metric::Ccm => {
            let names = files_with_ext(&a.matches, "tsv")?;
            let mut gts = Vec::with_capacity(names.len());
            for n in &names {
                gts.push(require_gt(&a.gt, n, "h.txt")?);
            }
            let mut per_pair = Vec::with_capacity(names.len());
            let mut corner_errors = Vec::with_capacity(names.len());
            for (n, gt) in names.iter().zip(&gts) {
                let h = read_homography(gt)?;
                let rows = read_matches(&a.matches.join(format!("{n}.tsv")))?;
                let pairs: Vec<_> = rows.iter().map(|r| r.0).collect();
                if pairs.is_empty() {
                    warn!("{n}: no matches");
                }
                match a.metric {
                    Metric::Mma => per_pair.push(match_errors(&pairs, &h)?),
                    _ => {
                        let img = read_pgm(&a.gt.join(n).join("a.pgm"))
                            .with_context(|| format!("missing image for {n}"))
                            .map_err(Failure::input)?;
                        let err = homography_dlt(&pairs)
                            .and_then(|hp| corner_error(&h, &hp, img.width, img.height))
                            .unwrap_or_else(|e| {
                                warn!("{n}: no homography estimate ({e})");
                                f64::INFINITY
                            });
                        corner_errors.push(err);
                    }
                }
            }
            match a.metric {
                Metric::Mma => {
                    let vals: Vec<f64> = MMA_THRESHOLDS.iter().map(|&t| mma(&per_pair, t)).collect();
                    print_metric("mma", &MMA_THRESHOLDS, &vals);
                }
                _ => print_metric("ccm", &CCM_THRESHOLDS, &ccm(&corner_errors, &CCM_THRESHOLDS)),
            }
        }
        Metric::Auc => {
            let shortcut = a.matches.join("pose_errors.txt");
            let errors: Vec<f64> = if shortcut.is_file() {
                fs::read_to_string(&shortcut)
                    .with_context(|| format!("cannot read {}", shortcut.display()))?
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| Failure::input(anyhow!("bad pose error `{t}`"))))
                    .collect::<Result<_, _>>()?
            } else {
                let names = files_with_ext(&a.matches, "pose")?;
                let mut errs = Vec::with_capacity(names.len());
                for n in &names {
                    let gt = read_pose(&require_gt(&a.gt, n, "pose.txt")?)?;
                    let est = read_pose(&a.matches.join(format!("{n}.pose")))?;
                    errs.push(pose_error(&gt.rotation, &gt.translation, &est.rotation, &est.translation)?.max_deg);
                }
                errs
            };
            print_metric("auc", &AUC_THRESHOLDS, &auc_at_thresholds(&errors, &AUC_THRESHOLDS)?);
        }
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> CliResult {
    let kinds: Vec<AttentionKind> = a.kinds.iter().map(|k| k.parse()).collect::<Result<_, _>>()?;
    let rows = bench_attention_scaling(&a.ns, a.channels, &kinds, a.runs)?;
    let csv = rows_to_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{csv}"),
    }
    check_mac_ratios(&rows)?;
    Ok(())
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = parallel::thread_cap_from_env() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("cannot cap worker threads: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Match(a) => cmd_match(a),
        Command::MatchDataset(a) => cmd_match_dataset(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
