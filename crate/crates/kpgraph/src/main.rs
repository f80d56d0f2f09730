use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kpgraph::checkpoint::load_model;
use kpgraph::dataset::{load_dataset, read_frames, synthetic_frames, write_synthetic_dataset, write_translation_sequence};
use kpgraph::evaluate::{evaluate_frames, run_ablation, write_ablation_csv, Axis, Suite};
use kpgraph::formats::{read_homographies, write_curve, write_homographies, write_keypoints, write_matches, write_rows};
use kpgraph::io::{read_image, write_image};
use kpgraph::pipeline::{match_images, mosaic_sequence, read_sequence};
use kpgraph::run::{read_config, train_run};
use kpgraph_core::detector::{detect_corners, HarrisConfig};
use kpgraph_core::eval::pooled_curve;
use kpgraph_core::imaging::{preprocess, ClaheConfig};
use kpgraph_core::mosaic::RansacConfig;
use kpgraph_core::synth::SynthConfig;
use kpgraph_core::train::TrainConfig;
use log::info;

#[derive(Parser)]
#[command(name = "kpgraph", version, about = "Graph-attention key-point descriptors for endoscopic frame matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a frame directory.
    Train(TrainArgs),
    /// Write synthetic frames.
    Synth(SynthArgs),
    /// Match two images and write the matches.
    Match(MatchArgs),
    /// Evaluate a checkpoint on a frame directory.
    Eval(EvalArgs),
    /// Register a frame sequence and write the panorama.
    Mosaic(MosaicArgs),
    /// Retrain and evaluate across tau or mini-batch sizes.
    Ablate(AblateArgs),
    /// Detect key-points in one image.
    Detect(DetectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    run_dir: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    per_sequence: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Write one translated sequence instead, frame k offset by k*(DX,DY).
    #[arg(long, value_parser = parse_step, allow_hyphen_values = true)]
    translate: Option<(i64, i64)>,
}

fn parse_step(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or("expected DX,DY")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    img_a: PathBuf,
    #[arg(long)]
    img_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only matches closer than this (nearest neighbour with threshold).
    #[arg(long)]
    threshold: Option<f64>,
    /// Homography CSV mapping a into b; fills the `correct` column.
    #[arg(long)]
    homography: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    max_keypoints: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Suite::Heldout)]
    transform_suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a recall / 1-precision curve.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    max_keypoints: usize,
}

#[derive(Args)]
struct MosaicArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the estimated frame k+1 -> k homographies.
    #[arg(long)]
    homographies: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    max_keypoints: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Frame directory; synthetic frames are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base configuration; defaults to the toy settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 40)]
    train_frames: usize,
    #[arg(long, default_value_t = 20)]
    eval_frames: usize,
    /// Keep each run's directory under here.
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    img: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_keypoints: usize,
    #[arg(long, default_value_t = 128)]
    patch_side: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Match(a) => match_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Mosaic(a) => mosaic(a),
        Command::Ablate(a) => ablate(a),
        Command::Detect(a) => detect(a),
    }
}

fn harris(max_keypoints: usize) -> HarrisConfig {
    HarrisConfig { max_points: max_keypoints, ..HarrisConfig::default() }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = load_dataset(&a.data, cfg.seed)?;
    let images: Vec<_> = read_frames(&ds.frames_of(&ds.train)).into_iter().map(|(_, i)| i).collect();
    if images.is_empty() {
        bail!("no readable training frames under {}", a.data.display());
    }
    info!("training on {} frames from {} sequences", images.len(), ds.train.len());
    let (_, summary) = train_run(&images, &cfg, &a.run_dir)?;
    info!(
        "{} steps, {} skipped, mean loss first epoch {:?} last epoch {:?}, checkpoint {}",
        summary.steps,
        summary.skipped,
        summary.first_epoch_loss,
        summary.last_epoch_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { width: a.width, height: a.height, vessel_density: a.density, noise_std: a.noise };
    match a.translate {
        Some(step) => write_translation_sequence(&a.out, a.frames, a.seed, step, &cfg)?,
        None => {
            write_synthetic_dataset(&a.out, a.frames, a.seed, a.per_sequence, &cfg)?;
        }
    }
    info!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (img_a, img_b) = (read_image(&a.img_a)?, read_image(&a.img_b)?);
    let truth = match &a.homography {
        Some(p) => Some(read_homographies(p)?.into_iter().next().context("empty homography file")?),
        None => None,
    };
    let m = match_images(&model, &img_a, &img_b, &harris(a.max_keypoints), a.threshold, truth.as_ref())?;
    write_matches(&a.out, &m.records())?;
    let correct = truth.is_some().then(|| m.matches.correct_count());
    info!("{} key-points in a, {} in b, {} matches, correct {:?}", m.keypoints_a.len(), m.keypoints_b.len(), m.matches.len(), correct);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data, a.seed)?;
    let frames: Vec<_> = read_frames(&ds.all_frames()).into_iter().map(|(_, i)| i).collect();
    let set = TrainConfig::default().augmentation;
    let (rows, pairs) = evaluate_frames(&model, &frames, a.transform_suite, &harris(a.max_keypoints), &set, a.seed)?;
    write_rows(&a.report, &rows)?;
    for r in &rows {
        info!("{} {}: precision {:?} matching score {:?} over {} pairs", r.suite, r.transform, r.precision, r.matching_score, r.pairs);
    }
    if let Some(path) = &a.curve {
        let max = pairs.iter().flat_map(|p| p.matches.matches.iter().map(|m| m.distance)).fold(0.0, f64::max);
        let thresholds: Vec<f64> = (1..=50).map(|k| max * k as f64 / 50.0 + if k == 50 { 1e-9 } else { 0.0 }).collect();
        write_curve(path, &pooled_curve(&pairs, &thresholds)?)?;
    }
    Ok(())
}

fn mosaic(a: MosaicArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let frames = read_sequence(&a.seq)?;
    let ransac = RansacConfig { seed: a.seed, ..RansacConfig::default() };
    let (pano, pairwise) = mosaic_sequence(&model, &frames, &harris(a.max_keypoints), &ransac)?;
    write_image(&a.out, &pano.image)?;
    if let Some(p) = &a.homographies {
        write_homographies(p, &pairwise)?;
    }
    info!(
        "{}x{} panorama from {} frames, overlap RMS {:?}",
        pano.image.width(),
        pano.image.height(),
        frames.len(),
        pano.overlap_rms
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::toy(),
    };
    base.seed = a.seed;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let (train_imgs, eval_imgs) = match &a.data {
        Some(dir) => {
            let ds = load_dataset(dir, a.seed)?;
            let mut tr: Vec<_> = read_frames(&ds.frames_of(&ds.train)).into_iter().map(|(_, i)| i).collect();
            let mut ev: Vec<_> = read_frames(&ds.frames_of(&ds.validation)).into_iter().map(|(_, i)| i).collect();
            tr.truncate(a.train_frames);
            ev.truncate(a.eval_frames);
            (tr, ev)
        }
        None => {
            let cfg = SynthConfig::default();
            (synthetic_frames(a.train_frames, a.seed, &cfg)?, synthetic_frames(a.eval_frames, a.seed ^ 0xe7a1_0000, &cfg)?)
        }
    };
    if train_imgs.is_empty() || eval_imgs.is_empty() {
        bail!("ablation needs training and evaluation frames");
    }
    let values = a.values.clone().unwrap_or_else(|| a.axis.default_values());
    let points = run_ablation(a.axis, &values, &train_imgs, &eval_imgs, &base, a.seed, a.run_root.as_deref())?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("ablation_{}.csv", a.axis.name())));
    write_ablation_csv(&out, a.axis, &points)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let img = preprocess(&read_image(&a.img)?, &ClaheConfig::default())?;
    let cfg = HarrisConfig { max_points: a.max_keypoints, patch_side: a.patch_side, ..HarrisConfig::default() };
    let kps = detect_corners(&img, &cfg);
    write_keypoints(Path::new(&a.out), &kps)?;
    info!("{} key-points", kps.len());
    Ok(())
}
