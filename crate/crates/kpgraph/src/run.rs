//! Training runs on disk: `config.json`, `log.csv` and
//! `checkpoints/step_{n}.bin`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpgraph_core::imaging::Image;
use kpgraph_core::model::ModelParams;
use kpgraph_core::train::{PreparedFrame, StepRecord, TrainConfig, Trainer};
use kpgraph_core::Error as CoreError;
use log::{info, warn};

use crate::checkpoint::save_model;

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step}.bin"))
}

pub fn prepare_frames(images: &[Image], cfg: &TrainConfig) -> Result<Vec<PreparedFrame>> {
    let harris = cfg.harris();
    images.iter().map(|img| Ok(PreparedFrame::new(img, &cfg.clahe, &harris)?)).collect()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub skipped: usize,
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub final_checkpoint: PathBuf,
}

/// Trains on already loaded frames and records everything under `run_dir`.
pub fn train_run(images: &[Image], cfg: &TrainConfig, run_dir: &Path) -> Result<(ModelParams<f32>, RunSummary)> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let frames = prepare_frames(images, cfg)?;
    let mut log = BufWriter::new(File::create(run_dir.join("log.csv"))?);
    writeln!(log, "step,epoch,frame,loss,nodes,seed,augmentation")?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut epoch_sums: Vec<(f64, usize)> = vec![(0.0, 0); cfg.epochs];
    let mut skipped = 0usize;
    let mut io_error: Option<anyhow::Error> = None;
    let result = trainer.fit(
        &frames,
        &mut |rec: &StepRecord, model: &ModelParams<f32>| {
            let aug = rec.augmentation.map(|a| a.to_string()).unwrap_or_default();
            let line = writeln!(log, "{},{},{},{},{},{},{}", rec.step, rec.epoch, rec.frame, rec.loss, rec.nodes, cfg.seed, aug);
            if let Err(e) = line {
                io_error.get_or_insert(e.into());
                return Err(CoreError::Resource("log write failed".into()));
            }
            epoch_sums[rec.epoch].0 += rec.loss;
            epoch_sums[rec.epoch].1 += 1;
            let done = rec.step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
                if let Err(e) = save_model(&checkpoint_path(run_dir, done), model) {
                    io_error.get_or_insert(e.into());
                    return Err(CoreError::Resource("checkpoint write failed".into()));
                }
            }
            if done % 100 == 0 {
                info!("step {done} epoch {} loss {:.4}", rec.epoch, rec.loss);
            }
            Ok(())
        },
        &mut |k, e| {
            skipped += 1;
            warn!("frame {k} skipped: {e}");
        },
    );
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Err(e) = result {
        if let CoreError::NonFinite(msg) = &e {
            let dump = run_dir.join("nan_dump.txt");
            std::fs::write(&dump, format!("{msg}\nconfig: {}\n", serde_json::to_string(cfg)?))?;
            bail!("training aborted, diagnostics in {}: {msg}", dump.display());
        }
        return Err(e.into());
    }
    let steps = trainer.steps_taken();
    let final_checkpoint = checkpoint_path(run_dir, steps);
    save_model(&final_checkpoint, &trainer.model)?;
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let summary = RunSummary {
        steps,
        skipped,
        first_epoch_loss: epoch_sums.first().copied().and_then(mean),
        last_epoch_loss: epoch_sums.last().copied().and_then(mean),
        final_checkpoint,
    };
    Ok((trainer.model, summary))
}
