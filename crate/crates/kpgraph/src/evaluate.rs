//! Evaluation reports and the two ablation sweeps.

use std::path::Path;

use anyhow::{bail, Result};
use kpgraph_core::detector::{HarrisConfig, DEFAULT_PE_THRESHOLD};
use kpgraph_core::eval::{evaluate_held_out, evaluate_pair, held_out_pairs, individual_suite, viewpoint_suite, Aggregate, FeatureKind, PairEvaluation, TestTransform};
use kpgraph_core::imaging::{preprocess, ClaheConfig, Image};
use kpgraph_core::model::ModelParams;
use kpgraph_core::train::{TrainConfig, Trainer};
use kpgraph_core::views::AugmentationSet;
use kpgraph_core::Error as CoreError;
use serde::Serialize;

use crate::run::{prepare_frames, train_run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// One fresh random augmentation per frame.
    Heldout,
    /// Every augmentation value and blur kernel separately.
    Individual,
    /// Random projective viewpoint changes.
    Viewpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub suite: String,
    pub transform: String,
    pub family: String,
    pub pairs: usize,
    pub precision: Option<f64>,
    pub matching_score: Option<f64>,
    pub recall: Option<f64>,
    pub retrieved: usize,
    pub correct: usize,
}

fn row(suite: &str, transform: String, family: &str, agg: &Aggregate) -> ReportRow {
    ReportRow {
        suite: suite.into(),
        transform,
        family: family.into(),
        pairs: agg.pairs,
        precision: agg.precision(),
        matching_score: agg.matching_score(),
        recall: agg.recall(),
        retrieved: agg.retrieved,
        correct: agg.correct,
    }
}

pub fn preprocess_all(frames: &[Image], clahe: &ClaheConfig) -> Result<Vec<Image>> {
    frames.iter().map(|f| Ok(preprocess(f, clahe)?)).collect()
}

/// Evaluates raw frames (preprocessed here) under one suite. Also returns
/// every pair evaluation, for curves.
pub fn evaluate_frames(
    model: &ModelParams<f32>,
    frames: &[Image],
    suite: Suite,
    harris: &HarrisConfig,
    augmentation: &AugmentationSet,
    seed: u64,
) -> Result<(Vec<ReportRow>, Vec<PairEvaluation>)> {
    let Some(first) = frames.first() else { bail!("no frames to evaluate") };
    let prepared = preprocess_all(frames, &ClaheConfig::default())?;
    let transforms = match suite {
        Suite::Heldout => {
            let pairs = held_out_pairs(model, &prepared, augmentation, harris, seed, FeatureKind::Global)?;
            let mut agg = Aggregate::default();
            pairs.iter().for_each(|e| agg.add(e));
            return Ok((vec![row("heldout", "random".into(), "mixed", &agg)], pairs));
        }
        Suite::Individual => individual_suite(augmentation),
        Suite::Viewpoint => viewpoint_suite(seed, first.width(), first.height(), 3)?,
    };
    let name = if suite == Suite::Individual { "individual" } else { "viewpoint" };
    let mut rows = Vec::with_capacity(transforms.len());
    let mut all = Vec::new();
    for t in &transforms {
        let pairs = transform_pairs(model, &prepared, t, harris)?;
        let mut agg = Aggregate::default();
        pairs.iter().for_each(|e| agg.add(e));
        rows.push(row(name, t.label(), t.family(), &agg));
        all.extend(pairs);
    }
    Ok((rows, all))
}

/// Evaluates one transform on preprocessed frames; frames without usable
/// key-points are left out.
pub fn transform_pairs(model: &ModelParams<f32>, frames: &[Image], t: &TestTransform, harris: &HarrisConfig) -> Result<Vec<PairEvaluation>> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let (warped, map) = t.apply(f)?;
        match evaluate_pair(model, f, &warped, &map, harris, DEFAULT_PE_THRESHOLD, FeatureKind::Global) {
            Ok(e) => out.push(e),
            Err(CoreError::Contract(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Tau,
    Minibatch,
}

impl Axis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Axis::Tau => vec![0.06, 0.08, 0.1, 0.12],
            Axis::Minibatch => vec![5.0, 10.0, 15.0, 20.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Tau => "tau",
            Axis::Minibatch => "minibatch",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        match self {
            Axis::Tau => c.tau = value,
            Axis::Minibatch => {
                if value < 1.0 || value.fract() != 0.0 {
                    bail!("mini-batch size must be a positive integer, got {value}");
                }
                c.negatives_per_anchor = value as usize;
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationPoint {
    pub value: f64,
    pub precision: Option<f64>,
    pub matching_score: Option<f64>,
}

/// Retrains from the shared seed for every value and evaluates on held-out
/// warps of `eval_frames`. With `run_root`, each run is kept on disk.
pub fn run_ablation(
    axis: Axis,
    values: &[f64],
    train_frames: &[Image],
    eval_frames: &[Image],
    base: &TrainConfig,
    eval_seed: u64,
    run_root: Option<&Path>,
) -> Result<Vec<AblationPoint>> {
    let prepared_eval = preprocess_all(eval_frames, &base.clahe)?;
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = axis.apply(base, v)?;
        let model = match run_root {
            Some(root) => train_run(train_frames, &cfg, &root.join(format!("{}_{v}", axis.name())))?.0,
            None => {
                let frames = prepare_frames(train_frames, &cfg)?;
                let mut trainer = Trainer::new(cfg.clone())?;
                trainer.fit(&frames, &mut |_, _| Ok(()), &mut |_, _| {})?;
                trainer.model
            }
        };
        let agg = evaluate_held_out(&model, &prepared_eval, &cfg.augmentation, &cfg.harris(), eval_seed, FeatureKind::Global)?;
        log::info!("{} = {v}: precision {:?} matching score {:?}", axis.name(), agg.precision(), agg.matching_score());
        out.push(AblationPoint { value: v, precision: agg.precision(), matching_score: agg.matching_score() });
    }
    Ok(out)
}

/// Header `axis,v1,v2,...`, then the rows `Precision` and `Matching Score`.
pub fn write_ablation_csv(path: &Path, axis: Axis, points: &[AblationPoint]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut header = vec![axis.name().to_string()];
    header.extend(points.iter().map(|p| p.value.to_string()));
    w.write_record(&header)?;
    let mut prec = vec!["Precision".to_string()];
    prec.extend(points.iter().map(|p| fmt(p.precision)));
    w.write_record(&prec)?;
    let mut score = vec!["Matching Score".to_string()];
    score.extend(points.iter().map(|p| fmt(p.matching_score)));
    w.write_record(&score)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_are_applied() {
        let base = TrainConfig::toy();
        assert_eq!(Axis::Tau.apply(&base, 0.12).unwrap().tau, 0.12);
        assert_eq!(Axis::Minibatch.apply(&base, 15.0).unwrap().negatives_per_anchor, 15);
        assert!(Axis::Minibatch.apply(&base, 2.5).is_err());
        assert!(Axis::Minibatch.apply(&base, 0.0).is_err());
        assert_eq!(Axis::Tau.default_values(), vec![0.06, 0.08, 0.1, 0.12]);
        assert_eq!(Axis::Minibatch.default_values(), vec![5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn ablation_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/tau.csv");
        let points = [
            AblationPoint { value: 0.06, precision: Some(0.5), matching_score: Some(0.25) },
            AblationPoint { value: 0.1, precision: None, matching_score: Some(0.123456) },
        ];
        write_ablation_csv(&path, Axis::Tau, &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "tau,0.06,0.1\nPrecision,0.5000,\nMatching Score,0.2500,0.1235\n");
    }
}
