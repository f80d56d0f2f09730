//! Training configuration and the single-frame optimisation step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::patch_batch;
use crate::contrastive::{sample_negatives, total_loss_on_tape, ContrastiveConfig, NegativeSets};
use crate::detector::{detect_corners, HarrisConfig, Keypoint};
use crate::error::{param_err, Error, Result};
use crate::gnn::normalize_positions;
use crate::gradcheck::{compare_module_gradients, module_gradients, Probe, TensorCheck};
use crate::imaging::{preprocess, ClaheConfig, Image, DEFAULT_PATCH_SIDE};
use crate::model::ModelParams;
use crate::nn::{Mode, Parameters};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;
use crate::views::{build_graph_views, describe_views, sample_augmentation, Augmentation, AugmentationSet, GraphViews};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch_side: usize,
    pub max_keypoints: usize,
    pub tau: f64,
    pub negatives_per_anchor: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: AugmentationSet,
    /// Allows patch sides other than the full-size 128.
    pub toy_mode: bool,
    pub include_positive_in_denominator: bool,
    pub scaled_attention: bool,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub clahe: ClaheConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_side: DEFAULT_PATCH_SIDE,
            max_keypoints: 512,
            tau: 0.08,
            negatives_per_anchor: 10,
            learning_rate: 5e-4,
            epochs: 20,
            seed: 0,
            augmentation: AugmentationSet::default(),
            toy_mode: false,
            include_positive_in_denominator: false,
            scaled_attention: true,
            checkpoint_every: 0,
            clahe: ClaheConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: 32-pixel patches and at most 64 key-points.
    pub fn toy() -> Self {
        Self { patch_side: 32, max_keypoints: 64, epochs: 4, toy_mode: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.max_keypoints == 0 || self.epochs == 0 {
            return Err(param_err!("patch_side, max_keypoints and epochs must be positive"));
        }
        if !self.toy_mode && self.patch_side != DEFAULT_PATCH_SIDE {
            return Err(param_err!("patch side {} requires toy_mode", self.patch_side));
        }
        if !(self.learning_rate > 0.0) {
            return Err(param_err!("learning rate must be positive"));
        }
        self.contrastive().validate()?;
        self.augmentation.validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            negatives_per_anchor: self.negatives_per_anchor,
            include_positive_in_denominator: self.include_positive_in_denominator,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }

    pub fn harris(&self) -> HarrisConfig {
        HarrisConfig { max_points: self.max_keypoints, patch_side: self.patch_side, ..HarrisConfig::default() }
    }
}

/// A preprocessed frame with its cached detections.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFrame {
    pub image: Image,
    pub keypoints: Vec<Keypoint>,
}

impl PreparedFrame {
    pub fn new(raw: &Image, clahe: &ClaheConfig, harris: &HarrisConfig) -> Result<Self> {
        let image = preprocess(raw, clahe)?;
        let keypoints = detect_corners(&image, harris);
        Ok(Self { image, keypoints })
    }
}

/// Seed of the generator used by step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub frame: usize,
    pub loss: f64,
    pub nodes: usize,
    pub augmentation: Option<Augmentation>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelParams<f32>,
    adam: AdamState<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = ModelParams::init(config.patch_side, config.seed)?;
        model.gnn.scaled_attention = config.scaled_attention;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: ModelParams<f32>) -> Self {
        let mut shapes: Vec<Tensor<f32>> = Vec::new();
        model.visit("", &mut |_, t| shapes.push(Tensor::zeros(t.shape())));
        let refs: Vec<&Tensor<f32>> = shapes.iter().collect();
        let adam = AdamState::new(config.adam(), &refs);
        Self { config, model, adam, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Contrastive loss and parameter gradients for one pair of views,
    /// without updating anything. Gradients follow the visit order.
    pub fn loss_and_gradients(
        model: &ModelParams<f32>,
        views: &GraphViews,
        cfg: &ContrastiveConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f32, Vec<Option<Tensor<f32>>>, Vec<BatchStats<f32>>)> {
        let negatives = sample_negatives(views.len(), cfg, rng)?;
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let (loss, stats) = contrastive_objective(model, &mut tape, &mut order, views, &negatives, cfg)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value} ({})", describe_views(views))));
        }
        let mut grads = tape.backward(loss)?;
        let g = order.iter().map(|&v| grads.take(v)).collect();
        Ok((value, g, stats))
    }

    /// One optimisation step on a prepared frame with a sampled augmentation.
    pub fn step_frame(&mut self, frame: &PreparedFrame, epoch: usize, frame_index: usize) -> Result<StepRecord> {
        let mut rng = step_rng(self.config.seed, self.step);
        let aug = sample_augmentation(&mut rng, &self.config.augmentation)?;
        let t = aug.transform(frame.image.width(), frame.image.height());
        let views = build_graph_views(&frame.image, &frame.keypoints, &t, self.config.patch_side)?;
        let mut rec = self.step_views(&views, &mut rng).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "step {} epoch {epoch} frame {frame_index} augmentation {aug} seed {}: {msg}",
                self.step, self.config.seed
            )),
            other => other,
        })?;
        rec.epoch = epoch;
        rec.frame = frame_index;
        rec.augmentation = Some(aug);
        Ok(rec)
    }

    /// One optimisation step on explicit views.
    pub fn step_views(&mut self, views: &GraphViews, rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        let cfg = self.config.contrastive();
        let (loss, grads, stats) = Self::loss_and_gradients(&self.model, views, &cfg, rng)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite gradient at loss {loss}")));
        }
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        let adam = &mut self.adam;
        with_params_mut(&mut self.model, |params| adam.step(params, &grad_refs))?;
        self.model.cnn.update_running(&stats);
        let rec = StepRecord { step: self.step, epoch: 0, frame: 0, loss: loss as f64, nodes: views.len(), augmentation: None };
        self.step += 1;
        Ok(rec)
    }

    /// Runs `epochs` passes over the frames in a seeded shuffled order.
    /// Frames with fewer than two usable nodes are skipped. `on_step`
    /// receives every record and the updated model.
    pub fn fit(
        &mut self,
        frames: &[PreparedFrame],
        on_step: &mut dyn FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
        on_skip: &mut dyn FnMut(usize, &Error),
    ) -> Result<()> {
        if frames.is_empty() {
            return Err(param_err!("no training frames"));
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0000_0000);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            for &k in &order {
                match self.step_frame(&frames[k], epoch, k) {
                    Ok(rec) => on_step(&rec, &self.model)?,
                    Err(e @ Error::Contract(_)) => on_skip(k, &e),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }
}

/// Builds the training loss of one pair of views on `tape`, binding the
/// model's tensors as trainable leaves into `order` (visit order).
pub fn contrastive_objective<T: Scalar>(
    model: &ModelParams<T>,
    tape: &mut Tape<T>,
    order: &mut Vec<Var>,
    views: &GraphViews,
    negatives: &NegativeSets,
    cfg: &ContrastiveConfig,
) -> Result<(Var, Vec<BatchStats<T>>)> {
    let n = views.len();
    let vars = model.bind(tape, true, order);
    let mut all = views.patches.clone();
    all.extend(views.augmented_patches.iter().cloned());
    let batch = tape.constant(patch_batch(&all, model.patch_side())?);
    let cnn = model.cnn.forward(tape, &vars.cnn, batch, Mode::Train)?;
    let fa = tape.slice_rows(cnn.features, 0, n)?;
    let fb = tape.slice_rows(cnn.features, n, 2 * n)?;
    let (w, h) = views.image_size;
    let pa = tape.constant(normalize_positions(&views.positions, w, h)?);
    let pb = tape.constant(normalize_positions(&views.augmented_positions, w, h)?);
    let ga = model.gnn.forward(tape, &vars.gnn, fa, pa)?.global;
    let gb = model.gnn.forward(tape, &vars.gnn, fb, pb)?.global;
    let loss = total_loss_on_tape(tape, &vars.head, ga, gb, negatives, cfg)?;
    Ok((loss, cnn.batch_stats))
}

/// Finite-difference check of the full training loss with respect to every
/// model tensor. Tape gradients are taken in `T`; the central differences
/// always run on an `f64` copy, so the comparison measures the error of the
/// `T` gradients rather than the rounding of a `T` difference quotient.
pub fn check_model_gradients<T: Scalar, R: rand::Rng + ?Sized>(
    model: &ModelParams<T>,
    views: &GraphViews,
    negatives: &NegativeSets,
    cfg: &ContrastiveConfig,
    h: f64,
    probe: Probe,
    rng: &mut R,
) -> Result<Vec<TensorCheck>> {
    let analytic = module_gradients(model, &|m: &ModelParams<T>, tape: &mut Tape<T>, order: &mut Vec<Var>| {
        Ok(contrastive_objective(m, tape, order, views, negatives, cfg)?.0)
    })?;
    let reference = model.cast::<f64>();
    compare_module_gradients(&analytic, &reference, h, probe, rng, |m: &ModelParams<f64>, tape, order| {
        Ok(contrastive_objective(m, tape, order, views, negatives, cfg)?.0)
    })
}

/// Applies `f` to every learnable tensor of `model` at once, in visit order.
fn with_params_mut<R>(model: &mut ModelParams<f32>, f: impl FnOnce(&mut [&mut Tensor<f32>]) -> R) -> R {
    let mut owned = Vec::new();
    model.visit_mut("", &mut |_, t| owned.push(core::mem::replace(t, Tensor::scalar(0.0))));
    let out = {
        let mut refs: Vec<&mut Tensor<f32>> = owned.iter_mut().collect();
        f(&mut refs)
    };
    let mut it = owned.into_iter();
    model.visit_mut("", &mut |_, t| *t = it.next().expect("same parameter layout"));
    out
}

/// Names of the learnable tensors in optimizer order.
pub fn parameter_names(model: &ModelParams<f32>) -> Vec<String> {
    let mut names = Vec::new();
    model.visit("", &mut |n, _| names.push(n));
    names
}
