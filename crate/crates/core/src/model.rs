//! The full learnable model: patch CNN, attention GNN and projection head.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cnn::{patch_batch, CnnParams, ConvBlockVars, DESCRIPTOR_DIM};
use crate::contrastive::ProjectionHead;
use crate::error::{shape_err, Result};
use crate::geometry::Point2;
use crate::gnn::{normalize_positions, GnnParams, GnnVars};
use crate::imaging::Patch;
use crate::nn::{join, Linear, Mlp, MlpVars, Mode, Parameters};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cnn: CnnParams<T>,
    pub gnn: GnnParams<T>,
    pub head: ProjectionHead<T>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub cnn: Vec<ConvBlockVars>,
    pub gnn: GnnVars,
    pub head: MlpVars,
}

/// CNN parameters drawn from a seeded generator.
pub fn init_cnn<T: Scalar>(patch_side: usize, seed: u64) -> Result<CnnParams<T>> {
    CnnParams::init(patch_side, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialisation of every component from one seed.
    pub fn init(patch_side: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = CnnParams::init(patch_side, &mut rng)?;
        let gnn = GnnParams::init(&mut rng);
        let head = ProjectionHead::init(&mut rng);
        Ok(Self { cnn, gnn, head })
    }

    pub fn patch_side(&self) -> usize {
        self.cnn.patch_side()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> ModelVars {
        ModelVars {
            cnn: self.cnn.bind(tape, trainable, order),
            gnn: self.gnn.bind(tape, trainable, order),
            head: self.head.bind(tape, trainable, order),
        }
    }

    /// Global features `[N, 128]` of one image's key-points in eval mode.
    pub fn global_features(&self, patches: &[Patch], positions: &[Point2], image_size: (usize, usize)) -> Result<Tensor<T>> {
        if patches.len() != positions.len() {
            return Err(shape_err!("{} patches for {} positions", patches.len(), positions.len()));
        }
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = self.bind(&mut tape, false, &mut order);
        let batch = tape.constant(patch_batch(patches, self.patch_side())?);
        let f = self.cnn.forward(&mut tape, &vars.cnn, batch, Mode::Eval)?;
        let pos = tape.constant(normalize_positions(positions, image_size.0, image_size.1)?);
        let out = self.gnn.forward(&mut tape, &vars.gnn, f.features, pos)?;
        Ok(tape.value(out.global).clone())
    }

    /// Eval-mode CNN descriptors `[N, 128]` without graph context.
    pub fn visual_features(&self, patches: &[Patch]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = self.cnn.bind(&mut tape, false, &mut order);
        let batch = tape.constant(patch_batch(patches, self.patch_side())?);
        let f = self.cnn.forward(&mut tape, &vars, batch, Mode::Eval)?;
        Ok(tape.value(f.features).clone())
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let d = DESCRIPTOR_DIM;
        let mut out: ModelParams<U> = ModelParams {
            cnn: CnnParams::init(self.patch_side(), &mut ChaCha8Rng::seed_from_u64(0)).expect("valid side"),
            gnn: GnnParams::zeros(),
            head: ProjectionHead { mlp: Mlp { hidden: Linear::zeros(d, d), output: Linear::zeros(d, d) } },
        };
        out.gnn.scaled_attention = self.gnn.scaled_attention;
        let mut src = Vec::new();
        self.visit("", &mut |n, t| src.push((n, t.cast::<U>())));
        self.visit_buffers("", &mut |n, t| src.push((n, t.cast::<U>())));
        let mut it = src.into_iter();
        let mut assign = |_: String, t: &mut Tensor<U>| *t = it.next().expect("same layout").1;
        out.visit_mut("", &mut assign);
        out.visit_buffers_mut("", &mut assign);
        out
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.cnn.visit(&join(prefix, "cnn"), f);
        self.gnn.visit(&join(prefix, "gnn"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.cnn.visit_mut(&join(prefix, "cnn"), f);
        self.gnn.visit_mut(&join(prefix, "gnn"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.cnn.visit_buffers(&join(prefix, "cnn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.cnn.visit_buffers_mut(&join(prefix, "cnn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::{ContrastiveConfig, NegativeSets};
    use crate::detector::Keypoint;
    use crate::gradcheck::{module_scale, Probe};
    use crate::imaging::{extract_patch, preprocess, ClaheConfig};
    use crate::synth::{synthesize, SynthConfig};
    use crate::testutil::{max_abs_diff, rng};
    use crate::train::check_model_gradients;
    use crate::views::{build_graph_views, Augmentation};
    use alloc::vec;

    fn scene() -> crate::imaging::Image {
        let raw = synthesize(7, &SynthConfig { width: 96, height: 96, ..SynthConfig::default() }).unwrap();
        preprocess(&raw, &ClaheConfig::default()).unwrap()
    }

    fn points() -> Vec<Point2> {
        vec![Point2::new(30.0, 35.0), Point2::new(60.0, 40.0), Point2::new(45.0, 64.0), Point2::new(66.0, 66.0)]
    }

    #[test]
    fn bind_follows_visit_order() {
        let m = ModelParams::<f32>::init(32, 1).unwrap();
        let mut tape = Tape::new();
        let mut order = Vec::new();
        m.bind(&mut tape, true, &mut order);
        let mut shapes = Vec::new();
        m.visit("", &mut |_, t| shapes.push(t.shape().to_vec()));
        assert_eq!(order.len(), shapes.len());
        for (v, s) in order.iter().zip(&shapes) {
            assert_eq!(tape.shape(*v), s.as_slice());
        }
        assert_eq!(m.parameter_count(), shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>());
    }

    #[test]
    fn seeded_init() {
        assert_eq!(ModelParams::<f32>::init(32, 3).unwrap(), ModelParams::<f32>::init(32, 3).unwrap());
        assert_ne!(ModelParams::<f32>::init(32, 3).unwrap(), ModelParams::<f32>::init(32, 4).unwrap());
        assert!(ModelParams::<f32>::init(30, 3).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let m = ModelParams::<f32>::init(32, 2).unwrap();
        let back: ModelParams<f32> = m.cast::<f64>().cast();
        assert_eq!(back, m);
    }

    #[test]
    fn global_features_are_permutation_equivariant() {
        let m = ModelParams::<f64>::init(32, 5).unwrap();
        let img = scene();
        let pts = points();
        let patches: Vec<_> = pts.iter().map(|&p| extract_patch(&img, p, 32).unwrap()).collect();
        let g = m.global_features(&patches, &pts, (96, 96)).unwrap();
        assert_eq!(g.shape(), &[4, DESCRIPTOR_DIM]);
        let perm = [2, 3, 0, 1];
        let pp: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let pa: Vec<_> = perm.iter().map(|&i| patches[i].clone()).collect();
        let h = m.global_features(&pa, &pp, (96, 96)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!(max_abs_diff(h.row(k), g.row(i)) < 1e-9);
        }
        assert!(m.global_features(&pa[..2], &pp, (96, 96)).is_err());
        let f = m.visual_features(&patches).unwrap();
        assert_eq!(f.shape(), &[4, DESCRIPTOR_DIM]);
    }

    fn toy_views(side: usize) -> crate::views::GraphViews {
        // Raw frames: CLAHE output is quantised, which puts ReLU kinks right
        // next to the evaluation point.
        let img = synthesize(7, &SynthConfig { width: 96, height: 96, ..SynthConfig::default() }).unwrap();
        let kps: Vec<Keypoint> = points()[..3].iter().map(|&p| Keypoint { position: p, response: 1.0 }).collect();
        let t = Augmentation::Rotation { degrees: 5.0 }.transform(96, 96);
        build_graph_views(&img, &kps, &t, side).unwrap()
    }

    #[test]
    fn full_model_gradients() {
        let views = toy_views(16);
        assert_eq!(views.len(), 3);
        let probe = Probe::Auto { max_elementwise: 32, directions: 2 };
        let (neg, cfg) = (NegativeSets::exhaustive(3), ContrastiveConfig::default());
        let m = ModelParams::<f64>::init(16, 6).unwrap();
        let checks = check_model_gradients(&m, &views, &neg, &cfg, 1e-7, probe, &mut rng(8)).unwrap();
        let scale = module_scale(&checks);
        for c in &checks {
            assert!(c.passes(1e-5, scale), "{c:?}");
        }
        let m = ModelParams::<f32>::init(16, 6).unwrap();
        let checks = check_model_gradients(&m, &views, &neg, &cfg, 1e-7, probe, &mut rng(8)).unwrap();
        let scale = module_scale(&checks);
        for c in &checks {
            assert!(c.passes(1e-3, scale), "{c:?}");
        }
    }
}
