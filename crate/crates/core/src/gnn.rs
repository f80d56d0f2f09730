//! Attentional graph network over the fully connected key-point graph.
//!
//! Per node `i` with visual feature `f_i` at pixel position `p_i`:
//!
//! ```text
//! f0_i = f_i + MLP_pos(normalize(p_i))
//! Q_i  = W_Q f0_i + b_Q,  K_l = W_K f0_l + b_K,  V_l = W_V f0_l + b_V
//! m_i  = sum_l softmax_l(Q_i . K_l / sqrt(d)) V_l        (l over all nodes, self included)
//! f1_i = f0_i + MLP_upd([f0_i | m_i])
//! g_i  = f1_i
//! ```
//!
//! Queries, keys and values read the pre-update feature `f0`. Coordinates are
//! mapped to `[-1, 1]` by the image extents before the positional MLP.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::cnn::DESCRIPTOR_DIM;
use crate::error::{contract_err, shape_err, Result};
use crate::geometry::Point2;
use crate::nn::{join, Linear, LinearVars, Mlp, MlpVars, Parameters};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const POS_HIDDEN: usize = 32;
pub const UPDATE_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams<T> {
    pub pos_mlp: Mlp<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub update_mlp: Mlp<T>,
    /// Divide attention logits by `sqrt(d)`.
    pub scaled_attention: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GnnVars {
    pub pos_mlp: MlpVars,
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub update_mlp: MlpVars,
}

/// Intermediate node features of one forward pass, each `[N, 128]`
/// (attention is `[N, N]`).
#[derive(Debug, Clone, Copy)]
pub struct GnnForward {
    pub encoded: Var,
    pub attention: Var,
    pub message: Var,
    pub global: Var,
}

impl<T: Scalar> GnnParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let d = DESCRIPTOR_DIM;
        Self {
            pos_mlp: Mlp::init(2, POS_HIDDEN, d, 1.0, rng),
            query: Linear::init(d, d, 1.0, rng),
            key: Linear::init(d, d, 1.0, rng),
            value: Linear::init(d, d, 1.0, rng),
            update_mlp: Mlp::init(2 * d, UPDATE_HIDDEN, d, 1.0, rng),
            scaled_attention: true,
        }
    }

    /// All projections and MLPs zeroed.
    pub fn zeros() -> Self {
        let d = DESCRIPTOR_DIM;
        Self {
            pos_mlp: Mlp { hidden: Linear::zeros(2, POS_HIDDEN), output: Linear::zeros(POS_HIDDEN, d) },
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            update_mlp: Mlp { hidden: Linear::zeros(2 * d, UPDATE_HIDDEN), output: Linear::zeros(UPDATE_HIDDEN, d) },
            scaled_attention: true,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> GnnVars {
        GnnVars {
            pos_mlp: self.pos_mlp.bind(tape, trainable, order),
            query: self.query.bind(tape, trainable, order),
            key: self.key.bind(tape, trainable, order),
            value: self.value.bind(tape, trainable, order),
            update_mlp: self.update_mlp.bind(tape, trainable, order),
        }
    }

    fn attention_scale(&self) -> T {
        if self.scaled_attention {
            T::one() / T::of(DESCRIPTOR_DIM as f64).sqrt()
        } else {
            T::one()
        }
    }

    /// `f0 = f + MLP(p)` on tape; `positions` is the `[N, 2]` normalised coordinate matrix.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &GnnVars, features: Var, positions: Var) -> Result<Var> {
        let pos = vars.pos_mlp.forward(tape, positions)?;
        tape.add(features, pos)
    }

    /// Attention weights `[N, N]` and messages `[N, 128]` from encoded features.
    pub fn attend(&self, tape: &mut Tape<T>, vars: &GnnVars, encoded: Var) -> Result<(Var, Var)> {
        let q = vars.query.forward(tape, encoded)?;
        let k = vars.key.forward(tape, encoded)?;
        let v = vars.value.forward(tape, encoded)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, self.attention_scale());
        let attention = tape.softmax_rows(logits)?;
        let message = tape.matmul(attention, v)?;
        Ok((attention, message))
    }

    /// `f1 = f0 + MLP([f0 | m])`.
    pub fn update(&self, tape: &mut Tape<T>, vars: &GnnVars, encoded: Var, message: Var) -> Result<Var> {
        let joined = tape.concat_cols(encoded, message)?;
        if tape.shape(joined)[1] != self.update_mlp.hidden.in_features() {
            return Err(shape_err!(
                "update input has width {}, expected {}",
                tape.shape(joined)[1],
                self.update_mlp.hidden.in_features()
            ));
        }
        let delta = vars.update_mlp.forward(tape, joined)?;
        tape.add(encoded, delta)
    }

    /// Full single-layer pass from visual features to global features.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &GnnVars, features: Var, positions: Var) -> Result<GnnForward> {
        let n = tape.shape(features)[0];
        if n == 0 {
            return Err(contract_err!("graph has no nodes"));
        }
        let encoded = self.encode(tape, vars, features, positions)?;
        let (attention, message) = self.attend(tape, vars, encoded)?;
        let global = self.update(tape, vars, encoded, message)?;
        Ok(GnnForward { encoded, attention, message, global })
    }
}

/// Maps pixel coordinates into `[-1, 1]^2` by the image extents.
pub fn normalize_positions<T: Scalar>(positions: &[Point2], width: usize, height: usize) -> Result<Tensor<T>> {
    let (sx, sy) = ((width.max(2) - 1) as f64, (height.max(2) - 1) as f64);
    let data = positions
        .iter()
        .flat_map(|p| [T::of(2.0 * p.x / sx - 1.0), T::of(2.0 * p.y / sy - 1.0)])
        .collect();
    Tensor::new(&[positions.len(), 2], data)
}

/// Fully connected key-point graph of one image and its feature stages.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointGraph<T> {
    pub positions: Vec<Point2>,
    pub image_size: (usize, usize),
    /// CNN features `f`, `[N, 128]`.
    pub visual: Option<Tensor<T>>,
    /// Position-dependent features `f0`.
    pub encoded: Option<Tensor<T>>,
    /// Attention messages `m`.
    pub message: Option<Tensor<T>>,
    /// Updated features `f1`.
    pub updated: Option<Tensor<T>>,
    /// Global features `g` used for matching.
    pub global: Option<Tensor<T>>,
}

impl<T: Scalar> KeypointGraph<T> {
    pub fn new(positions: Vec<Point2>, image_size: (usize, usize), visual: Tensor<T>) -> Result<Self> {
        let (n, d) = visual.dims2()?;
        if n != positions.len() || d != DESCRIPTOR_DIM {
            return Err(shape_err!(
                "{} positions with features {n}x{d}; expected {}x{DESCRIPTOR_DIM}",
                positions.len(),
                positions.len()
            ));
        }
        if n == 0 {
            return Err(contract_err!("graph has no nodes"));
        }
        Ok(Self { positions, image_size, visual: Some(visual), encoded: None, message: None, updated: None, global: None })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Permutes nodes and every computed stage: node `i` of the result is
    /// node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows = |t: &Option<Tensor<T>>| {
            t.as_ref().map(|t| {
                let d = t.shape()[1];
                let data = perm.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                Tensor::new(&[perm.len(), d], data).expect("same width")
            })
        };
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            image_size: self.image_size,
            visual: rows(&self.visual),
            encoded: rows(&self.encoded),
            message: rows(&self.message),
            updated: rows(&self.updated),
            global: rows(&self.global),
        }
    }
}

fn eval_tape<T: Scalar>(params: &GnnParams<T>) -> (Tape<T>, GnnVars) {
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let vars = params.bind(&mut tape, false, &mut order);
    (tape, vars)
}

/// Sets `encoded` from the visual features and node positions.
pub fn positional_encode<T: Scalar>(graph: &mut KeypointGraph<T>, params: &GnnParams<T>) -> Result<()> {
    let visual = graph.visual.as_ref().ok_or_else(|| contract_err!("visual features missing"))?;
    let (mut tape, vars) = eval_tape(params);
    let f = tape.constant(visual.clone());
    let p = tape.constant(normalize_positions(&graph.positions, graph.image_size.0, graph.image_size.1)?);
    let f0 = params.encode(&mut tape, &vars, f, p)?;
    graph.encoded = Some(tape.value(f0).clone());
    Ok(())
}

/// Sets `message` by attention over all nodes; returns the `[N, N]` weights.
pub fn attention_message<T: Scalar>(graph: &mut KeypointGraph<T>, params: &GnnParams<T>) -> Result<Tensor<T>> {
    if graph.is_empty() {
        return Err(contract_err!("graph has no nodes"));
    }
    let encoded = graph.encoded.as_ref().ok_or_else(|| contract_err!("encoded features missing"))?;
    let (mut tape, vars) = eval_tape(params);
    let f0 = tape.constant(encoded.clone());
    let (a, m) = params.attend(&mut tape, &vars, f0)?;
    graph.message = Some(tape.value(m).clone());
    Ok(tape.value(a).clone())
}

/// Sets `updated` and `global` from the encoded features and messages.
pub fn node_update<T: Scalar>(graph: &mut KeypointGraph<T>, params: &GnnParams<T>) -> Result<()> {
    let encoded = graph.encoded.as_ref().ok_or_else(|| contract_err!("encoded features missing"))?;
    let message = graph.message.as_ref().ok_or_else(|| contract_err!("messages missing"))?;
    let (mut tape, vars) = eval_tape(params);
    let f0 = tape.constant(encoded.clone());
    let m = tape.constant(message.clone());
    let f1 = params.update(&mut tape, &vars, f0, m)?;
    let f1 = tape.value(f1).clone();
    graph.updated = Some(f1.clone());
    graph.global = Some(f1);
    Ok(())
}

/// Runs all three stages.
pub fn run_gnn<T: Scalar>(graph: &mut KeypointGraph<T>, params: &GnnParams<T>) -> Result<()> {
    positional_encode(graph, params)?;
    attention_message(graph, params)?;
    node_update(graph, params)
}

impl<T: Scalar> Parameters<T> for GnnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.pos_mlp.visit(&join(prefix, "pos_mlp"), f);
        let attn = join(prefix, "attn");
        f(join(&attn, "wq"), &self.query.weight);
        f(join(&attn, "bq"), &self.query.bias);
        f(join(&attn, "wk"), &self.key.weight);
        f(join(&attn, "bk"), &self.key.bias);
        f(join(&attn, "wv"), &self.value.weight);
        f(join(&attn, "bv"), &self.value.bias);
        self.update_mlp.visit(&join(prefix, "update_mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.pos_mlp.visit_mut(&join(prefix, "pos_mlp"), f);
        let attn = join(prefix, "attn");
        f(join(&attn, "wq"), &mut self.query.weight);
        f(join(&attn, "bq"), &mut self.query.bias);
        f(join(&attn, "wk"), &mut self.key.weight);
        f(join(&attn, "bk"), &mut self.key.bias);
        f(join(&attn, "wv"), &mut self.value.weight);
        f(join(&attn, "bv"), &mut self.value.bias);
        self.update_mlp.visit_mut(&join(prefix, "update_mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, module_scale, Probe};
    use alloc::vec;
    use crate::testutil::{max_abs_diff, rng, uniform, weighted_sum};

    fn random_graph(n: usize, seed: u64) -> KeypointGraph<f64> {
        let mut r = rng(seed);
        let positions = (0..n).map(|_| Point2::new(r.random_range(0.0..255.0), r.random_range(0.0..255.0))).collect();
        KeypointGraph::new(positions, (256, 256), uniform(&[n, DESCRIPTOR_DIM], -1.0, 1.0, seed + 1)).unwrap()
    }

    fn linear_row(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
        let (i, o) = (l.in_features(), l.out_features());
        (0..o).map(|c| l.bias.data()[c] + (0..i).map(|r| x[r] * l.weight.data()[r * o + c]).sum::<f64>()).collect()
    }

    #[test]
    fn zero_positional_mlp_keeps_features() {
        let mut params = GnnParams::<f64>::init(&mut rng(1));
        params.pos_mlp = GnnParams::zeros().pos_mlp;
        let mut g = random_graph(5, 2);
        positional_encode(&mut g, &params).unwrap();
        assert_eq!(g.encoded, g.visual);
    }

    #[test]
    fn positions_change_encoding() {
        let params = GnnParams::<f64>::init(&mut rng(1));
        let f = uniform(&[1, DESCRIPTOR_DIM], -1.0, 1.0, 3);
        let mut a = KeypointGraph::new(vec![Point2::new(10.0, 10.0)], (256, 256), f.clone()).unwrap();
        let mut b = KeypointGraph::new(vec![Point2::new(200.0, 40.0)], (256, 256), f).unwrap();
        positional_encode(&mut a, &params).unwrap();
        positional_encode(&mut b, &params).unwrap();
        assert!(max_abs_diff(a.encoded.unwrap().data(), b.encoded.unwrap().data()) > 1e-3);
    }

    #[test]
    fn single_node_message_is_its_value() {
        let params = GnnParams::<f64>::init(&mut rng(4));
        let mut g = random_graph(1, 5);
        positional_encode(&mut g, &params).unwrap();
        let a = attention_message(&mut g, &params).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let v = linear_row(&params.value, g.encoded.as_ref().unwrap().row(0));
        assert!(max_abs_diff(g.message.as_ref().unwrap().data(), &v) < 1e-12);
    }

    #[test]
    fn equal_keys_average_values() {
        let mut params = GnnParams::<f64>::init(&mut rng(6));
        params.key.weight = Tensor::zeros(&[DESCRIPTOR_DIM, DESCRIPTOR_DIM]);
        let mut g = random_graph(4, 7);
        positional_encode(&mut g, &params).unwrap();
        let a = attention_message(&mut g, &params).unwrap();
        assert!(a.data().iter().all(|&w| (w - 0.25).abs() < 1e-12));
        let f0 = g.encoded.as_ref().unwrap();
        let mut mean = vec![0.0; DESCRIPTOR_DIM];
        for l in 0..4 {
            for (m, v) in mean.iter_mut().zip(linear_row(&params.value, f0.row(l))) {
                *m += v / 4.0;
            }
        }
        for i in 0..4 {
            assert!(max_abs_diff(g.message.as_ref().unwrap().row(i), &mean) < 1e-12);
        }
    }

    #[test]
    fn attention_matches_double_loop() {
        for seed in 0..5 {
            let params = GnnParams::<f64>::init(&mut rng(100 + seed));
            let mut g = random_graph(4, 200 + seed);
            positional_encode(&mut g, &params).unwrap();
            let a = attention_message(&mut g, &params).unwrap();
            let f0 = g.encoded.as_ref().unwrap();
            let q: Vec<Vec<f64>> = (0..4).map(|i| linear_row(&params.query, f0.row(i))).collect();
            let k: Vec<Vec<f64>> = (0..4).map(|i| linear_row(&params.key, f0.row(i))).collect();
            let v: Vec<Vec<f64>> = (0..4).map(|i| linear_row(&params.value, f0.row(i))).collect();
            for i in 0..4 {
                let logits: Vec<f64> =
                    (0..4).map(|l| q[i].iter().zip(&k[l]).map(|(x, y)| x * y).sum::<f64>() / (DESCRIPTOR_DIM as f64).sqrt()).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|s| (s - top).exp()).sum();
                let mut m = vec![0.0; DESCRIPTOR_DIM];
                for l in 0..4 {
                    let w = (logits[l] - top).exp() / z;
                    assert!((a.data()[i * 4 + l] - w).abs() < 1e-12);
                    for (mc, vc) in m.iter_mut().zip(&v[l]) {
                        *mc += w * vc;
                    }
                }
                assert!(max_abs_diff(g.message.as_ref().unwrap().row(i), &m) < 1e-5);
            }
        }
    }

    #[test]
    fn zero_update_mlp_keeps_encoding() {
        let mut params = GnnParams::<f64>::init(&mut rng(8));
        params.update_mlp.output = Linear::zeros(UPDATE_HIDDEN, DESCRIPTOR_DIM);
        let mut g = random_graph(3, 9);
        run_gnn(&mut g, &params).unwrap();
        assert_eq!(g.global, g.encoded);
        assert_eq!(g.updated, g.global);
        assert_eq!(params.update_mlp.hidden.in_features(), 2 * DESCRIPTOR_DIM);
    }

    #[test]
    fn permutation_equivariance() {
        let params = GnnParams::<f64>::init(&mut rng(10));
        let mut g = random_graph(6, 11);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut p = g.permuted(&perm);
        run_gnn(&mut g, &params).unwrap();
        run_gnn(&mut p, &params).unwrap();
        let expected = g.permuted(&perm);
        for (x, y) in [(&p.encoded, &expected.encoded), (&p.message, &expected.message), (&p.global, &expected.global)] {
            assert!(max_abs_diff(x.as_ref().unwrap().data(), y.as_ref().unwrap().data()) < 1e-6);
        }
    }

    #[test]
    fn normalized_corners() {
        let p = [Point2::new(0.0, 0.0), Point2::new(255.0, 127.0), Point2::new(127.5, 63.5)];
        let t = normalize_positions::<f64>(&p, 256, 128).unwrap();
        assert_eq!(t.data(), &[-1.0, -1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn graph_construction_errors() {
        let f = uniform::<f64>(&[2, DESCRIPTOR_DIM], 0.0, 1.0, 1);
        assert!(KeypointGraph::new(vec![Point2::new(0.0, 0.0)], (8, 8), f).is_err());
        let one = uniform::<f64>(&[1, DESCRIPTOR_DIM], 0.0, 1.0, 1);
        assert!(KeypointGraph::new(vec![], (8, 8), one).is_err());
        let narrow = uniform::<f64>(&[1, 64], 0.0, 1.0, 1);
        assert!(KeypointGraph::new(vec![Point2::new(0.0, 0.0)], (8, 8), narrow).is_err());
    }

    #[test]
    fn unscaled_attention_is_sharper() {
        let mut params = GnnParams::<f64>::init(&mut rng(12));
        let mut g = random_graph(5, 13);
        positional_encode(&mut g, &params).unwrap();
        let scaled = attention_message(&mut g, &params).unwrap();
        params.scaled_attention = false;
        let raw = attention_message(&mut g, &params).unwrap();
        let peak = |a: &Tensor<f64>| a.data().iter().cloned().fold(0.0, f64::max);
        assert!(peak(&raw) >= peak(&scaled));
    }

    #[test]
    fn module_gradients() {
        let params = GnnParams::<f64>::init(&mut rng(14));
        let f = uniform::<f64>(&[3, DESCRIPTOR_DIM], -1.0, 1.0, 15);
        let p = uniform::<f64>(&[3, 2], -1.0, 1.0, 16);
        let errs = check_module(&params, 1e-5, Probe::Directional(3), &mut rng(17), |m: &GnnParams<f64>, tape, order| {
            let vars = m.bind(tape, true, order);
            let fv = tape.constant(f.clone());
            let pv = tape.constant(p.clone());
            let out = m.forward(tape, &vars, fv, pv)?;
            weighted_sum(tape, out.global, 18)
        })
        .unwrap();
        assert_eq!(errs.len(), 14);
        let scale = module_scale(&errs);
        for c in errs {
            if c.name == "attn.bk" {
                // A shared key offset shifts each softmax row by a constant.
                assert!(c.gradient_norm < 1e-12 && c.passes(1e-5, scale), "{c:?}");
            } else {
                assert!(c.relative_error < 1e-5, "{c:?}");
            }
        }
    }
}
