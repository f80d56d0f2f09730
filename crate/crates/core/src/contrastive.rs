//! Cross-view contrastive objective over corresponding graph nodes.
//!
//! For anchor `g_i` with positive `h_i` (its node in the other view) the
//! per-node loss is
//!
//! ```text
//! L(g_i, h_i) = -log( exp(S(g_i,h_i)/tau) / ( sum_k exp(S(g_i,g_k)/tau) + sum_k exp(S(g_i,h_k)/tau) ) )
//! ```
//!
//! where `S` is the cosine similarity of projected features and both sums run
//! over sampled negatives. The positive term is absent from the denominator
//! unless `include_positive_in_denominator` is set, so the loss can be
//! negative. The total loss averages `L(g_i,h_i) + L(h_i,g_i)` over `2N`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::DESCRIPTOR_DIM;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Mlp, MlpVars, Parameters};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Negatives drawn per anchor from each of the intra- and inter-view pools.
    pub negatives_per_anchor: usize,
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.08, negatives_per_anchor: 10, include_positive_in_denominator: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Parameter(alloc::format!("tau must be positive, got {}", self.tau)));
        }
        if self.negatives_per_anchor == 0 {
            return Err(Error::Parameter(String::from("negatives_per_anchor must be at least 1")));
        }
        Ok(())
    }
}

/// Non-linear projection used only inside the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub mlp: Mlp<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { mlp: Mlp::init(DESCRIPTOR_DIM, DESCRIPTOR_DIM, DESCRIPTOR_DIM, 1.0, rng) }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> MlpVars {
        self.mlp.bind(tape, trainable, order)
    }

    pub fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.mlp.apply(x)
    }
}

impl<T: Scalar> Parameters<T> for ProjectionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.mlp.visit_mut(prefix, f);
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(na > T::zero()) || !(nb > T::zero()) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateSimilarity);
    }
    if a == b {
        return Ok(T::one());
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    Ok(dot / (na * nb))
}

fn row_vector<T: Scalar>(v: &[T]) -> Result<Tensor<T>> {
    if v.len() != DESCRIPTOR_DIM {
        return Err(shape_err!("feature has {} entries, expected {DESCRIPTOR_DIM}", v.len()));
    }
    Tensor::new(&[1, v.len()], v.to_vec())
}

/// Cosine similarity of the projected features.
pub fn similarity<T: Scalar>(u: &[T], v: &[T], head: &ProjectionHead<T>) -> Result<T> {
    let pu = head.project(&row_vector(u)?)?;
    let pv = head.project(&row_vector(v)?)?;
    cosine(pu.data(), pv.data())
}

/// Per-node loss from already computed similarities.
pub fn loss_from_similarities<T: Scalar>(positive: T, intra: &[T], inter: &[T], cfg: &ContrastiveConfig) -> Result<T> {
    if intra.is_empty() || inter.is_empty() {
        return Err(contract_err!("node loss needs at least one negative in each pool"));
    }
    let inv_tau = T::of(1.0 / cfg.tau);
    let mut logits: Vec<T> = intra.iter().chain(inter).map(|&s| s * inv_tau).collect();
    if cfg.include_positive_in_denominator {
        logits.push(positive * inv_tau);
    }
    Ok(crate::tape::logsumexp(&logits) - positive * inv_tau)
}

/// Loss of one anchor against its positive and explicit negatives.
pub fn node_loss<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    intra_negatives: &[&[T]],
    inter_negatives: &[&[T]],
    head: &ProjectionHead<T>,
    cfg: &ContrastiveConfig,
) -> Result<T> {
    cfg.validate()?;
    if intra_negatives.is_empty() || inter_negatives.is_empty() {
        return Err(contract_err!("node loss needs at least one negative in each pool"));
    }
    let pa = head.project(&row_vector(anchor)?)?;
    let proj = |v: &[T]| -> Result<Tensor<T>> { head.project(&row_vector(v)?) };
    let pos = cosine(pa.data(), proj(positive)?.data())?;
    let intra = intra_negatives
        .iter()
        .map(|v| cosine(pa.data(), proj(v)?.data()))
        .collect::<Result<Vec<T>>>()?;
    let inter = inter_negatives
        .iter()
        .map(|v| cosine(pa.data(), proj(v)?.data()))
        .collect::<Result<Vec<T>>>()?;
    loss_from_similarities(pos, &intra, &inter, cfg)
}

/// Sampled negative node indices for every anchor.
///
/// Anchors `0..N` are the nodes of the first view and `N..2N` those of the
/// second. Entries are node indices `0..N` in the relevant view; anchor node
/// `i` never appears in its own lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSets {
    pub nodes: usize,
    pub intra: Vec<Vec<usize>>,
    pub inter: Vec<Vec<usize>>,
}

impl NegativeSets {
    /// Every other node in both pools, in index order.
    pub fn exhaustive(n: usize) -> Self {
        let pool = |i: usize| (0..n).filter(|&k| k != i).collect::<Vec<_>>();
        let lists: Vec<Vec<usize>> = (0..2 * n).map(|a| pool(a % n)).collect();
        Self { nodes: n, intra: lists.clone(), inter: lists }
    }

    /// Negatives per anchor and pool (all lists share one length).
    pub fn per_pool(&self) -> usize {
        self.intra.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes;
        let m = self.per_pool();
        if self.intra.len() != 2 * n || self.inter.len() != 2 * n {
            return Err(contract_err!("negative sets cover {} anchors, expected {}", self.intra.len(), 2 * n));
        }
        if m == 0 {
            return Err(contract_err!("negative sets are empty"));
        }
        for (a, (intra, inter)) in self.intra.iter().zip(&self.inter).enumerate() {
            if intra.len() != m || inter.len() != m {
                return Err(contract_err!("anchor {a} has uneven negative lists"));
            }
            if intra.iter().chain(inter).any(|&k| k >= n || k == a % n) {
                return Err(contract_err!("anchor {a} has an invalid negative index"));
            }
        }
        Ok(())
    }
}

/// Draws `min(negatives_per_anchor, N - 1)` negatives per anchor from each
/// pool, uniformly without replacement.
pub fn sample_negatives<R: Rng + ?Sized>(n: usize, cfg: &ContrastiveConfig, rng: &mut R) -> Result<NegativeSets> {
    if n < 2 {
        return Err(contract_err!("contrastive loss needs at least 2 corresponding nodes, got {n}"));
    }
    let m = cfg.negatives_per_anchor.min(n - 1);
    let mut draw = |i: usize| -> Vec<usize> {
        rand::seq::index::sample(rng, n - 1, m)
            .into_iter()
            .map(|k| if k >= i { k + 1 } else { k })
            .collect()
    };
    let mut intra = Vec::with_capacity(2 * n);
    let mut inter = Vec::with_capacity(2 * n);
    for a in 0..2 * n {
        intra.push(draw(a % n));
        inter.push(draw(a % n));
    }
    Ok(NegativeSets { nodes: n, intra, inter })
}

/// Total loss on tape from the global features of both views (`[N, 128]`
/// each, row `i` of one corresponding to row `i` of the other).
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    head: &MlpVars,
    view: Var,
    augmented: Var,
    negatives: &NegativeSets,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, d) = tape.value(view).dims2()?;
    if tape.shape(augmented) != [n, d] {
        return Err(shape_err!("views differ in shape: {:?} vs {:?}", tape.shape(view), tape.shape(augmented)));
    }
    if n < 2 {
        return Err(contract_err!("contrastive loss needs at least 2 corresponding nodes, got {n}"));
    }
    if negatives.nodes != n {
        return Err(contract_err!("negative sets built for {} nodes, views have {n}", negatives.nodes));
    }
    negatives.validate()?;
    let za = head.forward(tape, view)?;
    let zb = head.forward(tape, augmented)?;
    let z = tape.concat_rows(za, zb)?;
    let z = tape.normalize_rows(z)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, T::of(1.0 / cfg.tau));

    let w = 2 * n;
    let m = negatives.per_pool();
    let cols = 2 * m + usize::from(cfg.include_positive_in_denominator);
    let mut pos_idx = Vec::with_capacity(w);
    let mut neg_idx = Vec::with_capacity(w * cols);
    for a in 0..w {
        let (own, other) = if a < n { (0, n) } else { (n, 0) };
        let positive = other + a % n;
        pos_idx.push(a * w + positive);
        neg_idx.extend(negatives.intra[a].iter().map(|&k| a * w + own + k));
        neg_idx.extend(negatives.inter[a].iter().map(|&k| a * w + other + k));
        if cfg.include_positive_in_denominator {
            neg_idx.push(a * w + positive);
        }
    }
    let pos = tape.gather(logits, pos_idx, &[w])?;
    let neg = tape.gather(logits, neg_idx, &[w, cols])?;
    let lse = tape.logsumexp_rows(neg)?;
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Total loss evaluated with plain tensors.
pub fn total_loss<T: Scalar>(
    view: &Tensor<T>,
    augmented: &Tensor<T>,
    head: &ProjectionHead<T>,
    negatives: &NegativeSets,
    cfg: &ContrastiveConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let mut order = vec![];
    let vars = head.bind(&mut tape, false, &mut order);
    let a = tape.constant(view.clone());
    let b = tape.constant(augmented.clone());
    let loss = total_loss_on_tape(&mut tape, &vars, a, b, negatives, cfg)?;
    Ok(tape.value(loss).data()[0])
}
