//! Central finite-difference checks of tape gradients.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};
use crate::nn::{standard_normal, Parameters};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `||a - b|| / max(||a||, ||b||)` over two equally long vectors.
pub fn relative_error_norm(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        libm::sqrt(diff / scale)
    }
}

fn evaluate<T: Scalar, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(contract_err!("gradient check needs a scalar output, got shape {:?}", v.shape()));
    }
    Ok(v.data()[0].as_f64())
}

/// Tape gradient of the scalar `f` with respect to each input.
pub fn analytic_gradients<T: Scalar, F>(inputs: &[Tensor<T>], f: &F) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central differences for every element of every input.
pub fn numeric_gradients<T: Scalar, F>(inputs: &[Tensor<T>], h: f64, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].numel());
        for e in 0..inputs[k].numel() {
            let x = inputs[k].data()[e];
            let (xp, xm) = (T::of(x.as_f64() + h), T::of(x.as_f64() - h));
            work[k].data_mut()[e] = xp;
            let plus = evaluate(&work, f)?;
            work[k].data_mut()[e] = xm;
            let minus = evaluate(&work, f)?;
            work[k].data_mut()[e] = x;
            g.push((plus - minus) / (xp.as_f64() - xm.as_f64()));
        }
        out.push(g);
    }
    Ok(out)
}

/// Norm-wise relative error between tape and finite-difference gradients,
/// one entry per input.
pub fn check_gradients<T: Scalar, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, h, &f)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let a: Vec<f64> = a.data().iter().map(|x| x.as_f64()).collect();
            relative_error_norm(&a, n)
        })
        .collect())
}

/// For inputs too large to perturb element by element: compares the
/// directional derivative along `directions` random Gaussian directions per
/// input with a central difference along the same direction. Returns the
/// worst relative error per input.
pub fn check_directional<T: Scalar, R: Rng + ?Sized, F>(
    inputs: &[Tensor<T>],
    h: f64,
    directions: usize,
    rng: &mut R,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut worst = 0.0f64;
        for _ in 0..directions {
            let dir: Vec<f64> = (0..inputs[k].numel()).map(|_| standard_normal(rng)).collect();
            let norm = libm::sqrt(dir.iter().map(|d| d * d).sum::<f64>()).max(f64::MIN_POSITIVE);
            // Compare against the perturbation actually representable in `T`.
            let mut applied = alloc::vec![0.0f64; dir.len()];
            let shift = |s: f64, w: &mut Tensor<T>, applied: &mut [f64]| {
                for (((y, x), d), a) in w.data_mut().iter_mut().zip(inputs[k].data()).zip(&dir).zip(applied.iter_mut()) {
                    *y = T::of(x.as_f64() + s * h * d / norm);
                    *a += s * (y.as_f64() - x.as_f64());
                }
            };
            shift(1.0, &mut work[k], &mut applied);
            let plus = evaluate(&work, &f)?;
            shift(-1.0, &mut work[k], &mut applied);
            let minus = evaluate(&work, &f)?;
            work[k] = inputs[k].clone();
            let predicted: f64 = analytic[k].data().iter().zip(&applied).map(|(g, a)| g.as_f64() * a).sum();
            worst = worst.max(relative_error(predicted, plus - minus));
        }
        out.push(worst);
    }
    Ok(out)
}

/// How [`check_module`] perturbs each parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Every element separately; norm-wise relative error.
    Elementwise,
    /// The analytic gradient direction, then `n - 1` directions mixing it
    /// with a random unit vector; worst relative error. Pure random
    /// directions of a large tensor see slopes of order `|g| / sqrt(n)`,
    /// which rounding in the differences swamps. Falls back to random
    /// directions when the analytic gradient is zero.
    Directional(usize),
    /// Elementwise for tensors of at most `max_elementwise` entries,
    /// directional otherwise.
    Auto { max_elementwise: usize, directions: usize },
}

fn with_tensor<T: Scalar, P: Parameters<T>>(module: &mut P, index: usize, f: impl FnOnce(&mut Tensor<T>)) {
    let mut k = 0;
    let mut f = Some(f);
    module.visit_mut("", &mut |_, t| {
        if k == index {
            if let Some(f) = f.take() {
                f(t);
            }
        }
        k += 1;
    });
}

fn evaluate_module<T: Scalar, P, F>(module: &P, f: &F) -> Result<f64>
where
    F: Fn(&P, &mut Tape<T>, &mut Vec<Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let out = f(module, &mut tape, &mut order)?;
    Ok(tape.value(out).data()[0].as_f64())
}

/// Result of [`check_module`] for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    /// Euclidean norm of the tape gradient.
    pub gradient_norm: f64,
    /// Largest finite-difference derivative magnitude seen, elementwise or
    /// along a unit direction.
    pub numeric_scale: f64,
}

impl TensorCheck {
    /// Within `tol`, either relatively or, for a gradient that vanishes, in
    /// proportion to `module_scale` (typically the largest gradient norm of
    /// the module). Relative error is meaningless for a gradient that is
    /// zero by construction.
    pub fn passes(&self, tol: f64, module_scale: f64) -> bool {
        self.relative_error < tol || (self.gradient_norm < tol * module_scale && self.numeric_scale < tol * module_scale)
    }
}

/// Largest gradient norm over a set of checks.
pub fn module_scale(checks: &[TensorCheck]) -> f64 {
    checks.iter().map(|c| c.gradient_norm).fold(0.0, f64::max)
}

/// Tape gradients of a scalar built from a whole module, one entry per
/// learnable tensor in visit order, widened to `f64`.
///
/// `f` must bind the module's tensors as trainable leaves in visit order,
/// appending them to the provided list.
pub fn module_gradients<T: Scalar, P, F>(module: &P, f: &F) -> Result<Vec<(String, Vec<f64>)>>
where
    P: Parameters<T>,
    F: Fn(&P, &mut Tape<T>, &mut Vec<Var>) -> Result<Var>,
{
    let mut names = Vec::new();
    let mut sizes = Vec::new();
    module.visit("", &mut |n, t| {
        names.push(n);
        sizes.push(t.numel());
    });
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let out = f(module, &mut tape, &mut order)?;
    if order.len() != names.len() {
        return Err(contract_err!("bound {} tensors, module has {}", order.len(), names.len()));
    }
    let mut grads = tape.backward(out)?;
    Ok(names
        .into_iter()
        .zip(order.iter().zip(sizes))
        .map(|(n, (&v, size))| {
            let g = grads.take(v).map_or_else(|| alloc::vec![0.0; size], |g| g.data().iter().map(|x| x.as_f64()).collect());
            (n, g)
        })
        .collect())
}

/// Compares given gradients with central differences of `f` on `module`.
/// `module` may be a higher-precision copy of the module the gradients
/// came from.
pub fn compare_module_gradients<T: Scalar, P, F, R>(
    analytic: &[(String, Vec<f64>)],
    module: &P,
    h: f64,
    probe: Probe,
    rng: &mut R,
    f: F,
) -> Result<Vec<TensorCheck>>
where
    P: Parameters<T> + Clone,
    F: Fn(&P, &mut Tape<T>, &mut Vec<Var>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut originals: Vec<Tensor<T>> = Vec::new();
    module.visit("", &mut |_, t| originals.push(t.clone()));
    if originals.len() != analytic.len() || originals.iter().zip(analytic).any(|(t, (_, g))| t.numel() != g.len()) {
        return Err(contract_err!("gradients do not match the module layout"));
    }
    let mut work = module.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (k, orig) in originals.iter().enumerate() {
        let (name, g) = &analytic[k];
        let mut scale = 0.0f64;
        let probe = match probe {
            Probe::Auto { max_elementwise, .. } if orig.numel() <= max_elementwise => Probe::Elementwise,
            Probe::Auto { directions, .. } => Probe::Directional(directions),
            p => p,
        };
        let err = match probe {
            Probe::Elementwise => {
                let mut numeric = Vec::with_capacity(orig.numel());
                for e in 0..orig.numel() {
                    let x = orig.data()[e].as_f64();
                    let (xp, xm) = (T::of(x + h), T::of(x - h));
                    with_tensor(&mut work, k, |t| t.data_mut()[e] = xp);
                    let plus = evaluate_module(&work, &f)?;
                    with_tensor(&mut work, k, |t| t.data_mut()[e] = xm);
                    let minus = evaluate_module(&work, &f)?;
                    with_tensor(&mut work, k, |t| t.data_mut()[e] = orig.data()[e]);
                    numeric.push((plus - minus) / (xp.as_f64() - xm.as_f64()));
                }
                scale = numeric.iter().fold(0.0, |m, v| m.max(v.abs()));
                relative_error_norm(g, &numeric)
            }
            Probe::Directional(n) => {
                let mut worst = 0.0f64;
                let g_norm = libm::sqrt(g.iter().map(|v| v * v).sum::<f64>());
                for j in 0..n.max(1) {
                    let mut dir: Vec<f64> = (0..orig.numel()).map(|_| standard_normal(rng)).collect();
                    if g_norm > 0.0 {
                        let r = libm::sqrt(dir.iter().map(|d| d * d).sum::<f64>()).max(f64::MIN_POSITIVE);
                        let w = if j == 0 { 0.0 } else { 1.0 / r };
                        dir.iter_mut().zip(g).for_each(|(d, gv)| *d = gv / g_norm + w * *d);
                    }
                    let norm = libm::sqrt(dir.iter().map(|d| d * d).sum::<f64>()).max(f64::MIN_POSITIVE);
                    let moved = |s: f64| -> Tensor<T> {
                        let data = orig.data().iter().zip(&dir).map(|(x, d)| T::of(x.as_f64() + s * h * d / norm)).collect();
                        Tensor::new(orig.shape(), data).expect("same shape")
                    };
                    let (tp, tm) = (moved(1.0), moved(-1.0));
                    let step = libm::sqrt(tp.data().iter().zip(tm.data()).map(|(p, m)| { let d = p.as_f64() - m.as_f64(); d * d }).sum::<f64>());
                    let predicted: f64 = g
                        .iter()
                        .zip(tp.data().iter().zip(tm.data()))
                        .map(|(gv, (p, m))| gv * (p.as_f64() - m.as_f64()))
                        .sum();
                    with_tensor(&mut work, k, |t| *t = tp);
                    let plus = evaluate_module(&work, &f)?;
                    with_tensor(&mut work, k, |t| *t = tm);
                    let minus = evaluate_module(&work, &f)?;
                    with_tensor(&mut work, k, |t| *t = orig.clone());
                    scale = scale.max((plus - minus).abs() / step.max(f64::MIN_POSITIVE));
                    worst = worst.max(relative_error(predicted, plus - minus));
                }
                worst
            }
            Probe::Auto { .. } => unreachable!("resolved above"),
        };
        let gradient_norm = libm::sqrt(g.iter().map(|v| v * v).sum());
        out.push(TensorCheck { name: name.clone(), relative_error: err, gradient_norm, numeric_scale: scale });
    }
    Ok(out)
}

/// Checks the gradient of a scalar built from a whole module against
/// central differences of the same module.
pub fn check_module<T: Scalar, P, F, R>(module: &P, h: f64, probe: Probe, rng: &mut R, f: F) -> Result<Vec<TensorCheck>>
where
    P: Parameters<T> + Clone,
    F: Fn(&P, &mut Tape<T>, &mut Vec<Var>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = module_gradients(module, &f)?;
    compare_module_gradients(&analytic, module, h, probe, rng, f)
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded uniform entries in `[lo, hi)`.
pub fn uniform_tensor<T: Scalar>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut r = seeded(seed);
    let n = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(r.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Entries of magnitude in `[0.2, 1)` with random signs, so checks stay
/// clear of ReLU kinks.
pub fn away_from_zero<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = seeded(seed);
    let n = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.0);
            T::of(if r.random::<bool>() { m } else { -m })
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `sum(x * w)` for a fixed random `w`, so no gradient cancels by symmetry.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, x: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform_tensor(tape.shape(x), -1.0, 1.0, seed ^ 0xabc));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// A named scalar function of some inputs exercising one operation.
pub type OpCase<T> = (&'static str, Vec<Tensor<T>>, Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>);

/// One scalar function per differentiable operation.
pub fn op_cases<T: Scalar>() -> Vec<OpCase<T>> {
    let u = |s: &[usize], seed| uniform_tensor::<T>(s, -1.0, 1.0, seed);
    vec![
        ("matmul", vec![u(&[5, 4], 1), u(&[4, 3], 2)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })),
        ("add", vec![u(&[3, 4], 3), u(&[3, 4], 4)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 2)
        })),
        ("sub", vec![u(&[3, 4], 5), u(&[3, 4], 6)], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 3)
        })),
        ("mul", vec![u(&[3, 4], 7), u(&[3, 4], 8)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })),
        ("add_row_bias", vec![u(&[4, 3], 9), u(&[3], 10)], Box::new(|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            weighted_sum(t, y, 5)
        })),
        ("scale", vec![u(&[2, 5], 11)], Box::new(|t, v| {
            let y = t.scale(v[0], T::of(-1.7));
            weighted_sum(t, y, 6)
        })),
        ("relu", vec![away_from_zero(&[4, 4], 12)], Box::new(|t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 7)
        })),
        ("softmax_rows", vec![u(&[3, 5], 13)], Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 8)
        })),
        ("logsumexp_rows", vec![u(&[4, 6], 14)], Box::new(|t, v| {
            let y = t.logsumexp_rows(v[0])?;
            weighted_sum(t, y, 9)
        })),
        ("transpose", vec![u(&[3, 5], 15)], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 10)
        })),
        ("reshape", vec![u(&[3, 4], 16)], Box::new(|t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, y, 11)
        })),
        ("concat_cols", vec![u(&[3, 2], 17), u(&[3, 4], 18)], Box::new(|t, v| {
            let y = t.concat_cols(v[0], v[1])?;
            weighted_sum(t, y, 12)
        })),
        ("concat_rows", vec![u(&[2, 3], 19), u(&[4, 3], 20)], Box::new(|t, v| {
            let y = t.concat_rows(v[0], v[1])?;
            weighted_sum(t, y, 13)
        })),
        ("slice_rows", vec![u(&[5, 3], 21)], Box::new(|t, v| {
            let y = t.slice_rows(v[0], 1, 4)?;
            weighted_sum(t, y, 14)
        })),
        ("gather", vec![u(&[3, 3], 22)], Box::new(|t, v| {
            let y = t.gather(v[0], vec![0, 4, 4, 8, 2, 1], &[2, 3])?;
            weighted_sum(t, y, 15)
        })),
        ("normalize_rows", vec![u(&[4, 5], 23)], Box::new(|t, v| {
            let y = t.normalize_rows(v[0])?;
            weighted_sum(t, y, 16)
        })),
        ("mean", vec![u(&[3, 3], 24)], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        })),
        ("conv2d_s1_p1", vec![u(&[2, 2, 5, 5], 25), u(&[3, 2, 3, 3], 26), u(&[3], 27)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            weighted_sum(t, y, 17)
        })),
        ("conv2d_s2_p1", vec![u(&[2, 1, 6, 6], 28), u(&[2, 1, 3, 3], 29), u(&[2], 30)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            weighted_sum(t, y, 18)
        })),
        ("conv2d_full_kernel", vec![u(&[3, 2, 4, 4], 31), u(&[2, 2, 4, 4], 32), u(&[2], 33)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            weighted_sum(t, y, 19)
        })),
        ("batch_norm_train", vec![u(&[4, 3, 2, 2], 34), u(&[3], 35), u(&[3], 36)], Box::new(|t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], T::of(1e-5))?;
            weighted_sum(t, y, 20)
        })),
        ("batch_norm_train_2d", vec![u(&[5, 4], 37), u(&[4], 38), u(&[4], 39)], Box::new(|t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], T::of(1e-5))?;
            weighted_sum(t, y, 21)
        })),
        ("batch_norm_eval", vec![u(&[3, 2, 2, 2], 40), u(&[2], 41), u(&[2], 42)], Box::new(|t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[T::of(0.1), T::of(-0.2)], &[T::of(0.5), T::of(1.5)], T::of(1e-5))?;
            weighted_sum(t, y, 22)
        })),
        ("shared_input", vec![u(&[3, 3], 43)], Box::new(|t, v| {
            let a = t.matmul(v[0], v[0])?;
            let b = t.mul(a, v[0])?;
            weighted_sum(t, b, 23)
        })),
    ]
}
