//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes; it never touches the
//! backward closures it is checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamKind, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{DType, Tensor};

/// Tolerance for primitive ops.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composite modules.
pub const COMPOSITE_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckConfig {
    /// Coordinates checked per tensor; `None` checks all of them.
    pub samples_per_tensor: Option<usize>,
    pub seed: u64,
    /// Build tapes in training mode.
    pub training: bool,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero on both sides do not divide by zero.
    pub denom_floor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            samples_per_tensor: None,
            seed: 0,
            training: true,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding bound of the difference quotient, discounted from the error.
    pub noise: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst_entry(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Worst relative error per checked tensor name, in first-seen order.
    pub fn worst_by_name(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, _)| *n == e.name) {
                Some((_, w)) => *w = w.max(e.rel_err),
                None => out.push((e.name.clone(), e.rel_err)),
            }
        }
        out
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err < tol)
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.entries.extend(other.entries);
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Rounding bound of `(fp - fm) / (2h)`: a few ulps of each evaluation.
pub fn quotient_noise(fp: f64, fm: f64, h: f64) -> f64 {
    4.0 * f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * h)
}

fn entry(name: String, index: usize, analytic: f64, fp: f64, fm: f64, h: f64, floor: f64) -> CheckEntry {
    let numeric = (fp - fm) / (2.0 * h);
    let noise = quotient_noise(fp, fm, h);
    let err = ((analytic - numeric).abs() - noise).max(0.0);
    CheckEntry {
        name,
        index,
        analytic,
        numeric,
        noise,
        rel_err: err / analytic.abs().max(numeric.abs()).max(floor),
    }
}

fn pick(n: usize, k: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match k {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

fn perturbed(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] += delta;
    Tensor::new(t.shape(), data, t.dtype()).expect("same shape")
}

/// Central difference at step `h`, shrunk tenfold up to twice while the
/// entry exceeds [`PRIMITIVE_TOL`]. A ReLU or max kink inside the stencil
/// spoils one step size; a wrong analytic gradient disagrees at all of them.
fn measured(
    name: &str,
    index: usize,
    analytic: f64,
    h: f64,
    floor: f64,
    mut eval_pm: impl FnMut(f64) -> Result<(f64, f64)>,
) -> Result<CheckEntry> {
    let mut best: Option<CheckEntry> = None;
    for shrink in [1.0, 0.1, 0.01] {
        let (fp, fm) = eval_pm(h * shrink)?;
        let e = entry(name.to_string(), index, analytic, fp, fm, h * shrink, floor);
        if best.as_ref().is_none_or(|b| e.rel_err < b.rel_err) {
            best = Some(e);
        }
        if best.as_ref().is_some_and(|b| b.rel_err <= PRIMITIVE_TOL) {
            break;
        }
    }
    Ok(best.expect("at least one step"))
}

/// Compares the analytic gradient of `build`'s scalar output with central
/// differences, step `h = 1e-5 * max(1, |x|)`, for every learnable parameter
/// in `store` and every tensor in `inputs`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    build: F,
    cfg: &CheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(cfg.training);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, store, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new(cfg.training);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &analytic_store, &vars)?;
    let grads = tape.backward(loss, &mut analytic_store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport::default();
    let step = |x: f64| 1e-5 * x.abs().max(1.0);

    for (pos, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[pos]).unwrap_or(&zeros);
        for i in pick(input.numel(), cfg.samples_per_tensor, &mut rng) {
            let name = format!("input{pos}");
            let e = measured(&name, i, analytic[i], step(input.data()[i]), cfg.denom_floor, |h| {
                let mut plus = inputs.to_vec();
                plus[pos] = perturbed(input, i, h);
                let mut minus = inputs.to_vec();
                minus[pos] = perturbed(input, i, -h);
                Ok((eval(store, &plus)?, eval(store, &minus)?))
            })?;
            report.entries.push(e);
        }
    }

    for (id, p) in store.iter() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let analytic = analytic_store.grad(id).data().to_vec();
        for i in pick(p.value.numel(), cfg.samples_per_tensor, &mut rng) {
            let mut s = store.clone();
            let e = measured(&p.name, i, analytic[i], step(p.value.data()[i]), cfg.denom_floor, |h| {
                s.set_value(id, perturbed(&p.value, i, h))?;
                let fp = eval(&s, inputs)?;
                s.set_value(id, perturbed(&p.value, i, -h))?;
                Ok((fp, eval(&s, inputs)?))
            })?;
            report.entries.push(e);
        }
    }
    Ok(report)
}

/// Fixed random weights for turning a tensor output into a scalar loss.
pub fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    Tensor::from_fn(shape, DType::F64, |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

/// `sum(y * R)` for a fixed random `R` of the same shape.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(projection(tape.value(y).shape(), seed));
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, DType::F64, |_| rng.gen_range(lo..hi)).expect("valid shape")
}
