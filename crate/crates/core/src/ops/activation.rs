use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// Exact form `0.5 x (1 + erf(x / sqrt 2))`.
    Gelu,
    Relu,
    /// `ln(1 + e^x)`.
    Softplus,
    Identity,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }
}

impl Tape {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let out = self.get(x)?.map(|v| kind.apply(v));
        Ok(self.record(out, &[x], move |ctx| {
            let (xs, ys) = (ctx.inputs[0].data(), ctx.out.data());
            let g = ctx
                .grad
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                .collect();
            vec![Some(g)]
        }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Softmax along `axis` of a 4D tensor, stabilized by subtracting the max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.get(x)?;
        let dims = xv.dims4()?;
        if axis >= 4 {
            return Err(shape_err(format!("softmax axis {axis} out of range")));
        }
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[idx(k)] /= s;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out, xv.dtype());
        Ok(self.record(value, &[x], move |ctx| {
            let y = ctx.out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| ctx.grad[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = y[idx(k)] * (ctx.grad[idx(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    /// erf by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let t = term / (2.0 * n + 1.0);
            sum += t;
            if t.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn scalar_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0) - oracle).abs() < 1e-14);
        assert!((gelu(1.0) - 0.841345).abs() < 5e-7);
    }

    #[test]
    fn gelu_matches_series_on_grid() {
        for i in -30..=30 {
            let x = i as f64 * 0.1;
            let oracle = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu(x) - oracle).abs() < 1e-13, "x = {x}");
        }
    }

    fn softmax_of(data: &[f64]) -> Vec<f64> {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::new(&[1, data.len(), 1, 1], data.to_vec(), DType::F64).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax_of(&[2.5, 2.5, 2.5]);
        assert!(eq.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let two = softmax_of(&[0.0, 2f64.ln()]);
        assert!((two[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((two[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let a = softmax_of(&[0.3, -1.2, 4.0, 0.0]);
        let b = softmax_of(&[1000.3, 998.8, 1004.0, 1000.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_inner_axis_layout() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], DType::F64, |i| (i as f64 * 0.37).sin()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let yv = tape.value(y);
        for b in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| yv.data()[(b * 3 + c) * 4 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
