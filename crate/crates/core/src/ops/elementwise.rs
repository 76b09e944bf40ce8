use crate::autograd::{InputGrads, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{pad4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Broadcast shape under the trailing-dimension rule.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (a4, b4) = (pad4(a), pad4(b));
    let mut out = Vec::with_capacity(rank);
    for i in (4 - rank)..4 {
        let (x, y) = (a4[i], b4[i]);
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => {
                return Err(shape_err(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        });
    }
    Ok(out)
}

/// Contiguous strides of `shape` viewed inside `out`, zero on broadcast dims.
fn bcast_strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast index space.
fn for_each_bcast(
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums a gradient over broadcast dims so it matches `target` exactly.
pub(crate) fn reduce_to_shape(grad: &[f64], out: [usize; 4], target: [usize; 4]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let st = bcast_strides(target, out);
    let mut r = vec![0.0; target.iter().product()];
    for_each_bcast(out, st, st, |o, t, _| r[t] += grad[o]);
    r
}

fn apply(op: BinaryOp, x: f64, y: f64) -> f64 {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

/// Forward of a broadcast binary op on plain tensors.
pub fn binary_values(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let out4 = pad4(&shape);
    let dtype = a.dtype().promote(b.dtype());
    let (ad, bd) = (a.data(), b.data());
    let data = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| apply(op, x, y)).collect()
    } else {
        let sa = bcast_strides(a.shape4(), out4);
        let sb = bcast_strides(b.shape4(), out4);
        let mut data = vec![0.0; out4.iter().product()];
        for_each_bcast(out4, sa, sb, |o, i, j| data[o] = apply(op, ad[i], bd[j]));
        data
    };
    Ok(Tensor::from_parts(shape, data, dtype))
}

impl Tape {
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = binary_values(self.get(a)?, self.get(b)?, op)?;
        Ok(self.record(out, &[a, b], move |ctx| binary_backward(ctx.grad, &ctx.inputs, ctx.out, op, &ctx.needs)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    /// `a * s + t` with scalar constants.
    pub fn affine_scalar(&mut self, a: Var, s: f64, t: f64) -> Result<Var> {
        let out = self.get(a)?.map(|v| v * s + t);
        Ok(self.record(out, &[a], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine_scalar(a, s, 0.0)
    }

    /// Sum of several same-shape vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| shape_err("add_n of an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }
}

fn binary_backward(
    grad: &[f64],
    inputs: &[&Tensor],
    out: &Tensor,
    op: BinaryOp,
    needs: &[bool],
) -> InputGrads {
    let (a, b) = (inputs[0], inputs[1]);
    let out4 = out.shape4();
    let (a4, b4) = (a.shape4(), b.shape4());
    let n = grad.len();
    // Gradient w.r.t. each operand in the broadcast output space.
    let (ga_full, gb_full): (Option<Vec<f64>>, Option<Vec<f64>>) = match op {
        BinaryOp::Add => (
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.to_vec()),
        ),
        BinaryOp::Sub => (
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.iter().map(|g| -g).collect()),
        ),
        BinaryOp::Mul | BinaryOp::Div => {
            let sa = bcast_strides(a4, out4);
            let sb = bcast_strides(b4, out4);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = needs[0].then(|| vec![0.0; n]);
            let mut gb = needs[1].then(|| vec![0.0; n]);
            for_each_bcast(out4, sa, sb, |o, i, j| {
                let (x, y, g) = (ad[i], bd[j], grad[o]);
                match op {
                    BinaryOp::Mul => {
                        if let Some(ga) = ga.as_mut() {
                            ga[o] = g * y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[o] = g * x;
                        }
                    }
                    _ => {
                        if let Some(ga) = ga.as_mut() {
                            ga[o] = g / y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[o] = -g * x / (y * y);
                        }
                    }
                }
            });
            (ga, gb)
        }
    };
    vec![
        ga_full.map(|g| reduce_to_shape(&g, out4, a4)),
        gb_full.map(|g| reduce_to_shape(&g, out4, b4)),
    ]
}
