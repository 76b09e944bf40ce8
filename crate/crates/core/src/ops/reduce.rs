use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

/// Axes of a 4D (B, C, H, W) tensor to reduce over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axes {
    /// H and W.
    Spatial,
    /// C.
    Channel,
    /// Every axis; valid for any rank.
    All,
}

/// Neumaier summation; keeps long sums accurate enough that finite
/// differences of a summed loss are not dominated by rounding.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Groups of flat indices reduced together, plus the kept output shape.
struct Plan {
    out_shape: Vec<usize>,
    groups: usize,
    group_len: usize,
    /// Flat index of element `k` of group `g`.
    index: Box<dyn Fn(usize, usize) -> usize>,
}

fn plan(shape: &[usize], axes: Axes) -> Result<Plan> {
    match axes {
        Axes::All => {
            let n: usize = shape.iter().product();
            Ok(Plan {
                out_shape: vec![1; shape.len()],
                groups: 1,
                group_len: n,
                index: Box::new(|_, k| k),
            })
        }
        Axes::Spatial | Axes::Channel => {
            if shape.len() != 4 {
                return Err(shape_err(format!(
                    "spatial/channel reduction needs a 4D tensor, got {shape:?}"
                )));
            }
            let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
            let hw = h * w;
            if axes == Axes::Spatial {
                Ok(Plan {
                    out_shape: vec![b, c, 1, 1],
                    groups: b * c,
                    group_len: hw,
                    index: Box::new(move |g, k| g * hw + k),
                })
            } else {
                Ok(Plan {
                    out_shape: vec![b, 1, h, w],
                    groups: b * hw,
                    group_len: c,
                    index: Box::new(move |g, k| (g / hw) * c * hw + k * hw + g % hw),
                })
            }
        }
    }
}

impl Tape {
    /// Reduction keeping reduced dims as size 1. Max routes the gradient to
    /// the first (lowest flat index) maximal entry.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: Axes) -> Result<Var> {
        let xv = self.get(x)?;
        if xv.shape().iter().any(|&d| d == 0) {
            return Err(Error::EmptyAxis);
        }
        let p = plan(xv.shape(), axes)?;
        let data = xv.data();
        let mut out = Vec::with_capacity(p.groups);
        let mut argmax = Vec::new();
        for g in 0..p.groups {
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut s = compensated_sum((0..p.group_len).map(|k| data[(p.index)(g, k)]));
                    if kind == ReduceKind::Mean {
                        s /= p.group_len as f64;
                    }
                    out.push(s);
                }
                ReduceKind::Max => {
                    let mut best = (p.index)(g, 0);
                    for k in 1..p.group_len {
                        let i = (p.index)(g, k);
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(data[best]);
                }
            }
        }
        let n = xv.numel();
        let value = Tensor::from_parts(p.out_shape.clone(), out, xv.dtype());
        let (groups, group_len, index) = (p.groups, p.group_len, p.index);
        Ok(self.record(value, &[x], move |ctx| {
            let mut gx = vec![0.0; n];
            match kind {
                ReduceKind::Max => {
                    for (g, &i) in argmax.iter().enumerate() {
                        gx[i] += ctx.grad[g];
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let scale = if kind == ReduceKind::Mean {
                        1.0 / group_len as f64
                    } else {
                        1.0
                    };
                    for g in 0..groups {
                        let v = ctx.grad[g] * scale;
                        for k in 0..group_len {
                            gx[index(g, k)] += v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, Axes::All)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, Axes::All)
    }

    /// Per-(b, c) standard deviation over H and W with the unbiased estimator,
    /// `sqrt(var + eps)`. Output shape (B, C, 1, 1).
    pub fn spatial_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        let hw = h * w;
        if hw < 2 {
            return Err(Error::DegenerateSpatial(hw));
        }
        let data = xv.data();
        let mut means = Vec::with_capacity(b * c);
        let mut out = Vec::with_capacity(b * c);
        for g in 0..b * c {
            let s = &data[g * hw..(g + 1) * hw];
            let m = s.iter().sum::<f64>() / hw as f64;
            let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (hw - 1) as f64;
            means.push(m);
            out.push((var + eps).sqrt());
        }
        let value = Tensor::from_parts(vec![b, c, 1, 1], out.clone(), xv.dtype());
        Ok(self.record(value, &[x], move |ctx| {
            let data = ctx.inputs[0].data();
            let mut gx = vec![0.0; data.len()];
            for g in 0..b * c {
                // d std / d x_i = (x_i - mean) / ((n - 1) * std)
                let k = ctx.grad[g] / ((hw - 1) as f64 * out[g]);
                for i in g * hw..(g + 1) * hw {
                    gx[i] = k * (data[i] - means[g]);
                }
            }
            vec![Some(gx)]
        }))
    }
}
