use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(tape: &Tape, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for v in [gamma, beta] {
        if tape.get(v)?.shape() != [c] {
            return Err(shape_err(format!("affine parameters must have shape [{c}]")));
        }
    }
    Ok(())
}

impl Tape {
    /// Normalizes over the channel axis at each (b, y, x) position, then
    /// applies a per-channel affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        check_affine(self, gamma, beta, c)?;
        let hw = h * w;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = xv.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; b * hw];
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for p in 0..hw {
                let idx = |ch: usize| (bi * c + ch) * hw + p;
                let mean = (0..c).map(|ch| src[idx(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (src[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bi * hw + p] = is;
                for ch in 0..c {
                    let n = (src[idx(ch)] - mean) * is;
                    xhat[idx(ch)] = n;
                    out[idx(ch)] = gm[ch] * n + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out, self.dtype_of(&[x, gamma, beta]));
        Ok(self.record(value, &[x, gamma, beta], move |ctx| {
            let gm = ctx.inputs[1].data();
            let g = ctx.grad;
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for bi in 0..b {
                for p in 0..hw {
                    let idx = |ch: usize| (bi * c + ch) * hw + p;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ch in 0..c {
                        let i = idx(ch);
                        gg[ch] += g[i] * xhat[i];
                        gb[ch] += g[i];
                        let gh = g[i] * gm[ch];
                        m1 += gh;
                        m2 += gh * xhat[i];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let is = inv_std[bi * hw + p];
                    for ch in 0..c {
                        let i = idx(ch);
                        gx[i] = is * (g[i] * gm[ch] - m1 - xhat[i] * m2);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }))
    }

    /// Batch norm using statistics of the current batch over (B, H, W).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        check_affine(self, gamma, beta, c)?;
        let hw = h * w;
        let n = b * hw;
        if n < 2 {
            return Err(Error::BatchTooSmall);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += src[(bi * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / n as f64;
            let mut v = 0.0;
            for bi in 0..b {
                v += src[(bi * c + ch) * hw..][..hw].iter().map(|x| (x - m).powi(2)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, (&v, (xh, o))) in src.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gm[ch] * *xh + bt[ch];
        }
        let stats = BatchStats {
            mean,
            var_unbiased: var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect(),
        };
        let value = Tensor::from_parts(xv.shape().to_vec(), out, self.dtype_of(&[x, gamma, beta]));
        let var_out = self.record(value, &[x, gamma, beta], move |ctx| {
            let gm = ctx.inputs[1].data();
            let g = ctx.grad;
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for (i, &gi) in g.iter().enumerate() {
                let ch = (i / hw) % c;
                gg[ch] += gi * xhat[i];
                gb[ch] += gi;
            }
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let ch = (i / hw) % c;
                    let nf = n as f64;
                    gm[ch] * inv_std[ch] * (gi - gb[ch] / nf - xhat[i] * gg[ch] / nf)
                })
                .collect();
            vec![Some(gx), Some(gg), Some(gb)]
        });
        Ok((var_out, stats))
    }

    /// Batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.get(x)?;
        let [_, c, h, w] = xv.dims4()?;
        check_affine(self, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("running statistics do not match channel count"));
        }
        let hw = h * w;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                gm[ch] * (v - mean[ch]) * inv_std[ch] + bt[ch]
            })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), out, self.dtype_of(&[x, gamma, beta]));
        Ok(self.record(value, &[x, gamma, beta], move |ctx| {
            let (xs, gm) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            let mut gx = vec![0.0; xs.len()];
            for (i, &gi) in ctx.grad.iter().enumerate() {
                let ch = (i / hw) % c;
                gg[ch] += gi * (xs[i] - mean[ch]) * inv_std[ch];
                gb[ch] += gi;
                gx[i] = gi * gm[ch] * inv_std[ch];
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }))
    }
}
