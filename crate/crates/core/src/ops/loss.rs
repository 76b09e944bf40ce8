use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::activation::sigmoid;
use crate::tensor::Tensor;

impl Tape {
    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(z, 0) - z t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (z, t) = (self.get(logits)?, self.get(target)?);
        if z.shape() != t.shape() {
            return Err(shape_err(format!(
                "logits {:?} vs target {:?}",
                z.shape(),
                t.shape()
            )));
        }
        let n = z.numel() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::from_parts(vec![1], vec![total / n], self.dtype_of(&[logits, target]));
        Ok(self.record(value, &[logits, target], move |ctx| {
            let g = ctx.grad[0] / n;
            let (z, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let gz = z.iter().zip(t).map(|(&z, &t)| g * (sigmoid(z) - t)).collect();
            let gt = ctx.needs[1].then(|| z.iter().map(|&z| -g * z).collect());
            vec![Some(gz), gt]
        }))
    }
}

impl Tape {
    /// Mean over pixels of the categorical cross-entropy between
    /// `softmax(logits, axis 1)` and a one-hot target.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (z, t) = (self.get(logits)?, self.get(target)?);
        if z.shape() != t.shape() {
            return Err(shape_err(format!(
                "logits {:?} vs target {:?}",
                z.shape(),
                t.shape()
            )));
        }
        let [b, k, h, w] = z.dims4()?;
        let hw = h * w;
        let pixels = (b * hw) as f64;
        let (zd, td) = (z.data(), t.data());
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let at = |c: usize| (bi * k + c) * hw + p;
                let m = (0..k).map(|c| zd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (zd[at(c)] - m).exp()).sum::<f64>().ln();
                total += (0..k).map(|c| td[at(c)] * (lse - zd[at(c)])).sum::<f64>();
            }
        }
        let value = Tensor::from_parts(vec![1], vec![total / pixels], self.dtype_of(&[logits, target]));
        Ok(self.record(value, &[logits, target], move |ctx| {
            let g = ctx.grad[0] / pixels;
            let (z, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gz = vec![0.0; z.len()];
            let mut gt = ctx.needs[1].then(|| vec![0.0; z.len()]);
            for bi in 0..b {
                for p in 0..hw {
                    let at = |c: usize| (bi * k + c) * hw + p;
                    let m = (0..k).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..k).map(|c| (z[at(c)] - m).exp()).sum();
                    let lse = m + denom.ln();
                    let tsum: f64 = (0..k).map(|c| t[at(c)]).sum();
                    for c in 0..k {
                        let sm = (z[at(c)] - m).exp() / denom;
                        gz[at(c)] = g * (tsum * sm - t[at(c)]);
                        if let Some(gt) = &mut gt {
                            gt[at(c)] = g * (lse - z[at(c)]);
                        }
                    }
                }
            }
            vec![Some(gz), gt]
        }))
    }
}
