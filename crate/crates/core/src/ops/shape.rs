use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.get(x)?.reshape(shape)?;
        Ok(self.record(out, &[x], |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Concatenation along the channel axis of 4D tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat of an empty list"));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            dims.push(self.get(x)?.dims4()?);
        }
        let [b, _, h, w] = dims[0];
        if dims.iter().any(|d| d[0] != b || d[2] != h || d[3] != w) {
            return Err(shape_err(format!("concat needs matching B, H, W: {dims:?}")));
        }
        let chans: Vec<usize> = dims.iter().map(|d| d[1]).collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let dtype = self.dtype_of(xs);
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&chans) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::from_parts(vec![b, total, h, w], data, dtype);
        Ok(self.record(out, xs, move |ctx| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|&c| Vec::with_capacity(b * c * hw)).collect();
            let mut off = 0;
            for _ in 0..b {
                for (g, &c) in grads.iter_mut().zip(&chans) {
                    g.extend_from_slice(&ctx.grad[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Channels `start .. start + len` of a 4D tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!(
                "channel slice {start}..{} out of range for C={c}",
                start + len
            )));
        }
        let hw = h * w;
        let src = xv.data();
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let out = Tensor::from_parts(vec![b, len, h, w], data, xv.dtype());
        Ok(self.record(out, &[x], move |ctx| {
            let mut gx = vec![0.0; b * c * hw];
            for bi in 0..b {
                let base = (bi * c + start) * hw;
                gx[base..base + len * hw]
                    .copy_from_slice(&ctx.grad[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(gx)]
        }))
    }

    /// Four contiguous channel chunks of equal size.
    pub fn channel_split4(&mut self, x: Var) -> Result<[Var; 4]> {
        let [_, c, _, _] = self.get(x)?.dims4()?;
        if c % 4 != 0 {
            return Err(Error::IndivisibleChannels(c));
        }
        let q = c / 4;
        Ok([
            self.slice_channels(x, 0, q)?,
            self.slice_channels(x, q, q)?,
            self.slice_channels(x, 2 * q, q)?,
            self.slice_channels(x, 3 * q, q)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn split4_then_concat_is_identity() {
        let mut tape = Tape::eval();
        let xt = Tensor::from_fn(&[2, 8, 3, 3], DType::F64, |i| (i as f64).cos()).unwrap();
        let x = tape.constant(xt.clone());
        let parts = tape.channel_split4(x).unwrap();
        for p in &parts {
            assert_eq!(tape.value(*p).shape(), &[2, 2, 3, 3]);
        }
        let back = tape.concat_channels(&parts).unwrap();
        assert_eq!(tape.value(back), &xt);
    }

    #[test]
    fn split4_rejects_indivisible() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::ones(&[1, 6, 2, 2], DType::F64).unwrap());
        assert!(matches!(
            tape.channel_split4(x),
            Err(Error::IndivisibleChannels(6))
        ));
    }
}
