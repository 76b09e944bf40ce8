use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Source taps for one output coordinate of a 2x bilinear resize with
/// half-pixel centers (align_corners = false).
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

impl Tape {
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        let (ty, tx) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![0.0; b * c * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o)| {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let top = plane[t.i0 * w + s.i0] * (1.0 - s.frac) + plane[t.i0 * w + s.i1] * s.frac;
                    let bot = plane[t.i1 * w + s.i0] * (1.0 - s.frac) + plane[t.i1 * w + s.i1] * s.frac;
                    o[oy * ow + ox] = top * (1.0 - t.frac) + bot * t.frac;
                }
            }
        });
        let value = Tensor::from_parts(vec![b, c, oh, ow], out, xv.dtype());
        Ok(self.record(value, &[x], move |ctx| {
            let mut gx = vec![0.0; b * c * h * w];
            gx.par_chunks_mut(h * w).enumerate().for_each(|(p, gp)| {
                let g = &ctx.grad[p * oh * ow..(p + 1) * oh * ow];
                for (oy, t) in ty.iter().enumerate() {
                    for (ox, s) in tx.iter().enumerate() {
                        let v = g[oy * ow + ox];
                        gp[t.i0 * w + s.i0] += v * (1.0 - t.frac) * (1.0 - s.frac);
                        gp[t.i0 * w + s.i1] += v * (1.0 - t.frac) * s.frac;
                        gp[t.i1 * w + s.i0] += v * t.frac * (1.0 - s.frac);
                        gp[t.i1 * w + s.i1] += v * t.frac * s.frac;
                    }
                }
            });
            vec![Some(gx)]
        }))
    }
}
