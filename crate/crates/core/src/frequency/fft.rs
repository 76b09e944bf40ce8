//! Real 2D FFT over the last two axes and learnable spectral modulation.
//!
//! `rfft2` keeps the non-negative half of the last axis, `W/2 + 1` bins.
//! `irfft2` is defined for any half spectrum `Z` as
//!
//! ```text
//! y(p, q) = 1/(HW) * sum_{u, v <= W/2} alpha_v Re(Z(u, v) e^{j 2 pi (u p / H + v q / W)})
//! ```
//!
//! with `alpha_v = 1` on the self-conjugate columns (DC and, for even W,
//! Nyquist) and `2` elsewhere. On Hermitian spectra this is the ordinary
//! inverse; on arbitrary ones it is still an R-linear map, which is what the
//! modulation backward pass relies on.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::autograd::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{DType, Tensor};

/// Half spectrum of a batch of real planes, layout (B, C, H, W/2 + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub half_width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(batch: usize, channels: usize, height: usize, half_width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            half_width,
            data: vec![Complex64::new(0.0, 0.0); batch * channels * height * half_width],
        }
    }

    pub fn plane(&self, p: usize) -> &[Complex64] {
        let n = self.height * self.half_width;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Weight of column `v` when expanding a half spectrum of width `w`.
fn column_weight(v: usize, w: usize) -> f64 {
    if v == 0 || (w % 2 == 0 && v == w / 2) {
        1.0
    } else {
        2.0
    }
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

fn plans(h: usize, w: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        row_fwd: planner.plan_fft_forward(w),
        row_inv: planner.plan_fft_inverse(w),
        col_fwd: planner.plan_fft_forward(h),
        col_inv: planner.plan_fft_inverse(h),
    }
}

fn rfft2_plane(x: &[f64], h: usize, w: usize, p: &Plans, out: &mut [Complex64]) {
    let wh = half_width(w);
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *r = Complex64::new(v, 0.0);
        }
        p.row_fwd.process(&mut row);
        out[y * wh..(y + 1) * wh].copy_from_slice(&row[..wh]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wh {
        for (y, c) in col.iter_mut().enumerate() {
            *c = out[y * wh + v];
        }
        p.col_fwd.process(&mut col);
        for (y, c) in col.iter().enumerate() {
            out[y * wh + v] = *c;
        }
    }
}

fn irfft2_plane(z: &[Complex64], h: usize, w: usize, p: &Plans, out: &mut [f64]) {
    let wh = half_width(w);
    let mut cols = z.to_vec();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wh {
        for (y, c) in col.iter_mut().enumerate() {
            *c = cols[y * wh + v];
        }
        p.col_inv.process(&mut col);
        for (y, c) in col.iter().enumerate() {
            cols[y * wh + v] = *c;
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        let a = &cols[y * wh..(y + 1) * wh];
        row[..wh].copy_from_slice(a);
        for v in wh..w {
            row[v] = a[w - v].conj();
        }
        p.row_inv.process(&mut row);
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re * scale;
        }
    }
}

/// Forward real 2D DFT of every (b, c) plane of a 4D tensor.
pub fn rfft2(x: &Tensor) -> Result<Spectrum> {
    let [b, c, h, w] = x.dims4()?;
    let wh = half_width(w);
    let p = plans(h, w);
    let mut spec = Spectrum::zeros(b, c, h, wh);
    let src = x.data();
    spec.data
        .par_chunks_mut(h * wh)
        .enumerate()
        .for_each(|(i, out)| rfft2_plane(&src[i * h * w..(i + 1) * h * w], h, w, &p, out));
    Ok(spec)
}

/// Inverse of [`rfft2`] producing planes of size `out_hw`.
pub fn irfft2(spec: &Spectrum, out_hw: (usize, usize), dtype: DType) -> Result<Tensor> {
    let (h, w) = out_hw;
    if h == 0 || w == 0 || spec.height != h || spec.half_width != half_width(w) {
        return Err(shape_err(format!(
            "spectrum {}x{} cannot produce a {h}x{w} image",
            spec.height, spec.half_width
        )));
    }
    let p = plans(h, w);
    let planes = spec.batch * spec.channels;
    let mut out = vec![0.0; planes * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, o)| irfft2_plane(spec.plane(i), h, w, &p, o));
    Ok(Tensor::from_parts(vec![spec.batch, spec.channels, h, w], out, dtype))
}

/// Complex per-channel spectral weights, shape (C, H, W/2 + 1) each.
#[derive(Debug, Clone)]
pub struct FourierWeights {
    pub real: ParamId,
    pub imag: ParamId,
}

impl FourierWeights {
    /// Identity modulation: real = 1, imag = 0.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, h: usize, w: usize) -> Self {
        let shape = [c, h, half_width(w)];
        Self {
            real: store.add(format!("{name}.real"), &shape, Init::Constant(1.0), rng),
            imag: store.add(format!("{name}.imag"), &shape, Init::Constant(0.0), rng),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.real).numel() + store.value(self.imag).numel()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let wr = tape.param(store, self.real);
        let wi = tape.param(store, self.imag);
        tape.fourier_modulate(x, wr, wi)
    }
}

impl Tape {
    /// `irfft2(rfft2(x) * (wr + j wi))` with weights shared across the batch.
    pub fn fourier_modulate(&mut self, x: Var, wr: Var, wi: Var) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        let wh = half_width(w);
        for v in [wr, wi] {
            if self.get(v)?.shape() != [c, h, wh] {
                return Err(shape_err(format!(
                    "fourier weights {:?} do not match input {:?}",
                    self.value(v).shape(),
                    xv.shape()
                )));
            }
        }
        let spec_x = rfft2(xv)?;
        let weights: Vec<Complex64> = self
            .value(wr)
            .data()
            .iter()
            .zip(self.value(wi).data())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
        let per = c * h * wh;
        let mut z = spec_x.clone();
        for (k, zv) in z.data.iter_mut().enumerate() {
            *zv *= weights[k % per];
        }
        let dtype = self.dtype_of(&[x, wr, wi]);
        let value = irfft2(&z, (h, w), dtype)?;
        Ok(self.record(value, &[x, wr, wi], move |ctx| {
            let g = Tensor::from_parts(vec![b, c, h, w], ctx.grad.to_vec(), DType::F64);
            let gy = rfft2(&g).expect("4D gradient");
            let gx = ctx.needs[0].then(|| {
                let mut s = gy.clone();
                for (k, v) in s.data.iter_mut().enumerate() {
                    *v *= weights[k % per].conj();
                }
                irfft2(&s, (h, w), DType::F64).expect("consistent spectrum").into_vec()
            });
            let (gwr, gwi) = if ctx.needs[1] || ctx.needs[2] {
                let mut gr = vec![0.0; per];
                let mut gi = vec![0.0; per];
                let norm = 1.0 / (h * w) as f64;
                for (k, (gv, xv)) in gy.data.iter().zip(&spec_x.data).enumerate() {
                    let idx = k % per;
                    let col = idx % wh;
                    let gz = gv * (column_weight(col, w) * norm);
                    let prod = gz * xv.conj();
                    gr[idx] += prod.re;
                    gi[idx] += prod.im;
                }
                (Some(gr), Some(gi))
            } else {
                (None, None)
            };
            vec![gx, gwr, gwi]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    #[test]
    fn dc_concentration() {
        let x = Tensor::full(&[1, 1, 4, 6], 2.5, DType::F64).unwrap();
        let s = rfft2(&x).unwrap();
        assert_eq!(s.half_width, 4);
        assert!((s.data[0].re - 2.5 * 24.0).abs() < 1e-10);
        for z in &s.data[1..] {
            assert!(z.norm() < 1e-10);
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut d = vec![0.0; 64];
        d[9] = 1.0;
        let x = Tensor::new(&[1, 1, 8, 8], d, DType::F64).unwrap();
        let s = rfft2(&x).unwrap();
        for z in &s.data {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_only_spectrum_gives_constant() {
        let mut s = Spectrum::zeros(1, 1, 4, 3);
        s.data[0] = Complex64::new(3.0 * 16.0, 0.0);
        let y = irfft2(&s, (4, 4), DType::F64).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let zero = irfft2(&Spectrum::zeros(1, 1, 4, 3), (4, 4), DType::F64).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn irfft2_rejects_wrong_size() {
        let s = Spectrum::zeros(1, 1, 4, 3);
        assert!(irfft2(&s, (4, 6), DType::F64).is_err());
    }

    #[test]
    fn identity_and_zero_modulation() {
        let xt = random_tensor(&[2, 3, 8, 6], -1.0, 1.0, 2);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let one = tape.constant(Tensor::ones(&[3, 8, 4], DType::F64).unwrap());
        let zero = tape.constant(Tensor::zeros(&[3, 8, 4], DType::F64).unwrap());
        let y = tape.fourier_modulate(x, one, zero).unwrap();
        assert!(tape.value(y).max_abs_diff(&xt) < 1e-12);
        let z = tape.fourier_modulate(x, zero, zero).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }
}
