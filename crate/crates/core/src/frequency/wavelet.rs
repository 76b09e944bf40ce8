//! Sampled continuous wavelets with learnable scale and shift, and the
//! separable depthwise filter that applies them.

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::activation::{sigmoid, softplus};
use crate::ops::Axis1d;
use crate::tensor::Tensor;

/// Lower bound added to the softplus of the raw scale.
pub const SCALE_FLOOR: f64 = 0.1;
pub const DEFAULT_SUPPORT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveletKind {
    /// `-(1/sqrt a) u exp(-u^2/2)`, `u = (t - b) / a`.
    DoG,
    /// `2 / (sqrt(3a) pi^(1/4)) (1 - u^2) exp(-u^2/2)`.
    MexicanHat,
}

/// `2 / (sqrt 3 * pi^(1/4))`.
pub fn mexican_hat_amplitude() -> f64 {
    2.0 / (3f64.sqrt() * std::f64::consts::PI.powf(0.25))
}

pub fn effective_scale(raw: f64) -> f64 {
    softplus(raw) + SCALE_FLOOR
}

/// Raw parameter value whose effective scale is `a` (requires `a > SCALE_FLOOR`).
pub fn raw_for_scale(a: f64) -> f64 {
    let s = a - SCALE_FLOOR;
    s + (-(-s).exp_m1()).ln()
}

impl WaveletKind {
    /// `psi(t; a, b)` and its partial derivatives w.r.t. `a` and `b`.
    pub fn eval(self, t: f64, a: f64, b: f64) -> (f64, f64, f64) {
        let u = (t - b) / a;
        let e = (-0.5 * u * u).exp();
        let inv_sqrt = 1.0 / a.sqrt();
        let a32 = inv_sqrt / a;
        match self {
            WaveletKind::DoG => {
                let f = u * e;
                let fp = (1.0 - u * u) * e;
                (-inv_sqrt * f, a32 * (0.5 * f + u * fp), a32 * fp)
            }
            WaveletKind::MexicanHat => {
                let amp = mexican_hat_amplitude();
                let m = (1.0 - u * u) * e;
                let mp = u * (u * u - 3.0) * e;
                (
                    amp * inv_sqrt * m,
                    -amp * a32 * (0.5 * m + u * mp),
                    -amp * a32 * mp,
                )
            }
        }
    }
}

/// Integer sample positions `-(K-1)/2 ..= (K-1)/2`.
pub fn sample_positions(support: usize) -> Vec<f64> {
    let r = (support / 2) as isize;
    (-r..=r).map(|t| t as f64).collect()
}

/// Per-channel learnable wavelet: raw scales (mapped through softplus plus a
/// floor) and shifts.
#[derive(Debug, Clone)]
pub struct WaveletParams {
    pub kind: WaveletKind,
    pub raw_scale: ParamId,
    pub shift: ParamId,
    pub support: usize,
}

impl WaveletParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: WaveletKind,
        channels: usize,
        support: usize,
    ) -> Result<Self> {
        if support % 2 == 0 {
            return Err(Error::BadSpec(format!("wavelet support must be odd, got {support}")));
        }
        Ok(Self {
            kind,
            raw_scale: store.add(
                format!("{name}.scale"),
                &[channels],
                Init::Constant(raw_for_scale(1.0)),
                rng,
            ),
            shift: store.add(format!("{name}.shift"), &[channels], Init::Constant(0.0), rng),
            support,
        })
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        store.value(self.shift).numel()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        2 * self.channels(store)
    }

    /// Sampled kernel of shape (C, K).
    pub fn kernel(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let a = tape.param(store, self.raw_scale);
        let b = tape.param(store, self.shift);
        tape.wavelet_kernel(a, b, self.kind, self.support)
    }
}

fn reflect(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = j.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

impl Tape {
    /// Samples a wavelet per channel from raw scales and shifts, both shape (C).
    pub fn wavelet_kernel(&mut self, raw_scale: Var, shift: Var, kind: WaveletKind, support: usize) -> Result<Var> {
        let (ar, b) = (self.get(raw_scale)?, self.get(shift)?);
        if ar.rank() != 1 || ar.shape() != b.shape() {
            return Err(shape_err("wavelet scale and shift must be matching vectors"));
        }
        if support % 2 == 0 {
            return Err(Error::BadSpec(format!("wavelet support must be odd, got {support}")));
        }
        let c = ar.numel();
        let ts = sample_positions(support);
        let mut out = Vec::with_capacity(c * support);
        let mut da = Vec::with_capacity(c * support);
        let mut db = Vec::with_capacity(c * support);
        for ch in 0..c {
            let raw = ar.data()[ch];
            let a = effective_scale(raw);
            let chain = sigmoid(raw);
            for &t in &ts {
                let (v, pa, pb) = kind.eval(t, a, b.data()[ch]);
                out.push(v);
                da.push(pa * chain);
                db.push(pb);
            }
        }
        let value = Tensor::from_parts(vec![c, support], out, self.dtype_of(&[raw_scale, shift]));
        Ok(self.record(value, &[raw_scale, shift], move |ctx| {
            let mut ga = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                for i in 0..support {
                    let k = ch * support + i;
                    ga[ch] += ctx.grad[k] * da[k];
                    gb[ch] += ctx.grad[k] * db[k];
                }
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Depthwise 1D correlation of each channel with its own kernel row
    /// (`kernel` shape (C, K), K odd) along one axis, reflect-padded so the
    /// output keeps the input shape.
    pub fn line_filter(&mut self, x: Var, kernel: Var, axis: Axis1d) -> Result<Var> {
        let xv = self.get(x)?;
        let [b, c, h, w] = xv.dims4()?;
        let kv = self.get(kernel)?;
        if kv.rank() != 2 || kv.shape()[0] != c || kv.shape()[1] % 2 == 0 {
            return Err(shape_err(format!(
                "line filter kernel {:?} incompatible with {c} channels",
                kv.shape()
            )));
        }
        let k = kv.shape()[1];
        let r = (k / 2) as isize;
        // Flat offsets within a plane for output position `p` and tap `i`.
        let (len, stride, lines) = match axis {
            Axis1d::W => (w, 1usize, h),
            Axis1d::H => (h, w, w),
        };
        let line_start = move |l: usize| match axis {
            Axis1d::W => l * w,
            Axis1d::H => l,
        };
        let taps: Vec<usize> = (0..len)
            .flat_map(|p| (0..k).map(move |i| reflect(p as isize + i as isize - r, len)))
            .collect();
        let plane = h * w;
        let src = xv.data();
        let kd = kv.data();
        let mut out = vec![0.0; src.len()];
        out.par_chunks_mut(plane).enumerate().for_each(|(pc, o)| {
            let ch = pc % c;
            let xp = &src[pc * plane..(pc + 1) * plane];
            let kr = &kd[ch * k..(ch + 1) * k];
            for l in 0..lines {
                let s = line_start(l);
                for p in 0..len {
                    let t = &taps[p * k..(p + 1) * k];
                    let mut acc = 0.0;
                    for (kw, &j) in kr.iter().zip(t) {
                        acc += kw * xp[s + j * stride];
                    }
                    o[s + p * stride] = acc;
                }
            }
        });
        let value = Tensor::from_parts(vec![b, c, h, w], out, self.dtype_of(&[x, kernel]));
        self.add_macs((b * c * h * w * k) as u64);
        Ok(self.record(value, &[x, kernel], move |ctx| {
            let (xs, kd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![0.0; xs.len()];
                gx.par_chunks_mut(plane).enumerate().for_each(|(pc, gp)| {
                    let ch = pc % c;
                    let gpl = &g[pc * plane..(pc + 1) * plane];
                    let kr = &kd[ch * k..(ch + 1) * k];
                    for l in 0..lines {
                        let s = line_start(l);
                        for p in 0..len {
                            let gv = gpl[s + p * stride];
                            for (kw, &j) in kr.iter().zip(&taps[p * k..(p + 1) * k]) {
                                gp[s + j * stride] += kw * gv;
                            }
                        }
                    }
                });
                gx
            });
            let gk = ctx.needs[1].then(|| {
                let mut gk = vec![0.0; c * k];
                for (pc, gpl) in g.chunks(plane).enumerate() {
                    let ch = pc % c;
                    let xp = &xs[pc * plane..(pc + 1) * plane];
                    for l in 0..lines {
                        let s = line_start(l);
                        for p in 0..len {
                            let gv = gpl[s + p * stride];
                            for (i, &j) in taps[p * k..(p + 1) * k].iter().enumerate() {
                                gk[ch * k + i] += gv * xp[s + j * stride];
                            }
                        }
                    }
                }
                gk
            });
            vec![gx, gk]
        }))
    }

    /// Discrete separable wavelet filtering: the sampled kernel is applied
    /// along W, then along H.
    pub fn cwt_filter(&mut self, x: Var, params: &WaveletParams, store: &ParamStore) -> Result<Var> {
        let c = self.get(x)?.dims4()?[1];
        if c != params.channels(store) {
            return Err(shape_err(format!(
                "wavelet has {} channels, input has {c}",
                params.channels(store)
            )));
        }
        let k = params.kernel(self, store)?;
        let y = self.line_filter(x, k, Axis1d::W)?;
        self.line_filter(y, k, Axis1d::H)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indexing() {
        let n = 4;
        let got: Vec<usize> = (-4..8).map(|j| reflect(j, n)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn raw_scale_inverts_softplus() {
        for a in [0.2, 0.5, 1.0, 3.0, 10.0] {
            assert!((effective_scale(raw_for_scale(a)) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn dog_vanishes_at_shift() {
        for (a, b) in [(1.0, 0.0), (2.3, 0.7), (0.4, -1.5)] {
            assert_eq!(WaveletKind::DoG.eval(b, a, b).0, 0.0);
        }
    }
}
