//! Direct 2D convolution (cross-correlation) with groups, stride, padding
//! and dilation. 1D convolutions along H or W are 2D convolutions with a
//! `k x 1` or `1 x k` kernel.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Stride-1 convolution with "same" padding and a bias.
    pub fn same(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: 1,
            padding: (k / 2, k / 2),
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self::same(in_ch, out_ch, 1)
    }

    /// Depthwise `k x k` convolution with "same" padding.
    pub fn depthwise(ch: usize, k: usize) -> Self {
        Self {
            groups: ch,
            ..Self::same(ch, ch, k)
        }
    }

    /// Sets the dilation and recomputes "same" padding.
    pub fn dilated(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = (d * (self.kernel.0 - 1) / 2, d * (self.kernel.1 - 1) / 2);
        self
    }

    pub fn strided(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_ch == 0 || self.out_ch == 0 || kh == 0 || kw == 0 {
            return Err(Error::BadSpec("channels and kernel must be positive".into()));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::BadSpec("stride, dilation and groups must be positive".into()));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::BadSpec(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_ch } else { 0 }
    }

    /// Output spatial size: `floor((n + 2p - d (k - 1) - 1) / s) + 1`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |n: usize, k: usize, p: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            if n + 2 * p < span {
                return Err(Error::BadSpec(format!(
                    "kernel span {span} exceeds padded input {}",
                    n + 2 * p
                )));
            }
            Ok((n + 2 * p - span) / self.stride + 1)
        };
        Ok((f(h, self.kernel.0, self.padding.0)?, f(w, self.kernel.1, self.padding.1)?))
    }

    /// Multiply-accumulates for one forward pass producing `out_elems` values.
    pub fn macs(&self, out_elems: usize) -> u64 {
        (out_elems * self.kernel.0 * self.kernel.1 * (self.in_ch / self.groups)) as u64
    }
}

/// 1D convolution spec. Applied along H or W of a 4D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize) -> Self {
        Self {
            groups: ch,
            ..Self::new(ch, ch, kernel)
        }
    }

    pub fn along(&self, axis: Axis1d) -> Conv2dSpec {
        let (kernel, padding) = match axis {
            Axis1d::H => ((self.kernel, 1), (self.kernel / 2, 0)),
            Axis1d::W => ((1, self.kernel), (0, self.kernel / 2)),
        };
        Conv2dSpec {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel,
            stride: 1,
            padding,
            dilation: 1,
            groups: self.groups,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis1d {
    H,
    W,
}

/// Geometry shared by the forward and backward kernels.
#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    s: usize,
    d: usize,
    ph: usize,
    pw: usize,
}

impl Geom {
    /// Valid output range `[lo, hi)` for kernel tap offset `k` along an axis
    /// of input size `n` and output size `on`, plus the signed input offset.
    #[inline]
    fn range(&self, k: usize, pad: usize, n: usize, on: usize) -> (usize, usize, isize) {
        let off = (k * self.d) as isize - pad as isize;
        let s = self.s as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = n as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(on as isize) };
        (lo as usize, hi.max(lo) as usize, off)
    }
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: Geom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.b * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(bo, o)| {
        let (bi, oc) = (bo / g.cout, bo % g.cout);
        if let Some(bias) = bias {
            o.fill(bias[oc]);
        }
        let grp = oc / g.cout_g;
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let xp = &x[(bi * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi, yoff) = g.range(ky, g.ph, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = wt[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi, xoff) = g.range(kx, g.pw, g.w, g.ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy as isize * g.s as isize + yoff) as usize;
                        let orow = &mut o[oy * g.ow + xlo..oy * g.ow + xhi];
                        if g.s == 1 {
                            let start = (xlo as isize + xoff) as usize;
                            let xrow = &xp[iy * g.w + start..iy * g.w + start + (xhi - xlo)];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (j, ov) in orow.iter_mut().enumerate() {
                                let ix = ((xlo + j) as isize * g.s as isize + xoff) as usize;
                                *ov += wv * xp[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(gout: &[f64], wt: &[f64], g: Geom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut gx = vec![0.0; g.b * g.cin * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(bc, gxp)| {
        let (bi, ic) = (bc / g.cin, bc % g.cin);
        let grp = ic / g.cin_g;
        let icg = ic % g.cin_g;
        for ocg in 0..g.cout_g {
            let oc = grp * g.cout_g + ocg;
            let gp = &gout[(bi * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                let (ylo, yhi, yoff) = g.range(ky, g.ph, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = wt[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi, xoff) = g.range(kx, g.pw, g.w, g.ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy as isize * g.s as isize + yoff) as usize;
                        let grow = &gp[oy * g.ow + xlo..oy * g.ow + xhi];
                        if g.s == 1 {
                            let start = (xlo as isize + xoff) as usize;
                            let xrow = &mut gxp[iy * g.w + start..iy * g.w + start + (xhi - xlo)];
                            for (xv, gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                let ix = ((xlo + j) as isize * g.s as isize + xoff) as usize;
                                gxp[iy * g.w + ix] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight(gout: &[f64], x: &[f64], g: Geom) -> Vec<f64> {
    let per_oc = g.cin_g * g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * per_oc];
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, gwo)| {
        let grp = oc / g.cout_g;
        for bi in 0..g.b {
            let gp = &gout[(bi * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let xp = &x[(bi * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (ylo, yhi, yoff) = g.range(ky, g.ph, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (xlo, xhi, xoff) = g.range(kx, g.pw, g.w, g.ow);
                        let mut acc = 0.0;
                        if xlo < xhi {
                            for oy in ylo..yhi {
                                let iy = (oy as isize * g.s as isize + yoff) as usize;
                                let grow = &gp[oy * g.ow + xlo..oy * g.ow + xhi];
                                if g.s == 1 {
                                    let start = (xlo as isize + xoff) as usize;
                                    let xrow = &xp[iy * g.w + start..iy * g.w + start + (xhi - xlo)];
                                    acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        let ix = ((xlo + j) as isize * g.s as isize + xoff) as usize;
                                        acc += gv * xp[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                        gwo[(icg * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// Dense (`groups == 1`) convolutions run as im2col + GEMM.
fn use_gemm(g: &Geom) -> bool {
    g.cin_g == g.cin && g.cin * g.kh * g.kw >= 4 && g.oh * g.ow >= 16
}

fn is_plain_pointwise(g: &Geom) -> bool {
    g.kh == 1 && g.kw == 1 && g.s == 1 && g.ph == 0 && g.pw == 0
}

/// Column matrix `(cin*kh*kw) x (oh*ow)` of one image, zeros where a tap
/// falls in the padding.
fn im2col(xp: &[f64], g: &Geom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * p];
    for ic in 0..g.cin {
        let plane = &xp[ic * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi, yoff) = g.range(ky, g.ph, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi, xoff) = g.range(kx, g.pw, g.w, g.ow);
                let row = &mut cols[((ic * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + yoff) as usize;
                    for ox in xlo..xhi {
                        let ix = (ox as isize * g.s as isize + xoff) as usize;
                        row[oy * g.ow + ox] = plane[iy * g.w + ix];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], gxp: &mut [f64], g: &Geom) {
    let p = g.oh * g.ow;
    for ic in 0..g.cin {
        let plane = &mut gxp[ic * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi, yoff) = g.range(ky, g.ph, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi, xoff) = g.range(kx, g.pw, g.w, g.ow);
                let row = &cols[((ic * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + yoff) as usize;
                    for ox in xlo..xhi {
                        let ix = (ox as isize * g.s as isize + xoff) as usize;
                        plane[iy * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op` selected by the
/// transpose flags; `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked against the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: Geom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let mut out = vec![0.0; g.b * g.cout * p];
    for (bi, o) in out.chunks_mut(g.cout * p).enumerate() {
        let xp = &x[bi * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
        if let Some(bias) = bias {
            for (oc, plane) in o.chunks_mut(p).enumerate() {
                plane.fill(bias[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if is_plain_pointwise(&g) {
            gemm(g.cout, k, p, wt, false, xp, false, beta, o);
        } else {
            let cols = im2col(xp, &g);
            gemm(g.cout, k, p, wt, false, &cols, false, beta, o);
        }
    }
    out
}

fn gemm_backward_input(gout: &[f64], wt: &[f64], g: Geom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let img = g.cin * g.h * g.w;
    let mut gx = vec![0.0; g.b * img];
    let mut cols = vec![0.0; k * p];
    for (bi, gxp) in gx.chunks_mut(img).enumerate() {
        let go = &gout[bi * g.cout * p..][..g.cout * p];
        if is_plain_pointwise(&g) {
            gemm(k, g.cout, p, wt, true, go, false, 0.0, gxp);
        } else {
            gemm(k, g.cout, p, wt, true, go, false, 0.0, &mut cols);
            col2im(&cols, gxp, &g);
        }
    }
    gx
}

fn gemm_backward_weight(gout: &[f64], x: &[f64], g: Geom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let img = g.cin * g.h * g.w;
    let mut gw = vec![0.0; g.cout * k];
    for bi in 0..g.b {
        let go = &gout[bi * g.cout * p..][..g.cout * p];
        let xp = &x[bi * img..][..img];
        if is_plain_pointwise(&g) {
            gemm(g.cout, p, k, go, false, xp, true, 1.0, &mut gw);
        } else {
            let cols = im2col(xp, &g);
            gemm(g.cout, p, k, go, false, &cols, true, 1.0, &mut gw);
        }
    }
    gw
}

impl Tape {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        spec.validate()?;
        let xv = self.get(x)?;
        let [bn, cin, h, wd] = xv.dims4()?;
        if cin != spec.in_ch {
            return Err(shape_err(format!(
                "conv expects {} input channels, got {cin}",
                spec.in_ch
            )));
        }
        let wv = self.get(w)?;
        if wv.shape() != spec.weight_shape() {
            return Err(shape_err(format!(
                "conv weight shape {:?}, expected {:?}",
                wv.shape(),
                spec.weight_shape()
            )));
        }
        if spec.bias != b.is_some() {
            return Err(shape_err("bias presence does not match spec"));
        }
        if let Some(b) = b {
            if self.get(b)?.shape() != [spec.out_ch] {
                return Err(shape_err(format!("conv bias must have shape [{}]", spec.out_ch)));
            }
        }
        let (oh, ow) = spec.out_hw(h, wd)?;
        let geom = Geom {
            b: bn,
            cin,
            h,
            w: wd,
            cout: spec.out_ch,
            oh,
            ow,
            cin_g: spec.in_ch / spec.groups,
            cout_g: spec.out_ch / spec.groups,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            s: spec.stride,
            d: spec.dilation,
            ph: spec.padding.0,
            pw: spec.padding.1,
        };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = if use_gemm(&geom) {
            gemm_forward(xv.data(), wv.data(), bias.as_deref(), geom)
        } else {
            conv_forward(xv.data(), wv.data(), bias.as_deref(), geom)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let dtype = self.dtype_of(&parents);
        let value = Tensor::from_parts(vec![bn, spec.out_ch, oh, ow], out, dtype);
        self.add_macs(spec.macs(value.numel()));
        Ok(self.record(value, &parents, move |ctx| {
            let (xs, ws) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dense = use_gemm(&geom);
            let gx = ctx.needs[0].then(|| {
                if dense {
                    gemm_backward_input(ctx.grad, ws, geom)
                } else {
                    conv_backward_input(ctx.grad, ws, geom)
                }
            });
            let gw = ctx.needs[1].then(|| {
                if dense {
                    gemm_backward_weight(ctx.grad, xs, geom)
                } else {
                    conv_backward_weight(ctx.grad, xs, geom)
                }
            });
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                let plane = geom.oh * geom.ow;
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = vec![0.0; geom.cout];
                    for (i, chunk) in ctx.grad.chunks(plane).enumerate() {
                        gb[i % geom.cout] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// 1D convolution along H (input `(B, C, L, 1)` or any W) or W.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &Conv1dSpec,
        axis: Axis1d,
    ) -> Result<Var> {
        self.conv2d(x, w, b, &spec.along(axis))
    }
}
