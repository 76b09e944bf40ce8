//! Overlap and boundary-distance metrics for binary masks.
//!
//! Rates are percentages. Conventions for empty denominators: DSC is 100
//! when both masks are empty, SE is 100 when the target has no foreground,
//! SP is 100 when the target has no background. HD95 is 0 when both masks
//! are empty and the image diagonal when exactly one is.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn check_binary(values: &[f64]) -> Result<()> {
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryInput);
    }
    Ok(())
}

pub fn confusion(pred: &Tensor, target: &Tensor) -> Result<Confusion> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    check_binary(pred.data())?;
    check_binary(target.data())?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn dsc(&self) -> f64 {
        pct(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn se(&self) -> f64 {
        pct(self.tp, self.tp + self.fn_)
    }

    pub fn sp(&self) -> f64 {
        pct(self.tn, self.tn + self.fp)
    }

    pub fn acc(&self) -> f64 {
        pct(self.tp + self.tn, self.total())
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background.
pub fn boundary(mask: &[f64], h: usize, w: usize) -> Vec<bool> {
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == 1.0
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
        })
        .collect()
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel: per-column nearest rows, then a minimum over columns. All
/// arithmetic is in integers.
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<u64> {
    const FAR: u64 = u64::MAX / 4;
    let mut col = vec![FAR; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if set[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = (y - l) as u64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if set[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = col[y * w + x].min((l - y) as u64);
            }
        }
    }
    let mut out = vec![FAR; h * w];
    for y in 0..h {
        let row = &col[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = row
                .iter()
                .enumerate()
                .filter(|(_, &g)| g != FAR)
                .map(|(x2, &g)| {
                    let dx = x.abs_diff(x2) as u64;
                    dx * dx + g * g
                })
                .min()
                .unwrap_or(FAR);
        }
    }
    out
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn spatial_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    let (h, w) = match s.len() {
        0 | 1 => return Err(shape_err(format!("mask needs two spatial dims, got {s:?}"))),
        n => (s[n - 2], s[n - 1]),
    };
    if h * w != t.numel() {
        return Err(shape_err(format!("expected a single mask, got {s:?}")));
    }
    Ok((h, w))
}

/// 95th percentile of the pooled directed boundary-to-boundary distances.
pub fn hd95(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    check_binary(pred.data())?;
    check_binary(target.data())?;
    let (h, w) = spatial_dims(pred)?;
    let bp = boundary(pred.data(), h, w);
    let bt = boundary(target.data(), h, w);
    let (np, nt) = (bp.iter().any(|&b| b), bt.iter().any(|&b| b));
    match (np, nt) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let dt = squared_distance_transform(&bt, h, w);
    let dp = squared_distance_transform(&bp, h, w);
    let mut d: Vec<f64> = bp
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .chain(bt.iter().zip(&dp).filter(|(&b, _)| b))
        .map(|(_, &s)| (s as f64).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(percentile(&d, 0.95))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub hd95: f64,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &Tensor, target: &Tensor) -> Result<Self> {
        let c = confusion(pred, target)?;
        Ok(Self {
            id: id.into(),
            dsc: c.dsc(),
            se: c.se(),
            sp: c.sp(),
            acc: c.acc(),
            hd95: hd95(pred, target)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Scores `(id, pred, target)` triples of single (H, W) masks.
    pub fn evaluate(items: &[(String, Tensor, Tensor)]) -> Result<Self> {
        let rows = items
            .par_iter()
            .map(|(id, p, t)| SampleMetrics::compute(id.clone(), p, t))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean(&self) -> SampleMetrics {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        SampleMetrics {
            id: "mean".into(),
            dsc: avg(|r| r.dsc),
            se: avg(|r| r.se),
            sp: avg(|r| r.sp),
            acc: avg(|r| r.acc),
            hd95: avg(|r| r.hd95),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,se,sp,acc,hd95\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.id, r.dsc, r.se, r.sp, r.acc, r.hd95
            ));
        }
        out
    }
}
