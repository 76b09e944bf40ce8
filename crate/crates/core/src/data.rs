//! Synthetic blurred-boundary segmentation data and its on-disk layout:
//! `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MANIFEST: &str = "manifest.csv";
const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    /// Ellipse with a low-order random Fourier perturbation of its radius.
    Blob,
    /// Even indices ellipses, odd indices blobs.
    Mixed,
}

impl ShapeFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeFamily::Ellipse),
            "blob" => Ok(ShapeFamily::Blob),
            "mixed" => Ok(ShapeFamily::Mixed),
            _ => Err(Error::BadSpec(format!("unknown shape family `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Blob => "blob",
            ShapeFamily::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub family: ShapeFamily,
    /// Gaussian boundary blur in pixels; 0 gives hard edges.
    pub blur: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 64,
            height: 64,
            width: 64,
            family: ShapeFamily::Mixed,
            blur: 1.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::BadSpec("count must be positive".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::BadSpec(format!("image size {}x{} below 16x16", self.height, self.width)));
        }
        if !(self.blur == 0.0 || (0.5..=3.0).contains(&self.blur)) {
            return Err(Error::BadSpec(format!("blur {} must be 0 or within [0.5, 3]", self.blur)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::BadSpec(format!("noise {} must be within [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

/// One generated sample; `image` in [0, 1] and `mask` in {0, 1}, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }

    pub fn image_u8(&self) -> Vec<u8> {
        self.image.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

struct Shape {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    /// (amplitude, frequency, phase) of the radius perturbation.
    ripples: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize, blob: bool) -> Self {
        let frac = rng.gen_range(0.05..0.40);
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let area = frac * (h * w) as f64 / std::f64::consts::PI;
        let (a, b) = ((area * aspect).sqrt(), (area / aspect).sqrt());
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let ripples: Vec<(f64, f64, f64)> = if blob {
            (2..=4)
                .map(|k| (rng.gen_range(0.0..0.12), k as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        } else {
            Vec::new()
        };
        let reach = a.max(b) * (1.0 + ripples.iter().map(|r| r.0).sum::<f64>());
        let centre = |n: usize, rng: &mut ChaCha8Rng| {
            let n = n as f64;
            if 2.0 * reach < n {
                rng.gen_range(reach..n - reach)
            } else {
                n / 2.0
            }
        };
        let cx = centre(w, rng);
        let cy = centre(h, rng);
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
            ripples,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let phi = v.atan2(u);
        let limit = 1.0 + self.ripples.iter().map(|&(c, k, p)| c * (k * phi + p).cos()).sum::<f64>();
        (u * u + v * v).sqrt() <= limit
    }
}

/// Separable Gaussian blur with clamped borders, radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * img[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sample `index` of the dataset described by `spec`. Each index draws from
/// its own stream, so samples can be generated independently.
pub fn generate_one(spec: &SynthSpec, index: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let blob = match spec.family {
        ShapeFamily::Ellipse => false,
        ShapeFamily::Blob => true,
        ShapeFamily::Mixed => index % 2 == 1,
    };
    let mask = loop {
        let shape = Shape::sample(&mut rng, h, w, blob);
        let mask: Vec<u8> = (0..h * w)
            .map(|i| shape.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5) as u8)
            .collect();
        let frac = mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break mask;
        }
    };
    let bg = rng.gen_range(0.15..0.35);
    let fg = rng.gen_range(0.60..0.85);
    let (fy, fx, phase) = (
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let hard: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    let soft = gaussian_blur(&hard, h, w, spec.blur);
    let image = soft
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let shading = 0.05 * (std::f64::consts::TAU * (fy * y + fx * x) + phase).sin();
            let n: f64 = StandardNormal.sample(&mut rng);
            (bg + (fg - bg) * s + shading + spec.noise * n).clamp(0.0, 1.0)
        })
        .collect();
    SegSample {
        id: format!("{index:04}"),
        height: h,
        width: w,
        image,
        mask,
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    Ok((0..spec.count).into_par_iter().map(|i| generate_one(spec, i)).collect())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Format(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Reads a binary 8-bit PGM, returning (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

/// Writes images, masks and the manifest under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::from("id,image,mask,foreground\n");
    for s in samples {
        let image = format!("images/{}.pgm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        write_pgm(&dir.join(&image), s.width, s.height, &s.image_u8())?;
        let m: Vec<u8> = s.mask.iter().map(|&v| v * 255).collect();
        write_pgm(&dir.join(&mask), s.width, s.height, &m)?;
        manifest.push_str(&format!("{},{image},{mask},{:.6}\n", s.id, s.foreground_fraction()));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// A dataset loaded from disk: images scaled to [0, 1], masks in {0, 1}.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub height: usize,
    pub width: usize,
    images: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("id,image,mask,foreground") {
            return Err(Error::Format("unexpected manifest header".into()));
        }
        let mut ds = Dataset {
            ids: Vec::new(),
            height: 0,
            width: 0,
            images: Vec::new(),
            masks: Vec::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let [id, image, mask, _] = cols[..] else {
                return Err(Error::Format(format!("bad manifest row `{line}`")));
            };
            let (w, h, img) = read_pgm(&dir.join(PathBuf::from(image)))?;
            let (mw, mh, m) = read_pgm(&dir.join(PathBuf::from(mask)))?;
            if (w, h) != (mw, mh) || (!ds.ids.is_empty() && (w, h) != (ds.width, ds.height)) {
                return Err(Error::Format(format!("sample `{id}` has inconsistent size")));
            }
            if m.iter().any(|&v| v != 0 && v != 255) {
                return Err(Error::NonBinaryInput);
            }
            ds.width = w;
            ds.height = h;
            ds.ids.push(id.to_string());
            ds.images.push(img.iter().map(|&v| v as f64 / 255.0).collect());
            ds.masks.push(m.iter().map(|&v| (v == 255) as u8 as f64).collect());
        }
        if ds.ids.is_empty() {
            return Err(Error::Format("dataset is empty".into()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Images (B, 1, H, W) and masks (B, 1, H, W) for the given indices.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let shape = [indices.len(), 1, self.height, self.width];
        let gather = |src: &Vec<Vec<f64>>| indices.iter().flat_map(|&i| src[i].iter().copied()).collect();
        Ok((
            Tensor::new(&shape, gather(&self.images), dtype)?,
            Tensor::new(&shape, gather(&self.masks), dtype)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_and_mass() {
        let img = vec![0.7; 12 * 10];
        let out = gaussian_blur(&img, 12, 10, 1.3);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SynthSpec { count: 0, ..SynthSpec::default() },
            SynthSpec { blur: 0.3, ..SynthSpec::default() },
            SynthSpec { blur: 3.5, ..SynthSpec::default() },
            SynthSpec { noise: -0.1, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::BadSpec(_))), "{spec:?}");
        }
    }
}
