//! Structural-aware multi-scale masking for skip fusion: per-path
//! multi-scale depthwise perception, a saliency mask from three channel
//! descriptors, additive fusion, dilated conv, LayerNorm and a pointwise
//! projection.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, LayerNorm, GATE_REDUCTION};
use crate::ops::{Axes, Conv2dSpec, ReduceKind, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmmmConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bias: bool,
}

impl SmmmConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            bias: true,
        }
    }

    fn spec(&self, spec: Conv2dSpec) -> Conv2dSpec {
        if self.bias {
            spec
        } else {
            spec.without_bias()
        }
    }
}

/// Two-stage multi-scale perception.
#[derive(Debug, Clone)]
pub struct MultiScale {
    pub entry: Conv2d,
    pub dw3: Conv2d,
    pub dw5: Conv2d,
    /// Stage two operates on the 2C concatenation.
    pub dw3_wide: Conv2d,
    pub dw5_wide: Conv2d,
    /// 4C -> C.
    pub exit: Conv2d,
}

impl MultiScale {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &SmmmConfig) -> Result<Self> {
        let c = cfg.channels;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            entry: Conv2d::new(store, rng, &n("entry"), cfg.spec(Conv2dSpec::pointwise(c, c)))?,
            dw3: Conv2d::new(store, rng, &n("dw3"), cfg.spec(Conv2dSpec::depthwise(c, 3)))?,
            dw5: Conv2d::new(store, rng, &n("dw5"), cfg.spec(Conv2dSpec::depthwise(c, 5)))?,
            dw3_wide: Conv2d::new(store, rng, &n("dw3_wide"), cfg.spec(Conv2dSpec::depthwise(2 * c, 3)))?,
            dw5_wide: Conv2d::new(store, rng, &n("dw5_wide"), cfg.spec(Conv2dSpec::depthwise(2 * c, 5)))?,
            exit: Conv2d::new(store, rng, &n("exit"), cfg.spec(Conv2dSpec::pointwise(4 * c, c)))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let m = self.entry.forward(tape, store, x)?;
        let a = self.dw3.forward(tape, store, m)?;
        let a = tape.relu(a)?;
        let b = self.dw5.forward(tape, store, m)?;
        let b = tape.relu(b)?;
        let cat = tape.concat_channels(&[a, b])?;
        let a = self.dw3_wide.forward(tape, store, cat)?;
        let a = tape.relu(a)?;
        let b = self.dw5_wide.forward(tape, store, cat)?;
        let b = tape.relu(b)?;
        let cat = tape.concat_channels(&[a, b])?;
        self.exit.forward(tape, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ScoreMlp {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Result<Self> {
        let hidden = (c / GATE_REDUCTION).max(1);
        Ok(Self {
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), Conv2dSpec::pointwise(c, hidden))?,
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), Conv2dSpec::pointwise(hidden, c))?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, d: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, d)?;
        // the std descriptor is never negative; ReLU here would start dead
        // for about half the hidden units and never recover
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Three channel descriptors (spatial mean, max, std), each scored by its
/// own bottleneck MLP, softmax-weighted across the three per channel.
#[derive(Debug, Clone)]
pub struct SaliencyMask {
    pub avg: ScoreMlp,
    pub max: ScoreMlp,
    pub std: ScoreMlp,
}

impl SaliencyMask {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            avg: ScoreMlp::new(store, rng, &format!("{name}.avg"), c)?,
            max: ScoreMlp::new(store, rng, &format!("{name}.max"), c)?,
            std: ScoreMlp::new(store, rng, &format!("{name}.std"), c)?,
        })
    }

    pub fn descriptors(&self, tape: &mut Tape, x: Var) -> Result<[Var; 3]> {
        Ok([
            tape.reduce(x, ReduceKind::Mean, Axes::Spatial)?,
            tape.reduce(x, ReduceKind::Max, Axes::Spatial)?,
            tape.spatial_std(x, NORM_EPS)?,
        ])
    }

    /// Per-channel softmax weights over the three filters, shape (B, 3, C, 1).
    pub fn weights_and_scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let [b, c, _, _] = tape.value(x).dims4()?;
        let [da, dm, ds] = self.descriptors(tape, x)?;
        let sa = self.avg.forward(tape, store, da)?;
        let sm = self.max.forward(tape, store, dm)?;
        let ss = self.std.forward(tape, store, ds)?;
        let cat = tape.concat_channels(&[sa, sm, ss])?;
        let scores = tape.reshape(cat, &[b, 3, c, 1])?;
        let weights = tape.softmax(scores, 1)?;
        Ok((weights, scores))
    }

    /// Mask of shape (B, C, 1, 1) in (0, 1).
    pub fn mask(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [b, c, _, _] = tape.value(x).dims4()?;
        let (w, s) = self.weights_and_scores(tape, store, x)?;
        let ws = tape.mul(w, s)?;
        let sum = tape.reduce(ws, ReduceKind::Sum, Axes::Channel)?;
        let sum = tape.reshape(sum, &[b, c, 1, 1])?;
        tape.sigmoid(sum)
    }
}

#[derive(Debug, Clone)]
pub struct SmmmState {
    pub config: SmmmConfig,
    pub prefix: String,
    pub enc: MultiScale,
    pub dec: MultiScale,
    pub enc_mask: SaliencyMask,
    pub dec_mask: SaliencyMask,
    pub dilated: Conv2d,
    pub norm: LayerNorm,
    pub project: Conv2d,
}

impl SmmmState {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: SmmmConfig) -> Result<Self> {
        let c = config.channels;
        if c == 0 || config.height == 0 || config.width == 0 {
            return Err(shape_err("SMMM shape must be positive"));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            enc: MultiScale::new(store, rng, &n("enc"), &config)?,
            dec: MultiScale::new(store, rng, &n("dec"), &config)?,
            enc_mask: SaliencyMask::new(store, rng, &n("enc_mask"), c)?,
            dec_mask: SaliencyMask::new(store, rng, &n("dec_mask"), c)?,
            dilated: Conv2d::new(store, rng, &n("dilated"), config.spec(Conv2dSpec::same(c, c, 3).dilated(2)))?,
            norm: LayerNorm::new(store, rng, &n("norm"), c),
            project: Conv2d::new(store, rng, &n("project"), config.spec(Conv2dSpec::pointwise(c, c)))?,
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let p = format!("{}.", self.prefix);
        store.count_where(|n| n.starts_with(&p))
    }

    /// `e * mask(e) + d * mask(d)` with `e`, `d` the multi-scale features.
    pub fn masked_sum(&self, tape: &mut Tape, store: &ParamStore, enc: Var, dec: Var) -> Result<Var> {
        let want = [self.config.channels, self.config.height, self.config.width];
        for v in [enc, dec] {
            let s = tape.value(v).dims4()?;
            if s[1..] != want || s[0] != tape.value(enc).shape()[0] {
                return Err(shape_err(format!(
                    "SMMM inputs {:?} and {:?} must both be (B, {}, {}, {})",
                    tape.value(enc).shape(),
                    tape.value(dec).shape(),
                    want[0],
                    want[1],
                    want[2]
                )));
            }
        }
        let e = self.enc.forward(tape, store, enc)?;
        let d = self.dec.forward(tape, store, dec)?;
        let me = self.enc_mask.mask(tape, store, e)?;
        let md = self.dec_mask.mask(tape, store, d)?;
        tape.tap("encoder_mask", me);
        tape.tap("decoder_mask", md);
        let a = tape.mul(e, me)?;
        let b = tape.mul(d, md)?;
        tape.add(a, b)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, enc: Var, dec: Var) -> Result<Var> {
        let fused = self.masked_sum(tape, store, enc, dec)?;
        let y = self.dilated.forward(tape, store, fused)?;
        let y = self.norm.forward(tape, store, y)?;
        self.project.forward(tape, store, y)
    }
}
