//! Triple feature fusion attention: wavelet, Fourier and pointwise spatial
//! branches blended by per-sample softmax gates, then batch norm and GELU.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::frequency::{FourierWeights, WaveletKind, WaveletParams, DEFAULT_SUPPORT};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::ops::{Activation, Axes, Conv2dSpec, ReduceKind};
use crate::tensor::Tensor;

pub const BRANCHES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TffaConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fourier: bool,
    pub mexican_hat: bool,
    pub dog: bool,
    /// Replace the output GELU with the identity (test configurations only).
    pub bypass_activations: bool,
}

impl TffaConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            fourier: true,
            mexican_hat: true,
            dog: true,
            bypass_activations: false,
        }
    }

    pub fn wavelet_enabled(&self) -> bool {
        self.dog || self.mexican_hat
    }

    /// Enabled flags in gate order: wavelet, Fourier, spatial.
    pub fn enabled(&self) -> [bool; BRANCHES] {
        [self.wavelet_enabled(), self.fourier, true]
    }
}

#[derive(Debug, Clone)]
pub struct TffaState {
    pub config: TffaConfig,
    pub prefix: String,
    pub dog: Option<WaveletParams>,
    pub mexican_hat: Option<WaveletParams>,
    /// Merges the DoG and Mexican-hat responses, 2C -> C.
    pub wavelet_merge: Option<Conv2d>,
    pub fourier: Option<FourierWeights>,
    pub spatial: Conv2d,
    pub gate_hidden: Conv2d,
    pub gate_out: Conv2d,
    pub norm: BatchNorm2d,
}

/// Pre-fusion outputs and gates; disabled branches are exact zeros and hold
/// a zero gate.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub wavelet: Var,
    pub fourier: Var,
    pub spatial: Var,
    /// (B, 3, 1, 1), normalized over the enabled branches.
    pub gates: Var,
}

impl TffaState {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: TffaConfig) -> Result<Self> {
        let TffaConfig {
            channels: c,
            height: h,
            width: w,
            ..
        } = config;
        if c == 0 || h == 0 || w == 0 {
            return Err(shape_err(format!("TFFA shape ({c}, {h}, {w})")));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        let wavelet = |store: &mut ParamStore, rng: &mut R, on: bool, name: &str, kind| {
            on.then(|| WaveletParams::new(store, rng, &n(name), kind, c, DEFAULT_SUPPORT))
                .transpose()
        };
        let dog = wavelet(store, rng, config.dog, "dog", WaveletKind::DoG)?;
        let mexican_hat = wavelet(store, rng, config.mexican_hat, "mexican_hat", WaveletKind::MexicanHat)?;
        let wavelet_merge = config
            .wavelet_enabled()
            .then(|| Conv2d::new(store, rng, &n("wavelet_merge"), Conv2dSpec::pointwise(2 * c, c)))
            .transpose()?;
        let fourier = config
            .fourier
            .then(|| FourierWeights::new(store, rng, &n("fourier"), c, h, w));
        let hidden = (3 * c / 4).max(1);
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            dog,
            mexican_hat,
            wavelet_merge,
            fourier,
            spatial: Conv2d::new(store, rng, &n("spatial"), Conv2dSpec::pointwise(c, c))?,
            gate_hidden: Conv2d::new(store, rng, &n("gate.hidden"), Conv2dSpec::pointwise(3 * c, hidden))?,
            gate_out: Conv2d::new(store, rng, &n("gate.out"), Conv2dSpec::pointwise(hidden, BRANCHES))?,
            norm: BatchNorm2d::new(store, rng, &n("norm"), c)?,
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let p = format!("{}.", self.prefix);
        store.count_where(|n| n.starts_with(&p))
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(shape_err(format!(
                "TFFA built for ({}, {}, {}), got ({c}, {h}, {w})",
                cfg.channels, cfg.height, cfg.width
            )));
        }
        Ok(())
    }

    fn zeros_like(tape: &mut Tape, x: Var) -> Var {
        let z = tape.value(x).zeros_like();
        tape.constant(z)
    }

    /// DoG response of the wavelet branch before the merge, if enabled.
    pub fn dog_response(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Option<Var>> {
        self.dog.as_ref().map(|p| tape.cwt_filter(x, p, store)).transpose()
    }

    fn wavelet_branch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let Some(merge) = &self.wavelet_merge else {
            return Ok(Self::zeros_like(tape, x));
        };
        let d = match self.dog_response(tape, store, x)? {
            Some(v) => v,
            None => Self::zeros_like(tape, x),
        };
        let m = match &self.mexican_hat {
            Some(p) => tape.cwt_filter(x, p, store)?,
            None => Self::zeros_like(tape, x),
        };
        let cat = tape.concat_channels(&[d, m])?;
        merge.forward(tape, store, cat)
    }

    pub fn branch_outputs(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<BranchOutputs> {
        self.check_input(tape, x)?;
        let wavelet = self.wavelet_branch(tape, store, x)?;
        let fourier = match &self.fourier {
            Some(fw) => fw.forward(tape, store, x)?,
            None => Self::zeros_like(tape, x),
        };
        let spatial = self.spatial.forward(tape, store, x)?;

        let pooled: Vec<Var> = [wavelet, fourier, spatial]
            .iter()
            .map(|&y| tape.reduce(y, ReduceKind::Mean, Axes::Spatial))
            .collect::<Result<_>>()?;
        let stats = tape.concat_channels(&pooled)?;
        let hid = self.gate_hidden.forward(tape, store, stats)?;
        let hid = tape.relu(hid)?;
        let logits = self.gate_out.forward(tape, store, hid)?;

        let enabled = self.config.enabled();
        let slots: Vec<Var> = (0..BRANCHES)
            .filter(|&k| enabled[k])
            .map(|k| tape.slice_channels(logits, k, 1))
            .collect::<Result<_>>()?;
        let kept = tape.concat_channels(&slots)?;
        let soft = tape.softmax(kept, 1)?;
        let mut parts = Vec::with_capacity(BRANCHES);
        let b = tape.value(x).shape()[0];
        let mut next = 0;
        for on in enabled {
            if on {
                parts.push(tape.slice_channels(soft, next, 1)?);
                next += 1;
            } else {
                let z = Tensor::zeros(&[b, 1, 1, 1], tape.value(x).dtype())?;
                parts.push(tape.constant(z));
            }
        }
        let gates = tape.concat_channels(&parts)?;
        tape.tap("gates", gates);
        Ok(BranchOutputs {
            wavelet,
            fourier,
            spatial,
            gates,
        })
    }

    /// `sum_k g_k y_k` over the enabled branches.
    pub fn fuse(&self, tape: &mut Tape, out: &BranchOutputs) -> Result<Var> {
        let enabled = self.config.enabled();
        let mut terms = Vec::with_capacity(BRANCHES);
        for (k, y) in [out.wavelet, out.fourier, out.spatial].into_iter().enumerate() {
            if enabled[k] {
                let g = tape.slice_channels(out.gates, k, 1)?;
                terms.push(tape.mul(y, g)?);
            }
        }
        tape.add_n(&terms)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let out = self.branch_outputs(tape, store, x)?;
        let fused = self.fuse(tape, &out)?;
        let y = self.norm.forward(tape, store, fused)?;
        let act = if self.config.bypass_activations {
            Activation::Identity
        } else {
            Activation::Gelu
        };
        tape.activation(y, act)
    }
}
