//! Adaptive cross-fusion attention: channel and spatial gating, a four-way
//! channel split modulated by learnable directional tensors, and a
//! LayerNorm + pointwise fusion.

use rand::Rng;

use crate::autograd::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelGate, Conv1d, Conv2d, LayerNorm, SpatialGate};
use crate::ops::{Activation, Axis1d, Conv1dSpec, Conv2dSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOrder {
    /// Spatial gate applied to the channel-gated map.
    Sequential,
    /// Both gates applied to the input and summed.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcfaConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub gate_order: GateOrder,
    /// Replace every GELU with the identity (test configurations only).
    pub bypass_activations: bool,
}

impl AcfaConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            gate_order: GateOrder::Sequential,
            bypass_activations: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcfaState {
    pub config: AcfaConfig,
    pub prefix: String,
    pub channel_gate: ChannelGate,
    pub spatial_gate: SpatialGate,
    pub t_hw: ParamId,
    pub t_h: ParamId,
    pub t_w: ParamId,
    pub hw_point: Conv2d,
    pub hw_depth: Conv2d,
    pub h_point: Conv1d,
    pub h_depth: Conv1d,
    pub w_point: Conv1d,
    pub w_depth: Conv1d,
    pub ctx_depth: Conv2d,
    pub ctx_point: Conv2d,
    pub norm: LayerNorm,
    pub fuse: Conv2d,
}

impl AcfaState {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: AcfaConfig) -> Result<Self> {
        let AcfaConfig {
            channels: c,
            height: h,
            width: w,
            ..
        } = config;
        if c % 4 != 0 || c == 0 {
            return Err(Error::IndivisibleChannels(c));
        }
        if h == 0 || w == 0 {
            return Err(Error::BadSpec(format!("ACFA resolution {h}x{w}")));
        }
        let q = c / 4;
        let n = |s: &str| format!("{prefix}.{s}");
        let unit = Init::Uniform { lo: 0.0, hi: 1.0 };
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            channel_gate: ChannelGate::new(store, rng, &n("channel_gate"), c)?,
            spatial_gate: SpatialGate::new(store, rng, &n("spatial_gate"))?,
            t_hw: store.add(n("t_hw"), &[1, q, h, w], unit, rng),
            t_h: store.add(n("t_h"), &[1, q, h, 1], unit, rng),
            t_w: store.add(n("t_w"), &[1, q, 1, w], unit, rng),
            hw_point: Conv2d::new(store, rng, &n("hw.point"), Conv2dSpec::pointwise(q, q))?,
            hw_depth: Conv2d::new(store, rng, &n("hw.depth"), Conv2dSpec::depthwise(q, 3))?,
            h_point: Conv1d::new(store, rng, &n("h.point"), Conv1dSpec::new(q, q, 1), Axis1d::H)?,
            h_depth: Conv1d::new(store, rng, &n("h.depth"), Conv1dSpec::depthwise(q, 3), Axis1d::H)?,
            w_point: Conv1d::new(store, rng, &n("w.point"), Conv1dSpec::new(q, q, 1), Axis1d::W)?,
            w_depth: Conv1d::new(store, rng, &n("w.depth"), Conv1dSpec::depthwise(q, 3), Axis1d::W)?,
            ctx_depth: Conv2d::new(store, rng, &n("ctx.depth"), Conv2dSpec::depthwise(q, 3))?,
            ctx_point: Conv2d::new(store, rng, &n("ctx.point"), Conv2dSpec::pointwise(q, q))?,
            norm: LayerNorm::new(store, rng, &n("norm"), c),
            fuse: Conv2d::new(store, rng, &n("fuse"), Conv2dSpec::pointwise(c, c))?,
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let p = format!("{}.", self.prefix);
        store.count_where(|n| n.starts_with(&p))
    }

    fn act(&self) -> Activation {
        if self.config.bypass_activations {
            Activation::Identity
        } else {
            Activation::Gelu
        }
    }

    /// Processed directional maps with shapes (1, C/4, H, W), (1, C/4, H, 1)
    /// and (1, C/4, 1, W).
    pub fn directional_maps(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var, Var)> {
        let act = self.act();
        let t = tape.param(store, self.t_hw);
        let y = self.hw_point.forward(tape, store, t)?;
        let y = tape.activation(y, act)?;
        let d_hw = self.hw_depth.forward(tape, store, y)?;

        let t = tape.param(store, self.t_h);
        let y = self.h_point.forward(tape, store, t)?;
        let y = tape.activation(y, act)?;
        let d_h = self.h_depth.forward(tape, store, y)?;

        let t = tape.param(store, self.t_w);
        let y = self.w_point.forward(tape, store, t)?;
        let y = tape.activation(y, act)?;
        let d_w = self.w_depth.forward(tape, store, y)?;
        Ok((d_hw, d_h, d_w))
    }

    fn gated(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.config.gate_order {
            GateOrder::Sequential => {
                let c = self.channel_gate.forward(tape, store, x)?;
                self.spatial_gate.forward(tape, store, c)
            }
            GateOrder::Parallel => {
                let c = self.channel_gate.forward(tape, store, x)?;
                let s = self.spatial_gate.forward(tape, store, x)?;
                tape.add(c, s)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        let AcfaConfig {
            channels,
            height,
            width,
            ..
        } = self.config;
        if (c, h, w) != (channels, height, width) {
            return Err(Error::ResolutionMismatch {
                expected: (channels, height, width),
                got: (c, h, w),
            });
        }
        let g = self.gated(tape, store, x)?;
        let [s1, s2, s3, s4] = tape.channel_split4(g)?;
        let (d_hw, d_h, d_w) = self.directional_maps(tape, store)?;
        tape.tap("direction_hw", d_hw);
        tape.tap("direction_h", d_h);
        tape.tap("direction_w", d_w);
        let b1 = tape.mul(s1, d_hw)?;
        let b2 = tape.mul(s2, d_h)?;
        let b3 = tape.mul(s3, d_w)?;
        let y = self.ctx_depth.forward(tape, store, s4)?;
        let y = tape.activation(y, self.act())?;
        let b4 = self.ctx_point.forward(tape, store, y)?;
        let cat = tape.concat_channels(&[b1, b2, b3, b4])?;
        let n = self.norm.forward(tape, store, cat)?;
        self.fuse.forward(tape, store, n)
    }
}
