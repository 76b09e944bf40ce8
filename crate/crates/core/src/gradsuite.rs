//! The finite-difference suite behind `segdec gradcheck`: every
//! differentiable primitive, each decoder module, and a small full network,
//! all in float64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acfa::{AcfaConfig, AcfaState, GateOrder};
use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::frequency::{FourierWeights, WaveletKind, WaveletParams};
use crate::gradcheck::{
    check_gradients, project, random_tensor, CheckConfig, CheckEntry, CheckReport, COMPOSITE_TOL, PRIMITIVE_TOL,
};
use crate::network::{NetConfig, SegNet};
use crate::nn::{f64_store, BatchNorm2d, ChannelGate, Conv2d, LayerNorm, SpatialGate};
use crate::ops::{Activation, Axes, Axis1d, BinaryOp, Conv1dSpec, Conv2dSpec, ReduceKind};
use crate::smmm::{SmmmConfig, SmmmState};
use crate::tensor::{DType, Tensor};
use crate::tffa::{TffaConfig, TffaState};

const SEEDS: std::ops::Range<u64> = 0..5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Acfa,
    Tffa,
    Smmm,
    Net,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Op, Scope::Acfa, Scope::Tffa, Scope::Smmm, Scope::Net];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "op" => Scope::Op,
            "acfa" => Scope::Acfa,
            "tffa" => Scope::Tffa,
            "smmm" => Scope::Smmm,
            "net" => Scope::Net,
            _ => return Err(Error::Config(format!("unknown gradcheck scope `{s}` (op, acfa, tffa, smmm, net)"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Op => "op",
            Scope::Acfa => "acfa",
            Scope::Tffa => "tffa",
            Scope::Smmm => "smmm",
            Scope::Net => "net",
        }
    }
}

/// One named check with its tolerance.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub tol: f64,
    pub report: CheckReport,
}

impl Case {
    pub fn worst(&self) -> f64 {
        self.report.worst()
    }

    pub fn worst_entry(&self) -> Option<&CheckEntry> {
        self.report.worst_entry()
    }

    pub fn passed(&self) -> bool {
        !self.report.entries.is_empty() && self.report.passes(self.tol)
    }
}

pub fn run(scope: Scope) -> Result<Vec<Case>> {
    match scope {
        Scope::Op => primitives(),
        Scope::Acfa => acfa(),
        Scope::Tffa => tffa(),
        Scope::Smmm => smmm(),
        Scope::Net => net(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn projected(
    store: &ParamStore,
    inputs: &[Tensor],
    seed: u64,
    cfg: &CheckConfig,
    f: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    check_gradients(
        store,
        inputs,
        |tape, store, v| {
            let y = f(tape, store, v)?;
            project(tape, y, seed)
        },
        cfg,
    )
}

struct Cases(Vec<Case>);

impl Cases {
    fn push(&mut self, name: impl Into<String>, tol: f64, report: CheckReport) {
        let name = name.into();
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => c.report.merge(report),
            None => self.0.push(Case { name, tol, report }),
        }
    }
}

fn unary(
    out: &mut Cases,
    name: &str,
    shape: &[usize],
    range: (f64, f64),
    op: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<()> {
    let store = f64_store();
    for seed in SEEDS {
        let x = random_tensor(shape, range.0, range.1, seed);
        let r = projected(&store, &[x], seed, &CheckConfig::default(), |t, _, v| op(t, v[0]))?;
        out.push(name, PRIMITIVE_TOL, r);
    }
    Ok(())
}

fn conv_case(out: &mut Cases, name: &str, spec: Conv2dSpec, shape: [usize; 4]) -> Result<()> {
    for seed in SEEDS {
        let mut store = f64_store();
        let conv = Conv2d::new(&mut store, &mut rng(seed), "conv", spec)?;
        if let Some(b) = conv.bias {
            store.set_value(b, random_tensor(&[spec.out_ch], -0.5, 0.5, seed + 7))?;
        }
        let x = random_tensor(&shape, -1.0, 1.0, seed);
        let r = projected(&store, &[x], seed, &CheckConfig::default(), |t, s, v| conv.forward(t, s, v[0]))?;
        out.push(name, PRIMITIVE_TOL, r);
    }
    Ok(())
}

fn primitives() -> Result<Vec<Case>> {
    let mut out = Cases(Vec::new());
    let store = f64_store();
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        for seed in SEEDS {
            let a = random_tensor(&[2, 4, 3, 3], -1.0, 1.0, seed);
            let b = random_tensor(&[1, 4, 1, 3], 0.5, 1.5, seed + 100);
            let r = projected(&store, &[a, b], seed, &CheckConfig::default(), |t, _, v| t.binary(v[0], v[1], op))?;
            out.push(format!("{op:?}").to_lowercase(), PRIMITIVE_TOL, r);
        }
    }
    for kind in [ReduceKind::Mean, ReduceKind::Max, ReduceKind::Sum] {
        for axes in [Axes::Spatial, Axes::Channel, Axes::All] {
            let name = format!("reduce_{kind:?}_{axes:?}").to_lowercase();
            unary(&mut out, &name, &[2, 4, 3, 3], (-1.0, 1.0), |t, x| t.reduce(x, kind, axes))?;
        }
    }
    unary(&mut out, "spatial_std", &[2, 3, 4, 4], (-1.0, 1.0), |t, x| t.spatial_std(x, 1e-5))?;
    for kind in [Activation::Sigmoid, Activation::Gelu, Activation::Relu, Activation::Softplus] {
        let name = format!("{kind:?}").to_lowercase();
        unary(&mut out, &name, &[2, 3, 4, 4], (-2.0, 2.0), |t, x| t.activation(x, kind))?;
    }
    for axis in 0..4 {
        unary(&mut out, &format!("softmax_axis{axis}"), &[2, 3, 4, 4], (-2.0, 2.0), |t, x| {
            t.softmax(x, axis)
        })?;
    }
    unary(&mut out, "reshape", &[2, 4, 3, 3], (-1.0, 1.0), |t, x| t.reshape(x, &[8, 9]))?;
    unary(&mut out, "split_concat", &[2, 8, 3, 3], (-1.0, 1.0), |t, x| {
        let [a, b, c, d] = t.channel_split4(x)?;
        let s = t.scale(b, 2.0)?;
        t.concat_channels(&[d, a, s, c])
    })?;
    unary(&mut out, "upsample_bilinear2x", &[2, 3, 3, 5], (-1.0, 1.0), |t, x| t.upsample_bilinear2x(x))?;
    unary(&mut out, "shared_subexpression", &[1, 2, 3, 3], (-1.0, 1.0), |t, x| {
        let sq = t.mul(x, x)?;
        t.add(sq, x)
    })?;

    conv_case(&mut out, "conv1x1", Conv2dSpec::pointwise(4, 3), [2, 4, 5, 5])?;
    conv_case(&mut out, "conv3x3", Conv2dSpec::same(3, 4, 3), [2, 3, 6, 6])?;
    conv_case(&mut out, "conv5x5", Conv2dSpec::same(2, 2, 5).without_bias(), [1, 2, 6, 6])?;
    conv_case(&mut out, "conv7x7", Conv2dSpec::same(2, 1, 7), [1, 2, 6, 6])?;
    conv_case(&mut out, "depthwise3x3", Conv2dSpec::depthwise(4, 3), [2, 4, 6, 6])?;
    conv_case(&mut out, "depthwise5x5", Conv2dSpec::depthwise(4, 5), [1, 4, 6, 6])?;
    conv_case(&mut out, "conv3x3_dilated2", Conv2dSpec::same(4, 4, 3).dilated(2), [1, 4, 6, 6])?;
    conv_case(&mut out, "conv3x3_stride2", Conv2dSpec::same(3, 4, 3).strided(2), [2, 3, 6, 5])?;
    conv_case(&mut out, "conv1d_h", Conv1dSpec::depthwise(4, 3).along(Axis1d::H), [1, 4, 6, 1])?;
    conv_case(&mut out, "conv1d_w", Conv1dSpec::new(4, 4, 1).along(Axis1d::W), [1, 4, 1, 6])?;

    for seed in SEEDS {
        let mut store = f64_store();
        let mut r = rng(seed);
        let ln = LayerNorm::new(&mut store, &mut r, "ln", 4);
        let bn = BatchNorm2d::new(&mut store, &mut r, "bn", 4)?;
        for id in [ln.gamma, ln.beta, bn.gamma, bn.beta] {
            store.set_value(id, random_tensor(&[4], 0.5, 1.5, seed + id.index() as u64))?;
        }
        let x = random_tensor(&[2, 4, 3, 3], -1.0, 1.0, seed);
        for training in [true, false] {
            let cfg = CheckConfig {
                training,
                ..CheckConfig::default()
            };
            let r = projected(&store, &[x.clone()], seed, &cfg, |t, s, v| {
                let a = ln.forward(t, s, v[0])?;
                bn.forward(t, s, a)
            })?;
            let mode = if training { "train" } else { "eval" };
            out.push(format!("layernorm_batchnorm_{mode}"), PRIMITIVE_TOL, r);
        }

        let z = random_tensor(&[2, 1, 4, 4], -3.0, 3.0, seed);
        let t = random_tensor(&[2, 1, 4, 4], 0.0, 1.0, seed + 1).map(|v| (v > 0.5) as u8 as f64);
        let r = check_gradients(&store, &[z, t], |tp, _, v| tp.bce_with_logits(v[0], v[1]), &CheckConfig::default())?;
        out.push("bce_with_logits", PRIMITIVE_TOL, r);
        let z = random_tensor(&[2, 3, 3, 3], -3.0, 3.0, seed);
        let t = random_tensor(&[2, 3, 3, 3], 0.0, 1.0, seed + 1);
        let r = check_gradients(
            &store,
            &[z, t],
            |tp, _, v| tp.cross_entropy_with_logits(v[0], v[1]),
            &CheckConfig::default(),
        )?;
        out.push("cross_entropy_with_logits", PRIMITIVE_TOL, r);

        let mut store = f64_store();
        let mut r = rng(seed);
        let cg = ChannelGate::new(&mut store, &mut r, "cg", 8)?;
        let sg = SpatialGate::new(&mut store, &mut r, "sg")?;
        let x = random_tensor(&[1, 8, 6, 6], -1.0, 1.0, seed);
        let r = projected(&store, &[x], seed, &CheckConfig::default(), |t, s, v| {
            let a = cg.forward(t, s, v[0])?;
            sg.forward(t, s, a)
        })?;
        out.push("channel_spatial_gates", PRIMITIVE_TOL, r);
    }

    for kind in [WaveletKind::DoG, WaveletKind::MexicanHat] {
        let tag = match kind {
            WaveletKind::DoG => "dog",
            WaveletKind::MexicanHat => "mexican_hat",
        };
        for seed in SEEDS {
            let c = 3;
            let mut store = f64_store();
            let wp = WaveletParams::new(&mut store, &mut rng(seed), "wav", kind, c, 9)?;
            store.set_value(wp.raw_scale, random_tensor(&[c], -0.5, 1.5, seed + 3))?;
            store.set_value(wp.shift, random_tensor(&[c], -1.0, 1.0, seed + 4))?;
            let r = projected(&store, &[], seed, &CheckConfig::default(), |t, s, _| wp.kernel(t, s))?;
            out.push(format!("{tag}_kernel"), PRIMITIVE_TOL, r);
            let x = random_tensor(&[2, c, 6, 7], -1.0, 1.0, seed);
            let r = projected(&store, &[x], seed, &CheckConfig::default(), |t, s, v| t.cwt_filter(v[0], &wp, s))?;
            out.push(format!("{tag}_cwt"), PRIMITIVE_TOL, r);
        }
    }

    for (h, w) in [(4, 4), (6, 5), (3, 6)] {
        for seed in SEEDS {
            let mut store = f64_store();
            let fw = FourierWeights::new(&mut store, &mut rng(seed), "fw", 2, h, w);
            let wh = w / 2 + 1;
            store.set_value(fw.real, random_tensor(&[2, h, wh], -1.0, 1.0, seed + 5))?;
            store.set_value(fw.imag, random_tensor(&[2, h, wh], -1.0, 1.0, seed + 6))?;
            let x = random_tensor(&[2, 2, h, w], -1.0, 1.0, seed);
            let r = projected(&store, &[x], seed, &CheckConfig::default(), |t, s, v| fw.forward(t, s, v[0]))?;
            out.push("fourier_modulation", PRIMITIVE_TOL, r);
        }
    }
    Ok(out.0)
}

/// Spreads every bias over [-0.3, 0.3] so ReLU inputs are not exactly zero.
pub fn jitter_biases(store: &mut ParamStore, prefix: &str, seed: u64) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && p.name.ends_with("bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(&shape, -0.3, 0.3, seed + id.index() as u64))?;
    }
    Ok(())
}

fn acfa() -> Result<Vec<Case>> {
    let mut out = Cases(Vec::new());
    for order in [GateOrder::Sequential, GateOrder::Parallel] {
        let mut store = f64_store();
        let mut cfg = AcfaConfig::new(8, 6, 6);
        cfg.gate_order = order;
        let s = AcfaState::new(&mut store, &mut rng(5), "acfa", cfg)?;
        let x = random_tensor(&[1, 8, 6, 6], -1.0, 1.0, 5);
        let r = projected(&store, &[x], 5, &CheckConfig::default(), |t, st, v| s.forward(t, st, v[0]))?;
        let tag = match order {
            GateOrder::Sequential => "sequential",
            GateOrder::Parallel => "parallel",
        };
        out.push(format!("acfa_{tag}"), COMPOSITE_TOL, r);
    }
    Ok(out.0)
}

fn tffa() -> Result<Vec<Case>> {
    let mut store = f64_store();
    let s = TffaState::new(&mut store, &mut rng(6), "tffa", TffaConfig::new(4, 8, 8))?;
    for wp in [&s.dog, &s.mexican_hat].into_iter().flatten() {
        store.set_value(wp.shift, random_tensor(&[4], -0.5, 0.5, wp.shift.index() as u64))?;
    }
    if let Some(fw) = &s.fourier {
        for id in [fw.real, fw.imag] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, random_tensor(&shape, -1.0, 1.0, id.index() as u64))?;
        }
    }
    let x = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, 6);
    let r = projected(&store, &[x], 6, &CheckConfig::default(), |t, st, v| s.forward(t, st, v[0]))?;
    Ok(vec![Case {
        name: "tffa".into(),
        tol: COMPOSITE_TOL,
        report: r,
    }])
}

fn smmm() -> Result<Vec<Case>> {
    let mut store = f64_store();
    let s = SmmmState::new(&mut store, &mut rng(7), "smmm", SmmmConfig::new(4, 6, 6))?;
    jitter_biases(&mut store, "smmm", 7)?;
    let e = random_tensor(&[1, 4, 6, 6], -1.0, 1.0, 7);
    let d = random_tensor(&[1, 4, 6, 6], -1.0, 1.0, 8);
    let r = projected(&store, &[e, d], 7, &CheckConfig::default(), |t, st, v| s.forward(t, st, v[0], v[1]))?;
    Ok(vec![Case {
        name: "smmm".into(),
        tol: COMPOSITE_TOL,
        report: r,
    }])
}

/// Width 8 at 32x32, batch 1, three sampled entries per tensor.
pub fn small_net_config() -> NetConfig {
    NetConfig {
        height: 32,
        width: 32,
        encoder_channels: vec![8, 8, 8, 8],
        ..NetConfig::default()
    }
}

fn net() -> Result<Vec<Case>> {
    let (net, mut store) = SegNet::new(small_net_config(), DType::F64)?;
    jitter_biases(&mut store, "", 3)?;
    let x = random_tensor(&[1, 1, 32, 32], 0.0, 1.0, 4);
    let mask = Tensor::from_fn(&[1, 1, 32, 32], DType::F64, |i| {
        let (y, x) = ((i / 32) as f64 - 16.0, (i % 32) as f64 - 16.0);
        (y * y + x * x <= 64.0) as u8 as f64
    })?;
    let cfg = CheckConfig {
        samples_per_tensor: Some(3),
        seed: 1,
        ..CheckConfig::default()
    };
    let r = check_gradients(
        &store,
        &[x],
        |tape, store, v| {
            let logits = net.forward(tape, store, v[0])?;
            let t = tape.constant(mask.clone());
            net.loss(tape, logits, t)
        },
        &cfg,
    )?;
    Ok(vec![Case {
        name: "net".into(),
        tol: COMPOSITE_TOL,
        report: r,
    }])
}
