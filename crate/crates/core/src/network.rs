//! Toy convolutional encoder with the attention decoder, segmentation head,
//! composite Dice + cross-entropy loss and a training step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acfa::{AcfaConfig, AcfaState, GateOrder};
use crate::autograd::{ParamStore, Tape, Var};
use crate::config::{parse_list, parse_value, KvFile};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::ops::{Activation, Conv2dSpec};
use crate::optim::AdamW;
use crate::smmm::{SmmmConfig, SmmmState};
use crate::tensor::{DType, Tensor};
use crate::tffa::{TffaConfig, TffaState};

/// Order of the two attention blocks that follow skip fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderOrder {
    AcfaTffa,
    TffaAcfa,
}

impl DecoderOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderOrder::AcfaTffa => "smmm-acfa-tffa",
            DecoderOrder::TffaAcfa => "smmm-tffa-acfa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smmm-acfa-tffa" | "acfa-tffa" => Ok(DecoderOrder::AcfaTffa),
            "smmm-tffa-acfa" | "tffa-acfa" => Ok(DecoderOrder::TffaAcfa),
            _ => Err(Error::Config(format!("unknown decoder order `{s}`"))),
        }
    }
}

fn gate_order_str(g: GateOrder) -> &'static str {
    match g {
        GateOrder::Sequential => "sequential",
        GateOrder::Parallel => "parallel",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub use_acfa: bool,
    pub use_tffa: bool,
    pub use_smmm: bool,
    pub order: DecoderOrder,
    pub gate_order: GateOrder,
    pub fourier: bool,
    pub mexican_hat: bool,
    pub dog: bool,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 64,
            width: 64,
            encoder_channels: vec![16, 32, 64, 128],
            num_classes: 1,
            use_acfa: true,
            use_tffa: true,
            use_smmm: true,
            order: DecoderOrder::AcfaTffa,
            gate_order: GateOrder::Sequential,
            fourier: true,
            mexican_hat: true,
            dog: true,
            dice_weight: 0.5,
            ce_weight: 0.5,
            seed: 0,
        }
    }
}

/// Keys understood by [`NetConfig::apply`].
pub const NET_KEYS: &[&str] = &[
    "model.in_channels",
    "model.height",
    "model.width",
    "model.encoder_channels",
    "model.num_classes",
    "model.use_acfa",
    "model.use_tffa",
    "model.use_smmm",
    "decoder.order",
    "acfa.gate_order",
    "tffa.fourier",
    "tffa.mexican_hat",
    "tffa.dog",
    "loss.dice_weight",
    "loss.ce_weight",
    "seed",
];

impl NetConfig {
    /// Baseline decoder: every attention module switched off.
    pub fn baseline() -> Self {
        Self {
            use_acfa: false,
            use_tffa: false,
            use_smmm: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::BadSpec(format!("input channels must be 1 or 3, got {}", self.in_channels)));
        }
        for (what, v) in [("height", self.height), ("width", self.width)] {
            if v < 32 || !v.is_power_of_two() {
                return Err(Error::BadSpec(format!("{what} must be a power of two >= 32, got {v}")));
            }
        }
        if self.encoder_channels.len() < 2 {
            return Err(Error::BadSpec("need at least two encoder stages".into()));
        }
        if let Some(&c) = self.encoder_channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::IndivisibleChannels(c));
        }
        let down = 1 << (self.encoder_channels.len() - 1);
        if self.height / down < 2 || self.width / down < 2 {
            return Err(Error::BadSpec("too many encoder stages for the input size".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::BadSpec("num_classes must be at least 1".into()));
        }
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0) {
            return Err(Error::BadSpec("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Spatial size (H, W) at encoder stage `level`.
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Sets one key; returns false for keys this config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.in_channels" => self.in_channels = parse_value(key, value)?,
            "model.height" => self.height = parse_value(key, value)?,
            "model.width" => self.width = parse_value(key, value)?,
            "model.encoder_channels" => self.encoder_channels = parse_list(key, value)?,
            "model.num_classes" => self.num_classes = parse_value(key, value)?,
            "model.use_acfa" => self.use_acfa = parse_value(key, value)?,
            "model.use_tffa" => self.use_tffa = parse_value(key, value)?,
            "model.use_smmm" => self.use_smmm = parse_value(key, value)?,
            "decoder.order" => self.order = DecoderOrder::parse(value)?,
            "acfa.gate_order" => {
                self.gate_order = match value {
                    "sequential" => GateOrder::Sequential,
                    "parallel" => GateOrder::Parallel,
                    _ => return Err(Error::Config(format!("unknown gate order `{value}`"))),
                }
            }
            "tffa.fourier" => self.fourier = parse_value(key, value)?,
            "tffa.mexican_hat" => self.mexican_hat = parse_value(key, value)?,
            "tffa.dog" => self.dog = parse_value(key, value)?,
            "loss.dice_weight" => self.dice_weight = parse_value(key, value)?,
            "loss.ce_weight" => self.ce_weight = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let channels: Vec<String> = self.encoder_channels.iter().map(|c| c.to_string()).collect();
        kv.set("model.in_channels", self.in_channels.to_string());
        kv.set("model.height", self.height.to_string());
        kv.set("model.width", self.width.to_string());
        kv.set("model.encoder_channels", channels.join(","));
        kv.set("model.num_classes", self.num_classes.to_string());
        kv.set("model.use_acfa", self.use_acfa.to_string());
        kv.set("model.use_tffa", self.use_tffa.to_string());
        kv.set("model.use_smmm", self.use_smmm.to_string());
        kv.set("decoder.order", self.order.as_str());
        kv.set("acfa.gate_order", gate_order_str(self.gate_order));
        kv.set("tffa.fourier", self.fourier.to_string());
        kv.set("tffa.mexican_hat", self.mexican_hat.to_string());
        kv.set("tffa.dog", self.dog.to_string());
        kv.set("loss.dice_weight", self.dice_weight.to_string());
        kv.set("loss.ce_weight", self.ce_weight.to_string());
        kv.set("seed", self.seed.to_string());
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv.iter() {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(cfg)
    }

    /// Training target for a binary mask: the mask itself for a sigmoid
    /// head, a one-hot background/foreground split otherwise.
    pub fn target_from_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = mask.dims4()?;
        if c != 1 {
            return Err(shape_err(format!("mask must have one channel, got {c}")));
        }
        if self.num_classes == 1 {
            return Ok(mask.clone());
        }
        let k = self.num_classes;
        let hw = h * w;
        let m = mask.data();
        Tensor::from_fn(&[b, k, h, w], mask.dtype(), |i| {
            let (bi, ch, p) = (i / (k * hw), (i / hw) % k, i % hw);
            let fg = m[bi * hw + p];
            match ch {
                0 => 1.0 - fg,
                1 => fg,
                _ => 0.0,
            }
        })
    }
}

/// 3x3 convolution without bias, batch norm, GELU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ConvBnAct {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: Conv2dSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), spec.without_bias())?,
            norm: BatchNorm2d::new(store, rng, &format!("{name}.bn"), spec.out_ch)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        tape.activation(y, Activation::Gelu)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub first: ConvBnAct,
    pub second: ConvBnAct,
}

/// One decoder level: upsample and project the deeper features, optional
/// SMMM skip fusion, optional ACFA and TFFA, then a refine conv over the
/// concatenation with the skip.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub level: usize,
    pub up: Conv2d,
    pub smmm: Option<SmmmState>,
    pub acfa: Option<AcfaState>,
    pub tffa: Option<TffaState>,
    pub refine: ConvBnAct,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub config: NetConfig,
    pub encoder: Vec<EncoderStage>,
    /// Deepest level first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

/// Module groups used for parameter and MAC accounting.
pub const MODULES: &[&str] = &["encoder", "upsample", "smmm", "acfa", "tffa", "refine", "head"];

fn module_of(path: &str) -> &'static str {
    let mut parts = path.split('.');
    let first = parts.next().unwrap_or("");
    if first.starts_with("decoder") {
        match parts.next().unwrap_or("") {
            "up" => "upsample",
            "smmm" => "smmm",
            "acfa" => "acfa",
            "tffa" => "tffa",
            _ => "refine",
        }
    } else if first == "head" {
        "head"
    } else {
        "encoder"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub module: &'static str,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub params: usize,
    pub macs: u64,
}

impl CostReport {
    pub fn row(&self, module: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.module == module)
    }
}

impl SegNet {
    /// Builds the network and its parameters, drawn from a generator seeded
    /// with `config.seed`.
    pub fn new(config: NetConfig, dtype: DType) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let chans = config.encoder_channels.clone();
        let mut encoder = Vec::with_capacity(chans.len());
        for (i, &c) in chans.iter().enumerate() {
            let name = format!("encoder.stage{i}");
            let first = if i == 0 {
                Conv2dSpec::same(config.in_channels, c, 3)
            } else {
                Conv2dSpec::same(chans[i - 1], c, 3).strided(2)
            };
            encoder.push(EncoderStage {
                first: ConvBnAct::new(&mut store, &mut rng, &format!("{name}.conv1"), first)?,
                second: ConvBnAct::new(&mut store, &mut rng, &format!("{name}.conv2"), Conv2dSpec::same(c, c, 3))?,
            });
        }
        let mut decoder = Vec::with_capacity(chans.len() - 1);
        for level in (0..chans.len() - 1).rev() {
            let c = chans[level];
            let (h, w) = config.resolution(level);
            let name = format!("decoder{level}");
            let n = |s: &str| format!("{name}.{s}");
            let up = Conv2d::new(&mut store, &mut rng, &n("up"), Conv2dSpec::pointwise(chans[level + 1], c))?;
            let smmm = config
                .use_smmm
                .then(|| SmmmState::new(&mut store, &mut rng, &n("smmm"), SmmmConfig::new(c, h, w)))
                .transpose()?;
            let acfa_cfg = AcfaConfig {
                gate_order: config.gate_order,
                ..AcfaConfig::new(c, h, w)
            };
            let tffa_cfg = TffaConfig {
                fourier: config.fourier,
                mexican_hat: config.mexican_hat,
                dog: config.dog,
                ..TffaConfig::new(c, h, w)
            };
            let build_acfa = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                config
                    .use_acfa
                    .then(|| AcfaState::new(store, rng, &n("acfa"), acfa_cfg))
                    .transpose()
            };
            let build_tffa = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                config
                    .use_tffa
                    .then(|| TffaState::new(store, rng, &n("tffa"), tffa_cfg))
                    .transpose()
            };
            let (acfa, tffa) = match config.order {
                DecoderOrder::AcfaTffa => {
                    let a = build_acfa(&mut store, &mut rng)?;
                    (a, build_tffa(&mut store, &mut rng)?)
                }
                DecoderOrder::TffaAcfa => {
                    let f = build_tffa(&mut store, &mut rng)?;
                    (build_acfa(&mut store, &mut rng)?, f)
                }
            };
            let refine = ConvBnAct::new(&mut store, &mut rng, &n("refine"), Conv2dSpec::same(2 * c, c, 3))?;
            decoder.push(DecoderStage {
                level,
                up,
                smmm,
                acfa,
                tffa,
                refine,
            });
        }
        let head = Conv2d::new(&mut store, &mut rng, "head", Conv2dSpec::pointwise(chans[0], config.num_classes))?;
        Ok((
            Self {
                config,
                encoder,
                decoder,
                head,
            },
            store,
        ))
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.in_channels, cfg.height, cfg.width) {
            return Err(shape_err(format!(
                "network expects (B, {}, {}, {}), got {:?}",
                cfg.in_channels,
                cfg.height,
                cfg.width,
                tape.value(x).shape()
            )));
        }
        Ok(())
    }

    fn scoped<T>(tape: &mut Tape, name: &str, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
        tape.push_scope(name);
        let out = f(tape);
        tape.pop_scope();
        out
    }

    /// Logits of shape (B, num_classes, H, W).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            y = Self::scoped(tape, &format!("encoder.stage{i}"), |t| {
                let a = stage.first.forward(t, store, y)?;
                stage.second.forward(t, store, a)
            })?;
            skips.push(y);
        }
        for stage in &self.decoder {
            y = self.decode(tape, store, stage, skips[stage.level], y)?;
        }
        Self::scoped(tape, "head", |t| self.head.forward(t, store, y))
    }

    fn decode(&self, tape: &mut Tape, store: &ParamStore, stage: &DecoderStage, skip: Var, deep: Var) -> Result<Var> {
        let name = format!("decoder{}", stage.level);
        tape.push_scope(name);
        let out = (|| {
            let mut z = Self::scoped(tape, "up", |t| {
                let u = t.upsample_bilinear2x(deep)?;
                stage.up.forward(t, store, u)
            })?;
            if let Some(m) = &stage.smmm {
                z = Self::scoped(tape, "smmm", |t| m.forward(t, store, skip, z))?;
            }
            let run_acfa = |tape: &mut Tape, z: Var| match &stage.acfa {
                Some(a) => Self::scoped(tape, "acfa", |t| a.forward(t, store, z)),
                None => Ok(z),
            };
            let run_tffa = |tape: &mut Tape, z: Var| match &stage.tffa {
                Some(f) => Self::scoped(tape, "tffa", |t| f.forward(t, store, z)),
                None => Ok(z),
            };
            z = match self.config.order {
                DecoderOrder::AcfaTffa => {
                    let z = run_acfa(tape, z)?;
                    run_tffa(tape, z)?
                }
                DecoderOrder::TffaAcfa => {
                    let z = run_tffa(tape, z)?;
                    run_acfa(tape, z)?
                }
            };
            Self::scoped(tape, "refine", |t| {
                let cat = t.concat_channels(&[skip, z])?;
                stage.refine.forward(t, store, cat)
            })
        })();
        tape.pop_scope();
        out
    }

    /// `dice_weight * (1 - softDice) + ce_weight * CE`, with soft Dice pooled
    /// over the whole batch and smoothing 1.
    pub fn loss(&self, tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
        let (z, t) = (tape.value(logits), tape.value(target));
        if z.shape() != t.shape() {
            return Err(shape_err(format!("logits {:?} vs target {:?}", z.shape(), t.shape())));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryTarget);
        }
        let (p, ce) = if self.config.num_classes == 1 {
            (tape.sigmoid(logits)?, tape.bce_with_logits(logits, target)?)
        } else {
            (tape.softmax(logits, 1)?, tape.cross_entropy_with_logits(logits, target)?)
        };
        let dice = soft_dice(tape, p, target)?;
        let dice_loss = tape.affine_scalar(dice, -self.config.dice_weight, self.config.dice_weight)?;
        let ce = tape.scale(ce, self.config.ce_weight)?;
        tape.add(dice_loss, ce)
    }

    /// Binary prediction (B, 1, H, W): logit > 0 for a sigmoid head, argmax
    /// not background otherwise.
    pub fn predict_mask(&self, logits: &Tensor) -> Result<Tensor> {
        let [b, k, h, w] = logits.dims4()?;
        let hw = h * w;
        let z = logits.data();
        Tensor::from_fn(&[b, 1, h, w], DType::F64, |i| {
            let (bi, p) = (i / hw, i % hw);
            let at = |c: usize| z[(bi * k + c) * hw + p];
            let fg = if k == 1 {
                at(0) > 0.0
            } else {
                let best = (1..k).fold(0, |m, c| if at(c) > at(m) { c } else { m });
                best != 0
            };
            fg as u8 as f64
        })
    }

    /// Evaluation-mode logits for a batch of images.
    pub fn infer(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::eval();
        let x = tape.constant(images.to_dtype(store.dtype()));
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    /// One forward/backward/AdamW update on a batch; returns the loss.
    pub fn train_step(&self, store: &mut ParamStore, opt: &mut AdamW, images: &Tensor, masks: &Tensor) -> Result<f64> {
        let mut tape = Tape::train();
        let x = tape.constant(images.to_dtype(store.dtype()));
        let t = tape.constant(self.config.target_from_mask(masks)?.to_dtype(store.dtype()));
        let logits = self.forward(&mut tape, store, x)?;
        let loss = self.loss(&mut tape, logits, t)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: opt.steps() });
        }
        store.zero_grad();
        tape.backward(loss, store)?;
        tape.apply_buffer_updates(store)?;
        opt.step(store);
        Ok(value)
    }

    /// Parameter counts by name prefix and analytic MACs by scope, from one
    /// evaluation-mode pass on a single zero image.
    pub fn cost(&self, store: &ParamStore) -> Result<CostReport> {
        let cfg = &self.config;
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros(&[1, cfg.in_channels, cfg.height, cfg.width], store.dtype())?);
        self.forward(&mut tape, store, x)?;
        let rows = MODULES
            .iter()
            .map(|&m| CostRow {
                module: m,
                params: store.count_where(|n| module_of(n) == m),
                macs: tape.macs().iter().filter(|(k, _)| module_of(k) == m).map(|(_, v)| v).sum(),
            })
            .collect();
        Ok(CostReport {
            rows,
            params: store.count(),
            macs: tape.total_macs(),
        })
    }
}

/// `(2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`.
pub fn soft_dice(tape: &mut Tape, p: Var, t: Var) -> Result<Var> {
    let pt = tape.mul(p, t)?;
    let inter = tape.sum_all(pt)?;
    let num = tape.affine_scalar(inter, 2.0, 1.0)?;
    let sp = tape.sum_all(p)?;
    let st = tape.sum_all(t)?;
    let den = tape.add(sp, st)?;
    let den = tape.affine_scalar(den, 1.0, 1.0)?;
    tape.div(num, den)
}
