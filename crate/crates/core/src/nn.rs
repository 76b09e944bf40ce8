//! Parameterized layers built from tape ops.

use rand::Rng;

use crate::autograd::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops::{Axes, Conv1dSpec, Axis1d, Conv2dSpec, ReduceKind, NORM_EPS};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        let [o, i, kh, kw] = spec.weight_shape();
        let weight = store.add(
            format!("{name}.weight"),
            &[o, i, kh, kw],
            Init::Kaiming { fan_in: i * kh * kw },
            rng,
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), &[o], Init::Constant(0.0), rng));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        let w = store.value(self.weight).zeros_like();
        store.set_value(self.weight, w)?;
        if let Some(b) = self.bias {
            let z = store.value(b).zeros_like();
            store.set_value(b, z)?;
        }
        Ok(())
    }

    /// Makes the layer an identity map: centre tap 1 on the channel diagonal,
    /// zero bias. Needs `in_ch == out_ch` and odd kernel dims.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let s = self.spec;
        if s.in_ch != s.out_ch || s.kernel.0 % 2 == 0 || s.kernel.1 % 2 == 0 {
            return Err(shape_err("identity needs in == out and odd kernel"));
        }
        let [o, i, kh, kw] = s.weight_shape();
        let cg = s.in_ch / s.groups;
        let mut data = vec![0.0; o * i * kh * kw];
        for oc in 0..o {
            let icg = oc % cg;
            data[((oc * i + icg) * kh + kh / 2) * kw + kw / 2] = 1.0;
        }
        store.set_value(self.weight, Tensor::new(&[o, i, kh, kw], data, store.dtype())?)?;
        self.zero_bias(store)
    }

    pub fn zero_bias(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(b) = self.bias {
            let z = store.value(b).zeros_like();
            store.set_value(b, z)?;
        }
        Ok(())
    }
}

/// Convolution along one spatial axis.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub axis: Axis1d,
    pub inner: Conv2d,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: Conv1dSpec,
        axis: Axis1d,
    ) -> Result<Self> {
        Ok(Self {
            axis,
            inner: Conv2d::new(store, rng, name, spec.along(axis))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.inner.forward(tape, store, x)
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng),
            beta: store.add(format!("{name}.beta"), &[channels], Init::Constant(0.0), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let dtype = store.dtype();
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Constant(1.0), rng),
            beta: store.add(format!("{name}.beta"), &[channels], Init::Constant(0.0), rng),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels], dtype)?),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels], dtype)?),
            momentum: 0.1,
        })
    }

    /// Training tapes normalize with batch statistics and queue running-stat
    /// updates; evaluation tapes use the running statistics.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let rm = store.value(self.running_mean);
        let rv = store.value(self.running_var);
        if !tape.is_training() {
            return tape.batch_norm_eval(x, g, b, rm.data(), rv.data(), NORM_EPS);
        }
        let (y, stats) = tape.batch_norm_train(x, g, b, NORM_EPS)?;
        let m = self.momentum;
        let blend = |old: &Tensor, new: &[f64]| {
            let data = old.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect();
            Tensor::new(old.shape(), data, old.dtype())
        };
        tape.queue_buffer_update(self.running_mean, blend(rm, &stats.mean)?);
        tape.queue_buffer_update(self.running_var, blend(rv, &stats.var_unbiased)?);
        Ok(y)
    }
}

/// Channel attention: `x * sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))` with a
/// shared two-layer pointwise bottleneck.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

pub const GATE_REDUCTION: usize = 4;

impl ChannelGate {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 {
            return Err(shape_err("channel gate needs at least 2 channels"));
        }
        let hidden = (channels / GATE_REDUCTION).max(1);
        Ok(Self {
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), Conv2dSpec::pointwise(channels, hidden))?,
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), Conv2dSpec::pointwise(hidden, channels))?,
        })
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, d: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, d)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }

    /// Gate of shape (B, C, 1, 1) with entries in (0, 1).
    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let avg = tape.reduce(x, ReduceKind::Mean, Axes::Spatial)?;
        let max = tape.reduce(x, ReduceKind::Max, Axes::Spatial)?;
        let a = self.mlp(tape, store, avg)?;
        let m = self.mlp(tape, store, max)?;
        let s = tape.add(a, m)?;
        tape.sigmoid(s)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = self.gate(tape, store, x)?;
        tape.tap("channel_gate", g);
        tape.mul(x, g)
    }
}

/// Spatial attention: `x * sigmoid(conv7x7([mean_c(x), max_c(x)]))`.
#[derive(Debug, Clone)]
pub struct SpatialGate {
    pub conv: Conv2d,
}

impl SpatialGate {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), Conv2dSpec::same(2, 1, 7))?,
        })
    }

    /// The 2-channel descriptor: per-pixel channel mean and channel max.
    pub fn descriptor(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mean = tape.reduce(x, ReduceKind::Mean, Axes::Channel)?;
        let max = tape.reduce(x, ReduceKind::Max, Axes::Channel)?;
        tape.concat_channels(&[mean, max])
    }

    /// Gate of shape (B, 1, H, W) with entries in (0, 1).
    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = self.descriptor(tape, x)?;
        let s = self.conv.forward(tape, store, d)?;
        tape.sigmoid(s)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = self.gate(tape, store, x)?;
        tape.tap("spatial_gate", g);
        tape.mul(x, g)
    }
}

/// Float64 store with a fixed seed, used by tests and the gradient checker.
pub fn f64_store() -> ParamStore {
    ParamStore::new(DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (f64_store(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn channel_gate_zero_output_layer_halves() {
        let (mut store, mut rng) = setup();
        let cg = ChannelGate::new(&mut store, &mut rng, "cg", 8).unwrap();
        cg.fc2.zero(&mut store).unwrap();
        let xt = random_tensor(&[2, 8, 16, 16], -1.0, 1.0, 3);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let y = cg.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
        let half = xt.map(|v| v * 0.5);
        assert!(tape.value(y).max_abs_diff(&half) == 0.0);
    }

    #[test]
    fn channel_gate_ignores_pixel_order() {
        let (mut store, mut rng) = setup();
        let cg = ChannelGate::new(&mut store, &mut rng, "cg", 8).unwrap();
        let xt = random_tensor(&[1, 8, 4, 4], -1.0, 1.0, 5);
        // reverse the pixel order of every channel plane
        let rev = Tensor::from_fn(&[1, 8, 4, 4], DType::F64, |i| {
            let (c, p) = (i / 16, i % 16);
            xt.data()[c * 16 + (15 - p)]
        })
        .unwrap();
        let mut tape = Tape::eval();
        let a = tape.constant(xt);
        let b = tape.constant(rev);
        let ga = cg.gate(&mut tape, &store, a).unwrap();
        let gb = cg.gate(&mut tape, &store, b).unwrap();
        assert!(tape.value(ga).max_abs_diff(tape.value(gb)) < 1e-15);
    }

    #[test]
    fn spatial_gate_zero_conv_halves() {
        let (mut store, mut rng) = setup();
        let sg = SpatialGate::new(&mut store, &mut rng, "sg").unwrap();
        sg.conv.zero(&mut store).unwrap();
        let xt = random_tensor(&[2, 8, 16, 16], -1.0, 1.0, 4);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let y = sg.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).max_abs_diff(&xt.map(|v| v * 0.5)), 0.0);
    }

    #[test]
    fn spatial_descriptor_ignores_channel_order() {
        let (mut store, mut rng) = setup();
        let sg = SpatialGate::new(&mut store, &mut rng, "sg").unwrap();
        let xt = random_tensor(&[1, 4, 5, 5], -1.0, 1.0, 8);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn(&[1, 4, 5, 5], DType::F64, |i| {
            let (c, p) = (i / 25, i % 25);
            xt.data()[perm[c] * 25 + p]
        })
        .unwrap();
        let mut tape = Tape::eval();
        let a = tape.constant(xt);
        let b = tape.constant(xp);
        let da = sg.descriptor(&mut tape, a).unwrap();
        let db = sg.descriptor(&mut tape, b).unwrap();
        // the mean may differ in the last ulp because summation order changes
        assert!(tape.value(da).max_abs_diff(tape.value(db)) < 1e-15);
    }

    #[test]
    fn gates_never_amplify() {
        let (mut store, mut rng) = setup();
        let cg = ChannelGate::new(&mut store, &mut rng, "cg", 8).unwrap();
        let sg = SpatialGate::new(&mut store, &mut rng, "sg").unwrap();
        let xt = random_tensor(&[2, 8, 9, 9], -3.0, 3.0, 11);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let a = cg.forward(&mut tape, &store, x).unwrap();
        let b = sg.forward(&mut tape, &store, x).unwrap();
        for y in [a, b] {
            for (o, i) in tape.value(y).data().iter().zip(xt.data()) {
                assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn identity_conv() {
        let (mut store, mut rng) = setup();
        let dw = Conv2d::new(&mut store, &mut rng, "dw", Conv2dSpec::depthwise(4, 3)).unwrap();
        dw.set_identity(&mut store).unwrap();
        let xt = random_tensor(&[1, 4, 5, 5], -1.0, 1.0, 1);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let y = dw.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let (mut store, mut rng) = setup();
        let bn = BatchNorm2d::new(&mut store, &mut rng, "bn", 1).unwrap();
        let mut tape = Tape::train();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0], DType::F64).unwrap());
        bn.forward(&mut tape, &store, x).unwrap();
        tape.apply_buffer_updates(&mut store).unwrap();
        assert!((store.value(bn.running_mean).item() - 0.1).abs() < 1e-15);
        assert!((store.value(bn.running_var).item() - (0.9 + 0.2)).abs() < 1e-15);
    }
}
