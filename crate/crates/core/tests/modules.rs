mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdec::acfa::{AcfaConfig, AcfaState};
use segdec::gradcheck::{project, random_tensor};
use segdec::nn::{f64_store, Conv2d};
use segdec::smmm::{MultiScale, SmmmConfig, SmmmState};
use segdec::tffa::{TffaConfig, TffaState};
use segdec::{DType, Error, ParamStore, Tape, Tensor};

use common::naive_conv;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fill(store: &mut ParamStore, id: segdec::ParamId, v: f64) {
    let t = store.value(id).map(|_| v);
    store.set_value(id, t).unwrap();
}

/// LayerNorm over channels per position, identity affine.
fn layer_norm_oracle(x: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = x.dims4().unwrap();
    let mut out = vec![0.0; x.numel()];
    for n in 0..b {
        for p in 0..h * w {
            let idx = |ch: usize| (n * c + ch) * h * w + p;
            let mean = (0..c).map(|ch| x.data()[idx(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x.data()[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[idx(ch)] = (x.data()[idx(ch)] - mean) / (var + 1e-5).sqrt();
            }
        }
    }
    out
}

// ---------------------------------------------------------------- ACFA

fn acfa_identity(store: &mut ParamStore, s: &AcfaState) {
    for conv in [&s.channel_gate.fc1, &s.channel_gate.fc2, &s.spatial_gate.conv] {
        conv.zero(store).unwrap();
    }
    for id in [s.t_hw, s.t_h, s.t_w] {
        fill(store, id, 1.0);
    }
    for conv in [&s.hw_point, &s.hw_depth, &s.ctx_depth, &s.ctx_point, &s.fuse] {
        conv.set_identity(store).unwrap();
    }
    for conv in [&s.h_point, &s.h_depth, &s.w_point, &s.w_depth] {
        conv.inner.set_identity(store).unwrap();
    }
}

#[test]
fn acfa_preserves_shape() {
    let mut store = ParamStore::new(DType::F32);
    let s = AcfaState::new(&mut store, &mut rng(0), "acfa", AcfaConfig::new(16, 32, 32)).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(random_tensor(&[2, 16, 32, 32], -1.0, 1.0, 0).to_dtype(DType::F32));
    let y = s.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 16, 32, 32]);
}

#[test]
fn acfa_identity_configuration() {
    let mut store = f64_store();
    let mut cfg = AcfaConfig::new(8, 6, 6);
    cfg.bypass_activations = true;
    let s = AcfaState::new(&mut store, &mut rng(1), "acfa", cfg).unwrap();
    acfa_identity(&mut store, &s);
    let xt = random_tensor(&[2, 8, 6, 6], -2.0, 2.0, 5);
    let quarter = xt.map(|v| v / 4.0);
    let want = layer_norm_oracle(&quarter);
    let mut tape = Tape::eval();
    let x = tape.constant(xt);
    let y = s.forward(&mut tape, &store, x).unwrap();
    for (g, e) in tape.value(y).data().iter().zip(&want) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }

    let (d_hw, d_h, d_w) = s.directional_maps(&mut tape, &store).unwrap();
    assert_eq!(tape.value(d_hw).shape(), &[1, 2, 6, 6]);
    assert_eq!(tape.value(d_h).shape(), &[1, 2, 6, 1]);
    assert_eq!(tape.value(d_w).shape(), &[1, 2, 1, 6]);
    for (d, t) in [(d_hw, s.t_hw), (d_h, s.t_h), (d_w, s.t_w)] {
        // zero padding at the borders of the depthwise kernel leaves the
        // identity tap alone, so the raw tensor passes through
        assert!(tape.value(d).max_abs_diff(store.value(t)) < 1e-15);
    }
}

#[test]
fn acfa_directional_identity_with_random_tensors() {
    let mut store = f64_store();
    let mut cfg = AcfaConfig::new(8, 5, 7);
    cfg.bypass_activations = true;
    let s = AcfaState::new(&mut store, &mut rng(2), "acfa", cfg).unwrap();
    acfa_identity(&mut store, &s);
    for (i, id) in [s.t_hw, s.t_h, s.t_w].into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(&shape, 0.0, 1.0, i as u64)).unwrap();
    }
    let mut tape = Tape::eval();
    let (d_hw, d_h, d_w) = s.directional_maps(&mut tape, &store).unwrap();
    for (d, t) in [(d_hw, s.t_hw), (d_h, s.t_h), (d_w, s.t_w)] {
        assert_eq!(tape.value(d).data(), store.value(t).data());
    }
}

#[test]
fn acfa_rejects_wrong_resolution() {
    let mut store = f64_store();
    let s = AcfaState::new(&mut store, &mut rng(0), "acfa", AcfaConfig::new(16, 32, 32)).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::zeros(&[2, 16, 16, 16], DType::F64).unwrap());
    assert!(matches!(
        s.forward(&mut tape, &store, x),
        Err(Error::ResolutionMismatch {
            expected: (16, 32, 32),
            got: (16, 16, 16)
        })
    ));
    assert!(matches!(
        AcfaState::new(&mut store, &mut rng(0), "bad", AcfaConfig::new(6, 8, 8)),
        Err(Error::IndivisibleChannels(6))
    ));
}

#[test]
fn acfa_directional_tensors_receive_gradient() {
    let mut store = f64_store();
    let s = AcfaState::new(&mut store, &mut rng(3), "acfa", AcfaConfig::new(8, 8, 8)).unwrap();
    let mut tape = Tape::train();
    let x = tape.constant(random_tensor(&[2, 8, 8, 8], -1.0, 1.0, 3));
    let y = s.forward(&mut tape, &store, x).unwrap();
    let l = project(&mut tape, y, 3).unwrap();
    tape.backward(l, &mut store).unwrap();
    for id in [s.t_hw, s.t_h, s.t_w] {
        assert!(store.grad(id).max_abs() > 0.0, "{}", store.get(id).name);
    }
    // the H-direction map is shared by every column
    let mut tape = Tape::eval();
    let (_, d_h, _) = s.directional_maps(&mut tape, &store).unwrap();
    let ones = tape.constant(Tensor::ones(&[1, 2, 8, 8], DType::F64).unwrap());
    let b = tape.mul(ones, d_h).unwrap();
    let v = tape.value(b);
    for c in 0..2 {
        for r in 0..8 {
            assert_eq!(v.at([0, c, r, 0]), v.at([0, c, r, 5]));
        }
    }
}

#[test]
fn acfa_is_deterministic() {
    let mut store = f64_store();
    let s = AcfaState::new(&mut store, &mut rng(4), "acfa", AcfaConfig::new(8, 8, 8)).unwrap();
    let xt = random_tensor(&[2, 8, 8, 8], -1.0, 1.0, 4);
    let run = || {
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let y = s.forward(&mut tape, &store, x).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------- TFFA

#[test]
fn tffa_preserves_shape_and_gates_are_distributions() {
    let mut store = f64_store();
    let s = TffaState::new(&mut store, &mut rng(0), "tffa", TffaConfig::new(8, 16, 16)).unwrap();
    let mut tape = Tape::train();
    let x = tape.constant(random_tensor(&[2, 8, 16, 16], -1.0, 1.0, 0));
    let y = s.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    let out = s.branch_outputs(&mut tape, &store, x).unwrap();
    let g = tape.value(out.gates);
    assert_eq!(g.shape(), &[2, 3, 1, 1]);
    for b in 0..2 {
        let row: Vec<f64> = (0..3).map(|k| g.at([b, k, 0, 0])).collect();
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tffa_uniform_gates_average_branches() {
    let mut store = f64_store();
    let s = TffaState::new(&mut store, &mut rng(1), "tffa", TffaConfig::new(4, 8, 8)).unwrap();
    s.gate_out.zero(&mut store).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(random_tensor(&[2, 4, 8, 8], -1.0, 1.0, 1));
    let out = s.branch_outputs(&mut tape, &store, x).unwrap();
    let fused = s.fuse(&mut tape, &out).unwrap();
    let parts = [out.wavelet, out.fourier, out.spatial].map(|v| tape.value(v).clone());
    for (i, f) in tape.value(fused).data().iter().enumerate() {
        let mean = parts.iter().map(|p| p.data()[i]).sum::<f64>() / 3.0;
        assert!((f - mean).abs() < 1e-12);
    }
}

#[test]
fn tffa_spatial_only_identity_path() {
    let mut store = f64_store();
    let mut cfg = TffaConfig::new(4, 8, 8);
    cfg.fourier = false;
    cfg.dog = false;
    cfg.mexican_hat = false;
    cfg.bypass_activations = true;
    let s = TffaState::new(&mut store, &mut rng(2), "tffa", cfg).unwrap();
    s.spatial.set_identity(&mut store).unwrap();
    // eval normalization becomes exactly x / sqrt(var + eps) = x
    fill(&mut store, s.norm.running_var, 1.0 - 1e-5);
    let xt = random_tensor(&[2, 4, 8, 8], -1.0, 1.0, 2);
    let mut tape = Tape::eval();
    let x = tape.constant(xt.clone());
    let y = s.forward(&mut tape, &store, x).unwrap();
    assert!(tape.value(y).max_abs_diff(&xt) < 1e-12);
}

#[test]
fn tffa_disabled_fourier_is_zero_and_excluded() {
    let mut store = f64_store();
    let mut cfg = TffaConfig::new(4, 8, 8);
    cfg.fourier = false;
    let s = TffaState::new(&mut store, &mut rng(3), "tffa", cfg).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(random_tensor(&[3, 4, 8, 8], -1.0, 1.0, 3));
    let out = s.branch_outputs(&mut tape, &store, x).unwrap();
    assert!(tape.value(out.fourier).data().iter().all(|&v| v == 0.0));
    let g = tape.value(out.gates);
    for b in 0..3 {
        assert_eq!(g.at([b, 1, 0, 0]), 0.0);
        assert!((g.at([b, 0, 0, 0]) + g.at([b, 2, 0, 0]) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tffa_dog_component_ignores_constants() {
    let mut store = f64_store();
    let s = TffaState::new(&mut store, &mut rng(4), "tffa", TffaConfig::new(4, 8, 8)).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::full(&[1, 4, 8, 8], 2.0, DType::F64).unwrap());
    let d = s.dog_response(&mut tape, &store, x).unwrap().unwrap();
    assert!(tape.value(d).max_abs() < 1e-6 * 2.0);
}

#[test]
fn tffa_fourier_and_spatial_start_as_no_ops() {
    let mut store = f64_store();
    let s = TffaState::new(&mut store, &mut rng(5), "tffa", TffaConfig::new(4, 8, 8)).unwrap();
    s.spatial.set_identity(&mut store).unwrap();
    let xt = random_tensor(&[2, 4, 8, 8], -1.0, 1.0, 5);
    let mut tape = Tape::eval();
    let x = tape.constant(xt.clone());
    let out = s.branch_outputs(&mut tape, &store, x).unwrap();
    assert!(tape.value(out.fourier).max_abs_diff(&xt) < 1e-9);
    assert!(tape.value(out.spatial).max_abs_diff(&xt) < 1e-9);
}

#[test]
fn tffa_param_count_tracks_flags() {
    let (c, h, w) = (8, 16, 16);
    let count = |f: &dyn Fn(&mut TffaConfig)| {
        let mut cfg = TffaConfig::new(c, h, w);
        f(&mut cfg);
        let mut store = f64_store();
        let s = TffaState::new(&mut store, &mut rng(0), "tffa", cfg).unwrap();
        assert_eq!(s.param_count(&store), store.count());
        store.count()
    };
    let full = count(&|_| {});
    let fourier = 2 * c * h * (w / 2 + 1);
    let wavelet = 2 * c;
    let merge = 2 * c * c + c;
    assert_eq!(full - count(&|cfg| cfg.fourier = false), fourier);
    assert_eq!(full - count(&|cfg| cfg.dog = false), wavelet);
    assert_eq!(full - count(&|cfg| cfg.mexican_hat = false), wavelet);
    assert_eq!(
        full - count(&|cfg| {
            cfg.dog = false;
            cfg.mexican_hat = false;
        }),
        2 * wavelet + merge
    );
}

// ---------------------------------------------------------------- SMMM

fn conv_oracle(x: &Tensor, conv: &Conv2d, store: &ParamStore) -> Tensor {
    let [b, _, h, w] = x.dims4().unwrap();
    let (ho, wo) = conv.spec.out_hw(h, w).unwrap();
    let bias = conv.bias.map(|id| store.value(id));
    let data = naive_conv(x, store.value(conv.weight), bias, &conv.spec);
    Tensor::new(&[b, conv.spec.out_ch, ho, wo], data, DType::F64).unwrap()
}

fn relu(t: Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.dims4().unwrap();
    let cb = b.shape()[1];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * h * w..(i + 1) * ca * h * w]);
        data.extend_from_slice(&b.data()[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Tensor::new(&[n, ca + cb, h, w], data, DType::F64).unwrap()
}

fn multiscale_oracle(x: &Tensor, m: &MultiScale, store: &ParamStore) -> Tensor {
    let xm = conv_oracle(x, &m.entry, store);
    let s1 = relu(conv_oracle(&xm, &m.dw3, store));
    let s2 = relu(conv_oracle(&xm, &m.dw5, store));
    let c1 = cat(&s1, &s2);
    let t1 = relu(conv_oracle(&c1, &m.dw3_wide, store));
    let t2 = relu(conv_oracle(&c1, &m.dw5_wide, store));
    conv_oracle(&cat(&t1, &t2), &m.exit, store)
}

fn randomize(store: &mut ParamStore, prefix: &str, seed: u64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && p.name.ends_with("bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(&shape, -0.3, 0.3, seed + id.index() as u64)).unwrap();
    }
}

#[test]
fn multiscale_matches_stepwise_oracle() {
    for seed in 0..3 {
        let mut store = f64_store();
        let s = SmmmState::new(&mut store, &mut rng(seed), "smmm", SmmmConfig::new(4, 7, 7)).unwrap();
        randomize(&mut store, "smmm.enc", seed);
        let xt = random_tensor(&[1, 4, 7, 7], -1.0, 1.0, seed);
        let want = multiscale_oracle(&xt, &s.enc, &store);
        let mut tape = Tape::eval();
        let x = tape.constant(xt);
        let y = s.enc.forward(&mut tape, &store, x).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), want.shape());
        let scale = want.max_abs();
        assert!(got.max_abs_diff(&want) <= 1e-10 * scale);
    }
}

#[test]
fn smmm_shapes_and_zero_input() {
    let mut store = f64_store();
    let mut cfg = SmmmConfig::new(8, 16, 16);
    cfg.bias = false;
    let s = SmmmState::new(&mut store, &mut rng(0), "smmm", cfg).unwrap();
    let mut tape = Tape::eval();
    let z = tape.constant(Tensor::zeros(&[2, 8, 16, 16], DType::F64).unwrap());
    let m = s.enc.forward(&mut tape, &store, z).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    let e = tape.constant(random_tensor(&[2, 8, 16, 16], -1.0, 1.0, 1));
    let d = tape.constant(random_tensor(&[2, 8, 16, 16], -1.0, 1.0, 2));
    let y = s.forward(&mut tape, &store, e, d).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    let dil = s.dilated.forward(&mut tape, &store, e).unwrap();
    assert_eq!(tape.value(dil).shape(), &[2, 8, 16, 16]);

    let small = tape.constant(Tensor::zeros(&[2, 8, 8, 8], DType::F64).unwrap());
    assert!(matches!(s.forward(&mut tape, &store, e, small), Err(Error::ShapeMismatch(_))));
}

#[test]
fn saliency_weights_and_masks() {
    let mut store = f64_store();
    let s = SmmmState::new(&mut store, &mut rng(1), "smmm", SmmmConfig::new(8, 6, 6)).unwrap();
    let xt = random_tensor(&[2, 8, 6, 6], -1.0, 1.0, 1);
    let mut tape = Tape::eval();
    let x = tape.constant(xt.clone());
    let (w, _) = s.enc_mask.weights_and_scores(&mut tape, &store, x).unwrap();
    let wv = tape.value(w);
    for b in 0..2 {
        for c in 0..8 {
            let sum: f64 = (0..3).map(|k| wv.at([b, k, c, 0])).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
    let m = s.enc_mask.mask(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(m).shape(), &[2, 8, 1, 1]);
    assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));

    // reversing pixel order leaves every descriptor unchanged
    let mut rev = xt.data().to_vec();
    for plane in rev.chunks_mut(36) {
        plane.reverse();
    }
    let xr = tape.constant(Tensor::new(&[2, 8, 6, 6], rev, DType::F64).unwrap());
    let mr = s.enc_mask.mask(&mut tape, &store, xr).unwrap();
    assert!(tape.value(mr).max_abs_diff(tape.value(m)) < 1e-14);

    for mlp in [&s.enc_mask.avg, &s.enc_mask.max, &s.enc_mask.std] {
        mlp.fc2.zero(&mut store).unwrap();
    }
    let mut tape = Tape::eval();
    let x = tape.constant(xt);
    let m = s.enc_mask.mask(&mut tape, &store, x).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 0.5));
}

#[test]
fn smmm_symmetric_paths_reduce_to_features() {
    let mut store = f64_store();
    let s = SmmmState::new(&mut store, &mut rng(2), "smmm", SmmmConfig::new(4, 6, 6)).unwrap();
    let pairs: Vec<_> = store
        .iter()
        .filter_map(|(id, p)| {
            p.name
                .strip_prefix("smmm.enc.")
                .map(|rest| (id, store.find(&format!("smmm.dec.{rest}")).unwrap()))
        })
        .collect();
    for (src, dst) in pairs {
        let v = store.value(src).clone();
        store.set_value(dst, v).unwrap();
    }
    for mask in [&s.enc_mask, &s.dec_mask] {
        for mlp in [&mask.avg, &mask.max, &mask.std] {
            mlp.fc2.zero(&mut store).unwrap();
        }
    }
    let mut tape = Tape::eval();
    let x = tape.constant(random_tensor(&[2, 4, 6, 6], -1.0, 1.0, 2));
    let fused = s.masked_sum(&mut tape, &store, x, x).unwrap();
    let e = s.enc.forward(&mut tape, &store, x).unwrap();
    assert!(tape.value(fused).max_abs_diff(tape.value(e)) < 1e-14);
}

#[test]
fn smmm_requires_spatial_extent() {
    let mut store = f64_store();
    let s = SmmmState::new(&mut store, &mut rng(0), "smmm", SmmmConfig::new(4, 1, 1)).unwrap();
    let mut tape = Tape::eval();
    let x = tape.constant(Tensor::ones(&[1, 4, 1, 1], DType::F64).unwrap());
    assert!(matches!(s.forward(&mut tape, &store, x, x), Err(Error::DegenerateSpatial(1))));
}
