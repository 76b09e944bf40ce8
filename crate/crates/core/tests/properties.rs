use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdec::gradcheck::random_tensor;
use segdec::nn::{f64_store, ChannelGate, Conv2d, SpatialGate};
use segdec::ops::{Axes, Conv2dSpec, ReduceKind};
use segdec::{DType, Tape, Tensor};

fn dims() -> impl Strategy<Value = [usize; 4]> {
    (1usize..=3, 1usize..=4, 1usize..=6, 1usize..=6).prop_map(|(b, c, h, w)| [b, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn broadcast_grad_has_operand_shape(d in dims(), mask in 0u8..16, seed in 0u64..1000) {
        let small: Vec<usize> = d.iter().enumerate().map(|(i, &n)| if mask >> i & 1 == 1 { 1 } else { n }).collect();
        let mut store = f64_store();
        let mut tape = Tape::train();
        let a = tape.leaf(random_tensor(&d, -1.0, 1.0, seed));
        let b = tape.leaf(random_tensor(&small, -1.0, 1.0, seed + 1));
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss, &mut store).unwrap();
        prop_assert_eq!(grads.get(b).unwrap().len(), small.iter().product::<usize>());
        prop_assert_eq!(grads.get(a).unwrap().len(), d.iter().product::<usize>());
    }

    #[test]
    fn softmax_rows_sum_to_one(d in dims(), axis in 0usize..4, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let x = random_tensor(&d, -10.0, 10.0, seed);
        let shifted = x.map(|v| v + shift);
        let mut tape = Tape::eval();
        let xv = tape.constant(x);
        let sv = tape.constant(shifted);
        let y = tape.softmax(xv, axis).unwrap();
        let z = tape.softmax(sv, axis).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(tape.value(z)) < 1e-12);
        let s = tape.reduce(y, ReduceKind::Sum, Axes::All).unwrap();
        let total = tape.value(s).item();
        let rows = d.iter().product::<usize>() / d[axis];
        prop_assert!((total - rows as f64).abs() < 1e-6 * rows as f64);
        prop_assert!(tape.value(y).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gates_never_amplify(c in 2usize..=8, h in 1usize..=7, w in 1usize..=7, seed in 0u64..1000) {
        let mut store = f64_store();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cg = ChannelGate::new(&mut store, &mut rng, "cg", c).unwrap();
        let sg = SpatialGate::new(&mut store, &mut rng, "sg").unwrap();
        let xt = random_tensor(&[2, c, h, w], -3.0, 3.0, seed);
        let mut tape = Tape::eval();
        let x = tape.constant(xt.clone());
        let a = cg.forward(&mut tape, &store, x).unwrap();
        let b = sg.forward(&mut tape, &store, x).unwrap();
        for out in [a, b] {
            for (o, i) in tape.value(out).data().iter().zip(xt.data()) {
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn conv_output_shape_formula(
        h in 1usize..=12, w in 1usize..=12, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, dilation in 1usize..=2,
    ) {
        let mut spec = Conv2dSpec::same(2, 3, k).dilated(dilation);
        spec.stride = stride;
        let expect = |n: usize| (n + 2 * spec.padding.0).checked_sub(dilation * (k - 1) + 1).map(|v| v / stride + 1);
        match (expect(h), expect(w), spec.out_hw(h, w)) {
            (Some(a), Some(b), Ok(got)) => prop_assert_eq!(got, (a, b)),
            (_, _, Err(_)) => prop_assert!(expect(h).is_none() || expect(w).is_none()),
            _ => prop_assert!(false, "formula and spec disagree"),
        }
    }

    #[test]
    fn replay_is_bit_identical(seed in 0u64..1000) {
        let run = || {
            let mut store = f64_store();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conv = Conv2d::new(&mut store, &mut rng, "c", Conv2dSpec::same(3, 4, 3)).unwrap();
            let mut tape = Tape::train();
            let x = tape.leaf(random_tensor(&[2, 3, 8, 8], -1.0, 1.0, seed));
            let y = conv.forward(&mut tape, &store, x).unwrap();
            let g = tape.gelu(y).unwrap();
            let l = tape.mean_all(g).unwrap();
            tape.backward(l, &mut store).unwrap();
            (tape.value(g).data().to_vec(), store.grad(conv.weight).data().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_grad_clears_everything() {
    let mut store = f64_store();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::new(&mut store, &mut rng, "c", Conv2dSpec::same(2, 2, 3)).unwrap();
    let mut tape = Tape::train();
    let x = tape.constant(random_tensor(&[1, 2, 5, 5], -1.0, 1.0, 0));
    let y = conv.forward(&mut tape, &store, x).unwrap();
    let l = tape.sum_all(y).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert!(store.grad(conv.weight).max_abs() > 0.0);
    store.zero_grad();
    for (_, p) in store.iter() {
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.grad.max_abs(), 0.0);
    }
}

#[test]
fn finite_check_reports_first_bad_index() {
    let t = Tensor::new(&[4], vec![0.0, 1.0, f64::INFINITY, f64::NAN], DType::F64).unwrap();
    match t.assert_finite() {
        Err(segdec::Error::NonFiniteValue { index }) => assert_eq!(index, 2),
        other => panic!("unexpected {other:?}"),
    }
    let mut tape = Tape::eval();
    let one = tape.constant(Tensor::ones(&[1], DType::F64).unwrap());
    let zero = tape.constant(Tensor::zeros(&[1], DType::F64).unwrap());
    let q = tape.div(one, zero).unwrap();
    assert!(tape.value(q).assert_finite().is_err());
    assert!(Tensor::zeros(&[2, 2], DType::F64).unwrap().assert_finite().is_ok());
}
