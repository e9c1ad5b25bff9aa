use proptest::prelude::*;
use topoland::autograd::Tape;
use topoland::gradcheck::{grad_check, loss_graph_check, op_checks};
use topoland::kernels::{conv_nd, ConvAlgo};
use topoland::Tensor;

const TOL: f64 = 1e-5;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20 {
        for check in op_checks(seed).unwrap() {
            assert!(
                check.max_rel_error <= TOL,
                "seed {seed}, {}: relative error {}",
                check.name,
                check.max_rel_error
            );
        }
    }
}

#[test]
fn full_loss_graph_matches_finite_differences() {
    let started = std::time::Instant::now();
    for seed in 0..20 {
        let err = loss_graph_check(seed).unwrap();
        assert!(err <= TOL, "seed {seed}: relative error {err}");
    }
    assert!(
        started.elapsed().as_secs() < 60,
        "took {:?}",
        started.elapsed()
    );
}

#[test]
fn mse_against_constant() {
    let c = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.3, 0.7, 0.9]).unwrap();
    let err = grad_check(
        |tape, v| {
            let t = tape.leaf(c.clone(), false);
            tape.mse_mean(v, t)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn conv_relu_composite() {
    let x = Tensor::new(
        vec![1, 4, 4],
        (0..16).map(|i| (i as f64 * 0.7).sin() + 0.1).collect(),
    )
    .unwrap();
    let w = Tensor::new(
        vec![2, 1, 3, 3],
        (0..18).map(|i| (i as f64 * 1.3).cos()).collect(),
    )
    .unwrap();
    let err = grad_check(
        |tape, v| {
            let wv = tape.leaf(w.clone(), false);
            let y = tape.conv(v, wv, None, 1, 1)?;
            let r = tape.relu(y);
            Ok(tape.sum_squares(r))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn upsample_backward_sums_replicas() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 2]), true);
    let y = tape.upsample_nearest(x, 2).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 4.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_paths_agree(
        c_in in 1usize..4,
        c_out in 1usize..5,
        h in 3usize..11,
        w in 3usize..19,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let n = c_in * h * w;
        let x = Tensor::new(vec![c_in, h, w], (0..n).map(|i| ((i as u64 ^ seed) % 97) as f64 / 48.0 - 1.0).collect()).unwrap();
        let k = c_out * c_in * 9;
        let wt = Tensor::new(vec![c_out, c_in, 3, 3], (0..k).map(|i| ((i as u64 * 31 + seed) % 89) as f64 / 44.0 - 1.0).collect()).unwrap();
        let direct = conv_nd(&x, &wt, None, stride, 1, ConvAlgo::Direct).unwrap();
        for algo in [ConvAlgo::Im2col, ConvAlgo::Auto] {
            let other = conv_nd(&x, &wt, None, stride, 1, algo).unwrap();
            prop_assert_eq!(direct.shape(), other.shape());
            for (a, b) in direct.data().iter().zip(other.data()) {
                prop_assert!((a - b).abs() <= 1e-11);
            }
        }
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x3fef_ffff_ffff_ffff)).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        let back = Tensor::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
