use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topoland::synth::{
    augment, center_crop_pad, generate_dataset, generate_sample, rotate, sample_curve, Dataset,
    GenParams, LANDMARK_FRACTIONS,
};
use topoland::{Error, Tensor};

/// Bounds, landmarks inside the tube and L1..L4 in order along the curve.
fn check_invariants(seed: u64, params: &GenParams) {
    let s = generate_sample(seed, params).unwrap();
    let dims = s.spatial().to_vec();
    assert_eq!(s.image.shape()[1..], dims[..]);
    assert!(
        s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        "seed {seed}: intensity out of range"
    );
    assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let curve = sample_curve(&s);
    let mut last_arc = -1.0;
    for (k, c) in s.landmarks.coords.iter().enumerate() {
        for (&v, &n) in c.iter().zip(&dims) {
            assert!(
                v >= 0.0 && v <= (n - 1) as f64 && v.fract() == 0.0,
                "seed {seed}: landmark {k} at {c:?}"
            );
        }
        let idx: Vec<usize> = c.iter().map(|&v| v as usize).collect();
        let mut full = vec![0];
        full.extend(&idx);
        assert_eq!(
            s.mask.get(&full),
            1.0,
            "seed {seed}: landmark {k} off the tube"
        );
        let (dist, arc) = curve.closest(c);
        // Rounding to the voxel grid moves a point by at most half a diagonal.
        let limit = 0.5 * (dims.len() as f64).sqrt() + 1e-9;
        assert!(
            dist <= limit,
            "seed {seed}: landmark {k} is {dist} from the centerline"
        );
        assert!(arc > last_arc, "seed {seed}: landmark {k} out of order");
        last_arc = arc;
    }
    for (arc, f) in s.deformation.landmark_arc.iter().zip(LANDMARK_FRACTIONS) {
        assert!((arc - f).abs() < 0.05);
    }
}

#[test]
fn thousand_samples_hold_invariants() {
    let params = GenParams::default();
    for seed in 0..1000 {
        check_invariants(seed, &params);
    }
}

#[test]
fn volume_samples_hold_invariants() {
    let params = GenParams::desk_3d();
    for seed in 0..20 {
        check_invariants(seed, &params);
    }
}

#[test]
fn same_seed_same_sample() {
    let p = GenParams::default();
    let a = generate_sample(77, &p).unwrap();
    let b = generate_sample(77, &p).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), generate_sample(78, &p).unwrap().digest());
}

#[test]
fn padding_centers_content_and_shifts_landmarks() {
    let raw = Tensor::new(
        vec![1, 90, 90],
        (0..8100).map(|i| 0.25 + (i % 7) as f64 / 10.0).collect(),
    )
    .unwrap();
    let (out, offset) = center_crop_pad(&raw, &[96, 96]).unwrap();
    assert_eq!(offset, vec![3, 3]);
    for y in 0..96 {
        for x in 0..96 {
            let inside = (3..93).contains(&y) && (3..93).contains(&x);
            let expect = if inside {
                raw.get(&[0, y - 3, x - 3])
            } else {
                0.0
            };
            assert_eq!(out.get(&[0, y, x]), expect);
        }
    }

    let params = GenParams {
        raw_dims: Some(vec![90, 90]),
        ..GenParams::default()
    };
    let s = generate_sample(5, &params).unwrap();
    assert_eq!(s.deformation.offset, vec![3, 3]);
    let shifted = sample_curve(&s);
    for (c, &f) in s.landmarks.coords.iter().zip(&s.deformation.landmark_arc) {
        let p = shifted.at_fraction(f);
        assert_eq!(
            c,
            &vec![(p[0] - 3.0).round() + 3.0, (p[1] - 3.0).round() + 3.0]
        );
    }
}

#[test]
fn quarter_turn_is_a_closed_form_permutation() {
    let s = generate_sample(3, &GenParams::default()).unwrap();
    let r = rotate(&s, 90.0).unwrap().sample;
    let c = 47.5;
    for (p, q) in s.landmarks.coords.iter().zip(&r.landmarks.coords) {
        // (y, x) -> (c - (x - c), c + (y - c))
        assert!((q[0] - (2.0 * c - p[1])).abs() < 1e-9);
        assert!((q[1] - p[0]).abs() < 1e-9);
    }
    for y in 0..96 {
        for x in 0..96 {
            assert!((r.image.get(&[0, y, x]) - s.image.get(&[0, x, 95 - y])).abs() < 1e-9);
            assert_eq!(r.mask.get(&[0, y, x]), s.mask.get(&[0, x, 95 - y]));
        }
    }
}

#[test]
fn zero_angle_is_identity() {
    let s = generate_sample(4, &GenParams::default()).unwrap();
    let r = rotate(&s, 0.0).unwrap();
    assert_eq!(r.sample, s);
    assert!(!r.clamped);
}

#[test]
fn augmentation_noise_has_requested_std() {
    let s = generate_sample(6, &GenParams::default()).unwrap();
    let clean = s.image.data();
    // Voxels far from the clamp bounds, so clamping never bites.
    let probes: Vec<usize> = (0..clean.len())
        .filter(|&i| (0.35..0.65).contains(&clean[i]))
        .take(200)
        .collect();
    assert!(probes.len() >= 100);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 1000;
    let mut sum = vec![0.0; probes.len()];
    let mut sq = vec![0.0; probes.len()];
    for _ in 0..draws {
        let a = augment(&s, &mut rng, 0.05, 0.0).unwrap();
        for (k, &i) in probes.iter().enumerate() {
            let d = a.sample.image.data()[i] - clean[i];
            sum[k] += d;
            sq[k] += d * d;
        }
    }
    for k in 0..probes.len() {
        let mean = sum[k] / draws as f64;
        let std = (sq[k] / draws as f64 - mean * mean).sqrt();
        assert!(
            (std - 0.05).abs() <= 0.005,
            "voxel {}: std {std}",
            probes[k]
        );
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams {
        dims: vec![32, 32],
        radius_range: [2.0, 3.0],
        jitter: 1.0,
        ..GenParams::default()
    };
    let data = generate_dataset(3, 9, &params).unwrap();
    let manifest = data.save(dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 3);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.digests(), data.digests());
    back.verify_rebuild().unwrap();

    let first = &manifest.samples[0];
    std::fs::write(dir.path().join(&first.landmarks), "id,x,y\n1,0,0\n").unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
}

#[test]
fn invalid_params_list_every_problem() {
    let params = GenParams {
        dims: vec![95, 96],
        spacing: -1.0,
        jitter: f64::NAN,
        ..GenParams::default()
    };
    let Err(Error::Config(problems)) = params.validate() else {
        panic!("expected config error")
    };
    assert_eq!(problems.len(), 3, "{problems:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn crop_then_pad_restores_the_center(h in 8usize..40, w in 8usize..40, th in 2usize..12, tw in 2usize..12) {
        let (th, tw) = (th * 4, tw * 4);
        let t = Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64 + 1.0).collect()).unwrap();
        let (out, off) = center_crop_pad(&t, &[th, tw]).unwrap();
        for y in 0..th {
            for x in 0..tw {
                let (sy, sx) = (y as isize - off[0], x as isize - off[1]);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                let expect = if inside { t.get(&[0, sy as usize, sx as usize]) } else { 0.0 };
                prop_assert_eq!(out.get(&[0, y, x]), expect);
            }
        }
    }
}
