use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoland::autograd::Tape;
use topoland::heatmap::{
    extract_peaks, render_targets, unravel, GaussianSpec, LandmarkSet, SigmaParams, SigmaRole,
};
use topoland::network::{
    backbone_forward, draw_selection, head_forward, layout_param_count, select_visible, ArchConfig,
    ParamGroup, ParamStore,
};
use topoland::Tensor;

#[test]
fn gaussian_mass_is_the_amplitude() {
    let lm = LandmarkSet::new(vec![vec![31.0, 33.0]], vec![1.0, 1.0]).unwrap();
    let spec = GaussianSpec::new(1e6, 2).unwrap();
    let maps = render_targets(
        &lm,
        &SigmaParams::new(3.0, 1, SigmaRole::Regression),
        spec,
        &[64, 64],
    )
    .unwrap();
    let total: f64 = maps.maps.data().iter().sum();
    assert!((total / 1e6 - 1.0).abs() < 1e-3, "{total}");
    assert!((maps.maps.get(&[0, 31, 33]) / spec.peak(3.0) - 1.0).abs() < 1e-12);
}

#[test]
fn default_peak_height() {
    let spec = GaussianSpec::new(1e6, 2).unwrap();
    assert!((spec.peak(10.0) - 1591.549).abs() < 1e-3);
}

#[test]
fn peaks_match_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let dims = if rng.random::<bool>() {
            vec![rng.random_range(1..20), rng.random_range(1..20)]
        } else {
            vec![
                rng.random_range(1..8),
                rng.random_range(1..8),
                rng.random_range(1..8),
            ]
        };
        let m = rng.random_range(1..5);
        let vol: usize = dims.iter().product();
        // Coarse values so ties happen.
        let data: Vec<f64> = (0..m * vol)
            .map(|_| rng.random_range(0..6) as f64)
            .collect();
        let mut shape = vec![m];
        shape.extend(&dims);
        let maps = Tensor::new(shape, data).unwrap();
        let peaks = extract_peaks(&maps, &vec![1.0; dims.len()]).unwrap();
        for c in 0..m {
            let ch = maps.channel(c);
            let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = ch.iter().position(|&v| v == max).unwrap();
            let expect: Vec<f64> = unravel(first, &dims)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            assert_eq!(peaks.landmarks.coords[c], expect);
        }
    }
}

#[test]
fn noiseless_gaussians_give_back_their_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let sigma: f64 = rng.random_range(1.0..4.0);
        let margin = (3.0 * sigma).ceil() as usize;
        let dims = [48usize, 40];
        let coords: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                dims.iter()
                    .map(|&d| rng.random_range(margin..d - margin) as f64)
                    .collect()
            })
            .collect();
        let lm = LandmarkSet::new(coords.clone(), vec![1.0, 1.0]).unwrap();
        let spec = GaussianSpec::new(1e6, 2).unwrap();
        let maps = render_targets(
            &lm,
            &SigmaParams::new(sigma, 4, SigmaRole::Regression),
            spec,
            &dims,
        )
        .unwrap();
        let peaks = extract_peaks(&maps.maps, &[1.0, 1.0]).unwrap();
        assert_eq!(peaks.landmarks.coords, coords);
    }
}

#[test]
fn erasure_frequency_is_half_at_p_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (draws, m) = (10_000, 4);
    let mut erased = [0usize; 4];
    let mut total = 0usize;
    for _ in 0..draws {
        let mask = draw_selection(m, 0.5, &mut rng).unwrap();
        // Each rejected round erased every channel.
        let rejected = mask.attempts as usize - 1;
        for (c, e) in erased.iter_mut().enumerate() {
            *e += rejected + usize::from(!mask.visible[c]);
        }
        total += mask.attempts as usize;
    }
    for e in erased {
        let f = e as f64 / total as f64;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }
}

#[test]
fn at_least_one_channel_stays_visible() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..1_000_000 {
        let p = [0.5, 0.9, 1.0][i % 3];
        let mask = draw_selection(4, p, &mut rng).unwrap();
        assert!(mask.visible.iter().any(|&v| v));
    }
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        channels: vec![4, 4, 4],
        head_channels: vec![4, 4, 4],
        ..ArchConfig::default()
    }
}

#[test]
fn head_never_sees_the_image() {
    let arch = small_arch();
    let params = ParamStore::init(&arch, 0).unwrap();
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape);
    let image = tape.leaf(Tensor::full(&[1, 16, 16], 0.5), false);
    let pred = backbone_forward(&mut tape, image, &binds, &arch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (visible, _) = select_visible(&mut tape, pred, 0.5, &mut rng).unwrap();
    let out = head_forward(&mut tape, visible, &binds, &arch).unwrap();
    // Everything the head computes, up to its input, is image-free.
    let reach = tape.ancestors(out, &[visible]);
    assert!(!reach.contains(&image));
    assert!(!reach.contains(&pred));
    // Sanity: the unrestricted walk does reach the image through the backbone.
    assert!(tape.depends_on(out, image));
}

#[test]
fn head_ignores_erased_content() {
    let arch = small_arch();
    let mut params = ParamStore::init(&arch, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, e) in params.iter_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let keep = [true, false, true, false];
    let run = |stack: Tensor| {
        let mut tape = Tape::new();
        let binds = params.bind(&mut tape);
        let s = tape.leaf(stack, false);
        let v = tape.mask_channels(s, &keep).unwrap();
        let out = head_forward(&mut tape, v, &binds, &arch).unwrap();
        tape.value(out).clone()
    };
    let a: Vec<f64> = (0..4 * 256).map(|_| rng.random_range(0.0..10.0)).collect();
    let mut b = a.clone();
    for c in [1, 3] {
        for v in &mut b[c * 256..(c + 1) * 256] {
            *v = rng.random_range(-50.0..50.0);
        }
    }
    let shape = vec![4, 16, 16];
    assert_eq!(
        run(Tensor::new(shape.clone(), a).unwrap()),
        run(Tensor::new(shape, b).unwrap())
    );
}

#[test]
fn full_3d_head_is_light() {
    let arch = ArchConfig::full_3d();
    let head = layout_param_count(&arch, ParamGroup::Head);
    let backbone = layout_param_count(&arch, ParamGroup::Backbone);
    assert!(head as f64 / backbone as f64 <= 0.10, "{head} / {backbone}");
}

proptest! {
    #[test]
    fn landmark_csv_round_trips(coords in prop::collection::vec((0u16..500, 0u16..500), 1..6)) {
        let coords: Vec<Vec<f64>> = coords.into_iter().map(|(a, b)| vec![a as f64, b as f64]).collect();
        let lm = LandmarkSet::new(coords, vec![1.8, 1.8]).unwrap();
        let back = LandmarkSet::from_csv(&lm.to_csv(), vec![1.8, 1.8]).unwrap();
        prop_assert_eq!(back, lm);
    }

    #[test]
    fn selection_keeps_a_channel(m in 1usize..8, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = draw_selection(m, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(mask.visible.iter().any(|&v| v));
        prop_assert_eq!(mask.visible.len(), m);
    }
}
