use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoland::apps::{
    distance_transform, edge_cost, extract_centerline, subdivide, Centerline, LABEL_ARCH,
    LABEL_ASCENDING, LABEL_BACKGROUND, LABEL_DESCENDING,
};
use topoland::heatmap::unravel;
use topoland::synth::{generate_sample, GenParams};
use topoland::{Error, Tensor};

/// Union of random discs on an `h × w` grid.
fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Tensor {
    let mut m = Tensor::zeros(&[h, w]);
    for _ in 0..count {
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let r = rng.random_range(1.0..6.0);
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    m.set(&[y, x], 1.0);
                }
            }
        }
    }
    m
}

/// Distance from every foreground voxel to the nearest background voxel by
/// scanning all pairs.
fn brute_dt(mask: &Tensor) -> Vec<f64> {
    let dims = mask.shape().to_vec();
    let n = mask.numel();
    let bg: Vec<Vec<usize>> = (0..n)
        .filter(|&i| mask.data()[i] <= 0.5)
        .map(|i| unravel(i, &dims))
        .collect();
    (0..n)
        .map(|i| {
            if mask.data()[i] <= 0.5 {
                return 0.0;
            }
            let p = unravel(i, &dims);
            bg.iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Bellman-Ford relaxation of the centerline edge costs over the
/// foreground, 8- or 26-connected.
fn brute_path_cost(mask: &Tensor, dt: &[f64], from: usize, to: usize) -> f64 {
    let dims = mask.shape().to_vec();
    let n = mask.numel();
    let fg: Vec<usize> = (0..n).filter(|&i| mask.data()[i] > 0.5).collect();
    let mut cost = vec![f64::INFINITY; n];
    cost[from] = 0.0;
    loop {
        let mut changed = false;
        for &i in &fg {
            if !cost[i].is_finite() {
                continue;
            }
            let p = unravel(i, &dims);
            for &j in &fg {
                let q = unravel(j, &dims);
                let diff: Vec<usize> = p.iter().zip(&q).map(|(&a, &b)| a.abs_diff(b)).collect();
                if diff.iter().all(|&d| d <= 1) && diff.contains(&1) {
                    let len = (diff.iter().sum::<usize>() as f64).sqrt();
                    let c = cost[i] + edge_cost(len, dt[j]);
                    if c < cost[j] {
                        cost[j] = c;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return cost[to];
        }
    }
}

#[test]
fn distance_transform_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..30 {
        let (h, w) = (rng.random_range(4..33), rng.random_range(4..33));
        let mask = blobs(&mut rng, h, w, 1 + case % 4);
        let dt = match distance_transform(&mask) {
            Ok(dt) => dt,
            Err(Error::Data(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        for (a, b) in dt.data().iter().zip(brute_dt(&mask)) {
            assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn distance_transform_3d_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let dims = [
            rng.random_range(3..9),
            rng.random_range(3..9),
            rng.random_range(3..9),
        ];
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::new(dims.to_vec(), data).unwrap();
        let Ok(dt) = distance_transform(&mask) else {
            continue;
        };
        for (a, b) in dt.data().iter().zip(brute_dt(&mask)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn path_cost_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    for _ in 0..40 {
        let (h, w) = (rng.random_range(6..25), rng.random_range(6..25));
        let mask = blobs(&mut rng, h, w, 3);
        let Ok(dt) = distance_transform(&mask) else {
            continue;
        };
        let fg: Vec<usize> = (0..mask.numel())
            .filter(|&i| mask.data()[i] > 0.5)
            .collect();
        let (a, b) = (
            fg[rng.random_range(0..fg.len())],
            fg[rng.random_range(0..fg.len())],
        );
        let (pa, pb) = (unravel(a, &[h, w]), unravel(b, &[h, w]));
        let to_f = |p: &[usize]| p.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let oracle = brute_path_cost(&mask, dt.data(), a, b);
        match extract_centerline(&mask, &to_f(&pa), &to_f(&pb), &[1.0, 1.0]) {
            Ok(c) => {
                assert!(
                    (c.cost - oracle).abs() <= 1e-9 * oracle.max(1.0),
                    "{} vs {oracle}",
                    c.cost
                );
                assert_eq!(c.points.first(), Some(&pa));
                assert_eq!(c.points.last(), Some(&pb));
                let steps: f64 = c
                    .points
                    .windows(2)
                    .map(|s| {
                        let len =
                            ((s[0][0].abs_diff(s[1][0]) + s[0][1].abs_diff(s[1][1])) as f64).sqrt();
                        edge_cost(len, dt.get(&s[1]))
                    })
                    .sum();
                assert!((steps - c.cost).abs() <= 1e-9 * oracle.max(1.0));
                checked += 1;
            }
            Err(Error::NoPath { .. }) => assert!(oracle.is_infinite()),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked >= 20, "only {checked} connected cases");
}

/// Horizontal tube of half-width 2 around row 12, columns `c0..c1`.
fn straight_tube(c0: usize, c1: usize) -> Tensor {
    let mut m = Tensor::zeros(&[25, 50]);
    for y in 10..=14 {
        for x in c0..c1 {
            m.set(&[y, x], 1.0);
        }
    }
    m
}

#[test]
fn straight_tube_path_follows_center_row() {
    let mask = straight_tube(3, 45);
    let c = extract_centerline(&mask, &[12.0, 3.0], &[12.0, 44.0], &[2.0, 2.0]).unwrap();
    assert_eq!(c.points.len(), 42);
    for (k, p) in c.points.iter().enumerate() {
        assert_eq!(p, &vec![12, 3 + k]);
    }
    assert!((c.length_mm - 82.0).abs() < 1e-12);
}

#[test]
fn straight_tube_splits_into_three_equal_bands() {
    let k = 14;
    let mask = straight_tube(3, 3 + 3 * k);
    let c = extract_centerline(
        &mask,
        &[12.0, 3.0],
        &[12.0, (2 + 3 * k) as f64],
        &[1.0, 1.0],
    )
    .unwrap();
    let l2 = [12.0, (3 + k) as f64];
    let l3 = [12.0, (3 + 2 * k - 1) as f64];
    let s = subdivide(&mask, &c, &l2, &l3, &[1.0, 1.0]).unwrap();
    let count = |label: u8| {
        s.labels
            .data()
            .iter()
            .filter(|&&v| v == label as f64)
            .count()
    };
    assert_eq!(count(LABEL_ASCENDING), 5 * k);
    assert_eq!(count(LABEL_ARCH), 5 * k);
    assert_eq!(count(LABEL_DESCENDING), 5 * k);
    for y in 10..=14 {
        assert_eq!(s.labels.get(&[y, 3]), LABEL_ASCENDING as f64);
        assert_eq!(s.labels.get(&[y, 3 + k]), LABEL_ARCH as f64);
        assert_eq!(s.labels.get(&[y, 2 + 3 * k]), LABEL_DESCENDING as f64);
    }
    assert_eq!(s.labels.get(&[0, 0]), LABEL_BACKGROUND as f64);
}

/// Label of the nearest centerline point, found by scanning every point;
/// ties go to the lowest voxel index.
fn scan_labels(mask: &Tensor, dims: &[usize], pts: &[Vec<usize>], i2: usize, i3: usize) -> Vec<u8> {
    let (lo, hi) = (i2.min(i3), i2.max(i3));
    let lin = |p: &[usize]| p.iter().zip(dims).fold(0, |acc, (&v, &d)| acc * d + v);
    (0..mask.numel())
        .map(|i| {
            if mask.data()[i] <= 0.5 {
                return LABEL_BACKGROUND;
            }
            let x = unravel(i, dims);
            let mut best: Option<(usize, usize, usize)> = None;
            for (k, p) in pts.iter().enumerate() {
                let d = x
                    .iter()
                    .zip(p)
                    .map(|(&a, &b)| a.abs_diff(b).pow(2))
                    .sum::<usize>();
                let key = (d, lin(p), k);
                if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
                    best = Some(key);
                }
            }
            let k = best.unwrap().2;
            if i2 != i3 && k >= lo && k <= hi {
                LABEL_ARCH
            } else if (k <= lo) == (i2 <= i3) {
                LABEL_ASCENDING
            } else {
                LABEL_DESCENDING
            }
        })
        .collect()
}

fn nearest_index(pts: &[Vec<usize>], dims: &[usize], x: &[f64]) -> usize {
    let lin = |p: &[usize]| p.iter().zip(dims).fold(0, |acc, (&v, &d)| acc * d + v);
    let mut best = (f64::INFINITY, usize::MAX, 0);
    for (k, p) in pts.iter().enumerate() {
        let d: f64 = p.iter().zip(x).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
        if (d, lin(p)) < (best.0, best.1) {
            best = (d, lin(p), k);
        }
    }
    best.2
}

fn candy_cane(seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let s = generate_sample(seed, &GenParams::default()).unwrap();
    let dims = s.spatial().to_vec();
    let mask = s.mask.clone().reshape(&dims).unwrap();
    (mask, s.landmarks.coords.clone())
}

#[test]
fn candy_cane_labels_match_exhaustive_scan() {
    for seed in 0..5 {
        let (mask, lm) = candy_cane(seed);
        let dims = mask.shape().to_vec();
        let c = extract_centerline(&mask, &lm[0], &lm[3], &[1.8, 1.8]).unwrap();
        let s = subdivide(&mask, &c, &lm[1], &lm[2], &[1.8, 1.8]).unwrap();
        let i2 = nearest_index(&c.points, &dims, &lm[1]);
        let i3 = nearest_index(&c.points, &dims, &lm[2]);
        assert_eq!(s.boundary_index, [i2, i3]);
        let expect = scan_labels(&mask, &dims, &c.points, i2, i3);
        let got: Vec<u8> = s.labels.data().iter().map(|&v| v as u8).collect();
        assert_eq!(got, expect, "seed {seed}");
        for label in [LABEL_ASCENDING, LABEL_ARCH, LABEL_DESCENDING] {
            assert!(got.contains(&label), "seed {seed}: label {label} missing");
        }

        let reversed = Centerline {
            points: c.points.iter().rev().cloned().collect(),
            dt: c.dt.iter().rev().copied().collect(),
            ..c.clone()
        };
        let r = subdivide(&mask, &reversed, &lm[1], &lm[2], &[1.8, 1.8]).unwrap();
        assert_eq!(
            r.labels, s.labels,
            "seed {seed}: labels depend on path direction"
        );
    }
}

/// Frozen from the generator: the smallest ratio measured over seeds 0..20
/// was 0.72.
const CENTERING_BOUND: f64 = 0.6;

#[test]
fn candy_cane_path_stays_centered() {
    for seed in 0..20 {
        let (mask, lm) = candy_cane(seed);
        let dims = mask.shape().to_vec();
        let dt = distance_transform(&mask).unwrap();
        let c = extract_centerline(&mask, &lm[0], &lm[3], &[1.8, 1.8]).unwrap();
        // Local maximum: largest distance value within 3 voxels of the point.
        let mut worst = f64::INFINITY;
        for (p, &d) in c.points.iter().zip(&c.dt) {
            let mut local = 0.0f64;
            for y in p[0].saturating_sub(3)..(p[0] + 4).min(dims[0]) {
                for x in p[1].saturating_sub(3)..(p[1] + 4).min(dims[1]) {
                    local = local.max(dt.get(&[y, x]));
                }
            }
            worst = worst.min(d / local);
        }
        assert!(worst >= CENTERING_BOUND, "seed {seed}: ratio {worst}");
    }
}

#[test]
fn disconnected_components_have_no_path() {
    let mut mask = Tensor::zeros(&[10, 10]);
    for y in 0..10 {
        mask.set(&[y, 1], 1.0);
        mask.set(&[y, 8], 1.0);
    }
    let err = extract_centerline(&mask, &[0.0, 1.0], &[9.0, 8.0], &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, Error::NoPath { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distance_is_zero_exactly_on_background(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::new(vec![h, w], data).unwrap();
        if let Ok(dt) = distance_transform(&mask) {
            for (m, d) in mask.data().iter().zip(dt.data()) {
                prop_assert_eq!(*m > 0.5, *d >= 1.0);
            }
        }
    }
}
