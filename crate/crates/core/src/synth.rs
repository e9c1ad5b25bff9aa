//! Procedural aorta-like phantoms: a candy-cane tube (ascending limb, arch,
//! descending limb) with four landmarks at fixed arc-length fractions,
//! intensity preprocessing, on-the-fly augmentation and dataset directories.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::tensor::Tensor;

/// Arc-length fractions of L1 (root), L2 and L3 (arch boundaries), L4 (end).
pub const LANDMARK_FRACTIONS: [f64; 4] = [0.02, 0.35, 0.55, 0.98];
pub const HU_CLIP: (f64, f64) = (-1000.0, 1000.0);
/// Every generated dimension must be a multiple of this (desk backbone).
pub const DIM_MULTIPLE: usize = 4;
pub const MANIFEST_VERSION: u32 = 1;

const MAX_CURVE_ATTEMPTS: u32 = 32;
const SAMPLES_PER_SEGMENT: usize = 48;
const EDGE_SOFTNESS: f64 = 0.6;

/// Canonical control points in normalized `(axis 0, axis 1)` coordinates.
/// Axis 0 runs top to bottom, so the arch sits at small axis-0 values.
const CANONICAL: [[f64; 2]; 9] = [
    [0.80, 0.36],
    [0.58, 0.30],
    [0.35, 0.29],
    [0.18, 0.38],
    [0.14, 0.52],
    [0.20, 0.65],
    [0.40, 0.70],
    [0.64, 0.68],
    [0.88, 0.66],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    /// Output grid, `[rows, cols]` or `[rows, cols, depth]`.
    pub dims: Vec<usize>,
    /// Grid the phantom is drawn on before center crop/pad; `dims` if absent.
    pub raw_dims: Option<Vec<usize>>,
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    /// Tube radius range in voxels; the root is wider than the far end.
    pub radius_range: [f64; 2],
    /// Uniform per-coordinate jitter of the control points, in voxels.
    pub jitter: f64,
    /// Uniform jitter of each landmark along the curve, in voxels of arc length.
    pub landmark_jitter: f64,
    pub tube_hu: f64,
    pub background_hu: f64,
    /// Std of the additive background noise, in HU.
    pub noise_hu: f64,
    /// Bright blobs scattered off the tube.
    pub distractors: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            dims: vec![96, 96],
            raw_dims: None,
            spacing: 1.8,
            radius_range: [3.0, 5.5],
            jitter: 5.0,
            landmark_jitter: 1.5,
            tube_hu: 350.0,
            background_hu: -100.0,
            noise_hu: 120.0,
            distractors: 3,
        }
    }
}

impl GenParams {
    /// 3D phantom for shape and smoke tests.
    pub fn desk_3d() -> Self {
        Self {
            dims: vec![48, 32, 32],
            radius_range: [2.0, 3.0],
            jitter: 2.0,
            landmark_jitter: 1.0,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn raw(&self) -> &[usize] {
        self.raw_dims.as_deref().unwrap_or(&self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dims.len() != 2 && self.dims.len() != 3 {
            problems.push(format!(
                "dims must have 2 or 3 entries, got {:?}",
                self.dims
            ));
        }
        if self.dims.iter().any(|&d| d == 0 || d % DIM_MULTIPLE != 0) {
            problems.push(format!(
                "dims {:?} must be positive multiples of {DIM_MULTIPLE}",
                self.dims
            ));
        }
        if let Some(raw) = &self.raw_dims {
            if raw.len() != self.dims.len() || raw.iter().any(|&d| d < 8) {
                problems.push(format!(
                    "raw_dims {raw:?} must match the rank of dims and be at least 8"
                ));
            }
        }
        if !(self.spacing > 0.0) {
            problems.push(format!("spacing must be positive, got {}", self.spacing));
        }
        let [lo, hi] = self.radius_range;
        if !(lo >= 2.0 && lo <= hi) {
            problems.push(format!(
                "radius_range {:?} needs 2 <= lo <= hi",
                self.radius_range
            ));
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("landmark_jitter", self.landmark_jitter),
            ("noise_hu", self.noise_hu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Random draws behind one sample, kept so a manifest fully describes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    /// Jittered control points in raw voxel coordinates.
    pub control_points: Vec<Vec<f64>>,
    pub radius_start: f64,
    pub radius_end: f64,
    /// Arc-length fractions of L1..L4 after jitter.
    pub landmark_arc: Vec<f64>,
    /// Offset added by center crop/pad, per axis.
    pub offset: Vec<isize>,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `[1, spatial...]` in `[0, 1]`.
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    /// `[1, spatial...]`, 1 inside the tube.
    pub mask: Tensor,
    pub gen_seed: u64,
    pub deformation: Deformation,
}

impl SyntheticSample {
    pub fn spatial(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    /// SHA-256 over the image, landmark CSV and mask, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        self.image.write_to(&mut buf).expect("in-memory write");
        h.update(&buf);
        h.update(self.landmarks.to_csv().as_bytes());
        buf.clear();
        self.mask.write_to(&mut buf).expect("in-memory write");
        h.update(&buf);
        hex::encode(h.finalize())
    }
}

/// Densely sampled centerline with cumulative arc length.
#[derive(Clone, Debug)]
pub struct Polyline {
    pub points: Vec<Vec<f64>>,
    pub arc: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec<f64>>) -> Self {
        let mut arc = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += dist(p, &points[i - 1]);
            }
            arc.push(acc);
        }
        Self { points, arc }
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    /// Point at arc-length fraction `f` in `[0, 1]`.
    pub fn at_fraction(&self, f: f64) -> Vec<f64> {
        let target = f.clamp(0.0, 1.0) * self.length();
        let j = self
            .arc
            .partition_point(|&a| a < target)
            .clamp(1, self.points.len() - 1);
        let (a0, a1) = (self.arc[j - 1], self.arc[j]);
        let t = if a1 > a0 {
            (target - a0) / (a1 - a0)
        } else {
            0.0
        };
        lerp(&self.points[j - 1], &self.points[j], t)
    }

    /// Distance from `x` to the curve and the arc fraction of the closest point.
    pub fn closest(&self, x: &[f64]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for j in 1..self.points.len() {
            let (a, b) = (&self.points[j - 1], &self.points[j]);
            let (mut len2, mut dot) = (0.0, 0.0);
            for k in 0..x.len() {
                let d = b[k] - a[k];
                len2 += d * d;
                dot += (x[k] - a[k]) * d;
            }
            let t = if len2 > 0.0 {
                (dot / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut d2 = 0.0;
            for k in 0..x.len() {
                let p = a[k] + t * (b[k] - a[k]);
                d2 += (x[k] - p) * (x[k] - p);
            }
            if d2 < best.0 {
                best = (d2, self.arc[j - 1] + t * (self.arc[j] - self.arc[j - 1]));
            }
        }
        let len = self.length();
        (best.0.sqrt(), if len > 0.0 { best.1 / len } else { 0.0 })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + t * (b - a)).collect()
}

/// Uniform Catmull-Rom spline through `ctrl`, end points duplicated.
pub fn catmull_rom(ctrl: &[Vec<f64>], per_segment: usize) -> Vec<Vec<f64>> {
    let n = ctrl.len();
    let at = |i: isize| &ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * per_segment + 1);
    for i in 0..n as isize - 1 {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        for s in 0..per_segment {
            let t = s as f64 / per_segment as f64;
            let (t2, t3) = (t * t, t * t * t);
            out.push(
                (0..p1.len())
                    .map(|k| {
                        0.5 * (2.0 * p1[k]
                            + (p2[k] - p0[k]) * t
                            + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
                            + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * t3)
                    })
                    .collect(),
            );
        }
    }
    out.push(ctrl[n - 1].clone());
    out
}

/// Canonical control points scaled to a raw grid.
pub fn canonical_controls(raw: &[usize]) -> Vec<Vec<f64>> {
    CANONICAL
        .iter()
        .map(|[u, v]| {
            let mut p = vec![u * (raw[0] - 1) as f64, v * (raw[1] - 1) as f64];
            if raw.len() == 3 {
                p.push(0.5 * (raw[2] - 1) as f64);
            }
            p
        })
        .collect()
}

fn inside_with_margin(curve: &Polyline, raw: &[usize], margin: f64) -> bool {
    curve.points.iter().all(|p| {
        p.iter()
            .zip(raw)
            .all(|(&c, &d)| c >= margin && c <= (d - 1) as f64 - margin)
    })
}

/// Clamp intensities to `[clip_lo, clip_hi]` and map affinely onto `[0, 1]`.
pub fn preprocess(raw: &Tensor, clip_lo: f64, clip_hi: f64) -> Result<Tensor> {
    if !(clip_lo < clip_hi) {
        return Err(Error::InvalidArgument(format!(
            "clip range [{clip_lo}, {clip_hi}] is empty"
        )));
    }
    Ok(raw.map(|v| (v.clamp(clip_lo, clip_hi) - clip_lo) / (clip_hi - clip_lo)))
}

/// Center-crop or zero-pad a `[C, spatial...]` tensor to `dims`. Returns the
/// result and the per-axis offset that maps old coordinates to new ones.
pub fn center_crop_pad(t: &Tensor, dims: &[usize]) -> Result<(Tensor, Vec<isize>)> {
    let shape = t.shape();
    if shape.len() != dims.len() + 1 {
        return Err(Error::shape(
            "spatial",
            format!("cannot fit {shape:?} into {dims:?}"),
        ));
    }
    let src = &shape[1..];
    let offset: Vec<isize> = dims
        .iter()
        .zip(src)
        .map(|(&d, &s)| (d as isize - s as isize).div_euclid(2))
        .collect();
    let mut out_shape = vec![shape[0]];
    out_shape.extend_from_slice(dims);
    let mut out = Tensor::zeros(&out_shape);
    let src_vol: usize = src.iter().product();
    let dst_vol: usize = dims.iter().product();
    for c in 0..shape[0] {
        for i in 0..dst_vol {
            let idx = crate::heatmap::unravel(i, dims);
            let mut si = 0usize;
            let mut inside = true;
            for ((&v, &o), &s) in idx.iter().zip(&offset).zip(src) {
                let p = v as isize - o;
                if p < 0 || p >= s as isize {
                    inside = false;
                    break;
                }
                si = si * s + p as usize;
            }
            if inside {
                out.data_mut()[c * dst_vol + i] = t.data()[c * src_vol + si];
            }
        }
    }
    Ok((out, offset))
}

/// Generate one phantom, fully determined by `seed` and `params`.
pub fn generate_sample(seed: u64, params: &GenParams) -> Result<SyntheticSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = params.raw().to_vec();
    let d = raw.len();
    let [rlo, rhi] = params.radius_range;
    let mid = 0.5 * (rlo + rhi);
    let radius_start = rng.random_range(mid..=rhi);
    let radius_end = rng.random_range(rlo..=mid);

    let canon = canonical_controls(&raw);
    let mut attempts = 0;
    let (ctrl, curve) = loop {
        attempts += 1;
        let ctrl: Vec<Vec<f64>> = canon
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&c| c + params.jitter * (2.0 * rng.random::<f64>() - 1.0))
                    .collect()
            })
            .collect();
        let curve = Polyline::new(catmull_rom(&ctrl, SAMPLES_PER_SEGMENT));
        if inside_with_margin(&curve, &raw, radius_start + 1.0) {
            break (ctrl, curve);
        }
        if attempts >= MAX_CURVE_ATTEMPTS {
            return Err(Error::Data(format!(
                "curve leaves the {raw:?} volume after {attempts} jitter draws; reduce jitter"
            )));
        }
    };

    let len = curve.length();
    let landmark_arc: Vec<f64> = LANDMARK_FRACTIONS
        .iter()
        .map(|&f| {
            let j = params.landmark_jitter * (2.0 * rng.random::<f64>() - 1.0);
            (f + j / len).clamp(0.0, 1.0)
        })
        .collect();

    // Raw HU field: soft-edged tube, distractor blobs, background noise.
    let vol: usize = raw.iter().product();
    let mut hu = vec![params.background_hu; vol];
    let mut mask = vec![0.0; vol];
    let contrast = params.tube_hu - params.background_hu;
    for (i, v) in hu.iter_mut().enumerate() {
        let x: Vec<f64> = crate::heatmap::unravel(i, &raw)
            .into_iter()
            .map(|c| c as f64)
            .collect();
        let (dd, s) = curve.closest(&x);
        let r = radius_start + (radius_end - radius_start) * s;
        *v += contrast / (1.0 + ((dd - r) / EDGE_SOFTNESS).exp());
        if dd <= r {
            mask[i] = 1.0;
        }
    }
    for _ in 0..params.distractors {
        let c: Vec<f64> = raw
            .iter()
            .map(|&n| rng.random_range(0.0..(n - 1) as f64))
            .collect();
        let rad = rng.random_range(rlo..=rhi + 1.0);
        let amp = contrast * rng.random_range(0.5..0.9);
        for (i, v) in hu.iter_mut().enumerate() {
            let x = crate::heatmap::unravel(i, &raw);
            let r2: f64 = x.iter().zip(&c).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
            *v += amp * (-r2 / (2.0 * rad * rad)).exp();
        }
    }
    if params.noise_hu > 0.0 {
        let normal = Normal::new(0.0, params.noise_hu).expect("validated noise std");
        for v in hu.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let mut shape = vec![1];
    shape.extend_from_slice(&raw);
    let raw_img = Tensor::new(shape.clone(), hu)?;
    let raw_mask = Tensor::new(shape, mask)?;
    let (image, offset) =
        center_crop_pad(&preprocess(&raw_img, HU_CLIP.0, HU_CLIP.1)?, &params.dims)?;
    let (mask, _) = center_crop_pad(&raw_mask, &params.dims)?;

    let coords: Vec<Vec<f64>> = landmark_arc
        .iter()
        .map(|&f| {
            curve
                .at_fraction(f)
                .iter()
                .zip(&offset)
                .zip(&params.dims)
                .map(|((c, &o), &n)| (c.round() + o as f64).clamp(0.0, (n - 1) as f64))
                .collect()
        })
        .collect();
    let landmarks = LandmarkSet::new(coords, vec![params.spacing; d])?;

    Ok(SyntheticSample {
        id: String::new(),
        image,
        landmarks,
        mask,
        gen_seed: seed,
        deformation: Deformation {
            control_points: ctrl,
            radius_start,
            radius_end,
            landmark_arc,
            offset,
            attempts,
        },
    })
}

/// Centerline of a generated sample in output voxel coordinates.
pub fn sample_curve(sample: &SyntheticSample) -> Polyline {
    let pts = catmull_rom(&sample.deformation.control_points, SAMPLES_PER_SEGMENT)
        .into_iter()
        .map(|p| {
            p.iter()
                .zip(&sample.deformation.offset)
                .map(|(c, &o)| c + o as f64)
                .collect()
        })
        .collect();
    Polyline::new(pts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: SyntheticSample,
    /// A rotated landmark fell outside the grid and was clamped.
    pub clamped: bool,
}

/// Training-time augmentation: rotation by a uniform angle in
/// `±max_angle_deg` about the grid center (in the axis 0/1 plane), then
/// additive Gaussian noise re-clamped to `[0, 1]`.
pub fn augment<R: Rng>(
    sample: &SyntheticSample,
    rng: &mut R,
    noise_std: f64,
    max_angle_deg: f64,
) -> Result<Augmented> {
    if !(noise_std >= 0.0) || !(max_angle_deg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_std {noise_std} and max_angle_deg {max_angle_deg} must be non-negative"
        )));
    }
    let angle = (2.0 * rng.random::<f64>() - 1.0) * max_angle_deg;
    let mut out = rotate(sample, angle)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("checked std");
        for v in out.sample.image.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Rotate image (bilinear, edge clamp), mask (nearest) and landmarks by
/// `angle_deg` in the axis 0/1 plane about the grid center.
pub fn rotate(sample: &SyntheticSample, angle_deg: f64) -> Result<Augmented> {
    if angle_deg == 0.0 {
        return Ok(Augmented {
            sample: sample.clone(),
            clamped: false,
        });
    }
    let spatial = sample.spatial().to_vec();
    let (h, w) = (spatial[0], spatial[1]);
    let depth: usize = spatial[2..].iter().product();
    let (c0, c1) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();

    let mut image = Tensor::zeros(sample.image.shape());
    let mut mask = Tensor::zeros(sample.mask.shape());
    let src = sample.image.data();
    let src_mask = sample.mask.data();
    let at = |y: usize, x: usize, z: usize| (y * w + x) * depth + z;
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the output point by -angle.
            let (dy, dx) = (y as f64 - c0, x as f64 - c1);
            let sy = (cos * dy + sin * dx + c0).clamp(0.0, (h - 1) as f64);
            let sx = (-sin * dy + cos * dx + c1).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let (ny, nx) = (sy.round() as usize, sx.round() as usize);
            for z in 0..depth {
                let v = (1.0 - fy) * ((1.0 - fx) * src[at(y0, x0, z)] + fx * src[at(y0, x1, z)])
                    + fy * ((1.0 - fx) * src[at(y1, x0, z)] + fx * src[at(y1, x1, z)]);
                image.data_mut()[at(y, x, z)] = v;
                mask.data_mut()[at(y, x, z)] = src_mask[at(ny, nx, z)];
            }
        }
    }

    let mut clamped = false;
    let coords = sample
        .landmarks
        .coords
        .iter()
        .map(|p| {
            let (dy, dx) = (p[0] - c0, p[1] - c1);
            let mut q = p.clone();
            q[0] = cos * dy - sin * dx + c0;
            q[1] = sin * dy + cos * dx + c1;
            for (v, &n) in q.iter_mut().zip(&spatial) {
                let c = v.clamp(0.0, (n - 1) as f64);
                clamped |= c != *v;
                *v = c;
            }
            q
        })
        .collect();
    let landmarks = LandmarkSet::with_presence(
        coords,
        sample.landmarks.spacing.clone(),
        sample.landmarks.present.clone(),
    )?;
    Ok(Augmented {
        sample: SyntheticSample {
            image,
            mask,
            landmarks,
            ..sample.clone()
        },
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub gen_seed: u64,
    pub image: String,
    pub landmarks: String,
    pub mask: String,
    pub digest: String,
    pub deformation: Deformation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub params: GenParams,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub params: GenParams,
    pub seed: u64,
    pub samples: Vec<SyntheticSample>,
}

/// Per-sample generator seeds derived from a dataset seed.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn generate_dataset(n: usize, seed: u64, params: &GenParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one sample".into(),
        ));
    }
    let samples = sample_seeds(seed, n)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut sample = generate_sample(s, params)?;
            sample.id = format!("s{i:04}");
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        params: params.clone(),
        seed,
        samples,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Write TNSR images/masks, landmark CSVs and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let entry = ManifestEntry {
                sample_id: s.id.clone(),
                gen_seed: s.gen_seed,
                image: format!("{}_image.tnsr", s.id),
                landmarks: format!("{}_landmarks.csv", s.id),
                mask: format!("{}_mask.tnsr", s.id),
                digest: s.digest(),
                deformation: s.deformation.clone(),
            };
            s.image.save(dir.join(&entry.image))?;
            s.landmarks.save_csv(dir.join(&entry.landmarks))?;
            s.mask.save(dir.join(&entry.mask))?;
            entries.push(entry);
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            params: self.params.clone(),
            seed: self.seed,
            samples: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Load a dataset directory, checking every sample against its digest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let spacing = vec![manifest.params.spacing; manifest.params.dim()];
        let samples = manifest
            .samples
            .iter()
            .map(|e| {
                let sample = SyntheticSample {
                    id: e.sample_id.clone(),
                    image: Tensor::load(dir.join(&e.image))?,
                    landmarks: LandmarkSet::load_csv(dir.join(&e.landmarks), spacing.clone())?,
                    mask: Tensor::load(dir.join(&e.mask))?,
                    gen_seed: e.gen_seed,
                    deformation: e.deformation.clone(),
                };
                if sample.digest() != e.digest {
                    return Err(Error::Data(format!(
                        "sample {} does not match its manifest digest",
                        e.sample_id
                    )));
                }
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: manifest.params,
            seed: manifest.seed,
            samples,
        })
    }

    /// Regenerate every sample from its seed and compare digests.
    pub fn verify_rebuild(&self) -> Result<()> {
        for s in &self.samples {
            let fresh = generate_sample(s.gen_seed, &self.params)?;
            if fresh.digest() != s.digest() {
                return Err(Error::Data(format!(
                    "sample {} does not regenerate from seed {}",
                    s.id, s.gen_seed
                )));
            }
        }
        Ok(())
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.samples
            .iter()
            .map(|s| (s.id.clone(), s.digest()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds() {
        let raw = Tensor::from_vec(vec![-1000.0, 1000.0, 0.0, -3000.0, 2500.0]);
        let p = preprocess(&raw, -1000.0, 1000.0).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(preprocess(&raw, 1.0, 1.0).is_err());
    }

    #[test]
    fn pad_centers_content() {
        let mut t = Tensor::zeros(&[1, 90, 90]);
        t.set(&[0, 0, 0], 7.0);
        t.set(&[0, 89, 45], 2.0);
        let (p, off) = center_crop_pad(&t, &[96, 96]).unwrap();
        assert_eq!(off, vec![3, 3]);
        assert_eq!(p.get(&[0, 3, 3]), 7.0);
        assert_eq!(p.get(&[0, 92, 48]), 2.0);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn crop_then_pad_restores_center() {
        let t = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (c, off) = center_crop_pad(&t, &[2, 2]).unwrap();
        assert_eq!(off, vec![-1, -1]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn same_seed_same_sample() {
        let p = GenParams::default();
        let a = generate_sample(42, &p).unwrap();
        let b = generate_sample(42, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.digest(), generate_sample(43, &p).unwrap().digest());
    }

    #[test]
    fn catmull_rom_interpolates_controls() {
        let ctrl = vec![
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![3.0, 2.0],
            vec![4.0, 0.0],
        ];
        let pts = catmull_rom(&ctrl, 10);
        assert_eq!(pts.len(), 31);
        for (k, c) in ctrl.iter().enumerate() {
            let p = &pts[k * 10];
            assert!(dist(p, c) < 1e-12, "{p:?} vs {c:?}");
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let s = generate_sample(1, &GenParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, &mut rng, 0.0, 0.0).unwrap();
        assert_eq!(a.sample, s);
        assert!(!a.clamped);
    }

    #[test]
    fn bad_params_listed() {
        let p = GenParams {
            dims: vec![30, 96],
            radius_range: [1.0, 0.5],
            noise_hu: -1.0,
            ..GenParams::default()
        };
        match p.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }
}
