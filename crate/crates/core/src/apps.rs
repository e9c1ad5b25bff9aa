//! Downstream uses of predicted landmarks on a binary vessel mask: exact
//! distance transform, medial shortest-path centerline between L1 and L4,
//! and division into ascending / arch / descending segments at L2 and L3.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::unravel;
use crate::tensor::Tensor;

/// Added to the distance transform in the edge cost so boundary voxels
/// never divide by zero.
pub const DT_EPSILON: f64 = 0.1;
/// Seeds outside the mask snap to foreground within this radius (voxels).
pub const SNAP_RADIUS: f64 = 3.0;
/// L2 and L3 must lie within this many voxels of the centerline.
pub const MAX_BOUNDARY_DISTANCE: f64 = 10.0;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_ASCENDING: u8 = 1;
pub const LABEL_ARCH: u8 = 2;
pub const LABEL_DESCENDING: u8 = 3;

/// Spatial dims of a mask given as `[spatial...]` or `[1, spatial...]`.
fn mask_dims(mask: &Tensor) -> Result<Vec<usize>> {
    let s = mask.shape();
    let dims = if s.len() >= 3 && s[0] == 1 {
        &s[1..]
    } else {
        s
    };
    if dims.len() != 2 && dims.len() != 3 {
        return Err(Error::UnsupportedRank(dims.len()));
    }
    Ok(dims.to_vec())
}

fn is_fg(v: f64) -> bool {
    v > 0.5
}

/// 1-D squared distance transform (lower envelope of parabolas) of `f`,
/// where `f` is 0 on sites and infinite elsewhere, or a partial result.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64))
                        / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance (voxels) from each foreground voxel to the
/// nearest background voxel of the grid; 0 on background. Voxels outside
/// the grid do not count as background.
pub fn distance_transform(mask: &Tensor) -> Result<Tensor> {
    let dims = mask_dims(mask)?;
    let fg = mask.data().iter().filter(|&&v| is_fg(v)).count();
    if fg == 0 {
        return Err(Error::Data("distance transform of an empty mask".into()));
    }
    if fg == mask.numel() {
        return Err(Error::Data(
            "distance transform needs at least one background voxel".into(),
        ));
    }
    let mut g: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if is_fg(v) { f64::INFINITY } else { 0.0 })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..dims.len() {
        let n = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let (mut line, mut res) = (vec![0.0; n], vec![0.0; n]);
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * n * stride + inner;
                for i in 0..n {
                    line[i] = g[base + i * stride];
                }
                edt_1d(&line, &mut res, &mut v, &mut z);
                for i in 0..n {
                    g[base + i * stride] = res[i];
                }
            }
        }
    }
    Tensor::new(
        mask.shape().to_vec(),
        g.into_iter().map(f64::sqrt).collect(),
    )
}

fn ravel(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Offsets of the 8- (2D) or 26- (3D) neighbourhood with their lengths.
fn neighbourhood(d: usize) -> Vec<(Vec<isize>, f64)> {
    let mut out = Vec::new();
    let total = 3usize.pow(d as u32);
    for k in 0..total {
        let off: Vec<isize> = unravel(k, &vec![3; d])
            .into_iter()
            .map(|v| v as isize - 1)
            .collect();
        if off.iter().all(|&o| o == 0) {
            continue;
        }
        let len = (off.iter().map(|o| (o * o) as f64).sum::<f64>()).sqrt();
        out.push((off, len));
    }
    out
}

fn step(idx: &[usize], off: &[isize], dims: &[usize]) -> Option<Vec<usize>> {
    idx.iter()
        .zip(off)
        .zip(dims)
        .map(|((&i, &o), &d)| {
            let j = i as isize + o;
            (j >= 0 && j < d as isize).then_some(j as usize)
        })
        .collect()
}

/// Nearest foreground voxel to `seed` within [`SNAP_RADIUS`]; ties go to
/// the lowest linear index.
pub fn snap_seed(mask: &Tensor, seed: &[f64]) -> Result<Vec<usize>> {
    let dims = mask_dims(mask)?;
    if seed.len() != dims.len() {
        return Err(Error::shape(
            "seed",
            format!("{}-d seed for a {}-d mask", seed.len(), dims.len()),
        ));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        if !is_fg(v) {
            continue;
        }
        let p = unravel(i, &dims);
        let d2: f64 = p
            .iter()
            .zip(seed)
            .map(|(&a, b)| (a as f64 - b).powi(2))
            .sum();
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, i));
        }
    }
    match best {
        Some((d2, i)) if d2.sqrt() <= SNAP_RADIUS => Ok(unravel(i, &dims)),
        Some((d2, _)) => Err(Error::Data(format!(
            "seed {seed:?} is {:.2} voxels from the mask (limit {SNAP_RADIUS})",
            d2.sqrt()
        ))),
        None => Err(Error::Data("mask has no foreground".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centerline {
    /// Voxel path from seed A to seed B.
    pub points: Vec<Vec<usize>>,
    /// Distance to the mask boundary at each point, in voxels.
    pub dt: Vec<f64>,
    pub length_mm: f64,
    /// Summed edge cost of the path.
    pub cost: f64,
}

impl Centerline {
    pub fn to_csv(&self) -> String {
        let axes = ["x", "y", "z"];
        let d = self.points.first().map_or(2, Vec::len);
        let mut s = String::from("index");
        for a in &axes[..d] {
            write!(s, ",{a}").unwrap();
        }
        s.push_str(",dt\n");
        for (i, (p, dt)) in self.points.iter().zip(&self.dt).enumerate() {
            write!(s, "{i}").unwrap();
            for c in p {
                write!(s, ",{c}").unwrap();
            }
            writeln!(s, ",{dt}").unwrap();
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(PartialEq)]
struct Item {
    cost: f64,
    index: usize,
}

impl Eq for Item {}

impl Ord for Item {
    // Min-heap on cost, then on voxel index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cost of stepping from one voxel to a neighbour `len` away whose distance
/// transform is `dt`.
pub fn edge_cost(len: f64, dt: f64) -> f64 {
    len / (dt + DT_EPSILON)
}

/// Minimal-cost path through the mask between two seeds (snapped to the
/// mask first). `spacing` converts the path length to mm.
pub fn extract_centerline(
    mask: &Tensor,
    seed_a: &[f64],
    seed_b: &[f64],
    spacing: &[f64],
) -> Result<Centerline> {
    let dims = mask_dims(mask)?;
    if spacing.len() != dims.len() {
        return Err(Error::shape(
            "spacing",
            format!("{} spacings for a {}-d mask", spacing.len(), dims.len()),
        ));
    }
    let a = snap_seed(mask, seed_a)?;
    let b = snap_seed(mask, seed_b)?;
    let dt = distance_transform(mask)?;
    let (ia, ib) = (ravel(&a, &dims), ravel(&b, &dims));
    let n = mask.numel();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let nb = neighbourhood(dims.len());
    dist[ia] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Item {
        cost: 0.0,
        index: ia,
    });
    while let Some(Item { cost, index }) = heap.pop() {
        if cost > dist[index] {
            continue;
        }
        if index == ib {
            break;
        }
        let p = unravel(index, &dims);
        for (off, len) in &nb {
            let Some(q) = step(&p, off, &dims) else {
                continue;
            };
            let j = ravel(&q, &dims);
            if !is_fg(mask.data()[j]) {
                continue;
            }
            let c = cost + edge_cost(*len, dt.data()[j]);
            if c < dist[j] {
                dist[j] = c;
                prev[j] = index;
                heap.push(Item { cost: c, index: j });
            }
        }
    }
    if !dist[ib].is_finite() {
        return Err(Error::NoPath { from: a, to: b });
    }
    let mut path = vec![ib];
    while *path.last().unwrap() != ia {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    let points: Vec<Vec<usize>> = path.iter().map(|&i| unravel(i, &dims)).collect();
    let length_mm = points
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .zip(spacing)
                .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(Centerline {
        dt: path.iter().map(|&i| dt.data()[i]).collect(),
        points,
        length_mm,
        cost: dist[ib],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubregionLabels {
    /// Same shape as the mask; see the `LABEL_*` codes.
    pub labels: Tensor,
    /// Centerline indices nearest to L2 and L3.
    pub boundary_index: [usize; 2],
    /// Arc length from seed A to each boundary, in mm.
    pub boundary_arc_mm: [f64; 2],
    /// Both boundaries project to the same point, so the arch is empty.
    pub arch_empty: bool,
}

fn sq_dist(p: &[usize], x: &[f64]) -> f64 {
    p.iter().zip(x).map(|(&a, b)| (a as f64 - b).powi(2)).sum()
}

/// Index of the centerline point nearest to `x`; ties go to the point with
/// the lowest voxel index so the answer does not depend on path direction.
fn nearest_point(points: &[Vec<usize>], dims: &[usize], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY, usize::MAX);
    for (k, p) in points.iter().enumerate() {
        let d = sq_dist(p, x);
        let lin = ravel(p, dims);
        if d < best.1 || (d == best.1 && lin < best.2) {
            best = (k, d, lin);
        }
    }
    (best.0, best.1.sqrt())
}

/// Label every foreground voxel by the segment holding its nearest
/// centerline point. The arch spans the points from the L2 boundary to the
/// L3 boundary inclusive; the rest of the path on L2's side is ascending,
/// on L3's side descending.
pub fn subdivide(
    mask: &Tensor,
    centerline: &Centerline,
    l2: &[f64],
    l3: &[f64],
    spacing: &[f64],
) -> Result<SubregionLabels> {
    let dims = mask_dims(mask)?;
    let pts = &centerline.points;
    if pts.is_empty() {
        return Err(Error::InvalidArgument("empty centerline".into()));
    }
    let mut idx = [0usize; 2];
    for (slot, (name, l)) in [("L2", l2), ("L3", l3)].into_iter().enumerate() {
        let (k, d) = nearest_point(pts, &dims, l);
        if d > MAX_BOUNDARY_DISTANCE {
            return Err(Error::Data(format!(
                "{name} is {d:.2} voxels from the centerline (limit {MAX_BOUNDARY_DISTANCE})"
            )));
        }
        idx[slot] = k;
    }
    let [i2, i3] = idx;
    let (lo, hi) = (i2.min(i3), i2.max(i3));
    let arch_empty = i2 == i3;
    let l2_first = i2 <= i3;
    let label_of = |k: usize| -> u8 {
        if !arch_empty && (lo..=hi).contains(&k) {
            LABEL_ARCH
        } else if (k <= lo) == l2_first {
            LABEL_ASCENDING
        } else {
            LABEL_DESCENDING
        }
    };
    let mut labels = Tensor::zeros(mask.shape());
    for (i, &v) in mask.data().iter().enumerate() {
        if !is_fg(v) {
            continue;
        }
        let x: Vec<f64> = unravel(i, &dims).into_iter().map(|c| c as f64).collect();
        let (k, _) = nearest_point(pts, &dims, &x);
        labels.data_mut()[i] = f64::from(label_of(k));
    }
    let arc_to = |k: usize| -> f64 {
        pts[..=k]
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .zip(spacing)
                    .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    };
    Ok(SubregionLabels {
        labels,
        boundary_index: [i2, i3],
        boundary_arc_mm: [arc_to(i2), arc_to(i3)],
        arch_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, fg: impl Fn(usize, usize) -> bool) -> Tensor {
        let data = (0..h * w)
            .map(|i| if fg(i / w, i % w) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn single_voxel_distance_one() {
        let m = grid(5, 5, |y, x| (y, x) == (2, 2));
        let dt = distance_transform(&m).unwrap();
        assert_eq!(dt.get(&[2, 2]), 1.0);
        assert_eq!(dt.get(&[0, 0]), 0.0);
    }

    #[test]
    fn strip_center_distance_three() {
        let m = grid(15, 20, |y, _| (5..10).contains(&y));
        let dt = distance_transform(&m).unwrap();
        assert_eq!(dt.get(&[7, 10]), 3.0);
        assert_eq!(dt.get(&[5, 0]), 1.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(distance_transform(&grid(4, 4, |_, _| false)).is_err());
    }

    #[test]
    fn same_seed_single_point() {
        let m = grid(7, 7, |y, x| (2..5).contains(&y) && (1..6).contains(&x));
        let c = extract_centerline(&m, &[3.0, 3.0], &[3.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.points, vec![vec![3, 3]]);
        assert_eq!(c.length_mm, 0.0);
    }

    #[test]
    fn disconnected_seeds() {
        let m = grid(5, 9, |y, x| y == 2 && x != 4);
        assert!(matches!(
            extract_centerline(&m, &[2.0, 0.0], &[2.0, 8.0], &[1.0, 1.0]),
            Err(Error::NoPath { .. })
        ));
    }

    #[test]
    fn far_seed_is_rejected() {
        let m = grid(20, 20, |y, x| y < 3 && x < 3);
        assert!(snap_seed(&m, &[15.0, 15.0]).is_err());
        assert_eq!(snap_seed(&m, &[4.0, 1.0]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn coincident_boundaries_empty_arch() {
        let m = grid(9, 12, |y, _| (3..6).contains(&y));
        let c = extract_centerline(&m, &[4.0, 0.0], &[4.0, 11.0], &[1.0, 1.0]).unwrap();
        let s = subdivide(&m, &c, &[4.0, 6.0], &[4.0, 6.0], &[1.0, 1.0]).unwrap();
        assert!(s.arch_empty);
        assert!(!s.labels.data().contains(&f64::from(LABEL_ARCH)));
    }
}
