//! Gaussian heatmap targets with learnable widths, set-MSE between heatmap
//! stacks, and peak extraction back to landmark coordinates.
//!
//! Coordinates are voxel indices along the spatial axes in tensor order
//! (axis 0 first). Physical spacing only enters when converting errors to mm.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{GaussianTargets, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Amplitude used for target rendering unless configured otherwise.
pub const DEFAULT_AMPLITUDE: f64 = 1e6;
/// Initial Gaussian width in voxels.
pub const DEFAULT_SIGMA_INIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    /// `M` points, each with one coordinate per spatial axis.
    pub coords: Vec<Vec<f64>>,
    /// Physical size of a voxel along each axis, in mm.
    pub spacing: Vec<f64>,
    pub present: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(coords: Vec<Vec<f64>>, spacing: Vec<f64>) -> Result<Self> {
        let present = vec![true; coords.len()];
        Self::with_presence(coords, spacing, present)
    }

    pub fn with_presence(
        coords: Vec<Vec<f64>>,
        spacing: Vec<f64>,
        present: Vec<bool>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument(
                "a landmark set needs at least one landmark".into(),
            ));
        }
        if present.len() != coords.len() {
            return Err(Error::shape(
                "landmarks",
                "presence flags do not match landmark count",
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if coords.iter().any(|c| c.len() != spacing.len()) {
            return Err(Error::shape(
                "landmarks",
                format!("every landmark needs {} coordinates", spacing.len()),
            ));
        }
        Ok(Self {
            coords,
            spacing,
            present,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spacing.len()
    }

    /// Check every present landmark lies inside a grid of `spatial` voxels.
    pub fn check_bounds(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.dim() {
            return Err(Error::shape(
                "landmarks",
                format!("{}-d landmarks on a {}-d grid", self.dim(), spatial.len()),
            ));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !self.present[i] {
                continue;
            }
            for (axis, (&v, &s)) in c.iter().zip(spatial).enumerate() {
                if !(v >= 0.0 && v <= (s - 1) as f64) {
                    return Err(Error::Data(format!(
                        "landmark L{} coordinate {v} on axis {axis} outside [0, {}]",
                        i + 1,
                        s - 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coordinates in mm.
    pub fn physical(&self, i: usize) -> Vec<f64> {
        self.coords[i]
            .iter()
            .zip(&self.spacing)
            .map(|(c, s)| c * s)
            .collect()
    }

    /// Write the `id,x,y[,z]` landmark CSV. Absent landmarks get `nan` coordinates.
    pub fn to_csv(&self) -> String {
        let axes = ["x", "y", "z"];
        let mut s = String::from("id");
        for a in &axes[..self.dim()] {
            s.push(',');
            s.push_str(a);
        }
        s.push('\n');
        for (i, c) in self.coords.iter().enumerate() {
            write!(s, "{}", i + 1).unwrap();
            for v in c {
                if self.present[i] {
                    write!(s, ",{v}").unwrap();
                } else {
                    s.push_str(",nan");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, spacing: Vec<f64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty landmark CSV".into()))?;
        let expected = match spacing.len() {
            2 => "id,x,y",
            3 => "id,x,y,z",
            d => return Err(Error::UnsupportedRank(d)),
        };
        if header.trim() != expected {
            return Err(Error::Format(format!(
                "landmark CSV header `{header}`, expected `{expected}`"
            )));
        }
        let mut coords = Vec::new();
        let mut present = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != spacing.len() + 1 {
                return Err(Error::Format(format!(
                    "landmark CSV row {}: `{line}`",
                    row + 1
                )));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad landmark id `{}`", fields[0])))?;
            if id != row + 1 {
                return Err(Error::Format(format!(
                    "landmark ids must run 1..M in order, found {id} at row {}",
                    row + 1
                )));
            }
            let vals = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad coordinate `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            present.push(vals.iter().all(|v| v.is_finite()));
            coords.push(
                vals.iter()
                    .map(|v| if v.is_finite() { *v } else { 0.0 })
                    .collect(),
            );
        }
        Self::with_presence(coords, spacing, present)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, spacing: Vec<f64>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, spacing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRole {
    /// Widths of the regression targets.
    Regression,
    /// Widths of the reconstruction targets for erased landmarks.
    Topology,
}

/// Per-landmark Gaussian widths, stored as `log σ` so they stay positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaParams {
    pub log_sigma: Vec<f64>,
    pub role: SigmaRole,
}

impl SigmaParams {
    pub fn new(init: f64, landmarks: usize, role: SigmaRole) -> Self {
        Self {
            log_sigma: vec![init.ln(); landmarks],
            role,
        }
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.log_sigma.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub amplitude: f64,
    pub dim: usize,
}

impl GaussianSpec {
    pub fn new(amplitude: f64, dim: usize) -> Result<Self> {
        if !(amplitude > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "amplitude must be positive, got {amplitude}"
            )));
        }
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedRank(dim));
        }
        Ok(Self { amplitude, dim })
    }

    /// Peak value of a channel rendered with width `sigma`.
    pub fn peak(&self, sigma: f64) -> f64 {
        self.amplitude
            / ((2.0 * std::f64::consts::PI).powf(self.dim as f64 / 2.0)
                * sigma.powi(self.dim as i32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapKind {
    Predicted,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    /// `[M, spatial...]`
    pub maps: Tensor,
    pub kind: HeatmapKind,
}

impl HeatmapStack {
    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.maps.shape()[1..]
    }
}

/// Record target rendering on the tape; the result is differentiable in
/// `log_sigma` (a `[M]` leaf).
pub fn render_gaussian(
    tape: &mut Tape,
    landmarks: &LandmarkSet,
    log_sigma: Var,
    spec: GaussianSpec,
    spatial: &[usize],
) -> Result<Var> {
    if spatial.len() != spec.dim {
        return Err(Error::shape(
            "spatial",
            format!("{}-d grid for a {}-d Gaussian", spatial.len(), spec.dim),
        ));
    }
    landmarks.check_bounds(spatial)?;
    tape.render_gaussian(
        log_sigma,
        GaussianTargets {
            centers: landmarks.coords.clone(),
            present: landmarks.present.clone(),
            amplitude: spec.amplitude,
            spatial: spatial.to_vec(),
        },
    )
}

/// Render targets outside any training graph.
pub fn render_targets(
    landmarks: &LandmarkSet,
    sigma: &SigmaParams,
    spec: GaussianSpec,
    spatial: &[usize],
) -> Result<HeatmapStack> {
    let mut tape = Tape::new();
    let ls = tape.leaf(sigma.tensor(), false);
    let v = render_gaussian(&mut tape, landmarks, ls, spec, spatial)?;
    Ok(HeatmapStack {
        maps: tape.value(v).clone(),
        kind: HeatmapKind::Target,
    })
}

/// Set-MSE between two `[M, spatial...]` stacks, averaged over the included
/// channels (all of them when `channels` is `None`) and their voxels.
pub fn heatmap_mse(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    channels: Option<&[bool]>,
) -> Result<Var> {
    let m = tape.shape(pred).first().copied().unwrap_or(0);
    let tm = tape.shape(target).first().copied().unwrap_or(0);
    if m != tm {
        return Err(Error::shape(
            "channel axis",
            format!("{m} predicted vs {tm} target heatmaps"),
        ));
    }
    let all = vec![true; m];
    tape.mse_channels(pred, target, channels.unwrap_or(&all))
}

/// `Σ σ_i²`, differentiable through `log σ`.
pub fn sigma_regularizer(tape: &mut Tape, log_sigma: Var) -> Var {
    let sigma = tape.exp(log_sigma);
    tape.sum_squares(sigma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Peaks {
    pub landmarks: LandmarkSet,
    /// Channels whose maximum was not unique because the map is constant.
    pub flat: Vec<bool>,
}

/// Argmax per channel; ties go to the lowest row-major index.
pub fn extract_peaks(maps: &Tensor, spacing: &[f64]) -> Result<Peaks> {
    let spatial = &maps.shape()[1..];
    if spatial.len() != spacing.len() {
        return Err(Error::shape(
            "spacing",
            format!(
                "{} spacings for {}-d heatmaps",
                spacing.len(),
                spatial.len()
            ),
        ));
    }
    let m = maps.shape()[0];
    let mut coords = Vec::with_capacity(m);
    let mut flat = Vec::with_capacity(m);
    for c in 0..m {
        let ch = maps.channel(c);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate().skip(1) {
            if v > ch[best] {
                best = i;
            }
        }
        flat.push(ch.iter().all(|&v| v == ch[0]));
        coords.push(
            unravel(best, spatial)
                .into_iter()
                .map(|v| v as f64)
                .collect(),
        );
    }
    Ok(Peaks {
        landmarks: LandmarkSet::new(coords, spacing.to_vec())?,
        flat,
    })
}

pub fn unravel(mut index: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (o, &d) in out.iter_mut().zip(dims).rev() {
        *o = index % d;
        index /= d;
    }
    out
}
