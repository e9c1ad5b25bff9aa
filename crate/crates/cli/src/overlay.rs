//! Binary PGM renders of an image with heatmap contours and peak markers.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use topoland::heatmap::LandmarkSet;
use topoland::Tensor;

const CONTOUR: u8 = 255;
const MARKER: u8 = 0;

/// One 2D slice: `(rows, cols, pixels)`.
fn slice(t: &Tensor, channel: usize, z: Option<usize>) -> (usize, usize, Vec<f64>) {
    let s = &t.shape()[1..];
    let (h, w) = (s[0], s[1]);
    let ch = t.channel(channel);
    let px = match z {
        None => ch.to_vec(),
        Some(z) => (0..h * w).map(|i| ch[i * s[2] + z]).collect(),
    };
    (h, w, px)
}

/// Encode an 8-bit greyscale image as binary PGM (`P5`).
pub fn pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Render the image with each channel's half-maximum contour and a cross
/// at each peak. 2D images give `overlay.pgm`; 3D images give one file per
/// distinct peak slice along the last axis.
pub fn write_overlays(
    dir: &Path,
    image: &Tensor,
    maps: &Tensor,
    peaks: &LandmarkSet,
) -> Result<Vec<PathBuf>> {
    let three_d = image.rank() == 4;
    let mut slices: Vec<Option<usize>> = if three_d {
        peaks.coords.iter().map(|c| Some(c[2] as usize)).collect()
    } else {
        vec![None]
    };
    slices.sort_unstable();
    slices.dedup();
    let mut written = Vec::new();
    for z in slices {
        let (h, w, img) = slice(image, 0, z);
        let mut px: Vec<u8> = img
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 200.0).round() as u8)
            .collect();
        for c in 0..maps.shape()[0] {
            let (_, _, m) = slice(maps, c, z);
            let peak = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if peak.is_nan() || peak <= 0.0 {
                continue;
            }
            let inside: Vec<bool> = m.iter().map(|&v| v >= 0.5 * peak).collect();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let edge = inside[i]
                        && ((y > 0 && !inside[i - w])
                            || (y + 1 < h && !inside[i + w])
                            || (x > 0 && !inside[i - 1])
                            || (x + 1 < w && !inside[i + 1]));
                    if edge {
                        px[i] = CONTOUR;
                    }
                }
            }
        }
        for p in &peaks.coords {
            if three_d && Some(p[2] as usize) != z {
                continue;
            }
            let (py, pxx) = (p[0] as isize, p[1] as isize);
            for d in -2isize..=2 {
                for (y, x) in [(py + d, pxx), (py, pxx + d)] {
                    if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                        px[y as usize * w + x as usize] = MARKER;
                    }
                }
            }
        }
        let name = match z {
            None => "overlay.pgm".to_string(),
            Some(z) => format!("overlay_z{z:03}.pgm"),
        };
        let path = dir.join(name);
        std::fs::write(&path, pgm(h, w, &px))
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
