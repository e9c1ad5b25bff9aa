//! Localization error metrics: per-landmark Euclidean errors in mm, summary
//! statistics, empirical CDFs and the metrics CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;

/// Euclidean distance in mm between matching landmarks.
pub fn localization_error(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "landmarks",
            format!(
                "{} predicted vs {} ground-truth landmarks",
                pred.len(),
                truth.len()
            ),
        ));
    }
    if pred.spacing != truth.spacing {
        return Err(Error::shape(
            "spacing",
            format!("{:?} vs {:?}", pred.spacing, truth.spacing),
        ));
    }
    Ok(pred
        .coords
        .iter()
        .zip(&truth.coords)
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .zip(&truth.spacing)
                .map(|((a, b), s)| ((a - b) * s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    /// `(error, fraction of errors <= error)` at every distinct error.
    pub cdf: Vec<(f64, f64)>,
    /// Sorted raw errors.
    pub errors: Vec<f64>,
}

pub fn error_summary(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument(
            "error summary of an empty list".into(),
        ));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("localization errors".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n as f64;
        match cdf.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => cdf.push((e, frac)),
        }
    }
    Ok(ErrorSummary {
        median,
        mean,
        std: var.sqrt(),
        n,
        cdf,
        errors: sorted,
    })
}

pub fn cdf_to_csv(summary: &ErrorSummary) -> String {
    let mut s = String::from("error_mm,fraction\n");
    for (e, f) in &summary.cdf {
        writeln!(s, "{e},{f}").unwrap();
    }
    s
}

pub fn cdf_export(summary: &ErrorSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cdf_to_csv(summary)).map_err(|e| Error::io(path, e))
}

pub fn parse_cdf(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("error_mm,fraction") {
        return Err(Error::Format(
            "CDF CSV must start with `error_mm,fraction`".into(),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad CDF row `{l}`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{v}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// Expand a CDF over `n` errors back into the sorted error list.
pub fn errors_from_cdf(cdf: &[(f64, f64)], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for &(e, f) in cdf {
        let upto = (f * n as f64).round() as usize;
        while out.len() < upto {
            out.push(e);
        }
    }
    out
}

/// Per-landmark and pooled summaries for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_landmark: Vec<ErrorSummary>,
    pub pooled: ErrorSummary,
}

/// Summarize `errors[sample][landmark]`.
pub fn summarize_method(method: &str, errors: &[Vec<f64>]) -> Result<MethodSummary> {
    let m = errors.first().map_or(0, Vec::len);
    if m == 0 || errors.iter().any(|e| e.len() != m) {
        return Err(Error::InvalidArgument(
            "errors need the same non-zero landmark count per sample".into(),
        ));
    }
    let per_landmark = (0..m)
        .map(|l| error_summary(&errors.iter().map(|e| e[l]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let pooled = error_summary(&errors.concat())?;
    Ok(MethodSummary {
        method: method.to_string(),
        per_landmark,
        pooled,
    })
}

pub const METRICS_HEADER: &str = "method,landmark,median_mm,mean_mm,std_mm,n";

/// Metrics table with one row per landmark (`L1`..) and one pooled row (`all`).
pub fn metrics_csv(methods: &[MethodSummary]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in methods {
        let rows = m
            .per_landmark
            .iter()
            .enumerate()
            .map(|(i, e)| (format!("L{}", i + 1), e))
            .chain(std::iter::once(("all".to_string(), &m.pooled)));
        for (name, e) in rows {
            writeln!(
                s,
                "{},{name},{},{},{},{}",
                m.method, e.median, e.mean, e.std, e.n
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let a = LandmarkSet::new(vec![vec![0.0, 0.0]], vec![1.8, 1.8]).unwrap();
        let b = LandmarkSet::new(vec![vec![3.0, 4.0]], vec![1.8, 1.8]).unwrap();
        let e = localization_error(&a, &b).unwrap();
        assert!((e[0] - 9.0).abs() < 1e-12);
        assert_eq!(localization_error(&a, &a).unwrap(), vec![0.0]);
    }

    #[test]
    fn landmark_count_mismatch() {
        let a = LandmarkSet::new(vec![vec![0.0, 0.0]], vec![1.0, 1.0]).unwrap();
        let b = LandmarkSet::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![1.0, 1.0]).unwrap();
        assert!(localization_error(&a, &b).is_err());
    }

    #[test]
    fn small_summaries() {
        let s = error_summary(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.median, s.mean), (2.0, 2.0));
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let s = error_summary(&[5.0; 4]).unwrap();
        assert_eq!((s.median, s.std), (5.0, 0.0));
        assert_eq!(s.cdf, vec![(5.0, 1.0)]);
        assert_eq!(error_summary(&[4.0, 1.0]).unwrap().median, 2.5);
        assert!(error_summary(&[]).is_err());
    }

    #[test]
    fn cdf_rows() {
        let s = error_summary(&[2.0, 1.0]).unwrap();
        assert_eq!(cdf_to_csv(&s), "error_mm,fraction\n1,0.5\n2,1\n");
        let one = error_summary(&[0.7]).unwrap();
        assert_eq!(one.cdf, vec![(0.7, 1.0)]);
    }

    #[test]
    fn metrics_header_and_rows() {
        let m = summarize_method("lit", &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let csv = metrics_csv(&[m]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,landmark,median_mm,mean_mm,std_mm,n");
        assert_eq!(lines[1], "lit,L1,2,2,1,2");
        assert_eq!(lines[3], "lit,all,2.5,2.5,1.118033988749895,4");
    }
}
