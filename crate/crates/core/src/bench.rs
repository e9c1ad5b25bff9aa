//! Paired comparison of the implicit-topology variant against the `α = 0`
//! baseline under k-fold cross-validation.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metrics_csv, MethodSummary};
use crate::network::{layout_param_count, ParamGroup};
use crate::synth::SyntheticSample;
use crate::train::{cv_summary, fold_assignment, run_fold, CvReport, FoldReport, TrainConfig};

pub const BASELINE: &str = "baseline";
pub const LIT: &str = "lit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldComparison {
    pub fold: usize,
    pub n_val: usize,
    pub baseline_mean_mm: f64,
    pub lit_mean_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub folds: Vec<FoldComparison>,
    pub backbone_params: usize,
    pub head_params: usize,
    /// `head_params / backbone_params`.
    pub overhead_ratio: f64,
    pub overhead_percent: f64,
    /// Folds where the LIT mean error is at most the baseline's.
    pub lit_wins: usize,
    pub baseline: MethodSummary,
    pub lit: MethodSummary,
}

pub struct BenchReport {
    pub summary: BenchSummary,
    pub baseline: CvReport,
    pub lit: CvReport,
}

impl BenchSummary {
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,n_val,baseline_mean_mm,lit_mean_mm\n");
        for f in &self.folds {
            writeln!(
                s,
                "{},{},{},{}",
                f.fold, f.n_val, f.baseline_mean_mm, f.lit_mean_mm
            )
            .unwrap();
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&[self.baseline.clone(), self.lit.clone()])
    }
}

/// Worker count from `TOPOLAND_THREADS`, default 1.
pub fn thread_budget() -> usize {
    std::env::var("TOPOLAND_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Train the baseline and LIT variants on every fold. Fold `f` of both
/// variants uses the same derived seed, so they see the same batches,
/// augmentations and erasure draws. Jobs run on up to `threads` workers;
/// results do not depend on the worker count.
pub fn run_bench(
    cfg: &TrainConfig,
    samples: &[SyntheticSample],
    threads: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.weights.alpha == 0.0 {
        return Err(Error::Config(vec![
            "bench needs weights.alpha > 0 for the LIT variant".into(),
        ]));
    }
    let assignment = fold_assignment(samples.len(), cfg.folds, cfg.seed)?;
    let variants = [cfg.baseline(), cfg.clone()];
    let jobs: Vec<(usize, usize)> = (0..assignment.len())
        .flat_map(|f| [(f, 0), (f, 1)])
        .collect();
    let results: Mutex<Vec<Option<Result<FoldReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(fold, v)) = jobs.get(j) else { break };
                log::info!(
                    "fold {fold}: training {}",
                    if v == 0 { BASELINE } else { LIT }
                );
                let r = run_fold(&variants[v], samples, fold, &assignment[fold]);
                results.lock().expect("no worker panicked")[j] = Some(r);
            });
        }
    });
    let mut base_folds = Vec::new();
    let mut lit_folds = Vec::new();
    for (r, &(_, v)) in results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .zip(&jobs)
    {
        let r = r.expect("every job ran")?;
        if v == 0 {
            base_folds.push(r);
        } else {
            lit_folds.push(r);
        }
    }
    let folds: Vec<FoldComparison> = base_folds
        .iter()
        .zip(&lit_folds)
        .map(|(b, l)| FoldComparison {
            fold: b.fold,
            n_val: b.val.len(),
            baseline_mean_mm: b.mean_error,
            lit_mean_mm: l.mean_error,
        })
        .collect();
    let baseline = cv_summary(BASELINE, base_folds)?;
    let lit = cv_summary(LIT, lit_folds)?;
    let backbone_params = layout_param_count(&cfg.arch, ParamGroup::Backbone);
    let head_params = layout_param_count(&cfg.arch, ParamGroup::Head);
    let ratio = head_params as f64 / backbone_params as f64;
    let summary = BenchSummary {
        lit_wins: folds
            .iter()
            .filter(|f| f.lit_mean_mm <= f.baseline_mean_mm)
            .count(),
        folds,
        backbone_params,
        head_params,
        overhead_ratio: ratio,
        overhead_percent: 100.0 * ratio,
        baseline: baseline.summary.clone(),
        lit: lit.summary.clone(),
    };
    Ok(BenchReport {
        summary,
        baseline,
        lit,
    })
}
