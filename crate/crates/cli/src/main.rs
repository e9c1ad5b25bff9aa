use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use topoland::apps::{extract_centerline, subdivide};
use topoland::bench::{run_bench, thread_budget};
use topoland::checkpoint::Checkpoint;
use topoland::eval::{cdf_export, metrics_csv, summarize_method};
use topoland::heatmap::LandmarkSet;
use topoland::network::{predict_heatmaps, ParamStore};
use topoland::synth::{generate_dataset, Dataset, GenParams, MANIFEST_FILE};
use topoland::train::{
    complement, derive_seed, evaluate, fold_assignment, predict_landmarks, train, TrainConfig,
};
use topoland::{Error, Tensor};

mod manifest;
mod overlay;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "topoland",
    version,
    about = "Heatmap landmark localization with an implicit-topology auxiliary task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train backbone and head on a dataset split.
    Train(TrainArgs),
    /// Localization metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict landmarks for one image.
    Infer(InferArgs),
    /// Centerline and sub-region labels for one sample.
    Apps(AppsArgs),
    /// Cross-validated comparison against the alpha = 0 baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size such as `96x96` or `48x32x32`.
    #[arg(long)]
    dims: Option<String>,
    /// JSON file with generator parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the baseline: sets weights.alpha to 0.
    #[arg(long)]
    no_lit: bool,
    /// `all`, `train:K` or `val:K` for fold K.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "all")]
    split: String,
    /// Defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    method: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Voxel size in mm.
    #[arg(long, default_value_t = 1.8)]
    spacing: f64,
    /// Also write PGM renders with heatmap contours and peak markers.
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AppsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sample directory with `image.tnsr` and `mask.tnsr`, or a dataset
    /// directory when `--id` is given.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    id: Option<String>,
    /// Use these landmarks instead of inferring them.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.8)]
    spacing: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Usage or configuration problem in the CLI itself (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownGroup(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Apps(a) => cmd_apps(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Create `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?),
        None => Ok(TrainConfig::default()),
    }
}

/// Config stored next to a checkpoint unless one is given explicitly.
fn config_for_ckpt(explicit: Option<&Path>, ckpt: &Path) -> Result<TrainConfig> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join("config.json");
    if beside.exists() {
        load_config(Some(&beside))
    } else {
        Ok(TrainConfig::default())
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("dataset {}", dir.display()))
}

/// Resolve a split spec against the dataset size and the config's folds.
fn resolve_split(spec: &str, n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Option<usize>)> {
    if spec == "all" {
        return Ok(((0..n).collect(), None));
    }
    let (kind, k) = spec.split_once(':').ok_or_else(|| {
        usage(format!(
            "split `{spec}` must be `all`, `train:K` or `val:K`"
        ))
    })?;
    let k: usize = k
        .parse()
        .map_err(|_| usage(format!("bad fold index in split `{spec}`")))?;
    let folds = fold_assignment(n, cfg.folds, cfg.seed)?;
    let val = folds
        .get(k)
        .ok_or_else(|| usage(format!("fold {k} out of range for {} folds", cfg.folds)))?;
    match kind {
        "val" => Ok((val.clone(), Some(k))),
        "train" => Ok((complement(n, val), Some(k))),
        _ => Err(usage(format!(
            "split kind `{kind}` must be `train` or `val`"
        ))),
    }
}

fn check_arch(ck: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    let expected = ParamStore::init(&cfg.arch, 0)?.shapes();
    let found = ck.params.shapes();
    if expected != found {
        let diff: Vec<String> = expected
            .iter()
            .filter(|(k, v)| found.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}: config {v:?} vs checkpoint {:?}", found.get(k)))
            .chain(
                found
                    .keys()
                    .filter(|k| !expected.contains_key(*k))
                    .map(|k| format!("{k}: not in config")),
            )
            .take(8)
            .collect();
        return Err(Error::Data(format!(
            "checkpoint does not match the config architecture: {}",
            diff.join("; ")
        ))
        .into());
    }
    Ok(())
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad dims `{s}`")))
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let start = Instant::now();
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut params = match &a.params {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<GenParams>(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => GenParams::default(),
    };
    if let Some(d) = &a.dims {
        params.dims = parse_dims(d)?;
        if params.dims.len() == 3 && a.params.is_none() {
            params = GenParams {
                dims: params.dims,
                ..GenParams::desk_3d()
            };
        }
    }
    params.validate()?;
    prepare_out(&a.out, a.force)?;
    let ds = generate_dataset(a.n, a.seed, &params)?;
    ds.save(&a.out)?;
    let mut m = RunManifest::new("synth", serde_json::to_value(&params)?, a.seed);
    m.outputs.push(a.out.join(MANIFEST_FILE));
    m.finish(&a.out, start)?;
    log::info!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(a.config.as_deref())?;
    if a.no_lit {
        cfg.weights.alpha = 0.0;
    }
    let ds = load_dataset(&a.data)?;
    let (idx, fold) = resolve_split(&a.split, ds.samples.len(), &cfg)?;
    prepare_out(&a.out, a.force)?;
    let mut run_cfg = cfg.clone();
    if let Some(k) = fold {
        run_cfg.seed = derive_seed(cfg.seed, k as u64);
    }
    let run = train(&run_cfg, &ds.samples, &idx)?;
    let ckpt = a.out.join("checkpoint.tlck");
    let log_path = a.out.join("trainlog.csv");
    run.checkpoint.save(&ckpt)?;
    run.log.save_csv(&log_path, cfg.arch.landmarks)?;
    write(&a.out.join("config.json"), &(cfg.to_json() + "\n"))?;
    let mut m = RunManifest::new("train", serde_json::to_value(&cfg)?, cfg.seed);
    if let Some(c) = &a.config {
        m.add_input(c)?;
    }
    m.add_input(&a.data.join(MANIFEST_FILE))?;
    m.outputs
        .extend([ckpt, log_path, a.out.join("config.json")]);
    m.finish(&a.out, start)?;
    if let Some(reason) = run.abort {
        return Err(Error::NonFinite(format!(
            "training aborted at {reason}; last good checkpoint saved"
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = config_for_ckpt(a.config.as_deref(), &a.ckpt)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    check_arch(&ck, &cfg)?;
    let ds = load_dataset(&a.data)?;
    let (idx, _) = resolve_split(&a.split, ds.samples.len(), &cfg)?;
    if idx.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", a.split)).into());
    }
    prepare_out(&a.out, a.force)?;
    let errors = evaluate(&ck, &cfg.arch, &ds.samples, &idx)?;
    let summary = summarize_method(&a.method, &errors)?;
    let metrics = a.out.join("metrics.csv");
    let cdf = a.out.join("cdf.csv");
    write(&metrics, &metrics_csv(std::slice::from_ref(&summary)))?;
    cdf_export(&summary.pooled, &cdf)?;
    let mut m = RunManifest::new("eval", serde_json::to_value(&cfg)?, cfg.seed);
    m.add_input(&a.ckpt)?;
    m.add_input(&a.data.join(MANIFEST_FILE))?;
    m.outputs.extend([metrics, cdf]);
    m.finish(&a.out, start)?;
    log::info!(
        "{}: pooled median {:.3} mm, mean {:.3} ± {:.3} mm over {} landmarks",
        a.method,
        summary.pooled.median,
        summary.pooled.mean,
        summary.pooled.std,
        summary.pooled.n
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = config_for_ckpt(a.config.as_deref(), &a.ckpt)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    check_arch(&ck, &cfg)?;
    let image = Tensor::load(&a.image)?;
    let spacing = vec![a.spacing; cfg.arch.dim];
    let stack = predict_heatmaps(&ck.params, &cfg.arch, &image)?;
    let peaks = topoland::heatmap::extract_peaks(&stack.maps, &spacing)?;
    prepare_out(&a.out, a.force)?;
    let csv = a.out.join("landmarks.csv");
    peaks.landmarks.save_csv(&csv)?;
    let mut m = RunManifest::new("infer", serde_json::to_value(&cfg)?, cfg.seed);
    m.add_input(&a.ckpt)?;
    m.add_input(&a.image)?;
    m.outputs.push(csv);
    if a.overlay {
        m.outputs.extend(overlay::write_overlays(
            &a.out,
            &image,
            &stack.maps,
            &peaks.landmarks,
        )?);
    }
    m.finish(&a.out, start)?;
    Ok(())
}

fn cmd_apps(a: AppsArgs) -> Result<()> {
    let start = Instant::now();
    let (image_path, mask_path) = match &a.id {
        Some(id) => {
            let text = std::fs::read_to_string(a.sample.join(MANIFEST_FILE))
                .with_context(|| format!("dataset manifest in {}", a.sample.display()))?;
            let manifest: topoland::synth::DatasetManifest =
                serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
            let e = manifest
                .samples
                .iter()
                .find(|e| &e.sample_id == id)
                .ok_or_else(|| Error::Data(format!("sample {id} not in {}", a.sample.display())))?;
            (a.sample.join(&e.image), a.sample.join(&e.mask))
        }
        None => (a.sample.join("image.tnsr"), a.sample.join("mask.tnsr")),
    };
    let sample_name =
        a.id.clone()
            .unwrap_or_else(|| a.sample.display().to_string());
    if !mask_path.exists() {
        return Err(Error::Data(format!(
            "sample {sample_name}: mask file {} is missing",
            mask_path.display()
        ))
        .into());
    }
    let cfg = config_for_ckpt(a.config.as_deref(), &a.ckpt)?;
    let spacing = vec![a.spacing; cfg.arch.dim];
    let landmarks = match &a.landmarks {
        Some(p) => LandmarkSet::load_csv(p, spacing.clone())?,
        None => {
            let ck = Checkpoint::load(&a.ckpt)?;
            check_arch(&ck, &cfg)?;
            let image = Tensor::load(&image_path)?;
            predict_landmarks(&ck, &cfg.arch, &image, &spacing)?.landmarks
        }
    };
    if landmarks.len() < 4 {
        bail!(Error::Data(format!(
            "sample {sample_name}: need 4 landmarks, got {}",
            landmarks.len()
        )));
    }
    let mask = Tensor::load(&mask_path)?;
    let c = &landmarks.coords;
    let centerline = extract_centerline(&mask, &c[0], &c[3], &spacing)
        .with_context(|| format!("sample {sample_name}: centerline"))?;
    let labels = subdivide(&mask, &centerline, &c[1], &c[2], &spacing)
        .with_context(|| format!("sample {sample_name}: sub-region division"))?;
    if labels.arch_empty {
        log::warn!(
            "sample {sample_name}: L2 and L3 project to the same centerline point; arch is empty"
        );
    }
    prepare_out(&a.out, a.force)?;
    let paths = [
        a.out.join("landmarks.csv"),
        a.out.join("centerline.csv"),
        a.out.join("labels.tnsr"),
        a.out.join("apps.json"),
    ];
    landmarks.save_csv(&paths[0])?;
    centerline.save_csv(&paths[1])?;
    labels.labels.save(&paths[2])?;
    let info = serde_json::json!({
        "centerline_points": centerline.points.len(),
        "centerline_length_mm": centerline.length_mm,
        "boundary_index": labels.boundary_index,
        "boundary_arc_mm": labels.boundary_arc_mm,
        "arch_empty": labels.arch_empty,
    });
    write(&paths[3], &(serde_json::to_string_pretty(&info)? + "\n"))?;
    let mut m = RunManifest::new("apps", serde_json::to_value(&cfg)?, cfg.seed);
    if a.landmarks.is_none() {
        m.add_input(&a.ckpt)?;
    }
    m.add_input(&image_path)?;
    m.add_input(&mask_path)?;
    if let Some(p) = &a.landmarks {
        m.add_input(p)?;
    }
    m.outputs.extend(paths);
    m.finish(&a.out, start)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(a.config.as_deref())?;
    let ds = load_dataset(&a.data)?;
    prepare_out(&a.out, a.force)?;
    let report = run_bench(&cfg, &ds.samples, thread_budget())?;
    let s = &report.summary;
    let mut outputs = vec![
        a.out.join("bench.json"),
        a.out.join("folds.csv"),
        a.out.join("metrics.csv"),
        a.out.join("cdf_baseline.csv"),
        a.out.join("cdf_lit.csv"),
    ];
    write(&outputs[0], &(serde_json::to_string_pretty(s)? + "\n"))?;
    write(&outputs[1], &s.folds_csv())?;
    write(&outputs[2], &s.metrics_csv())?;
    cdf_export(&s.baseline.pooled, &outputs[3])?;
    cdf_export(&s.lit.pooled, &outputs[4])?;
    for (name, cv) in [("baseline", &report.baseline), ("lit", &report.lit)] {
        for f in &cv.folds {
            let ck = a.out.join(format!("fold{}_{name}.tlck", f.fold));
            let log_path = a.out.join(format!("fold{}_{name}_log.csv", f.fold));
            f.run.checkpoint.save(&ck)?;
            f.run.log.save_csv(&log_path, cfg.arch.landmarks)?;
            outputs.extend([ck, log_path]);
        }
    }
    write(&a.out.join("config.json"), &(cfg.to_json() + "\n"))?;
    outputs.push(a.out.join("config.json"));
    let mut m = RunManifest::new("bench", serde_json::to_value(&cfg)?, cfg.seed);
    if let Some(c) = &a.config {
        m.add_input(c)?;
    }
    m.add_input(&a.data.join(MANIFEST_FILE))?;
    m.outputs = outputs;
    m.finish(&a.out, start)?;
    for f in &s.folds {
        log::info!(
            "fold {}: baseline {:.3} mm, lit {:.3} mm",
            f.fold,
            f.baseline_mean_mm,
            f.lit_mean_mm
        );
    }
    log::info!(
        "pooled mean: baseline {:.3} mm, lit {:.3} mm; lit <= baseline in {}/{} folds; head adds {} params ({:.2}% of backbone)",
        s.baseline.pooled.mean,
        s.lit.pooled.mean,
        s.lit_wins,
        s.folds.len(),
        s.head_params,
        s.overhead_percent
    );
    Ok(())
}
