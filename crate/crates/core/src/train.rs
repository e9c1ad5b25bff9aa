//! Composite loss, AdamW, learning-rate and erasure schedules, the training
//! loop and k-fold cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, SIGMA_H_ENTRY, SIGMA_T_ENTRY};
use crate::error::{Error, Result};
use crate::eval::{localization_error, summarize_method, MethodSummary};
use crate::heatmap::{
    extract_peaks, heatmap_mse, render_gaussian, sigma_regularizer, GaussianSpec, LandmarkSet,
    Peaks, SigmaParams, SigmaRole, DEFAULT_AMPLITUDE, DEFAULT_SIGMA_INIT,
};
use crate::network::{
    backbone_forward, head_forward, predict_heatmaps, select_visible, ArchConfig, ParamStore,
    SelectionMask,
};
use crate::synth::{augment, SyntheticSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the reconstruction (implicit topology) term.
    pub alpha: f64,
    /// Weight of the `‖σ‖²` penalty on both width vectors.
    pub beta: f64,
    /// Target amplitude `A`.
    pub amplitude: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-4,
            amplitude: DEFAULT_AMPLITUDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Additive Gaussian noise std, in normalized intensity units.
    pub noise_std: f64,
    pub max_angle_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            max_angle_deg: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to conv weights only.
    pub weight_decay: f64,
    /// Learning-rate multiplier for the `log σ` parameters.
    pub sigma_lr_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            sigma_lr_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Initial Gaussian width in voxels, for both width vectors.
    pub sigma_init: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_max: f64,
    /// Iterations per half-cycle of the triangular schedule; a quarter of
    /// `iterations` when absent.
    pub lr_cycle: Option<usize>,
    /// Erasure probability reached at the last iteration.
    pub p_final: f64,
    pub folds: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sigma_init: DEFAULT_SIGMA_INIT,
            iterations: 2000,
            batch_size: 2,
            lr_base: 2e-3,
            lr_max: 1e-2,
            lr_cycle: None,
            p_final: 0.5,
            folds: 5,
            seed: 0,
            arch: ArchConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parse a JSON config. Missing keys take their defaults; every unknown
    /// key is reported, not just the first.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
        let reference = serde_json::to_value(TrainConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown
                    .into_iter()
                    .map(|k| format!("unknown key `{k}`"))
                    .collect(),
            ));
        }
        let cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn half_cycle(&self) -> usize {
        self.lr_cycle.unwrap_or((self.iterations / 4).max(1))
    }

    /// Same config with the reconstruction term switched off.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.weights.alpha = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.iterations == 0 {
            problems.push("iterations must be > 0".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be > 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.p_final) {
            problems.push(format!("p_final must lie in [0, 1], got {}", self.p_final));
        }
        if !(self.lr_base > 0.0 && self.lr_base <= self.lr_max) {
            problems.push(format!(
                "need 0 < lr_base <= lr_max, got {} and {}",
                self.lr_base, self.lr_max
            ));
        }
        if self.lr_cycle == Some(0) {
            problems.push("lr_cycle must be > 0".to_string());
        }
        if self.folds < 2 {
            problems.push(format!("folds must be >= 2, got {}", self.folds));
        }
        if !(self.sigma_init > 0.0) {
            problems.push(format!(
                "sigma_init must be positive, got {}",
                self.sigma_init
            ));
        }
        let w = &self.weights;
        for (name, v) in [
            ("weights.alpha", w.alpha),
            ("weights.beta", w.beta),
            ("weights.amplitude", w.amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            problems.push(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                a.beta1, a.beta2
            ));
        }
        if !(a.eps > 0.0 && a.weight_decay >= 0.0 && a.sigma_lr_scale >= 0.0) {
            problems.push("adam eps must be > 0, weight_decay and sigma_lr_scale >= 0".to_string());
        }
        if !(self.augment.noise_std >= 0.0 && self.augment.max_angle_deg >= 0.0) {
            problems.push("augment values must be >= 0".to_string());
        }
        if let Err(Error::Config(p)) = self.arch.validate() {
            problems.extend(p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn unknown_keys(value: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(obj), Value::Object(known)) = (value, reference) else {
        return;
    };
    for (k, v) in obj {
        let full = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match known.get(k) {
            Some(r) => unknown_keys(v, r, &full, out),
            None => out.push(full),
        }
    }
}

/// Triangular cyclic learning rate; `lr(0) = lr_base`, `lr(half) = lr_max`.
pub fn cyclic_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let half = cfg.half_cycle();
    let pos = iter % (2 * half);
    let frac = if pos <= half { pos } else { 2 * half - pos } as f64 / half as f64;
    cfg.lr_base * (1.0 - frac) + cfg.lr_max * frac
}

/// Linear ramp of the erasure probability from 0 to `p_final`.
pub fn erasure_schedule(iter: usize, total: usize, p_final: f64) -> f64 {
    p_final * (iter.min(total) as f64 / total.max(1) as f64)
}

/// One sample's contribution to the loss.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub pred: Var,
    /// Head output; `None` when the head is skipped (`α = 0`).
    pub head_pred: Option<Var>,
    pub landmarks: &'a LandmarkSet,
    pub mask: &'a SelectionMask,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub reg: Var,
    pub it: Var,
    /// `‖σʰ‖² + ‖σʰ̃‖²`, before weighting.
    pub sigma: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub reg: f64,
    pub it: f64,
    pub sigma: f64,
}

/// `L = L_reg + α·L_it + β·(‖σʰ‖² + ‖σʰ̃‖²)` for a single sample.
pub fn total_loss(
    tape: &mut Tape,
    item: LossItem,
    log_sigma_h: Var,
    log_sigma_t: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    batch_loss(tape, &[item], log_sigma_h, log_sigma_t, w)
}

/// As [`total_loss`], with `L_reg` and `L_it` averaged over the batch.
pub fn batch_loss(
    tape: &mut Tape,
    items: &[LossItem],
    log_sigma_h: Var,
    log_sigma_t: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut reg_terms = Vec::with_capacity(items.len());
    let mut it_terms = Vec::new();
    for item in items {
        let spatial = tape.shape(item.pred)[1..].to_vec();
        let spec = GaussianSpec::new(w.amplitude, spatial.len())?;
        let target_h = render_gaussian(tape, item.landmarks, log_sigma_h, spec, &spatial)?;
        reg_terms.push(heatmap_mse(
            tape,
            item.pred,
            target_h,
            Some(&item.landmarks.present),
        )?);
        if let Some(head) = item.head_pred {
            let target_t = render_gaussian(tape, item.landmarks, log_sigma_t, spec, &spatial)?;
            let include: Vec<bool> = item
                .mask
                .missing()
                .iter()
                .zip(&item.landmarks.present)
                .map(|(m, p)| m & p)
                .collect();
            it_terms.push(heatmap_mse(tape, head, target_t, Some(&include))?);
        }
    }
    let reg = mean_of(tape, &reg_terms)?;
    let it = if it_terms.is_empty() {
        tape.leaf(Tensor::scalar(0.0), false)
    } else {
        // Samples without a head output contribute zero.
        let s = sum_of(tape, &it_terms)?;
        tape.mul_scalar(s, 1.0 / items.len() as f64)
    };
    let rh = sigma_regularizer(tape, log_sigma_h);
    let rt = sigma_regularizer(tape, log_sigma_t);
    let sigma = tape.add(rh, rt)?;
    let weighted_it = tape.mul_scalar(it, w.alpha);
    let weighted_sigma = tape.mul_scalar(sigma, w.beta);
    let partial = tape.add(reg, weighted_it)?;
    let total = tape.add(partial, weighted_sigma)?;
    Ok(LossVars {
        total,
        reg,
        it,
        sigma,
    })
}

fn sum_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let s = sum_of(tape, vars)?;
    Ok(tape.mul_scalar(s, 1.0 / vars.len() as f64))
}

/// Read the loss components, failing on the first non-finite one.
pub fn loss_values(tape: &Tape, vars: &LossVars) -> Result<LossValues> {
    let get = |v: Var, name: &str| {
        let x = tape.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite(format!("{name} ({x})")))
        }
    };
    Ok(LossValues {
        reg: get(vars.reg, "L_reg")?,
        it: get(vars.it, "L_it")?,
        sigma: get(vars.sigma, "sigma penalty")?,
        total: get(vars.total, "total loss")?,
    })
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::shape(
            "gradient",
            format!("{} params vs {} grads", param.len(), grad.len()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p *= 1.0 - lr * weight_decay;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a parameter store and both width vectors.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update. Every gradient is checked before anything changes,
    /// so a non-finite gradient leaves the model untouched.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        sigma_h: &mut SigmaParams,
        sigma_t: &mut SigmaParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let missing = |n: &str| Error::InvalidArgument(format!("no gradient for {n}"));
        self.step += 1;
        let (t, betas, eps) = (self.step, (self.cfg.beta1, self.cfg.beta2), self.cfg.eps);
        for (name, entry) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| missing(name))?;
            let wd = if entry.decay {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let st = self.state.entry(name.clone()).or_default();
            adamw_step(entry.tensor.data_mut(), g.data(), st, t, lr, betas, eps, wd)?;
        }
        let slr = lr * self.cfg.sigma_lr_scale;
        for (name, s) in [(SIGMA_H_ENTRY, sigma_h), (SIGMA_T_ENTRY, sigma_t)] {
            let g = grads.get(name).ok_or_else(|| missing(name))?;
            let st = self.state.entry(name.to_string()).or_default();
            adamw_step(&mut s.log_sigma, g.data(), st, t, slr, betas, eps, 0.0)?;
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Batch = 2,
    Augment = 3,
    Selection = 4,
    Derive = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for sub-run `index` (a fold) of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = stream_rng(seed, Stream::Derive);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub p: f64,
    pub loss: f64,
    pub l_reg: f64,
    pub l_it: f64,
    pub sigma_h: Vec<f64>,
    pub sigma_t: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self, m: usize) -> String {
        let mut s = String::from("iter,lr,p,L,L_reg,L_it");
        for prefix in ["sigma_h", "sigma_t"] {
            for i in 1..=m {
                write!(s, ",{prefix}_{i}").unwrap();
            }
        }
        s.push('\n');
        for r in &self.records {
            write!(
                s,
                "{},{},{},{},{},{}",
                r.iter, r.lr, r.p, r.loss, r.l_reg, r.l_it
            )
            .unwrap();
            for v in r.sigma_h.iter().chain(&r.sigma_t) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, m: usize) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(m)).map_err(|e| Error::io(path, e))
    }
}

/// Result of one training run. When `abort` is set the checkpoint holds the
/// last parameters for which the loss and gradients were finite.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub abort: Option<String>,
}

fn check_data(cfg: &TrainConfig, samples: &[SyntheticSample], idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| {
            Error::Data(format!(
                "sample index {i} out of range ({} samples)",
                samples.len()
            ))
        })?;
        if s.landmarks.len() != cfg.arch.landmarks {
            return Err(Error::Data(format!(
                "sample {} has {} landmarks, model expects {}",
                s.id,
                s.landmarks.len(),
                cfg.arch.landmarks
            )));
        }
        if s.spatial().len() != cfg.arch.dim {
            return Err(Error::Data(format!(
                "sample {} is {}-d, model is {}-d",
                s.id,
                s.spatial().len(),
                cfg.arch.dim
            )));
        }
        cfg.arch.check_input_dims(s.spatial())?;
    }
    Ok(())
}

/// Train backbone, head and both width vectors on `samples[train_idx]`.
///
/// Fully determined by `cfg.seed`: parameter init, batch sampling,
/// augmentation and selection each draw from their own stream, and every
/// iteration consumes the same draws whatever `α` is. With `α = 0` the head
/// forward is skipped (its gradient would be exactly zero) and `L_it` is
/// logged as 0.
pub fn train(
    cfg: &TrainConfig,
    samples: &[SyntheticSample],
    train_idx: &[usize],
) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(cfg, samples, train_idx)?;
    let m = cfg.arch.landmarks;
    let mut params = ParamStore::init(&cfg.arch, cfg.seed)?;
    let mut sigma_h = SigmaParams::new(cfg.sigma_init, m, SigmaRole::Regression);
    let mut sigma_t = SigmaParams::new(cfg.sigma_init, m, SigmaRole::Topology);
    let mut opt = AdamW::new(cfg.adam.clone());
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batch);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);
    let mut sel_rng = stream_rng(cfg.seed, Stream::Selection);
    let use_head = cfg.weights.alpha != 0.0;
    let mut log = TrainLog::default();

    for iter in 0..cfg.iterations {
        let lr = cyclic_lr(iter, cfg);
        let p = erasure_schedule(iter, cfg.iterations, cfg.p_final);

        let mut tape = Tape::new();
        let binds = params.bind(&mut tape);
        let lsh = tape.leaf(sigma_h.tensor(), true);
        let lst = tape.leaf(sigma_t.tensor(), true);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = train_idx[batch_rng.random_range(0..train_idx.len())];
            let aug = augment(
                &samples[idx],
                &mut aug_rng,
                cfg.augment.noise_std,
                cfg.augment.max_angle_deg,
            )?;
            let x = tape.leaf(aug.sample.image, false);
            let pred = backbone_forward(&mut tape, x, &binds, &cfg.arch)?;
            let (visible, mask) = select_visible(&mut tape, pred, p, &mut sel_rng)?;
            let head_pred = if use_head {
                Some(head_forward(&mut tape, visible, &binds, &cfg.arch)?)
            } else {
                None
            };
            batch.push((pred, head_pred, aug.sample.landmarks, mask));
        }
        let items: Vec<LossItem> = batch
            .iter()
            .map(|(pred, head_pred, landmarks, mask)| LossItem {
                pred: *pred,
                head_pred: *head_pred,
                landmarks,
                mask,
            })
            .collect();
        let vars = batch_loss(&mut tape, &items, lsh, lst, &cfg.weights)?;
        let values = match loss_values(&tape, &vars) {
            Ok(v) => v,
            Err(e) => return Ok(aborted(iter, e, params, sigma_h, sigma_t, log)),
        };
        log.records.push(LogRecord {
            iter,
            lr,
            p,
            loss: values.total,
            l_reg: values.reg,
            l_it: values.it,
            sigma_h: sigma_h.sigmas(),
            sigma_t: sigma_t.sigmas(),
        });

        tape.backward(vars.total)?;
        let mut grads: BTreeMap<String, Tensor> = binds
            .iter()
            .map(|(k, &v)| {
                (
                    k.clone(),
                    tape.grad(v).expect("bound parameters require grad"),
                )
            })
            .collect();
        grads.insert(
            SIGMA_H_ENTRY.into(),
            tape.grad(lsh).expect("sigma requires grad"),
        );
        grads.insert(
            SIGMA_T_ENTRY.into(),
            tape.grad(lst).expect("sigma requires grad"),
        );
        drop(tape);
        // `apply` validates every gradient before touching any parameter.
        if let Err(e) = opt.apply(&mut params, &mut sigma_h, &mut sigma_t, &grads, lr) {
            return Ok(aborted(iter, e, params, sigma_h, sigma_t, log));
        }
        if iter % 200 == 0 || iter + 1 == cfg.iterations {
            log::debug!(
                "iter {iter} lr {lr:.2e} p {p:.3} L {:.4} L_reg {:.4} L_it {:.4}",
                values.total,
                values.reg,
                values.it
            );
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint {
            params,
            sigma_h,
            sigma_t,
        },
        log,
        abort: None,
    })
}

fn aborted(
    iter: usize,
    e: Error,
    params: ParamStore,
    sigma_h: SigmaParams,
    sigma_t: SigmaParams,
    log: TrainLog,
) -> TrainRun {
    TrainRun {
        checkpoint: Checkpoint {
            params,
            sigma_h,
            sigma_t,
        },
        log,
        abort: Some(format!("iteration {iter}: {e}")),
    }
}

/// Backbone heatmaps and their peaks for one image.
pub fn predict_landmarks(
    ck: &Checkpoint,
    arch: &ArchConfig,
    image: &Tensor,
    spacing: &[f64],
) -> Result<Peaks> {
    let stack = predict_heatmaps(&ck.params, arch, image)?;
    extract_peaks(&stack.maps, spacing)
}

/// `errors[k][landmark]` in mm for `samples[idx[k]]`.
pub fn evaluate(
    ck: &Checkpoint,
    arch: &ArchConfig,
    samples: &[SyntheticSample],
    idx: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if idx.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    idx.iter()
        .map(|&i| {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            let peaks = predict_landmarks(ck, arch, &s.image, &s.landmarks.spacing)?;
            localization_error(&peaks.landmarks, &s.landmarks)
        })
        .collect()
}

/// Validation indices of each fold: a seeded shuffle cut into `folds`
/// contiguous chunks whose sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if n < folds {
        return Err(Error::Data(format!(
            "{n} samples cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = n / folds + usize::from(f < n % folds);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    Ok(out)
}

/// Training indices complementary to a validation fold.
pub fn complement(n: usize, val: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| val.binary_search(i).is_err()).collect()
}

#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub val: Vec<usize>,
    pub run: TrainRun,
    /// `errors[k][landmark]` for `val[k]`, in mm.
    pub errors: Vec<Vec<f64>>,
    pub mean_error: f64,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Pooled over every validation prediction.
    pub summary: MethodSummary,
}

/// Train and evaluate one fold. Fold `f` trains with `derive_seed(cfg.seed, f)`,
/// so two configs differing only in loss weights see identical data.
pub fn run_fold(
    cfg: &TrainConfig,
    samples: &[SyntheticSample],
    fold: usize,
    val: &[usize],
) -> Result<FoldReport> {
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, fold as u64);
    let train_idx = complement(samples.len(), val);
    let run = train(&fold_cfg, samples, &train_idx)?;
    if let Some(reason) = &run.abort {
        return Err(Error::NonFinite(format!("fold {fold}, {reason}")));
    }
    let errors = evaluate(&run.checkpoint, &cfg.arch, samples, val)?;
    let flat: Vec<f64> = errors.concat();
    let mean_error = flat.iter().sum::<f64>() / flat.len() as f64;
    Ok(FoldReport {
        fold,
        val: val.to_vec(),
        run,
        errors,
        mean_error,
    })
}

pub fn crossvalidate(
    cfg: &TrainConfig,
    samples: &[SyntheticSample],
    method: &str,
) -> Result<CvReport> {
    cfg.validate()?;
    let assignment = fold_assignment(samples.len(), cfg.folds, cfg.seed)?;
    let folds = assignment
        .iter()
        .enumerate()
        .map(|(f, val)| run_fold(cfg, samples, f, val))
        .collect::<Result<Vec<_>>>()?;
    cv_summary(method, folds)
}

pub fn cv_summary(method: &str, folds: Vec<FoldReport>) -> Result<CvReport> {
    let all: Vec<Vec<f64>> = folds.iter().flat_map(|f| f.errors.clone()).collect();
    let summary = summarize_method(method, &all)?;
    Ok(CvReport { folds, summary })
}
