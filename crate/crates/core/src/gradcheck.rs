//! Central finite-difference checks of tape gradients, plus the standard
//! suites run over every op and over the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GaussianTargets, Tape, Var};
use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::network::{
    backbone_forward, head_forward, ArchConfig, Bindings, ParamStore, SelectionMask,
};
use crate::tensor::Tensor;
use crate::train::{total_loss, LossItem, LossWeights};

/// Max over elements of `|analytic − numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the maximum is taken over the
/// elements of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, xs)?;
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Gradients of `f` with respect to each input, from one backward pass.
pub fn analytic_grads<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient after backward"))
        .collect())
}

/// Step used by [`op_checks`] and [`loss_graph_check`].
pub const STEP: f64 = 1e-5;

/// Outcome of one named gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Values in `[-1, -0.1] ∪ [0.1, 1]`, keeping every element away from the
/// ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduce `out` to a scalar against a fixed random target so the upstream
/// gradient differs between elements.
fn project(tape: &mut Tape, out: Var, target: &Tensor) -> Result<Var> {
    let t = tape.leaf(target.clone(), false);
    tape.mse_mean(out, t)
}

fn conv_case(
    rng: &mut ChaCha8Rng,
    input: &[usize],
    weight: &[usize],
    stride: usize,
    padding: usize,
) -> Result<f64> {
    let x = uniform(rng, input, -1.0, 1.0);
    let w = uniform(rng, weight, -1.0, 1.0);
    let b = uniform(rng, &weight[..1], -1.0, 1.0);
    let out_shape = {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(x.clone(), false),
            tape.leaf(w.clone(), false),
            tape.leaf(b.clone(), false),
        );
        let y = tape.conv(xv, wv, Some(bv), stride, padding)?;
        tape.shape(y).to_vec()
    };
    let target = uniform(rng, &out_shape, -1.0, 1.0);
    grad_check_many(
        |tape, v| {
            let y = tape.conv(v[0], v[1], Some(v[2]), stride, padding)?;
            project(tape, y, &target)
        },
        &[x, w, b],
        STEP,
    )
}

/// Finite-difference checks of every differentiable tape op on random
/// inputs drawn from `seed`.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let mut push = |name, r: Result<f64>| -> Result<()> {
        out.push(CheckResult {
            name,
            max_rel_error: r?,
        });
        Ok(())
    };

    push(
        "conv 2d 3x3 stride 1",
        conv_case(rng, &[2, 6, 9], &[3, 2, 3, 3], 1, 1),
    )?;
    push(
        "conv 2d 3x3 stride 2",
        conv_case(rng, &[2, 7, 6], &[3, 2, 3, 3], 2, 1),
    )?;
    push(
        "conv 2d 1x1",
        conv_case(rng, &[3, 4, 5], &[2, 3, 1, 1], 1, 0),
    )?;
    push(
        "conv 3d 3x3x3 stride 1",
        conv_case(rng, &[2, 4, 4, 5], &[2, 2, 3, 3, 3], 1, 1),
    )?;
    push(
        "conv 3d stride 2",
        conv_case(rng, &[1, 5, 4, 6], &[2, 1, 3, 3, 3], 2, 1),
    )?;

    let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    let target = uniform(rng, &[2, 6, 8], -1.0, 1.0);
    push(
        "upsample_nearest",
        grad_check(
            |tape, v| {
                let y = tape.upsample_nearest(v, 2)?;
                project(tape, y, &target)
            },
            &x,
            STEP,
        ),
    )?;

    let x = off_kink(rng, &[3, 5]);
    let target = uniform(rng, &[3, 5], -1.0, 1.0);
    push(
        "relu",
        grad_check(
            |tape, v| {
                let y = tape.relu(v);
                project(tape, y, &target)
            },
            &x,
            STEP,
        ),
    )?;

    let a = uniform(rng, &[2, 4], -1.0, 1.0);
    let b = uniform(rng, &[2, 4], -1.0, 1.0);
    let target = uniform(rng, &[2, 4], -1.0, 1.0);
    push(
        "add",
        grad_check_many(
            |tape, v| {
                let y = tape.add(v[0], v[1])?;
                project(tape, y, &target)
            },
            &[a.clone(), b.clone()],
            STEP,
        ),
    )?;
    push(
        "concat_channels",
        grad_check_many(
            |tape, v| {
                let y = tape.concat_channels(v[0], v[1])?;
                let z = tape.sum_squares(y);
                let s = tape.sum(y);
                tape.add(z, s)
            },
            &[a.clone(), uniform(rng, &[3, 4], -1.0, 1.0)],
            STEP,
        ),
    )?;
    push(
        "mul_scalar",
        grad_check(
            |tape, v| {
                let y = tape.mul_scalar(v, -1.7);
                project(tape, y, &target)
            },
            &a,
            STEP,
        ),
    )?;
    push(
        "exp",
        grad_check(
            |tape, v| {
                let y = tape.exp(v);
                project(tape, y, &target)
            },
            &a,
            STEP,
        ),
    )?;
    push(
        "sum",
        grad_check(
            |tape, v| {
                let y = tape.exp(v);
                Ok(tape.sum(y))
            },
            &a,
            STEP,
        ),
    )?;
    push(
        "sum_squares",
        grad_check(|tape, v| Ok(tape.sum_squares(v)), &a, STEP),
    )?;
    push(
        "mse_mean",
        grad_check_many(
            |tape, v| tape.mse_mean(v[0], v[1]),
            &[a.clone(), b.clone()],
            STEP,
        ),
    )?;

    let x = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    let y = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    push(
        "mse_channels",
        grad_check_many(
            |tape, v| tape.mse_channels(v[0], v[1], &[true, false, true]),
            &[x.clone(), y],
            STEP,
        ),
    )?;
    let target = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    push(
        "mask_channels",
        grad_check(
            |tape, v| {
                let y = tape.mask_channels(v, &[false, true, true])?;
                project(tape, y, &target)
            },
            &x,
            STEP,
        ),
    )?;
    let scale = uniform(rng, &[3], 0.5, 1.5);
    let shift = uniform(rng, &[3], -0.5, 0.5);
    push(
        "instance_norm",
        grad_check_many(
            |tape, v| {
                let y = tape.instance_norm(v[0], v[1], v[2], 1e-5)?;
                project(tape, y, &target)
            },
            &[x, scale, shift],
            STEP,
        ),
    )?;

    for (name, spatial) in [
        ("render_gaussian 2d", vec![8, 9]),
        ("render_gaussian 3d", vec![5, 6, 5]),
    ] {
        let centers: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                spatial
                    .iter()
                    .map(|&s| rng.random_range(0.0..(s - 1) as f64))
                    .collect()
            })
            .collect();
        let log_sigma = uniform(rng, &[2], 0.3, 1.2);
        let mut shape = vec![2];
        shape.extend(&spatial);
        let target = uniform(rng, &shape, 0.0, 1.0);
        push(
            name,
            grad_check(
                |tape, v| {
                    let y = tape.render_gaussian(
                        v,
                        GaussianTargets {
                            centers: centers.clone(),
                            present: vec![true, true],
                            amplitude: 20.0,
                            spatial: spatial.clone(),
                        },
                    )?;
                    project(tape, y, &target)
                },
                &log_sigma,
                STEP,
            ),
        )?;
    }
    Ok(out)
}

/// Smallest architecture with every layer kind: two-scale residual
/// backbone and head over `M = 2` landmarks.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        scales: 2,
        channels: vec![2, 3],
        dim: 2,
        residual: true,
        head_channels: vec![2, 3],
        head_stride: 2,
        landmarks: 2,
        output_scale: 1.0,
    }
}

/// Finite-difference check of the complete training loss on an 8×8 image
/// with `M = 2`: backbone, selection, head, Gaussian targets with learnable
/// widths, set-MSE terms and the width penalty. Every parameter and both
/// log-width vectors are probed.
pub fn loss_graph_check(seed: u64) -> Result<f64> {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::init(&arch, seed)?;
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let k = names.len();
    let weights = LossWeights {
        alpha: 0.7,
        beta: 0.05,
        amplitude: 30.0,
    };
    let landmarks = LandmarkSet::new(
        (0..2)
            .map(|_| vec![rng.random_range(1..7) as f64, rng.random_range(1..7) as f64])
            .collect(),
        vec![1.0, 1.0],
    )?;
    let mask = SelectionMask {
        visible: if rng.random::<bool>() {
            vec![true, false]
        } else {
            vec![false, true]
        },
        p: 0.5,
        attempts: 1,
    };
    let loss = |tape: &mut Tape, v: &[Var], image: &Tensor| -> Result<Var> {
        let binds: Bindings = names.iter().cloned().zip(v[..k].iter().copied()).collect();
        let x = tape.leaf(image.clone(), false);
        let pred = backbone_forward(tape, x, &binds, &arch)?;
        let vis = tape.mask_channels(pred, &mask.visible)?;
        let head = head_forward(tape, vis, &binds, &arch)?;
        let item = LossItem {
            pred,
            head_pred: Some(head),
            landmarks: &landmarks,
            mask: &mask,
        };
        Ok(total_loss(tape, item, v[k], v[k + 1], &weights)?.total)
    };
    // Random values everywhere, including the zero-initialized output
    // layers, so no gradient is trivially zero. Draws that put a ReLU input
    // within `KINK_MARGIN` of zero are redrawn.
    for _ in 0..MAX_DRAWS {
        for (_, e) in params.iter_mut() {
            for v in e.tensor.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let image = uniform(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut xs: Vec<Tensor> = names
            .iter()
            .map(|n| params.get(n).expect("listed").tensor.clone())
            .collect();
        xs.push(uniform(&mut rng, &[2], 0.2, 1.0));
        xs.push(uniform(&mut rng, &[2], 0.2, 1.0));

        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        loss(&mut tape, &vars, &image)?;
        if tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        return grad_check_many(|tape, v| loss(tape, v, &image), &xs, STEP);
    }
    Err(Error::InvalidArgument(format!(
        "no kink-free draw in {MAX_DRAWS} attempts"
    )))
}

/// Minimum distance of every ReLU input from zero in [`loss_graph_check`].
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 100;
