//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs already exist on the tape, so node
//! order is a topological order and `backward` walks it in reverse. Values
//! are never mutated after recording.
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`]; intermediate gradients are rebuilt on every call.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormCache};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel Gaussian rendering data for [`Tape::render_gaussian`].
#[derive(Clone, Debug)]
pub struct GaussianTargets {
    /// One center per channel, in voxel units along each spatial axis.
    pub centers: Vec<Vec<f64>>,
    /// Absent channels render as zeros and receive no gradient.
    pub present: Vec<bool>,
    pub amplitude: f64,
    pub spatial: Vec<usize>,
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulScalar {
        input: Var,
        c: f64,
    },
    Exp {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        cache: NormCache,
    },
    MaskChannels {
        input: Var,
        keep: Vec<bool>,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    MseMean {
        a: Var,
        b: Var,
    },
    MseChannels {
        a: Var,
        b: Var,
        include: Vec<bool>,
    },
    RenderGaussian {
        log_sigma: Var,
        targets: GaussianTargets,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Upsample { input, .. }
            | Op::Relu { input }
            | Op::MulScalar { input, .. }
            | Op::Exp { input }
            | Op::MaskChannels { input, .. }
            | Op::Sum { input }
            | Op::SumSquares { input } => vec![*input],
            Op::InstanceNorm {
                input,
                scale,
                shift,
                ..
            } => vec![*input, *scale, *shift],
            Op::Add { a, b }
            | Op::Concat { a, b }
            | Op::MseMean { a, b }
            | Op::MseChannels { a, b, .. } => {
                vec![*a, *b]
            }
            Op::RenderGaussian { log_sigma, .. } => vec![*log_sigma],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, as a tensor of the leaf's shape.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Direct inputs of a node.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Every node reachable backwards from `from`, not descending past any
    /// node in `stop_at` (stop nodes themselves are included).
    pub fn ancestors(&self, from: Var, stop_at: &[Var]) -> BTreeSet<Var> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if !seen.insert(v) || stop_at.contains(&v) {
                continue;
            }
            stack.extend(self.nodes[v.0].op.inputs());
        }
        seen
    }

    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        self.ancestors(output, &[]).contains(&input)
    }

    /// Smallest `|x|` over the inputs of every ReLU on the tape; finite
    /// differences are only meaningful when this is well above the step.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => self.nodes[input.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    // ---- ops ---------------------------------------------------------------

    /// N-d cross-correlation of a `[C_in, spatial...]` input.
    pub fn conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let out = kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let out_shape = kernels::upsample_shape(&shape, factor)?;
        let out = kernels::upsample_nearest(&shape, self.value(input).data(), factor);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Upsample { input, factor }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul_scalar(&mut self, input: Var, c: f64) -> Var {
        let value = self.value(input).map(|v| v * c);
        self.push(value, Op::MulScalar { input, c })
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f64::exp);
        self.push(value, Op::Exp { input })
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank() || ta.rank() == 0 || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::shape(
                "concat",
                format!(
                    "cannot concatenate {:?} and {:?} on channels",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b }))
    }

    /// Normalize each channel over its spatial extent, then apply a
    /// per-channel affine `scale`/`shift` (both `[C]`).
    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let c = *x
            .shape()
            .first()
            .ok_or_else(|| Error::shape("instance_norm", "scalar input"))?;
        for (name, p) in [("scale", scale), ("shift", shift)] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    format!("instance_norm {name}"),
                    format!("{:?} does not match {c} channels", self.shape(p)),
                ));
            }
        }
        let (y, cache) = kernels::instance_norm(
            c,
            x.data(),
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        );
        let value = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            },
        ))
    }

    /// Zero every channel whose `keep` flag is false.
    pub fn mask_channels(&mut self, input: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(input);
        if x.rank() == 0 || x.shape()[0] != keep.len() {
            return Err(Error::shape(
                "channel axis",
                format!("mask of {} channels for tensor {:?}", keep.len(), x.shape()),
            ));
        }
        let mut value = x.clone();
        for (c, &k) in keep.iter().enumerate() {
            if !k {
                value.channel_mut(c).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(self.push(
            value,
            Op::MaskChannels {
                input,
                keep: keep.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { input })
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MseMean { a, b }))
    }

    /// Squared difference averaged over the included channels and their
    /// voxels; exactly zero when no channel is included.
    pub fn mse_channels(&mut self, a: Var, b: Var, include: &[bool]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        if ta.rank() == 0 || ta.shape()[0] != include.len() {
            return Err(Error::shape(
                "channel axis",
                format!(
                    "{} channel flags for stacks of shape {:?}",
                    include.len(),
                    ta.shape()
                ),
            ));
        }
        let n = ta.numel() / include.len();
        let m = include.iter().filter(|&&f| f).count();
        let mut s = 0.0;
        for (c, _) in include.iter().enumerate().filter(|(_, &f)| f) {
            s += ta
                .channel(c)
                .iter()
                .zip(tb.channel(c))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        let value = if m == 0 { 0.0 } else { s / (m * n) as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::MseChannels {
                a,
                b,
                include: include.to_vec(),
            },
        ))
    }

    /// Render `A / ((2π)^{d/2} σ^d) · exp(-‖x − c‖² / 2σ²)` per channel, with
    /// `σ = exp(log_sigma)` differentiable.
    pub fn render_gaussian(&mut self, log_sigma: Var, targets: GaussianTargets) -> Result<Var> {
        let m = targets.centers.len();
        if self.shape(log_sigma) != [m] {
            return Err(Error::shape(
                "sigma",
                format!("{:?} log-sigmas for {m} landmarks", self.shape(log_sigma)),
            ));
        }
        if targets.present.len() != m {
            return Err(Error::shape(
                "landmarks",
                "presence flags do not match landmark count",
            ));
        }
        let d = targets.spatial.len();
        kernels::lift_dims(&targets.spatial)?;
        if targets.centers.iter().any(|c| c.len() != d) {
            return Err(Error::shape(
                "landmarks",
                format!("centers must have {d} coordinates"),
            ));
        }
        let mut shape = vec![m];
        shape.extend_from_slice(&targets.spatial);
        let mut value = Tensor::zeros(&shape);
        let log_sigma_v = self.value(log_sigma).data().to_vec();
        for (c, &ls) in log_sigma_v.iter().enumerate().take(m) {
            if !targets.present[c] {
                continue;
            }
            let sigma = ls.exp();
            let norm = targets.amplitude
                / ((2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * sigma.powi(d as i32));
            let inv = 1.0 / (2.0 * sigma * sigma);
            let center = &targets.centers[c];
            for_each_sq_dist(&targets.spatial, center, value.channel_mut(c), |r2| {
                norm * (-r2 * inv).exp()
            });
        }
        Ok(self.push(value, Op::RenderGaussian { log_sigma, targets }))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every grad-requiring leaf. Leaves not
    /// connected to `loss` end up with all-zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                // put it back for the final accumulation step
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let acc = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            if let Some(Some(g)) = grads.get(id) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated accumulation buffer for an input.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let mut gi = wants(*input).then(|| {
                    grads[input.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[input.0].value.numel()])
                });
                let mut gw = wants(*weight).then(|| {
                    grads[weight.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[weight.0].value.numel()])
                });
                let mut gb = bias.filter(|b| wants(*b)).map(|b| {
                    grads[b.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[b.0].value.numel()])
                });
                kernels::conv_backward(
                    geom,
                    x,
                    w,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, gb) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Upsample { input, factor } => {
                if wants(*input) {
                    let shape = nodes[input.0].value.shape().to_vec();
                    kernels::upsample_nearest_backward(
                        &shape,
                        g,
                        *factor,
                        slot(grads, nodes, *input),
                    );
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = nodes[input.0].value.data();
                    let dst = slot(grads, nodes, *input);
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, nodes, v)
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::MulScalar { input, c } => {
                if wants(*input) {
                    slot(grads, nodes, *input)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Exp { input } => {
                if wants(*input) {
                    let y = nodes[id].value.data();
                    slot(grads, nodes, *input)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (gv, yv))| *d += gv * yv);
                }
            }
            Op::Concat { a, b } => {
                let na = nodes[a.0].value.numel();
                if wants(*a) {
                    slot(grads, nodes, *a)
                        .iter_mut()
                        .zip(&g[..na])
                        .for_each(|(d, gv)| *d += gv);
                }
                if wants(*b) {
                    slot(grads, nodes, *b)
                        .iter_mut()
                        .zip(&g[na..])
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            } => {
                let c = nodes[scale.0].value.numel();
                let s = nodes[scale.0].value.data();
                let mut gx = wants(*input).then(|| {
                    grads[input.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[input.0].value.numel()])
                });
                let mut gs =
                    wants(*scale).then(|| grads[scale.0].take().unwrap_or_else(|| vec![0.0; c]));
                let mut gb =
                    wants(*shift).then(|| grads[shift.0].take().unwrap_or_else(|| vec![0.0; c]));
                kernels::instance_norm_backward(
                    c,
                    cache,
                    s,
                    g,
                    gx.as_deref_mut(),
                    gs.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gs {
                    grads[scale.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[shift.0] = Some(v);
                }
            }
            Op::MaskChannels { input, keep } => {
                if wants(*input) {
                    let n = g.len() / keep.len();
                    let dst = slot(grads, nodes, *input);
                    for (c, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                        dst[c * n..(c + 1) * n]
                            .iter_mut()
                            .zip(&g[c * n..(c + 1) * n])
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    slot(grads, nodes, *input)
                        .iter_mut()
                        .for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares { input } => {
                if wants(*input) {
                    let x = nodes[input.0].value.data();
                    slot(grads, nodes, *input)
                        .iter_mut()
                        .zip(x)
                        .for_each(|(d, xv)| *d += 2.0 * xv * g[0]);
                }
            }
            Op::MseMean { a, b } => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let k = 2.0 * g[0] / xa.len().max(1) as f64;
                if wants(*a) {
                    let dst = slot(grads, nodes, *a);
                    for i in 0..xa.len() {
                        dst[i] += k * (xa[i] - xb[i]);
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, nodes, *b);
                    for i in 0..xa.len() {
                        dst[i] -= k * (xa[i] - xb[i]);
                    }
                }
            }
            Op::MseChannels { a, b, include } => {
                let m = include.iter().filter(|&&f| f).count();
                if m == 0 {
                    return;
                }
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = xa.len() / include.len();
                let k = 2.0 * g[0] / (m * n) as f64;
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if !wants(v) {
                        continue;
                    }
                    let dst = slot(grads, nodes, v);
                    for (c, _) in include.iter().enumerate().filter(|(_, &f)| f) {
                        for i in c * n..(c + 1) * n {
                            dst[i] += sign * k * (xa[i] - xb[i]);
                        }
                    }
                }
            }
            Op::RenderGaussian { log_sigma, targets } => {
                if !wants(*log_sigma) {
                    return;
                }
                let d = targets.spatial.len() as f64;
                let out = &nodes[id].value;
                let ls = nodes[log_sigma.0].value.data();
                let n = out.numel() / targets.centers.len();
                let mut acc = vec![0.0; targets.centers.len()];
                for (c, a) in acc.iter_mut().enumerate() {
                    if !targets.present[c] {
                        continue;
                    }
                    let inv_s2 = (-2.0 * ls[c]).exp();
                    let values = out.channel(c);
                    let up = &g[c * n..(c + 1) * n];
                    let mut i = 0;
                    let mut total = 0.0;
                    for_each_sq_dist_ro(&targets.spatial, &targets.centers[c], |r2| {
                        // d g / d log σ = g · (r²/σ² − d)
                        total += up[i] * values[i] * (r2 * inv_s2 - d);
                        i += 1;
                    });
                    *a = total;
                }
                let dst = slot(grads, nodes, *log_sigma);
                dst.iter_mut().zip(&acc).for_each(|(d, v)| *d += v);
            }
        }
    }
}

/// Visit every voxel of a row-major grid in order, writing `f(‖x − c‖²)`.
fn for_each_sq_dist(spatial: &[usize], center: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64) {
    let mut i = 0;
    for_each_sq_dist_ro(spatial, center, |r2| {
        out[i] = f(r2);
        i += 1;
    });
}

fn for_each_sq_dist_ro(spatial: &[usize], center: &[f64], mut f: impl FnMut(f64)) {
    match *spatial {
        [h, w] => {
            for y in 0..h {
                let dy = y as f64 - center[0];
                for x in 0..w {
                    let dx = x as f64 - center[1];
                    f(dy * dy + dx * dx);
                }
            }
        }
        [dd, h, w] => {
            for z in 0..dd {
                let dz = z as f64 - center[0];
                for y in 0..h {
                    let dy = y as f64 - center[1];
                    for x in 0..w {
                        let dx = x as f64 - center[2];
                        f(dz * dz + dy * dy + dx * dx);
                    }
                }
            }
        }
        _ => unreachable!("spatial rank validated by caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), false);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let b = t.leaf(Tensor::zeros(&[3, 4, 4]), false);
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c), &[5, 4, 4]);
        let bad = t.leaf(Tensor::zeros(&[3, 4, 5]), false);
        assert!(t.concat_channels(a, bad).is_err());
    }

    #[test]
    fn mse_mean_values() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
        let b = t.leaf(Tensor::from_vec(vec![2.0, 2.0]), false);
        let l = t.mse_mean(a, b).unwrap();
        assert_eq!(t.value(l).item(), 4.0);
        let l0 = t.mse_mean(a, a).unwrap();
        assert_eq!(t.value(l0).item(), 0.0);
        let c = t.leaf(Tensor::zeros(&[3]), false);
        assert!(t.mse_mean(a, c).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![3.0]), true);
        let zero = t.leaf(Tensor::from_vec(vec![0.0]), false);
        let l = t.mse_mean(x, zero).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.5, -2.0]), true);
        let a = t.sum(x);
        let b = t.mul_scalar(x, 3.0);
        let b = t.sum(b);
        let l = t.add(a, b).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.3, -0.7, 1.1]), true);
        let e = t.exp(x);
        let l = t.sum_squares(e);
        t.backward(l).unwrap();
        let once = t.grad(x).unwrap();
        t.backward(l).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = t.leaf(Tensor::from_vec(vec![5.0]), true);
        let l = t.sum_squares(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn masked_channels_carry_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2, 2, 2], 1.0), true);
        let m = t.mask_channels(x, &[false, true]).unwrap();
        assert_eq!(t.value(m).channel(0), &[0.0; 4]);
        let l = t.sum(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0., 0., 0., 0., 1., 1., 1., 1.]);
    }

    #[test]
    fn reachability() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0), true);
        let b = t.leaf(Tensor::scalar(2.0), true);
        let ea = t.exp(a);
        let s = t.add(ea, b).unwrap();
        assert!(t.depends_on(s, a));
        assert!(!t.depends_on(ea, b));
        assert!(!t.ancestors(s, &[ea]).contains(&a));
    }
}
