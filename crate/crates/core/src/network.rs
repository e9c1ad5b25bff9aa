//! Unet-style backbone, heatmap selection module and the light reconstruction
//! head.
//!
//! Both networks share one layout: a stem conv, one block per scale joined by
//! strided down-convolutions, and a decoder that upsamples, concatenates the
//! encoder skip of the same scale and fuses with a conv + norm + relu. A
//! final zero-initialized 1×1 conv produces `M` linear output channels.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::heatmap::{HeatmapKind, HeatmapStack};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub scales: usize,
    pub channels: Vec<usize>,
    /// Spatial rank (2 or 3).
    pub dim: usize,
    /// Additive skips inside each block (ResUnet); plain double conv otherwise.
    pub residual: bool,
    pub head_channels: Vec<usize>,
    pub head_stride: usize,
    /// Number of landmarks `M`.
    pub landmarks: usize,
    /// Constant gain on the final linear layer of both networks.
    pub output_scale: f64,
}

impl Default for ArchConfig {
    /// Desk-scale 2D model.
    fn default() -> Self {
        Self {
            scales: 3,
            channels: vec![8, 16, 32],
            dim: 2,
            residual: true,
            head_channels: vec![8, 16, 32],
            head_stride: 2,
            landmarks: 4,
            output_scale: 1000.0,
        }
    }
}

impl ArchConfig {
    /// 3D ResUnet-style backbone at the size used for the full-resolution
    /// experiments, with the three-scale (16, 32, 64) stride-4 head.
    pub fn full_3d() -> Self {
        Self {
            scales: 5,
            channels: vec![16, 32, 64, 128, 256],
            dim: 3,
            residual: true,
            head_channels: vec![16, 32, 64],
            head_stride: 4,
            landmarks: 4,
            output_scale: 100.0,
        }
    }

    /// Same layout with `extra` more channels at every backbone scale.
    pub fn widened(&self, extra: usize) -> Self {
        let mut c = self.clone();
        c.channels.iter_mut().for_each(|v| *v += extra);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dim != 2 && self.dim != 3 {
            problems.push(format!("arch.dim must be 2 or 3, got {}", self.dim));
        }
        if self.scales == 0 || self.channels.len() != self.scales {
            problems.push(format!(
                "arch.channels has {} entries for {} scales",
                self.channels.len(),
                self.scales
            ));
        }
        if self.head_channels.is_empty() {
            problems.push("arch.head_channels must not be empty".into());
        }
        if self
            .channels
            .iter()
            .chain(&self.head_channels)
            .any(|&c| c == 0)
        {
            problems.push("channel counts must be >= 1".into());
        }
        if self.head_stride < 2 {
            problems.push(format!(
                "arch.head_stride must be >= 2, got {}",
                self.head_stride
            ));
        }
        if self.landmarks == 0 {
            problems.push("arch.landmarks must be >= 1".into());
        }
        if !(self.output_scale > 0.0) {
            problems.push("arch.output_scale must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn backbone_spec(&self) -> NetSpec {
        NetSpec {
            prefix: "backbone",
            in_channels: 1,
            channels: self.channels.clone(),
            stride: 2,
            residual: self.residual,
            out_channels: self.landmarks,
            dim: self.dim,
            output_scale: self.output_scale,
        }
    }

    fn head_spec(&self) -> NetSpec {
        NetSpec {
            prefix: "head",
            in_channels: self.landmarks,
            channels: self.head_channels.clone(),
            stride: self.head_stride,
            residual: true,
            out_channels: self.landmarks,
            dim: self.dim,
            output_scale: self.output_scale,
        }
    }

    /// Spatial dims must be a multiple of this for both networks.
    pub fn required_multiple(&self) -> usize {
        let b = 2usize.pow(self.scales.saturating_sub(1) as u32);
        let h = self
            .head_stride
            .pow(self.head_channels.len().saturating_sub(1) as u32);
        lcm(b, h)
    }

    pub fn check_input_dims(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.dim {
            return Err(Error::shape(
                "spatial",
                format!("{}-d input for a {}-d model", spatial.len(), self.dim),
            ));
        }
        let multiple = self.required_multiple();
        if spatial.iter().any(|&s| s == 0 || s % multiple != 0) {
            return Err(Error::PaddingNeeded {
                dims: spatial.to_vec(),
                multiple,
            });
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Image-to-heatmap network.
    Backbone,
    /// Heatmap-to-heatmap reconstruction network.
    Head,
}

impl ParamGroup {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "backbone" => Ok(ParamGroup::Backbone),
            "head" => Ok(ParamGroup::Head),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub group: ParamGroup,
    pub tensor: Tensor,
    /// Conv weights take weight decay; biases and norm affines do not.
    pub decay: bool,
}

/// Named network parameters, keyed by dotted path (`backbone.enc0.conv1.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

pub type Bindings = HashMap<String, Var>;

impl ParamStore {
    /// Initialize backbone and head for `cfg`, deterministically from `seed`.
    pub fn init(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in [cfg.backbone_spec(), cfg.head_spec()] {
            let group = ParamGroup::parse(spec.prefix)?;
            for layer in spec.layers() {
                store.add_layer(group, &layer, &mut rng);
            }
        }
        Ok(store)
    }

    fn add_layer(&mut self, group: ParamGroup, layer: &Layer, rng: &mut ChaCha8Rng) {
        match layer {
            Layer::Conv {
                name,
                c_in,
                c_out,
                kernel,
                dim,
                zero,
            } => {
                let mut shape = vec![*c_out, *c_in];
                shape.extend(std::iter::repeat_n(*kernel, *dim));
                let fan_in = (c_in * kernel.pow(*dim as u32)) as f64;
                let bound = (3.0 / fan_in).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        if *zero {
                            0.0
                        } else {
                            rng.random_range(-bound..bound)
                        }
                    })
                    .collect();
                self.insert(
                    format!("{name}.weight"),
                    group,
                    Tensor::new(shape, data).unwrap(),
                    true,
                );
                self.insert(
                    format!("{name}.bias"),
                    group,
                    Tensor::zeros(&[*c_out]),
                    false,
                );
            }
            Layer::Norm { name, channels } => {
                self.insert(
                    format!("{name}.scale"),
                    group,
                    Tensor::full(&[*channels], 1.0),
                    false,
                );
                self.insert(
                    format!("{name}.shift"),
                    group,
                    Tensor::zeros(&[*channels]),
                    false,
                );
            }
        }
    }

    pub fn insert(&mut self, name: String, group: ParamGroup, tensor: Tensor, decay: bool) {
        self.entries.insert(
            name,
            ParamEntry {
                group,
                tensor,
                decay,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count of parameters in a group.
    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// [`ParamStore::param_count`] by group name.
    pub fn param_count_named(&self, group: &str) -> Result<usize> {
        Ok(self.param_count(ParamGroup::parse(group)?))
    }

    /// Put every parameter on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), tape.leaf(e.tensor.clone(), true)))
            .collect()
    }

    /// Shapes keyed by name, for comparing a checkpoint against a config.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor.shape().to_vec()))
            .collect()
    }
}

/// Parameter count of the default backbone's layout, computed without
/// materializing tensors.
pub fn layout_param_count(cfg: &ArchConfig, group: ParamGroup) -> usize {
    let spec = match group {
        ParamGroup::Backbone => cfg.backbone_spec(),
        ParamGroup::Head => cfg.head_spec(),
    };
    spec.layers()
        .iter()
        .map(|l| match l {
            Layer::Conv {
                c_in,
                c_out,
                kernel,
                dim,
                ..
            } => c_out * c_in * kernel.pow(*dim as u32) + c_out,
            Layer::Norm { channels, .. } => 2 * channels,
        })
        .sum()
}

enum Layer {
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dim: usize,
        zero: bool,
    },
    Norm {
        name: String,
        channels: usize,
    },
}

struct NetSpec {
    prefix: &'static str,
    in_channels: usize,
    channels: Vec<usize>,
    stride: usize,
    residual: bool,
    out_channels: usize,
    dim: usize,
    output_scale: f64,
}

impl NetSpec {
    /// Kernel size and padding of the strided down-convolution.
    fn down_kernel(&self) -> (usize, usize) {
        let half = self.stride / 2;
        (2 * half + 1, half)
    }

    fn layers(&self) -> Vec<Layer> {
        let p = self.prefix;
        let d = self.dim;
        let conv = |name: String, c_in, c_out, kernel| Layer::Conv {
            name,
            c_in,
            c_out,
            kernel,
            dim: d,
            zero: false,
        };
        let norm = |name: String, channels| Layer::Norm { name, channels };
        let mut out = Vec::new();
        let c0 = self.channels[0];
        out.push(conv(format!("{p}.stem"), self.in_channels, c0, 3));
        out.push(norm(format!("{p}.stem_norm"), c0));
        for (level, &c) in self.channels.iter().enumerate() {
            if level > 0 {
                let (k, _) = self.down_kernel();
                out.push(conv(
                    format!("{p}.down{level}"),
                    self.channels[level - 1],
                    c,
                    k,
                ));
                out.push(norm(format!("{p}.down{level}_norm"), c));
            }
            out.push(conv(format!("{p}.enc{level}.conv1"), c, c, 3));
            out.push(norm(format!("{p}.enc{level}.norm1"), c));
            out.push(conv(format!("{p}.enc{level}.conv2"), c, c, 3));
            out.push(norm(format!("{p}.enc{level}.norm2"), c));
        }
        for level in (0..self.channels.len() - 1).rev() {
            let c = self.channels[level];
            out.push(conv(
                format!("{p}.dec{level}"),
                self.channels[level + 1] + c,
                c,
                3,
            ));
            out.push(norm(format!("{p}.dec{level}_norm"), c));
        }
        out.push(Layer::Conv {
            name: format!("{p}.out"),
            c_in: c0,
            c_out: self.out_channels,
            kernel: 1,
            dim: d,
            zero: true,
        });
        out
    }

    fn forward(&self, tape: &mut Tape, binds: &Bindings, input: Var) -> Result<Var> {
        let p = self.prefix;
        let mut net = Net { tape, binds };
        let x = net.conv_norm_relu(&format!("{p}.stem"), &format!("{p}.stem_norm"), input, 1, 1)?;
        let mut x = x;
        let mut skips = Vec::with_capacity(self.channels.len());
        for level in 0..self.channels.len() {
            if level > 0 {
                let (_, pad) = self.down_kernel();
                x = net.conv_norm_relu(
                    &format!("{p}.down{level}"),
                    &format!("{p}.down{level}_norm"),
                    x,
                    self.stride,
                    pad,
                )?;
            }
            x = net.block(&format!("{p}.enc{level}"), x, self.residual)?;
            skips.push(x);
        }
        for level in (0..self.channels.len() - 1).rev() {
            let up = net.tape.upsample_nearest(x, self.stride)?;
            let cat = net.tape.concat_channels(up, skips[level])?;
            x = net.conv_norm_relu(
                &format!("{p}.dec{level}"),
                &format!("{p}.dec{level}_norm"),
                cat,
                1,
                1,
            )?;
        }
        let out = net.conv(&format!("{p}.out"), x, 1, 0)?;
        Ok(net.tape.mul_scalar(out, self.output_scale))
    }
}

struct Net<'a> {
    tape: &'a mut Tape,
    binds: &'a Bindings,
}

impl Net<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        self.binds
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.conv(x, w, Some(b), stride, pad)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let s = self.param(&format!("{name}.scale"))?;
        let b = self.param(&format!("{name}.shift"))?;
        self.tape.instance_norm(x, s, b, NORM_EPS)
    }

    fn conv_norm_relu(
        &mut self,
        conv: &str,
        norm: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = self.conv(conv, x, stride, pad)?;
        let y = self.norm(norm, y)?;
        Ok(self.tape.relu(y))
    }

    /// conv-norm-relu, conv-norm, optional identity skip, relu.
    fn block(&mut self, prefix: &str, x: Var, residual: bool) -> Result<Var> {
        let y = self.conv_norm_relu(
            &format!("{prefix}.conv1"),
            &format!("{prefix}.norm1"),
            x,
            1,
            1,
        )?;
        let y = self.conv(&format!("{prefix}.conv2"), y, 1, 1)?;
        let mut y = self.norm(&format!("{prefix}.norm2"), y)?;
        if residual {
            y = self.tape.add(y, x)?;
        }
        Ok(self.tape.relu(y))
    }
}

/// Image `[1, spatial...]` to `M` predicted heatmaps at input resolution.
pub fn backbone_forward(
    tape: &mut Tape,
    image: Var,
    binds: &Bindings,
    cfg: &ArchConfig,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.first() != Some(&1) {
        return Err(Error::shape(
            "channel axis",
            format!("image must be [1, spatial...], got {shape:?}"),
        ));
    }
    cfg.check_input_dims(&shape[1..])?;
    cfg.backbone_spec().forward(tape, binds, image)
}

/// Reconstruct all `M` heatmaps from the selection output alone.
pub fn head_forward(
    tape: &mut Tape,
    visible: Var,
    binds: &Bindings,
    cfg: &ArchConfig,
) -> Result<Var> {
    let shape = tape.shape(visible).to_vec();
    if shape.first() != Some(&cfg.landmarks) {
        return Err(Error::shape(
            "channel axis",
            format!("head expects {} channels, got {shape:?}", cfg.landmarks),
        ));
    }
    cfg.check_input_dims(&shape[1..])?;
    cfg.head_spec().forward(tape, binds, visible)
}

/// Backbone inference outside a training graph.
pub fn predict_heatmaps(
    params: &ParamStore,
    cfg: &ArchConfig,
    image: &Tensor,
) -> Result<HeatmapStack> {
    let mut tape = Tape::new();
    let binds = bind_frozen(params, &mut tape);
    let x = tape.leaf(image.clone(), false);
    let out = backbone_forward(&mut tape, x, &binds, cfg)?;
    Ok(HeatmapStack {
        maps: tape.value(out).clone(),
        kind: HeatmapKind::Predicted,
    })
}

fn bind_frozen(params: &ParamStore, tape: &mut Tape) -> Bindings {
    params
        .iter()
        .map(|(k, e)| (k.clone(), tape.leaf(e.tensor.clone(), false)))
        .collect()
}

/// Outcome of the selection module for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub visible: Vec<bool>,
    /// Erasure probability used for this draw.
    pub p: f64,
    /// Number of Bernoulli rounds drawn; every round before the last erased
    /// all channels and was rejected.
    pub attempts: u32,
}

impl SelectionMask {
    pub fn all_visible(m: usize) -> Self {
        Self {
            visible: vec![true; m],
            p: 0.0,
            attempts: 1,
        }
    }

    pub fn missing(&self) -> Vec<bool> {
        self.visible.iter().map(|v| !v).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }
}

/// Rounds drawn before falling back to keeping channel 0.
pub const MAX_SELECTION_ATTEMPTS: u32 = 16;

/// Erase each of `m` channels independently with probability `p`, redrawing
/// whenever every channel would be erased.
pub fn draw_selection<R: Rng>(m: usize, p: f64, rng: &mut R) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "erasure probability {p} outside [0, 1]"
        )));
    }
    let mut visible = vec![true; m];
    for attempt in 1..=MAX_SELECTION_ATTEMPTS {
        for v in visible.iter_mut() {
            *v = rng.random::<f64>() >= p;
        }
        if visible.iter().any(|&v| v) {
            return Ok(SelectionMask {
                visible,
                p,
                attempts: attempt,
            });
        }
    }
    visible[0] = true;
    Ok(SelectionMask {
        visible,
        p,
        attempts: MAX_SELECTION_ATTEMPTS,
    })
}

/// Selection module: zero the erased channels of a predicted stack. The
/// returned tensor keeps all `M` channels so channel index still identifies
/// the landmark.
pub fn select_visible<R: Rng>(
    tape: &mut Tape,
    stack: Var,
    p: f64,
    rng: &mut R,
) -> Result<(Var, SelectionMask)> {
    let m = *tape
        .shape(stack)
        .first()
        .ok_or_else(|| Error::shape("channel axis", "scalar heatmap stack"))?;
    let mask = draw_selection(m, p, rng)?;
    let out = tape.mask_channels(stack, &mask.visible)?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            scales: 3,
            channels: vec![2, 3, 4],
            dim: 2,
            residual: true,
            head_channels: vec![2, 3],
            head_stride: 2,
            landmarks: 2,
            output_scale: 1.0,
        }
    }

    #[test]
    fn single_conv_count() {
        let mut s = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.add_layer(
            ParamGroup::Head,
            &Layer::Conv {
                name: "x".into(),
                c_in: 2,
                c_out: 4,
                kernel: 3,
                dim: 2,
                zero: false,
            },
            &mut rng,
        );
        assert_eq!(s.param_count(ParamGroup::Head), 76);
        assert!(matches!(
            s.param_count_named("neck"),
            Err(Error::UnknownGroup(_))
        ));
    }

    #[test]
    fn layout_count_matches_materialized() {
        let cfg = ArchConfig::default();
        let s = ParamStore::init(&cfg, 1).unwrap();
        for g in [ParamGroup::Backbone, ParamGroup::Head] {
            assert_eq!(s.param_count(g), layout_param_count(&cfg, g));
        }
    }

    #[test]
    fn zero_image_gives_zero_stack() {
        let cfg = ArchConfig::default();
        let params = ParamStore::init(&cfg, 3).unwrap();
        let out = predict_heatmaps(&params, &cfg, &Tensor::zeros(&[1, 96, 96])).unwrap();
        assert_eq!(out.maps.shape(), &[4, 96, 96]);
        assert!(out.maps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_follow_input() {
        let cfg = tiny();
        let mut params = ParamStore::init(&cfg, 5).unwrap();
        // non-zero output layers so the value check below is meaningful
        for (k, e) in params.iter_mut() {
            if k.ends_with("out.weight") {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.5);
            }
        }
        for dims in [[8, 8], [16, 24], [32, 8]] {
            let mut t = Tape::new();
            let b = params.bind(&mut t);
            let img = t.leaf(Tensor::full(&[1, dims[0], dims[1]], 0.3), false);
            let h = backbone_forward(&mut t, img, &b, &cfg).unwrap();
            assert_eq!(t.shape(h), &[2, dims[0], dims[1]]);
            let o = head_forward(&mut t, h, &b, &cfg).unwrap();
            assert_eq!(t.shape(o), &[2, dims[0], dims[1]]);
        }
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let cfg = ArchConfig::default();
        let params = ParamStore::init(&cfg, 3).unwrap();
        let err = predict_heatmaps(&params, &cfg, &Tensor::zeros(&[1, 90, 96])).unwrap_err();
        match err {
            Error::PaddingNeeded { multiple, .. } => assert_eq!(multiple, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn head_rejects_wrong_channel_count() {
        let cfg = tiny();
        let params = ParamStore::init(&cfg, 5).unwrap();
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let x = t.leaf(Tensor::zeros(&[3, 8, 8]), false);
        assert!(head_forward(&mut t, x, &b, &cfg).is_err());
    }

    #[test]
    fn widened_backbone_is_larger() {
        let cfg = ArchConfig::default();
        let wide = cfg.widened(16);
        assert!(
            layout_param_count(&wide, ParamGroup::Backbone)
                > layout_param_count(&cfg, ParamGroup::Backbone)
        );
    }

    #[test]
    fn p_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = draw_selection(4, 0.0, &mut rng).unwrap();
            assert_eq!(m.visible, vec![true; 4]);
            assert_eq!(m.attempts, 1);
        }
    }

    #[test]
    fn p_one_falls_back_to_channel_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = draw_selection(4, 1.0, &mut rng).unwrap();
        assert_eq!(m.visible, vec![true, false, false, false]);
        assert_eq!(m.attempts, MAX_SELECTION_ATTEMPTS);
        assert!(draw_selection(4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn selection_is_seed_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| draw_selection(4, 0.4, &mut rng).unwrap().visible)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn config_validation_lists_problems() {
        let cfg = ArchConfig {
            channels: vec![8],
            head_stride: 1,
            ..ArchConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
