//! Time-stepped LIF simulation of one sample and surrogate-gradient BPTT.
//!
//! Hidden neurons follow
//! `v[t] = leak * v[t-1] + W x[t] - theta * o[t-1]`, `o[t] = 1 if v[t] > theta`.
//! The last affine layer is a non-firing integrator with leak 1 whose final
//! potential is read through a softmax.
//!
//! Affine layers fed by spikes run event-driven: only nonzero inputs are
//! scattered through channel-last packed weights.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ann::softmax;
use crate::datasets::Dataset;
use crate::encoding::{encode, Coding, SpikeTrain};
use crate::metrics::{top1_accuracy, SpikeTally};
use crate::error::{Error, Result};
use crate::network::{Gradients, LayerKind, LayerParams, Network, Role};
use crate::ops::conv::conv_forward_into;
use crate::ops::linear::dot;
use crate::ops::pool::avgpool_planes;
use crate::ops::ConvGeometry;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnnConfig {
    pub leak: f32,
    pub gamma: f32,
    pub time_steps: usize,
    /// Backpropagate through the `-theta * o[t-1]` reset term.
    pub reset_grad: bool,
    /// Backpropagate through the `leak * v[t-1]` recurrence.
    pub temporal_grad: bool,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            leak: 0.99,
            gamma: 0.3,
            time_steps: 100,
            reset_grad: true,
            temporal_grad: true,
        }
    }
}

impl SnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::InvalidArgument(format!("leak {} outside (0, 1]", self.leak)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.time_steps == 0 {
            return Err(Error::InvalidArgument("time steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn lif_update(v_prev: f32, input: f32, o_prev: f32, leak: f32, theta: f32) -> f32 {
    leak * v_prev + input - theta * o_prev
}

/// One LIF step over a layer; returns the new potentials and spikes.
pub fn lif_step(v_prev: &[f32], spikes_prev: &[f32], input: &[f32], leak: f32, theta: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    if v_prev.len() != input.len() || spikes_prev.len() != input.len() {
        return Err(Error::shape(
            "lif_step",
            format!(
                "potential {}, spikes {}, input {}",
                v_prev.len(),
                spikes_prev.len(),
                input.len()
            ),
        ));
    }
    let v: Vec<f32> = (0..input.len())
        .map(|i| lif_update(v_prev[i], input[i], spikes_prev[i], leak, theta))
        .collect();
    let o = v.iter().map(|&x| if x > theta { 1.0 } else { 0.0 }).collect();
    Ok((v, o))
}

/// `gamma * max(0, 1 - |v - theta| / theta)`
#[inline]
pub fn surrogate(v: f32, theta: f32, gamma: f32) -> f32 {
    gamma * (1.0 - (v - theta).abs() / theta).max(0.0)
}

pub fn surrogate_grad(v: &Tensor, theta: f32, gamma: f32) -> Tensor {
    v.map(|x| surrogate(x, theta, gamma))
}

/// Affine layers that become spiking layers: every conv/linear directly
/// followed by a ReLU, except the final affine layer.
pub fn spiking_layers(spec: &crate::network::NetworkSpec) -> Vec<usize> {
    let last = spec.layers.iter().rposition(|l| l.kind.is_affine());
    (0..spec.layers.len())
        .filter(|&i| {
            spec.layers[i].kind.is_affine()
                && Some(i) != last
                && matches!(spec.layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::Relu))
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Affine {
    Conv {
        g: ConvGeometry,
        kernel: Vec<f32>,
        /// `[c, ki, kj, f]`
        fwd: Vec<f32>,
        /// `[f, ki, kj, c]`, widened for the backward pass
        bwd: Vec<f64>,
    },
    Linear {
        inputs: usize,
        outputs: usize,
        /// `[k, d]`
        weight: Vec<f32>,
        /// `[d, k]`
        wt: Vec<f32>,
        wide: Vec<f64>,
    },
}

fn nonzeros(x: &[f32]) -> Vec<u32> {
    let mut nz = Vec::new();
    nonzeros_into(x, &mut nz);
    nz
}

fn nonzeros_into(x: &[f32], nz: &mut Vec<u32>) {
    nz.clear();
    nz.extend(
        x.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i as u32),
    );
}

/// Above this fraction of nonzeros the row-wise dense kernels are faster
/// than scattering individual events.
#[inline]
fn is_dense(nnz: usize, len: usize) -> bool {
    nnz * 4 > len
}

/// Output position reached from input coordinate `i` through kernel tap `k`.
#[inline]
fn tap(i: usize, k: usize, pad: usize, stride: usize, len: usize) -> Option<usize> {
    let n = (i + pad).checked_sub(k)?;
    if n % stride != 0 {
        return None;
    }
    let o = n / stride;
    (o < len).then_some(o)
}

impl Affine {
    fn new(kind: &LayerKind, shape_in: &[usize], weight: &Tensor) -> Self {
        match *kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let g = ConvGeometry {
                    in_channels,
                    out_channels,
                    height: shape_in[1],
                    width: shape_in[2],
                    kh: kernel,
                    kw: kernel,
                    stride,
                    pad,
                };
                let w = weight.data();
                let (f_n, c_n, kk) = (out_channels, in_channels, kernel * kernel);
                let mut fwd = vec![0.0; w.len()];
                let mut bwd = vec![0.0f64; w.len()];
                for f in 0..f_n {
                    for c in 0..c_n {
                        for k in 0..kk {
                            let v = w[(f * c_n + c) * kk + k];
                            fwd[(c * kk + k) * f_n + f] = v;
                            bwd[(f * kk + k) * c_n + c] = v as f64;
                        }
                    }
                }
                Affine::Conv {
                    g,
                    kernel: w.to_vec(),
                    fwd,
                    bwd,
                }
            }
            _ => {
                let (k, d) = (weight.dim(0), weight.dim(1));
                let w = weight.data();
                let mut wt = vec![0.0; w.len()];
                for i in 0..k {
                    for j in 0..d {
                        wt[j * k + i] = w[i * d + j];
                    }
                }
                Affine::Linear {
                    inputs: d,
                    outputs: k,
                    weight: w.to_vec(),
                    wt,
                    wide: w.iter().map(|&v| v as f64).collect(),
                }
            }
        }
    }

    fn out_len(&self) -> usize {
        match self {
            Affine::Conv { g, .. } => g.output_len(),
            Affine::Linear { outputs, .. } => *outputs,
        }
    }

    fn in_len(&self) -> usize {
        match self {
            Affine::Conv { g, .. } => g.input_len(),
            Affine::Linear { inputs, .. } => *inputs,
        }
    }

    fn weight_len(&self) -> usize {
        match self {
            Affine::Conv { kernel, .. } => kernel.len(),
            Affine::Linear { weight, .. } => weight.len(),
        }
    }

    /// `out += W x` for an analog input.
    fn forward_dense(&self, x: &[f32], out: &mut [f32]) {
        match self {
            Affine::Conv { g, kernel, .. } => conv_forward_into(g, x, kernel, out),
            Affine::Linear { inputs, weight, .. } => {
                for (o, row) in out.iter_mut().zip(weight.chunks(*inputs)) {
                    *o += dot(row, x);
                }
            }
        }
    }

    /// `out += W x` visiting only the nonzero inputs `nz`.
    fn forward_events(&self, x: &[f32], nz: &[u32], out: &mut [f32], scratch: &mut Vec<f32>) {
        match self {
            Affine::Conv { g, fwd, .. } => {
                let (oh, ow, f_n) = (g.out_height(), g.out_width(), g.out_channels);
                let plane = g.height * g.width;
                scratch.clear();
                scratch.resize(g.output_len(), 0.0);
                for &i in nz {
                    let i = i as usize;
                    let s = x[i];
                    let (c, iy, ix) = (i / plane, (i % plane) / g.width, i % g.width);
                    for ki in 0..g.kh {
                        let Some(oy) = tap(iy, ki, g.pad, g.stride, oh) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            let Some(ox) = tap(ix, kj, g.pad, g.stride, ow) else {
                                continue;
                            };
                            let w = &fwd[((c * g.kh + ki) * g.kw + kj) * f_n..][..f_n];
                            let o = &mut scratch[(oy * ow + ox) * f_n..][..f_n];
                            for (a, &b) in o.iter_mut().zip(w) {
                                *a += s * b;
                            }
                        }
                    }
                }
                hwc_add_to_chw(scratch, f_n, oh * ow, out);
            }
            Affine::Linear { outputs, wt, .. } => {
                for &d in nz {
                    let s = x[d as usize];
                    for (o, &w) in out.iter_mut().zip(&wt[d as usize * outputs..][..*outputs]) {
                        *o += s * w;
                    }
                }
            }
        }
    }

    /// `gx += W^T g`, skipping zero entries of `g`.
    fn backward_input(&self, g_out: &[f64], gx: &mut [f64], scratch: &mut Vec<f64>) {
        match self {
            Affine::Conv { g, bwd, .. } => {
                let (oh, ow, c_n) = (g.out_height(), g.out_width(), g.in_channels);
                let plane_out = oh * ow;
                scratch.clear();
                scratch.resize(g.input_len(), 0.0);
                for (i, &gv) in g_out.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let (f, oy, ox) = (i / plane_out, (i % plane_out) / ow, i % ow);
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.width {
                                continue;
                            }
                            let w = &bwd[((f * g.kh + ki) * g.kw + kj) * c_n..][..c_n];
                            let o = &mut scratch[(iy as usize * g.width + ix as usize) * c_n..][..c_n];
                            for (a, &b) in o.iter_mut().zip(w) {
                                *a += gv * b;
                            }
                        }
                    }
                }
                hwc_add_to_chw(scratch, c_n, g.height * g.width, gx);
            }
            Affine::Linear { inputs, wide, .. } => {
                for (k, &gv) in g_out.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    for (o, &w) in gx.iter_mut().zip(&wide[k * inputs..][..*inputs]) {
                        *o += gv * w;
                    }
                }
            }
        }
    }

    /// `dw += g x^T` into the packed 64-bit layout (`[c,ki,kj,f]` or `[d,k]`).
    fn weight_grad(&self, g_out: &[f64], x: &[f32], nz: &[u32], dw: &mut [f64], scratch: &mut Vec<f64>) {
        match self {
            Affine::Conv { g, .. } => {
                let (oh, ow, f_n) = (g.out_height(), g.out_width(), g.out_channels);
                let plane = g.height * g.width;
                chw_to_hwc(g_out, f_n, oh * ow, scratch);
                for &i in nz {
                    let i = i as usize;
                    let s = x[i] as f64;
                    let (c, iy, ix) = (i / plane, (i % plane) / g.width, i % g.width);
                    for ki in 0..g.kh {
                        let Some(oy) = tap(iy, ki, g.pad, g.stride, oh) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            let Some(ox) = tap(ix, kj, g.pad, g.stride, ow) else {
                                continue;
                            };
                            let gr = &scratch[(oy * ow + ox) * f_n..][..f_n];
                            let d = &mut dw[((c * g.kh + ki) * g.kw + kj) * f_n..][..f_n];
                            for (a, &b) in d.iter_mut().zip(gr) {
                                *a += s * b;
                            }
                        }
                    }
                }
            }
            Affine::Linear { outputs, .. } => {
                for &d in nz {
                    let s = x[d as usize] as f64;
                    for (a, &b) in dw[d as usize * outputs..][..*outputs].iter_mut().zip(g_out) {
                        *a += s * b;
                    }
                }
            }
        }
    }

    /// Packed gradient back to the `[F,C,kh,kw]` / `[K,D]` weight layout.
    fn unpack(&self, dw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; dw.len()];
        match self {
            Affine::Conv { g, .. } => {
                let (f_n, c_n, kk) = (g.out_channels, g.in_channels, g.kh * g.kw);
                for f in 0..f_n {
                    for c in 0..c_n {
                        for k in 0..kk {
                            out[(f * c_n + c) * kk + k] = dw[(c * kk + k) * f_n + f];
                        }
                    }
                }
            }
            Affine::Linear { inputs, outputs, .. } => {
                for k in 0..*outputs {
                    for d in 0..*inputs {
                        out[k * inputs + d] = dw[d * outputs + k];
                    }
                }
            }
        }
        out
    }
}

fn hwc_add_to_chw<T: Copy + std::ops::AddAssign>(src: &[T], channels: usize, plane: usize, dst: &mut [T]) {
    for p in 0..plane {
        let row = &src[p * channels..][..channels];
        for (c, &v) in row.iter().enumerate() {
            dst[c * plane + p] += v;
        }
    }
}

fn chw_to_hwc<T: Copy + Default>(src: &[T], channels: usize, plane: usize, dst: &mut Vec<T>) {
    dst.clear();
    dst.resize(src.len(), T::default());
    for c in 0..channels {
        for p in 0..plane {
            dst[p * channels + c] = src[c * plane + p];
        }
    }
}

#[derive(Clone, Debug)]
enum StageKind {
    Spiking { affine: Affine, threshold: f32, slot: usize },
    Analog { affine: Affine, slot: usize },
    Output { affine: Affine, slot: usize },
    Pool { planes: usize, h: usize, w: usize, k: usize },
    Dropout { p: f32 },
    Flatten,
}

#[derive(Clone, Debug)]
struct Stage {
    layer: usize,
    kind: StageKind,
    /// Whether some affine stage precedes this one (input gradient needed).
    needs_input_grad: bool,
    out_shape: Vec<usize>,
}

/// How much of a forward pass to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordMode {
    /// Spike counts, last spike times, membrane sums and the output potential.
    Counts,
    /// Additionally every step's spikes, potentials and affine inputs; needed
    /// for [`SnnPlan::backward`] and spike activation maps.
    Full,
}

/// Recorded state of one spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// Index of the conv/linear layer in the spec.
    pub layer: usize,
    pub shape: Vec<usize>,
    pub threshold: f32,
    /// Spikes per neuron summed over all steps.
    pub counts: Vec<u32>,
    /// 1-based step of each neuron's latest spike; 0 if it never fired.
    pub last_spike: Vec<u32>,
    pub membrane_sum: Vec<f32>,
    /// Largest input current `W x[t]` seen at any step and neuron.
    pub max_current: f32,
    /// `[t][neuron]`, empty unless recorded in full.
    pub spikes: Vec<Vec<f32>>,
    pub membranes: Vec<Vec<f32>>,
}

impl LayerRecord {
    pub fn neurons(&self) -> usize {
        self.counts.len()
    }

    /// Last spike time of every neuron as seen at step `t` (1-based,
    /// inclusive); needs a full record.
    pub fn last_spike_at(&self, t: usize) -> Result<Vec<u32>> {
        if self.spikes.len() < t {
            return Err(Error::InvalidArgument(format!(
                "layer {} has {} recorded steps, asked for step {t}",
                self.layer,
                self.spikes.len()
            )));
        }
        let mut out = vec![0u32; self.neurons()];
        for (s, step) in self.spikes[..t].iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(step) {
                if v != 0.0 {
                    *o = s as u32 + 1;
                }
            }
        }
        Ok(out)
    }
}

/// Everything observed during one sample's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub time_steps: usize,
    pub layers: Vec<LayerRecord>,
    /// Final potential of the output integrator.
    pub output_potential: Vec<f32>,
    /// `softmax(output_potential)`.
    pub probabilities: Vec<f64>,
    /// Per affine stage, the input at every step (full records only).
    inputs: Vec<Vec<Vec<f32>>>,
    /// Per stage, the dropout mask drawn for this sample.
    masks: Vec<Option<Vec<f32>>>,
    full: bool,
}

impl SpikeRecord {
    pub fn layer(&self, layer: usize) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn prediction(&self) -> usize {
        crate::tensor::argmax(&self.output_potential)
    }
}

/// A per-step gradient that may be absent, shared by all steps, or per step.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum StepGrad {
    #[default]
    None,
    Constant(Vec<f64>),
    PerStep(Vec<Vec<f64>>),
}

impl StepGrad {
    pub fn at(&self, t: usize) -> Option<&[f64]> {
        match self {
            StepGrad::None => None,
            StepGrad::Constant(v) => Some(v),
            StepGrad::PerStep(v) => Some(&v[t]),
        }
    }

    fn map(self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> StepGrad {
        match self {
            StepGrad::None => StepGrad::None,
            StepGrad::Constant(v) => StepGrad::Constant(f(&v)),
            StepGrad::PerStep(v) => StepGrad::PerStep(v.iter().map(|s| f(s)).collect()),
        }
    }
}

/// Extra loss gradients injected into a spiking layer, on its spikes `o[t]`
/// and on its membrane potentials `v[t]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtraGrad {
    pub spikes: StepGrad,
    pub membrane: StepGrad,
}

/// Weight gradients in 64-bit, one entry per affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnGradients {
    pub layers: Vec<(usize, Vec<f64>)>,
}

impl SnnGradients {
    pub fn get(&self, layer: usize) -> Option<&[f64]> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, g)| g.as_slice())
    }

    pub fn add_assign(&mut self, other: &SnnGradients) {
        for ((_, a), (_, b)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Scaled 32-bit gradients aligned with the network's trainable tensors.
    pub fn to_gradients(&self, net: &Network, scale: f64) -> Gradients {
        let mut out = net.zero_gradients();
        for (layer, g) in &self.layers {
            if let Some(t) = out.get_mut(*layer, 0) {
                for (d, &s) in t.data_mut().iter_mut().zip(g) {
                    *d = (s * scale) as f32;
                }
            }
        }
        out
    }
}

/// A spiking network prepared for simulation: stages resolved and weights
/// packed. Rebuild after changing weights.
#[derive(Clone, Debug)]
pub struct SnnPlan {
    stages: Vec<Stage>,
    input_shape: Vec<usize>,
    classes: usize,
    spiking: Vec<usize>,
    affine_layers: Vec<usize>,
}

impl SnnPlan {
    /// `thresholds[i]` belongs to the `i`-th entry of [`spiking_layers`].
    pub fn new(net: &Network, thresholds: &[f32]) -> Result<Self> {
        let spec = &net.spec;
        let spiking = spiking_layers(spec);
        if thresholds.len() != spiking.len() {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds for {} spiking layers",
                thresholds.len(),
                spiking.len()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::InvalidArgument(format!("threshold {t} is not positive")));
        }
        let shapes = spec.shapes()?;
        let last = spec
            .layers
            .iter()
            .rposition(|l| l.kind.is_affine())
            .ok_or_else(|| Error::InvalidArgument("network has no conv or linear layer".into()))?;
        if last + 1 != spec.layers.len() {
            return Err(Error::InvalidArgument(
                "a spiking network must end with its output conv or linear layer".into(),
            ));
        }
        let mut stages = Vec::new();
        let mut slot = 0;
        let mut seen_affine = false;
        let mut i = 0;
        while i < spec.layers.len() {
            let kind = &spec.layers[i].kind;
            let needs_input_grad = seen_affine;
            let mut out_index = i + 1;
            let stage = match kind {
                LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                    let weight = match &net.params[i] {
                        LayerParams::Affine { weight, bias: None } => weight,
                        _ => {
                            return Err(Error::NotConvertible(vec![format!(
                                "layer {i} ({}): bias terms are not allowed",
                                kind.name()
                            )]))
                        }
                    };
                    let affine = Affine::new(kind, &shapes[i], weight);
                    seen_affine = true;
                    slot += 1;
                    if i == last {
                        StageKind::Output { affine, slot: slot - 1 }
                    } else if let Some(k) = spiking.iter().position(|&s| s == i) {
                        out_index = i + 2;
                        StageKind::Spiking {
                            affine,
                            threshold: thresholds[k],
                            slot: slot - 1,
                        }
                    } else {
                        StageKind::Analog { affine, slot: slot - 1 }
                    }
                }
                LayerKind::AvgPool { size } => {
                    let s = &shapes[i];
                    StageKind::Pool {
                        planes: s[0],
                        h: s[1],
                        w: s[2],
                        k: *size,
                    }
                }
                LayerKind::Dropout { p } => StageKind::Dropout { p: *p },
                LayerKind::Flatten => StageKind::Flatten,
                LayerKind::Relu => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i} (relu) must directly follow a conv or linear layer"
                    )))
                }
                other => {
                    return Err(Error::NotConvertible(vec![format!(
                        "layer {i} ({}) has no spiking counterpart",
                        other.name()
                    )]))
                }
            };
            stages.push(Stage {
                layer: i,
                kind: stage,
                needs_input_grad,
                out_shape: shapes[out_index].clone(),
            });
            i = out_index;
        }
        let affine_layers = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_affine())
            .map(|(i, _)| i)
            .collect();
        Ok(SnnPlan {
            stages,
            input_shape: spec.input_shape.clone(),
            classes: spec.classes,
            spiking,
            affine_layers,
        })
    }

    pub fn spiking_layers(&self) -> &[usize] {
        &self.spiking
    }

    fn affine_count(&self) -> usize {
        self.affine_layers.len()
    }

    /// Simulates one sample. Dropout is active iff `dropout` is given; masks
    /// are drawn once per sample, in layer order.
    pub fn forward(&self, input: &SpikeTrain, cfg: &SnnConfig, mode: RecordMode, dropout: Option<&mut Rng>) -> Result<SpikeRecord> {
        self.run(input, cfg, mode, dropout, None)
    }

    /// Runs only up to and including spiking layer `spiking_index` (position
    /// in [`Self::spiking_layers`]); the returned record has no output.
    pub fn forward_until(&self, input: &SpikeTrain, cfg: &SnnConfig, spiking_index: usize) -> Result<SpikeRecord> {
        if spiking_index >= self.spiking.len() {
            return Err(Error::InvalidArgument(format!(
                "spiking layer index {spiking_index} out of range"
            )));
        }
        self.run(input, cfg, RecordMode::Counts, None, Some(spiking_index))
    }

    fn run(
        &self,
        input: &SpikeTrain,
        cfg: &SnnConfig,
        mode: RecordMode,
        mut dropout: Option<&mut Rng>,
        until: Option<usize>,
    ) -> Result<SpikeRecord> {
        cfg.validate()?;
        if input.frame_shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "snn_forward",
                format!(
                    "spike train frames {:?}, network expects {:?}",
                    input.frame_shape(),
                    self.input_shape
                ),
            ));
        }
        if input.steps() != cfg.time_steps {
            return Err(Error::InvalidArgument(format!(
                "spike train has {} steps, config says {}",
                input.steps(),
                cfg.time_steps
            )));
        }
        let full = mode == RecordMode::Full;
        let t_n = cfg.time_steps;
        let mut masks: Vec<Option<Vec<f32>>> = vec![None; self.stages.len()];
        if let Some(rng) = dropout.as_mut() {
            for (s, stage) in self.stages.iter().enumerate() {
                if let StageKind::Dropout { p } = stage.kind {
                    if p > 0.0 {
                        let shape = stage.out_shape.clone();
                        masks[s] = Some(crate::ops::dropout_mask(&shape, p, rng)?.into_data());
                    }
                }
            }
        }
        let mut layers = Vec::new();
        let mut state: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
        for stage in &self.stages {
            if let StageKind::Spiking { affine, threshold, .. } = &stage.kind {
                let n = affine.out_len();
                layers.push(LayerRecord {
                    layer: stage.layer,
                    shape: stage.out_shape.clone(),
                    threshold: *threshold,
                    counts: vec![0; n],
                    last_spike: vec![0; n],
                    membrane_sum: vec![0.0; n],
                    max_current: f32::NEG_INFINITY,
                    spikes: Vec::new(),
                    membranes: Vec::new(),
                });
                state.push((vec![0.0; n], vec![0.0; n]));
            }
        }
        let mut inputs: Vec<Vec<Vec<f32>>> = vec![Vec::new(); if full { self.affine_count() } else { 0 }];
        let mut v_out = vec![0.0f32; self.classes];
        let mut scratch = Vec::new();
        let mut current = Vec::new();
        let mut nz = Vec::new();
        for t in 0..t_n {
            let mut x = input.step(t).to_vec();
            let mut events = input.coding == Coding::Poisson;
            let mut spiking_index = 0;
            for (s, stage) in self.stages.iter().enumerate() {
                match &stage.kind {
                    StageKind::Spiking { affine, threshold, slot } => {
                        current.clear();
                        current.resize(affine.out_len(), 0.0);
                        apply(affine, &x, events, &mut current, &mut scratch, &mut nz);
                        if full {
                            inputs[*slot].push(x);
                        }
                        let rec = &mut layers[spiking_index];
                        let (v, o) = &mut state[spiking_index];
                        let theta = *threshold;
                        for j in 0..v.len() {
                            let c = current[j];
                            if c > rec.max_current {
                                rec.max_current = c;
                            }
                            v[j] = lif_update(v[j], c, o[j], cfg.leak, theta);
                            if v[j] > theta {
                                o[j] = 1.0;
                                rec.counts[j] += 1;
                                rec.last_spike[j] = t as u32 + 1;
                            } else {
                                o[j] = 0.0;
                            }
                            rec.membrane_sum[j] += v[j];
                        }
                        if full {
                            rec.spikes.push(o.clone());
                            rec.membranes.push(v.clone());
                        }
                        x = o.clone();
                        events = true;
                        if until == Some(spiking_index) {
                            break;
                        }
                        spiking_index += 1;
                    }
                    StageKind::Analog { affine, slot } => {
                        let mut out = vec![0.0; affine.out_len()];
                        apply(affine, &x, events, &mut out, &mut scratch, &mut nz);
                        if full {
                            inputs[*slot].push(x);
                        }
                        x = out;
                        events = false;
                    }
                    StageKind::Output { affine, slot } => {
                        current.clear();
                        current.resize(affine.out_len(), 0.0);
                        apply(affine, &x, events, &mut current, &mut scratch, &mut nz);
                        if full {
                            inputs[*slot].push(std::mem::take(&mut x));
                        }
                        for (v, &c) in v_out.iter_mut().zip(&current) {
                            *v += c;
                        }
                    }
                    StageKind::Pool { planes, h, w, k } => {
                        let mut out = vec![0.0; planes * (h / k) * (w / k)];
                        avgpool_planes(&x, *h, *w, *k, &mut out);
                        x = out;
                    }
                    StageKind::Dropout { .. } => {
                        if let Some(m) = &masks[s] {
                            for (a, &b) in x.iter_mut().zip(m) {
                                *a *= b;
                            }
                        }
                    }
                    StageKind::Flatten => {}
                }
            }
        }
        let probabilities = if until.is_some() { Vec::new() } else { softmax(&v_out) };
        Ok(SpikeRecord {
            time_steps: t_n,
            layers,
            output_potential: if until.is_some() { Vec::new() } else { v_out },
            probabilities,
            inputs,
            masks,
            full,
        })
    }

    /// Backpropagation through time from `grad_output = dL/dv_out[T]`, plus
    /// optional extra gradients on spiking layers keyed by spec layer index.
    pub fn backward(
        &self,
        record: &SpikeRecord,
        grad_output: &[f64],
        extras: &BTreeMap<usize, ExtraGrad>,
        cfg: &SnnConfig,
    ) -> Result<SnnGradients> {
        if !record.full {
            return Err(Error::InvalidArgument("backward needs a full spike record".into()));
        }
        if record.inputs.len() != self.affine_count()
            || record.layers.len() != self.spiking.len()
            || record.time_steps != cfg.time_steps
            || grad_output.len() != self.classes
        {
            return Err(Error::InvalidArgument(
                "spike record does not belong to this network and config".into(),
            ));
        }
        for key in extras.keys() {
            if !self.spiking.contains(key) {
                return Err(Error::InvalidArgument(format!(
                    "extra gradient for layer {key}, which is not a spiking layer"
                )));
            }
        }
        let t_n = cfg.time_steps;
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut g = StepGrad::None;
        let mut scratch = Vec::new();
        let mut spiking_index = self.spiking.len();
        for (s, stage) in self.stages.iter().enumerate().rev() {
            match &stage.kind {
                StageKind::Output { affine, slot } => {
                    let xs = &record.inputs[*slot];
                    let mut sum = vec![0.0f64; affine.in_len()];
                    for x in xs {
                        for (a, &b) in sum.iter_mut().zip(x) {
                            *a += b as f64;
                        }
                    }
                    let d = affine.in_len();
                    let mut dw = vec![0.0f64; affine.weight_len()];
                    match affine {
                        Affine::Linear { .. } => {
                            for (k, &gk) in grad_output.iter().enumerate() {
                                for (j, &xj) in sum.iter().enumerate() {
                                    dw[k * d + j] = gk * xj;
                                }
                            }
                        }
                        Affine::Conv { .. } => {
                            for x in xs {
                                let nz = nonzeros(x);
                                affine.weight_grad(grad_output, x, &nz, &mut dw, &mut scratch);
                            }
                            dw = affine.unpack(&dw);
                        }
                    }
                    grads.push((stage.layer, dw));
                    g = if stage.needs_input_grad {
                        let mut gx = vec![0.0; d];
                        affine.backward_input(grad_output, &mut gx, &mut scratch);
                        StepGrad::Constant(gx)
                    } else {
                        StepGrad::None
                    };
                }
                StageKind::Dropout { .. } => {
                    if let Some(m) = &record.masks[s] {
                        g = g.map(|v| v.iter().zip(m).map(|(a, &b)| a * b as f64).collect());
                    }
                }
                StageKind::Flatten => {}
                StageKind::Pool { planes, h, w, k } => {
                    let n = planes * h * w;
                    g = g.map(|v| {
                        let mut out = vec![0.0; n];
                        pool_backward(v, *h, *w, *k, &mut out);
                        out
                    });
                }
                StageKind::Analog { affine, slot } => {
                    let mut dw = vec![0.0f64; affine.weight_len()];
                    let mut per_step = Vec::with_capacity(t_n);
                    for t in 0..t_n {
                        let x = &record.inputs[*slot][t];
                        let mut gx = vec![0.0; affine.in_len()];
                        if let Some(gt) = g.at(t) {
                            let nz = nonzeros(x);
                            affine.weight_grad(gt, x, &nz, &mut dw, &mut scratch);
                            if stage.needs_input_grad {
                                affine.backward_input(gt, &mut gx, &mut scratch);
                            }
                        }
                        per_step.push(gx);
                    }
                    grads.push((stage.layer, affine.unpack(&dw)));
                    g = if stage.needs_input_grad { StepGrad::PerStep(per_step) } else { StepGrad::None };
                }
                StageKind::Spiking { affine, threshold, slot } => {
                    spiking_index -= 1;
                    let rec = &record.layers[spiking_index];
                    let extra = extras.get(&stage.layer);
                    let theta = *threshold;
                    let n = affine.out_len();
                    let mut dw = vec![0.0f64; affine.weight_len()];
                    let mut per_step = vec![Vec::new(); if stage.needs_input_grad { t_n } else { 0 }];
                    let mut dv_next = vec![0.0f64; n];
                    let mut dv = vec![0.0f64; n];
                    let (theta64, leak, gamma) = (theta as f64, cfg.leak as f64, cfg.gamma as f64);
                    for t in (0..t_n).rev() {
                        let above = g.at(t);
                        let es = extra.and_then(|e| e.spikes.at(t));
                        let em = extra.and_then(|e| e.membrane.at(t));
                        let v = &rec.membranes[t];
                        for j in 0..n {
                            let mut d_o = above.map_or(0.0, |a| a[j]);
                            if let Some(e) = es {
                                d_o += e[j];
                            }
                            if cfg.reset_grad {
                                d_o -= theta64 * dv_next[j];
                            }
                            let mut d_v = d_o * surrogate64(v[j] as f64, theta64, gamma);
                            if let Some(e) = em {
                                d_v += e[j];
                            }
                            if cfg.temporal_grad {
                                d_v += leak * dv_next[j];
                            }
                            dv[j] = d_v;
                        }
                        let x = &record.inputs[*slot][t];
                        let nz = nonzeros(x);
                        affine.weight_grad(&dv, x, &nz, &mut dw, &mut scratch);
                        if stage.needs_input_grad {
                            let mut gx = vec![0.0; affine.in_len()];
                            affine.backward_input(&dv, &mut gx, &mut scratch);
                            per_step[t] = gx;
                        }
                        std::mem::swap(&mut dv, &mut dv_next);
                    }
                    grads.push((stage.layer, affine.unpack(&dw)));
                    g = if stage.needs_input_grad { StepGrad::PerStep(per_step) } else { StepGrad::None };
                }
            }
        }
        grads.reverse();
        Ok(SnnGradients { layers: grads })
    }
}

fn surrogate64(v: f64, theta: f64, gamma: f64) -> f64 {
    gamma * (1.0 - (v - theta).abs() / theta).max(0.0)
}

fn pool_backward(grad_out: &[f64], h: usize, w: usize, k: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for (p, gout) in grad_out.chunks(oh * ow).enumerate() {
        let plane = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] += gout[(y / k) * ow + x / k] * inv;
            }
        }
    }
}

fn apply(affine: &Affine, x: &[f32], events: bool, out: &mut [f32], scratch: &mut Vec<f32>, nz: &mut Vec<u32>) {
    if events {
        nonzeros_into(x, nz);
        if !is_dense(nz.len(), x.len()) {
            affine.forward_events(x, nz, out, scratch);
            return;
        }
    }
    affine.forward_dense(x, out);
}

fn check_student(net: &Network) -> Result<()> {
    if net.spec.role != Role::StudentSnn {
        return Err(Error::InvalidArgument(format!(
            "spiking simulation needs a student-snn network, got {}",
            net.spec.role
        )));
    }
    Ok(())
}

/// Full forward pass of a student network; returns the predicted
/// distribution and the complete record.
pub fn snn_forward(net: &Network, thresholds: &[f32], input: &SpikeTrain, cfg: &SnnConfig) -> Result<(Vec<f64>, SpikeRecord)> {
    check_student(net)?;
    let rec = SnnPlan::new(net, thresholds)?.forward(input, cfg, RecordMode::Full, None)?;
    Ok((rec.probabilities.clone(), rec))
}

pub fn snn_backward(
    net: &Network,
    thresholds: &[f32],
    record: &SpikeRecord,
    grad_output: &[f64],
    extras: &BTreeMap<usize, ExtraGrad>,
    cfg: &SnnConfig,
) -> Result<SnnGradients> {
    check_student(net)?;
    SnnPlan::new(net, thresholds)?.backward(record, grad_output, extras, cfg)
}

/// Accuracy and spike statistics of a spiking network over a dataset.
#[derive(Clone, Debug)]
pub struct SnnEvaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub tally: SpikeTally,
    /// Per-sample count records, kept on request.
    pub records: Vec<SpikeRecord>,
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Eval-mode simulation of every item; item `i` is encoded from the stream
/// derived from `(seed, i)`.
pub fn evaluate_snn(
    net: &Network,
    thresholds: &[f32],
    data: &Dataset,
    cfg: &SnnConfig,
    coding: Coding,
    seed: u64,
    keep_records: bool,
) -> Result<SnnEvaluation> {
    let plan = SnnPlan::new(net, thresholds)?;
    let records: Vec<SpikeRecord> = data
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = Rng::derived(seed, &[EVAL_STREAM, i as u64]);
            let train = encode(&item.pixels, cfg.time_steps, coding, &mut rng)?;
            plan.forward(&train, cfg, RecordMode::Counts, None)
        })
        .collect::<Result<_>>()?;
    let mut tally = SpikeTally::new();
    let mut predictions = Vec::with_capacity(records.len());
    for r in &records {
        tally.add(r)?;
        predictions.push(r.prediction());
    }
    let labels: Vec<usize> = data.items.iter().map(|it| it.label).collect();
    Ok(SnnEvaluation {
        accuracy: top1_accuracy(&predictions, &labels)?,
        predictions,
        tally,
        records: if keep_records { records } else { Vec::new() },
    })
}
