//! Attention maps, layer pairing and the distillation training loop.
//!
//! An activation tensor `A[C,H,M]` becomes the spatial map
//! `F(A)[h,m] = (1/C) sum_c A[c,h,m]^2`, optionally divided by its Frobenius
//! norm. Paired teacher and student maps are compared with the L2 norm of
//! their difference and the objective is `ce + (alpha / 2) * sum_pairs`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ann::{ann_forward, input_gradient, Mode};
use crate::datasets::{batch_iter, Dataset};
use crate::encoding::{encode, Coding};
use crate::error::{Error, Result};
use crate::network::{LayerKind, Level, Network, NetworkSpec};
use crate::ops::interpolate_bilinear;
use crate::optim::Optimizer;
use crate::rng::Rng;
use crate::snn::{spiking_layers, ExtraGrad, RecordMode, SnnConfig, SnnGradients, SnnPlan, SpikeRecord, StepGrad};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    Teacher,
    Student,
}

/// A nonnegative spatial map `[height, width]`, row-major, in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub level: Option<Level>,
    pub source: MapSource,
}

impl AttentionMap {
    fn new(height: usize, width: usize, values: Vec<f64>, source: MapSource) -> Self {
        AttentionMap {
            height,
            width,
            values,
            level: None,
            source,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Divides by the Frobenius norm; a zero map stays zero.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for v in &mut self.values {
                *v /= n;
            }
        }
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.values.iter().map(|&v| v as f32).collect())
            .expect("map dims are positive")
    }
}

/// `[C,H,M]` view of an activation shape; flat `[K]` counts as `[K,1,1]`.
fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, m] => Ok((c, h, m)),
        [k] => Ok((k, 1, 1)),
        _ => Err(Error::shape(
            "attention_map",
            format!("expected [C,H,M] or [K], got {shape:?}"),
        )),
    }
}

fn channel_mean_square<T: Copy + Into<f64>>(a: &[T], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; plane];
    for ch in a.chunks(plane).take(c) {
        for (o, &v) in out.iter_mut().zip(ch) {
            let v: f64 = v.into();
            *o += v * v;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    out
}

/// `(1/C) sum_c A[c,h,m]^2`, then optionally Frobenius-normalized.
pub fn attention_map(a: &Tensor, normalize: bool) -> Result<AttentionMap> {
    let (c, h, m) = chw(a.shape())?;
    let map = AttentionMap::new(h, m, channel_mean_square(a.data(), c, h * m), MapSource::Teacher);
    Ok(if normalize { map.normalized() } else { map })
}

/// What stands in for a student layer's activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentActivation {
    /// Spikes summed over time.
    Spikes,
    /// Membrane potentials summed over time.
    Membrane,
}

fn recorded(record: &SpikeRecord, layer: usize) -> Result<&crate::snn::LayerRecord> {
    record
        .layer(layer)
        .ok_or_else(|| Error::Distill(format!("layer {layer} is not a recorded spiking layer")))
}

/// Attention map of a student layer from its time-summed spike counts.
pub fn student_attention_from_spikes(record: &SpikeRecord, layer: usize, normalize: bool) -> Result<AttentionMap> {
    student_attention(record, layer, StudentActivation::Spikes, normalize)
}

pub fn student_attention(record: &SpikeRecord, layer: usize, kind: StudentActivation, normalize: bool) -> Result<AttentionMap> {
    let l = recorded(record, layer)?;
    let (c, h, m) = chw(&l.shape)?;
    let values = match kind {
        StudentActivation::Spikes => channel_mean_square(&l.counts, c, h * m),
        StudentActivation::Membrane => channel_mean_square(&l.membrane_sum, c, h * m),
    };
    let map = AttentionMap::new(h, m, values, MapSource::Student);
    Ok(if normalize { map.normalized() } else { map })
}

fn check_pair(a: &AttentionMap, b: &AttentionMap) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            "attention_loss",
            format!("maps {}x{} and {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum over pairs of `||a - b||_2`.
pub fn attention_loss(pairs: &[(AttentionMap, AttentionMap)]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        check_pair(a, b)?;
        total += l2_diff(&a.values, &b.values);
    }
    Ok(total)
}

pub fn total_loss(ce: f64, at_loss: f64, alpha: f64) -> f64 {
    ce + alpha / 2.0 * at_loss
}

const DECAY: f64 = 0.367_879_441_171_442_33; // e^-1

/// Spike activation map at step `t` (1-based): per location, the sum over
/// channels of `o[t] * sum_{t' <= t, o[t'] = 1} e^{-(t - t')}`.
pub fn sam_map(record: &SpikeRecord, layer: usize, t: usize) -> Result<AttentionMap> {
    let l = recorded(record, layer)?;
    if t == 0 || t > record.time_steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            record.time_steps
        )));
    }
    if l.spikes.len() < t {
        return Err(Error::Distill("spike activation maps need a full spike record".into()));
    }
    let (c, h, m) = chw(&l.shape)?;
    let plane = h * m;
    let mut trace = vec![0.0f64; l.neurons()];
    for step in &l.spikes[..t] {
        for (k, &o) in trace.iter_mut().zip(step) {
            *k = DECAY * *k + o as f64;
        }
    }
    let last = &l.spikes[t - 1];
    let mut out = vec![0.0f64; plane];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            out[p] += last[i] as f64 * trace[i];
        }
    }
    Ok(AttentionMap::new(h, m, out, MapSource::Student))
}

/// Resizes a map by block averaging when the factors divide, otherwise by
/// corner-aligned bilinear interpolation.
fn resize_downsample(map: &AttentionMap, h: usize, w: usize) -> Result<AttentionMap> {
    if map.height == h && map.width == w {
        return Ok(map.clone());
    }
    if map.height.is_multiple_of(h) && map.width.is_multiple_of(w) {
        let (kh, kw) = (map.height / h, map.width / w);
        let mut out = vec![0.0f64; h * w];
        for y in 0..map.height {
            for x in 0..map.width {
                out[(y / kh) * w + x / kw] += map.values[y * map.width + x];
            }
        }
        let inv = 1.0 / (kh * kw) as f64;
        for v in &mut out {
            *v *= inv;
        }
        return Ok(AttentionMap { values: out, height: h, width: w, ..map.clone() });
    }
    resize_bilinear(map, h, w)
}

fn resize_bilinear(map: &AttentionMap, h: usize, w: usize) -> Result<AttentionMap> {
    if map.height == h && map.width == w {
        return Ok(map.clone());
    }
    let t = interpolate_bilinear(&map.to_tensor(), (h, w))?;
    Ok(AttentionMap {
        height: h,
        width: w,
        values: t.data().iter().map(|&v| v as f64).collect(),
        ..map.clone()
    })
}

/// Teacher input-sensitivity maps: `|dL/dx|^2` averaged over channels at the
/// input resolution, then resized to each target `(level, h, w)`.
pub fn gradient_attention_teacher(
    teacher: &Network,
    image: &Tensor,
    label: usize,
    targets: &[(Level, usize, usize)],
    normalize: bool,
) -> Result<Vec<AttentionMap>> {
    let g = input_gradient(teacher, image, label)?;
    let base = attention_map(&g, false)?;
    targets
        .iter()
        .map(|&(level, h, w)| {
            let mut m = resize_downsample(&base, h, w)?;
            m.level = Some(level);
            Ok(if normalize { m.normalized() } else { m })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Activation,
    Gradient,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(AttentionMode::Activation),
            "gradient" => Ok(AttentionMode::Gradient),
            other => Err(Error::InvalidArgument(format!(
                "unknown attention mode '{other}' (expected activation or gradient)"
            ))),
        }
    }
}

impl std::str::FromStr for StudentActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spikes" => Ok(StudentActivation::Spikes),
            "membrane" => Ok(StudentActivation::Membrane),
            other => Err(Error::InvalidArgument(format!(
                "unknown student activation '{other}' (expected spikes or membrane)"
            ))),
        }
    }
}

/// One teacher layer and one student layer compared at a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPair {
    pub level: Level,
    pub teacher_layer: usize,
    pub student_layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub mode: AttentionMode,
    pub levels: Vec<Level>,
    pub normalize: bool,
    pub student_activation: StudentActivation,
    /// Gradient mode: compare against the spike activation map at every step
    /// (averaged) instead of only the last.
    pub sam_all_steps: bool,
    /// Explicit pairing; `None` pairs the level tags of both specs.
    pub pairs: Option<Vec<LayerPair>>,
    pub coding: Coding,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.9,
            mode: AttentionMode::Activation,
            levels: Level::ALL.to_vec(),
            normalize: true,
            student_activation: StudentActivation::Spikes,
            sam_all_steps: false,
            pairs: None,
            coding: Coding::Poisson,
            batch_size: 16,
            seed: 42,
        }
    }
}

/// Resolves the teacher/student layer pairs for `levels`.
pub fn pair_layers(teacher: &NetworkSpec, student: &NetworkSpec, levels: &[Level], explicit: Option<&[LayerPair]>) -> Result<Vec<LayerPair>> {
    let spiking = spiking_layers(student);
    let pairs: Vec<LayerPair> = match explicit {
        Some(p) => p.iter().filter(|p| levels.contains(&p.level)).copied().collect(),
        None => {
            let (t, s) = (teacher.level_layers(), student.level_layers());
            levels
                .iter()
                .map(|lv| {
                    let teacher_layer = *t
                        .get(lv)
                        .ok_or_else(|| Error::Distill(format!("teacher has no layer tagged '{lv}'")))?;
                    let student_layer = *s
                        .get(lv)
                        .ok_or_else(|| Error::Distill(format!("student has no layer tagged '{lv}'")))?;
                    Ok(LayerPair {
                        level: *lv,
                        teacher_layer,
                        student_layer,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    for p in &pairs {
        let t_ok = teacher
            .layers
            .get(p.teacher_layer)
            .is_some_and(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }));
        if !t_ok {
            return Err(Error::Distill(format!(
                "pair at level {}: teacher layer {} is not a conv or linear layer",
                p.level, p.teacher_layer
            )));
        }
        if !spiking.contains(&p.student_layer) {
            return Err(Error::Distill(format!(
                "pair at level {}: student layer {} is not a spiking layer",
                p.level, p.student_layer
            )));
        }
    }
    Ok(pairs)
}

/// Gradient of `||q_s - q_t||` with respect to the raw (unnormalized)
/// student map. Returns the loss and `dL/d raw`.
fn pair_loss_grad(raw: &AttentionMap, target: &AttentionMap, normalize: bool) -> Result<(f64, Vec<f64>)> {
    check_pair(raw, target)?;
    let norm = raw.norm();
    let q: Vec<f64> = if normalize && norm > 0.0 {
        raw.values.iter().map(|v| v / norm).collect()
    } else {
        raw.values.clone()
    };
    let loss = l2_diff(&q, &target.values);
    if loss == 0.0 {
        return Ok((0.0, vec![0.0; q.len()]));
    }
    let g: Vec<f64> = q.iter().zip(&target.values).map(|(a, b)| (a - b) / loss).collect();
    if !(normalize && norm > 0.0) {
        return Ok((loss, g));
    }
    let qg: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
    Ok((loss, g.iter().zip(&q).map(|(gi, qi)| (gi - qi * qg) / norm).collect()))
}

/// Attention loss of one student record against per-pair teacher maps and the
/// extra gradients it induces (unscaled by alpha).
pub fn student_attention_grads(
    record: &SpikeRecord,
    pairs: &[LayerPair],
    teacher_maps: &[AttentionMap],
    cfg: &DistillConfig,
) -> Result<(f64, BTreeMap<usize, ExtraGrad>)> {
    let mut loss = 0.0;
    let mut extras: BTreeMap<usize, ExtraGrad> = BTreeMap::new();
    for (pair, target) in pairs.iter().zip(teacher_maps) {
        let l = recorded(record, pair.student_layer)?;
        let (c, h, m) = chw(&l.shape)?;
        let plane = h * m;
        let entry = extras.entry(pair.student_layer).or_default();
        match cfg.mode {
            AttentionMode::Activation => {
                let raw = student_attention(record, pair.student_layer, cfg.student_activation, false)?;
                let (pl, g) = pair_loss_grad(&raw, target, cfg.normalize)?;
                loss += pl;
                let act: Vec<f64> = match cfg.student_activation {
                    StudentActivation::Spikes => l.counts.iter().map(|&v| v as f64).collect(),
                    StudentActivation::Membrane => l.membrane_sum.iter().map(|&v| v as f64).collect(),
                };
                let grad: Vec<f64> = (0..c * plane)
                    .map(|i| g[i % plane] * 2.0 * act[i] / c as f64)
                    .collect();
                let slot = match cfg.student_activation {
                    StudentActivation::Spikes => &mut entry.spikes,
                    StudentActivation::Membrane => &mut entry.membrane,
                };
                add_constant(slot, grad);
            }
            AttentionMode::Gradient => {
                let t_n = record.time_steps;
                let mut adj = vec![None; t_n];
                let steps: Vec<usize> = if cfg.sam_all_steps { (1..=t_n).collect() } else { vec![t_n] };
                let w = 1.0 / steps.len() as f64;
                for &t in &steps {
                    let raw = sam_map(record, pair.student_layer, t)?;
                    let (pl, g) = pair_loss_grad(&raw, target, cfg.normalize)?;
                    loss += w * pl;
                    adj[t - 1] = Some(g.into_iter().map(|v| v * w).collect::<Vec<f64>>());
                }
                add_per_step(&mut entry.spikes, sam_backward(&l.spikes, c, plane, &adj));
            }
        }
    }
    Ok((loss, extras))
}

/// `dL/do[t]` given `dL/dS[t]` for the steps in `adj`, through
/// `S[t] = sum_c o[t] K[t]`, `K[t] = e^-1 K[t-1] + o[t]`.
fn sam_backward(spikes: &[Vec<f32>], c: usize, plane: usize, adj: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
    let t_n = spikes.len();
    let n = c * plane;
    let mut trace = vec![vec![0.0f64; n]; t_n];
    let mut k = vec![0.0f64; n];
    for (t, o) in spikes.iter().enumerate() {
        for i in 0..n {
            k[i] = DECAY * k[i] + o[i] as f64;
        }
        trace[t].copy_from_slice(&k);
    }
    let mut out = vec![vec![0.0f64; n]; t_n];
    let mut carry = vec![0.0f64; n];
    for t in (0..t_n).rev() {
        if t + 1 < t_n {
            for i in 0..n {
                let a = adj[t + 1].as_ref().map_or(0.0, |a| a[i % plane]);
                carry[i] = DECAY * (a * spikes[t + 1][i] as f64 + carry[i]);
            }
        }
        for i in 0..n {
            let a = adj[t].as_ref().map_or(0.0, |a| a[i % plane]);
            out[t][i] = a * (trace[t][i] + spikes[t][i] as f64) + carry[i];
        }
    }
    out
}

fn add_constant(slot: &mut StepGrad, g: Vec<f64>) {
    *slot = match std::mem::take(slot) {
        StepGrad::None => StepGrad::Constant(g),
        StepGrad::Constant(mut v) => {
            v.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            StepGrad::Constant(v)
        }
        StepGrad::PerStep(mut v) => {
            for s in &mut v {
                s.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            StepGrad::PerStep(v)
        }
    }
}

fn add_per_step(slot: &mut StepGrad, g: Vec<Vec<f64>>) {
    *slot = match std::mem::take(slot) {
        StepGrad::None => StepGrad::PerStep(g),
        StepGrad::Constant(c) => StepGrad::PerStep(
            g.into_iter()
                .map(|mut s| {
                    s.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                    s
                })
                .collect(),
        ),
        StepGrad::PerStep(mut v) => {
            for (s, t) in v.iter_mut().zip(&g) {
                s.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
            StepGrad::PerStep(v)
        }
    }
}

fn scale_step_grad(g: &mut StepGrad, k: f64) {
    match g {
        StepGrad::None => {}
        StepGrad::Constant(v) => v.iter_mut().for_each(|x| *x *= k),
        StepGrad::PerStep(v) => v.iter_mut().flatten().for_each(|x| *x *= k),
    }
}

/// Per-pair teacher maps for every item of a batch, resized to the student
/// layer shapes.
fn teacher_maps(
    teacher: &Network,
    images: &Tensor,
    labels: &[usize],
    pairs: &[LayerPair],
    student_shapes: &[(usize, usize)],
    cfg: &DistillConfig,
) -> Result<Vec<Vec<AttentionMap>>> {
    let n = labels.len();
    match cfg.mode {
        AttentionMode::Activation => {
            let levels: Vec<Level> = pairs.iter().map(|p| p.level).collect();
            let captures = teacher_captures(teacher, images, pairs)?;
            (0..n)
                .map(|i| {
                    pairs
                        .iter()
                        .zip(&captures)
                        .zip(student_shapes)
                        .zip(&levels)
                        .map(|(((_, cap), &(h, w)), &lv)| {
                            let raw = attention_map(&cap.slice_outer(i), false)?;
                            let mut m = resize_bilinear(&raw, h, w)?;
                            m.level = Some(lv);
                            Ok(if cfg.normalize { m.normalized() } else { m })
                        })
                        .collect()
                })
                .collect()
        }
        AttentionMode::Gradient => {
            let targets: Vec<(Level, usize, usize)> = pairs
                .iter()
                .zip(student_shapes)
                .map(|(p, &(h, w))| (p.level, h, w))
                .collect();
            (0..n)
                .into_par_iter()
                .map(|i| gradient_attention_teacher(teacher, &images.slice_outer(i), labels[i], &targets, cfg.normalize))
                .collect()
        }
    }
}

/// Post-ReLU activations of each pair's teacher layer, `[N, ...]`.
fn teacher_captures(teacher: &Network, images: &Tensor, pairs: &[LayerPair]) -> Result<Vec<Tensor>> {
    let by_level = teacher.spec.level_layers();
    let auto = pairs.iter().all(|p| by_level.get(&p.level) == Some(&p.teacher_layer));
    if auto {
        let levels: Vec<Level> = pairs.iter().map(|p| p.level).collect();
        let out = ann_forward(teacher, images, Mode::Eval, &levels, None)?;
        return Ok(levels.iter().map(|lv| out.captured[lv].clone()).collect());
    }
    // explicit layers: retag a copy so the capture machinery can find them
    pairs
        .iter()
        .map(|p| {
            let mut net = teacher.clone();
            for l in &mut net.spec.layers {
                l.level = None;
            }
            net.spec.layers[p.teacher_layer].level = Some(p.level);
            let out = ann_forward(&net, images, Mode::Eval, &[p.level], None)?;
            Ok(out.captured[&p.level].clone())
        })
        .collect()
}

/// Loss components averaged over the samples of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub attention: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

const ENCODE_STREAM: u64 = 0xE7C0;
const DROPOUT_STREAM: u64 = 0xD120;

fn sample_streams(seed: u64, epoch: usize, index: usize) -> (Rng, Rng) {
    (
        Rng::derived(seed, &[ENCODE_STREAM, epoch as u64, index as u64]),
        Rng::derived(seed, &[DROPOUT_STREAM, epoch as u64, index as u64]),
    )
}

fn ce_grad(probabilities: &[f64], label: usize) -> (f64, Vec<f64>) {
    let ce = -probabilities[label].max(f64::MIN_POSITIVE).ln();
    let g = probabilities
        .iter()
        .enumerate()
        .map(|(k, &p)| p - if k == label { 1.0 } else { 0.0 })
        .collect();
    (ce, g)
}

/// One epoch of layer-wise attention distillation. The teacher is only read.
/// With `alpha = 0` no attention gradient reaches the student.
#[allow(clippy::too_many_arguments)]
pub fn distill_epoch(
    teacher: &Network,
    student: &mut Network,
    thresholds: &[f32],
    data: &Dataset,
    cfg: &DistillConfig,
    snn: &SnnConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
) -> Result<EpochMetrics> {
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {} < 0", cfg.alpha)));
    }
    let pairs = pair_layers(&teacher.spec, &student.spec, &cfg.levels, cfg.pairs.as_deref())?;
    let shapes = student.spec.shapes()?;
    let student_shapes: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| chw(&shapes[p.student_layer + 1]).map(|(_, h, w)| (h, w)))
        .collect::<Result<_>>()?;
    let (mut ce_sum, mut at_sum, mut correct) = (0.0f64, 0.0f64, 0usize);
    for (b, batch) in batch_iter(data, cfg.batch_size, Some(cfg.seed), epoch as u64)?.into_iter().enumerate() {
        let targets = teacher_maps(teacher, &batch.images, &batch.labels, &pairs, &student_shapes, cfg)?;
        let plan = SnnPlan::new(student, thresholds)?;
        let half_alpha = cfg.alpha / 2.0;
        let results: Vec<(SnnGradients, f64, f64, bool)> = (0..batch.labels.len())
            .into_par_iter()
            .map(|k| {
                let index = batch.indices[k];
                let (mut enc, mut drop) = sample_streams(cfg.seed, epoch, index);
                let train = encode(&batch.images.slice_outer(k), snn.time_steps, cfg.coding, &mut enc)?;
                let rec = plan.forward(&train, snn, RecordMode::Full, Some(&mut drop))?;
                let (ce, g) = ce_grad(&rec.probabilities, batch.labels[k]);
                let (at, mut extras) = student_attention_grads(&rec, &pairs, &targets[k], cfg)?;
                if cfg.alpha == 0.0 {
                    extras.clear();
                } else {
                    for e in extras.values_mut() {
                        scale_step_grad(&mut e.spikes, half_alpha);
                        scale_step_grad(&mut e.membrane, half_alpha);
                    }
                }
                let grads = plan.backward(&rec, &g, &extras, snn)?;
                Ok((grads, ce, at, rec.prediction() == batch.labels[k]))
            })
            .collect::<Result<_>>()?;
        let n = results.len();
        let mut iter = results.into_iter();
        let (mut total, ce0, at0, hit0) = iter.next().expect("batches are nonempty");
        ce_sum += ce0;
        at_sum += at0;
        correct += hit0 as usize;
        for (g, ce, at, hit) in iter {
            total.add_assign(&g);
            ce_sum += ce;
            at_sum += at;
            correct += hit as usize;
        }
        let grads = total.to_gradients(student, 1.0 / n as f64);
        if !grads.all_finite() || !ce_sum.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss or gradient at epoch {epoch}, batch {b}"
            )));
        }
        optimizer.step(student.trainable_mut(), &grads.tensors)?;
    }
    let n = data.len() as f64;
    let (ce, attention) = (ce_sum / n, at_sum / n);
    Ok(EpochMetrics {
        epoch,
        ce,
        attention,
        total: total_loss(ce, attention, cfg.alpha),
        train_accuracy: correct as f64 / n,
    })
}

/// Cross-entropy-only surrogate-gradient fine-tuning of a converted student,
/// drawing inputs and dropout masks from the same streams as
/// [`distill_epoch`].
#[allow(clippy::too_many_arguments)]
pub fn hybrid_epoch(
    student: &mut Network,
    thresholds: &[f32],
    data: &Dataset,
    coding: Coding,
    batch_size: usize,
    seed: u64,
    snn: &SnnConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
) -> Result<EpochMetrics> {
    let none = BTreeMap::new();
    let (mut ce_sum, mut correct) = (0.0f64, 0usize);
    for batch in batch_iter(data, batch_size, Some(seed), epoch as u64)? {
        let plan = SnnPlan::new(student, thresholds)?;
        let mut sum: Option<SnnGradients> = None;
        for (k, &index) in batch.indices.iter().enumerate() {
            let (mut enc, mut drop) = sample_streams(seed, epoch, index);
            let train = encode(&batch.images.slice_outer(k), snn.time_steps, coding, &mut enc)?;
            let rec = plan.forward(&train, snn, RecordMode::Full, Some(&mut drop))?;
            let (ce, g) = ce_grad(&rec.probabilities, batch.labels[k]);
            ce_sum += ce;
            correct += (rec.prediction() == batch.labels[k]) as usize;
            let grads = plan.backward(&rec, &g, &none, snn)?;
            match &mut sum {
                None => sum = Some(grads),
                Some(s) => s.add_assign(&grads),
            }
        }
        let grads = sum
            .expect("batches are nonempty")
            .to_gradients(student, 1.0 / batch.labels.len() as f64);
        if !grads.all_finite() {
            return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}")));
        }
        optimizer.step(student.trainable_mut(), &grads.tensors)?;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        ce: ce_sum / n,
        attention: 0.0,
        total: ce_sum / n,
        train_accuracy: correct as f64 / n,
    })
}
