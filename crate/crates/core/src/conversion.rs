//! Conversion of a constrained ANN into a spiking student by threshold
//! balancing: weights are kept, each spiking layer's threshold is set to the
//! largest input current it receives on a calibration set.

use rayon::prelude::*;

use crate::archs::find_wide_stem;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::datasets::LabeledImage;
use crate::encoding::{encode, Coding};
use crate::error::{Error, Result};
use crate::network::{constraint_violations, LayerKind, Network, Role};
use crate::rng::Rng;
use crate::snn::{spiking_layers, SnnConfig, SnnPlan};

/// Thresholds chosen for every spiking layer and how they were obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    /// Spec indices of the spiking conv/linear layers.
    pub layers: Vec<usize>,
    pub thresholds: Vec<f32>,
    /// Largest input current per layer over all samples, steps and neurons.
    pub maxima: Vec<f32>,
    pub samples: usize,
    pub time_steps: usize,
    /// Percentile of per-sample maxima used as threshold; 100 means the max.
    pub percentile: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub time_steps: usize,
    pub leak: f32,
    pub percentile: f32,
    pub coding: Coding,
    pub seed: u64,
}

const CALIBRATION_STREAM: u64 = 0xCA11B;

/// Everything that keeps `spec` from being simulated as a spiking network.
pub fn validate_convertible(spec: &crate::network::NetworkSpec) -> std::result::Result<(), Vec<String>> {
    let mut v = constraint_violations(spec);
    if let Some(i) = find_wide_stem(spec) {
        if let LayerKind::Conv { kernel, stride, .. } = spec.layers[i].kind {
            v.push(format!(
                "layer {i} (conv {kernel}x{kernel}, stride {stride}): wide stem, replace it with three 3x3 stride-1 convolutions"
            ));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Nearest-rank percentile of `values` (sorted in place); 100 gives the max.
fn percentile(values: &mut [f32], p: f32) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    let rank = ((p as f64 / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Sets thresholds front to back. For layer `l` the spiking forward runs with
/// the thresholds of layers `< l` already fixed, and `theta_l` becomes the
/// maximum (or percentile of per-sample maxima) of `W x[t]`. Sample `i` is
/// always encoded from the same derived stream, so every pass sees the same
/// input spikes.
pub fn balance_thresholds(ann: &Network, calibration: &[LabeledImage], cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    validate_convertible(&ann.spec).map_err(Error::NotConvertible)?;
    if calibration.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    if !(cfg.percentile > 0.0 && cfg.percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile {} outside (0, 100]",
            cfg.percentile
        )));
    }
    let layers = spiking_layers(&ann.spec);
    let snn_cfg = SnnConfig {
        leak: cfg.leak,
        time_steps: cfg.time_steps,
        ..SnnConfig::default()
    };
    let mut thresholds = vec![1.0f32; layers.len()];
    let mut maxima = Vec::with_capacity(layers.len());
    for l in 0..layers.len() {
        let plan = SnnPlan::new(ann, &thresholds)?;
        let per_sample: Vec<f32> = calibration
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let mut rng = Rng::derived(cfg.seed, &[CALIBRATION_STREAM, i as u64]);
                let train = encode(&item.pixels, cfg.time_steps, cfg.coding, &mut rng)?;
                Ok(plan.forward_until(&train, &snn_cfg, l)?.layers[l].max_current)
            })
            .collect::<Result<_>>()?;
        let mut sorted = per_sample.clone();
        let max = per_sample.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let theta = percentile(&mut sorted, cfg.percentile);
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::Calibration(format!(
                "layer {}: nonpositive maximum preactivation {theta}",
                layers[l]
            )));
        }
        thresholds[l] = theta;
        maxima.push(max);
    }
    Ok(CalibrationReport {
        layers,
        thresholds,
        maxima,
        samples: calibration.len(),
        time_steps: cfg.time_steps,
        percentile: cfg.percentile,
    })
}

/// Copies the weights verbatim, installs the thresholds and marks the network
/// as a spiking student.
pub fn convert(ann: &Checkpoint, report: &CalibrationReport) -> Result<Checkpoint> {
    let layers = spiking_layers(&ann.network.spec);
    if layers != report.layers || report.thresholds.len() != layers.len() || report.maxima.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration covers layers {:?}, network has spiking layers {:?}",
            report.layers, layers
        )));
    }
    validate_convertible(&ann.network.spec).map_err(Error::NotConvertible)?;
    let mut network = ann.network.clone();
    network.spec.role = Role::StudentSnn;
    Ok(Checkpoint {
        network,
        calibration: Some(report.clone()),
        meta: CheckpointMeta {
            epoch: 0,
            ..ann.meta.clone()
        },
    })
}
