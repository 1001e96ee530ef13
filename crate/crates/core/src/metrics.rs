//! Accuracy and spike-count energy proxy.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::snn::SpikeRecord;

/// Fraction of `predictions` equal to `labels`. Predictions are class
/// indices; argmax ties resolve to the lowest index upstream.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub layer: usize,
    pub neurons: usize,
    pub total_spikes: u64,
    /// Spikes per neuron per sample, summed over all steps.
    pub avg_spikes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    /// All spikes over all spiking neurons, per neuron per sample.
    pub network_average: f64,
    pub time_steps: usize,
    pub samples: usize,
    pub threshold_setting: String,
}

/// Running spike totals over records of one network and config.
#[derive(Clone, Debug, Default)]
pub struct SpikeTally {
    layers: Vec<(usize, usize, u64)>,
    time_steps: usize,
    samples: usize,
}

impl SpikeTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, record: &SpikeRecord) -> Result<()> {
        if self.samples == 0 {
            self.time_steps = record.time_steps;
            self.layers = record.layers.iter().map(|l| (l.layer, l.neurons(), 0)).collect();
        }
        let same = record.time_steps == self.time_steps
            && record.layers.len() == self.layers.len()
            && record
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(l, (id, n, _))| l.layer == *id && l.neurons() == *n);
        if !same {
            return Err(Error::InvalidArgument(
                "spike records come from different networks or time steps".into(),
            ));
        }
        for (l, (_, _, total)) in record.layers.iter().zip(&mut self.layers) {
            *total += l.counts.iter().map(|&c| c as u64).sum::<u64>();
        }
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &SpikeTally) -> Result<()> {
        if other.samples == 0 {
            return Ok(());
        }
        if self.samples == 0 {
            *self = other.clone();
            return Ok(());
        }
        let same = self.time_steps == other.time_steps
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.0 == b.0 && a.1 == b.1);
        if !same {
            return Err(Error::InvalidArgument("cannot merge tallies of different networks".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.2 += b.2;
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn report(&self, threshold_setting: &str) -> Result<EnergyReport> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("no spike records".into()));
        }
        let s = self.samples as f64;
        let layers: Vec<LayerEnergy> = self
            .layers
            .iter()
            .map(|&(layer, neurons, total)| LayerEnergy {
                layer,
                neurons,
                total_spikes: total,
                avg_spikes: total as f64 / (s * neurons as f64),
            })
            .collect();
        let all: u64 = self.layers.iter().map(|l| l.2).sum();
        let neurons: usize = self.layers.iter().map(|l| l.1).sum();
        Ok(EnergyReport {
            layers,
            network_average: if neurons == 0 { 0.0 } else { all as f64 / (s * neurons as f64) },
            time_steps: self.time_steps,
            samples: self.samples,
            threshold_setting: threshold_setting.to_string(),
        })
    }
}

/// Per-layer average spikes per neuron per sample over `records`.
pub fn spike_report(records: &[SpikeRecord], threshold_setting: &str) -> Result<EnergyReport> {
    let mut tally = SpikeTally::new();
    for r in records {
        tally.add(r)?;
    }
    tally.report(threshold_setting)
}

impl EnergyReport {
    /// Columns: `layer,neurons,total_spikes,avg_spikes_per_neuron`; the last
    /// row (`all`) is the network-wide average.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,neurons,total_spikes,avg_spikes_per_neuron\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.layer, l.neurons, l.total_spikes, l.avg_spikes);
        }
        let neurons: usize = self.layers.iter().map(|l| l.neurons).sum();
        let total: u64 = self.layers.iter().map(|l| l.total_spikes).sum();
        let _ = writeln!(s, "all,{neurons},{total},{}", self.network_average);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "time_steps = {}", self.time_steps);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "thresholds = {}", self.threshold_setting);
        for l in &self.layers {
            let _ = writeln!(s, "layer {} ({} neurons): {:.4} spikes/neuron", l.layer, l.neurons, l.avg_spikes);
        }
        let _ = writeln!(s, "network average: {:.4} spikes/neuron", self.network_average);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(top1_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 3]).unwrap(), 0.75);
        assert!(top1_accuracy(&[], &[]).is_err());
    }
}
