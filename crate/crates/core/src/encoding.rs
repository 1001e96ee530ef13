//! Image to spike-train encoders.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coding {
    /// Signed Bernoulli spikes with probability `|p|` per step.
    Poisson,
    /// The analog image fed as input current at every step.
    Direct,
}

impl std::str::FromStr for Coding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(Coding::Poisson),
            "direct" => Ok(Coding::Direct),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoding '{other}' (expected poisson or direct)"
            ))),
        }
    }
}

impl std::fmt::Display for Coding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coding::Poisson => "poisson",
            Coding::Direct => "direct",
        })
    }
}

/// Encoded input: `values` is `[T, ...image shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub values: Tensor,
    pub coding: Coding,
}

impl SpikeTrain {
    pub fn steps(&self) -> usize {
        self.values.dim(0)
    }

    pub fn step_len(&self) -> usize {
        self.values.len() / self.steps()
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.values.shape()[1..]
    }

    /// Flat view of step `t` (0-based).
    pub fn step(&self, t: usize) -> &[f32] {
        let n = self.step_len();
        &self.values.data()[t * n..(t + 1) * n]
    }
}

fn frame_shape_with_steps(image: &Tensor, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("time steps must be >= 1".into()));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    Ok(shape)
}

/// At every step and pixel draws `u ~ U[0,1)` and emits `sign(p)` when
/// `u < |p|`, else 0. Draw order is step-major, then pixel row-major.
pub fn poisson_encode(image: &Tensor, steps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
    let shape = frame_shape_with_steps(image, steps)?;
    let n = image.len();
    let mut values = Vec::with_capacity(steps * n);
    for _ in 0..steps {
        for &p in image.data() {
            let u = rng.uniform();
            values.push(if u < p.abs() { p.signum() } else { 0.0 });
        }
    }
    Ok(SpikeTrain {
        values: Tensor::new(&shape, values)?,
        coding: Coding::Poisson,
    })
}

pub fn direct_encode(image: &Tensor, steps: usize) -> Result<SpikeTrain> {
    let shape = frame_shape_with_steps(image, steps)?;
    let mut values = Vec::with_capacity(steps * image.len());
    for _ in 0..steps {
        values.extend_from_slice(image.data());
    }
    Ok(SpikeTrain {
        values: Tensor::new(&shape, values)?,
        coding: Coding::Direct,
    })
}

pub fn encode(image: &Tensor, steps: usize, coding: Coding, rng: &mut Rng) -> Result<SpikeTrain> {
    match coding {
        Coding::Poisson => poisson_encode(image, steps, rng),
        Coding::Direct => direct_encode(image, steps),
    }
}
