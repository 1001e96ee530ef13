//! Declarative layer lists, shape inference, level tagging and parameters.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Attention level a layer contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Mid, Level::High];
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low" => Ok(Level::Low),
            "mid" => Ok(Level::Mid),
            "high" => Ok(Level::High),
            other => Err(Error::InvalidArgument(format!("unknown level '{other}'"))),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Intermediate,
    StudentSnn,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Intermediate => "intermediate",
            Role::StudentSnn => "student-snn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    MaxPool {
        size: usize,
    },
    Dropout {
        p: f32,
    },
    BatchNorm {
        channels: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { bias: true, .. } | LayerKind::Linear { bias: true, .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, level: None }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Self::new(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias,
        })
    }

    pub fn linear(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self::new(LayerKind::Linear {
            in_features,
            out_features,
            bias,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn avgpool(size: usize) -> Self {
        Self::new(LayerKind::AvgPool { size })
    }

    pub fn maxpool(size: usize) -> Self {
        Self::new(LayerKind::MaxPool { size })
    }

    pub fn dropout(p: f32) -> Self {
        Self::new(LayerKind::Dropout { p })
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::new(LayerKind::BatchNorm { channels })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = Some(level);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    /// `[C,H,W]` for images, `[D]` for flat inputs.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Output shape (without batch axis) after every layer; element 0 is the
    /// input shape, element `i + 1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = shapes.last().unwrap();
            let bad = |why: String| Error::shape("network", format!("layer {i} ({}): {why}", layer.kind.name()));
            let next = match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if s.len() != 3 || s[0] != in_channels {
                        return Err(bad(format!("expects [{in_channels},H,W], got {s:?}")));
                    }
                    let g = ConvGeometry {
                        in_channels,
                        out_channels,
                        height: s[1],
                        width: s[2],
                        kh: kernel,
                        kw: kernel,
                        stride,
                        pad,
                    };
                    g.validate().map_err(|e| bad(e.to_string()))?;
                    vec![out_channels, g.out_height(), g.out_width()]
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if s.len() != 1 || s[0] != in_features {
                        return Err(bad(format!("expects [{in_features}], got {s:?}")));
                    }
                    vec![out_features]
                }
                LayerKind::AvgPool { size } | LayerKind::MaxPool { size } => {
                    if s.len() != 3 || size == 0 || s[1] % size != 0 || s[2] % size != 0 {
                        return Err(bad(format!("pool size {size} does not divide {s:?}")));
                    }
                    vec![s[0], s[1] / size, s[2] / size]
                }
                LayerKind::BatchNorm { channels } => {
                    if s[0] != channels {
                        return Err(bad(format!("expects {channels} channels, got {s:?}")));
                    }
                    s.clone()
                }
                LayerKind::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(bad(format!("probability {p} outside [0, 1)")));
                    }
                    s.clone()
                }
                LayerKind::Relu => s.clone(),
                LayerKind::Flatten => vec![s.iter().product()],
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Checks shape composition, the class count and role constraints.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let out = shapes.last().unwrap();
        if out != &vec![self.classes] {
            return Err(Error::shape(
                "network",
                format!("final output {out:?} does not match {} classes", self.classes),
            ));
        }
        if self.role != Role::Teacher {
            let v = constraint_violations(self);
            if !v.is_empty() {
                return Err(Error::NotConvertible(v));
            }
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Tags the last conv of the first third of conv layers `low`, the last
    /// of the second third `mid` and the last conv overall `high`. Needs at
    /// least three conv layers; existing tags are cleared.
    pub fn tag_default_levels(&mut self) -> Result<()> {
        let convs = self.conv_layers();
        let n = convs.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "default level tagging needs >= 3 conv layers, found {n}"
            )));
        }
        let b1 = (n / 3).max(1);
        let b2 = (2 * n / 3).max(b1 + 1);
        for l in &mut self.layers {
            l.level = None;
        }
        self.layers[convs[b1 - 1]].level = Some(Level::Low);
        self.layers[convs[b2 - 1]].level = Some(Level::Mid);
        self.layers[convs[n - 1]].level = Some(Level::High);
        Ok(())
    }

    /// Layer index carrying each level tag.
    pub fn level_layers(&self) -> BTreeMap<Level, usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.level.map(|lv| (lv, i)))
            .collect()
    }

    /// Where a tagged layer's activation is read: the first ReLU after it,
    /// before the next affine layer; the layer itself when there is none.
    pub fn capture_point(&self, layer: usize) -> usize {
        for (j, l) in self.layers.iter().enumerate().skip(layer + 1) {
            match l.kind {
                LayerKind::Relu => return j,
                LayerKind::Conv { .. } | LayerKind::Linear { .. } => break,
                _ => {}
            }
        }
        layer
    }

    /// Parameter tensor shapes of layer `i`, in storage order.
    pub fn param_shapes(&self, i: usize) -> Vec<Vec<usize>> {
        match self.layers[i].kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![vec![out_features, in_features]];
                if bias {
                    v.push(vec![out_features]);
                }
                v
            }
            LayerKind::BatchNorm { channels } => vec![vec![channels]; 4],
            _ => vec![],
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Dropout { .. }))
    }
}

/// Conversion constraints: no bias, no batchnorm, no max pooling.
pub fn constraint_violations(spec: &NetworkSpec) -> Vec<String> {
    let mut out = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if l.kind.has_bias() {
            out.push(format!("layer {i} ({}): bias terms are not allowed", l.kind.name()));
        }
        match l.kind {
            LayerKind::BatchNorm { .. } => {
                out.push(format!("layer {i} (batchnorm): batch normalization is not allowed"))
            }
            LayerKind::MaxPool { .. } => out.push(format!(
                "layer {i} (maxpool): max pooling is not allowed, use average pooling"
            )),
            _ => {}
        }
    }
    out
}

/// Trainable and buffer tensors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Affine {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl LayerParams {
    /// All stored tensors, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Affine { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.iter());
                v
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![gamma, beta, running_mean, running_var],
        }
    }
}

/// A network spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
}

impl Network {
    /// He-normal weights, zero biases, identity batchnorm.
    pub fn init(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(spec, |shape, fan_in| {
            let std = (2.0 / fan_in as f32).sqrt();
            Tensor::from_fn(shape, |_| rng.normal() * std)
        })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        Self::build(spec, |shape, _| Tensor::zeros(shape))
    }

    fn build(spec: NetworkSpec, mut weight: impl FnMut(&[usize], usize) -> Tensor) -> Result<Self> {
        spec.validate()?;
        let params = (0..spec.layers.len())
            .map(|i| {
                let shapes = spec.param_shapes(i);
                match spec.layers[i].kind {
                    LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                        let fan_in = shapes[0][1..].iter().product();
                        LayerParams::Affine {
                            weight: weight(&shapes[0], fan_in),
                            bias: shapes.get(1).map(|s| Tensor::zeros(s)),
                        }
                    }
                    LayerKind::BatchNorm { channels } => LayerParams::BatchNorm {
                        gamma: Tensor::full(&[channels], 1.0),
                        beta: Tensor::zeros(&[channels]),
                        running_mean: Tensor::zeros(&[channels]),
                        running_var: Tensor::full(&[channels], 1.0),
                    },
                    _ => LayerParams::None,
                }
            })
            .collect();
        Ok(Network { spec, params })
    }

    /// Builds from explicit tensors, checking every shape against the spec.
    pub fn from_params(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::shape(
                "network",
                format!("{} parameter entries for {} layers", params.len(), spec.layers.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            let want = spec.param_shapes(i);
            let have: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
            if want != have {
                return Err(Error::shape(
                    "network",
                    format!("layer {i} parameters {have:?}, spec needs {want:?}"),
                ));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        match &self.params[layer] {
            LayerParams::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        match &mut self.params[layer] {
            LayerParams::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Trainable tensors (weights, biases, batchnorm scale and shift) in a
    /// fixed order shared with [`Gradients`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match p {
                LayerParams::None => {}
                LayerParams::Affine { weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
            }
        }
        out
    }

    /// `(layer, slot)` for every trainable tensor, in [`Self::trainable_mut`] order.
    pub fn trainable_slots(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            match p {
                LayerParams::None => {}
                LayerParams::Affine { bias, .. } => {
                    out.push((i, 0));
                    if bias.is_some() {
                        out.push((i, 1));
                    }
                }
                LayerParams::BatchNorm { .. } => {
                    out.push((i, 0));
                    out.push((i, 1));
                }
            }
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        let mut tensors = Vec::new();
        for p in &self.params {
            match p {
                LayerParams::None => {}
                LayerParams::Affine { weight, bias } => {
                    tensors.push(Tensor::zeros(weight.shape()));
                    if let Some(b) = bias {
                        tensors.push(Tensor::zeros(b.shape()));
                    }
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    tensors.push(Tensor::zeros(gamma.shape()));
                    tensors.push(Tensor::zeros(beta.shape()));
                }
            }
        }
        Gradients {
            slots: self.trainable_slots(),
            tensors,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flat_map(|p| p.tensors()).map(|t| t.len()).sum()
    }
}

/// Gradients aligned with [`Network::trainable_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub slots: Vec<(usize, usize)>,
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, layer: usize, slot: usize) -> Option<&Tensor> {
        self.slots
            .iter()
            .position(|&s| s == (layer, slot))
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, layer: usize, slot: usize) -> Option<&mut Tensor> {
        self.slots
            .iter()
            .position(|&s| s == (layer, slot))
            .map(move |i| &mut self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f32) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
