//! Desk-scale architectures: a VGG9-style teacher, the 3Conv/2Linear and
//! VGG5-style students, and the wide-stem replacement for ResNet-style specs.

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, NetworkSpec, Role};

fn flat_features(spec_layers: &[LayerSpec], input: &[usize]) -> usize {
    let probe = NetworkSpec {
        role: Role::Teacher,
        input_shape: input.to_vec(),
        classes: 0,
        layers: spec_layers.to_vec(),
    };
    probe
        .shapes()
        .map(|s| s.last().unwrap().iter().product())
        .expect("architecture builder produced an inconsistent stack")
}

fn finish(role: Role, input: &[usize], classes: usize, layers: Vec<LayerSpec>) -> NetworkSpec {
    let mut spec = NetworkSpec {
        role,
        input_shape: input.to_vec(),
        classes,
        layers,
    };
    spec.tag_default_levels()
        .expect("architecture builders emit at least three conv layers");
    spec
}

/// Seven 3x3 convolutions in three blocks (widths `w, 2w, 4w`) with batch
/// normalization, bias and max pooling, then two linear layers.
pub fn teacher_vgg9(input: &[usize], classes: usize, width: usize, dropout: f32) -> NetworkSpec {
    let c = input[0];
    let mut layers = Vec::new();
    let conv = |layers: &mut Vec<LayerSpec>, cin: usize, cout: usize| {
        layers.push(LayerSpec::conv(cin, cout, 3, 1, 1, true));
        layers.push(LayerSpec::batchnorm(cout));
        layers.push(LayerSpec::relu());
    };
    let (w1, w2, w3) = (width, 2 * width, 4 * width);
    conv(&mut layers, c, w1);
    conv(&mut layers, w1, w1);
    layers.push(LayerSpec::maxpool(2));
    conv(&mut layers, w1, w2);
    conv(&mut layers, w2, w2);
    layers.push(LayerSpec::maxpool(2));
    conv(&mut layers, w2, w3);
    conv(&mut layers, w3, w3);
    conv(&mut layers, w3, w3);
    layers.push(LayerSpec::flatten());
    let flat = flat_features(&layers, input);
    let hidden = 8 * width;
    layers.push(LayerSpec::linear(flat, hidden, true));
    layers.push(LayerSpec::relu());
    layers.push(LayerSpec::dropout(dropout));
    layers.push(LayerSpec::linear(hidden, classes, true));
    finish(Role::Teacher, input, classes, layers)
}

/// Three bias-free 3x3 convolutions with average pooling after the first two,
/// then two bias-free linear layers.
pub fn student_3conv2linear(input: &[usize], classes: usize, widths: [usize; 3], hidden: usize, dropout: f32) -> NetworkSpec {
    let c = input[0];
    let mut layers = vec![
        LayerSpec::conv(c, widths[0], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::avgpool(2),
        LayerSpec::conv(widths[0], widths[1], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::avgpool(2),
        LayerSpec::conv(widths[1], widths[2], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::flatten(),
    ];
    let flat = flat_features(&layers, input);
    layers.extend([
        LayerSpec::linear(flat, hidden, false),
        LayerSpec::relu(),
        LayerSpec::dropout(dropout),
        LayerSpec::linear(hidden, classes, false),
    ]);
    finish(Role::Intermediate, input, classes, layers)
}

/// VGG5-style: conv, pool, conv, conv, pool, two linear layers; bias-free.
pub fn student_vgg5(input: &[usize], classes: usize, widths: [usize; 2], hidden: usize, dropout: f32) -> NetworkSpec {
    let c = input[0];
    let mut layers = vec![
        LayerSpec::conv(c, widths[0], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::avgpool(2),
        LayerSpec::conv(widths[0], widths[1], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::conv(widths[1], widths[1], 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::avgpool(2),
        LayerSpec::flatten(),
    ];
    let flat = flat_features(&layers, input);
    layers.extend([
        LayerSpec::linear(flat, hidden, false),
        LayerSpec::relu(),
        LayerSpec::dropout(dropout),
        LayerSpec::linear(hidden, classes, false),
    ]);
    finish(Role::Intermediate, input, classes, layers)
}

/// A plain ResNet-style stack: 7x7 stride-2 stem, then 3x3 convolutions.
pub fn resnet_style(input: &[usize], classes: usize, width: usize, role: Role) -> NetworkSpec {
    let c = input[0];
    let bias = role == Role::Teacher;
    let mut layers = vec![LayerSpec::conv(c, width, 7, 2, 3, bias), LayerSpec::relu()];
    for _ in 0..2 {
        layers.push(LayerSpec::conv(width, width, 3, 1, 1, bias));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::avgpool(2));
    layers.push(LayerSpec::conv(width, 2 * width, 3, 1, 1, bias));
    layers.push(LayerSpec::relu());
    layers.push(LayerSpec::flatten());
    let flat = flat_features(&layers, input);
    layers.push(LayerSpec::linear(flat, classes, bias));
    finish(role, input, classes, layers)
}

/// Index of a wide residual stem (7x7 kernel, stride 2) if the spec has one.
pub fn find_wide_stem(spec: &NetworkSpec) -> Option<usize> {
    spec.layers.iter().position(|l| {
        matches!(
            l.kind,
            LayerKind::Conv {
                kernel: 7,
                stride: 2,
                ..
            }
        )
    })
}

/// Replaces the 7x7 stride-2 stem with three bias-free 3x3 stride-1
/// convolutions separated by ReLU and dropout, followed by a 2x2 average pool
/// that restores the stem's downsampling.
pub fn replace_wide_stem(spec: &NetworkSpec, dropout: f32) -> Result<NetworkSpec> {
    let at = find_wide_stem(spec)
        .ok_or_else(|| Error::InvalidArgument("spec has no 7x7 stride-2 stem".into()))?;
    let (cin, cout) = match spec.layers[at].kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            ..
        } => (in_channels, out_channels),
        _ => unreachable!(),
    };
    let level = spec.layers[at].level;
    let mut block = vec![
        LayerSpec::conv(cin, cout, 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::dropout(dropout),
        LayerSpec::conv(cout, cout, 3, 1, 1, false),
        LayerSpec::relu(),
        LayerSpec::dropout(dropout),
        LayerSpec::conv(cout, cout, 3, 1, 1, false),
    ];
    if let Some(lv) = level {
        block[6].level = Some(lv);
    }
    block.push(LayerSpec::avgpool(2));
    let mut out = spec.clone();
    out.layers.splice(at..=at, block);
    out.validate().map_err(|e| {
        Error::InvalidArgument(format!("stem replacement does not fit this input: {e}"))
    })?;
    Ok(out)
}
