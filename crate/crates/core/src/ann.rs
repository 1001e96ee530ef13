//! Batched forward/backward over the layer zoo, cross-entropy, input
//! gradients and the ANN training loop.

use std::collections::BTreeMap;

use crate::datasets::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::metrics::top1_accuracy;
use crate::network::{Gradients, LayerKind, LayerParams, Level, Network, Role};
use crate::ops::{self, BatchNormCache, BN_MOMENTUM};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Cache {
    Affine { input: Tensor },
    Relu { input: Tensor },
    AvgPool { input_shape: Vec<usize> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dropout { mask: Option<Tensor> },
    BatchNorm(BatchNormCache),
    Flatten { input_shape: Vec<usize> },
}

/// Per-layer state saved by the forward pass for [`ann_backward`].
#[derive(Clone, Debug)]
pub struct AnnTrace {
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct AnnOutput {
    pub logits: Tensor,
    /// Post-ReLU activation `[N,C,H,W]` of each requested level's layer.
    pub captured: BTreeMap<Level, Tensor>,
    pub trace: AnnTrace,
}

/// Forward pass over a batch `[N, ...input_shape]`. Dropout is active only in
/// train mode and then needs `rng`.
pub fn ann_forward(net: &Network, input: &Tensor, mode: Mode, capture: &[Level], mut rng: Option<&mut Rng>) -> Result<AnnOutput> {
    let spec = &net.spec;
    if input.ndim() != spec.input_shape.len() + 1 || input.shape()[1..] != spec.input_shape[..] {
        return Err(Error::shape(
            "ann_forward",
            format!("input {:?} does not match [N, {:?}]", input.shape(), spec.input_shape),
        ));
    }
    let levels = spec.level_layers();
    let mut capture_at: BTreeMap<usize, Level> = BTreeMap::new();
    for lv in capture {
        let layer = *levels.get(lv).ok_or_else(|| {
            Error::InvalidArgument(format!("network has no layer tagged '{lv}'"))
        })?;
        capture_at.insert(spec.capture_point(layer), *lv);
    }
    let n = input.dim(0);
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut captured = BTreeMap::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let (y, cache) = match (&layer.kind, &net.params[i]) {
            (LayerKind::Conv { stride, pad, .. }, LayerParams::Affine { weight, bias }) => {
                let y = ops::conv2d(&x, weight, *stride, *pad, bias.as_ref())?;
                (y, Cache::Affine { input: x })
            }
            (LayerKind::Linear { .. }, LayerParams::Affine { weight, bias }) => {
                let y = ops::linear(&x, weight, bias.as_ref())?;
                (y, Cache::Affine { input: x })
            }
            (LayerKind::Relu, _) => (ops::relu(&x), Cache::Relu { input: x }),
            (LayerKind::AvgPool { size }, _) => {
                let y = ops::avgpool2d(&x, *size)?;
                (y, Cache::AvgPool { input_shape: x.shape().to_vec() })
            }
            (LayerKind::MaxPool { size }, _) => {
                let (y, argmax) = ops::maxpool2d(&x, *size)?;
                (y, Cache::MaxPool { input_shape: x.shape().to_vec(), argmax })
            }
            (LayerKind::Dropout { p }, _) => {
                if mode == Mode::Train && *p > 0.0 {
                    let r = rng.as_deref_mut().ok_or_else(|| {
                        Error::InvalidArgument("train-mode dropout needs an rng".into())
                    })?;
                    let mask = ops::dropout_mask(x.shape(), *p, r)?;
                    (ops::mul(&x, &mask)?, Cache::Dropout { mask: Some(mask) })
                } else {
                    (x, Cache::Dropout { mask: None })
                }
            }
            (
                LayerKind::BatchNorm { .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let (y, c) = ops::batchnorm(&x, gamma, beta, running_mean, running_var, mode == Mode::Train)?;
                (y, Cache::BatchNorm(c))
            }
            (LayerKind::Flatten, _) => {
                let input_shape = x.shape().to_vec();
                let flat = x.len() / n;
                (x.reshape(&[n, flat])?, Cache::Flatten { input_shape })
            }
            (kind, _) => {
                return Err(Error::shape(
                    "ann_forward",
                    format!("layer {i} ({}) is missing its parameters", kind.name()),
                ))
            }
        };
        if let Some(lv) = capture_at.get(&i) {
            captured.insert(*lv, y.clone());
        }
        caches.push(cache);
        x = y;
    }
    Ok(AnnOutput {
        logits: x,
        captured,
        trace: AnnTrace { caches },
    })
}

/// Backpropagates `grad_logits` through the recorded forward pass. Returns
/// parameter gradients and the gradient with respect to the input.
pub fn ann_backward(net: &Network, trace: &AnnTrace, grad_logits: &Tensor) -> Result<(Gradients, Tensor)> {
    let mut grads = net.zero_gradients();
    let mut g = grad_logits.clone();
    for (i, layer) in net.spec.layers.iter().enumerate().rev() {
        g = match (&layer.kind, &trace.caches[i], &net.params[i]) {
            (LayerKind::Conv { stride, pad, .. }, Cache::Affine { input }, LayerParams::Affine { weight, bias }) => {
                let cg = ops::conv2d_backward(&g, input, weight, *stride, *pad)?;
                *grads.get_mut(i, 0).unwrap() = cg.kernel;
                if bias.is_some() {
                    *grads.get_mut(i, 1).unwrap() = cg.bias;
                }
                cg.input
            }
            (LayerKind::Linear { .. }, Cache::Affine { input }, LayerParams::Affine { weight, bias }) => {
                let lg = ops::linear_backward(&g, input, weight)?;
                *grads.get_mut(i, 0).unwrap() = lg.weight;
                if bias.is_some() {
                    *grads.get_mut(i, 1).unwrap() = lg.bias;
                }
                lg.input
            }
            (LayerKind::Relu, Cache::Relu { input }, _) => ops::relu_backward(&g, input)?,
            (LayerKind::AvgPool { size }, Cache::AvgPool { input_shape }, _) => {
                ops::avgpool2d_backward(&g, input_shape, *size)?
            }
            (LayerKind::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }, _) => {
                ops::maxpool2d_backward(&g, argmax, input_shape)?
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }, _) => match mask {
                Some(m) => ops::mul(&g, m)?,
                None => g,
            },
            (LayerKind::BatchNorm { .. }, Cache::BatchNorm(cache), LayerParams::BatchNorm { gamma, .. }) => {
                let bg = ops::batchnorm_backward(&g, gamma, cache)?;
                *grads.get_mut(i, 0).unwrap() = bg.gamma;
                *grads.get_mut(i, 1).unwrap() = bg.beta;
                bg.input
            }
            (LayerKind::Flatten, Cache::Flatten { input_shape }, _) => g.reshape(input_shape)?,
            (kind, _, _) => {
                return Err(Error::shape(
                    "ann_backward",
                    format!("trace does not match layer {i} ({})", kind.name()),
                ))
            }
        };
    }
    Ok((grads, g))
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_stats(net: &mut Network, trace: &AnnTrace) {
    for (p, cache) in net.params.iter_mut().zip(&trace.caches) {
        if let (
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Cache::BatchNorm(c),
        ) = (p, cache)
        {
            if !c.train {
                continue;
            }
            for (r, &b) in running_mean.data_mut().iter_mut().zip(&c.batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in running_var.data_mut().iter_mut().zip(&c.batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax(logits) - onehot(label)) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    let mut grad = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} >= {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let p = softmax(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for j in 0..k {
            let t = if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = ((p[j] - t) / n as f64) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(&[n, k], grad)?))
}

/// Numerically stable softmax in 64-bit.
pub fn softmax(values: &[f32]) -> Vec<f64> {
    let m = values.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = values.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `dL/dx` of the cross-entropy loss for one image `[C,H,W]`, eval mode.
pub fn input_gradient(net: &Network, image: &Tensor, label: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(&shape)?;
    let out = ann_forward(net, &x, Mode::Eval, &[], None)?;
    let (_, g) = cross_entropy(&out.logits, &[label])?;
    let (_, gin) = ann_backward(net, &out.trace, &g)?;
    gin.reshape(image.shape())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub eval_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the epoch with the best test accuracy (earliest on ties).
    pub best: Network,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub history: Vec<EpochLog>,
}

const DROPOUT_STREAM: u64 = 0xD120;

/// Mini-batch training with cross-entropy. Keeps the best-test-accuracy weights.
pub fn train_ann(
    mut net: Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut best: Option<(Network, usize, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in batch_iter(train, cfg.batch_size, Some(cfg.seed), epoch as u64)?.into_iter().enumerate() {
            let mut rng = Rng::derived(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let out = ann_forward(&net, &batch.images, Mode::Train, &[], Some(&mut rng))?;
            let (loss, g) = cross_entropy(&out.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss is {loss} at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += loss as f64 * batch.labels.len() as f64;
            correct += predictions(&out.logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let (grads, _) = ann_backward(&net, &out.trace, &g)?;
            if !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, batch {b}"
                )));
            }
            update_running_stats(&mut net, &out.trace);
            opt.step(net.trainable_mut(), &grads.tensors)?;
        }
        let (test_accuracy, _) = evaluate_ann(&net, test, cfg.eval_batch_size)?;
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(_, _, acc)| test_accuracy > *acc) {
            best = Some((net.clone(), epoch + 1, test_accuracy));
        }
    }
    let (best, best_epoch, best_accuracy) = best.unwrap_or_else(|| (net.clone(), 0, 0.0));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_accuracy,
        history,
    })
}

pub fn train_teacher(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if net.spec.role != Role::Teacher {
        return Err(Error::InvalidArgument(format!(
            "train_teacher needs a teacher network, got {}",
            net.spec.role
        )));
    }
    train_ann(net, train, test, cfg, on_epoch)
}

pub fn train_intermediate(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if net.spec.role != Role::Intermediate {
        return Err(Error::InvalidArgument(format!(
            "train_intermediate needs an intermediate network, got {}",
            net.spec.role
        )));
    }
    train_ann(net, train, test, cfg, on_epoch)
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits.data().chunks(k).map(crate::tensor::argmax).collect()
}

/// Eval-mode accuracy and predictions over a dataset.
pub fn evaluate_ann(net: &Network, data: &Dataset, batch_size: usize) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for batch in batch_iter(data, batch_size.max(1), None, 0)? {
        let out = ann_forward(net, &batch.images, Mode::Eval, &[], None)?;
        preds.extend(predictions(&out.logits));
        labels.extend(batch.labels);
    }
    Ok((top1_accuracy(&preds, &labels)?, preds))
}
