//! Every explicit backward against central finite differences of the
//! forward (step 1e-3, norm-wise relative error < 1e-3).

use spikedistill::ann::{ann_backward, ann_forward, cross_entropy, input_gradient, softmax, Mode};
use spikedistill::network::{LayerSpec, Network, NetworkSpec, Role};
use spikedistill::ops;
use spikedistill::rng::Rng;
use spikedistill::Tensor;

const STEP: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values at least `gap` away from each other and from zero.
fn spread(shape: &[usize], rng: &mut Rng, gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 + 1.0) * gap * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape, v).unwrap()
}

/// Mean cross-entropy evaluated in 64-bit so the differences are not
/// swamped by rounding of the loss itself.
fn ce64(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.dim(1);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -softmax(&logits.data()[i * k..(i + 1) * k])[y].ln())
        .sum();
    total / labels.len() as f64
}

fn weighted(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central differences of `loss` with respect to every entry of `x`.
fn numeric(x: &Tensor, loss: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= STEP;
            let span = (p.data()[i] - m.data()[i]) as f64;
            (loss(&p) - loss(&m)) / span
        })
        .collect()
}

fn assert_close(name: &str, analytic: &Tensor, numeric: &[f64]) {
    let a: Vec<f64> = analytic.data().iter().map(|&v| v as f64).collect();
    let diff: f64 = a.iter().zip(numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-6);
    assert!(diff / scale < TOL, "{name}: relative error {} (analytic {a:?}, numeric {numeric:?})", diff / scale);
}

#[cfg_attr(not(acceptance), test)]
pub fn conv2d_backward_matches() {
    let mut rng = Rng::new(1);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&[2, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let out = ops::conv2d(&x, &k, stride, pad, Some(&b)).unwrap();
        let r = random(out.shape(), &mut rng);
        let g = ops::conv2d_backward(&r, &x, &k, stride, pad).unwrap();
        let f = |x: &Tensor, k: &Tensor, b: &Tensor| weighted(&ops::conv2d(x, k, stride, pad, Some(b)).unwrap(), &r);
        assert_close("conv input", &g.input, &numeric(&x, |x| f(x, &k, &b)));
        assert_close("conv kernel", &g.kernel, &numeric(&k, |k| f(&x, k, &b)));
        assert_close("conv bias", &g.bias, &numeric(&b, |b| f(&x, &k, b)));
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn linear_backward_matches() {
    let mut rng = Rng::new(2);
    let x = random(&[3, 6], &mut rng);
    let w = random(&[4, 6], &mut rng);
    let b = random(&[4], &mut rng);
    let r = random(&[3, 4], &mut rng);
    let g = ops::linear_backward(&r, &x, &w).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| weighted(&ops::linear(x, w, Some(b)).unwrap(), &r);
    assert_close("linear input", &g.input, &numeric(&x, |x| f(x, &w, &b)));
    assert_close("linear weight", &g.weight, &numeric(&w, |w| f(&x, w, &b)));
    assert_close("linear bias", &g.bias, &numeric(&b, |b| f(&x, &w, b)));
}

#[cfg_attr(not(acceptance), test)]
pub fn batchnorm_backward_matches() {
    let mut rng = Rng::new(3);
    for train in [true, false] {
        let x = random(&[4, 3, 2, 2], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let mean = random(&[3], &mut rng);
        let var = Tensor::from_fn(&[3], |_| 0.5 + rng.uniform());
        let r = random(x.shape(), &mut rng);
        let (_, cache) = ops::batchnorm(&x, &gamma, &beta, &mean, &var, train).unwrap();
        let g = ops::batchnorm_backward(&r, &gamma, &cache).unwrap();
        let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| weighted(&ops::batchnorm(x, gm, bt, &mean, &var, train).unwrap().0, &r);
        assert_close("bn input", &g.input, &numeric(&x, |x| f(x, &gamma, &beta)));
        assert_close("bn gamma", &g.gamma, &numeric(&gamma, |gm| f(&x, gm, &beta)));
        assert_close("bn beta", &g.beta, &numeric(&beta, |bt| f(&x, &gamma, bt)));
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn relu_pool_dropout_backward_match() {
    let mut rng = Rng::new(4);
    let x = spread(&[2, 2, 4, 4], &mut rng, 0.01);
    let r = random(x.shape(), &mut rng);
    let g = ops::relu_backward(&r, &x).unwrap();
    assert_close("relu", &g, &numeric(&x, |x| weighted(&ops::relu(x), &r)));

    let r = random(&[2, 2, 2, 2], &mut rng);
    let g = ops::avgpool2d_backward(&r, x.shape(), 2).unwrap();
    assert_close("avgpool", &g, &numeric(&x, |x| weighted(&ops::avgpool2d(x, 2).unwrap(), &r)));

    let (_, argmax) = ops::maxpool2d(&x, 2).unwrap();
    let g = ops::maxpool2d_backward(&r, &argmax, x.shape()).unwrap();
    assert_close("maxpool", &g, &numeric(&x, |x| weighted(&ops::maxpool2d(x, 2).unwrap().0, &r)));

    let mask = ops::dropout_mask(x.shape(), 0.3, &mut rng).unwrap();
    let r = random(x.shape(), &mut rng);
    let g = ops::mul(&r, &mask).unwrap();
    assert_close("dropout", &g, &numeric(&x, |x| weighted(&ops::mul(x, &mask).unwrap(), &r)));
}

#[cfg_attr(not(acceptance), test)]
pub fn cross_entropy_gradient_matches() {
    let mut rng = Rng::new(5);
    let logits = random(&[4, 5], &mut rng);
    let labels = [0, 3, 4, 1];
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let n = numeric(&logits, |l| ce64(l, &labels));
    assert_close("cross entropy", &g, &n);
}

fn small_net(rng: &mut Rng) -> Network {
    let spec = NetworkSpec {
        role: Role::Teacher,
        input_shape: vec![1, 4, 4],
        classes: 4,
        layers: vec![
            LayerSpec::conv(1, 3, 3, 1, 1, false),
            LayerSpec::batchnorm(3),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(3, 4, 3, 1, 1, false),
            LayerSpec::relu(),
            LayerSpec::avgpool(2),
            LayerSpec::flatten(),
            LayerSpec::linear(4, 6, true),
            LayerSpec::relu(),
            LayerSpec::dropout(0.25),
            LayerSpec::linear(6, 4, true),
        ],
    };
    let mut net = Network::init(spec, rng).unwrap();
    for t in net.trainable_mut() {
        for v in t.data_mut() {
            *v = if *v == 0.0 { 0.3 * rng.normal() } else { 2.0 * *v };
        }
    }
    net
}

#[cfg_attr(not(acceptance), test)]
pub fn input_gradient_matches() {
    let mut rng = Rng::new(10);
    for trial in 0..4 {
        let net = small_net(&mut rng);
        let image = random(&[1, 4, 4], &mut rng);
        let label = trial % 4;
        let g = input_gradient(&net, &image, label).unwrap();
        let loss = |img: &Tensor| {
            let x = img.clone().reshape(&[1, 1, 4, 4]).unwrap();
            let out = ann_forward(&net, &x, Mode::Eval, &[], None).unwrap();
            ce64(&out.logits, &[label])
        };
        assert_close("input gradient", &g, &numeric(&image, loss));
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn network_parameter_gradients_match() {
    // train mode: batch statistics and a fixed dropout mask (same seed)
    let mut rng = Rng::new(10);
    let net = small_net(&mut rng);
    let x = random(&[3, 1, 4, 4], &mut rng);
    let labels = [1, 0, 3];
    let out = ann_forward(&net, &x, Mode::Train, &[], Some(&mut Rng::new(99))).unwrap();
    let (_, gl) = cross_entropy(&out.logits, &labels).unwrap();
    let (grads, gin) = ann_backward(&net, &out.trace, &gl).unwrap();
    let loss_of = |n: &Network, x: &Tensor| {
        let o = ann_forward(n, x, Mode::Train, &[], Some(&mut Rng::new(99))).unwrap();
        ce64(&o.logits, &labels)
    };
    assert_close("network input", &gin, &numeric(&x, |x| loss_of(&net, x)));
    let slots = net.trainable_slots();
    for (k, &(layer, slot)) in slots.iter().enumerate() {
        let base = net.clone().trainable_mut()[k].clone();
        let n = numeric(&base, |t| {
            let mut m = net.clone();
            *m.trainable_mut()[k] = t.clone();
            loss_of(&m, &x)
        });
        assert_close(&format!("layer {layer} slot {slot}"), grads.get(layer, slot).unwrap(), &n);
    }
}

