mod common;

use common::oracles::*;
use spikedistill::distill::{attention_map, sam_map};
use spikedistill::encoding::poisson_encode;
use spikedistill::network::{LayerSpec, Network, NetworkSpec, Role};
use spikedistill::ops;
use spikedistill::rng::Rng;
use spikedistill::snn::{lif_step, RecordMode, SnnConfig, SnnPlan};
use spikedistill::Tensor;

const FLOAT_TOL: f64 = 1e-5;
const EXACT_TOL: f64 = 1e-12;

fn uniform(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()
}

#[cfg_attr(not(acceptance), test)]
pub fn conv2d_matches_reference() {
    let mut rng = Rng::new(11);
    for trial in 0..120 {
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(3);
        let f = 1 + rng.below(4);
        let k = [1, 3, 5][rng.below(3)];
        let pad = rng.below(k / 2 + 1);
        let stride = 1 + rng.below(2);
        let h = k + rng.below(5);
        let w = k + rng.below(5);
        let x = uniform(n * c * h * w, &mut rng);
        let kern = uniform(f * c * k * k, &mut rng);
        let bias = (rng.below(2) == 0).then(|| uniform(f, &mut rng));
        let xt = Tensor::new(&[n, c, h, w], x.clone()).unwrap();
        let kt = Tensor::new(&[f, c, k, k], kern.clone()).unwrap();
        let bt = bias.as_ref().map(|b| Tensor::new(&[f], b.clone()).unwrap());
        let got = ops::conv2d(&xt, &kt, stride, pad, bt.as_ref()).unwrap();
        let b64 = bias.as_ref().map(|b| to_f64(b));
        let (want, shape) = conv2d_ref(&to_f64(&x), [n, c, h, w], &to_f64(&kern), [f, c, k, k], stride, pad, b64.as_deref());
        assert_eq!(got.shape(), &shape[..], "trial {trial}");
        let err = max_abs_diff(&to_f64(got.data()), &want);
        assert!(err <= FLOAT_TOL, "trial {trial}: err {err}");
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn avgpool_matches_reference() {
    let mut rng = Rng::new(12);
    for trial in 0..120 {
        let k = 1 + rng.below(3);
        let (n, c) = (1 + rng.below(2), 1 + rng.below(3));
        let (h, w) = (k * (1 + rng.below(4)), k * (1 + rng.below(4)));
        let x = uniform(n * c * h * w, &mut rng);
        let got = ops::avgpool2d(&Tensor::new(&[n, c, h, w], x.clone()).unwrap(), k).unwrap();
        let want = avgpool_ref(&to_f64(&x), [n, c, h, w], k);
        let err = max_abs_diff(&to_f64(got.data()), &want);
        assert!(err <= FLOAT_TOL, "trial {trial}: err {err}");
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn attention_map_matches_reference() {
    let mut rng = Rng::new(13);
    for trial in 0..120 {
        let (c, h, w) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let a = uniform(c * h * w, &mut rng);
        let normalize = trial % 2 == 0;
        let got = attention_map(&Tensor::new(&[c, h, w], a.clone()).unwrap(), normalize).unwrap();
        assert_eq!((got.height, got.width), (h, w));
        let want = attention_map_ref(&to_f64(&a), c, h * w, normalize);
        let err = max_abs_diff(&got.values, &want);
        assert!(err <= FLOAT_TOL, "trial {trial}: err {err}");
    }
}

#[test]
fn zero_activation_gives_zero_map() {
    let got = attention_map(&Tensor::zeros(&[3, 2, 2]), true).unwrap();
    assert!(got.values.iter().all(|&v| v == 0.0));
}

#[cfg_attr(not(acceptance), test)]
pub fn lif_step_matches_reference() {
    // dyadic operands keep every path exact
    let mut rng = Rng::new(14);
    for trial in 0..200 {
        let n = 1 + rng.below(16);
        let leak = [1.0, 0.5, 0.75][rng.below(3)];
        let theta = [0.5, 1.0, 2.0][rng.below(3)];
        let v: Vec<f64> = (0..n).map(|_| dyadic(&mut rng, 3)).collect();
        let o: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
        let x: Vec<f64> = (0..n).map(|_| dyadic(&mut rng, 3)).collect();
        let f = |a: &[f64]| a.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let (gv, go) = lif_step(&f(&v), &f(&o), &f(&x), leak as f32, theta as f32).unwrap();
        let wv: Vec<f64> = (0..n).map(|i| leak * v[i] + x[i] - theta * o[i]).collect();
        let wo: Vec<f64> = wv.iter().map(|&p| if p > theta { 1.0 } else { 0.0 }).collect();
        assert!(max_abs_diff(&to_f64(&gv), &wv) <= EXACT_TOL, "trial {trial}");
        assert_eq!(to_f64(&go), wo, "trial {trial}");
    }
}

#[test]
fn lif_step_rejects_mismatched_lengths() {
    assert!(lif_step(&[0.0; 2], &[0.0; 3], &[0.0; 2], 1.0, 1.0).is_err());
}

fn spiking_conv_net(rng: &mut Rng, c: usize, f: usize, side: usize) -> Network {
    let spec = NetworkSpec {
        role: Role::StudentSnn,
        input_shape: vec![c, side, side],
        classes: 3,
        layers: vec![
            LayerSpec::conv(c, f, 3, 1, 1, false),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::linear(f * side * side, 3, false),
        ],
    };
    Network::init(spec, rng).unwrap()
}

#[cfg_attr(not(acceptance), test)]
pub fn sam_map_matches_closed_form() {
    let mut rng = Rng::new(15);
    let mut fired = 0;
    for trial in 0..120 {
        let (c, f, side) = (1 + rng.below(2), 1 + rng.below(3), 3 + rng.below(3));
        let net = spiking_conv_net(&mut rng, c, f, side);
        let theta = [0.1f32, 0.2, 0.4][rng.below(3)];
        let plan = SnnPlan::new(&net, &[theta]).unwrap();
        let steps = 1 + rng.below(12);
        let image = Tensor::from_fn(&[c, side, side], |_| rng.uniform() * 2.0 - 1.0);
        let train = poisson_encode(&image, steps, &mut rng).unwrap();
        let cfg = SnnConfig {
            leak: 1.0,
            time_steps: steps,
            ..Default::default()
        };
        let rec = plan.forward(&train, &cfg, RecordMode::Full, None).unwrap();
        let spikes: Vec<Vec<f64>> = rec.layers[0].spikes.iter().map(|s| to_f64(s)).collect();
        for t in 1..=steps {
            let got = sam_map(&rec, 0, t).unwrap();
            let want = sam_ref(&spikes, f, side * side, t);
            let err = max_abs_diff(&got.values, &want);
            assert!(err <= EXACT_TOL, "trial {trial}, t {t}: err {err}");
        }
        fired += spikes.iter().flatten().any(|&v| v != 0.0) as usize;
    }
    assert!(fired > 60, "only {fired} trials produced spikes");
}

#[test]
fn sam_map_rejects_bad_steps() {
    let mut rng = Rng::new(16);
    let net = spiking_conv_net(&mut rng, 1, 2, 3);
    let plan = SnnPlan::new(&net, &[0.5]).unwrap();
    let image = Tensor::from_fn(&[1, 3, 3], |_| rng.uniform());
    let train = poisson_encode(&image, 4, &mut rng).unwrap();
    let cfg = SnnConfig {
        time_steps: 4,
        ..Default::default()
    };
    let full = plan.forward(&train, &cfg, RecordMode::Full, None).unwrap();
    assert!(sam_map(&full, 0, 0).is_err());
    assert!(sam_map(&full, 0, 5).is_err());
    let counts = plan.forward(&train, &cfg, RecordMode::Counts, None).unwrap();
    assert!(sam_map(&counts, 0, 2).is_err());
}
