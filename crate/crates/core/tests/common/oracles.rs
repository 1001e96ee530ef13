//! Brute-force reference implementations, written straight from the
//! definitions and sharing no code with the library kernels.
#![allow(dead_code)]

use spikedistill::network::{LayerKind, LayerParams, LayerSpec, Network, NetworkSpec, Role};
use spikedistill::rng::Rng;
use spikedistill::Tensor;

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `out[n,f,oy,ox] = b[f] + sum k[f,c,ki,kj] x[n,c,oy*s+ki-p,ox*s+kj-p]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize, bias: Option<&[f64]>) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [f, kc, kh, kw] = ks;
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |b| b[fo]);
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as i64 - pad as i64;
                                let ix = (ox * stride + kj) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                s += k[((fo * c + ci) * kh + ki) * kw + kj]
                                    * x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * f + fo) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

pub fn avgpool_ref(x: &[f64], xs: [usize; 4], k: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x[((b * c + ci) * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out.push(s / (k * k) as f64);
                }
            }
        }
    }
    out
}

/// `(1/C) sum_c a^2`, optionally divided by its Frobenius norm.
pub fn attention_map_ref(a: &[f64], c: usize, plane: usize, normalize: bool) -> Vec<f64> {
    let mut m: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| a[ch * plane + p].powi(2)).sum::<f64>() / c as f64)
        .collect();
    if normalize {
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            m.iter_mut().for_each(|v| *v /= norm);
        }
    }
    m
}

/// Spike activation map at 1-based step `t` in closed form:
/// `sum_c o[t] * sum_{s <= t} exp(-(t - s)) o[s]`.
pub fn sam_ref(spikes: &[Vec<f64>], c: usize, plane: usize, t: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| {
            (0..c)
                .map(|ch| {
                    let i = ch * plane + p;
                    let k: f64 = (1..=t)
                        .map(|s| (-((t - s) as f64)).exp() * spikes[s - 1][i])
                        .sum();
                    spikes[t - 1][i] * k
                })
                .sum()
        })
        .collect()
}

/// Scalar reverse-mode graph. Every node stores its value and the local
/// derivative towards each parent.
#[derive(Default)]
pub struct Tape {
    values: Vec<f64>,
    parents: Vec<Vec<(usize, f64)>>,
}

impl Tape {
    pub fn leaf(&mut self, v: f64) -> usize {
        self.push(v, Vec::new())
    }

    pub fn push(&mut self, v: f64, parents: Vec<(usize, f64)>) -> usize {
        self.values.push(v);
        self.parents.push(parents);
        self.values.len() - 1
    }

    pub fn value(&self, id: usize) -> f64 {
        self.values[id]
    }

    /// `d out / d node` for every node.
    pub fn gradient(&self, out: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.values.len()];
        g[out] = 1.0;
        for id in (0..=out).rev() {
            if g[id] == 0.0 {
                continue;
            }
            for &(p, d) in &self.parents[id] {
                g[p] += g[id] * d;
            }
        }
        g
    }
}

/// One affine map written as explicit `(output, input, weight index)` terms.
pub struct Connections {
    pub inputs: usize,
    pub outputs: usize,
    pub terms: Vec<(usize, usize, usize)>,
}

impl Connections {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        let mut terms = Vec::new();
        for j in 0..outputs {
            for i in 0..inputs {
                terms.push((j, i, j * inputs + i));
            }
        }
        Connections { inputs, outputs, terms }
    }

    /// Single-channel `k x k` convolution, stride 1, padding `pad`.
    pub fn conv(h: usize, w: usize, k: usize, pad: usize) -> Self {
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        let mut terms = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy + ki) as i64 - pad as i64;
                        let ix = (ox + kj) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        terms.push((oy * ow + ox, iy as usize * w + ix as usize, ki * k + kj));
                    }
                }
            }
        }
        Connections {
            inputs: h * w,
            outputs: oh * ow,
            terms,
        }
    }
}

pub struct ToySnn {
    /// Spiking layers first, the non-firing output layer last.
    pub layers: Vec<Connections>,
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub leak: f64,
    pub gamma: f64,
    pub reset_grad: bool,
    pub temporal_grad: bool,
}

pub struct ToyResult {
    pub output: Vec<f64>,
    /// Spikes per spiking layer, per step.
    pub spikes: Vec<Vec<Vec<f64>>>,
    pub weight_grads: Vec<Vec<f64>>,
}

impl ToySnn {
    /// Unrolls the network over `inputs.len()` steps and differentiates
    /// `sum_k r[k] v_out[k] + sum_{l,t,j} e[l][t][j] o_l[t][j]`.
    pub fn run(&self, inputs: &[Vec<f64>], r: &[f64], extra: &[Vec<Vec<f64>>]) -> ToyResult {
        let mut tape = Tape::default();
        let weights: Vec<Vec<usize>> = self
            .weights
            .iter()
            .map(|w| w.iter().map(|&v| tape.leaf(v)).collect())
            .collect();
        let spiking = self.layers.len() - 1;
        let mut v: Vec<Vec<Option<usize>>> = self.layers[..spiking].iter().map(|c| vec![None; c.outputs]).collect();
        let mut o: Vec<Vec<Option<usize>>> = v.clone();
        let mut spikes = vec![Vec::new(); spiking];
        let out_n = self.layers[spiking].outputs;
        let mut v_out: Vec<Option<usize>> = vec![None; out_n];
        let mut loss_terms: Vec<(usize, f64)> = Vec::new();
        for (t, x_t) in inputs.iter().enumerate() {
            let mut x: Vec<usize> = x_t.iter().map(|&xv| tape.leaf(xv)).collect();
            for (l, conn) in self.layers.iter().enumerate() {
                let mut current = Vec::with_capacity(conn.outputs);
                for j in 0..conn.outputs {
                    let mut val = 0.0;
                    let mut parents = Vec::new();
                    for &(jj, i, wi) in &conn.terms {
                        if jj != j {
                            continue;
                        }
                        let (w_id, x_id) = (weights[l][wi], x[i]);
                        val += tape.value(w_id) * tape.value(x_id);
                        parents.push((w_id, tape.value(x_id)));
                        parents.push((x_id, tape.value(w_id)));
                    }
                    current.push(tape.push(val, parents));
                }
                if l == spiking {
                    for (k, &c) in current.iter().enumerate() {
                        v_out[k] = Some(match v_out[k] {
                            None => c,
                            Some(prev) => tape.push(tape.value(prev) + tape.value(c), vec![(prev, 1.0), (c, 1.0)]),
                        });
                    }
                    break;
                }
                let theta = self.thresholds[l];
                let mut next_x = Vec::with_capacity(conn.outputs);
                let mut step_spikes = Vec::with_capacity(conn.outputs);
                for (j, &c) in current.iter().enumerate() {
                    let mut val = tape.value(c);
                    let mut parents = vec![(c, 1.0)];
                    if let Some(vp) = v[l][j] {
                        val += self.leak * tape.value(vp);
                        if self.temporal_grad {
                            parents.push((vp, self.leak));
                        }
                    }
                    if let Some(op) = o[l][j] {
                        val -= theta * tape.value(op);
                        if self.reset_grad {
                            parents.push((op, -theta));
                        }
                    }
                    let v_id = tape.push(val, parents);
                    let fired = if val > theta { 1.0 } else { 0.0 };
                    let slope = self.gamma * (1.0 - (val - theta).abs() / theta).max(0.0);
                    let o_id = tape.push(fired, vec![(v_id, slope)]);
                    if let Some(e) = extra.get(l).and_then(|e| e.get(t)) {
                        loss_terms.push((o_id, e[j]));
                    }
                    v[l][j] = Some(v_id);
                    o[l][j] = Some(o_id);
                    next_x.push(o_id);
                    step_spikes.push(fired);
                }
                spikes[l].push(step_spikes);
                x = next_x;
            }
        }
        let output: Vec<f64> = v_out.iter().map(|id| tape.value(id.unwrap())).collect();
        for (k, id) in v_out.iter().enumerate() {
            loss_terms.push((id.unwrap(), r[k]));
        }
        let loss_val = loss_terms.iter().map(|&(id, c)| c * tape.value(id)).sum();
        let loss = tape.push(loss_val, loss_terms);
        let g = tape.gradient(loss);
        ToyResult {
            output,
            spikes,
            weight_grads: weights.iter().map(|ids| ids.iter().map(|&i| g[i]).collect()).collect(),
        }
    }
}

/// Multiple of `1/8` in `[-lim, lim]`.
pub fn dyadic(rng: &mut Rng, lim: i64) -> f64 {
    (rng.below((2 * lim * 8 + 1) as usize) as i64 - lim * 8) as f64 / 8.0
}

/// Bias-free student spec for a toy: dense hidden layers (or a 1-channel
/// 3x3 conv on a 2x2 input), then the output layer.
pub fn toy_spec(input: usize, hidden: &[usize], classes: usize, conv: bool) -> NetworkSpec {
    let mut layers = Vec::new();
    let (input_shape, mut width) = if conv {
        layers.push(LayerSpec::conv(1, 1, 3, 1, 1, false));
        layers.push(LayerSpec::relu());
        layers.push(LayerSpec::flatten());
        (vec![1, 2, 2], 4)
    } else {
        (vec![input], input)
    };
    for &h in hidden {
        layers.push(LayerSpec::linear(width, h, false));
        layers.push(LayerSpec::relu());
        width = h;
    }
    layers.push(LayerSpec::linear(width, classes, false));
    NetworkSpec {
        role: Role::StudentSnn,
        input_shape,
        classes,
        layers,
    }
}

pub fn network_with(spec: NetworkSpec, weights: &[Vec<f64>]) -> Network {
    let mut it = weights.iter();
    let params = (0..spec.layers.len())
        .map(|i| match spec.layers[i].kind {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                let shape = &spec.param_shapes(i)[0];
                let w = it.next().expect("one weight vector per affine layer");
                LayerParams::Affine {
                    weight: Tensor::new(shape, w.iter().map(|&v| v as f32).collect()).unwrap(),
                    bias: None,
                }
            }
            _ => LayerParams::None,
        })
        .collect();
    Network::from_params(spec, params).unwrap()
}
