//! Non-overlapping 2-D pooling over the last two axes of `[N,C,H,W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pooled_shape(input: &Tensor, k: usize, op: &'static str) -> Result<Vec<usize>> {
    if input.ndim() < 2 {
        return Err(Error::shape(op, format!("need spatial dims, got {:?}", input.shape())));
    }
    if k == 0 {
        return Err(Error::shape(op, "pool size must be >= 1"));
    }
    let nd = input.ndim();
    let (h, w) = (input.dim(nd - 2), input.dim(nd - 1));
    if h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            op,
            format!("spatial dims {h}x{w} are not divisible by pool size {k}"),
        ));
    }
    let mut shape = input.shape().to_vec();
    shape[nd - 2] = h / k;
    shape[nd - 1] = w / k;
    Ok(shape)
}

/// Averages `k x k` windows of planes laid out contiguously as `h x w`.
pub(crate) fn avgpool_planes(input: &[f32], h: usize, w: usize, k: usize, out: &mut [f32]) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    for (p, out_plane) in out.chunks_mut(oh * ow).enumerate() {
        let plane = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f32;
                for i in 0..k {
                    let row = &plane[(oy * k + i) * w + ox * k..(oy * k + i) * w + ox * k + k];
                    s += row.iter().sum::<f32>();
                }
                out_plane[oy * ow + ox] = s * inv;
            }
        }
    }
}

pub(crate) fn avgpool_planes_backward(grad_out: &[f32], h: usize, w: usize, k: usize, grad_in: &mut [f32]) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    for (p, gout) in grad_out.chunks(oh * ow).enumerate() {
        let plane = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] += gout[(y / k) * ow + x / k] * inv;
            }
        }
    }
}

pub fn avgpool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let shape = pooled_shape(input, k, "avgpool2d")?;
    let nd = input.ndim();
    let (h, w) = (input.dim(nd - 2), input.dim(nd - 1));
    let mut out = vec![0.0f32; input.len() / (k * k)];
    avgpool_planes(input.data(), h, w, k, &mut out);
    Tensor::new(&shape, out)
}

pub fn avgpool2d_backward(grad_out: &Tensor, input_shape: &[usize], k: usize) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let shape = pooled_shape(&probe, k, "avgpool2d_backward")?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::shape(
            "avgpool2d_backward",
            format!("grad_out is {:?}, expected {shape:?}", grad_out.shape()),
        ));
    }
    let nd = input_shape.len();
    let mut gin = probe.into_data();
    avgpool_planes_backward(
        grad_out.data(),
        input_shape[nd - 2],
        input_shape[nd - 1],
        k,
        &mut gin,
    );
    Tensor::new(input_shape, gin)
}

/// Max pooling; returns the output and, per output cell, the flat input
/// index that won (first maximum in row-major window order).
pub fn maxpool2d(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = pooled_shape(input, k, "maxpool2d")?;
    let nd = input.ndim();
    let (h, w) = (input.dim(nd - 2), input.dim(nd - 1));
    let (oh, ow) = (h / k, w / k);
    let planes = input.len() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * k + i) * w + ox * k + j;
                        if input.data()[idx] > input.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&shape, out)?, argmax))
}

pub fn maxpool2d_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{} gradients for {} pooled cells", grad_out.len(), argmax.len()),
        ));
    }
    let mut gin = Tensor::zeros(input_shape);
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gin.data_mut()[idx] += g;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.75);
        assert_eq!(avgpool2d(&x, 2).unwrap(), Tensor::full(&[1, 2, 2, 2], 0.75));
    }

    #[test]
    fn window_mean() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[1.5]);
    }

    #[test]
    fn rejects_non_divisible() {
        let x = Tensor::zeros(&[1, 1, 5, 4]);
        let err = avgpool2d(&x, 2).unwrap_err().to_string();
        assert!(err.contains("5x4"), "{err}");
        assert!(maxpool2d(&x, 2).is_err());
    }

    #[test]
    fn backward_spreads_evenly() {
        let g = Tensor::new(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let gin = avgpool2d_backward(&g, &[1, 1, 2, 2], 2).unwrap();
        assert_eq!(gin.data(), &[1.0; 4]);
    }

    #[test]
    fn maxpool_routes_to_winner() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 5.0, 2.0, 3.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = maxpool2d_backward(&Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap(), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
