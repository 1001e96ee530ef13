use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    if input.ndim() != 2 || weight.ndim() != 2 {
        return Err(Error::shape(
            "linear",
            format!(
                "expected input [N,D] and weight [K,D], got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    if input.dim(1) != weight.dim(1) {
        return Err(Error::shape(
            "linear",
            format!(
                "input has D={} features but weight expects D={}",
                input.dim(1),
                weight.dim(1)
            ),
        ));
    }
    Ok((input.dim(0), weight.dim(1), weight.dim(0)))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[n,k] = sum_d w[k,d] * x[n,d] + b[k]`
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, k) = check(input, weight)?;
    if let Some(b) = bias {
        if b.len() != k {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries for K={k} outputs", b.len()),
            ));
        }
    }
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        let x = &input.data()[i * d..(i + 1) * d];
        for j in 0..k {
            let b = bias.map_or(0.0, |b| b.data()[j]);
            out[i * k + j] = b + dot(&weight.data()[j * d..(j + 1) * d], x);
        }
    }
    Tensor::new(&[n, k], out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<LinearGrads> {
    let (n, d, k) = check(input, weight)?;
    if grad_out.shape() != [n, k] {
        return Err(Error::shape(
            "linear_backward",
            format!("grad_out is {:?}, expected [{n}, {k}]", grad_out.shape()),
        ));
    }
    let mut gin = vec![0.0f32; n * d];
    let mut gw = vec![0.0f64; k * d];
    let mut gb = vec![0.0f64; k];
    for i in 0..n {
        let x = &input.data()[i * d..(i + 1) * d];
        let gx = &mut gin[i * d..(i + 1) * d];
        for j in 0..k {
            let go = grad_out.data()[i * k + j];
            if go == 0.0 {
                continue;
            }
            gb[j] += go as f64;
            let w = &weight.data()[j * d..(j + 1) * d];
            for (g, &wv) in gx.iter_mut().zip(w) {
                *g += go * wv;
            }
            for (g, &xv) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += (go * xv) as f64;
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, d], gin)?,
        weight: Tensor::new(&[k, d], gw.into_iter().map(|v| v as f32).collect())?,
        bias: Tensor::new(&[k], gb.into_iter().map(|v| v as f32).collect())?,
    })
}
