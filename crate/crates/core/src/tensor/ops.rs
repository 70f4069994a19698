use super::{ensure_finite, kernels, Tensor};
use crate::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// Standard matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    ensure_finite("matmul", &out)?;
    Tensor::new(vec![m, n], out)
}

/// Converts a {0, -inf} mask into attendability flags.
pub(crate) fn mask_flags(mask: &Tensor) -> Result<Vec<bool>> {
    let cols = mask.cols();
    mask.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                Ok(true)
            } else if v == f64::NEG_INFINITY {
                Ok(false)
            } else {
                Err(Error::InvalidMask {
                    row: i / cols,
                    col: i % cols,
                    value: v,
                })
            }
        })
        .collect()
}

/// Row-wise `softmax(logits + mask)` for a mask of 0 / -inf entries.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (rows, cols) = require_matrix("masked_softmax", logits)?;
    if logits.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "masked_softmax",
            left: logits.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let flags = mask_flags(mask)?;
    let out = kernels::masked_softmax_rows(logits.data(), &flags, rows, cols)?;
    ensure_finite("masked_softmax", &out)?;
    Tensor::new(vec![rows, cols], out)
}

/// Normalizes each vector along the last dimension, then applies gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Precondition(
            "layer_norm eps must be positive".into(),
        ));
    }
    let (out, _, _) = kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), eps);
    ensure_finite("layer_norm", &out)?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean negative log-softmax of `targets` over rows whose target is not
/// `ignore_id`.
pub fn cross_entropy_from_logits(
    logits: &Tensor,
    targets: &[usize],
    ignore_id: usize,
) -> Result<f64> {
    let (rows, classes) = require_matrix("cross_entropy", logits)?;
    if rows != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let (loss, _, _) =
        kernels::cross_entropy_rows(logits.data(), targets, Some(ignore_id), classes)?;
    Ok(loss)
}
