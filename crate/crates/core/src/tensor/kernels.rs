// Raw slice kernels shared by the value-level ops and the tape.

use crate::{Error, Result};

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize; the order is
    // fixed so results stay bit-reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax of `logits + mask` where `allowed[r*cols+c]` marks the
/// zero entries of the mask. Masked outputs are exactly 0.
pub fn masked_softmax_rows(
    logits: &[f64],
    allowed: &[bool],
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let x = &logits[r * cols..(r + 1) * cols];
        let keep = &allowed[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (&v, &k) in x.iter().zip(keep) {
            if k && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let y = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for ((o, &v), &k) in y.iter_mut().zip(x).zip(keep) {
            if k {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        let inv = 1.0 / sum;
        for (o, &k) in y.iter_mut().zip(keep) {
            if k {
                *o *= inv;
            }
        }
    }
    Ok(out)
}

/// Per-row standardization; returns (output, xhat, rstd).
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        for c in 0..d {
            let h = (xr[c] - mean) * rstd;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, rstds)
}

/// Row-wise log-softmax probabilities (as probabilities) and the mean
/// negative log-likelihood over non-ignored rows.
pub fn cross_entropy_rows(
    logits: &[f64],
    targets: &[usize],
    ignore: Option<usize>,
    classes: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    let rows = targets.len();
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..rows {
        if Some(targets[r]) == ignore {
            continue;
        }
        let t = targets[r];
        if t >= classes {
            return Err(Error::Precondition(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        let x = &logits[r * classes..(r + 1) * classes];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - x[t];
        for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(x) {
            *p = (v - lse).exp();
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64, probs, count))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU and its derivative.
#[inline]
pub fn gelu(x: f64) -> (f64, f64) {
    let x3 = x * x * x;
    let u = GELU_C * (x + 0.044715 * x3);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}
