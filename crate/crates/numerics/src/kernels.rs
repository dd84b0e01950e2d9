//! Pure forward kernels. The tape records these and supplies the matching
//! vector-Jacobian products; they are also usable standalone.

use crate::error::{NumericError, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before they are divided by or logged.
pub const PROB_FLOOR: f64 = 1e-12;

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(NumericError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {other:?}"),
        }),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericError::NonFinite { op })
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(NumericError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Accumulates `a[m×k]·b[k×n]` into `out`. Zero entries of `a` are skipped,
/// so masked attention rows never read the masked values.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
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

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
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

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Softmax over the last dimension of `v` at temperature `temperature`:
/// `exp((vᵢ − max v)/τ) / Σⱼ exp((vⱼ − max v)/τ)`.
pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NumericError::Invalid {
            op: "softmax",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    check_finite("softmax", v)?;
    let cols = v.cols();
    let mut out = v.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_slice(row, temperature);
    }
    let t = Tensor::from_parts(v.shape().to_vec(), out);
    check_finite("softmax", &t)?;
    Ok(t)
}

pub(crate) fn softmax_slice(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
/// Masked entries are exactly zero.
pub fn causal_softmax(scores: &Tensor) -> Result<Tensor> {
    let (n, m) = require_matrix("causal_softmax", scores)?;
    if n != m {
        return Err(NumericError::Invalid {
            op: "causal_softmax",
            msg: format!("expected a square matrix, got {n}x{m}"),
        });
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut out[i * n..i * n + i + 1];
        row.copy_from_slice(&scores.data()[i * n..i * n + i + 1]);
        softmax_slice(row, 1.0);
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// `KL(P‖Q) = Σ pᵢ ln(pᵢ / max(qᵢ, 1e-12))`, with `0·ln(0/q) = 0`.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    validate_distribution("kl_div", p)?;
    validate_distribution("kl_div", q)?;
    if p.len() != q.len() {
        return Err(NumericError::Shape {
            op: "kl_div",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    Ok(kl_value(p.data(), q.data()))
}

pub(crate) fn kl_value(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

pub(crate) fn validate_distribution(op: &'static str, p: &Tensor) -> Result<()> {
    if let Some(x) = p.data().iter().find(|x| **x < 0.0) {
        return Err(NumericError::Invalid {
            op,
            msg: format!("negative probability {x}"),
        });
    }
    let sum: f64 = p.data().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(NumericError::Invalid {
            op,
            msg: format!("probabilities sum to {sum}, expected 1"),
        });
    }
    Ok(())
}

/// Mean over rows of `−ln softmax(logits)[row, target]`.
pub fn cross_entropy_nll(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (nll, _) = cross_entropy_with_probs(logits, targets)?;
    Ok(nll)
}

/// Returns the mean NLL together with the row softmax (reused by the backward pass).
pub(crate) fn cross_entropy_with_probs(
    logits: &Tensor,
    targets: &[usize],
) -> Result<(f64, Tensor)> {
    let (n, v) = require_matrix("cross_entropy_nll", logits)?;
    if targets.len() != n {
        return Err(NumericError::Invalid {
            op: "cross_entropy_nll",
            msg: format!("{} targets for {n} rows", targets.len()),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(NumericError::OutOfRange {
            op: "cross_entropy_nll",
            index: t,
            bound: v,
        });
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    for (row, (&t, raw)) in probs
        .chunks_mut(v)
        .zip(targets.iter().zip(logits.data().chunks(v)))
    {
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = raw.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - raw[t];
        softmax_slice(row, 1.0);
    }
    let nll = total / n as f64;
    if !nll.is_finite() {
        return Err(NumericError::NonFinite {
            op: "cross_entropy_nll",
        });
    }
    Ok((nll, Tensor::from_parts(vec![n, v], probs)))
}

/// Row-wise layer normalization with gain and bias. Returns the output and
/// the per-row `(mean, 1/std)` pairs.
pub(crate) fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(NumericError::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(x.rows());
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
        stats.push((mean, rstd));
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let id = m(2, 2, &[1., 0., 0., 1.]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        let b = m(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = m(2, 3, &[0.; 6]);
        let err = matmul(&a, &a).unwrap_err();
        assert_eq!(
            err,
            NumericError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0., 0., 0.]).unwrap(), 1.0).unwrap();
        for p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.]).unwrap(), 1.0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Tensor::vector(vec![1000., 0.]).unwrap(), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
        assert!(softmax(&Tensor::vector(vec![1.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::vector(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        let one_hot = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let half = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!((kl_div(&one_hot, &half).unwrap() - 2f64.ln()).abs() < 1e-12);
        let clamped = kl_div(&half, &one_hot).unwrap();
        assert!(clamped.is_finite() && clamped > 10.0);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let p = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let q = Tensor::vector(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(kl_div(&p, &q), Err(NumericError::Shape { .. })));
        let neg = Tensor::vector(vec![1.5, -0.5]).unwrap();
        assert!(matches!(
            kl_div(&neg, &p),
            Err(NumericError::Invalid { .. })
        ));
    }

    #[test]
    fn nll_examples() {
        let uniform = m(1, 4, &[0.3; 4]);
        assert!((cross_entropy_nll(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let peaked = m(1, 3, &[0.0, 800.0, 0.0]);
        assert!(cross_entropy_nll(&peaked, &[1]).unwrap().abs() < 1e-12);
        assert_eq!(
            cross_entropy_nll(&uniform, &[4]),
            Err(NumericError::OutOfRange {
                op: "cross_entropy_nll",
                index: 4,
                bound: 4
            })
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = causal_softmax(&m(2, 2, &[1., 5., 2., 3.])).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[2] + s.data()[3] - 1.0).abs() < 1e-15);
    }
}
