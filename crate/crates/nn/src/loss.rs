use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax of `[N,C]` logits (max-shifted).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

fn check_labels(n: usize, c: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(shape_err("cross_entropy labels", format!("{n} labels"), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::Invalid {
            op: "cross_entropy",
            msg: format!("label {bad} outside [0, {c})"),
        });
    }
    Ok(())
}

/// Mean of `-ln p_true`, probabilities clamped at 1e-12.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, c) = probs.dims2("cross_entropy")?;
    check_labels(n, c, labels)?;
    let p = probs.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p[i * c + l].to_f64_lossy().max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Softmax followed by cross-entropy; returns the loss and the probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let probs = softmax(logits)?;
    let loss = cross_entropy(&probs, labels)?;
    Ok((loss, probs))
}

/// Gradient of the mean softmax cross-entropy w.r.t. the logits: `(p - onehot) / N`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = probs.dims2("softmax_cross_entropy backward")?;
    check_labels(n, c, labels)?;
    let inv_n = T::lit(1.0 / n as f64);
    let mut g = probs.clone();
    for (i, row) in g.data_mut().chunks_mut(c).enumerate() {
        row[labels[i]] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(g)
}

/// Per-row argmax, lowest index on ties.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, c) = scores.dims2("argmax")?;
    Ok(scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&row(&[0.0, 0.0, 0.0])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&row(&[0.0, 3.0f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let z = [0.3, -1.2, 2.5];
        let a = softmax(&row(&z)).unwrap();
        let b = softmax(&row(&z.map(|v| v + 100.0))).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&row(&[0.0, 1.0, 0.0]), &[1]).unwrap(), 0.0);
        let u = row(&[0.2; 5]);
        assert!((cross_entropy(&u, &[3]).unwrap() - 5.0f64.ln()).abs() < 1e-12);
        // clamped, not infinite
        assert!((cross_entropy(&row(&[1.0, 0.0]), &[1]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy(&u, &[5]).is_err());
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(argmax_rows(&row(&[0.0, 1.0, 0.0])).unwrap(), vec![1]);
        assert_eq!(argmax_rows(&row(&[2.0, 2.0, 2.0])).unwrap(), vec![0]);
    }
}
