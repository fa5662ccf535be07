//! Shared log-space numeric helpers.

use ndarray::{Array2, ArrayView2};

/// log(exp(a) + exp(b)) without overflow; handles -inf identities.
pub fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log(sum(exp(xs))) over a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of a [T, C] matrix.
pub fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows_with_temperature(logits: &ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|x| x / temperature);
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - m).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn lse2_matches_direct_computation() {
        assert!((lse2(0.0, 0.0) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(lse2(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(lse2(-1.5, f64::NEG_INFINITY), -1.5);
        assert!((lse2(700.0, 700.0) - (700.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let logits = arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let lsm = log_softmax_rows(&logits.view());
        for row in lsm.rows() {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((lsm[[1, 0]] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn temperature_softens_distribution() {
        let logits = arr2(&[[4.0, 0.0]]);
        let sharp = softmax_rows_with_temperature(&logits.view(), 1.0);
        let soft = softmax_rows_with_temperature(&logits.view(), 8.0);
        assert!(sharp[[0, 0]] > soft[[0, 0]]);
        assert!((soft.row(0).sum() - 1.0).abs() < 1e-12);
        let expect = (4.0f64 / 8.0).exp() / ((4.0f64 / 8.0).exp() + 1.0);
        assert!((soft[[0, 0]] - expect).abs() < 1e-12);
    }
}
