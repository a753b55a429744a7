use ndarray::{Array1, Array2, ArrayView1, Axis};

/// Numerically stable `log(sum(exp(row)))`.
pub fn logsumexp(row: ArrayView1<f32>) -> f32 {
    let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln()
}

pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let lse = logsumexp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    p
}

/// Mean softmax cross-entropy and its gradient with respect to `logits`.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    let mut grad = softmax(logits);
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (grad[[i, y]].max(1e-30) as f64).ln();
        grad[[i, y]] -= 1.0;
    }
    grad /= n.max(1) as f32;
    ((loss / n.max(1) as f64) as f32, grad)
}

/// Per-row softmax cross-entropy (no reduction).
pub fn cross_entropy_rows(logits: &Array2<f32>, labels: &[usize]) -> Array1<f32> {
    logits.axis_iter(Axis(0)).zip(labels).map(|(row, &y)| logsumexp(row) - row[y]).collect()
}

/// Index of the largest entry per row (first index on ties).
pub fn argmax_rows(x: &Array2<f32>) -> Vec<usize> {
    x.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = array![[0.3f32, -1.2, 2.0], [1.0, 1.0, -0.5]];
        let labels = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-3;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-3, "({i},{j}) fd={fd} an={}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_rows(&array![[1.0f32, 3.0, 3.0], [0.0, 0.0, 0.0]]), vec![1, 0]);
    }
}
