//! Per-channel feature statistics shared by AdaIN, the style loss and metrics.

use crate::tensor::Tensor;

/// Variance guard used wherever a standard deviation is taken.
pub const STD_EPS: f64 = 1e-5;

/// `(mean, sqrt(var + eps))` per channel of a `[C, …]` tensor, population variance.
pub fn channel_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let c = x.shape()[0];
    let rest = x.len() / c.max(1);
    x.data()
        .chunks(rest.max(1))
        .take(c)
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, (var + eps).sqrt())
        })
        .collect()
}

/// Compensated (Neumaier) sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Spatially pooled activation per channel (global average pool), summed
/// with compensation so pooling a constant map returns the constant.
pub fn pooled_activation(x: &Tensor) -> Vec<f64> {
    let c = x.shape()[0];
    let rest = (x.len() / c.max(1)).max(1);
    x.data()
        .chunks(rest)
        .map(|row| compensated_sum(row.iter().copied()) / row.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_rows() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let s = channel_stats(&x, 0.0);
        assert_eq!(s, vec![(2.0, 1.0), (5.0, 0.0)]);
    }

    #[test]
    fn pooling_a_constant_is_exact() {
        for &v in &[0.6, 1.2, 0.1, 1.0 / 3.0] {
            for n in [1usize, 4, 16, 64, 256] {
                let x = Tensor::full(&[1, n], v);
                assert_eq!(pooled_activation(&x), vec![v]);
            }
        }
    }
}
