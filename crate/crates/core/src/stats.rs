//! Deterministic reductions. Every aggregate in the crate goes through these
//! so that results do not depend on how paths were scheduled.

/// Fixed-order pairwise summation.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanSe {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN };
        }
        let mean = pairwise_sum(x) / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0 };
        }
        let dev: Vec<f64> = x.iter().map(|v| (v - mean).powi(2)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Self { mean, stderr: (var / n as f64).sqrt() }
    }

    /// Within `k` standard errors of `target`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Sample variance with its standard error (delta method on squared
/// deviations).
pub fn variance_se(x: &[f64]) -> MeanSe {
    let m = pairwise_sum(x) / x.len() as f64;
    let sq: Vec<f64> = x.iter().map(|v| (v - m).powi(2)).collect();
    MeanSe::of(&sq)
}

/// Sample covariance with its standard error.
pub fn covariance_se(x: &[f64], y: &[f64]) -> MeanSe {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    MeanSe::of(&prod)
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let c = covariance_se(x, y).mean;
    let vx = variance_se(x).mean;
    let vy = variance_se(y).mean;
    c / (vx * vy).sqrt()
}

/// Streaming accumulator for first and second moments of a fixed set of
/// coordinates, merged chunk by chunk in a fixed order.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    n: usize,
    sum: Vec<f64>,
    // Raw products of (i, j) pairs, then their squares for the standard error.
    pairs: Vec<(usize, usize)>,
    prod_sum: Vec<f64>,
    prod_sq_sum: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize, pairs: Vec<(usize, usize)>) -> Self {
        let k = pairs.len();
        Self {
            n: 0,
            sum: vec![0.0; dim],
            pairs,
            prod_sum: vec![0.0; k],
            prod_sq_sum: vec![0.0; k],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (s, v) in self.sum.iter_mut().zip(x) {
            *s += v;
        }
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            let p = x[i] * x[j];
            self.prod_sum[k] += p;
            self.prod_sq_sum[k] += p * p;
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Covariance estimate for pair `k` with a standard error. Processes are
    /// centred, so the raw second moment is used and the mean correction is
    /// applied only to the point estimate.
    pub fn covariance(&self, k: usize) -> MeanSe {
        let n = self.n as f64;
        let (i, j) = self.pairs[k];
        let raw = self.prod_sum[k] / n;
        let mean = raw - (self.sum[i] / n) * (self.sum[j] / n);
        let var = (self.prod_sq_sum[k] / n - raw * raw).max(0.0) * n / (n - 1.0);
        MeanSe { mean, stderr: (var / n).sqrt() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&x), 4950.0);
    }

    #[test]
    fn mean_se_of_constant() {
        let m = MeanSe::of(&[2.0; 10]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.stderr, 0.0);
    }

    #[test]
    fn correlation_of_affine_is_one() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((correlation(&x, &y) - 1.0).abs() < 1e-12);
    }
}
