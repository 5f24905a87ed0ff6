/// Variance floor used when normalizing.
pub const EPS_NORM: f64 = 1e-8;
/// Normalized values are clipped to `[-CLIP, CLIP]`.
pub const CLIP: f64 = 10.0;

/// Streaming per-component mean and population variance (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn from_stats(count: f64, mean: Vec<f64>, variance: Vec<f64>) -> Self {
        let m2 = variance.iter().map(|v| v * count).collect();
        Self { count, mean, m2 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| (m / self.count).max(0.0)).collect()
    }

    pub fn update(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    /// `(x - mean) / sqrt(var + EPS_NORM)`, clipped to `[-CLIP, CLIP]`.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let var = self.variance();
        x.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((v, m), s)| ((v - m) / (s + EPS_NORM).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }
}
