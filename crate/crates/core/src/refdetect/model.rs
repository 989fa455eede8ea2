use super::features::{PixelFeature, FEATURE_DIM};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sufficient statistics of one batch of feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub count: u64,
    pub mean: [f64; FEATURE_DIM],
    pub var: [f64; FEATURE_DIM],
}

impl BatchStats {
    /// Two-pass mean and population variance.
    pub fn from_features<'a>(features: impl Iterator<Item = &'a PixelFeature> + Clone) -> Self {
        let mut count = 0u64;
        let mut sum = [0.0; FEATURE_DIM];
        for f in features.clone() {
            count += 1;
            for k in 0..FEATURE_DIM {
                sum[k] += f[k];
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0; FEATURE_DIM];
        for f in features {
            for k in 0..FEATURE_DIM {
                let d = f[k] - mean[k];
                sq[k] += d * d;
            }
        }
        Self {
            count,
            mean,
            var: sq.map(|s| s / count as f64),
        }
    }
}

/// Running diagonal Gaussian over pixel features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassModel {
    pub count: u64,
    pub mean: [f64; FEATURE_DIM],
    pub var: [f64; FEATURE_DIM],
}

impl ClassModel {
    /// Count-weighted merge of a batch into the running statistics.
    ///
    /// Stored variances are exact population variances; the floor applies
    /// only when scoring.
    pub fn merge(&mut self, batch: &BatchStats) {
        if batch.count == 0 {
            return;
        }
        let n = self.count as f64;
        let m = batch.count as f64;
        let total = n + m;
        for k in 0..FEATURE_DIM {
            let delta = batch.mean[k] - self.mean[k];
            let mean = (n * self.mean[k] + m * batch.mean[k]) / total;
            let var = (n * self.var[k] + m * batch.var[k]) / total + n * m * delta * delta / (total * total);
            self.mean[k] = mean;
            self.var[k] = var.max(0.0);
        }
        self.count += batch.count;
    }

    /// Variance used for scoring, never below [`VARIANCE_FLOOR`].
    pub fn effective_var(&self) -> [f64; FEATURE_DIM] {
        self.var.map(|v| v.max(VARIANCE_FLOOR))
    }

    pub fn is_trained(&self) -> bool {
        self.count >= 2
    }

    pub fn log_likelihood(&self, x: &PixelFeature) -> f64 {
        let mut acc = 0.0;
        for k in 0..FEATURE_DIM {
            let var = self.var[k].max(VARIANCE_FLOOR);
            let d = x[k] - self.mean[k];
            acc += LN_2PI + var.ln() + d * d / var;
        }
        -0.5 * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_pooled_statistics() {
        let a: Vec<PixelFeature> = (0..7).map(|i| [i as f64 * 0.1, 0.2, 0.3, 0.4, 0.5]).collect();
        let b: Vec<PixelFeature> = (0..4).map(|i| [0.9 - i as f64 * 0.05, 0.1, 0.3, 0.2, 0.0]).collect();
        let mut model = ClassModel::default();
        model.merge(&BatchStats::from_features(a.iter()));
        model.merge(&BatchStats::from_features(b.iter()));
        let pooled = BatchStats::from_features(a.iter().chain(&b));
        assert_eq!(model.count, 11);
        for k in 0..FEATURE_DIM {
            assert!((model.mean[k] - pooled.mean[k]).abs() < 1e-12);
            assert!((model.var[k] - pooled.var[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_is_floored() {
        let mut model = ClassModel::default();
        let same = [[0.5; FEATURE_DIM]; 3];
        model.merge(&BatchStats::from_features(same.iter()));
        assert!(model.effective_var().iter().all(|&v| v >= VARIANCE_FLOOR));
        assert!(model.log_likelihood(&[0.5; FEATURE_DIM]).is_finite());
    }
}
