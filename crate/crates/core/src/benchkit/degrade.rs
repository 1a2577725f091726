use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::units::FeatureMatrix;

/// Segment lengths for the time-stretch, in frames.
const SEGMENT_MIN: usize = 4;
const SEGMENT_MAX: usize = 10;

/// Strength of every degradation effect. `from_severity` scales them all
/// linearly; severity 0 disables everything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeConfig {
    pub severity: f64,
    /// Bounds of the per-segment stretch factor, `1 <= lo <= hi`.
    pub stretch_range: (f64, f64),
    /// Probability that a frame is doubled.
    pub repeat_prob: f64,
    /// Std of additive Gaussian noise.
    pub jitter_std: f64,
    /// Weight of the previous output frame in a one-pole smoother; blurs
    /// symbol boundaries.
    #[serde(default)]
    pub slur: f64,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn from_severity(severity: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            severity,
            stretch_range: (1.0, 1.0 + 0.8 * severity),
            repeat_prob: 0.3 * severity,
            jitter_std: severity,
            slur: 0.5 * severity,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.stretch_range;
        let ok = (0.0..=1.0).contains(&self.severity)
            && lo >= 1.0
            && hi >= lo
            && hi.is_finite()
            && (0.0..=1.0).contains(&self.repeat_prob)
            && self.jitter_std >= 0.0
            && self.jitter_std.is_finite()
            && (0.0..1.0).contains(&self.slur);
        if !ok {
            return Err(Error::invalid(format!("bad degradation config {self:?}")));
        }
        Ok(())
    }
}

/// Degrades a feature matrix.
pub fn degrade(features: &FeatureMatrix, cfg: &DegradeConfig) -> Result<FeatureMatrix> {
    FeatureMatrix::new(degrade_frames(features.rows().view(), cfg)?)
}

/// Frame repetition, segment time-stretch, boundary slurring and additive
/// jitter on any frame matrix. The frame warp only copies frames.
pub fn degrade_frames(frames: ArrayView2<f32>, cfg: &DegradeConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    if cfg.severity == 0.0 {
        return Ok(frames.to_owned());
    }
    let index = warp_index(frames.nrows(), cfg);
    let mut out = Array2::zeros((index.len(), frames.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(&index) {
        row.assign(&frames.row(i));
    }
    if cfg.slur > 0.0 {
        let a = cfg.slur as f32;
        for i in 1..out.nrows() {
            let prev = out.row(i - 1).to_owned();
            out.row_mut(i).zip_mut_with(&prev, |x, &p| *x = (1.0 - a) * *x + a * p);
        }
    }
    if cfg.jitter_std > 0.0 {
        let mut rng = rng_for(cfg.seed, 1);
        let normal = Normal::new(0.0, cfg.jitter_std).unwrap();
        out.mapv_inplace(|v| v + normal.sample(&mut rng) as f32);
    }
    Ok(out)
}

/// Source frame of every output frame.
fn warp_index(n: usize, cfg: &DegradeConfig) -> Vec<usize> {
    let mut rng = rng_for(cfg.seed, 0);
    let mut repeated = Vec::with_capacity(n + n / 2);
    for i in 0..n {
        repeated.push(i);
        if cfg.repeat_prob > 0.0 && rng.random::<f64>() < cfg.repeat_prob {
            repeated.push(i);
        }
    }
    let (lo, hi) = cfg.stretch_range;
    if hi <= 1.0 {
        return repeated;
    }
    let mut out = Vec::with_capacity(repeated.len() * 2);
    let mut start = 0;
    while start < repeated.len() {
        let len = rng.random_range(SEGMENT_MIN..=SEGMENT_MAX).min(repeated.len() - start);
        let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let stretched = ((len as f64 * factor).round() as usize).max(len);
        for j in 0..stretched {
            out.push(repeated[start + j * len / stretched]);
        }
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{assign, collapse, Codebook, TrainingMeta};
    use proptest::prelude::*;

    fn ramp(n: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f32 * 0.01)).unwrap()
    }

    fn repeat_only(p: f64, seed: u64) -> DegradeConfig {
        DegradeConfig {
            severity: 1.0,
            stretch_range: (1.0, 1.0),
            repeat_prob: p,
            jitter_std: 0.0,
            slur: 0.0,
            seed,
        }
    }

    #[test]
    fn severity_zero_is_identity() {
        let f = ramp(50, 3);
        for seed in 0..4 {
            assert_eq!(degrade(&f, &DegradeConfig::from_severity(0.0, seed).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn repetition_length_matches_binomial_mean() {
        let f = ramp(1000, 1);
        let lens: Vec<usize> = (0..40)
            .map(|seed| degrade(&f, &repeat_only(0.5, seed)).unwrap().num_frames())
            .collect();
        assert!(lens.iter().all(|&l| (1000..=2000).contains(&l)));
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        // Std of the mean is sqrt(1000 * 0.25 / 40) = 2.5.
        assert!((mean - 1500.0).abs() < 12.5, "mean {mean}");
    }

    #[test]
    fn stretch_never_shortens() {
        let f = ramp(200, 2);
        let cfg = DegradeConfig {
            stretch_range: (1.2, 1.8),
            repeat_prob: 0.0,
            ..repeat_only(0.0, 5)
        };
        let out = degrade(&f, &cfg).unwrap();
        assert!(out.num_frames() >= 240 && out.num_frames() <= 360, "{}", out.num_frames());
    }

    #[test]
    fn bad_configs() {
        assert!(DegradeConfig::from_severity(1.5, 0).is_err());
        let mut cfg = repeat_only(0.2, 0);
        cfg.stretch_range = (0.5, 1.0);
        assert!(cfg.validate().is_err());
        cfg.stretch_range = (1.0, 1.0);
        cfg.slur = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn effects_grow_with_severity() {
        let a = DegradeConfig::from_severity(0.25, 0).unwrap();
        let b = DegradeConfig::from_severity(0.75, 0).unwrap();
        assert!(a.stretch_range.1 < b.stretch_range.1);
        assert!(a.repeat_prob < b.repeat_prob);
        assert!(a.jitter_std < b.jitter_std);
        assert!(a.slur < b.slur);
    }

    proptest! {
        #[test]
        fn warping_keeps_collapsed_units(
            labels in proptest::collection::vec(0usize..4, 1..60),
            seed in any::<u64>(),
            p in 0.0f64..1.0,
            stretch in 1.0f64..2.0,
        ) {
            let centroids = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f32);
            let cb = Codebook::new(centroids.clone(), TrainingMeta::default()).unwrap();
            let rows = Array2::from_shape_fn((labels.len(), 2), |(i, j)| centroids[[labels[i], j]]);
            let f = FeatureMatrix::new(rows).unwrap();
            let cfg = DegradeConfig { stretch_range: (1.0, stretch), ..repeat_only(p, seed) };
            let d = degrade(&f, &cfg).unwrap();
            prop_assert_eq!(collapse(&assign(&d, &cb).unwrap()), collapse(&assign(&f, &cb).unwrap()));
        }
    }
}
