//! Conditional flow matching on the optimal-transport Gaussian path.
//!
//! A training example is a clean target `x1`, a standard-normal draw `x0`
//! and a time `t`. The conditional path is
//! `p_t(x | x1) = N(t * x1, (1 - (1 - sigma_min) t)^2 I)`, sampled as
//! `x_t = t * x1 + (1 - (1 - sigma_min) t) * x0`, and the regression target
//! is the conditional field
//! `u_t(x | x1) = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)`.
//!
//! The network only has to fill in the masked span; unmasked frames are
//! handed to it as context and excluded from the loss.

use ndarray::{Array2, ArrayView2, Zip};
use ndarray::NdFloat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::PaddedUnits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    #[serde(default = "PathConfig::default_sigma_min")]
    pub sigma_min: f64,
}

impl PathConfig {
    fn default_sigma_min() -> f64 {
        1e-5
    }

    pub fn new(sigma_min: f64) -> Result<Self> {
        let cfg = Self { sigma_min };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The exact straight-line path. Only used by tests and oracle fields,
    /// since `sigma_min` must otherwise be strictly positive.
    pub fn straight() -> Self {
        Self { sigma_min: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::invalid(format!(
                "sigma_min must lie in (0, 1), got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            sigma_min: Self::default_sigma_min(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    ContiguousSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub min_frac: f64,
    pub max_frac: f64,
    #[serde(default)]
    pub mode: MaskMode,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            min_frac: 0.7,
            max_frac: 1.0,
            mode: MaskMode::ContiguousSpan,
        }
    }
}

impl MaskSpec {
    pub fn new(min_frac: f64, max_frac: f64) -> Result<Self> {
        let spec = Self {
            min_frac,
            max_frac,
            mode: MaskMode::ContiguousSpan,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |f: f64| f > 0.0 && f <= 1.0;
        if !in_range(self.min_frac) || !in_range(self.max_frac) || self.min_frac > self.max_frac {
            return Err(Error::invalid(format!(
                "mask fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.min_frac, self.max_frac
            )));
        }
        Ok(())
    }
}

/// Conditioning sequence fed to the field network next to the mel streams.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// Collapsed units padded with filler to the sequence length.
    Units(PaddedUnits),
    /// Degraded mel frames (ablation mode). May be shorter or longer than
    /// the target; the network pads it with a learned embedding.
    Mel(Array2<f32>),
}

impl Conditioning {
    pub fn len(&self) -> usize {
        match self {
            Conditioning::Units(u) => u.ids.len(),
            Conditioning::Mel(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything one training example needs for a single CFM step.
///
/// `x1` covers the whole sequence; frames at or beyond `target_len` are
/// zero padding that never enters the loss (only present in mel-input mode,
/// where the conditioning may be longer than the clean target).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch<F: NdFloat> {
    pub x1: Array2<F>,
    pub x0: Array2<F>,
    pub t: F,
    pub x_t: Array2<F>,
    pub u_t: Array2<F>,
    pub mask: Vec<bool>,
    pub x_ctx: Array2<F>,
    pub cond: Conditioning,
    pub target_len: usize,
}

fn check_time<F: NdFloat>(t: F) -> Result<()> {
    if !(t >= F::zero() && t <= F::one()) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// `x_t = t * x1 + (1 - (1 - sigma_min) t) * noise`.
pub fn sample_conditional_path<F: NdFloat>(
    x1: ArrayView2<F>,
    t: F,
    noise: ArrayView2<F>,
    cfg: &PathConfig,
) -> Result<Array2<F>> {
    check_time(t)?;
    if x1.dim() != noise.dim() {
        return Err(Error::invalid(format!(
            "noise shape {:?} differs from target shape {:?}",
            noise.dim(),
            x1.dim()
        )));
    }
    let sigma_min = F::from(cfg.sigma_min).unwrap();
    let std = F::one() - (F::one() - sigma_min) * t;
    Ok(Zip::from(&x1)
        .and(&noise)
        .map_collect(|&a, &z| t * a + std * z))
}

/// `u_t(x | x1) = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)`.
///
/// At `t = 1` with `sigma_min = 0` the denominator vanishes; it is floored
/// at `max(sigma_min, f64::EPSILON)`.
pub fn target_vector_field<F: NdFloat>(
    x: ArrayView2<F>,
    x1: ArrayView2<F>,
    t: F,
    cfg: &PathConfig,
) -> Result<Array2<F>> {
    check_time(t)?;
    if x1.dim() != x.dim() {
        return Err(Error::invalid(format!(
            "state shape {:?} differs from target shape {:?}",
            x.dim(),
            x1.dim()
        )));
    }
    let sigma_min = F::from(cfg.sigma_min).unwrap();
    let floor = F::from(cfg.sigma_min.max(f64::EPSILON)).unwrap();
    let keep = F::one() - sigma_min;
    let denom = (F::one() - keep * t).max(floor);
    Ok(Zip::from(&x)
        .and(&x1)
        .map_collect(|&xv, &target| (target - keep * xv) / denom))
}

/// One contiguous span of ones covering `round(r * T)` frames,
/// `r ~ U(min_frac, max_frac)`, placed uniformly. The span always holds at
/// least one frame.
pub fn sample_mask<R: Rng + ?Sized>(
    num_frames: usize,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if num_frames == 0 {
        return Err(Error::invalid("cannot mask a zero-length sequence"));
    }
    spec.validate()?;
    let u: f64 = rng.random();
    let frac = spec.min_frac + (spec.max_frac - spec.min_frac) * u;
    let span = ((frac * num_frames as f64).round() as usize).clamp(1, num_frames);
    let start = rng.random_range(0..=num_frames - span);
    let mut mask = vec![false; num_frames];
    mask[start..start + span].fill(true);
    Ok(mask)
}

/// Mean squared error over the masked frames, all channels.
pub fn cfm_loss<F: NdFloat>(v_pred: ArrayView2<F>, u_t: ArrayView2<F>, mask: &[bool]) -> Result<F> {
    let (loss, _) = masked_mse(v_pred, u_t, mask, false)?;
    Ok(loss)
}

/// Masked MSE and, when requested, its gradient with respect to `v_pred`.
pub fn masked_mse<F: NdFloat>(
    v_pred: ArrayView2<F>,
    u_t: ArrayView2<F>,
    mask: &[bool],
    with_grad: bool,
) -> Result<(F, Option<Array2<F>>)> {
    if v_pred.dim() != u_t.dim() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from target shape {:?}",
            v_pred.dim(),
            u_t.dim()
        )));
    }
    if mask.len() != v_pred.nrows() {
        return Err(Error::invalid(format!(
            "mask length {} differs from frame count {}",
            mask.len(),
            v_pred.nrows()
        )));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::invalid("mask selects no frames"));
    }
    let count = F::from(masked * v_pred.ncols()).unwrap();
    let mut sum = F::zero();
    let mut grad = with_grad.then(|| Array2::zeros(v_pred.dim()));
    for (row, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        for col in 0..v_pred.ncols() {
            let diff = v_pred[[row, col]] - u_t[[row, col]];
            sum += diff * diff;
            if let Some(g) = grad.as_mut() {
                g[[row, col]] = (diff + diff) / count;
            }
        }
    }
    Ok((sum / count, grad))
}

/// Draws `t`, a mask and the noise, then fills every [`FlowBatch`] field.
///
/// Draw order is fixed: `t`, then the mask, then the noise row-major, so a
/// seeded generator reproduces the batch bit for bit.
pub fn make_flow_batch<F: NdFloat, R: Rng + ?Sized>(
    x1: ArrayView2<F>,
    units: &PaddedUnits,
    spec: &MaskSpec,
    cfg: &PathConfig,
    rng: &mut R,
) -> Result<FlowBatch<F>> {
    if units.ids.len() != x1.nrows() {
        return Err(Error::invalid(format!(
            "{} padded units for {} mel frames",
            units.ids.len(),
            x1.nrows()
        )));
    }
    make_flow_batch_with(x1, x1.nrows(), Conditioning::Units(units.clone()), spec, cfg, rng)
}

/// General form of [`make_flow_batch`]: `x1` may extend past `target_len`
/// with padding frames, which are never masked.
pub fn make_flow_batch_with<F: NdFloat, R: Rng + ?Sized>(
    x1: ArrayView2<F>,
    target_len: usize,
    cond: Conditioning,
    spec: &MaskSpec,
    cfg: &PathConfig,
    rng: &mut R,
) -> Result<FlowBatch<F>> {
    let total = x1.nrows();
    if target_len == 0 || target_len > total {
        return Err(Error::invalid(format!(
            "target length {target_len} outside 1..={total}"
        )));
    }
    if let Conditioning::Units(u) = &cond {
        if u.ids.len() != total {
            return Err(Error::invalid(format!(
                "{} padded units for {total} frames",
                u.ids.len()
            )));
        }
    }
    let t = F::from(rng.random::<f64>()).unwrap();
    let mut mask = sample_mask(target_len, spec, rng)?;
    mask.resize(total, false);
    let x0 = Array2::from_shape_simple_fn(x1.dim(), || {
        let z: f64 = StandardNormal.sample(rng);
        F::from(z).unwrap()
    });
    let x_t = sample_conditional_path(x1, t, x0.view(), cfg)?;
    let u_t = target_vector_field(x_t.view(), x1, t, cfg)?;
    let mut x_ctx = x1.to_owned();
    for (mut row, &m) in x_ctx.rows_mut().into_iter().zip(&mask) {
        if m {
            row.fill(F::zero());
        }
    }
    Ok(FlowBatch {
        x1: x1.to_owned(),
        x0,
        t,
        x_t,
        u_t,
        mask,
        x_ctx,
        cond,
        target_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    #[test]
    fn path_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = random(4, 3, &mut rng);
        let z = random(4, 3, &mut rng);
        let cfg = PathConfig::default();
        assert_eq!(sample_conditional_path(x1.view(), 0.0, z.view(), &cfg).unwrap(), z);
        let at_one = sample_conditional_path(x1.view(), 1.0, z.view(), &cfg).unwrap();
        let expect = &x1 + &(&z * 1e-5);
        for (a, b) in at_one.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn path_midpoint_value() {
        let x1 = array![[2.0]];
        let z = array![[1.0]];
        let xt = sample_conditional_path(x1.view(), 0.5, z.view(), &PathConfig::straight()).unwrap();
        assert_eq!(xt[[0, 0]], 1.5);
    }

    #[test]
    fn path_rejects_bad_time() {
        let x = array![[0.0]];
        let cfg = PathConfig::default();
        assert!(sample_conditional_path(x.view(), 1.5, x.view(), &cfg).is_err());
        assert!(sample_conditional_path(x.view(), -0.1, x.view(), &cfg).is_err());
        assert!(target_vector_field(x.view(), x.view(), f64::NAN, &cfg).is_err());
    }

    #[test]
    fn field_direct_formula() {
        let u = target_vector_field(
            array![[0.5]].view(),
            array![[1.0]].view(),
            0.5,
            &PathConfig::straight(),
        )
        .unwrap();
        assert_eq!(u[[0, 0]], 1.0);
    }

    #[test]
    fn field_is_constant_on_straight_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1 = random(3, 5, &mut rng);
        let x0 = random(3, 5, &mut rng);
        let cfg = PathConfig::straight();
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let xt = sample_conditional_path(x1.view(), t, x0.view(), &cfg).unwrap();
            let u = target_vector_field(xt.view(), x1.view(), t, &cfg).unwrap();
            for ((a, b), c) in u.iter().zip(x1.iter()).zip(x0.iter()) {
                assert!((a - (b - c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_matches_independent_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PathConfig::default();
        for _ in 0..20 {
            let x1 = random(4, 4, &mut rng);
            let x = random(4, 4, &mut rng);
            let t: f64 = rng.random::<f64>() * 0.999;
            let u = target_vector_field(x.view(), x1.view(), t, &cfg).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let s = 1e-5_f64;
                    let oracle = (x1[[i, j]] - (1.0 - s) * x[[i, j]]) / (1.0 - (1.0 - s) * t);
                    assert!((u[[i, j]] - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn field_guards_t_one() {
        let u = target_vector_field::<f64>(
            array![[1.0]].view(),
            array![[2.0]].view(),
            1.0,
            &PathConfig::straight(),
        )
        .unwrap();
        assert!(u[[0, 0]].is_finite());
    }

    #[test]
    fn full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = MaskSpec::new(1.0, 1.0).unwrap();
        assert_eq!(sample_mask(13, &spec, &mut rng).unwrap(), vec![true; 13]);
    }

    #[test]
    fn seventy_percent_mask_is_contiguous() {
        let spec = MaskSpec::new(0.7, 0.7).unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(10, &spec, &mut rng).unwrap();
            assert_eq!(m.iter().filter(|&&b| b).count(), 7);
            let first = m.iter().position(|&b| b).unwrap();
            assert!(m[first..first + 7].iter().all(|&b| b));
        }
    }

    #[test]
    fn mask_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(0, &MaskSpec::default(), &mut rng).is_err());
        assert!(MaskSpec::new(0.8, 0.5).is_err());
        assert!(MaskSpec::new(0.0, 0.5).is_err());
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random(6, 4, &mut rng);
        let mask = vec![true, false, true, true, false, false];
        assert_eq!(cfm_loss(u.view(), u.view(), &mask).unwrap(), 0.0);
        let shifted = &u + 1.0;
        assert!((cfm_loss(shifted.view(), u.view(), &mask).unwrap() - 1.0).abs() < 1e-12);
        assert!(cfm_loss(u.view(), u.view(), &[false; 6]).is_err());
    }

    #[test]
    fn loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let v = random(9, 5, &mut rng);
            let u = random(9, 5, &mut rng);
            let mut mask: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
            mask[0] = true;
            let mut sum = 0.0;
            let mut n = 0.0;
            for i in 0..9 {
                for j in 0..5 {
                    if mask[i] {
                        sum += (v[[i, j]] - u[[i, j]]).powi(2);
                        n += 1.0;
                    }
                }
            }
            let got = cfm_loss(v.view(), u.view(), &mask).unwrap();
            assert!((got - sum / n).abs() < 1e-10);
        }
    }

    fn padded(n: usize) -> PaddedUnits {
        PaddedUnits {
            ids: vec![0; n],
            filler: 4,
        }
    }

    #[test]
    fn flow_batch_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = random(12, 6, &mut rng);
        let spec = MaskSpec::default();
        let cfg = PathConfig::default();
        let a = make_flow_batch(x1.view(), &padded(12), &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_flow_batch(x1.view(), &padded(12), &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flow_batch_fields_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x1 = random(20, 6, &mut rng);
        let cfg = PathConfig::default();
        let b = make_flow_batch(x1.view(), &padded(20), &MaskSpec::default(), &cfg, &mut rng).unwrap();
        for (i, &m) in b.mask.iter().enumerate() {
            for j in 0..6 {
                let mis = if m { x1[[i, j]] } else { 0.0 };
                assert_eq!(b.x_ctx[[i, j]] + mis, x1[[i, j]]);
                if m {
                    assert_eq!(b.x_ctx[[i, j]], 0.0);
                }
            }
        }
        let std = 1.0 - (1.0 - 1e-5) * b.t;
        for ((xt, a), z) in b.x_t.iter().zip(x1.iter()).zip(b.x0.iter()) {
            assert!((xt - (b.t * a + std * z)).abs() < 1e-12);
        }
        let u = target_vector_field(b.x_t.view(), x1.view(), b.t, &cfg).unwrap();
        assert_eq!(u, b.u_t);
        assert!(make_flow_batch(x1.view(), &padded(19), &MaskSpec::default(), &cfg, &mut rng).is_err());
    }
}
