//! Inference: sway-warped time grids, fixed-grid ODE integration and
//! infilling generation behind a clean reference prefix.

use std::f64::consts::FRAC_PI_2;

use ndarray::{s, Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cfm::PathConfig;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::units::{pad_to_frames, UnitSequence};
use crate::vfnet::{CondInput, FieldNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    #[default]
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwayConfig {
    pub n_steps: usize,
    /// Sway coefficient; negative values crowd steps near `t = 0`, 0 is a
    /// uniform grid.
    pub s: f64,
    #[serde(default)]
    pub method: OdeMethod,
}

impl Default for SwayConfig {
    fn default() -> Self {
        Self {
            n_steps: 32,
            s: -1.0,
            method: OdeMethod::Euler,
        }
    }
}

impl SwayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.s) {
            return Err(Error::invalid(format!("sway coefficient {} outside [-1, 1]", self.s)));
        }
        Ok(())
    }
}

/// `t + s (cos(pi t / 2) - 1 + t)` on the uniform grid `i / n`, with both
/// ends pinned exactly.
pub fn sway_schedule(cfg: &SwayConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let mut out: Vec<f64> = (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            t + cfg.s * ((FRAC_PI_2 * t).cos() - 1.0 + t)
        })
        .collect();
    out[0] = 0.0;
    out[n] = 1.0;
    Ok(out)
}

/// Integrates `dx/dt = field(x, t)` across `schedule`.
pub fn integrate_ode<F>(mut field: F, x0: Array2<f64>, schedule: &[f64], method: OdeMethod) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if schedule.len() < 2 || schedule[0] != 0.0 || *schedule.last().unwrap() != 1.0 {
        return Err(Error::invalid("schedule must run from 0 to 1 with at least one step"));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("schedule must be strictly increasing"));
    }
    let mut x = x0;
    for w in schedule.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k = match method {
            OdeMethod::Euler => field(x.view(), t)?,
            OdeMethod::Midpoint => {
                let k1 = field(x.view(), t)?;
                let mid = Zip::from(&x).and(&k1).map_collect(|&a, &b| a + 0.5 * h * b);
                field(mid.view(), t + 0.5 * h)?
            }
        };
        if k.dim() != x.dim() {
            return Err(Error::invalid("field changed the state shape"));
        }
        x.scaled_add(h, &k);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state after integrating to t = {}", w[1])));
        }
    }
    Ok(x)
}

/// Conditioning of a generation request.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestCond {
    /// Collapsed units of the input utterance, optionally preceded by the
    /// units of the reference mel (laid out under the reference frames).
    Units { units: UnitSequence, ref_units: Option<UnitSequence>, k: usize },
    /// Mel-input ablation: degraded mel frames. The reference mel serves as
    /// its own conditioning.
    Mel(Array2<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub cond: RequestCond,
    /// Clean reference frames used as the unmasked context prefix; may be
    /// empty (zero rows).
    pub ref_mel: Array2<f32>,
    pub target_frames: usize,
    pub seed: u64,
}

/// Anything that predicts the field over a prepared sequence.
pub trait FieldModel {
    fn mel_dim(&self) -> usize;
    fn predict_field(
        &self,
        x_t: ArrayView2<f64>,
        x_ctx: ArrayView2<f64>,
        cond: CondInput<'_>,
        t: f64,
    ) -> Result<Array2<f64>>;
}

impl FieldModel for FieldNet<f32> {
    fn mel_dim(&self) -> usize {
        self.config().mel_dim
    }

    fn predict_field(
        &self,
        x_t: ArrayView2<f64>,
        x_ctx: ArrayView2<f64>,
        cond: CondInput<'_>,
        t: f64,
    ) -> Result<Array2<f64>> {
        let xf = x_t.mapv(|v| v as f32);
        let cf = x_ctx.mapv(|v| v as f32);
        let out = self.predict(xf.view(), cf.view(), cond, t as f32, x_t.nrows())?;
        Ok(out.mapv(f64::from))
    }
}

/// `round(units * factor)`, never below the unit count.
pub fn estimate_target_frames(cond_len: usize, duplication: f64) -> usize {
    ((cond_len as f64 * duplication).round() as usize).max(cond_len).max(1)
}

/// Fills the frames after the reference from Gaussian noise and returns
/// only the generated region. `path` is accepted for symmetry with training;
/// the learned field already encodes it.
pub fn generate<M: FieldModel>(
    req: &GenerationRequest,
    model: &M,
    sway: &SwayConfig,
    _path: &PathConfig,
) -> Result<MelSpectrogram> {
    let mel_dim = model.mel_dim();
    if req.target_frames == 0 {
        return Err(Error::invalid("target_frames must be positive"));
    }
    if req.ref_mel.ncols() != mel_dim && req.ref_mel.nrows() > 0 {
        return Err(Error::invalid("reference mel has the wrong channel count"));
    }
    let ref_len = req.ref_mel.nrows();
    let unit_ids;
    let cond_mel;
    let (len, cond) = match &req.cond {
        RequestCond::Units { units, ref_units, k } => {
            if !units.collapsed {
                return Err(Error::invalid("generation expects collapsed units"));
            }
            if units.len() > req.target_frames {
                return Err(Error::LengthOverflow {
                    len: units.len(),
                    target: req.target_frames,
                });
            }
            let len = ref_len + req.target_frames;
            let mut all = ref_units.as_ref().map_or_else(Vec::new, |r| r.ids.clone());
            all.extend(&units.ids);
            let joined = UnitSequence { ids: all, collapsed: true };
            unit_ids = pad_to_frames(&joined, len, *k)?.ids;
            (len, CondInput::Units(&unit_ids))
        }
        RequestCond::Mel(deg) => {
            if deg.ncols() != mel_dim || deg.nrows() == 0 {
                return Err(Error::invalid("conditioning mel is empty or has the wrong channel count"));
            }
            let len = ref_len + req.target_frames.max(deg.nrows());
            let mut joined = Array2::zeros((ref_len + deg.nrows(), mel_dim));
            joined.slice_mut(s![..ref_len, ..]).assign(&req.ref_mel);
            joined.slice_mut(s![ref_len.., ..]).assign(deg);
            cond_mel = joined;
            (len, CondInput::Mel(cond_mel.view(), ref_len + req.target_frames))
        }
    };

    let mut rng = rng_for(req.seed, 0);
    let x0 = Array2::from_shape_simple_fn((len, mel_dim), || StandardNormal.sample(&mut rng));
    let mut ctx = Array2::<f64>::zeros((len, mel_dim));
    ctx.slice_mut(s![..ref_len, ..]).assign(&req.ref_mel.mapv(f64::from));
    let schedule = sway_schedule(sway)?;
    let x1 = integrate_ode(|x, t| model.predict_field(x, ctx.view(), cond, t), x0, &schedule, sway.method)?;
    let out = x1.slice(s![ref_len..ref_len + req.target_frames, ..]).mapv(|v| v as f32);
    MelSpectrogram::new(out)
}
