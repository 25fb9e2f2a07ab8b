//! Variance schedule, forward noising and the deterministic DDIM reverse update.
//!
//! `alpha_bar(t)` is the cumulative product of per-step alphas with
//! `alpha_bar(0) = 1`, so `t = 0` is the clean sample and the sampler walks
//! from `t_max` down to exactly `0`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::tensor_util::all_finite;

/// Floor applied to `1 - alpha_bar` before taking a square root.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Serializable description of a schedule, stored in session manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: String,
    pub t_max: usize,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM-style schedule with betas spaced linearly in `[beta_start, beta_end]`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(DacError::Config("t_max must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DacError::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for step in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (step - 1) as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        let config = ScheduleConfig {
            kind: "linear_beta".into(),
            t_max,
            parameters: serde_json::json!({ "beta_start": beta_start, "beta_end": beta_end }),
        };
        Self::with_config(config, alpha_bars)
    }

    /// Schedule from explicit cumulative alphas, `alpha_bars[t]` for `t` in `0..=t_max`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        let t_max = alpha_bars.len().saturating_sub(1);
        let config = ScheduleConfig {
            kind: "explicit".into(),
            t_max,
            parameters: serde_json::json!({ "alpha_bars": alpha_bars }),
        };
        Self::with_config(config, alpha_bars)
    }

    pub fn from_config(config: &ScheduleConfig) -> Result<Self> {
        match config.kind.as_str() {
            "linear_beta" => {
                let get = |key: &str| {
                    config.parameters[key]
                        .as_f64()
                        .ok_or_else(|| DacError::Config(format!("schedule missing `{key}`")))
                };
                Self::linear(config.t_max, get("beta_start")?, get("beta_end")?)
            }
            "explicit" => {
                let alpha_bars: Vec<f64> =
                    serde_json::from_value(config.parameters["alpha_bars"].clone())?;
                Self::from_alpha_bars(alpha_bars)
            }
            other => Err(DacError::Config(format!("unknown schedule kind `{other}`"))),
        }
    }

    fn with_config(config: ScheduleConfig, alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(DacError::Config("schedule needs at least two entries".into()));
        }
        if alpha_bars[0] > 1.0 {
            return Err(DacError::Config("alpha_bar(0) must be <= 1".into()));
        }
        if let Some(bad) = alpha_bars.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(DacError::Config(format!(
                "alpha_bar values must be finite and positive, found {bad}"
            )));
        }
        if alpha_bars.windows(2).any(|w| w[1] > w[0]) {
            return Err(DacError::Config("alpha_bar must be non-increasing in t".into()));
        }
        Ok(Self { config, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            DacError::range("timestep", format!("{t} not in [0, {}]", self.t_max()))
        })
    }

    /// Descending timesteps for a `steps`-step sampler: uniform stride from
    /// `t_max` landing exactly on `0`. Has `steps + 1` entries.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(DacError::range(
                "steps",
                format!("{steps} not in [1, {t_max}]"),
            ));
        }
        let mut ts: Vec<usize> = (0..=steps)
            .map(|i| {
                let remaining = (steps - i) as f64 / steps as f64;
                (remaining * t_max as f64).round() as usize
            })
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// `sqrt(1 - alpha_bar)`, exactly zero at unit alpha and floored otherwise.
fn sqrt_one_minus(alpha_bar: f64) -> f64 {
    if alpha_bar >= 1.0 {
        return 0.0;
    }
    (1.0 - alpha_bar).max(VARIANCE_FLOOR).sqrt()
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DacError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "forward_noise x0/eps")?;
    let ab = sched.alpha_bar(t)?;
    if ab == 1.0 {
        return Ok(x0.clone());
    }
    Ok(((x0 * ab.sqrt())? + (eps * sqrt_one_minus(ab))?)?)
}

/// Batched forward noising with one timestep per leading-dimension entry.
pub fn forward_noise_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x0, eps, "forward_noise_batch x0/eps")?;
    let batch = x0.dim(0)?;
    if ts.len() != batch {
        return Err(DacError::Shape(format!(
            "{} timesteps for batch of {batch}",
            ts.len()
        )));
    }
    let mut signal = Vec::with_capacity(batch);
    let mut noise = Vec::with_capacity(batch);
    for &t in ts {
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push(sqrt_one_minus(ab));
    }
    let mut shape = vec![batch];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let coef = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
    };
    let signal = coef(signal)?;
    let noise = coef(noise)?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step_to(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x_t, eps_pred, "ddim_step x_t/eps_pred")?;
    if t_prev >= t {
        return Err(DacError::range(
            "timestep",
            format!("ddim step must move backwards, got {t} -> {t_prev}"),
        ));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    // x_prev = sqrt(ab_prev) * (x_t - s_t * eps) / sqrt(ab) + s_prev * eps
    //        = c_x * x_t + c_eps * eps
    let c_x = (ab_prev / ab).sqrt();
    let c_eps = sqrt_one_minus(ab_prev) - c_x * sqrt_one_minus(ab);
    Ok(((x_t * c_x)? + (eps_pred * c_eps)?)?)
}

/// One DDIM update from `t` to `t - 1`.
pub fn ddim_step(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(DacError::range("timestep", "no step before t = 0"));
    }
    ddim_step_to(x_t, t, t - 1, eps_pred, sched)
}

/// Runs the DDIM sampler from `x_t_max` over the strided timesteps down to
/// `t = 0`. `predict(x_t, t)` returns the predicted noise.
pub fn ddim_sample<F>(
    x_t_max: &Tensor,
    steps: usize,
    mut predict: F,
    sched: &NoiseSchedule,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = sched.sampling_timesteps(steps)?;
    let mut x = x_t_max.clone();
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = predict(&x, t)?;
        x = ddim_step_to(&x, t, t_prev, &eps, sched)?;
        if !all_finite(&x)? {
            return Err(DacError::SamplingDiverged { timestep: t });
        }
    }
    Ok(x)
}

/// Converts a schedule coefficient tensor to `f64` values, mostly for tests.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
