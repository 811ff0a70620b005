//! Pixel-space diffusion: noise schedule, forward corruption, guidance, and
//! the inpainting sampler.
//!
//! The schedule stores cumulative signal coefficients `alpha[t]` (monotone
//! non-increasing, near 1 at t=1 and near 0 at t=T). The forward map is
//! `x_t = sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * eps`, training minimises
//! plain MSE between predicted and true `eps`, and sampling inpaints the
//! hidden grid cell: at every step the known cells are re-imposed at the
//! current noise level so only the target region is actually generated.
//!
//! Images live in `[0, 1]`; the model operates in `[-1, 1]` via
//! [`to_model_space`] / [`from_model_space`].

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Panel, PanelRole};
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Cumulative noise schedule over steps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>, // alpha[t-1] = cumulative signal fraction at step t
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn new(t_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {t_steps}"
            )));
        }
        let alpha = match kind {
            ScheduleKind::Cosine => cosine_alphas(t_steps),
            ScheduleKind::Linear => linear_alphas(t_steps),
        };
        debug_assert!(alpha.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule { alpha, kind })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires >= 2 steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Cumulative signal fraction at step `t` (1-based); `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn validate_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Validation(format!(
                "step t={t} outside schedule range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Squared-cosine ramp, normalised so the cumulative value at t=0 is 1.
/// Per-step decay is clamped so alpha stays strictly positive.
fn cosine_alphas(t_steps: usize) -> Vec<f64> {
    let s = 0.008;
    let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let mut alpha = Vec::with_capacity(t_steps);
    let mut prev = 1.0f64;
    for t in 1..=t_steps {
        let raw = f(t as f64 / t_steps as f64) / f0;
        // keep each per-step ratio in [0.001, 0.9999] like the usual beta clamp
        let ratio = (raw / prev).clamp(1e-3, 0.9999);
        let a = prev * ratio;
        alpha.push(a);
        prev = a;
    }
    alpha
}

/// Linearly spaced per-step decay rates, rescaled with 1/T so the endpoint
/// noise level is roughly length-independent.
fn linear_alphas(t_steps: usize) -> Vec<f64> {
    let scale = 1000.0 / t_steps as f64;
    let (b0, b1) = (1e-4 * scale, 0.02 * scale);
    let mut alpha = Vec::with_capacity(t_steps);
    let mut prev = 1.0f64;
    for t in 0..t_steps {
        let frac = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
        let beta = (b0 + (b1 - b0) * frac).clamp(1e-6, 0.9999);
        let a = prev * (1.0 - beta);
        alpha.push(a);
        prev = a;
    }
    alpha
}

/// Map `[0, 1]` pixels to the model range `[-1, 1]`.
pub fn to_model_space(image: &Array3<f64>) -> Array3<f64> {
    image.mapv(|v| 2.0 * v - 1.0)
}

/// Map model range back to `[0, 1]`, clamping overshoot.
pub fn from_model_space(image: &Array3<f64>) -> Array3<f64> {
    image.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Forward corruption at a given cumulative signal fraction.
pub fn diffuse(x0: &Array3<f64>, eps: &Array3<f64>, alpha_bar: f64) -> Result<Array3<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 {:?} and eps {:?} must match",
            x0.dim(),
            eps.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha_bar) || !alpha_bar.is_finite() {
        return Err(Error::Validation(format!(
            "alpha_bar must be in [0, 1], got {alpha_bar}"
        )));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0 * sa + eps * sn)
}

/// Forward corruption at schedule step `t` (1-based).
pub fn forward_diffuse(
    x0: &Array3<f64>,
    eps: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    schedule.validate_step(t)?;
    diffuse(x0, eps, schedule.alpha_bar(t))
}

/// Mean squared error between predicted and true noise, over all elements.
pub fn simple_loss(pred: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} must match",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`simple_loss`] w.r.t. the prediction.
pub fn simple_loss_grad(pred: &Array3<f64>, target: &Array3<f64>) -> Array3<f64> {
    let n = pred.len() as f64;
    (pred - target) * (2.0 / n)
}

/// MSE restricted to pixels where `mask` is 1 (mask broadcasts over RGB).
pub fn masked_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &Array2<f64>,
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape("prediction and target must match".into()));
    }
    let (h, w, c) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} must match image plane ({h}, {w})",
            mask.dim()
        )));
    }
    let weight: f64 = mask.sum() * c as f64;
    if weight <= 0.0 {
        return Err(Error::Validation("mask selects no pixels".into()));
    }
    let mut sum = 0.0;
    for ((r, col, ch), p) in pred.indexed_iter() {
        let d = p - target[[r, col, ch]];
        sum += mask[[r, col]] * d * d;
        let _ = ch;
    }
    Ok(sum / weight)
}

/// Gradient of [`masked_loss`] w.r.t. the prediction.
pub fn masked_loss_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &Array2<f64>,
) -> Array3<f64> {
    let c = pred.dim().2 as f64;
    let weight = mask.sum() * c;
    let mut out = pred - target;
    for ((r, col, _), v) in out.indexed_iter_mut() {
        *v *= 2.0 * mask[[r, col]] / weight;
    }
    out
}

/// Classifier-free guidance mix. The endpoints short-circuit so that w=0
/// returns the unconditional branch exactly and w=1 the conditional one.
pub fn cfg_combine(
    uncond: &Array3<f64>,
    cond: &Array3<f64>,
    w: f64,
) -> Result<Array3<f64>> {
    if uncond.dim() != cond.dim() {
        return Err(Error::Shape(format!(
            "uncond {:?} and cond {:?} must match",
            uncond.dim(),
            cond.dim()
        )));
    }
    if !w.is_finite() {
        return Err(Error::Validation(format!("guidance scale must be finite, got {w}")));
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    Ok(uncond + &((cond - uncond) * w))
}

/// A model that predicts the noise component of a composed grid image at
/// step `t`. `conditioned` selects the prompt context vs. the learned null
/// condition; implementations without a notion of conditioning may ignore it.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x: &Array3<f64>,
        t: usize,
        conditioned: bool,
    ) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Stochastic update with fresh noise each step.
    Ancestral,
    /// Noise-free update; with `steps == T` this is the deterministic limit,
    /// with fewer steps it strides through the schedule.
    Deterministic,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub guidance_scale: f64,
    pub steps: usize,
    pub mode: SamplerMode,
    /// Clamp the implied clean image to [-1, 1] each step.
    pub clip_denoised: bool,
}

impl SampleOpts {
    pub fn ancestral(steps: usize, guidance_scale: f64) -> Self {
        SampleOpts { guidance_scale, steps, mode: SamplerMode::Ancestral, clip_denoised: true }
    }

    pub fn deterministic(steps: usize, guidance_scale: f64) -> Self {
        SampleOpts { guidance_scale, steps, mode: SamplerMode::Deterministic, clip_denoised: true }
    }
}

/// Evenly strided 1-based step subsequence ending at `t_steps`.
fn step_subsequence(t_steps: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|i| (i * t_steps).div_ceil(steps))
        .collect()
}

fn guided_noise(
    predictor: &dyn NoisePredictor,
    x: &Array3<f64>,
    t: usize,
    w: f64,
) -> Result<Array3<f64>> {
    if w == 0.0 {
        return predictor.predict_noise(x, t, false);
    }
    if w == 1.0 {
        return predictor.predict_noise(x, t, true);
    }
    let uncond = predictor.predict_noise(x, t, false)?;
    let cond = predictor.predict_noise(x, t, true)?;
    cfg_combine(&uncond, &cond, w)
}

fn normal_like(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Inpaint the hidden target cell of `grid`.
///
/// Starts from pure noise, walks the (possibly strided) schedule backwards,
/// and after the final step splices the known cells back verbatim, so only
/// the target cell is generated. Returns the target panel in `[0, 1]`.
pub fn sample_inpaint(
    predictor: &dyn NoisePredictor,
    grid: &ImageGrid,
    schedule: &NoiseSchedule,
    opts: &SampleOpts,
    rng: &mut impl Rng,
) -> Result<Panel> {
    let t_total = schedule.len();
    if opts.steps == 0 || opts.steps > t_total {
        return Err(Error::Config(format!(
            "sampler steps must be in 1..={t_total}, got {}",
            opts.steps
        )));
    }
    if !opts.guidance_scale.is_finite() {
        return Err(Error::Validation("guidance scale must be finite".into()));
    }

    let known = to_model_space(&grid.compose());
    let region = grid.target_region();
    let shape = known.dim();
    let mut mask = Array2::<f64>::zeros((shape.0, shape.1));
    mask.slice_mut(s![region.row0..region.row1, region.col0..region.col1])
        .fill(1.0);

    let impose_known = |x: &mut Array3<f64>, noised: &Array3<f64>| {
        for ((r, c, ch), v) in x.indexed_iter_mut() {
            if mask[[r, c]] == 0.0 {
                *v = noised[[r, c, ch]];
            }
        }
    };

    let ts = step_subsequence(t_total, opts.steps);
    let mut x = normal_like(shape, rng);

    for (i, &t) in ts.iter().enumerate().rev() {
        // keep surrounding cells at this step's noise level
        let eps_known = normal_like(shape, rng);
        let noised_known = diffuse(&known, &eps_known, schedule.alpha_bar(t))?;
        impose_known(&mut x, &noised_known);

        let eps_hat = guided_noise(predictor, &x, t, opts.guidance_scale)?;
        if eps_hat.dim() != shape {
            return Err(Error::Shape(format!(
                "predictor returned {:?}, expected {:?}",
                eps_hat.dim(),
                shape
            )));
        }

        let a_t = schedule.alpha_bar(t);
        let (sa, sn) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let mut x0_hat = (&x - &(&eps_hat * sn)) / sa;
        if opts.clip_denoised {
            x0_hat.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        }
        // noise direction consistent with the (possibly clipped) clean image
        let eps_eff = (&x - &(&x0_hat * sa)) / sn;

        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        if t_prev == 0 {
            x = x0_hat;
        } else {
            let a_prev = schedule.alpha_bar(t_prev);
            let sigma = match opts.mode {
                SamplerMode::Deterministic => 0.0,
                SamplerMode::Ancestral => {
                    ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)).max(0.0).sqrt()
                }
            };
            let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
            x = &(&x0_hat * a_prev.sqrt()) + &(&eps_eff * dir);
            if sigma > 0.0 {
                let z = normal_like(shape, rng);
                x = &x + &(&z * sigma);
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "sampler state became non-finite at step t={t}"
            )));
        }
    }

    // splice the known cells back verbatim
    impose_known(&mut x, &known);

    let image = from_model_space(&x);
    let pixels = image
        .slice(s![region.row0..region.row1, region.col0..region.col1, ..])
        .to_owned();
    Panel::new(pixels, PanelRole::Target)
}
