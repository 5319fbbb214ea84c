//! Noise schedule, forward noising and the x0-prediction sampling loop with
//! classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Canvas, NormalizedSketch, Sketch};
use crate::rasterizer::RasterGrid;
use crate::seeds;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_EXPONENT: f64 = 0.4;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_GUIDANCE: f64 = 2.5;

const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Cumulative signal retention `ᾱ_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    exponent: f64,
    offset_s: f64,
}

/// Cosine schedule with a configurable exponent:
/// `f(t) = cos(((t/T + s)/(1 + s))·π/2)^exponent`, `ᾱ_t = f(t)/f(0)`.
pub fn make_schedule(steps: usize, exponent: f64, offset_s: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return invalid("schedule needs at least one step");
    }
    if !(exponent > 0.0 && exponent.is_finite()) {
        return invalid(format!("schedule exponent must be > 0, got {exponent}"));
    }
    if !(offset_s >= 0.0 && offset_s.is_finite()) {
        return invalid(format!("schedule offset must be >= 0, got {offset_s}"));
    }
    let f = |t: usize| {
        let phase = ((t as f64 / steps as f64 + offset_s) / (1.0 + offset_s)) * std::f64::consts::FRAC_PI_2;
        phase.cos().max(0.0).powf(exponent)
    };
    let f0 = f(0);
    let alpha_bar = (0..=steps).map(|t| (f(t) / f0).clamp(ALPHA_BAR_FLOOR, 1.0)).collect();
    Ok(NoiseSchedule { steps, alpha_bar, exponent, offset_s })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_EXPONENT, DEFAULT_OFFSET).expect("default schedule")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn offset(&self) -> f64 {
        self.offset_s
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return invalid(format!("timestep {t} outside [0, {}]", self.steps));
        }
        Ok(())
    }

    /// `out = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`, elementwise over slices.
    pub fn q_sample_into(&self, x0: &[f64], t: usize, eps: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_t(t)?;
        if x0.len() != eps.len() || x0.len() != out.len() {
            return invalid(format!("q_sample length mismatch: x0 {}, eps {}, out {}", x0.len(), eps.len(), out.len()));
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
            *o = sa * x + sn * e;
        }
        Ok(())
    }
}

/// Forward noising of a clean sketch to step `t`.
pub fn q_sample(s0: &NormalizedSketch, t: usize, eps: &NormalizedSketch, sched: &NoiseSchedule) -> Result<NormalizedSketch> {
    let mut out = vec![0.0; s0.coords().len()];
    sched.q_sample_into(s0.coords(), t, eps.coords(), &mut out)?;
    NormalizedSketch::from_coords(out)
}

pub fn gaussian<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// A clean-sketch predictor `M(S^t, t, cond)`; `cond = None` is the null condition.
pub trait Denoiser {
    type Cond;

    fn n_strokes(&self) -> usize;

    fn encode(&self, image: &RasterGrid) -> Result<Self::Cond>;

    fn predict(&self, s_t: &NormalizedSketch, t: usize, cond: Option<&Self::Cond>) -> Result<NormalizedSketch>;

    /// Conditional and unconditional predictions. Implementations may batch
    /// the two passes.
    fn predict_pair(&self, s_t: &NormalizedSketch, t: usize, cond: &Self::Cond) -> Result<(NormalizedSketch, NormalizedSketch)> {
        Ok((self.predict(s_t, t, Some(cond))?, self.predict(s_t, t, None)?))
    }
}

/// Classifier-free guidance in x0 space: `u + s·(c − u)`. At `s = 1` only the
/// conditional pass runs.
pub fn cfg_predict<M: Denoiser>(model: &M, s_t: &NormalizedSketch, t: usize, cond: &M::Cond, scale: f64) -> Result<NormalizedSketch> {
    if !(scale >= 0.0) {
        return invalid(format!("guidance scale must be >= 0, got {scale}"));
    }
    if scale == 1.0 {
        return model.predict(s_t, t, Some(cond));
    }
    let (c, u) = model.predict_pair(s_t, t, cond)?;
    let coords = c.coords().iter().zip(u.coords()).map(|(&c, &u)| u + scale * (c - u)).collect();
    NormalizedSketch::from_coords(coords)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    /// Fresh Gaussian noise at every re-noising step; otherwise one fixed draw per chain.
    pub stochastic_renoise: bool,
    pub seed: u64,
    pub apply_refinement: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { guidance_scale: DEFAULT_GUIDANCE, stochastic_renoise: true, seed: 0, apply_refinement: true }
    }
}

/// Runs the full chain and returns the denormalized sketch.
pub fn sample<M: Denoiser, R: Denoiser>(
    model: &M,
    refiner: Option<&R>,
    image: &RasterGrid,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    canvas: Canvas,
) -> Result<Sketch> {
    sample_traced(model, refiner, image, cfg, sched, canvas, |_, _| {})
}

/// [`sample`], calling `on_step(t, Ŝ⁰)` with every clean-sketch prediction
/// (and with `t = 0` for the refined output).
pub fn sample_traced<M: Denoiser, R: Denoiser>(
    model: &M,
    refiner: Option<&R>,
    image: &RasterGrid,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    canvas: Canvas,
    mut on_step: impl FnMut(usize, &NormalizedSketch),
) -> Result<Sketch> {
    if !(cfg.guidance_scale >= 0.0) {
        return invalid(format!("guidance scale must be >= 0, got {}", cfg.guidance_scale));
    }
    let refiner = match (cfg.apply_refinement, refiner) {
        (true, None) => return invalid("refinement requested but no refiner weights are loaded"),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let len = model.n_strokes() * crate::geometry::STROKE_DIM;
    let mut rng = seeds::rng_for(cfg.seed, "sample", 0);
    let mut s_t = NormalizedSketch::from_coords(gaussian(len, &mut rng))?;
    let fixed_eps = if cfg.stochastic_renoise { None } else { Some(gaussian(len, &mut rng)) };
    let cond = model.encode(image)?;
    let steps = sched.steps();
    let mut x0 = s_t.clone();
    for t in (1..=steps).rev() {
        x0 = cfg_predict(model, &s_t, t, &cond, cfg.guidance_scale)?;
        on_step(t, &x0);
        if t > 1 {
            let eps = match &fixed_eps {
                Some(e) => e.clone(),
                None => gaussian(len, &mut rng),
            };
            let mut next = vec![0.0; len];
            sched.q_sample_into(x0.coords(), t - 1, &eps, &mut next)?;
            s_t = NormalizedSketch::from_coords(next)?;
        }
    }
    if let Some(r) = refiner {
        let rcond = r.encode(image)?;
        x0 = r.predict(&x0, 0, Some(&rcond))?;
        on_step(0, &x0);
    }
    Ok(x0.denormalize(canvas))
}
