//! Losses, the denoiser training loop with condition dropout, and refiner
//! fine-tuning.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vsd_tensor::{Adam, Scalar, Tape, Tensor, Var};

use crate::dataset::{BatchStream, SketchSample};
use crate::denoiser::{DenoiserModel, Refiner, COND_RES};
use crate::diffusion::{gaussian, sample_traced, Denoiser, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Result, VsdError};
use crate::geometry::{NormalizedSketch, STROKE_DIM};
use crate::rasterizer::{soft_raster_var, SoftRasterConfig};
use crate::seeds;

pub const DEFAULT_SCALES: [(usize, f64); 3] = [(16, 1.5), (32, 2.5), (64, 4.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub lambda_raster: f64,
    pub cfg_dropout: f64,
    pub raster_scales: Vec<(usize, f64)>,
    pub seed: u64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            lr: 5e-5,
            steps: 1000,
            lambda_raster: 0.2,
            cfg_dropout: 0.1,
            raster_scales: DEFAULT_SCALES.to_vec(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return invalid(format!("cfg_dropout must be in [0, 1], got {}", self.cfg_dropout));
        }
        if !(self.lambda_raster >= 0.0) {
            return invalid(format!("lambda_raster must be >= 0, got {}", self.lambda_raster));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return invalid("lr must be > 0 and batch >= 1");
        }
        raster_configs(&self.raster_scales).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineSource {
    SamplerOutputs,
    GaussianPerturb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub lr: f64,
    pub steps: usize,
    pub source: RefineSource,
    pub perturb_sigma: f64,
    pub batch: usize,
    pub raster_scales: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lr: 5e-6,
            steps: 500,
            source: RefineSource::SamplerOutputs,
            perturb_sigma: 0.05,
            batch: 16,
            raster_scales: DEFAULT_SCALES.to_vec(),
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 {
            return invalid("refiner lr must be > 0 and batch >= 1");
        }
        if !(0.0..1.0).contains(&self.perturb_sigma) {
            return invalid(format!("perturb_sigma must be in [0, 1), got {}", self.perturb_sigma));
        }
        raster_configs(&self.raster_scales).map(|_| ())
    }
}

pub fn raster_configs(scales: &[(usize, f64)]) -> Result<Vec<SoftRasterConfig>> {
    if scales.is_empty() {
        return invalid("at least one raster scale is required");
    }
    scales
        .iter()
        .map(|&(res, sigma)| {
            let cfg = SoftRasterConfig::new(res, sigma);
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Mean absolute coordinate difference between `[B, n, 8]` batches.
pub fn loss_points<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>) -> Result<Var<'t, F>> {
    Ok(pred.l1_loss(target)?)
}

/// Mean over scales of the per-pixel squared error between soft rasters.
pub fn loss_raster<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>, scales: &[SoftRasterConfig]) -> Result<Var<'t, F>> {
    let targets = scales.iter().map(|c| soft_raster_var(target, c)).collect::<Result<Vec<_>>>()?;
    loss_raster_against(pred, &targets, scales)
}

/// [`loss_raster`] with target rasters already computed, one `[B, H, W]` per scale.
pub fn loss_raster_against<'t, F: Scalar>(pred: Var<'t, F>, targets: &[Var<'t, F>], scales: &[SoftRasterConfig]) -> Result<Var<'t, F>> {
    if scales.is_empty() || scales.len() != targets.len() {
        return invalid("raster loss needs one target per scale");
    }
    let mut total: Option<Var<'t, F>> = None;
    for (cfg, &target) in scales.iter().zip(targets) {
        let term = soft_raster_var(pred, cfg)?.mse_loss(target)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty").scale(F::from_f64(1.0 / scales.len() as f64)))
}

/// Plain-value helpers for evaluation code.
pub fn loss_points_value(pred: &NormalizedSketch, target: &NormalizedSketch) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let (a, b) = (sketch_var(&tape, &[pred])?, sketch_var(&tape, &[target])?);
    Ok(loss_points(a, b)?.value().item())
}

pub fn loss_raster_value(pred: &NormalizedSketch, target: &NormalizedSketch, scales: &[SoftRasterConfig]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let (a, b) = (sketch_var(&tape, &[pred])?, sketch_var(&tape, &[target])?);
    Ok(loss_raster(a, b, scales)?.value().item())
}

/// Constant `[B, n, 8]` tensor from sketches of equal length.
pub fn sketch_var<'t, F: Scalar>(tape: &'t Tape<F>, sketches: &[&NormalizedSketch]) -> Result<Var<'t, F>> {
    Ok(tape.constant(sketch_tensor(sketches)?))
}

pub fn sketch_tensor<F: Scalar>(sketches: &[&NormalizedSketch]) -> Result<Tensor<F>> {
    let n = sketches.first().map(|s| s.n_strokes()).unwrap_or(0);
    if sketches.iter().any(|s| s.n_strokes() != n) {
        return invalid("sketches in a batch must have equal stroke counts");
    }
    let data = sketches.iter().flat_map(|s| s.coords().iter().map(|&v| F::from_f64(v))).collect();
    Ok(Tensor::from_vec(data, &[sketches.len(), n, STROKE_DIM])?)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub points: f64,
    pub raster: f64,
    pub cfg_dropped: bool,
}

/// Samples prepared once: normalized targets, conditioning images and target
/// rasters at every loss scale.
struct Prepared<F: Scalar> {
    targets: Vec<NormalizedSketch>,
    images: Vec<Vec<F>>,
    rasters: Vec<Vec<Vec<F>>>, // [scale][sample] -> pixels
}

impl<F: Scalar> Prepared<F> {
    fn new(samples: &[SketchSample], n_strokes: usize, scales: &[SoftRasterConfig]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("training needs at least one sample");
        }
        let mut targets = Vec::with_capacity(samples.len());
        let mut images = Vec::with_capacity(samples.len());
        for s in samples {
            if s.sketch.len() != n_strokes {
                return Err(VsdError::Sample { id: s.id.clone(), msg: format!("expected {n_strokes} strokes, found {}", s.sketch.len()) });
            }
            if s.cond_image.height() != COND_RES || s.cond_image.width() != COND_RES {
                return Err(VsdError::Sample { id: s.id.clone(), msg: format!("conditioning image must be {COND_RES}x{COND_RES}") });
            }
            targets.push(s.sketch.normalize());
            images.push(s.cond_image.pixels().iter().map(|&v| F::from_f64(v)).collect());
        }
        let rasters = Self::rasterize(&targets, scales)?;
        Ok(Prepared { targets, images, rasters })
    }

    fn rasterize(targets: &[NormalizedSketch], scales: &[SoftRasterConfig]) -> Result<Vec<Vec<Vec<F>>>> {
        let tape = Tape::<F>::new();
        let all = sketch_var(&tape, &targets.iter().collect::<Vec<_>>())?;
        scales
            .iter()
            .map(|cfg| {
                let r = soft_raster_var(all, cfg)?.value();
                Ok(r.data().chunks_exact(cfg.height * cfg.width).map(<[F]>::to_vec).collect())
            })
            .collect()
    }

    fn target_rasters<'t>(&self, tape: &'t Tape<F>, idx: &[usize], scales: &[SoftRasterConfig]) -> Result<Vec<Var<'t, F>>> {
        scales
            .iter()
            .zip(&self.rasters)
            .map(|(cfg, per)| {
                let data = idx.iter().flat_map(|&i| per[i].iter().copied()).collect();
                Ok(tape.constant(Tensor::from_vec(data, &[idx.len(), cfg.height, cfg.width])?))
            })
            .collect()
    }

    fn images<'t>(&self, tape: &'t Tape<F>, idx: &[usize]) -> Result<Var<'t, F>> {
        let data = idx.iter().flat_map(|&i| self.images[i].iter().copied()).collect();
        Ok(tape.constant(Tensor::from_vec(data, &[idx.len(), COND_RES, COND_RES])?))
    }
}

/// Where training writes its log and checkpoints. Everything is optional.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    /// Checkpoints are written as `<dir>/step-XXXXXX.vsdc` and `<dir>/final.vsdc`.
    pub checkpoint_dir: Option<PathBuf>,
}

fn check_finite(step: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VsdError::Numerical(format!("non-finite loss at step {step}: {values:?}")))
    }
}

fn write_log(out: &mut Option<&mut dyn Write>, line: &impl Serialize) -> Result<()> {
    if let Some(w) = out.as_mut() {
        serde_json::to_writer(&mut **w, line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Whether step `step` trains against the null condition.
pub fn cfg_drop(seed: u64, step: usize, rate: f64) -> bool {
    seeds::rng_for(seed, "cfg-drop", step as u64).random::<f64>() < rate
}

/// Trains denoiser and encoder jointly. Returns one log entry per step.
pub fn train<F: Scalar>(
    model: &mut DenoiserModel<F>,
    samples: &[SketchSample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut outputs: TrainOutputs<'_>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if sched.steps() != model.config().timesteps {
        return invalid(format!("schedule has {} steps but the model expects {}", sched.steps(), model.config().timesteps));
    }
    let scales = raster_configs(&cfg.raster_scales)?;
    let n = model.config().n_strokes;
    let data = Prepared::<F>::new(samples, n, &scales)?;
    let mut stream = BatchStream::new(samples.len(), cfg.batch, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.steps);
    let len = n * STROKE_DIM;
    for step in 0..cfg.steps {
        let idx = stream.next_batch();
        let mut rng = seeds::rng_for(cfg.seed, "train-step", step as u64);
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.steps())).collect();
        let mut noisy = Vec::with_capacity(idx.len() * len);
        let mut buf = vec![0.0; len];
        for (&i, &t) in idx.iter().zip(&ts) {
            let eps = gaussian(len, &mut rng);
            sched.q_sample_into(data.targets[i].coords(), t, &eps, &mut buf)?;
            noisy.extend(buf.iter().map(|&v| F::from_f64(v)));
        }
        let dropped = cfg_drop(cfg.seed, step, cfg.cfg_dropout);

        let tape = Tape::new();
        let s_t = tape.constant(Tensor::from_vec(noisy, &[idx.len(), n, STROKE_DIM])?);
        let target = sketch_var(&tape, &idx.iter().map(|&i| &data.targets[i]).collect::<Vec<_>>())?;
        // Both branches stay on the tape so the unused one receives a zero gradient.
        let (enc, null) = (model.encode_var(&tape, data.images(&tape, &idx)?)?, model.null_var(&tape, idx.len()));
        let (ke, kn) = if dropped { (F::zero(), F::one()) } else { (F::one(), F::zero()) };
        let cond = enc.scale(ke).add(null.scale(kn))?;
        let pred = model.forward(&tape, s_t, &ts, cond, Some(&mut rng))?;
        let points = loss_points(pred, target)?;
        let raster = loss_raster_against(pred, &data.target_rasters(&tape, &idx, &scales)?, &scales)?;
        let loss = points.add(raster.scale(F::from_f64(cfg.lambda_raster)))?;
        let entry = StepLog {
            step,
            loss: loss.value().item().as_f64(),
            points: points.value().item().as_f64(),
            raster: raster.value().item().as_f64(),
            cfg_dropped: dropped,
        };
        if let Err(e) = check_finite(step, &[entry.loss, entry.points, entry.raster]) {
            write_log(&mut outputs.log, &entry)?;
            return Err(e);
        }
        let grads = tape.backward(loss)?;
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(store)?;
        write_log(&mut outputs.log, &entry)?;
        logs.push(entry);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                model.save(dir.join(format!("step-{:06}.vsdc", step + 1)))?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        model.save(dir.join("final.vsdc"))?;
    }
    Ok(logs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineLog {
    pub step: usize,
    pub raster: f64,
}

/// Refiner inputs for each sample: full sampler outputs of `model` (refinement
/// off) for `SamplerOutputs`; `None` for `GaussianPerturb`, whose inputs are
/// drawn fresh every step.
pub fn refiner_inputs<F: Scalar>(
    model: &DenoiserModel<F>,
    samples: &[SketchSample],
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<NormalizedSketch>> {
    let cfg = SamplerConfig { apply_refinement: false, ..sampler.clone() };
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig { seed: seeds::derive_seed(cfg.seed, "refine-input", i as u64), ..cfg.clone() };
            let mut last = None;
            sample_traced(model, None::<&Refiner<F>>, &s.cond_image, &cfg, sched, s.sketch.canvas, |_, x0| last = Some(x0.clone()))?;
            Ok(last.expect("at least one step"))
        })
        .collect()
}

/// Fine-tunes `refiner` at `t = 0` with the raster loss only. `base` is read
/// only; for `SamplerOutputs` it produces the inputs.
pub fn train_refiner<F: Scalar>(
    base: &DenoiserModel<F>,
    refiner: &mut Refiner<F>,
    samples: &[SketchSample],
    cfg: &RefineConfig,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<RefineLog>> {
    cfg.validate()?;
    let scales = raster_configs(&cfg.raster_scales)?;
    let n = refiner.n_strokes();
    let data = Prepared::<F>::new(samples, n, &scales)?;
    let inputs = match cfg.source {
        RefineSource::SamplerOutputs if cfg.steps > 0 => Some(refiner_inputs(base, samples, sampler, sched)?),
        _ => None,
    };
    // The refiner always sees the image condition; its null tokens stay fixed.
    let store = refiner.model_mut().store_mut();
    if let Some(id) = store.find("null_cond") {
        store.set_requires_grad(id, false);
    }
    let mut stream = BatchStream::new(samples.len(), cfg.batch, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let len = n * STROKE_DIM;
    let keep = (1.0 - cfg.perturb_sigma * cfg.perturb_sigma).sqrt();
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = stream.next_batch();
        let mut rng = seeds::rng_for(cfg.seed, "refine-step", step as u64);
        let mut x = Vec::with_capacity(idx.len() * len);
        for &i in &idx {
            match &inputs {
                Some(inp) => x.extend(inp[i].coords().iter().map(|&v| F::from_f64(v))),
                None => {
                    let eps = gaussian(len, &mut rng);
                    x.extend(data.targets[i].coords().iter().zip(eps).map(|(&v, e)| F::from_f64(keep * v + cfg.perturb_sigma * e)));
                }
            }
        }
        let model = refiner.model_mut();
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(x, &[idx.len(), n, STROKE_DIM])?);
        let cond = model.encode_var(&tape, data.images(&tape, &idx)?)?;
        let pred = model.forward(&tape, s, &vec![0; idx.len()], cond, None)?;
        let loss = loss_raster_against(pred, &data.target_rasters(&tape, &idx, &scales)?, &scales)?;
        let entry = RefineLog { step, raster: loss.value().item().as_f64() };
        write_log(&mut log, &entry)?;
        check_finite(step, &[entry.raster])?;
        let grads = tape.backward(loss)?;
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(store)?;
        logs.push(entry);
    }
    Ok(logs)
}
