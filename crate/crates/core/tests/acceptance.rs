// Acceptance suite. One test per criterion; each prints a single
// "criterion N: PASS|FAIL ..." line. Tests share a lock so wall-clock
// bounds are measured without competition from one another.

mod common;

#[path = "../../tensor/tests/common/primitive_suite.rs"]
mod primitive_suite;

use std::cell::Cell;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsd_core::dataset::{export, generate_toy, ingest, toy_sample, SketchSample, ToyConfig};
use vsd_core::denoiser::{DenoiserConfig, DenoiserModel};
use vsd_core::diffusion::{cfg_predict, gaussian, make_schedule, sample, Denoiser, NoiseSchedule, SamplerConfig};
use vsd_core::evalkit::{chamfer, CHAMFER_SAMPLES};
use vsd_core::geometry::{from_svg, to_svg};
use vsd_core::rasterizer::{soft_raster, soft_raster_var, SoftRasterConfig};
use vsd_core::seeds::rng_for;
use vsd_core::strokeops::{
    allocate_from_means, allocate_points, balance_bounds, partition_regions, sort_strokes, AttentionMask, SortConfig,
};
use vsd_core::training::{
    loss_raster_value, raster_configs, train, train_refiner, RefineConfig, RefineSource, StepLog, TrainConfig,
    TrainOutputs, DEFAULT_SCALES,
};
use vsd_core::{Canvas, NormalizedSketch, Point, RasterGrid, Result, Sketch, Stroke};
use vsd_tensor::gradcheck::{central_difference, max_relative_error};
use vsd_tensor::{Tape, Tensor};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, limit: Option<Duration>, elapsed: Duration, detail: String) {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let ok = pass && in_time;
    let bound = limit.map(|l| format!(" / limit {:.0?}", l)).unwrap_or_default();
    // written to the raw handle so the line shows up even when output is captured
    let line = format!("criterion {n}: {} ({detail}; {:.1?}{bound})\n", if ok { "PASS" } else { "FAIL" }, elapsed);
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} over its time limit: {elapsed:?}");
}

fn run(n: usize, limit: Option<Duration>, body: impl FnOnce() -> (bool, String)) {
    let _guard = serial();
    let start = Instant::now();
    let (pass, detail) = body();
    report(n, pass, limit, start.elapsed(), detail);
}

const MIN: Duration = Duration::from_secs(60);

#[test]
fn criterion_01_autodiff_primitives() {
    run(1, Some(MIN), || {
        let results = primitive_suite::run_all(20, 2024);
        let (name, worst) = results.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
        (results.iter().all(|&(_, e)| e < 1e-4), format!("{} checks, worst {worst:.2e} in {name}", results.len()))
    });
}

#[test]
fn criterion_02_rasterizer_gradients() {
    run(2, Some(2 * MIN), || {
        let cfg = SoftRasterConfig::new(32, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let s = common::random_normalized(&mut rng, 4, 0.6);
            let tape = Tape::<f64>::new();
            let x = tape.input(Tensor::from_vec(s.coords().to_vec(), &[1, 4, 8]).unwrap());
            let analytic = tape.backward(soft_raster_var(x, &cfg).unwrap().sum()).unwrap().wrt(x).unwrap().to_vec();
            // 1e-5 normalized units is 8e-5 px; larger steps can straddle the clamp at 1
            let numeric = central_difference(
                |v| soft_raster(&NormalizedSketch::from_coords(v.to_vec()).unwrap(), &cfg).unwrap().pixels().iter().sum(),
                s.coords(),
                1e-5,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric, 1e-4));
        }
        (worst < 1e-3, format!("10 sketches, worst {worst:.2e}"))
    });
}

#[test]
fn criterion_03_schedule() {
    run(3, Some(Duration::from_secs(1)), || {
        let s = make_schedule(50, 0.4, 0.008).unwrap();
        let steep = make_schedule(50, 2.0, 0.008).unwrap();
        let a = s.alpha_bars();
        let decreasing = a.windows(2).all(|w| w[1] < w[0]);
        let above = (1..50).all(|t| s.alpha_bar(t) >= steep.alpha_bar(t));
        let f = |t: f64| (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powf(0.4);
        let closed = (0..=50).map(|t| (s.alpha_bar(t) - f(t as f64) / f(0.0)).abs()).fold(0.0, f64::max);
        let pass = decreasing && a[0] == 1.0 && a[50] < 1e-3 && above && closed < 1e-12;
        (pass, format!("abar_T {:.2e}, decreasing {decreasing}, above exp 2 {above}, closed form {closed:.1e}", a[50]))
    });
}

#[test]
fn criterion_04_denoiser_gradcheck() {
    run(4, Some(2 * MIN), || {
        let (input, weight) = common::denoiser_gradcheck(4, 3);
        (input < 1e-3 && weight < 1e-3, format!("input {input:.2e}, weight {weight:.2e}"))
    });
}

struct Oracle {
    target: NormalizedSketch,
    calls: Cell<usize>,
}

impl Denoiser for Oracle {
    type Cond = ();
    fn n_strokes(&self) -> usize {
        self.target.n_strokes()
    }
    fn encode(&self, _: &RasterGrid) -> Result<()> {
        Ok(())
    }
    fn predict(&self, _: &NormalizedSketch, _: usize, _: Option<&()>) -> Result<NormalizedSketch> {
        self.calls.set(self.calls.get() + 1);
        Ok(self.target.clone())
    }
}

#[test]
fn criterion_05_oracle_sampler() {
    run(5, Some(Duration::from_secs(5)), || {
        let o = Oracle {
            target: NormalizedSketch::from_coords(gaussian(32 * 8, &mut ChaCha8Rng::seed_from_u64(5))).unwrap(),
            calls: Cell::new(0),
        };
        let want = o.target.denormalize(Canvas::default());
        let sched = NoiseSchedule::default();
        let mut ok = true;
        for scale in [0.0, 0.5, 1.0, 2.5, 7.5] {
            let cfg = SamplerConfig { guidance_scale: scale, apply_refinement: false, seed: 9, ..Default::default() };
            let out = sample(&o, None::<&Oracle>, &RasterGrid::zeros(64, 64), &cfg, &sched, Canvas::default()).unwrap();
            ok &= out == want;
        }
        (ok, format!("5 guidance scales, exact match {ok}"))
    });
}

/// Affine stub with different conditional and unconditional slopes.
struct Stub;

impl Denoiser for Stub {
    type Cond = ();
    fn n_strokes(&self) -> usize {
        1
    }
    fn encode(&self, _: &RasterGrid) -> Result<()> {
        Ok(())
    }
    fn predict(&self, s: &NormalizedSketch, t: usize, c: Option<&()>) -> Result<NormalizedSketch> {
        let (k, b) = if c.is_some() { (0.8, 0.1) } else { (-0.4, 0.02) };
        NormalizedSketch::from_coords(s.coords().iter().map(|v| k * v + b * t as f64).collect())
    }
}

#[test]
fn criterion_06_cfg_algebra() {
    run(6, Some(Duration::from_secs(1)), || {
        let s = NormalizedSketch::from_coords((0..8).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let t = 3;
        let mut worst: f64 = 0.0;
        for (scale, k, b) in [(1.0, 0.8, 0.1), (0.0, -0.4, 0.02), (2.5, -0.4 + 2.5 * 1.2, 0.02 + 2.5 * 0.08)] {
            let out = cfg_predict(&Stub, &s, t, &(), scale).unwrap();
            for (o, v) in out.coords().iter().zip(s.coords()) {
                worst = worst.max((o - (k * v + b * t as f64)).abs());
            }
        }
        (worst < 1e-6, format!("worst deviation {worst:.1e}"))
    });
}

#[test]
fn criterion_07_apportionment_and_balance() {
    run(7, Some(MIN), || {
        let uniform = AttentionMask::new(32, 32, vec![1.0; 32 * 32], (0..32 * 32).map(|i| (4..28).contains(&(i / 32)) && (4..28).contains(&(i % 32))).collect()).unwrap();
        let p = partition_regions(&uniform, 6, 0).unwrap();
        let hand = allocate_points(&p, &uniform, 32).unwrap() == vec![6, 6, 6, 6, 4, 4]
            && allocate_from_means(&[0.9, 0.1], 4).unwrap() == vec![3, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        let mut bounded = true;
        for run in 0..20 {
            let am = common::random_mask(&mut rng, 64);
            let total = am.foreground_count();
            let sizes = partition_regions(&am, 6, run).unwrap().sizes();
            let (lo, hi) = balance_bounds(total, 6);
            let target = total as f64 / 6.0;
            bounded &= sizes.iter().all(|&s| s >= lo && s <= hi);
            // exact integer form of |s - total/k| <= 10% of total/k
            bounded &= sizes.iter().all(|&s| 10 * (s * 6).abs_diff(total) <= total);
            worst = sizes.iter().map(|&s| (s as f64 - target).abs() / target).fold(worst, f64::max);
        }
        (hand && bounded, format!("hand cases {hand}, worst region deviation {:.1}%", 100.0 * worst))
    });
}

fn segment(a: (f64, f64), b: (f64, f64)) -> Stroke {
    let p = |t: f64| Point::new(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
    Stroke::new(p(0.0), p(1.0 / 3.0), p(2.0 / 3.0), p(1.0))
}

#[test]
fn criterion_08_sorting() {
    run(8, Some(MIN), || {
        let cfg = SortConfig::default();
        let square = AttentionMask::new(64, 64, vec![0.0; 64 * 64], (0..64 * 64).map(|i| (16..48).contains(&(i / 64)) && (16..48).contains(&(i % 64))).collect()).unwrap();
        let s = Sketch::new(vec![segment((100.0, 128.0), (156.0, 128.0)), segment((70.0, 64.0), (186.0, 64.0))], Canvas::default());
        let contour_first = sort_strokes(&s, &square, &cfg).unwrap() == vec![1, 0];

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut permutation, mut invariant) = (true, true);
        for run in 0..10 {
            let am = common::random_mask(&mut rng, 64);
            let strokes: Vec<Stroke> = (0..16)
                .map(|_| {
                    let p = Point::new(rng.random_range(20.0..236.0), rng.random_range(20.0..236.0));
                    let mut q = || Point::new(p.x + rng.random_range(-30.0..30.0), p.y + rng.random_range(-30.0..30.0));
                    Stroke::new(p, q(), q(), q())
                })
                .collect();
            let s = Sketch::new(strokes, Canvas::default());
            let order = sort_strokes(&s, &am, &cfg).unwrap();
            let mut seen = order.clone();
            seen.sort_unstable();
            permutation &= seen == (0..16).collect::<Vec<_>>();
            let mut shuffle: Vec<usize> = (0..16).collect();
            let mut r = rng_for(run, "shuffle", 0);
            for i in (1..16).rev() {
                shuffle.swap(i, r.random_range(0..=i));
            }
            let shuffled = s.permuted(&shuffle);
            invariant &= shuffled.permuted(&sort_strokes(&shuffled, &am, &cfg).unwrap()) == s.permuted(&order);
        }
        let pass = contour_first && permutation && invariant;
        (pass, format!("permutation {permutation}, contour first {contour_first}, input-order invariant {invariant}"))
    });
}

#[test]
fn criterion_09_round_trips() {
    run(9, Some(MIN), || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut p = || Point::new(rng.random_range(-20.0..276.0), rng.random_range(-20.0..276.0));
            let s = Sketch::new((0..32).map(|_| Stroke::new(p(), p(), p(), p())).collect(), Canvas::default());
            worst = worst.max(from_svg(&to_svg(&s, 2.0)).unwrap().max_coord_diff(&s));
        }
        let (gen, out, again) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_toy(gen.path(), &ToyConfig { n_samples: 20, ..Default::default() }, 9).unwrap();
        let exported = export(&m, out.path()).unwrap();
        let back = ingest(out.path(), again.path(), 32).unwrap();
        let same = back.rejected.is_empty() && back.manifest.same_content(&m) && exported.same_content(&m);
        (worst < 1e-6 && same, format!("100 sketches, worst {worst:.1e}; manifests identical {same}"))
    });
}

const TOY_SEED: u64 = 7;

fn toys(range: std::ops::Range<usize>) -> Vec<SketchSample> {
    range.map(|i| toy_sample(i, &ToyConfig::default(), TOY_SEED).unwrap()).collect()
}

struct ToyRun {
    model: DenoiserModel<f32>,
    logs: Vec<StepLog>,
    elapsed: Duration,
}

/// The 2000-step toy training run, trained once and shared.
fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let mut model = DenoiserModel::new(DenoiserConfig { d_model: 64, n_layers: 4, ..Default::default() }, 1).unwrap();
        let cfg = TrainConfig { batch: 16, steps: 2000, lr: 1e-3, ..Default::default() };
        let logs = train(&mut model, &toys(0..200), &cfg, &NoiseSchedule::default(), TrainOutputs::default()).unwrap();
        ToyRun { model, logs, elapsed: start.elapsed() }
    })
}

const HELD_OUT: std::ops::Range<usize> = 200..216;

fn sample_no_refine(model: &DenoiserModel<f32>, s: &SketchSample, seed: u64) -> Sketch {
    let cfg = SamplerConfig { guidance_scale: 2.5, apply_refinement: false, seed, ..Default::default() };
    sample(model, None::<&DenoiserModel<f32>>, &s.cond_image, &cfg, &NoiseSchedule::default(), Canvas::default()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[test]
fn criterion_10_toy_convergence() {
    run(10, Some(30 * MIN), || {
        let r = toy_run();
        let mean = |l: &[StepLog]| l.iter().map(|e| e.loss).sum::<f64>() / l.len() as f64;
        let (first, last) = (mean(&r.logs[..100]), mean(&r.logs[r.logs.len() - 100..]));
        let ratio = last / first;

        let held = toys(HELD_OUT);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut model_d, mut noise_d) = (Vec::new(), Vec::new());
        for (i, s) in held.iter().enumerate() {
            let out = sample_no_refine(&r.model, s, i as u64);
            model_d.push(chamfer(&out, &s.sketch, CHAMFER_SAMPLES).unwrap());
            let noise = NormalizedSketch::from_coords(gaussian(32 * 8, &mut rng)).unwrap().denormalize(Canvas::default());
            noise_d.push(chamfer(&noise, &s.sketch, CHAMFER_SAMPLES).unwrap());
        }
        let (m, b) = (median(model_d), median(noise_d));
        let pass = ratio <= 0.3 && m <= 0.5 * b;
        let detail = format!(
            "loss {first:.4} -> {last:.4}, ratio {ratio:.3} (need <= 0.30); median chamfer {m:.4} vs noise {b:.4}, ratio {:.3} (need <= 0.50); training {:.0?}",
            m / b,
            r.elapsed
        );
        (pass, detail)
    });
}

#[test]
fn criterion_11_refinement_effect() {
    let base = {
        let _guard = serial();
        &toy_run().model
    };
    run(11, Some(10 * MIN), || {
        let sched = NoiseSchedule::default();
        let mut refiner = base.clone_for_refinement();
        let cfg = RefineConfig { source: RefineSource::GaussianPerturb, steps: 500, ..Default::default() };
        train_refiner(base, &mut refiner, &toys(0..200), &cfg, &SamplerConfig::default(), &sched, None).unwrap();
        let scales = raster_configs(&DEFAULT_SCALES).unwrap();
        let (mut plain, mut refined) = (0.0, 0.0);
        let held = toys(HELD_OUT);
        for (i, s) in held.iter().enumerate() {
            let truth = s.sketch.normalize();
            let out = sample_no_refine(base, s, 100 + i as u64).normalize();
            let cond = refiner.model().encode_condition(&s.cond_image).unwrap();
            let cleaned = refiner.refine(&out, Some(&cond)).unwrap();
            plain += loss_raster_value(&out, &truth, &scales).unwrap() / held.len() as f64;
            refined += loss_raster_value(&cleaned, &truth, &scales).unwrap() / held.len() as f64;
        }
        (refined <= plain, format!("raster loss refined {refined:.5} vs unrefined {plain:.5}"))
    });
}

#[test]
fn criterion_12_latency() {
    let m = DenoiserModel::<f32>::new(DenoiserConfig::default(), 12).unwrap();
    let refiner = m.clone_for_refinement();
    let image = toys(0..1).remove(0).cond_image;
    let sched = NoiseSchedule::default();
    let go = || sample(&m, Some(&refiner), &image, &SamplerConfig::default(), &sched, Canvas::default()).unwrap();
    let _guard = serial();
    go();
    let start = Instant::now();
    go();
    let elapsed = start.elapsed();
    drop(_guard);
    let under_one = elapsed < Duration::from_secs(1);
    report(
        12,
        elapsed < Duration::from_secs(2),
        None,
        elapsed,
        format!("50 steps + refinement, default config; under 1 s {under_one}, tolerance 2 s"),
    );
}

#[test]
fn criterion_13_cfg_dropout_rate() {
    run(13, Some(5 * MIN), || {
        let mut model = DenoiserModel::<f32>::new(DenoiserConfig::tiny(16, 1), 13).unwrap();
        let cfg = TrainConfig { batch: 1, steps: 5000, lr: 1e-3, raster_scales: vec![(16, 1.5)], seed: 13, ..Default::default() };
        let mut sink = Vec::new();
        train(&mut model, &toys(0..8), &cfg, &NoiseSchedule::default(), TrainOutputs { log: Some(&mut sink), checkpoint_dir: None })
            .unwrap();
        let logged: Vec<StepLog> = String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let rate = logged.iter().filter(|e| e.cfg_dropped).count() as f64 / logged.len() as f64;
        (logged.len() == 5000 && (rate - 0.1).abs() <= 0.02, format!("{} logged steps, null-condition rate {rate:.4}", logged.len()))
    });
}
