mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsd_core::dataset::{toy_sample, SketchSample, ToyConfig};
use vsd_core::denoiser::{DenoiserConfig, DenoiserModel};
use vsd_core::diffusion::{gaussian, NoiseSchedule, SamplerConfig};
use vsd_core::training::{
    loss_points, loss_points_value, loss_raster, loss_raster_value, raster_configs, train, train_refiner, RefineConfig,
    RefineSource, StepLog, TrainConfig, TrainOutputs,
};
use vsd_core::NormalizedSketch;
use vsd_tensor::gradcheck::{central_difference, max_relative_error};
use vsd_tensor::{Tape, Tensor};

fn toys(n: usize) -> Vec<SketchSample> {
    (0..n).map(|i| toy_sample(i, &ToyConfig::default(), 3).unwrap()).collect()
}

fn tiny_model(seed: u64) -> DenoiserModel<f32> {
    DenoiserModel::new(DenoiserConfig::tiny(16, 1), seed).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { batch: 2, steps, lr: 1e-3, raster_scales: vec![(16, 1.5)], ..Default::default() }
}

fn random(seed: u64, n: usize) -> NormalizedSketch {
    NormalizedSketch::from_coords(gaussian(n * 8, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
}

#[test]
fn points_loss_values() {
    let a = random(1, 4);
    assert_eq!(loss_points_value(&a, &a).unwrap(), 0.0);
    let shifted = NormalizedSketch::from_coords(a.coords().iter().map(|v| v + 0.5).collect()).unwrap();
    assert!((loss_points_value(&shifted, &a).unwrap() - 0.5).abs() < 1e-12);
    assert!(loss_points_value(&a, &random(2, 3)).is_err());
}

#[test]
fn points_loss_gradient_is_sign_over_count() {
    let (p, t) = (random(3, 4), random(4, 4));
    let tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_vec(p.coords().to_vec(), &[1, 4, 8]).unwrap());
    let y = tape.constant(Tensor::from_vec(t.coords().to_vec(), &[1, 4, 8]).unwrap());
    let g = tape.backward(loss_points(x, y).unwrap()).unwrap().wrt(x).unwrap().to_vec();
    let count = 32.0;
    for ((&gi, &pi), &ti) in g.iter().zip(p.coords()).zip(t.coords()) {
        assert!((gi - (pi - ti).signum() / count).abs() < 1e-15);
    }
    let numeric = central_difference(
        |v| loss_points_value(&NormalizedSketch::from_coords(v.to_vec()).unwrap(), &t).unwrap(),
        p.coords(),
        1e-6,
    );
    assert!(max_relative_error(&g, &numeric, 1e-9) < 1e-6);
}

#[test]
fn raster_loss_is_symmetric_and_zero_on_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (common::random_normalized(&mut rng, 6, 0.6), common::random_normalized(&mut rng, 6, 0.6));
    let scales = raster_configs(&[(16, 1.5), (32, 2.5), (64, 4.0)]).unwrap();
    assert_eq!(loss_raster_value(&a, &a, &scales).unwrap(), 0.0);
    let (ab, ba) = (loss_raster_value(&a, &b, &scales).unwrap(), loss_raster_value(&b, &a, &scales).unwrap());
    assert!(ab > 0.0);
    assert!((ab - ba).abs() < 1e-12);
    assert!(raster_configs(&[]).is_err());
}

#[test]
fn raster_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scales = raster_configs(&[(32, 4.0)]).unwrap();
    for _ in 0..3 {
        let (p, t) = (common::random_normalized(&mut rng, 4, 0.6), common::random_normalized(&mut rng, 4, 0.6));
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(p.coords().to_vec(), &[1, 4, 8]).unwrap());
        let y = tape.constant(Tensor::from_vec(t.coords().to_vec(), &[1, 4, 8]).unwrap());
        let g = tape.backward(loss_raster(x, y, &scales).unwrap()).unwrap().wrt(x).unwrap().to_vec();
        let numeric = central_difference(
            |v| loss_raster_value(&NormalizedSketch::from_coords(v.to_vec()).unwrap(), &t, &scales).unwrap(),
            p.coords(),
            1e-5,
        );
        let err = max_relative_error(&g, &numeric, 1e-6);
        assert!(err < 1e-3, "{err}");
    }
}

#[test]
fn stroke_order_matters_to_the_points_loss() {
    let s = toys(1).remove(0).sketch;
    let n = s.normalize();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.rotate_left(3);
    let shuffled = s.permuted(&order).normalize();
    assert!(loss_points_value(&n, &shuffled).unwrap() > 1e-3);
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let mut m = tiny_model(1);
    let before = m.clone();
    let logs = train(&mut m, &toys(3), &quick(0), &NoiseSchedule::default(), TrainOutputs::default()).unwrap();
    assert!(logs.is_empty());
    assert!(m.store().values_equal(before.store()));
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let data = toys(4);
    let run = |seed: u64| {
        let mut m = tiny_model(2);
        let cfg = TrainConfig { seed, ..quick(6) };
        let logs = train(&mut m, &data, &cfg, &NoiseSchedule::default(), TrainOutputs::default()).unwrap();
        (logs, m)
    };
    let (a, ma) = run(0);
    let (b, mb) = run(0);
    let bits = |l: &[StepLog]| l.iter().map(|e| (e.loss.to_bits(), e.points.to_bits(), e.raster.to_bits(), e.cfg_dropped)).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(ma.store().values_equal(mb.store()));
    let (c, _) = run(1);
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn logged_total_is_points_plus_lambda_raster() {
    let mut m = tiny_model(3);
    let mut sink = Vec::new();
    let cfg = TrainConfig { lambda_raster: 0.2, ..quick(8) };
    let logs = train(&mut m, &toys(4), &cfg, &NoiseSchedule::default(), TrainOutputs { log: Some(&mut sink), checkpoint_dir: None }).unwrap();
    let parsed: Vec<StepLog> = String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, logs);
    for e in &parsed {
        assert!((e.loss - (e.points + 0.2 * e.raster)).abs() < 1e-6, "{e:?}");
    }
}

#[test]
fn training_reduces_the_loss_on_a_single_sample() {
    let mut m = tiny_model(4);
    let cfg = TrainConfig { batch: 1, steps: 200, lr: 3e-3, cfg_dropout: 0.0, raster_scales: vec![(16, 1.5)], ..Default::default() };
    let logs = train(&mut m, &toys(1), &cfg, &NoiseSchedule::default(), TrainOutputs::default()).unwrap();
    let mean = |l: &[StepLog]| l.iter().map(|e| e.loss).sum::<f64>() / l.len() as f64;
    assert!(mean(&logs[180..]) < 0.7 * mean(&logs[..20]));
}

#[test]
fn checkpoints_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(5);
    let cfg = TrainConfig { checkpoint_every: 2, ..quick(5) };
    train(&mut m, &toys(2), &cfg, &NoiseSchedule::default(), TrainOutputs { log: None, checkpoint_dir: Some(dir.path().to_path_buf()) })
        .unwrap();
    for name in ["step-000002.vsdc", "step-000004.vsdc", "final.vsdc"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let back = DenoiserModel::<f32>::load(dir.path().join("final.vsdc")).unwrap();
    assert!(back.store().values_equal(m.store()));
}

fn perturb_cfg(steps: usize) -> RefineConfig {
    RefineConfig {
        steps,
        lr: 1e-3,
        batch: 2,
        source: RefineSource::GaussianPerturb,
        perturb_sigma: 0.05,
        raster_scales: vec![(16, 1.5)],
        ..Default::default()
    }
}

#[test]
fn refiner_training_never_touches_the_base() {
    let base = tiny_model(6);
    let before = base.clone();
    let mut refiner = base.clone_for_refinement();
    let sched = NoiseSchedule::default();
    train_refiner(&base, &mut refiner, &toys(3), &perturb_cfg(4), &SamplerConfig::default(), &sched, None).unwrap();
    assert!(base.store().values_equal(before.store()));
    assert!(!refiner.model().store().values_equal(base.store()));

    let mut idle = base.clone_for_refinement();
    let logs = train_refiner(&base, &mut idle, &toys(3), &perturb_cfg(0), &SamplerConfig::default(), &sched, None).unwrap();
    assert!(logs.is_empty());
    assert!(idle.model().store().values_equal(base.store()));
}

#[test]
fn refiner_from_sampler_outputs_runs() {
    let base = tiny_model(7);
    let mut refiner = base.clone_for_refinement();
    let cfg = RefineConfig { source: RefineSource::SamplerOutputs, ..perturb_cfg(2) };
    let sched = vsd_core::diffusion::make_schedule(50, 0.4, 0.008).unwrap();
    let logs = train_refiner(&base, &mut refiner, &toys(2), &cfg, &SamplerConfig::default(), &sched, None).unwrap();
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.raster.is_finite() && l.raster >= 0.0));
}

#[test]
fn refiner_improves_clean_inputs() {
    let base = tiny_model(8);
    let data = toys(4);
    let sched = NoiseSchedule::default();
    let scales = raster_configs(&[(16, 1.5)]).unwrap();
    let score = |r: &vsd_core::denoiser::Refiner<f32>| {
        data.iter()
            .map(|s| {
                let target = s.sketch.normalize();
                let cond = r.model().encode_condition(&s.cond_image).unwrap();
                loss_raster_value(&r.refine(&target, Some(&cond)).unwrap(), &target, &scales).unwrap()
            })
            .sum::<f64>()
    };
    let mut refiner = base.clone_for_refinement();
    let before = score(&refiner);
    let cfg = RefineConfig { perturb_sigma: 0.01, steps: 150, batch: 4, ..perturb_cfg(0) };
    train_refiner(&base, &mut refiner, &data, &cfg, &SamplerConfig::default(), &sched, None).unwrap();
    let after = score(&refiner);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut m = tiny_model(9);
    let sched = NoiseSchedule::default();
    for cfg in [TrainConfig { cfg_dropout: 1.5, ..quick(1) }, TrainConfig { lambda_raster: -1.0, ..quick(1) }] {
        assert!(train(&mut m, &toys(1), &cfg, &sched, TrainOutputs::default()).is_err());
    }
    assert!(train(&mut m, &[], &quick(1), &sched, TrainOutputs::default()).is_err());
    let short = vsd_core::diffusion::make_schedule(10, 0.4, 0.008).unwrap();
    assert!(train(&mut m, &toys(1), &quick(1), &short, TrainOutputs::default()).is_err());
}
