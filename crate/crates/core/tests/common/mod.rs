// Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsd_core::denoiser::{DenoiserConfig, DenoiserModel, COND_RES};
use vsd_core::strokeops::AttentionMask;
use vsd_core::training::{loss_points, loss_raster, raster_configs, DEFAULT_SCALES};
use vsd_core::NormalizedSketch;
use vsd_tensor::gradcheck::relative_error;
use vsd_tensor::{Tape, Tensor};

/// Short random strokes in normalized coordinates.
pub fn random_normalized(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> NormalizedSketch {
    let mut coords = Vec::with_capacity(n * 8);
    for _ in 0..n {
        let (x, y) = (rng.random_range(-1.6..1.6), rng.random_range(-1.6..1.6));
        coords.extend([x, y]);
        for _ in 0..3 {
            coords.extend([x + rng.random_range(-spread..spread), y + rng.random_range(-spread..spread)]);
        }
    }
    NormalizedSketch::from_coords(coords).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..COND_RES * COND_RES).map(|_| rng.random::<f64>()).collect()
}

/// Inputs of one end-to-end loss evaluation.
#[derive(Clone)]
pub struct LossCase {
    pub s_t: Vec<f64>,
    pub target: Vec<f64>,
    pub image: Vec<f64>,
    pub t: usize,
    pub lambda: f64,
}

impl LossCase {
    pub fn random(n_strokes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LossCase {
            s_t: random_normalized(&mut rng, n_strokes, 0.8).into_coords(),
            target: random_normalized(&mut rng, n_strokes, 0.5).into_coords(),
            image: random_image(&mut rng),
            t: rng.random_range(1..=50),
            lambda: 0.2,
        }
    }

    /// Total loss and, optionally, its gradients w.r.t. the input coordinates
    /// and every parameter (in store order).
    pub fn eval(&self, model: &DenoiserModel<f64>, grads: bool) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let n = model.config().n_strokes;
        let scales = raster_configs(&DEFAULT_SCALES).unwrap();
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_vec(self.s_t.clone(), &[1, n, 8]).unwrap());
        let target = tape.constant(Tensor::from_vec(self.target.clone(), &[1, n, 8]).unwrap());
        let img = tape.constant(Tensor::from_vec(self.image.clone(), &[1, COND_RES, COND_RES]).unwrap());
        let cond = model.encode_var(&tape, img).unwrap();
        let pred = model.forward(&tape, x, &[self.t], cond, None).unwrap();
        let loss = loss_points(pred, target)
            .unwrap()
            .add(loss_raster(pred, target, &scales).unwrap().scale(self.lambda))
            .unwrap();
        let value = loss.value().item();
        if !grads {
            return (value, vec![], vec![]);
        }
        let g = tape.backward(loss).unwrap();
        let dx = g.wrt(x).unwrap().to_vec();
        let store = model.store();
        let mut dp: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).data().len()]).collect();
        for (id, v) in g.params() {
            dp[id.index()] = v.to_vec();
        }
        (value, dx, dp)
    }
}

/// Relative errors of the tape gradient against central differences for
/// `picks` random input coordinates and `picks` random weights of a tiny
/// f64 denoiser. Returns (worst input error, worst weight error).
pub fn denoiser_gradcheck(seed: u64, picks: usize) -> (f64, f64) {
    let model = DenoiserModel::<f64>::new(DenoiserConfig::tiny(16, 2), seed).unwrap();
    let case = LossCase::random(model.config().n_strokes, seed + 1);
    let (_, dx, dp) = case.eval(&model, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let h = 1e-6;
    let mut worst_x: f64 = 0.0;
    for _ in 0..picks {
        let k = rng.random_range(0..case.s_t.len());
        let at = |delta: f64| {
            let mut c = case.clone();
            c.s_t[k] += delta;
            c.eval(&model, false).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst_x = worst_x.max(relative_error(dx[k], fd, 1e-6));
    }
    let ids: Vec<_> = model.store().ids().collect();
    let mut worst_w: f64 = 0.0;
    for _ in 0..picks {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..model.store().value(id).data().len());
        let at = |delta: f64| {
            let mut m = model.clone();
            let mut v = m.store().value(id).clone();
            v.data_mut()[k] += delta;
            m.store_mut().set_value(id, v).unwrap();
            case.eval(&m, false).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst_w = worst_w.max(relative_error(dp[id.index()][k], fd, 1e-6));
    }
    (worst_x, worst_w)
}

/// Union of a few random discs on a `res`-square grid, with random smooth attention.
pub fn random_mask(rng: &mut ChaCha8Rng, res: usize) -> AttentionMask {
    let r = res as f64;
    let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(0.3 * r..0.7 * r), rng.random_range(0.3 * r..0.7 * r), rng.random_range(0.12 * r..0.3 * r)))
        .collect();
    let (ax, ay) = (rng.random_range(0.0..r), rng.random_range(0.0..r));
    let mut mask = vec![false; res * res];
    let mut att = vec![0.0; res * res];
    for i in 0..res {
        for j in 0..res {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            mask[i * res + j] = discs.iter().any(|&(cx, cy, rad)| (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad);
            att[i * res + j] = (-((x - ax).powi(2) + (y - ay).powi(2)) / (0.1 * r * r)).exp();
        }
    }
    AttentionMask::new(res, res, att, mask).unwrap()
}

