//! Fidelity metrics: stroke-space Chamfer distance, raster MSE and MS-SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Point, Sketch, MODEL_RANGE};
use crate::rasterizer::{hard_raster, RasterGrid};

pub const EVAL_RES: usize = 64;
/// Stroke width of the evaluation rasters, in pixels at [`EVAL_RES`].
pub const EVAL_STROKE_PX: f64 = 1.0;
pub const CHAMFER_SAMPLES: usize = 16;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Polyline samples of every stroke, in normalized model coordinates.
fn pooled_points(s: &Sketch, samples_per_stroke: usize) -> Result<Vec<Point>> {
    if s.strokes.is_empty() {
        return invalid("chamfer needs nonempty sketches");
    }
    let (sx, sy) = (2.0 * MODEL_RANGE / s.canvas.width, 2.0 * MODEL_RANGE / s.canvas.height);
    let mut pts = Vec::with_capacity(s.len() * samples_per_stroke);
    for st in &s.strokes {
        for p in st.sample_polyline(samples_per_stroke)? {
            pts.push(Point::new(p.x * sx - MODEL_RANGE, p.y * sy - MODEL_RANGE));
        }
    }
    Ok(pts)
}

fn mean_nearest(from: &[Point], to: &[Point]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| (p.x - q.x).powi(2) + (p.y - q.y).powi(2)).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance between pooled polyline samples, in normalized units.
pub fn chamfer(a: &Sketch, b: &Sketch, samples_per_stroke: usize) -> Result<f64> {
    let (pa, pb) = (pooled_points(a, samples_per_stroke)?, pooled_points(b, samples_per_stroke)?);
    Ok(0.5 * (mean_nearest(&pa, &pb) + mean_nearest(&pb, &pa)))
}

pub fn raster_mse(a: &RasterGrid, b: &RasterGrid) -> Result<f64> {
    same_res(a, b)?;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels().len() as f64)
}

fn same_res(a: &RasterGrid, b: &RasterGrid) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return invalid(format!("resolution mismatch: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

/// Scales used for a given side length: as many of the standard five as keep
/// the coarsest level at least one window wide.
pub fn ms_ssim_scales(side: usize) -> usize {
    let mut m = 1;
    while m < MS_SSIM_WEIGHTS.len() && side >> m >= SSIM_WINDOW {
        m += 1;
    }
    m
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _, _) = filter(a, h, w, k);
    let (mu_b, _, _) = filter(b, h, w, k);
    let (saa, _, _) = filter(&prod(a, a), h, w, k);
    let (sbb, _, _) = filter(&prod(b, b), h, w, k);
    let (sab, _, _) = filter(&prod(a, b), h, w, k);
    let n = mu_a.len() as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / n, cs / n)
}

fn halve(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let at = |y: usize, x: usize| img[y * w + x];
            out[i * ow + j] = 0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM of two images in [0, 1]. Below 176 px the scale count is
/// reduced ([`ms_ssim_scales`]) and the remaining weights renormalized.
/// Negative per-scale terms are clamped to 0, so the result lies in [0, 1].
pub fn ms_ssim(a: &RasterGrid, b: &RasterGrid) -> Result<f64> {
    same_res(a, b)?;
    let side = a.height().min(a.width());
    if side < 32 {
        return invalid(format!("ms_ssim needs at least 32x32, got {}x{}", a.height(), a.width()));
    }
    let m = ms_ssim_scales(side);
    let wsum: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let k = gaussian_window();
    let (mut x, mut y) = (a.pixels().to_vec(), b.pixels().to_vec());
    let (mut h, mut w) = (a.height(), a.width());
    let mut score = 1.0;
    for (j, weight) in MS_SSIM_WEIGHTS[..m].iter().enumerate() {
        let (lum, cs) = ssim_terms(&x, &y, h, w, &k);
        let term = if j + 1 == m { lum * cs } else { cs };
        score *= term.max(0.0).powf(weight / wsum);
        if j + 1 < m {
            (x, _, _) = halve(&x, h, w);
            (y, h, w) = halve(&y, h, w);
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Hard raster used by every raster metric.
pub fn eval_raster(s: &Sketch) -> Result<RasterGrid> {
    hard_raster(s, EVAL_RES, EVAL_RES, EVAL_STROKE_PX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub chamfer: f64,
    pub raster_mse: f64,
    pub ms_ssim: f64,
    /// MS-SSIM between the output raster and the conditioning image.
    pub image_ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub chamfer: f64,
    pub raster_mse: f64,
    pub ms_ssim: f64,
    pub image_ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub samples: Vec<SampleMetrics>,
    pub mean: Aggregate,
    pub median: Aggregate,
}

/// Order-independent mean: values are summed in sorted order.
pub fn mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn aggregate(s: &[SampleMetrics], f: fn(&[f64]) -> f64) -> Aggregate {
    let col = |g: fn(&SampleMetrics) -> f64| f(&s.iter().map(g).collect::<Vec<_>>());
    Aggregate {
        chamfer: col(|m| m.chamfer),
        raster_mse: col(|m| m.raster_mse),
        ms_ssim: col(|m| m.ms_ssim),
        image_ms_ssim: col(|m| m.image_ms_ssim),
    }
}

pub fn sample_metrics(id: &str, output: &Sketch, truth: &Sketch, cond_image: &RasterGrid) -> Result<SampleMetrics> {
    let (ro, rt) = (eval_raster(output)?, eval_raster(truth)?);
    let image = if cond_image.height() == EVAL_RES && cond_image.width() == EVAL_RES {
        cond_image.clone()
    } else {
        crate::rasterizer::resize(cond_image, EVAL_RES)
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        chamfer: chamfer(output, truth, CHAMFER_SAMPLES)?,
        raster_mse: raster_mse(&ro, &rt)?,
        ms_ssim: ms_ssim(&ro, &rt)?,
        image_ms_ssim: ms_ssim(&ro, &image)?,
    })
}

/// Per-sample and aggregate metrics over aligned lists.
pub fn evaluate(ids: &[String], outputs: &[Sketch], truths: &[Sketch], cond_images: &[RasterGrid]) -> Result<EvalReport> {
    let n = ids.len();
    if outputs.len() != n || truths.len() != n || cond_images.len() != n {
        return invalid(format!(
            "misaligned evaluation lists: {n} ids, {} outputs, {} ground truths, {} images",
            outputs.len(),
            truths.len(),
            cond_images.len()
        ));
    }
    if n == 0 {
        return invalid("nothing to evaluate");
    }
    let samples = (0..n).map(|i| sample_metrics(&ids[i], &outputs[i], &truths[i], &cond_images[i])).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { ids: ids.to_vec(), mean: aggregate(&samples, mean), median: aggregate(&samples, median), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_counts() {
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(32), 2);
        assert_eq!(ms_ssim_scales(176), 5);
        assert_eq!(ms_ssim_scales(175), 4);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
