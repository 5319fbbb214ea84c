//! Soft (differentiable) and hard (binary) rasterization of sketches, plus
//! 8-bit grayscale PNG I/O for raster grids.
//!
//! The soft rasterizer places a Gaussian of width `sigma` at every curve
//! sample and combines overlapping samples with a temperature-scaled
//! smooth maximum, `I = τ·ln(1 + Σ_s (exp(g_s/τ) − 1))`, clamped to 1. A lone
//! sample reproduces its Gaussian exactly and samples with zero response
//! contribute nothing, so the empty sketch renders to zero.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vsd_tensor::{CustomBackward, Scalar, Tensor, Var};

use crate::error::{invalid, Result, VsdError};
use crate::geometry::{bernstein, Canvas, NormalizedSketch, Point, Sketch, Stroke, MODEL_RANGE, STROKE_DIM};

/// Smallest supported smooth-max temperature; below it `exp(1/τ)` overflows f64.
pub const MIN_SMOOTHMAX_TEMP: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl RasterGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        RasterGrid { height, width, pixels: vec![0.0; height * width] }
    }

    /// Row-major pixels; every value must lie in `[0, 1]`.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return invalid(format!("{height}x{width} grid needs {} pixels, got {}", height * width, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {bad} outside [0, 1]"));
        }
        Ok(RasterGrid { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RasterGrid {
        RasterGrid { height: self.height, width: self.width, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    /// Average-pools non-overlapping `factor × factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<RasterGrid> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return invalid(format!("cannot box-downsample {}x{} by {factor}", self.height, self.width));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut pixels = vec![0.0; h * w];
        for (i, row) in pixels.chunks_exact_mut(w).enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                let mut total = 0.0;
                for di in 0..factor {
                    let base = (i * factor + di) * self.width + j * factor;
                    total += self.pixels[base..base + factor].iter().sum::<f64>();
                }
                *out = (total * norm).clamp(0.0, 1.0);
            }
        }
        Ok(RasterGrid { height: h, width: w, pixels })
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(self.pixels.iter().map(|&v| F::from_f64(v)).collect(), &[self.height, self.width])
            .expect("grid shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftRasterConfig {
    pub height: usize,
    pub width: usize,
    /// Gaussian width in pixels.
    pub sigma: f64,
    pub samples_per_stroke: usize,
    /// Cutoff radius in units of `sigma`.
    pub window_radius: f64,
    pub smoothmax_temp: f64,
}

impl Default for SoftRasterConfig {
    fn default() -> Self {
        SoftRasterConfig {
            height: 64,
            width: 64,
            sigma: 4.0,
            samples_per_stroke: 16,
            window_radius: 6.0,
            smoothmax_temp: 0.05,
        }
    }
}

impl SoftRasterConfig {
    pub fn new(res: usize, sigma: f64) -> Self {
        SoftRasterConfig { height: res, width: res, sigma, ..Default::default() }
    }

    /// Display settings: 64 samples per stroke.
    pub fn display(res: usize, sigma: f64) -> Self {
        SoftRasterConfig { samples_per_stroke: 64, ..Self::new(res, sigma) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return invalid("soft raster resolution must be positive");
        }
        if !(self.sigma > 0.0) {
            return invalid(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.samples_per_stroke < 2 {
            return invalid("samples_per_stroke must be >= 2");
        }
        if !(self.window_radius >= 3.0) {
            return invalid(format!("window_radius must be >= 3, got {}", self.window_radius));
        }
        if !(self.smoothmax_temp >= MIN_SMOOTHMAX_TEMP) {
            return invalid(format!("smoothmax_temp must be >= {MIN_SMOOTHMAX_TEMP}, got {}", self.smoothmax_temp));
        }
        Ok(())
    }
}

/// Branch-free `exp` that the compiler can vectorize. Relative error below
/// 1e-15 for |x| ≤ 700; inputs are clamped to that range.
#[inline(always)]
fn fast_exp(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-700.0).min(700.0);
    let k = x * std::f64::consts::LOG2_E + SHIFT;
    let n = k - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = k.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023);
    p * f64::from_bits(bits << 52)
}

/// One sample's square of influence: per-column Gaussian factors and, per row,
/// the column span inside the circular cutoff.
struct Window {
    j0: usize,
    ex: Vec<f64>,
    dx: Vec<f64>,
    rows: Vec<(usize, usize, usize, f64, f64)>, // (row, j_lo, j_hi excl, dy, ey)
}

impl Window {
    fn new() -> Self {
        Window { j0: 0, ex: Vec::new(), dx: Vec::new(), rows: Vec::new() }
    }

    /// Fills the window for the pixels within `radius` of `q` (pixel centres at +0.5).
    fn fill(&mut self, cfg: &SoftRasterConfig, q: Point, radius: f64, inv_2s2: f64) {
        let span = |c: f64, h: f64, n: usize| {
            let lo = (c - h - 0.5).ceil().max(0.0);
            let hi = (c + h - 0.5).floor().min(n as f64 - 1.0);
            (lo as isize, hi as isize)
        };
        self.ex.clear();
        self.dx.clear();
        self.rows.clear();
        let (j0, j1) = span(q.x, radius, cfg.width);
        let (i0, i1) = span(q.y, radius, cfg.height);
        if j1 < j0 || i1 < i0 {
            return;
        }
        self.j0 = j0 as usize;
        for j in j0..=j1 {
            let dx = j as f64 + 0.5 - q.x;
            self.dx.push(dx);
            self.ex.push(fast_exp(-dx * dx * inv_2s2));
        }
        let r2 = radius * radius;
        for i in i0..=i1 {
            let dy = i as f64 + 0.5 - q.y;
            let rem = r2 - dy * dy;
            if rem < 0.0 {
                continue;
            }
            let (lo, hi) = span(q.x, rem.sqrt(), cfg.width);
            let (lo, hi) = (lo.max(j0), hi.min(j1));
            if hi < lo {
                continue;
            }
            self.rows.push((i as usize, lo as usize - self.j0, hi as usize + 1 - self.j0, dy, fast_exp(-dy * dy * inv_2s2)));
        }
    }
}

struct SampleBasis {
    weights: Vec<[f64; 4]>,
}

impl SampleBasis {
    fn new(m: usize) -> Self {
        SampleBasis { weights: (0..m).map(|s| bernstein(s as f64 / (m - 1) as f64)).collect() }
    }
}

/// Control points of each stroke in raster pixel units.
fn control_points_px(coords: &[f64], cfg: &SoftRasterConfig) -> Vec<[Point; 4]> {
    let sx = cfg.width as f64 / (2.0 * MODEL_RANGE);
    let sy = cfg.height as f64 / (2.0 * MODEL_RANGE);
    coords
        .chunks_exact(STROKE_DIM)
        .map(|c| std::array::from_fn(|k| Point::new((c[2 * k] + MODEL_RANGE) * sx, (c[2 * k + 1] + MODEL_RANGE) * sy)))
        .collect()
}

fn sample_point(cps: &[Point; 4], w: &[f64; 4]) -> Point {
    let mut q = Point::default();
    for (p, w) in cps.iter().zip(w) {
        q.x += w * p.x;
        q.y += w * p.y;
    }
    q
}

/// Defines `$name` calling `$imp`, compiled a second time for AVX2 and
/// selected at runtime when the CPU supports it.
macro_rules! multiversion {
    ($name:ident, $imp:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) -> $ret {
                    $imp($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $imp($($arg),*)
        }
    };
}

multiversion!(soft_forward, soft_forward_impl, (coords: &[f64], cfg: &SoftRasterConfig, basis: &SampleBasis) -> (Vec<f64>, Vec<f64>));
multiversion!(
    soft_backward,
    soft_backward_impl,
    (coords: &[f64], cfg: &SoftRasterConfig, basis: &SampleBasis, acc: &[f64], grad_pixels: &[f64]) -> Vec<f64>
);

/// Returns (intensities, smooth-max accumulators) for one image.
#[inline(always)]
fn soft_forward_impl(coords: &[f64], cfg: &SoftRasterConfig, basis: &SampleBasis) -> (Vec<f64>, Vec<f64>) {
    let mut acc = vec![0.0; cfg.height * cfg.width];
    let radius = cfg.window_radius * cfg.sigma;
    let inv_2s2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let inv_tau = 1.0 / cfg.smoothmax_temp;
    let mut win = Window::new();
    for cps in control_points_px(coords, cfg) {
        for w in &basis.weights {
            win.fill(cfg, sample_point(&cps, w), radius, inv_2s2);
            for &(i, lo, hi, _, ey) in &win.rows {
                let base = i * cfg.width + win.j0;
                let eyt = ey * inv_tau;
                for (a, &ex) in acc[base + lo..base + hi].iter_mut().zip(&win.ex[lo..hi]) {
                    *a += fast_exp(eyt * ex) - 1.0;
                }
            }
        }
    }
    let pixels = acc.iter().map(|&a| (cfg.smoothmax_temp * a.ln_1p()).min(1.0)).collect();
    (pixels, acc)
}

/// Gradient w.r.t. the normalized coordinates of one image.
#[inline(always)]
fn soft_backward_impl(coords: &[f64], cfg: &SoftRasterConfig, basis: &SampleBasis, acc: &[f64], grad_pixels: &[f64]) -> Vec<f64> {
    let tau = cfg.smoothmax_temp;
    let adj: Vec<f64> = acc
        .iter()
        .zip(grad_pixels)
        .map(|(&a, &g)| if tau * a.ln_1p() < 1.0 { g / (1.0 + a) } else { 0.0 })
        .collect();
    let radius = cfg.window_radius * cfg.sigma;
    let inv_s2 = 1.0 / (cfg.sigma * cfg.sigma);
    let inv_2s2 = 0.5 * inv_s2;
    let inv_tau = 1.0 / tau;
    let sx = cfg.width as f64 / (2.0 * MODEL_RANGE);
    let sy = cfg.height as f64 / (2.0 * MODEL_RANGE);
    let mut grad = vec![0.0; coords.len()];
    let mut win = Window::new();
    let mut c = Vec::new();
    for (si, cps) in control_points_px(coords, cfg).iter().enumerate() {
        for w in &basis.weights {
            win.fill(cfg, sample_point(cps, w), radius, inv_2s2);
            let (mut gx, mut gy) = (0.0, 0.0);
            for &(i, lo, hi, dy, ey) in &win.rows {
                let base = i * cfg.width + win.j0;
                // dI/dg = exp(g/τ)/(1+acc); dg/dq = g·(p−q)/σ²
                c.clear();
                c.extend(adj[base + lo..base + hi].iter().zip(&win.ex[lo..hi]).map(|(&a, &ex)| {
                    let g = ey * ex;
                    a * fast_exp(g * inv_tau) * g
                }));
                let mut row = 0.0;
                for (&ci, &dx) in c.iter().zip(&win.dx[lo..hi]) {
                    gx += ci * dx;
                    row += ci;
                }
                gy += row * dy;
            }
            let (gx, gy) = (gx * inv_s2, gy * inv_s2);
            let out = &mut grad[si * STROKE_DIM..(si + 1) * STROKE_DIM];
            for k in 0..4 {
                out[2 * k] += w[k] * gx * sx;
                out[2 * k + 1] += w[k] * gy * sy;
            }
        }
    }
    grad
}

/// Non-differentiable convenience wrapper around the soft rasterizer.
pub fn soft_raster(sketch: &NormalizedSketch, cfg: &SoftRasterConfig) -> Result<RasterGrid> {
    cfg.validate()?;
    let basis = SampleBasis::new(cfg.samples_per_stroke);
    let (pixels, _) = soft_forward(sketch.coords(), cfg, &basis);
    Ok(RasterGrid { height: cfg.height, width: cfg.width, pixels })
}

struct SoftRasterBackward {
    cfg: SoftRasterConfig,
    coords: Vec<f64>,
    acc: Vec<f64>,
    batch: usize,
}

impl<F: Scalar> CustomBackward<F> for SoftRasterBackward {
    fn backward(&self, grad_out: &[F], _inputs: &[&Tensor<F>], _output: &Tensor<F>) -> Vec<Option<Vec<F>>> {
        let basis = SampleBasis::new(self.cfg.samples_per_stroke);
        let per_img = self.coords.len() / self.batch.max(1);
        let npix = self.cfg.height * self.cfg.width;
        let mut grad = Vec::with_capacity(self.coords.len());
        for b in 0..self.batch {
            let g: Vec<f64> = grad_out[b * npix..(b + 1) * npix].iter().map(|v| v.as_f64()).collect();
            let gi = soft_backward(
                &self.coords[b * per_img..(b + 1) * per_img],
                &self.cfg,
                &basis,
                &self.acc[b * npix..(b + 1) * npix],
                &g,
            );
            grad.extend(gi.into_iter().map(F::from_f64));
        }
        vec![Some(grad)]
    }
}

/// Differentiable soft raster of a batch of normalized sketches.
///
/// `coords` has shape `[batch, n, 4, 2]` or `[batch, n, 8]`; the result is
/// `[batch, height, width]`.
pub fn soft_raster_var<'t, F: Scalar>(coords: Var<'t, F>, cfg: &SoftRasterConfig) -> Result<Var<'t, F>> {
    cfg.validate()?;
    let value = coords.value();
    let shape = value.shape();
    let ok = match shape.len() {
        3 => shape[2] == STROKE_DIM,
        4 => shape[2] == 4 && shape[3] == 2,
        _ => false,
    };
    if !ok {
        return invalid(format!("soft_raster expects [batch, n, 4, 2] or [batch, n, 8], got {shape:?}"));
    }
    let batch = shape[0];
    let flat: Vec<f64> = value.data().iter().map(|v| v.as_f64()).collect();
    let per_img = flat.len() / batch.max(1);
    let basis = SampleBasis::new(cfg.samples_per_stroke);
    let npix = cfg.height * cfg.width;
    let mut pixels = Vec::with_capacity(batch * npix);
    let mut acc = Vec::with_capacity(batch * npix);
    for b in 0..batch {
        let (p, a) = soft_forward(&flat[b * per_img..(b + 1) * per_img], cfg, &basis);
        pixels.extend(p.into_iter().map(F::from_f64));
        acc.extend(a);
    }
    let out = Tensor::from_vec(pixels, &[batch, cfg.height, cfg.width])?;
    let backward = SoftRasterBackward { cfg: cfg.clone(), coords: flat, acc, batch };
    Ok(coords.tape().custom(&[coords], out, Box::new(backward)))
}

fn segment_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p.x - (a.x + t * vx), p.y - (a.y + t * vy));
    dx * dx + dy * dy
}

/// Binary raster: a pixel is set when its centre lies within `width_px / 2`
/// of a stroke's polyline (at least 64 samples per stroke, denser for long strokes).
pub fn hard_raster(sketch: &Sketch, height: usize, width: usize, width_px: f64) -> Result<RasterGrid> {
    let mut grid = RasterGrid::zeros(height, width);
    for stroke in &sketch.strokes {
        cover_stroke(stroke, sketch.canvas, height, width, width_px, |idx| grid.pixels[idx] = 1.0)?;
    }
    Ok(grid)
}

/// Sorted, unique flat indices of the pixels [`hard_raster`] sets for one stroke.
pub fn stroke_pixels(stroke: &Stroke, canvas: Canvas, height: usize, width: usize, width_px: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    cover_stroke(stroke, canvas, height, width, width_px, |idx| out.push(idx))?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn cover_stroke(
    stroke: &Stroke,
    canvas: Canvas,
    height: usize,
    width: usize,
    width_px: f64,
    mut set: impl FnMut(usize),
) -> Result<()> {
    if !(width_px > 0.0) {
        return invalid(format!("stroke width must be > 0, got {width_px}"));
    }
    let sx = width as f64 / canvas.width;
    let sy = height as f64 / canvas.height;
    let half = width_px / 2.0;
    let h2 = half * half;
    let s = stroke.map(|p| Point::new(p.x * sx, p.y * sy));
    let m = (s.control_polygon_length().ceil() as usize + 1).clamp(64, 4096);
    let pts = s.sample_polyline(m)?;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let i0 = ((a.y.min(b.y) - half - 0.5).ceil().max(0.0)) as usize;
        let i1 = (a.y.max(b.y) + half - 0.5).floor();
        let j0 = ((a.x.min(b.x) - half - 0.5).ceil().max(0.0)) as usize;
        let j1 = (a.x.max(b.x) + half - 0.5).floor();
        if i1 < 0.0 || j1 < 0.0 {
            continue;
        }
        let i1 = (i1 as usize).min(height.saturating_sub(1));
        let j1 = (j1 as usize).min(width.saturating_sub(1));
        for i in i0..=i1 {
            if i >= height {
                break;
            }
            for j in j0..=j1 {
                if j >= width {
                    break;
                }
                let c = Point::new(j as f64 + 0.5, i as f64 + 0.5);
                if segment_dist2(c, a, b) <= h2 {
                    set(i * width + j);
                }
            }
        }
    }
    Ok(())
}

/// Maps `[0, 1]` to `[0, 255]` with round-half-up.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn save_png(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = grid.pixels.iter().map(|&v| to_byte(v)).collect();
    let img = image::GrayImage::from_raw(grid.width as u32, grid.height as u32, bytes)
        .ok_or_else(|| VsdError::Image("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads an 8-bit grayscale PNG; any other pixel format is rejected.
pub fn load_png(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(VsdError::Image(format!("{}: expected 8-bit grayscale PNG, got {:?}", path.display(), img.color())));
    };
    Ok(gray_to_grid(&gray))
}

/// Loads any supported image, converting to grayscale.
pub fn load_image_gray(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    Ok(gray_to_grid(&img.to_luma8()))
}

fn gray_to_grid(gray: &image::GrayImage) -> RasterGrid {
    RasterGrid {
        height: gray.height() as usize,
        width: gray.width() as usize,
        pixels: gray.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    }
}

/// Resizes to `res × res` with a triangle filter; identity when already that size.
pub fn resize(grid: &RasterGrid, res: usize) -> RasterGrid {
    if grid.height == res && grid.width == res {
        return grid.clone();
    }
    let img = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
        grid.width as u32,
        grid.height as u32,
        grid.pixels.iter().map(|&v| v as f32).collect(),
    )
    .expect("grid buffer");
    let out = image::imageops::resize(&img, res as u32, res as u32, image::imageops::FilterType::Triangle);
    RasterGrid { height: res, width: res, pixels: out.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect() }
}
