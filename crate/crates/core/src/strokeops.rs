//! Attention-driven stroke initialization and contour/attention stroke ordering.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Canvas, Point, Sketch, Stroke};
use crate::rasterizer::{load_png, stroke_pixels, RasterGrid};
use crate::seeds;

const LLOYD_TOL: f64 = 0.5;
const LLOYD_MAX_ITERS: usize = 100;
const BALANCE_SLACK: f64 = 0.1;

/// Per-pixel attention weights plus a binary object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    height: usize,
    width: usize,
    attention: Vec<f64>,
    mask: Vec<bool>,
}

impl AttentionMask {
    pub fn new(height: usize, width: usize, attention: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("attention mask must be non-empty");
        }
        let n = height * width;
        if attention.len() != n || mask.len() != n {
            return invalid(format!(
                "attention ({}) and mask ({}) must both have {height}x{width} = {n} entries",
                attention.len(),
                mask.len()
            ));
        }
        if let Some(bad) = attention.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return invalid(format!("attention values must be finite and >= 0, got {bad}"));
        }
        Ok(AttentionMask { height, width, attention, mask })
    }

    /// Mask pixels are foreground when `>= 0.5` (128 of 255).
    pub fn from_grids(attention: &RasterGrid, mask: &RasterGrid) -> Result<Self> {
        if (attention.height(), attention.width()) != (mask.height(), mask.width()) {
            return invalid(format!(
                "attention is {}x{} but mask is {}x{}",
                attention.height(),
                attention.width(),
                mask.height(),
                mask.width()
            ));
        }
        let fg = mask.pixels().iter().map(|&v| v >= 128.0 / 255.0 - 1e-9).collect();
        AttentionMask::new(mask.height(), mask.width(), attention.pixels().to_vec(), fg)
    }

    /// Loads 8-bit grayscale PNGs.
    pub fn load(attention: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<Self> {
        AttentionMask::from_grids(&load_png(attention)?, &load_png(mask)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn attention(&self) -> &[f64] {
        &self.attention
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Attention at a position in grid pixel units; zero outside the grid.
    pub fn attention_at(&self, x: f64, y: f64) -> f64 {
        if !(x >= 0.0 && y >= 0.0) {
            return 0.0;
        }
        let (j, i) = (x.floor() as usize, y.floor() as usize);
        if i >= self.height || j >= self.width {
            return 0.0;
        }
        self.attention[i * self.width + j]
    }

    /// Same mask, attention multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        AttentionMask::new(self.height, self.width, self.attention.iter().map(|a| a * factor).collect(), self.mask.clone())
    }
}

/// Region label per pixel; `-1` marks background.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub labels: Vec<i32>,
    /// Centroids (x, y) from the clustering stage, before balancing.
    pub centroids: Vec<(f64, f64)>,
}

impl RegionPartition {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    /// Flat pixel indices of one region.
    pub fn pixels_of(&self, region: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == region as i32).collect()
    }

    fn center(&self, idx: usize) -> (f64, f64) {
        ((idx % self.width) as f64 + 0.5, (idx / self.width) as f64 + 0.5)
    }
}

/// Result of a (weighted) Lloyd clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, &q) in centroids.iter().enumerate() {
        let d = d2(p, q);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut r = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if r < w {
                return Some(i);
            }
            r -= w;
            last = Some(i);
        }
    }
    last
}

/// K-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift is below 0.5 px (or 100 iterations). Weights scale both the seeding
/// probabilities and the centroid means; all-zero weights fall back to uniform.
pub fn weighted_kmeans(points: &[(f64, f64)], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Clustering> {
    if k == 0 {
        return invalid("k must be >= 1");
    }
    if k > points.len() {
        return invalid(format!("k = {k} exceeds the {} available points", points.len()));
    }
    if weights.len() != points.len() {
        return invalid("one weight per point required");
    }
    let uniform;
    let weights = if weights.iter().any(|&w| w > 0.0) {
        weights
    } else {
        uniform = vec![1.0; points.len()];
        &uniform
    };
    let first = pick_weighted(rng, weights).expect("positive weight");
    let mut centroids = vec![points[first]];
    let mut dist: Vec<f64> = points.iter().map(|&p| d2(p, points[first])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = dist.iter().zip(weights).map(|(d, w)| d * w).collect();
        let idx = match pick_weighted(rng, &scores) {
            Some(i) => i,
            // Every weighted point already coincides with a centroid.
            None => {
                let free: Vec<usize> = (0..points.len()).filter(|&i| dist[i] > 0.0).collect();
                if free.is_empty() {
                    rng.random_range(0..points.len())
                } else {
                    free[rng.random_range(0..free.len())]
                }
            }
        };
        let c = points[idx];
        centroids.push(c);
        for (d, &p) in dist.iter_mut().zip(points) {
            *d = d.min(d2(p, c));
        }
    }
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        for (l, &p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids);
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0.0, 0.0, 0usize); k];
        for ((&l, &p), &w) in labels.iter().zip(points).zip(weights) {
            let a = &mut acc[l];
            a.0 += w * p.0;
            a.1 += w * p.1;
            a.2 += w;
            a.3 += p.0;
            a.4 += p.1;
            a.5 += 1;
        }
        let mut shift: f64 = 0.0;
        for (c, a) in centroids.iter_mut().zip(&acc) {
            let next = if a.2 > 0.0 {
                (a.0 / a.2, a.1 / a.2)
            } else if a.5 > 0 {
                (a.3 / a.5 as f64, a.4 / a.5 as f64)
            } else {
                *c
            };
            shift = shift.max(d2(*c, next).sqrt());
            *c = next;
        }
        if shift < LLOYD_TOL || iterations >= LLOYD_MAX_ITERS {
            break;
        }
    }
    Ok(Clustering { centroids, labels, iterations })
}

/// Allowed region sizes `[lo, hi]` for `total` pixels split `k` ways.
pub fn balance_bounds(total: usize, k: usize) -> (usize, usize) {
    let c = total as f64 / k as f64;
    let lo = ((1.0 - BALANCE_SLACK) * c).ceil() as usize;
    let hi = ((1.0 + BALANCE_SLACK) * c).floor() as usize;
    (lo.min(total / k), hi.max(total.div_ceil(k)))
}

/// Weighted K-means over foreground pixel centres, then a greedy capacity pass
/// moving the cheapest pixels out of over-full regions and into under-full ones.
pub fn partition_regions(am: &AttentionMask, k: usize, seed: u64) -> Result<RegionPartition> {
    let fg: Vec<usize> = (0..am.mask.len()).filter(|&i| am.mask[i]).collect();
    if fg.is_empty() {
        return invalid("mask has no foreground pixels");
    }
    if k == 0 || k > fg.len() {
        return invalid(format!("k = {k} must be in [1, {}] (foreground pixel count)", fg.len()));
    }
    let w = am.width;
    let points: Vec<(f64, f64)> = fg.iter().map(|&i| ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)).collect();
    let weights: Vec<f64> = fg.iter().map(|&i| am.attention[i]).collect();
    let mut rng = seeds::rng_for(seed, "partition", k as u64);
    let clustering = weighted_kmeans(&points, &weights, k, &mut rng)?;
    let mut labels = clustering.labels.clone();
    balance(&points, &mut labels, &clustering.centroids);
    let mut grid = vec![-1; am.mask.len()];
    for (&idx, &l) in fg.iter().zip(&labels) {
        grid[idx] = l as i32;
    }
    Ok(RegionPartition { height: am.height, width: w, k, labels: grid, centroids: clustering.centroids })
}

fn balance(points: &[(f64, f64)], labels: &mut [usize], centroids: &[(f64, f64)]) {
    let k = centroids.len();
    let (lo, hi) = balance_bounds(points.len(), k);
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    // Over-full regions push their cheapest pixels to the nearest region with room.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for r in order {
        while sizes[r] > hi {
            let open: Vec<usize> = (0..k).filter(|&c| c != r && sizes[c] < hi).collect();
            if open.is_empty() {
                break;
            }
            let mut cand: Vec<(f64, usize, usize)> = (0..points.len())
                .filter(|&i| labels[i] == r)
                .map(|i| {
                    let (d, c) = open
                        .iter()
                        .map(|&c| (d2(points[i], centroids[c]), c))
                        .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
                    (d - d2(points[i], centroids[r]), i, c)
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut filled = false;
            for (_, i, c) in cand {
                if sizes[r] <= hi {
                    break;
                }
                labels[i] = c;
                sizes[r] -= 1;
                sizes[c] += 1;
                if sizes[c] >= hi {
                    filled = true;
                    break;
                }
            }
            if !filled && sizes[r] > hi {
                break;
            }
        }
    }
    // Under-full regions pull the nearest pixels from regions above the floor.
    for r in 0..k {
        if sizes[r] >= lo {
            continue;
        }
        let mut cand: Vec<(f64, usize)> = (0..points.len())
            .filter(|&i| labels[i] != r && sizes[labels[i]] > lo)
            .map(|i| (d2(points[i], centroids[r]) - d2(points[i], centroids[labels[i]]), i))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in cand {
            if sizes[r] >= lo {
                break;
            }
            let from = labels[i];
            if sizes[from] <= lo {
                continue;
            }
            labels[i] = r;
            sizes[from] -= 1;
            sizes[r] += 1;
        }
    }
}

/// Largest-remainder apportionment of `total` over `shares`; ties go to the
/// lower index. Zero or non-finite share totals fall back to uniform shares.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let k = shares.len();
    if k == 0 {
        return vec![];
    }
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        shares.iter().map(|s| total as f64 * s / sum).collect()
    } else {
        vec![total as f64 / k as f64; k]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Mean attention per region.
pub fn region_mean_attention(partition: &RegionPartition, am: &AttentionMask) -> Vec<f64> {
    let mut sum = vec![0.0; partition.k];
    let mut count = vec![0usize; partition.k];
    for (i, &l) in partition.labels.iter().enumerate() {
        if l >= 0 {
            sum[l as usize] += am.attention[i];
            count[l as usize] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Half of the `n` points split evenly over regions, the rest in proportion to
/// each region's mean attention.
pub fn allocate_points(partition: &RegionPartition, am: &AttentionMask, n: usize) -> Result<Vec<usize>> {
    allocate_from_means(&region_mean_attention(partition, am), n)
}

pub fn allocate_from_means(means: &[f64], n: usize) -> Result<Vec<usize>> {
    let k = means.len();
    if k == 0 || n < k {
        return invalid(format!("need n >= k >= 1, got n = {n}, k = {k}"));
    }
    let equal = largest_remainder(n / 2, &vec![1.0; k]);
    let prop = largest_remainder(n - n / 2, means);
    Ok(equal.iter().zip(&prop).map(|(a, b)| a + b).collect())
}

/// `count` evenly spread points inside a region: unweighted K-means centroids
/// snapped to the nearest region pixel centre, in grid pixel units.
pub fn place_points(partition: &RegionPartition, region: usize, count: usize, seed: u64) -> Result<Vec<Point>> {
    if count == 0 {
        return Ok(vec![]);
    }
    let pixels = partition.pixels_of(region);
    if count > pixels.len() {
        return invalid(format!("region {region} has {} pixels, cannot place {count} points", pixels.len()));
    }
    let points: Vec<(f64, f64)> = pixels.iter().map(|&i| partition.center(i)).collect();
    let mut rng = seeds::rng_for(seed, "place", region as u64);
    let clustering = weighted_kmeans(&points, &vec![1.0; points.len()], count, &mut rng)?;
    Ok(clustering
        .centroids
        .iter()
        .map(|&c| {
            let p = points[nearest(c, &points)];
            Point::new(p.0, p.1)
        })
        .collect())
}

/// One stroke per seed point: `p0` is the point, `p1..p3` add independent
/// uniform offsets in `[-radius, radius]²`.
pub fn init_strokes(points: &[Point], radius: f64, seed: u64, canvas: Canvas) -> Result<Sketch> {
    if !(radius > 0.0 && radius.is_finite()) {
        return invalid(format!("radius must be > 0, got {radius}"));
    }
    let mut rng = seeds::rng_for(seed, "init-strokes", 0);
    let strokes = points
        .iter()
        .map(|&p| {
            let mut jitter = || Point::new(p.x + rng.random_range(-radius..=radius), p.y + rng.random_range(-radius..=radius));
            let (a, b, c) = (jitter(), jitter(), jitter());
            Stroke::new(p, a, b, c)
        })
        .collect();
    Ok(Sketch::new(strokes, canvas))
}

/// Default seed-point jitter: one hundredth of the canvas width.
pub fn default_radius(canvas: Canvas) -> f64 {
    canvas.width / 100.0
}

/// `k = round(√n)`.
pub fn default_regions(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub n_strokes: usize,
    /// Region count; `None` means `round(√n)`.
    pub regions: Option<usize>,
    /// Control-point jitter in canvas pixels; `None` means canvas width / 100.
    pub radius: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { n_strokes: crate::geometry::DEFAULT_STROKES, regions: None, radius: None }
    }
}

/// Full initialization: partition, allocation, placement and stroke jitter.
/// Seed points are mapped from the mask grid onto the canvas.
pub fn initialize(am: &AttentionMask, cfg: &InitConfig, canvas: Canvas, seed: u64) -> Result<Sketch> {
    let k = cfg.regions.unwrap_or_else(|| default_regions(cfg.n_strokes));
    let partition = partition_regions(am, k, seed)?;
    let counts = allocate_points(&partition, am, cfg.n_strokes)?;
    let (sx, sy) = (canvas.width / am.width as f64, canvas.height / am.height as f64);
    let mut points = Vec::with_capacity(cfg.n_strokes);
    for (region, &count) in counts.iter().enumerate() {
        let size = partition.sizes()[region];
        if count > size {
            return invalid(format!("region {region} has {size} pixels but was allotted {count} points"));
        }
        for p in place_points(&partition, region, count, seed)? {
            points.push(Point::new(p.x * sx, p.y * sy));
        }
    }
    init_strokes(&points, cfg.radius.unwrap_or_else(|| default_radius(canvas)), seed, canvas)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SortConfig {
    pub beta: f64,
    /// Dilation and erosion radii, in mask pixels.
    pub dilate_radius: usize,
    pub erode_radius: usize,
    /// Hard-raster stroke width used for contour counts, in mask pixels.
    pub stroke_width: f64,
    /// Polyline samples used for the attention term.
    pub samples: usize,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig { beta: 1.0, dilate_radius: 2, erode_radius: 2, stroke_width: 2.0, samples: 64 }
    }
}

/// Square-element dilation (`grow = true`) or erosion; outside the grid counts as background.
pub fn morph(mask: &[bool], height: usize, width: usize, radius: usize, grow: bool) -> Vec<bool> {
    let r = radius as isize;
    let (h, w) = (height as isize, width as isize);
    let at = |i: isize, j: isize| i >= 0 && j >= 0 && i < h && j < w && mask[(i * w + j) as usize];
    let mut out = vec![false; mask.len()];
    for i in 0..h {
        for j in 0..w {
            let mut any = false;
            let mut all = true;
            for di in -r..=r {
                for dj in -r..=r {
                    let v = at(i + di, j + dj);
                    any |= v;
                    all &= v;
                }
            }
            out[(i * w + j) as usize] = if grow { any } else { all };
        }
    }
    out
}

/// `dilate(mask) AND NOT erode(mask)`.
pub fn contour_band(am: &AttentionMask, dilate_radius: usize, erode_radius: usize) -> Vec<bool> {
    let d = morph(&am.mask, am.height, am.width, dilate_radius, true);
    let e = morph(&am.mask, am.height, am.width, erode_radius, false);
    d.iter().zip(&e).map(|(&a, &b)| a && !b).collect()
}

/// Per-stroke `(contour pixel count, mean attention)`; the sketch is mapped
/// from its canvas onto the mask grid.
pub fn stroke_scores(sketch: &Sketch, am: &AttentionMask, cfg: &SortConfig) -> Result<Vec<(f64, f64)>> {
    if am.foreground_count() == 0 {
        return invalid("mask has no foreground pixels");
    }
    if cfg.samples < 2 {
        return invalid("sort needs at least 2 polyline samples");
    }
    let band = contour_band(am, cfg.dilate_radius, cfg.erode_radius);
    let (sx, sy) = (am.width as f64 / sketch.canvas.width, am.height as f64 / sketch.canvas.height);
    sketch
        .strokes
        .iter()
        .map(|s| {
            let px = stroke_pixels(s, sketch.canvas, am.height, am.width, cfg.stroke_width)?;
            let c = px.iter().filter(|&&i| band[i]).count() as f64;
            let samples = s.sample_polyline(cfg.samples)?;
            let a = samples.iter().map(|p| am.attention_at(p.x * sx, p.y * sy)).sum::<f64>() / samples.len() as f64;
            Ok((c, a))
        })
        .collect()
}

/// Stroke order by descending `c/max c + beta·a/max a` (zero-max terms drop
/// out), ties by original index. Returns the permutation.
pub fn sort_strokes(sketch: &Sketch, am: &AttentionMask, cfg: &SortConfig) -> Result<Vec<usize>> {
    let scores = stroke_scores(sketch, am, cfg)?;
    let max_c = scores.iter().map(|s| s.0).fold(0.0, f64::max);
    let max_a = scores.iter().map(|s| s.1).fold(0.0, f64::max);
    let total: Vec<f64> = scores
        .iter()
        .map(|&(c, a)| {
            let mut v = 0.0;
            if max_c > 0.0 {
                v += c / max_c;
            }
            if max_a > 0.0 {
                v += cfg.beta * a / max_a;
            }
            v
        })
        .collect();
    let mut order: Vec<usize> = (0..total.len()).collect();
    order.sort_by(|&a, &b| total[b].total_cmp(&total[a]).then(a.cmp(&b)));
    Ok(order)
}
