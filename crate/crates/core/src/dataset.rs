//! Procedural toy sketch/image pairs, the on-disk sample layout, ingestion of
//! externally produced samples and seeded batch iteration.
//!
//! Layout: `<root>/manifest.json` plus one directory per sample holding
//! `image.png`, `sketch.svg` and optionally `mask.png` and `attention.png`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::COND_RES;
use crate::error::{invalid, Result, VsdError};
use crate::geometry::{from_svg, to_svg, Canvas, Point, Sketch, Stroke, DEFAULT_STROKES};
use crate::rasterizer::{hard_raster, load_image_gray, load_png, resize, save_png, RasterGrid};
use crate::seeds;
use crate::strokeops::{largest_remainder, sort_strokes, AttentionMask, SortConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "image.png";
pub const SKETCH_FILE: &str = "sketch.svg";
pub const MASK_FILE: &str = "mask.png";
pub const ATTENTION_FILE: &str = "attention.png";
/// Stroke width used for toy SVGs and the rasters behind their conditioning images.
pub const TOY_STROKE_WIDTH: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// 90/10 train/test split keyed on a hash of the id.
pub fn split_for(id: &str) -> Split {
    if seeds::derive_seed(0, "split", seeds::fnv1a(id.as_bytes())) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blob,
    Polygon,
    Star,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Blob, Family::Polygon, Family::Star];

    pub fn class_id(self) -> u32 {
        Family::ALL.iter().position(|&f| f == self).expect("listed") as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

/// Dataset index. `root` is stored relative to the manifest file (normally
/// `"."`); [`DatasetManifest::dir`] is the resolved directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: String,
    pub n_strokes: usize,
    pub canvas: Canvas,
    pub samples: Vec<ManifestEntry>,
    pub generator_seed: Option<u64>,
    #[serde(skip)]
    dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(dir: impl Into<PathBuf>, n_strokes: usize, canvas: Canvas, samples: Vec<ManifestEntry>, generator_seed: Option<u64>) -> Self {
        DatasetManifest { root: ".".into(), n_strokes, canvas, samples, generator_seed, dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.dir.join(&self.root).join(id)
    }

    /// Loads `<dir>/manifest.json` (or the file itself when given one).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)
            .map_err(|e| VsdError::Invalid(format!("cannot read manifest {}: {e}", file.display())))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = m.samples.iter().find(|s| !seen.insert(s.id.as_str())) {
            return invalid(format!("duplicate sample id `{}` in manifest", dup.id));
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Equality of everything except the location on disk.
    pub fn same_content(&self, other: &DatasetManifest) -> bool {
        self.root == other.root
            && self.n_strokes == other.n_strokes
            && self.canvas == other.canvas
            && self.samples == other.samples
            && self.generator_seed == other.generator_seed
    }
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchSample {
    pub id: String,
    pub sketch: Sketch,
    pub cond_image: RasterGrid,
    pub attention: Option<AttentionMask>,
    pub class_id: Option<u32>,
}

fn sample_err(id: &str, msg: impl std::fmt::Display) -> VsdError {
    VsdError::Sample { id: id.to_string(), msg: msg.to_string() }
}

/// Reads and validates one sample.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<SketchSample> {
    let entry = manifest.entry(id).ok_or_else(|| sample_err(id, "not listed in the manifest"))?;
    let dir = manifest.sample_dir(id);
    let svg = fs::read_to_string(dir.join(SKETCH_FILE)).map_err(|e| sample_err(id, format!("{SKETCH_FILE}: {e}")))?;
    let sketch = from_svg(&svg).map_err(|e| sample_err(id, e))?;
    if sketch.len() != manifest.n_strokes {
        return Err(sample_err(id, format!("expected {} strokes, found {}", manifest.n_strokes, sketch.len())));
    }
    let cond_image = load_png(dir.join(IMAGE_FILE)).map_err(|e| sample_err(id, format!("{IMAGE_FILE}: {e}")))?;
    if cond_image.height() != COND_RES || cond_image.width() != COND_RES {
        return Err(sample_err(
            id,
            format!("{IMAGE_FILE} is {}x{}, expected {COND_RES}x{COND_RES}", cond_image.height(), cond_image.width()),
        ));
    }
    let (mask, attn) = (dir.join(MASK_FILE), dir.join(ATTENTION_FILE));
    let attention = if mask.exists() && attn.exists() {
        Some(AttentionMask::load(&attn, &mask).map_err(|e| sample_err(id, e))?)
    } else {
        None
    };
    Ok(SketchSample { id: id.to_string(), sketch, cond_image, attention, class_id: entry.class_id })
}

/// Loads every sample of a split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<SketchSample>> {
    manifest.split_ids(split).iter().map(|id| load_sample(manifest, id)).collect()
}

fn write_sample(dir: &Path, sample: &SketchSample, stroke_width: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SKETCH_FILE), to_svg(&sample.sketch, stroke_width))?;
    save_png(&sample.cond_image, dir.join(IMAGE_FILE))?;
    if let Some(am) = &sample.attention {
        let attn = RasterGrid::from_pixels(am.height(), am.width(), am.attention().iter().map(|a| a.min(1.0)).collect())?;
        let mask = RasterGrid::from_pixels(am.height(), am.width(), am.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
        save_png(&attn, dir.join(ATTENTION_FILE))?;
        save_png(&mask, dir.join(MASK_FILE))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_samples: usize,
    pub n_strokes: usize,
    pub families: Vec<Family>,
    pub canvas: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { n_samples: 200, n_strokes: DEFAULT_STROKES, families: Family::ALL.to_vec(), canvas: 256.0 }
    }
}

/// A closed outline cut into `n` cubic segments, in outline order, together
/// with a dense closed polygon approximating it.
#[derive(Clone, Debug)]
pub struct Outline {
    pub strokes: Vec<Stroke>,
    pub polygon: Vec<Point>,
}

fn blob_outline(rng: &mut ChaCha8Rng, n: usize, canvas: f64) -> Outline {
    let s = canvas / 256.0;
    let center = Point::new(canvas / 2.0 + rng.random_range(-20.0..20.0) * s, canvas / 2.0 + rng.random_range(-20.0..20.0) * s);
    let radius = rng.random_range(45.0..70.0) * s;
    let harmonics: Vec<(f64, f64, f64)> =
        (2..=4).map(|k| (k as f64, rng.random_range(0.0..0.1), rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = |t: f64| radius * (1.0 + harmonics.iter().map(|&(k, a, ph)| a * (k * t + ph).cos()).sum::<f64>());
    let dr = |t: f64| -radius * harmonics.iter().map(|&(k, a, ph)| a * k * (k * t + ph).sin()).sum::<f64>();
    let at = |t: f64| Point::new(center.x + r(t) * t.cos(), center.y + r(t) * t.sin());
    let tangent = |t: f64| Point::new(dr(t) * t.cos() - r(t) * t.sin(), dr(t) * t.sin() + r(t) * t.cos());
    let step = std::f64::consts::TAU / n as f64;
    let thetas: Vec<f64> = (0..n).map(|i| theta0 + step * i as f64).collect();
    let knots: Vec<Point> = thetas.iter().map(|&t| at(t)).collect();
    let strokes = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            let (ti, tj) = (thetas[i], thetas[i] + step);
            let (di, dj) = (tangent(ti), tangent(tj));
            let p1 = Point::new(knots[i].x + step / 3.0 * di.x, knots[i].y + step / 3.0 * di.y);
            let p2 = Point::new(knots[j].x - step / 3.0 * dj.x, knots[j].y - step / 3.0 * dj.y);
            Stroke::new(knots[i], p1, p2, knots[j])
        })
        .collect::<Vec<_>>();
    let polygon = strokes
        .iter()
        .flat_map(|s: &Stroke| (0..8).map(move |k| s.bezier_point(k as f64 / 8.0).expect("u in range")))
        .collect();
    Outline { strokes, polygon }
}

/// Straight cubic segments along a closed polygon, at least one per edge, the
/// rest apportioned by edge length.
fn polygon_outline(vertices: &[Point], n: usize) -> Outline {
    let m = vertices.len();
    let lengths: Vec<f64> = (0..m).map(|i| vertices[i].dist(vertices[(i + 1) % m])).collect();
    let extra = largest_remainder(n - m, &lengths);
    let mut knots = Vec::with_capacity(n);
    for i in 0..m {
        let (a, b) = (vertices[i], vertices[(i + 1) % m]);
        let c = extra[i] + 1;
        for s in 0..c {
            let u = s as f64 / c as f64;
            knots.push(Point::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u));
        }
    }
    let strokes = (0..n)
        .map(|i| {
            let (a, b) = (knots[i], knots[(i + 1) % n]);
            let lerp = |u: f64| Point::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u);
            Stroke::new(a, lerp(1.0 / 3.0), lerp(2.0 / 3.0), b)
        })
        .collect();
    Outline { strokes, polygon: vertices.to_vec() }
}

fn radial_vertices(rng: &mut ChaCha8Rng, radii: &[f64], canvas: f64) -> Vec<Point> {
    let s = canvas / 256.0;
    let center = Point::new(canvas / 2.0 + rng.random_range(-20.0..20.0) * s, canvas / 2.0 + rng.random_range(-20.0..20.0) * s);
    let m = radii.len();
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / m as f64;
    radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let t = theta0 + step * (i as f64 + rng.random_range(-0.15..0.15));
            Point::new(center.x + r * s * t.cos(), center.y + r * s * t.sin())
        })
        .collect()
}

/// Outline of one toy shape, before stroke sorting.
pub fn toy_outline(family: Family, n: usize, canvas: f64, rng: &mut ChaCha8Rng) -> Result<Outline> {
    let outline = match family {
        Family::Blob => {
            if n < 3 {
                return invalid("blobs need at least 3 strokes");
            }
            blob_outline(rng, n, canvas)
        }
        Family::Polygon => {
            let m = rng.random_range(3..=7).min(n);
            if m < 3 {
                return invalid("polygons need at least 3 strokes");
            }
            let radii: Vec<f64> = (0..m).map(|_| rng.random_range(60.0..85.0)).collect();
            polygon_outline(&radial_vertices(rng, &radii, canvas), n)
        }
        Family::Star => {
            let points = rng.random_range(4..=6).min(n / 2);
            if points < 2 {
                return invalid("stars need at least 4 strokes");
            }
            let outer = rng.random_range(70.0..90.0);
            let inner = outer * rng.random_range(0.4..0.6);
            let radii: Vec<f64> = (0..2 * points).map(|i| if i % 2 == 0 { outer } else { inner }).collect();
            polygon_outline(&radial_vertices(rng, &radii, canvas), n)
        }
    };
    Ok(outline)
}

/// Even-odd scanline fill of a closed polygon at pixel centres.
pub fn fill_polygon(polygon: &[Point], height: usize, width: usize, scale: f64) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let m = polygon.len();
    for i in 0..height {
        let y = (i as f64 + 0.5) / scale;
        let mut xs: Vec<f64> = (0..m)
            .filter_map(|e| {
                let (a, b) = (polygon[e], polygon[(e + 1) % m]);
                if (a.y <= y) != (b.y <= y) {
                    Some(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x))
                } else {
                    None
                }
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            for j in 0..width {
                let x = (j as f64 + 0.5) / scale;
                if x >= pair[0] && x < pair[1] {
                    mask[i * width + j] = true;
                }
            }
        }
    }
    mask
}

/// Gaussian attention bump at the polygon's vertex centroid plus the filled mask,
/// on a grid matching the canvas.
pub fn toy_attention(polygon: &[Point], canvas: f64) -> Result<AttentionMask> {
    let res = canvas.round() as usize;
    let scale = res as f64 / canvas;
    let c = Point::new(
        polygon.iter().map(|p| p.x).sum::<f64>() / polygon.len() as f64,
        polygon.iter().map(|p| p.y).sum::<f64>() / polygon.len() as f64,
    );
    let mean_r = polygon.iter().map(|p| p.dist(c)).sum::<f64>() / polygon.len() as f64;
    let sigma = 0.5 * mean_r * scale;
    let mut attention = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            let d2 = (j as f64 + 0.5 - c.x * scale).powi(2) + (i as f64 + 0.5 - c.y * scale).powi(2);
            attention.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    AttentionMask::new(res, res, attention, fill_polygon(polygon, res, res, scale))
}

/// Conditioning image: hard raster at canvas resolution box-filtered to 64×64.
pub fn cond_image_for(sketch: &Sketch, stroke_width: f64) -> Result<RasterGrid> {
    let res = sketch.canvas.width.round() as usize;
    if res % COND_RES != 0 || (sketch.canvas.height.round() as usize) != res {
        return invalid(format!("toy canvas must be square with a side divisible by {COND_RES}"));
    }
    hard_raster(sketch, res, res, stroke_width)?.box_downsample(res / COND_RES)
}

/// One toy sample, strokes already sorted.
pub fn toy_sample(index: usize, cfg: &ToyConfig, seed: u64) -> Result<SketchSample> {
    if cfg.families.is_empty() {
        return invalid("at least one toy family is required");
    }
    let mut rng = seeds::rng_for(seed, "toy", index as u64);
    let family = cfg.families[index % cfg.families.len()];
    let outline = toy_outline(family, cfg.n_strokes, cfg.canvas, &mut rng)?;
    let canvas = Canvas::new(cfg.canvas, cfg.canvas)?;
    let sketch = Sketch::new(outline.strokes, canvas);
    let am = toy_attention(&outline.polygon, cfg.canvas)?;
    let order = sort_strokes(&sketch, &am, &SortConfig::default())?;
    let sketch = sketch.permuted(&order);
    let cond_image = cond_image_for(&sketch, TOY_STROKE_WIDTH)?;
    Ok(SketchSample { id: toy_id(index), sketch, cond_image, attention: Some(am), class_id: Some(family.class_id()) })
}

pub fn toy_id(index: usize) -> String {
    format!("toy-{index:05}")
}

/// Writes a toy dataset under `dir` and returns its manifest.
pub fn generate_toy(dir: impl AsRef<Path>, cfg: &ToyConfig, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let sample = toy_sample(i, cfg, seed)?;
        write_sample(&dir.join(&sample.id), &sample, TOY_STROKE_WIDTH)?;
        entries.push(ManifestEntry { split: split_for(&sample.id), id: sample.id, class_id: sample.class_id });
    }
    let manifest = DatasetManifest::new(dir, cfg.n_strokes, Canvas::new(cfg.canvas, cfg.canvas)?, entries, Some(seed));
    manifest.save()?;
    Ok(manifest)
}

/// Copies every sample listed in `manifest` to `dest` in the sample-directory
/// layout, including the manifest.
pub fn export(manifest: &DatasetManifest, dest: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dest = dest.as_ref();
    for id in manifest.ids() {
        let (src, dst) = (manifest.sample_dir(id), dest.join(id));
        fs::create_dir_all(&dst)?;
        for name in [IMAGE_FILE, SKETCH_FILE, MASK_FILE, ATTENTION_FILE] {
            if src.join(name).exists() {
                fs::copy(src.join(name), dst.join(name))?;
            }
        }
    }
    let mut out = manifest.clone();
    out.root = ".".into();
    out.dir = dest.to_path_buf();
    out.save()?;
    Ok(out)
}

#[derive(Debug)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub rejected: Vec<(String, VsdError)>,
}

fn ingest_one(src: &Path, dest: &Path, id: &str, n_strokes: usize) -> Result<(Canvas, SketchSample)> {
    let svg = fs::read_to_string(src.join(SKETCH_FILE)).map_err(|e| sample_err(id, format!("{SKETCH_FILE}: {e}")))?;
    let sketch = from_svg(&svg).map_err(|e| sample_err(id, e))?;
    if sketch.len() != n_strokes {
        return Err(sample_err(id, format!("stroke count {} != required {n_strokes}", sketch.len())));
    }
    let image = load_image_gray(src.join(IMAGE_FILE)).map_err(|e| sample_err(id, format!("{IMAGE_FILE}: {e}")))?;
    let cond_image = resize(&image, COND_RES);
    let (mask, attn) = (src.join(MASK_FILE), src.join(ATTENTION_FILE));
    let attention = match (mask.exists(), attn.exists()) {
        (true, true) => {
            let a = load_image_gray(&attn).map_err(|e| sample_err(id, format!("{ATTENTION_FILE}: {e}")))?;
            let m = load_image_gray(&mask).map_err(|e| sample_err(id, format!("{MASK_FILE}: {e}")))?;
            Some(AttentionMask::from_grids(&a, &m).map_err(|e| sample_err(id, e))?)
        }
        (false, false) => None,
        _ => return Err(sample_err(id, "mask.png and attention.png must be provided together")),
    };
    let sample = SketchSample { id: id.to_string(), sketch, cond_image, attention, class_id: None };
    let canvas = sample.sketch.canvas;
    write_sample(&dest.join(id), &sample, 1.0)?;
    Ok((canvas, sample))
}

/// Validates every sample directory under `src` and writes the accepted ones
/// to `dest`. Class ids and the generator seed are carried over from a
/// manifest in `src` when one exists.
pub fn ingest(src: impl AsRef<Path>, dest: impl AsRef<Path>, n_strokes: usize) -> Result<IngestReport> {
    let (src, dest) = (src.as_ref(), dest.as_ref());
    let prior = if src.join(MANIFEST_FILE).exists() { Some(DatasetManifest::load(src)?) } else { None };
    let mut ids: Vec<String> = fs::read_dir(src)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    ids.sort();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    let mut canvas: Option<Canvas> = None;
    for id in ids {
        match ingest_one(&src.join(&id), dest, &id, n_strokes) {
            Ok((c, _)) if canvas.is_some_and(|k| k != c) => {
                let _ = fs::remove_dir_all(dest.join(&id));
                rejected.push((id.clone(), sample_err(&id, format!("canvas {}x{} differs from the dataset", c.width, c.height))));
            }
            Ok((c, _)) => {
                canvas = Some(c);
                let class_id = prior.as_ref().and_then(|m| m.entry(&id)).and_then(|e| e.class_id);
                entries.push(ManifestEntry { split: split_for(&id), id, class_id });
            }
            Err(e) => rejected.push((id, e)),
        }
    }
    let manifest = DatasetManifest::new(
        dest,
        n_strokes,
        canvas.unwrap_or_default(),
        entries,
        prior.and_then(|m| m.generator_seed),
    );
    manifest.save()?;
    Ok(IngestReport { manifest, rejected })
}

/// Seeded index batches. Each epoch is a fresh permutation of `0..len`;
/// [`BatchStream::next_batch`] draws full batches across epoch boundaries.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return invalid("batch stream needs a non-empty dataset and batch size");
        }
        Ok(BatchStream { len, batch, seed, epoch: 0, order: Self::permutation(len, seed, 0), pos: 0 })
    }

    pub fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut seeds::rng_for(seed, "epoch", epoch));
        order
    }

    /// Batches of one epoch; the last may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        Self::permutation(self.len, self.seed, epoch).chunks(self.batch).map(<[usize]>::to_vec).collect()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.len {
                self.epoch += 1;
                self.order = Self::permutation(self.len, self.seed, self.epoch);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
