//! Strokes, sketches, model-space normalization and the SVG subset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VsdError};

pub const DEFAULT_CANVAS: f64 = 256.0;
pub const DEFAULT_STROKES: usize = 32;
/// Model space spans `[-MODEL_RANGE, MODEL_RANGE]` on both axes.
pub const MODEL_RANGE: f64 = 2.0;
/// Values per stroke in model space: 4 control points × (x, y).
pub const STROKE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One cubic Bézier segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: [Point; 4],
}

/// Cubic Bernstein basis at `u`.
pub fn bernstein(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [v * v * v, 3.0 * u * v * v, 3.0 * u * u * v, u * u * u]
}

impl Stroke {
    pub fn new(p0: Point, p1: Point, p2: Point, p3: Point) -> Self {
        Stroke { points: [p0, p1, p2, p3] }
    }

    /// A dot: all four control points at `p`.
    pub fn degenerate(p: Point) -> Self {
        Stroke { points: [p; 4] }
    }

    fn eval(&self, u: f64) -> Point {
        let w = bernstein(u);
        let mut out = Point::default();
        for (p, w) in self.points.iter().zip(w) {
            out.x += w * p.x;
            out.y += w * p.y;
        }
        out
    }

    /// Point on the curve at parameter `u ∈ [0, 1]`.
    pub fn bezier_point(&self, u: f64) -> Result<Point> {
        if !(0.0..=1.0).contains(&u) {
            return invalid(format!("bezier parameter {u} outside [0, 1]"));
        }
        Ok(self.eval(u))
    }

    /// `m ≥ 2` points at uniformly spaced parameters, endpoints included.
    pub fn sample_polyline(&self, m: usize) -> Result<Vec<Point>> {
        if m < 2 {
            return invalid(format!("polyline needs at least 2 samples, got {m}"));
        }
        Ok((0..m).map(|j| self.eval(j as f64 / (m - 1) as f64)).collect())
    }

    /// Length of the control polygon, an upper bound on arc length.
    pub fn control_polygon_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Stroke {
        Stroke { points: self.points.map(f) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            width: DEFAULT_CANVAS,
            height: DEFAULT_CANVAS,
        }
    }
}

impl Canvas {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return invalid(format!("canvas dimensions must be positive, got {width}x{height}"));
        }
        Ok(Canvas { width, height })
    }
}

/// Ordered strokes on a canvas. Order is meaningful and always preserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub strokes: Vec<Stroke>,
    pub canvas: Canvas,
}

impl Sketch {
    pub fn new(strokes: Vec<Stroke>, canvas: Canvas) -> Self {
        Sketch { strokes, canvas }
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn permuted(&self, order: &[usize]) -> Sketch {
        Sketch {
            strokes: order.iter().map(|&i| self.strokes[i]).collect(),
            canvas: self.canvas,
        }
    }

    pub fn normalize(&self) -> NormalizedSketch {
        let sx = 2.0 * MODEL_RANGE / self.canvas.width;
        let sy = 2.0 * MODEL_RANGE / self.canvas.height;
        let coords = self
            .strokes
            .iter()
            .flat_map(|s| s.points.iter().flat_map(|p| [sx * p.x - MODEL_RANGE, sy * p.y - MODEL_RANGE]))
            .collect();
        NormalizedSketch { coords }
    }

    /// Largest coordinate difference against another sketch with the same stroke count.
    pub fn max_coord_diff(&self, other: &Sketch) -> f64 {
        assert_eq!(self.len(), other.len());
        self.strokes
            .iter()
            .zip(&other.strokes)
            .flat_map(|(a, b)| a.points.iter().zip(&b.points).map(|(p, q)| (p.x - q.x).abs().max((p.y - q.y).abs())))
            .fold(0.0, f64::max)
    }
}

/// Sketch coordinates in model space, flattened as `n × 4 × 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSketch {
    coords: Vec<f64>,
}

impl NormalizedSketch {
    pub fn from_coords(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % STROKE_DIM != 0 {
            return invalid(format!("coordinate count {} is not a multiple of {STROKE_DIM}", coords.len()));
        }
        Ok(NormalizedSketch { coords })
    }

    pub fn zeros(n_strokes: usize) -> Self {
        NormalizedSketch { coords: vec![0.0; n_strokes * STROKE_DIM] }
    }

    pub fn n_strokes(&self) -> usize {
        self.coords.len() / STROKE_DIM
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn denormalize(&self, canvas: Canvas) -> Sketch {
        let sx = canvas.width / (2.0 * MODEL_RANGE);
        let sy = canvas.height / (2.0 * MODEL_RANGE);
        let strokes = self
            .coords
            .chunks_exact(STROKE_DIM)
            .map(|c| {
                let p = |i: usize| Point::new((c[2 * i] + MODEL_RANGE) * sx, (c[2 * i + 1] + MODEL_RANGE) * sy);
                Stroke::new(p(0), p(1), p(2), p(3))
            })
            .collect();
        Sketch { strokes, canvas }
    }
}

fn fmt_num(v: f64) -> String {
    // Six decimals keeps the write/parse round trip below 1e-6.
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Path data for one stroke: `M x0 y0 C x1 y1, x2 y2, x3 y3`.
pub fn path_data(stroke: &Stroke) -> String {
    let [p0, p1, p2, p3] = stroke.points;
    format!(
        "M {} {} C {} {}, {} {}, {} {}",
        fmt_num(p0.x),
        fmt_num(p0.y),
        fmt_num(p1.x),
        fmt_num(p1.y),
        fmt_num(p2.x),
        fmt_num(p2.y),
        fmt_num(p3.x),
        fmt_num(p3.y)
    )
}

pub fn to_svg(sketch: &Sketch, stroke_width: f64) -> String {
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\">\n",
        fmt_num(sketch.canvas.width),
        fmt_num(sketch.canvas.height)
    );
    for s in &sketch.strokes {
        let _ = writeln!(
            out,
            "  <path d=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"{}\"/>",
            path_data(s),
            fmt_num(stroke_width)
        );
    }
    out.push_str("</svg>\n");
    out
}

struct Tag<'a> {
    line: usize,
    body: &'a str,
}

fn svg_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(VsdError::Svg { line, msg: msg.into() })
}

fn tags(text: &str) -> Result<Vec<Tag<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    let line_at = |pos: usize| text[..pos].matches('\n').count() + 1;
    while let Some(start) = rest.find('<') {
        let before = &rest[..start];
        if !before.trim().is_empty() {
            return svg_err(line_at(offset), format!("unexpected text `{}`", before.trim()));
        }
        let Some(end) = rest[start..].find('>') else {
            return svg_err(line_at(offset + start), "unterminated tag");
        };
        out.push(Tag {
            line: line_at(offset + start),
            body: &rest[start + 1..start + end],
        });
        offset += start + end + 1;
        rest = &text[offset..];
    }
    if !rest.trim().is_empty() {
        return svg_err(line_at(offset), format!("unexpected trailing text `{}`", rest.trim()));
    }
    Ok(out)
}

fn attributes(tag: &Tag<'_>, body: &str) -> Result<Vec<(String, String)>> {
    let mut attrs = Vec::new();
    let mut rest = body.trim();
    while !rest.is_empty() {
        let Some(eq) = rest.find('=') else {
            return svg_err(tag.line, format!("malformed attribute `{rest}`"));
        };
        let name = rest[..eq].trim().to_string();
        let value_part = rest[eq + 1..].trim_start();
        let quote = value_part.chars().next();
        let Some(q @ ('"' | '\'')) = quote else {
            return svg_err(tag.line, format!("attribute `{name}` value is not quoted"));
        };
        let Some(close) = value_part[1..].find(q) else {
            return svg_err(tag.line, format!("attribute `{name}` value is unterminated"));
        };
        attrs.push((name, value_part[1..1 + close].to_string()));
        rest = value_part[close + 2..].trim_start();
    }
    Ok(attrs)
}

fn parse_f64(line: usize, tok: &str) -> Result<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => svg_err(line, format!("invalid number `{tok}`")),
    }
}

/// Parses `M x y C x y, x y, x y` into a stroke.
pub fn parse_path_data(line: usize, d: &str) -> Result<Stroke> {
    let toks: Vec<&str> = d.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
    let mut toks = toks.into_iter();
    match toks.next() {
        Some("M") => {}
        Some(t) if t.starts_with('M') && t.len() > 1 => {
            return svg_err(line, format!("expected whitespace after M in `{d}`"));
        }
        Some(t) => return svg_err(line, format!("path must start with absolute `M`, found `{t}`")),
        None => return svg_err(line, "empty path data"),
    }
    let mut nums = Vec::with_capacity(8);
    let mut commands = 1;
    for t in toks {
        match t {
            "C" => {
                commands += 1;
                if commands > 2 {
                    return svg_err(line, format!("multi-segment path, expected a single cubic segment: `{d}`"));
                }
                if nums.len() != 2 {
                    return svg_err(line, format!("`C` must follow exactly one point in `{d}`"));
                }
            }
            t if t.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E') => {
                return svg_err(line, format!("unsupported path command `{t}` (only one cubic `C` segment allowed)"));
            }
            t => nums.push(parse_f64(line, t)?),
        }
    }
    if commands != 2 || nums.len() != 8 {
        return svg_err(line, format!("expected a single cubic segment `M x y C x y, x y, x y`, got `{d}`"));
    }
    let p = |i: usize| crate::Point::new(nums[2 * i], nums[2 * i + 1]);
    Ok(Stroke::new(p(0), p(1), p(2), p(3)))
}

const SVG_ATTRS: &[&str] = &["xmlns", "viewBox", "width", "height", "version"];
const PATH_ATTRS: &[&str] = &["d", "fill", "stroke", "stroke-width", "stroke-linecap", "stroke-linejoin", "stroke-opacity"];

/// Parses the SVG subset written by [`to_svg`]: one `<svg>` root with a
/// `viewBox="0 0 W H"` and only single-segment cubic `<path>` children.
pub fn from_svg(text: &str) -> Result<Sketch> {
    let mut canvas = None;
    let mut strokes = Vec::new();
    let mut closed = false;
    for tag in tags(text)? {
        let body = tag.body.trim();
        if body.starts_with("?xml") || body.starts_with("!--") {
            continue;
        }
        if closed {
            return svg_err(tag.line, "content after closing </svg>");
        }
        if body == "/svg" {
            if canvas.is_none() {
                return svg_err(tag.line, "</svg> without opening tag");
            }
            closed = true;
            continue;
        }
        let name_end = body.find(|c: char| c.is_whitespace() || c == '/').unwrap_or(body.len());
        let name = &body[..name_end];
        match name {
            "svg" => {
                if canvas.is_some() {
                    return svg_err(tag.line, "nested <svg> element");
                }
                if body.ends_with('/') {
                    return svg_err(tag.line, "self-closing <svg> root");
                }
                let mut view_box = None;
                for (k, v) in attributes(&tag, &body[name_end..])? {
                    if k == "transform" {
                        return svg_err(tag.line, "transforms are not supported");
                    }
                    if !SVG_ATTRS.contains(&k.as_str()) {
                        return svg_err(tag.line, format!("unsupported <svg> attribute `{k}`"));
                    }
                    if k == "viewBox" {
                        view_box = Some(v);
                    }
                }
                let Some(vb) = view_box else {
                    return svg_err(tag.line, "<svg> needs a viewBox");
                };
                let vals: Vec<f64> = vb
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| parse_f64(tag.line, t))
                    .collect::<Result<_>>()?;
                if vals.len() != 4 || vals[0] != 0.0 || vals[1] != 0.0 {
                    return svg_err(tag.line, format!("viewBox must be `0 0 W H`, got `{vb}`"));
                }
                canvas = Some(Canvas::new(vals[2], vals[3]).or_else(|e| svg_err(tag.line, e.to_string()))?);
            }
            "path" => {
                if canvas.is_none() {
                    return svg_err(tag.line, "<path> outside <svg>");
                }
                if !body.ends_with('/') {
                    return svg_err(tag.line, "<path> must be self-closing");
                }
                let attr_body = &body[name_end..body.len() - 1];
                let mut d = None;
                for (k, v) in attributes(&tag, attr_body)? {
                    if k == "transform" {
                        return svg_err(tag.line, "transforms are not supported");
                    }
                    if !PATH_ATTRS.contains(&k.as_str()) {
                        return svg_err(tag.line, format!("unsupported <path> attribute `{k}`"));
                    }
                    if k == "d" {
                        d = Some(v);
                    }
                }
                let Some(d) = d else {
                    return svg_err(tag.line, "<path> without d attribute");
                };
                strokes.push(parse_path_data(tag.line, &d)?);
            }
            other => return svg_err(tag.line, format!("unsupported element <{other}>")),
        }
    }
    match (canvas, closed) {
        (Some(canvas), true) => Ok(Sketch { strokes, canvas }),
        (None, _) => svg_err(1, "missing <svg> root"),
        (Some(_), false) => svg_err(text.lines().count().max(1), "missing closing </svg>"),
    }
}
