//! Data model shared by both domains: samples, landmark annotations
//! (labelme-compatible point subset), Gaussian heatmap rendering,
//! augmentation, normalization, manifests, and group-disjoint fold splits.
//!
//! Everything here is pure given (input, seed); parallel data loading is
//! safe and the determinism contract is per-call.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// Which side of the translation a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Surgical-simulator (phantom) imagery.
    Sim,
    /// Intra-operative imagery.
    Or,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Sim => "sim",
            Domain::Or => "or",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(Domain::Sim),
            "or" => Ok(Domain::Or),
            other => Err(Error::Validation(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Entry,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// One annotated suture point in pixel coordinates (pixel centers at
/// integer coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<PointKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

impl Landmark {
    pub fn new(x: f64, y: f64) -> Self {
        Landmark {
            x,
            y,
            kind: None,
            difficulty: None,
        }
    }
}

/// Variable-length list of suture entry/exit points. Empty is legal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Self {
        LandmarkSet { points }
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Self {
        LandmarkSet {
            points: xy.iter().map(|&(x, y)| Landmark::new(x, y)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point must lie within `[0, w) x [0, h)`.
    pub fn validate_bounds(&self, w: usize, h: usize) -> Result<()> {
        for p in &self.points {
            if !(p.x.is_finite() && p.y.is_finite())
                || p.x < 0.0
                || p.y < 0.0
                || p.x >= w as f64
                || p.y >= h as f64
            {
                return Err(Error::Validation(format!(
                    "landmark ({}, {}) outside image bounds {w}x{h}",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// One RGB frame with its provenance. Pixels are HWC in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub fold_id: usize,
    pub source_id: String,
    pub annotation_path: Option<PathBuf>,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>, domain: Domain, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image must be HxWx3 with positive size, got {h}x{w}x{c}"
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values outside [0,1]".into()));
        }
        Ok(ImageSample {
            pixels,
            domain,
            width: w,
            height: h,
            fold_id: 0,
            source_id: source_id.into(),
            annotation_path: None,
        })
    }
}

/// Single-channel map in `[0, 1]`, same spatial size as its image.
#[derive(Debug, Clone)]
pub struct HeatmapTensor {
    pub values: Array2<f64>,
    pub sigma: f64,
}

/// Group-disjoint k-fold split: all frames of one `source_id` share a fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// source_id -> fold index
    pub assignments: BTreeMap<String, usize>,
    /// Per fold: indices into the manifest used for training.
    pub train: Vec<Vec<usize>>,
    /// Per fold: indices used for validation (exactly the fold's groups).
    pub val: Vec<Vec<usize>>,
}

/// Color-jitter ranges. A single coin gates the whole color stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorAug {
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: f64,
    pub probability: f64,
}

impl Default for ColorAug {
    fn default() -> Self {
        ColorAug {
            brightness: 0.2,
            contrast: (0.3, 1.5),
            saturation: (0.5, 2.0),
            hue: 0.1,
            probability: 0.5,
        }
    }
}

/// Geometric transforms; each has its own coin. Applied identically to
/// pixels and landmark coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometricAug {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub shear: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub probability: f64,
    /// Fill value for pixels warped in from outside the frame. 0.5 here is
    /// equivalent to zero fill applied after GAN standardization.
    pub fill: f64,
}

impl Default for GeometricAug {
    fn default() -> Self {
        GeometricAug {
            rotation_deg: 60.0,
            translate_frac: 0.1,
            shear: 0.1,
            hflip_p: 0.5,
            vflip_p: 0.5,
            probability: 0.5,
            fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub color: ColorAug,
    pub geometric: GeometricAug,
    pub seed: u64,
}

impl AugmentationConfig {
    /// No-op configuration (all probabilities zero).
    pub fn disabled() -> Self {
        let mut cfg = AugmentationConfig::default();
        cfg.color.probability = 0.0;
        cfg.geometric.probability = 0.0;
        cfg.geometric.hflip_p = 0.0;
        cfg.geometric.vflip_p = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.color.probability,
            self.geometric.probability,
            self.geometric.hflip_p,
            self.geometric.vflip_p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "augmentation probabilities must be in [0,1]".into(),
            ));
        }
        let ranges_ok = self.color.brightness >= 0.0
            && self.color.hue >= 0.0
            && self.color.contrast.0 >= 0.0
            && self.color.contrast.0 <= self.color.contrast.1
            && self.color.saturation.0 >= 0.0
            && self.color.saturation.0 <= self.color.saturation.1
            && self.geometric.rotation_deg >= 0.0
            && self.geometric.translate_frac >= 0.0
            && self.geometric.shear >= 0.0
            && (0.0..=1.0).contains(&self.geometric.fill);
        if !ranges_ok {
            return Err(Error::Config("augmentation ranges are invalid".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// annotation I/O (labelme-compatible point subset)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawShape {
    label: String,
    points: Vec<[f64; 2]>,
    shape_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    difficulty: Option<Difficulty>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    #[serde(rename = "imageWidth")]
    image_width: usize,
    #[serde(rename = "imageHeight")]
    image_height: usize,
    shapes: Vec<RawShape>,
}

/// Load a point-annotation file and scale its coordinates from the file's
/// native resolution to `image_size` (w, h).
pub fn load_annotations(path: &Path, image_size: (usize, usize)) -> Result<LandmarkSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: RawAnnotation = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(path, e.to_string()))?;
    if raw.image_width == 0 || raw.image_height == 0 {
        return Err(Error::parse(path, "native image size must be positive"));
    }
    let (tw, th) = image_size;
    let sx = tw as f64 / raw.image_width as f64;
    let sy = th as f64 / raw.image_height as f64;
    let mut points = Vec::with_capacity(raw.shapes.len());
    for (i, shape) in raw.shapes.iter().enumerate() {
        if shape.shape_type != "point" {
            return Err(Error::parse(
                path,
                format!("shape {i}: unsupported shape_type {:?}", shape.shape_type),
            ));
        }
        let kind = match shape.label.as_str() {
            "entry" => Some(PointKind::Entry),
            "exit" => Some(PointKind::Exit),
            other => {
                return Err(Error::parse(
                    path,
                    format!("shape {i}: unknown label {other:?}"),
                ));
            }
        };
        if shape.points.len() != 1 {
            return Err(Error::parse(
                path,
                format!("shape {i}: point shape must have exactly 1 coordinate pair"),
            ));
        }
        let [x, y] = shape.points[0];
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::parse(path, format!("shape {i}: non-finite coordinates")));
        }
        if x < 0.0 || y < 0.0 || x >= raw.image_width as f64 || y >= raw.image_height as f64 {
            return Err(Error::Validation(format!(
                "annotation {}: point ({x}, {y}) outside native bounds {}x{}",
                path.display(),
                raw.image_width,
                raw.image_height
            )));
        }
        points.push(Landmark {
            x: x * sx,
            y: y * sy,
            kind,
            difficulty: shape.difficulty,
        });
    }
    Ok(LandmarkSet { points })
}

/// Write annotations in the same format, with native-resolution coordinates.
pub fn save_annotations(path: &Path, set: &LandmarkSet, native_size: (usize, usize)) -> Result<()> {
    let shapes = set
        .points
        .iter()
        .map(|p| RawShape {
            label: match p.kind {
                Some(PointKind::Exit) => "exit".into(),
                // entry is also the fallback for untagged points
                _ => "entry".into(),
            },
            points: vec![[p.x, p.y]],
            shape_type: "point".into(),
            difficulty: p.difficulty,
        })
        .collect();
    let raw = RawAnnotation {
        image_width: native_size.0,
        image_height: native_size.1,
        shapes,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let body = serde_json::to_string_pretty(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// heatmap rendering
// ---------------------------------------------------------------------------

/// Render the target heatmap: per pixel, the max over landmarks of
/// `exp(-d^2 / (2 sigma^2))` (peak-normalized Gaussians, max-combined so the
/// range stays in [0, 1] even for close-by landmarks). Empty set -> zeros.
pub fn render_heatmap(set: &LandmarkSet, w: usize, h: usize, sigma: f64) -> Result<HeatmapTensor> {
    if sigma <= 0.0 {
        return Err(Error::Validation(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut values = Array2::<f64>::zeros((h, w));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in &set.points {
        for iy in 0..h {
            let dy = iy as f64 - p.y;
            for ix in 0..w {
                let dx = ix as f64 - p.x;
                let v = (-(dx * dx + dy * dy) * inv).exp();
                let cell = &mut values[(iy, ix)];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(HeatmapTensor { values, sigma })
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormTarget {
    /// Detector consumes [0,1] unchanged.
    Detector,
    /// GAN consumes (v - 0.5) / 0.5 in [-1,1].
    Gan,
}

pub fn normalize_for(image: &ImageSample, target: NormTarget) -> Result<Array3<f64>> {
    if image.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation(
            "pixels outside [0,1] before normalization".into(),
        ));
    }
    Ok(match target {
        NormTarget::Detector => image.pixels.clone(),
        NormTarget::Gan => image.pixels.mapv(|v| (v - 0.5) / 0.5),
    })
}

/// Map GAN-range values back to [0,1], clamping tanh overshoot.
pub fn denormalize_gan(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Row-major 2x3 affine on pixel-center coordinates.
#[derive(Debug, Clone, Copy)]
struct Affine {
    m: [f64; 6], // [a b tx; c d ty]
}

impl Affine {
    fn identity() -> Self {
        Affine {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    /// self ∘ other (apply `other` first).
    fn compose(&self, other: &Affine) -> Affine {
        let a = &self.m;
        let b = &other.m;
        Affine {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    fn inverse(&self) -> Affine {
        let [a, b, tx, c, d, ty] = self.m;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Affine {
            m: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)],
        }
    }

    fn about_center(m: [f64; 4], cx: f64, cy: f64) -> Affine {
        // T(c) . M . T(-c)
        let [a, b, c2, d] = m;
        Affine {
            m: [a, b, cx - a * cx - b * cy, c2, d, cy - c2 * cx - d * cy],
        }
    }
}

/// Jointly augment an image and its landmarks.
///
/// Color transforms touch only pixels; geometric transforms apply the same
/// affine to pixels (inverse bilinear warp, zero fill) and to landmark
/// coordinates (points leaving the frame are dropped, not clamped). Training
/// heatmaps are re-rendered from the transformed coordinates afterwards.
///
/// Draw order is part of the determinism contract: color coin, then
/// (brightness, contrast, saturation, hue) if the coin fired; then per
/// geometric transform coin + parameters in the order rotation, translation,
/// shear, hflip, vflip.
pub fn augment_sample(
    image: &ImageSample,
    landmarks: &LandmarkSet,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (ImageSample, LandmarkSet) {
    cfg.validate().expect("invalid augmentation config");
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();

    // color stage
    if draw(rng, cfg.color.probability) {
        let c = &cfg.color;
        let brightness = sample_sym(rng, c.brightness);
        let contrast = sample_range(rng, c.contrast);
        let saturation = sample_range(rng, c.saturation);
        let hue = sample_sym(rng, c.hue);
        apply_color(&mut out.pixels, brightness, contrast, saturation, hue);
    }

    // geometric stage: compose one affine, innermost first
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut a = Affine::identity();
    let mut any_geo = false;
    let g = &cfg.geometric;
    if draw(rng, g.probability) {
        let deg = sample_sym(rng, g.rotation_deg);
        let r = deg.to_radians();
        a = Affine::about_center([r.cos(), -r.sin(), r.sin(), r.cos()], cx, cy).compose(&a);
        any_geo = true;
    }
    if draw(rng, g.probability) {
        let tx = sample_sym(rng, g.translate_frac) * w as f64;
        let ty = sample_sym(rng, g.translate_frac) * h as f64;
        a = Affine {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
        .compose(&a);
        any_geo = true;
    }
    if draw(rng, g.probability) {
        let s = sample_sym(rng, g.shear);
        a = Affine::about_center([1.0, s, 0.0, 1.0], cx, cy).compose(&a);
        any_geo = true;
    }
    if draw(rng, g.hflip_p) {
        a = Affine::about_center([-1.0, 0.0, 0.0, 1.0], cx, cy).compose(&a);
        any_geo = true;
    }
    if draw(rng, g.vflip_p) {
        a = Affine::about_center([1.0, 0.0, 0.0, -1.0], cx, cy).compose(&a);
        any_geo = true;
    }

    let mut pts = landmarks.clone();
    if any_geo {
        out.pixels = warp_bilinear(&out.pixels, &a.inverse(), g.fill);
        pts.points = pts
            .points
            .iter()
            .filter_map(|p| {
                let (x, y) = a.apply(p.x, p.y);
                (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then_some(Landmark {
                    x,
                    y,
                    kind: p.kind,
                    difficulty: p.difficulty,
                })
            })
            .collect();
    }
    (out, pts)
}

fn draw(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.gen::<f64>() < p
}

fn sample_sym(rng: &mut impl Rng, half_range: f64) -> f64 {
    (rng.gen::<f64>() * 2.0 - 1.0) * half_range
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn apply_color(
    pixels: &mut Array3<f64>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
) {
    let (h, w, _) = pixels.dim();
    // brightness: additive shift
    if brightness != 0.0 {
        pixels.mapv_inplace(|v| v + brightness);
    }
    // contrast: blend with the mean gray level
    if contrast != 1.0 {
        let mut mean = 0.0;
        for iy in 0..h {
            for ix in 0..w {
                mean += luma(pixels[(iy, ix, 0)], pixels[(iy, ix, 1)], pixels[(iy, ix, 2)]);
            }
        }
        mean /= (h * w) as f64;
        pixels.mapv_inplace(|v| mean + (v - mean) * contrast);
    }
    // saturation: blend each pixel with its gray value
    if saturation != 1.0 {
        for iy in 0..h {
            for ix in 0..w {
                let g = luma(pixels[(iy, ix, 0)], pixels[(iy, ix, 1)], pixels[(iy, ix, 2)]);
                for ch in 0..3 {
                    let v = pixels[(iy, ix, ch)];
                    pixels[(iy, ix, ch)] = g + (v - g) * saturation;
                }
            }
        }
    }
    if hue != 0.0 {
        for iy in 0..h {
            for ix in 0..w {
                let rgb = [
                    pixels[(iy, ix, 0)].clamp(0.0, 1.0),
                    pixels[(iy, ix, 1)].clamp(0.0, 1.0),
                    pixels[(iy, ix, 2)].clamp(0.0, 1.0),
                ];
                let (hh, ss, vv) = rgb_to_hsv(rgb);
                let out = hsv_to_rgb(((hh + hue).rem_euclid(1.0), ss, vv));
                for ch in 0..3 {
                    pixels[(iy, ix, ch)] = out[ch];
                }
            }
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb((h, s, v): (f64, f64, f64)) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Inverse-map bilinear warp with constant fill outside the frame. Pure
/// flips hit integer source coordinates and reproduce pixels exactly.
fn warp_bilinear(pixels: &Array3<f64>, inv: &Affine, fill: f64) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let mut out = Array3::<f64>::from_elem((h, w, c), fill);
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = inv.apply(ox as f64, oy as f64);
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let sample = |yy: f64, xx: f64| -> [f64; 3] {
                let (yy, xx) = (yy as isize, xx as isize);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    [fill; 3]
                } else {
                    [
                        pixels[(yy as usize, xx as usize, 0)],
                        pixels[(yy as usize, xx as usize, 1)],
                        pixels[(yy as usize, xx as usize, 2)],
                    ]
                }
            };
            let p00 = sample(y0, x0);
            let p01 = sample(y0, x0 + 1.0);
            let p10 = sample(y0 + 1.0, x0);
            let p11 = sample(y0 + 1.0, x0 + 1.0);
            for ch in 0..c {
                out[(oy, ox, ch)] = (1.0 - fy) * ((1.0 - fx) * p00[ch] + fx * p01[ch])
                    + fy * ((1.0 - fx) * p10[ch] + fx * p11[ch]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

/// Group-disjoint k-fold split over `source_id`s (sorted, round-robin).
/// Frames of one recording/surgery never straddle folds.
pub fn make_folds(manifest: &[ImageSample], k: usize) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Config("fold count must be >= 1".into()));
    }
    let mut groups: Vec<&str> = manifest.iter().map(|s| s.source_id.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < k {
        return Err(Error::Config(format!(
            "{} distinct source groups < {k} folds",
            groups.len()
        )));
    }
    let assignments: BTreeMap<String, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.to_string(), i % k))
        .collect();
    let mut train = vec![Vec::new(); k];
    let mut val = vec![Vec::new(); k];
    for (idx, s) in manifest.iter().enumerate() {
        let fold = assignments[&s.source_id];
        val[fold].push(idx);
        for (f, t) in train.iter_mut().enumerate() {
            if f != fold {
                t.push(idx);
            }
        }
    }
    Ok(FoldSplit {
        k,
        assignments,
        train,
        val,
    })
}

// ---------------------------------------------------------------------------
// manifest + image I/O
// ---------------------------------------------------------------------------

/// One line of the dataset manifest (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub domain: Domain,
    pub source_id: String,
    pub fold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_path: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::parse(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Load a manifest record's image as an [`ImageSample`] at the working
/// resolution (bilinear resize when the stored frame differs), with its
/// landmarks scaled from the annotation's native resolution.
pub fn load_sample(
    rec: &ManifestRecord,
    root: &Path,
    size: (usize, usize),
) -> Result<(ImageSample, LandmarkSet)> {
    let img_path = root.join(&rec.path);
    let img = image::open(&img_path)
        .map_err(|e| Error::parse(&img_path, e.to_string()))?
        .into_rgb8();
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::<f64>::zeros((ih, iw, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            pixels[(y as usize, x as usize, ch)] = p.0[ch] as f64 / 255.0;
        }
    }
    let (tw, th) = size;
    if (iw, ih) != (tw, th) {
        pixels = resize_bilinear(&pixels, tw, th);
    }
    let mut sample = ImageSample::new(pixels, rec.domain, rec.source_id.clone())?;
    sample.fold_id = rec.fold;
    let landmarks = match &rec.annotation_path {
        Some(ap) => {
            let ann_path = root.join(ap);
            sample.annotation_path = Some(ann_path.clone());
            let set = load_annotations(&ann_path, size)?;
            set.validate_bounds(tw, th)?;
            set
        }
        None => LandmarkSet::default(),
    };
    Ok((sample, landmarks))
}

/// Save pixels in [0,1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = pixels[(y as usize, x as usize, ch)].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::parse(path, e.to_string()))
}

fn resize_bilinear(pixels: &Array3<f64>, tw: usize, th: usize) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let mut out = Array3::<f64>::zeros((th, tw, c));
    for oy in 0..th {
        let sy = ((oy as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..tw {
            let sx = ((ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                out[(oy, ox, ch)] = (1.0 - fy)
                    * ((1.0 - fx) * pixels[(y0, x0, ch)] + fx * pixels[(y0, x1, ch)])
                    + fy * ((1.0 - fx) * pixels[(y1, x0, ch)] + fx * pixels[(y1, x1, ch)]);
            }
        }
    }
    out
}
