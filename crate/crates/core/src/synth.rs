//! Deterministic synthetic "suture phantom" generator: random smooth curves
//! (quadratic splines) over a textured disk, rendered twice — once per
//! domain style — from identical geometry. Landmarks are the curve
//! endpoints; the suture mask marks every rasterized curve pixel. The
//! paired renders exist only for testing; generated datasets draw the two
//! domains from disjoint scene streams so GAN training stays unpaired.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_folds, save_annotations, save_manifest, save_png, Domain, ImageSample, Landmark,
    LandmarkSet, ManifestRecord, PointKind,
};
use crate::error::{Error, Result};
use crate::rng::child_rng;

/// Appearance of one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainStyle {
    pub background: [f64; 3],
    pub disk: [f64; 3],
    pub suture: [f64; 3],
    /// Amplitude of the multiplicative lighting gradient (0 = flat).
    pub lighting: f64,
    /// Std of additive per-pixel Gaussian speckle.
    pub speckle_std: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture_amp: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        DomainStyle {
            background: [0.2, 0.2, 0.25],
            disk: [0.5, 0.5, 0.55],
            suture: [0.9, 0.9, 0.3],
            lighting: 0.1,
            speckle_std: 0.0,
            texture_amp: 0.05,
        }
    }
}

impl DomainStyle {
    /// Clean phantom look: bright distinct sutures on a calm backdrop.
    pub fn sim_default() -> Self {
        DomainStyle {
            background: [0.16, 0.18, 0.30],
            disk: [0.55, 0.57, 0.62],
            suture: [0.15, 0.85, 0.25],
            lighting: 0.08,
            speckle_std: 0.01,
            texture_amp: 0.04,
        }
    }

    /// Tissue-like look: strong lighting, speckle, low-contrast sutures.
    pub fn or_default() -> Self {
        DomainStyle {
            background: [0.45, 0.12, 0.12],
            disk: [0.72, 0.33, 0.30],
            suture: [0.42, 0.46, 0.52],
            lighting: 0.35,
            speckle_std: 0.05,
            texture_amp: 0.10,
        }
    }
}

/// Scene randomization ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of sutures per image.
    pub n_sutures: (usize, usize),
    /// Jitter of the curve control points, pixels.
    pub control_jitter: f64,
    pub stroke_width: f64,
    /// Mixed into the background-texture stream.
    pub texture_seed: u64,
    pub occlusion_p: f64,
    pub style_sim: DomainStyle,
    pub style_or: DomainStyle,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 128,
            height: 128,
            n_sutures: (2, 12),
            control_jitter: 4.0,
            stroke_width: 2.0,
            texture_seed: 0,
            occlusion_p: 0.1,
            style_sim: DomainStyle::sim_default(),
            style_or: DomainStyle::or_default(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("scene size must be at least 16x16".into()));
        }
        if self.n_sutures.0 > self.n_sutures.1 {
            return Err(Error::Config("n_sutures range is inverted".into()));
        }
        if self.stroke_width < 1.0 {
            return Err(Error::Config("stroke width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_p) {
            return Err(Error::Config("occlusion_p must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// One generated scene: the same geometry rendered in both domain styles.
#[derive(Debug, Clone)]
pub struct Scene {
    pub sim_image: ImageSample,
    pub or_image: ImageSample,
    pub landmarks: LandmarkSet,
    pub suture_mask: Array2<f64>,
}

struct Geometry {
    disk_center: (f64, f64),
    disk_radius: f64,
    curves: Vec<[(f64, f64); 3]>,
    occluder: Option<((f64, f64), (f64, f64), f64)>, // center, radii, angle
    light_dir: (f64, f64),
}

fn sample_geometry(rng: &mut ChaCha8Rng, p: &SceneParams) -> Geometry {
    let (w, h) = (p.width as f64, p.height as f64);
    let cx = w / 2.0 + (rng.gen::<f64>() - 0.5) * 0.08 * w;
    let cy = h / 2.0 + (rng.gen::<f64>() - 0.5) * 0.08 * h;
    let radius = 0.38 * w.min(h) * (0.9 + 0.2 * rng.gen::<f64>());
    let n = rng.gen_range(p.n_sutures.0..=p.n_sutures.1);
    let margin = (p.stroke_width.ceil() + 1.0).max(2.0);
    let clamp_pt = |(x, y): (f64, f64)| {
        (
            x.clamp(margin, w - 1.0 - margin),
            y.clamp(margin, h - 1.0 - margin),
        )
    };
    let mut curves = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.gen::<f64>() * 2.0 * PI;
        let span = (0.25 + 0.5 * rng.gen::<f64>()) * PI * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let r0 = radius * (0.80 + 0.25 * rng.gen::<f64>());
        let r1 = radius * (0.80 + 0.25 * rng.gen::<f64>());
        let p0 = clamp_pt((cx + r0 * theta.cos(), cy + r0 * theta.sin()));
        let p2 = clamp_pt((
            cx + r1 * (theta + span).cos(),
            cy + r1 * (theta + span).sin(),
        ));
        let rm = radius * (0.2 + 0.4 * rng.gen::<f64>());
        let mid_angle = theta + span / 2.0;
        let jx = (rng.gen::<f64>() - 0.5) * 2.0 * p.control_jitter;
        let jy = (rng.gen::<f64>() - 0.5) * 2.0 * p.control_jitter;
        let p1 = clamp_pt((cx + rm * mid_angle.cos() + jx, cy + rm * mid_angle.sin() + jy));
        curves.push([p0, p1, p2]);
    }
    let occluder = if rng.gen::<f64>() < p.occlusion_p {
        let ox = cx + (rng.gen::<f64>() - 0.5) * radius;
        let oy = cy + (rng.gen::<f64>() - 0.5) * radius;
        let ra = radius * (0.1 + 0.15 * rng.gen::<f64>());
        let rb = radius * (0.05 + 0.1 * rng.gen::<f64>());
        let ang = rng.gen::<f64>() * PI;
        Some(((ox, oy), (ra, rb), ang))
    } else {
        None
    };
    let light_angle = rng.gen::<f64>() * 2.0 * PI;
    Geometry {
        disk_center: (cx, cy),
        disk_radius: radius,
        curves,
        occluder,
        light_dir: (light_angle.cos(), light_angle.sin()),
    }
}

fn bezier(c: &[(f64, f64); 3], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * c[0].0 + 2.0 * u * t * c[1].0 + t * t * c[2].0,
        u * u * c[0].1 + 2.0 * u * t * c[1].1 + t * t * c[2].1,
    )
}

fn rasterize_mask(geom: &Geometry, p: &SceneParams) -> Array2<f64> {
    let (w, h) = (p.width, p.height);
    let mut mask = Array2::<f64>::zeros((h, w));
    let r = p.stroke_width / 2.0;
    for c in &geom.curves {
        let approx_len = dist(c[0], c[1]) + dist(c[1], c[2]);
        let steps = (approx_len * 3.0).ceil().max(8.0) as usize;
        for s in 0..=steps {
            let (x, y) = bezier(c, s as f64 / steps as f64);
            stamp(&mut mask, x, y, r);
        }
    }
    mask
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn stamp(mask: &mut Array2<f64>, cx: f64, cy: f64, r: f64) {
    let (h, w) = mask.dim();
    let rr = r.max(0.5);
    let (x0, x1) = ((cx - rr).floor() as i64, (cx + rr).ceil() as i64);
    let (y0, y1) = ((cy - rr).floor() as i64, (cy + rr).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= rr {
                mask[(y as usize, x as usize)] = 1.0;
            }
        }
    }
}

/// Low-frequency value noise: a coarse random grid, bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cells: usize) -> Array2<f64> {
    let gw = cells + 2;
    let gh = cells + 2;
    let grid = Array2::from_shape_simple_fn((gh, gw), || rng.gen::<f64>() * 2.0 - 1.0);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let fy = y as f64 / h as f64 * cells as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let v = (1.0 - ty) * ((1.0 - tx) * grid[(y0, x0)] + tx * grid[(y0, x0 + 1)])
                + ty * ((1.0 - tx) * grid[(y0 + 1, x0)] + tx * grid[(y0 + 1, x0 + 1)]);
            out[(y, x)] = v;
        }
    }
    out
}

fn render_domain(
    geom: &Geometry,
    mask: &Array2<f64>,
    style: &DomainStyle,
    p: &SceneParams,
    texture_rng: &mut ChaCha8Rng,
    speckle_rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (w, h) = (p.width, p.height);
    let mut img = Array3::<f64>::zeros((h, w, 3));
    let texture = value_noise(texture_rng, w, h, 6);
    let (cx, cy) = geom.disk_center;
    let diag = (w as f64).hypot(h as f64);
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            // soft disk edge over ~1.5 px
            let t = ((geom.disk_radius - d) / 1.5).clamp(0.0, 1.0);
            let tex = texture[(y, x)] * style.texture_amp;
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let base = style.background[ch] * (1.0 - t) + style.disk[ch] * t;
                rgb[ch] = base + tex;
            }
            if mask[(y, x)] > 0.5 {
                rgb = style.suture;
            }
            // multiplicative lighting gradient along a random direction
            let proj = ((x as f64 - cx) * geom.light_dir.0 + (y as f64 - cy) * geom.light_dir.1)
                / diag;
            let light = 1.0 + style.lighting * 2.0 * proj;
            for ch in 0..3 {
                rgb[ch] *= light;
            }
            for ch in 0..3 {
                img[(y, x, ch)] = rgb[ch].clamp(0.0, 1.0);
            }
        }
    }
    if let Some(((ox, oy), (ra, rb), ang)) = geom.occluder {
        let (ca, sa) = (ang.cos(), ang.sin());
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - ox;
                let dy = y as f64 - oy;
                let u = (dx * ca + dy * sa) / ra;
                let v = (-dx * sa + dy * ca) / rb;
                if u * u + v * v <= 1.0 {
                    for ch in 0..3 {
                        img[(y, x, ch)] = 0.75 + 0.05 * (ch as f64);
                    }
                }
            }
        }
    }
    if style.speckle_std > 0.0 {
        for v in img.iter_mut() {
            *v = (*v + gauss(speckle_rng) * style.speckle_std).clamp(0.0, 1.0);
        }
    }
    img
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u = 1.0 - rng.gen::<f64>();
    let v = rng.gen::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
}

/// Generate one scene: identical suture geometry rendered in both styles.
/// All randomness comes from `rng`; equal seeds give bit-identical output.
pub fn generate_scene(rng: &mut ChaCha8Rng, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let geom = sample_geometry(rng, params);
    let mask = rasterize_mask(&geom, params);
    let mut points = Vec::new();
    for c in &geom.curves {
        points.push(Landmark {
            x: c[0].0,
            y: c[0].1,
            kind: Some(PointKind::Entry),
            difficulty: None,
        });
        points.push(Landmark {
            x: c[2].0,
            y: c[2].1,
            kind: Some(PointKind::Exit),
            difficulty: None,
        });
    }
    let landmarks = LandmarkSet::new(points);
    landmarks.validate_bounds(params.width, params.height)?;

    // the two renders share geometry but draw their own texture/noise
    let tex_base: u64 = rng.gen::<u64>() ^ params.texture_seed;
    let mut tex_sim = child_rng(tex_base, "texture", &[0]);
    let mut tex_or = child_rng(tex_base, "texture", &[1]);
    let mut spk_sim = child_rng(tex_base, "speckle", &[0]);
    let mut spk_or = child_rng(tex_base, "speckle", &[1]);
    let sim_px = render_domain(&geom, &mask, &params.style_sim, params, &mut tex_sim, &mut spk_sim);
    let or_px = render_domain(&geom, &mask, &params.style_or, params, &mut tex_or, &mut spk_or);
    Ok(Scene {
        sim_image: ImageSample::new(sim_px, Domain::Sim, "scene")?,
        or_image: ImageSample::new(or_px, Domain::Or, "scene")?,
        landmarks,
        suture_mask: mask,
    })
}

/// Dataset-level knobs on top of the per-scene parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Images per domain.
    pub n_images: usize,
    /// Distinct source groups per domain (each group = one synthetic
    /// "recording"; folds never split a group).
    pub n_groups: usize,
    pub scene: SceneParams,
    /// Prefix of the generated source ids.
    pub group_prefix: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 64,
            n_groups: 4,
            scene: SceneParams::default(),
            group_prefix: "synth".into(),
        }
    }
}

/// Write a two-domain dataset: PNGs, per-frame annotation JSONs, and a
/// JSON-lines manifest. The two domains come from disjoint scene streams,
/// so the dataset is genuinely unpaired. Returns the loaded-back manifest
/// records in write order.
pub fn generate_dataset(seed: u64, spec: &DatasetSpec, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    spec.scene.validate()?;
    if spec.n_groups == 0 {
        return Err(Error::Config("need at least one source group".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for domain in [Domain::Sim, Domain::Or] {
        for i in 0..spec.n_images {
            // disjoint streams per (domain, index)
            let dtag = match domain {
                Domain::Sim => 0u64,
                Domain::Or => 1u64,
            };
            let mut rng = child_rng(seed, "scene", &[dtag, i as u64]);
            let scene = generate_scene(&mut rng, &spec.scene)?;
            let (image, _other) = match domain {
                Domain::Sim => (scene.sim_image, scene.or_image),
                Domain::Or => (scene.or_image, scene.sim_image),
            };
            let group = i % spec.n_groups;
            let source_id = format!("{}_{}_g{:02}", spec.group_prefix, domain, group);
            let img_rel = format!("images/{domain}_{i:04}.png");
            let ann_rel = format!("annotations/{domain}_{i:04}.json");
            save_png(&out_dir.join(&img_rel), &image.pixels)?;
            save_annotations(
                &out_dir.join(&ann_rel),
                &scene.landmarks,
                (spec.scene.width, spec.scene.height),
            )?;
            records.push(ManifestRecord {
                path: img_rel,
                domain,
                source_id,
                fold: group % spec.n_groups, // provisional; rewritten below
                annotation_path: Some(ann_rel),
            });
        }
    }
    // folds from the same group-disjoint assignment the loaders use
    let probe: Vec<ImageSample> = records
        .iter()
        .map(|r| {
            let mut s = ImageSample::new(
                Array3::from_elem((1, 1, 3), 0.0),
                r.domain,
                r.source_id.clone(),
            )
            .unwrap();
            s.fold_id = 0;
            s
        })
        .collect();
    let folds = make_folds(&probe, spec.n_groups.min(4).max(1))?;
    for rec in &mut records {
        rec.fold = folds.assignments[&rec.source_id];
    }
    save_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
