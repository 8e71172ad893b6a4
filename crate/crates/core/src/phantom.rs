//! Synthetic anteroposterior pelvis phantoms with exact landmark ground truth,
//! plus the occlusion/truncation degradations that produce "unstructured"
//! samples.
//!
//! Geometry is expressed in canonical units relative to the image centre and
//! scaled by `min(width, height)`, so the same anatomy renders at any size.
//! The patient's right side is drawn on the image left.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::landmarks::{
    category_side, global_id, load_annotated, save_annotated, validate_annotation,
    AnnotatedImage, Landmark, Side, Spacing, NUM_CATEGORIES, NUM_LANDMARKS,
};

/// Closed interval a jittered quantity is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterRange {
    pub min: f64,
    pub max: f64,
}

impl JitterRange {
    pub const fn new(min: f64, max: f64) -> Self {
        JitterRange { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        JitterRange { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn grid(&self) -> [f64; 3] {
        [self.min, 0.5 * (self.min + self.max), self.max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    pub pelvis_tilt_deg: JitterRange,
    pub head_radius_px: JitterRange,
    pub neck_shaft_deg: JitterRange,
    pub limb_rotation_deg: JitterRange,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig::with_size(256, 256)
    }
}

impl PhantomConfig {
    /// Default anatomy jitter for an image of the given size. Spacing keeps
    /// the 256 mm field of view of the 256-pixel default.
    pub fn with_size(height: usize, width: usize) -> Self {
        let scale = height.min(width) as f64 / 256.0;
        PhantomConfig {
            height,
            width,
            spacing_mm: 1.0 / scale,
            pelvis_tilt_deg: JitterRange::new(-4.0, 4.0),
            head_radius_px: JitterRange::new(11.5 * scale, 13.5 * scale),
            neck_shaft_deg: JitterRange::new(122.0, 140.0),
            limb_rotation_deg: JitterRange::new(-20.0, 20.0),
            noise_sigma: 0.02,
            seed: 0,
        }
    }

    /// Zero anatomy jitter, zero noise.
    pub fn canonical(height: usize, width: usize) -> Self {
        let mut cfg = PhantomConfig::with_size(height, width);
        let r = 0.5 * (cfg.head_radius_px.min + cfg.head_radius_px.max);
        cfg.pelvis_tilt_deg = JitterRange::fixed(0.0);
        cfg.head_radius_px = JitterRange::fixed(r);
        cfg.neck_shaft_deg = JitterRange::fixed(131.0);
        cfg.limb_rotation_deg = JitterRange::fixed(0.0);
        cfg.noise_sigma = 0.0;
        cfg
    }

    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Checks ranges and image size, then that no combination of jitter
    /// extremes pushes a landmark outside the image.
    pub fn validate(&self) -> Result<()> {
        if self.height < 64 || self.width < 64 {
            return Err(Error::Config(format!(
                "image size {}x{} is below the 64x64 minimum",
                self.height, self.width
            )));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::Config("spacing_mm must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        for (name, r) in [
            ("pelvis_tilt_deg", self.pelvis_tilt_deg),
            ("head_radius_px", self.head_radius_px),
            ("neck_shaft_deg", self.neck_shaft_deg),
            ("limb_rotation_deg", self.limb_rotation_deg),
        ] {
            if !(r.min <= r.max) || !r.min.is_finite() || !r.max.is_finite() {
                return Err(Error::Config(format!("{name} range [{}, {}] is empty", r.min, r.max)));
            }
        }
        if self.head_radius_px.min <= 0.0 {
            return Err(Error::Config("head_radius_px must be positive".into()));
        }
        if self.limb_rotation_deg.min.abs() >= 80.0 || self.limb_rotation_deg.max.abs() >= 80.0 {
            return Err(Error::Config("limb_rotation_deg must stay within (-80, 80)".into()));
        }

        let (w, h) = (self.width as f64, self.height as f64);
        let mut escaping = std::collections::BTreeSet::new();
        for tilt in self.pelvis_tilt_deg.grid() {
            for r in self.head_radius_px.grid() {
                for nsa in self.neck_shaft_deg.grid() {
                    for rot in self.limb_rotation_deg.grid() {
                        let side = SideAnatomy {
                            head_radius_px: r,
                            neck_shaft_deg: nsa,
                            limb_rotation_deg: rot,
                        };
                        let anatomy = Anatomy {
                            tilt_deg: tilt,
                            sides: [side, side],
                        };
                        let geo = Geometry::new(self, &anatomy);
                        for (id, &(x, y)) in geo.landmarks.iter().enumerate() {
                            if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
                                escaping.insert(id);
                            }
                        }
                    }
                }
            }
        }
        if escaping.is_empty() {
            Ok(())
        } else {
            let names: Vec<String> = escaping
                .iter()
                .map(|&id| {
                    let (c, s) = category_side(id);
                    format!("{c}{}", if s == Side::Left { "L" } else { "R" })
                })
                .collect();
            Err(Error::Config(format!(
                "jitter ranges can place landmarks out of bounds: {}",
                names.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SideAnatomy {
    head_radius_px: f64,
    neck_shaft_deg: f64,
    limb_rotation_deg: f64,
}

#[derive(Debug, Clone, Copy)]
struct Anatomy {
    tilt_deg: f64,
    /// Indexed Left, Right.
    sides: [SideAnatomy; 2],
}

impl Anatomy {
    fn sample(cfg: &PhantomConfig, rng: &mut impl Rng) -> Self {
        let tilt_deg = cfg.pelvis_tilt_deg.sample(rng);
        let mut side = || SideAnatomy {
            head_radius_px: cfg.head_radius_px.sample(rng),
            neck_shaft_deg: cfg.neck_shaft_deg.sample(rng),
            limb_rotation_deg: cfg.limb_rotation_deg.sample(rng),
        };
        let left = side();
        let right = side();
        Anatomy {
            tilt_deg,
            sides: [left, right],
        }
    }
}

type P = (f64, f64);

fn add(a: P, b: P) -> P {
    (a.0 + b.0, a.1 + b.1)
}

fn sub(a: P, b: P) -> P {
    (a.0 - b.0, a.1 - b.1)
}

fn mul(a: P, k: f64) -> P {
    (a.0 * k, a.1 * k)
}

/// Rotation in image coordinates (y down).
fn rot(v: P, theta: f64) -> P {
    let (s, c) = theta.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

/// Per-side primitive placement in canonical units.
#[derive(Debug, Clone, Copy)]
struct SideShapes {
    head: P,
    head_radius: f64,
    acetabular_radius: f64,
    roof_from: f64,
    roof_to: f64,
    shaft_dir: P,
    junction: P,
    trochanter: P,
    teardrop_center: P,
    ring_center: P,
    wing_center: P,
}

struct Geometry {
    /// Landmark pixel positions by global id.
    landmarks: Vec<P>,
    shapes: [SideShapes; 2],
    center: P,
    scale: f64,
    tilt: f64,
}

const HEAD_OFFSET: P = (-0.20, 0.02);
const ADDUCTION_DEG: f64 = 6.0;
const NECK_DISTAL: f64 = 0.07;
const NECK_JUNCTION: f64 = 0.11;
const SHAFT_PROXIMAL: f64 = 0.09;
const SHAFT_DISTAL: f64 = 0.30;

impl Geometry {
    fn new(cfg: &PhantomConfig, anatomy: &Anatomy) -> Self {
        let scale = cfg.scale();
        let center = cfg.center();
        let tilt = anatomy.tilt_deg.to_radians();
        let mut canon = vec![(0.0, 0.0); NUM_LANDMARKS];
        let mut shapes = Vec::with_capacity(2);

        for (k, side) in Side::BOTH.into_iter().enumerate() {
            let sa = anatomy.sides[k];
            let m = side.medial_sign();
            // Pelvic points are placed untilted, then the pelvis (with the
            // seated femoral heads) rotates about the image centre.
            let head = rot((-m * HEAD_OFFSET.0.abs() * 1.0, HEAD_OFFSET.1), tilt);
            let pelvic = |off: P| add(head, rot((m * off.0, off.1), tilt));
            let rh = sa.head_radius_px / scale;
            let ra = 1.3 * rh;
            let up_angle = |deg: f64| -> P {
                let a = deg.to_radians();
                (a.sin() * ra, -a.cos() * ra)
            };
            let p3 = pelvic(up_angle(-55.0));
            let p4 = pelvic(up_angle(150.0));
            let p2 = pelvic((0.075, -0.030));
            let p8 = pelvic((0.085, 0.060));
            let p1 = pelvic((0.115, -0.100));
            let p9 = pelvic((0.065, 0.175));
            let p5 = add(head, mul((m * 0.8, 0.6), 0.7 * rh));

            // The femur hangs from the head; its axis does not follow the
            // pelvic tilt.
            let add_rad = ADDUCTION_DEG.to_radians();
            let shaft_dir = (m * add_rad.sin(), add_rad.cos());
            let neck_dir = rot(shaft_dir, -m * sa.neck_shaft_deg.to_radians());
            let foreshorten = sa.limb_rotation_deg.to_radians().cos();
            let p6 = head;
            let p10 = sub(head, mul(neck_dir, NECK_DISTAL * foreshorten));
            let junction = sub(head, mul(neck_dir, NECK_JUNCTION * foreshorten));
            let p11 = add(junction, mul(shaft_dir, SHAFT_PROXIMAL));
            let p12 = add(junction, mul(shaft_dir, SHAFT_DISTAL));
            let lateral = rot(shaft_dir, m * PI / 2.0);
            let p7 = sub(add(junction, mul(lateral, 0.045)), mul(shaft_dir, 0.03));
            let trochanter = add(add(p7, mul(shaft_dir, 0.028)), mul(lateral, -0.008));

            for (cat, p) in [
                (1, p1),
                (2, p2),
                (3, p3),
                (4, p4),
                (5, p5),
                (6, p6),
                (7, p7),
                (8, p8),
                (9, p9),
                (10, p10),
                (11, p11),
                (12, p12),
            ] {
                canon[global_id(cat, side)] = p;
            }
            // Roof arc angles in image atan2 convention.
            let ang = |p: P| {
                let d = sub(p, head);
                d.1.atan2(d.0)
            };
            shapes.push(SideShapes {
                head,
                head_radius: rh,
                acetabular_radius: ra,
                roof_from: ang(p3),
                roof_to: ang(p4),
                shaft_dir,
                junction,
                trochanter,
                teardrop_center: sub(p8, (0.0, 0.018)),
                ring_center: pelvic((0.07, 0.13)),
                wing_center: pelvic((-0.02, -0.17)),
            });
        }

        let landmarks = canon
            .iter()
            .map(|&(u, v)| (center.0 + u * scale, center.1 + v * scale))
            .collect();
        Geometry {
            landmarks,
            shapes: [shapes[0], shapes[1]],
            center,
            scale,
            tilt,
        }
    }

    fn to_canon(&self, x: f64, y: f64) -> P {
        ((x - self.center.0) / self.scale, (y - self.center.1) / self.scale)
    }
}

const BACKGROUND: f64 = 0.08;

/// Painter's-algorithm raster of the phantom anatomy.
struct Painter<'a> {
    img: &'a mut GrayImage,
    geo: &'a Geometry,
}

impl Painter<'_> {
    fn paint(&mut self, inside: impl Fn(P) -> bool, value: f64) {
        let (w, h) = (self.img.width(), self.img.height());
        for y in 0..h {
            for x in 0..w {
                if inside(self.geo.to_canon(x as f64, y as f64)) {
                    self.img.set(x, y, value);
                }
            }
        }
    }
}

fn in_ellipse(p: P, c: P, radii: P, tilt: f64) -> bool {
    let d = rot(sub(p, c), -tilt);
    (d.0 / radii.0).powi(2) + (d.1 / radii.1).powi(2) <= 1.0
}

fn dist_to_segment(p: P, a: P, b: P) -> f64 {
    let ab = sub(b, a);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = add(a, mul(ab, t));
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

fn norm(p: P) -> f64 {
    (p.0 * p.0 + p.1 * p.1).sqrt()
}

/// Whether angle `a` lies on the arc swept from `from` to `to` through the
/// top of the circle (negative y).
fn on_upper_arc(a: f64, from: f64, to: f64) -> bool {
    // Sweep in the direction that passes through -pi/2.
    let sweep = |s: f64, e: f64, x: f64| {
        let span = (e - s).rem_euclid(2.0 * PI);
        (x - s).rem_euclid(2.0 * PI) <= span
    };
    let top = -PI / 2.0;
    if sweep(from, to, top) {
        sweep(from, to, a)
    } else {
        sweep(to, from, a)
    }
}

fn render(geo: &Geometry, cfg: &PhantomConfig) -> GrayImage {
    let mut img = GrayImage::filled(cfg.width, cfg.height, BACKGROUND);
    let tilt = geo.tilt;
    let lm = |cat: usize, side: Side| geo.to_canon_lm(global_id(cat, side));
    let mut p = Painter { img: &mut img, geo };

    p.paint(|q| in_ellipse(q, (0.0, 0.05), (0.48, 0.55), 0.0), 0.15);
    p.paint(|q| in_ellipse(q, rot((0.0, -0.12), tilt), (0.07, 0.12), tilt), 0.34);
    for (k, side) in Side::BOTH.into_iter().enumerate() {
        let s = geo.shapes[k];
        p.paint(|q| in_ellipse(q, s.wing_center, (0.14, 0.13), tilt), 0.38);
        p.paint(|q| in_ellipse(q, s.ring_center, (0.06, 0.055), tilt), 0.40);
        p.paint(|q| in_ellipse(q, s.ring_center, (0.034, 0.03), tilt), 0.13);
        let (a, b) = (lm(1, side), lm(9, side));
        p.paint(|q| dist_to_segment(q, a, b) <= 0.008, 0.52);
        // Teardrop: U opening upwards whose lowest point is landmark 8.
        let tc = s.teardrop_center;
        p.paint(
            |q| {
                let d = sub(q, tc);
                let r = norm(d);
                (r - 0.018).abs() <= 0.006 && d.1 >= -0.004
            },
            0.64,
        );
        // Y-cartilage: three short spokes meeting at landmark 2.
        let y2 = lm(2, side);
        let m = side.medial_sign();
        for dir in [(0.0, -1.0), (m * 0.87, 0.5), (-m * 0.87, 0.5)] {
            let end = add(y2, mul(rot(dir, tilt), 0.018));
            p.paint(|q| dist_to_segment(q, y2, end) <= 0.004, 0.58);
        }
        // Acetabular roof arc from landmark 3 over the head to landmark 4.
        p.paint(
            |q| {
                let d = sub(q, s.head);
                (norm(d) - s.acetabular_radius).abs() <= 0.007
                    && on_upper_arc(d.1.atan2(d.0), s.roof_from, s.roof_to)
            },
            0.70,
        );
        // Femur: shaft with medullary canal, neck, trochanter, head.
        let shaft_top = sub(s.junction, mul(s.shaft_dir, 0.02));
        let shaft_end = add(lm(12, side), mul(s.shaft_dir, 0.03));
        p.paint(|q| dist_to_segment(q, shaft_top, shaft_end) <= 0.032, 0.55);
        let (c11, c12) = (lm(11, side), lm(12, side));
        p.paint(|q| dist_to_segment(q, c11, c12) <= 0.013, 0.44);
        let head = s.head;
        let junction = s.junction;
        p.paint(|q| dist_to_segment(q, head, junction) <= 0.027, 0.58);
        let c10 = lm(10, side);
        p.paint(|q| norm(sub(q, c10)) <= 0.012, 0.50);
        p.paint(|q| norm(sub(q, s.trochanter)) <= 0.03, 0.56);
        p.paint(|q| norm(sub(q, head)) <= s.head_radius, 0.78);
        let fovea = lm(5, side);
        let fr = 0.25 * s.head_radius;
        p.paint(|q| norm(sub(q, fovea)) <= fr, 0.60);
    }
    img
}

impl Geometry {
    fn to_canon_lm(&self, id: usize) -> P {
        let (x, y) = self.landmarks[id];
        self.to_canon(x, y)
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn seed_mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn add_noise(img: &mut GrayImage, sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
    img.clamp01();
}

/// Annotation resolution in pixels. Coordinates on this dyadic grid make
/// horizontal mirroring exactly reversible.
pub const ANNOTATION_GRID: f64 = 1.0 / 1024.0;

fn snap(v: f64) -> f64 {
    (v / ANNOTATION_GRID).round() * ANNOTATION_GRID
}

/// Renders one phantom. Deterministic in `(cfg, sample_seed)`.
pub fn generate_phantom(cfg: &PhantomConfig, sample_seed: u64) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, sample_seed));
    let anatomy = Anatomy::sample(cfg, &mut rng);
    let geo = Geometry::new(cfg, &anatomy);
    let mut pixels = render(&geo, cfg);
    add_noise(&mut pixels, cfg.noise_sigma, &mut rng);
    let landmarks = geo
        .landmarks
        .iter()
        .map(|&(x, y)| Landmark::visible(snap(x), snap(y)))
        .collect();
    Ok(AnnotatedImage {
        id: format!("phantom_{sample_seed}"),
        pixels,
        spacing: Spacing::uniform(cfg.spacing_mm),
        landmarks,
        structured: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnstructuredMode {
    Occlude,
    Truncate,
}

/// Fraction of `min(width, height)` used as occlusion radius.
pub const OCCLUSION_RADIUS: f64 = 0.06;
/// Landmarks must lie below this fraction of the height to be truncated.
pub const TRUNCATION_REGION: f64 = 0.7;
const TRUNCATION_MARGIN: f64 = 0.03;

/// First image row removed when truncating so that all `missing` landmarks
/// fall outside.
pub fn truncation_row(a: &AnnotatedImage, missing: &[usize]) -> Result<usize> {
    let h = a.height() as f64;
    let scale = a.height().min(a.width()) as f64;
    let mut top = f64::INFINITY;
    for &id in missing {
        let lm = a.landmarks[id];
        if !lm.visible {
            continue;
        }
        if lm.y < TRUNCATION_REGION * h {
            return Err(Error::InvalidArgument(format!(
                "landmark {id} at y = {:.1} is not in the lower {:.0}% of the image",
                lm.y,
                100.0 * (1.0 - TRUNCATION_REGION)
            )));
        }
        top = top.min(lm.y);
    }
    if !top.is_finite() {
        return Err(Error::InvalidArgument("no visible landmark to truncate".into()));
    }
    Ok(((top - TRUNCATION_MARGIN * scale).floor().max(0.0)) as usize)
}

/// Removes the listed landmarks by occluding them or truncating the bottom of
/// the image. Landmarks that are not listed keep their coordinates.
pub fn inject_unstructured(
    a: &AnnotatedImage,
    missing: &[usize],
    mode: UnstructuredMode,
    texture_seed: u64,
) -> Result<AnnotatedImage> {
    if missing.is_empty() {
        return Err(Error::InvalidArgument("missing landmark list is empty".into()));
    }
    if let Some(&bad) = missing.iter().find(|&&id| id >= NUM_LANDMARKS) {
        return Err(Error::InvalidArgument(format!("unknown landmark id {bad}")));
    }
    let mut out = a.clone();
    let (w, h) = (a.width(), a.height());
    match mode {
        UnstructuredMode::Occlude => {
            let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
            let sigma = 0.03;
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let r = OCCLUSION_RADIUS * w.min(h) as f64;
            for &id in missing {
                let lm = a.landmarks[id];
                if !lm.visible {
                    continue;
                }
                let (x0, x1) = ((lm.x - r).floor().max(0.0) as usize, (lm.x + r).ceil() as usize);
                let (y0, y1) = ((lm.y - r).floor().max(0.0) as usize, (lm.y + r).ceil() as usize);
                for y in y0..=y1.min(h - 1) {
                    for x in x0..=x1.min(w - 1) {
                        let (dx, dy) = (x as f64 - lm.x, y as f64 - lm.y);
                        if dx * dx + dy * dy <= r * r {
                            let v = BACKGROUND + normal.sample(&mut rng);
                            out.pixels.set(x, y, v.clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
        UnstructuredMode::Truncate => {
            let cut = truncation_row(a, missing)?;
            for (id, lm) in a.landmarks.iter().enumerate() {
                if lm.visible && lm.y >= cut as f64 && !missing.contains(&id) {
                    return Err(Error::InvalidArgument(format!(
                        "truncating at row {cut} would also remove unlisted landmark {id}"
                    )));
                }
            }
            for y in cut..h {
                for x in 0..w {
                    out.pixels.set(x, y, 0.0);
                }
            }
        }
    }
    for &id in missing {
        out.landmarks[id] = Landmark::missing();
    }
    out.structured = false;
    Ok(out)
}

/// Probability mass over missing landmark categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingDistribution {
    pub category_10: f64,
    pub category_12: f64,
    /// Spread uniformly over the other ten categories.
    pub other: f64,
}

impl Default for MissingDistribution {
    fn default() -> Self {
        MissingDistribution {
            category_10: 0.4,
            category_12: 0.4,
            other: 0.2,
        }
    }
}

impl MissingDistribution {
    fn category_weights(&self) -> [f64; NUM_CATEGORIES] {
        let mut w = [self.other / (NUM_CATEGORIES - 2) as f64; NUM_CATEGORIES];
        w[9] = self.category_10;
        w[11] = self.category_12;
        w
    }

    /// Draws one or two distinct missing landmarks.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<usize> {
        let weights = self.category_weights();
        let total: f64 = weights.iter().sum();
        let count = if rng.gen_bool(0.6) { 1 } else { 2 };
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut u = rng.gen::<f64>() * total;
            let mut cat = NUM_CATEGORIES;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    cat = i + 1;
                    break;
                }
                u -= w;
            }
            let side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
            let id = global_id(cat, side);
            if !out.contains(&id) {
                out.push(id);
            }
        }
        out.sort_unstable();
        out
    }
}

/// Sample counts per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSpec {
    pub train: usize,
    pub val: usize,
    pub train_unstructured: usize,
    pub val_unstructured: usize,
    pub missing: MissingDistribution,
}

impl Default for ManifestSpec {
    fn default() -> Self {
        ManifestSpec {
            train: 257,
            val: 53,
            train_unstructured: 32,
            val_unstructured: 18,
            missing: MissingDistribution::default(),
        }
    }
}

impl ManifestSpec {
    /// Split sizes with the default unstructured proportions of each split.
    pub fn scaled(train: usize, val: usize) -> Self {
        let d = ManifestSpec::default();
        ManifestSpec {
            train,
            val,
            train_unstructured: (train as f64 * d.train_unstructured as f64 / d.train as f64).round()
                as usize,
            val_unstructured: (val as f64 * d.val_unstructured as f64 / d.val as f64).round() as usize,
            missing: d.missing,
        }
    }

    /// Same unstructured fraction in both splits.
    pub fn with_fraction(train: usize, val: usize, fraction: f64) -> Self {
        ManifestSpec {
            train,
            val,
            train_unstructured: (train as f64 * fraction).round() as usize,
            val_unstructured: (val as f64 * fraction).round() as usize,
            missing: MissingDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub structured: bool,
    pub missing: Vec<usize>,
    pub mode: Option<UnstructuredMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub phantom: PhantomConfig,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> (&'static str, u64) {
        match self {
            Split::Train => ("train", 1),
            Split::Val => ("val", 2),
        }
    }
}

/// Generates the sample for position `index` of a split, unstructured or not.
pub fn generate_sample(
    cfg: &PhantomConfig,
    split: Split,
    index: usize,
    unstructured: bool,
    missing: &MissingDistribution,
) -> Result<(AnnotatedImage, ManifestEntry)> {
    let (name, tag) = split.tag();
    let sample_seed = seed_mix(tag, index as u64);
    let mut sample = generate_phantom(cfg, sample_seed)?;
    sample.id = format!("{name}_{index:04}");
    let mut entry = ManifestEntry {
        id: sample.id.clone(),
        structured: true,
        missing: Vec::new(),
        mode: None,
    };
    if unstructured {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed ^ 0x5EED, sample_seed));
        let mut ids = missing.draw(&mut rng);
        let all_distal = ids.iter().all(|&id| category_side(id).0 == 12);
        let mut mode = UnstructuredMode::Occlude;
        if all_distal && rng.gen_bool(0.5) {
            if let Ok(cut) = truncation_row(&sample, &ids) {
                // Anything else below the cut goes missing with it.
                for (id, lm) in sample.landmarks.iter().enumerate() {
                    if lm.visible && lm.y >= cut as f64 && !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                ids.sort_unstable();
                if truncation_row(&sample, &ids).is_ok() {
                    mode = UnstructuredMode::Truncate;
                }
            }
        }
        sample = inject_unstructured(&sample, &ids, mode, rng.gen())?;
        entry.structured = false;
        entry.missing = ids;
        entry.mode = Some(mode);
    }
    debug_assert!(validate_annotation(&sample).is_empty());
    Ok((sample, entry))
}

fn pick_unstructured(count: usize, n: usize, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut flags = vec![false; n];
    for &i in idx.iter().take(count.min(n)) {
        flags[i] = true;
    }
    flags
}

/// Writes `images/<id>.png`, `images/<id>.json` and `manifest.json` under `out`.
pub fn build_dataset(cfg: &PhantomConfig, spec: &ManifestSpec, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if spec.train == 0 || spec.val == 0 {
        return Err(Error::Config("train and val counts must be at least 1".into()));
    }
    if spec.train_unstructured > spec.train || spec.val_unstructured > spec.val {
        return Err(Error::Config("more unstructured samples than samples".into()));
    }
    let images = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let mut manifest = DatasetManifest {
        phantom: cfg.clone(),
        train: Vec::with_capacity(spec.train),
        val: Vec::with_capacity(spec.val),
    };
    for (split, n, k) in [
        (Split::Train, spec.train, spec.train_unstructured),
        (Split::Val, spec.val, spec.val_unstructured),
    ] {
        let flags = pick_unstructured(k, n, seed_mix(cfg.seed, split.tag().1 + 100));
        for (i, &unstructured) in flags.iter().enumerate() {
            let (sample, entry) = generate_sample(cfg, split, i, unstructured, &spec.missing)?;
            save_annotated(&sample, &images)?;
            match split {
                Split::Train => manifest.train.push(entry),
                Split::Val => manifest.val.push(entry),
            }
        }
    }
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let load = |entries: &[ManifestEntry]| -> Result<Vec<AnnotatedImage>> {
            entries
                .iter()
                .map(|e| load_annotated(&root.join(IMAGE_DIR).join(format!("{}.json", e.id))))
                .collect()
        };
        let train = load(&manifest.train)?;
        let val = load(&manifest.val)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn split(&self, split: Split) -> &[AnnotatedImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}
