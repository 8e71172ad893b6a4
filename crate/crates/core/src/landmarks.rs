//! The 24-point pelvic landmark schema, the part-affinity skeleton that links
//! landmark pairs, annotated image records and the JSON sidecar format that
//! every other module reads and writes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Number of bilateral landmark categories.
pub const NUM_CATEGORIES: usize = 12;
/// Number of landmarks per image (both sides).
pub const NUM_LANDMARKS: usize = 2 * NUM_CATEGORIES;

/// Coordinate stored for landmarks that are not visible.
pub const MISSING_COORD: f64 = -1.0;

const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "Innermost point of the ilium",
    "Center of the Y-shaped cartilage",
    "Upper edge of the acetabular surface",
    "Lower edge of the acetabular surface",
    "Fovea of the ligamentum teres",
    "Center of the femoral head",
    "Tip of the greater trochanter",
    "Lower edge of the teardrop",
    "Bottom of the ischium",
    "Distal midpoint of the femoral neck",
    "Proximal midpoint of the femoral shaft",
    "Distal midpoint of the femoral shaft",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    fn offset(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    /// Image-space x direction pointing towards the pelvic midline.
    ///
    /// Radiographs are viewed in radiological convention: the patient's right
    /// side is on the image left.
    pub fn medial_sign(self) -> f64 {
        match self {
            Side::Right => 1.0,
            Side::Left => -1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Left => f.write_str("Left"),
            Side::Right => f.write_str("Right"),
        }
    }
}

/// One entry of the landmark schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LandmarkSpec {
    /// 1-based category index (1..=12).
    pub category: usize,
    pub side: Side,
    pub name: &'static str,
    pub global_id: usize,
}

/// Channel index of a (category, side) pair: `(category - 1) * 2 + side`.
pub fn global_id(category: usize, side: Side) -> usize {
    debug_assert!((1..=NUM_CATEGORIES).contains(&category));
    (category - 1) * 2 + side.offset()
}

/// Inverse of [`global_id`].
pub fn category_side(global_id: usize) -> (usize, Side) {
    let side = if global_id % 2 == 0 {
        Side::Left
    } else {
        Side::Right
    };
    (global_id / 2 + 1, side)
}

/// Global id of the same category on the opposite side.
pub fn mirrored_id(global_id: usize) -> usize {
    global_id ^ 1
}

pub fn landmark_spec(global_id: usize) -> LandmarkSpec {
    let (category, side) = category_side(global_id);
    LandmarkSpec {
        category,
        side,
        name: CATEGORY_NAMES[category - 1],
        global_id,
    }
}

/// All 24 landmark specs ordered by global id.
pub fn landmark_specs() -> Vec<LandmarkSpec> {
    (0..NUM_LANDMARKS).map(landmark_spec).collect()
}

/// Landmark categories each clinical parameter depends on.
pub const CLINICAL_DEPENDENCIES: [(&str, &[usize]); 8] = [
    ("Skinner line", &[5, 7, 11, 12]),
    ("femoral neck-shaft angle", &[6, 10, 11, 12]),
    ("femoral offset", &[6, 11, 12]),
    ("acetabular offset", &[6, 8]),
    ("center-edge angle", &[3, 6]),
    ("acetabular index", &[2, 3, 4]),
    ("Sharp angle", &[3, 8]),
    ("Kohler line", &[1, 9]),
];

/// Per-side category pairs induced by the clinical parameter groupings.
pub const TABLE2_PAIRS: [(usize, usize); 12] = [
    (6, 10),
    (10, 11),
    (11, 12),
    (6, 11),
    (6, 8),
    (3, 6),
    (2, 3),
    (3, 4),
    (3, 8),
    (5, 7),
    (7, 11),
    (1, 9),
];

/// Extra per-side pairs that give every landmark at least two distinct
/// neighbours, so a single missing landmark never leaves a visible one
/// without PAF support.
pub const SUPPORT_PAIRS: [(usize, usize); 5] = [(1, 2), (8, 9), (4, 8), (5, 6), (7, 12)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub index: usize,
    pub a: usize,
    pub b: usize,
    pub side: Side,
}

impl Edge {
    pub fn touches(&self, id: usize) -> bool {
        self.a == id || self.b == id
    }
}

/// The set of landmark pairs connected by part affinity fields. Edge `e`
/// owns PAF channels `2e` (x) and `2e + 1` (y).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    edges: Vec<Edge>,
}

impl SkeletonGraph {
    /// Builds a bilateral skeleton from per-side category pairs: all left
    /// edges first, then the right edges in the same order.
    pub fn from_category_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(2 * pairs.len());
        for side in Side::BOTH {
            for &(ca, cb) in pairs {
                if !(1..=NUM_CATEGORIES).contains(&ca) || !(1..=NUM_CATEGORIES).contains(&cb) {
                    return Err(Error::InvalidArgument(format!(
                        "edge ({ca}, {cb}) references an unknown category"
                    )));
                }
                edges.push(Edge {
                    index: edges.len(),
                    a: global_id(ca, side),
                    b: global_id(cb, side),
                    side,
                });
            }
        }
        let graph = SkeletonGraph { edges };
        let problems = graph.check();
        if problems.is_empty() {
            Ok(graph)
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn paf_channels(&self) -> usize {
        2 * self.edges.len()
    }

    pub fn incident(&self, id: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.touches(id))
    }

    pub fn degree(&self, id: usize) -> usize {
        self.incident(id).count()
    }

    pub fn side_edges(&self, side: Side) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.side == side)
    }

    /// Structural problems: self edges, duplicate unordered pairs and
    /// left/right asymmetry.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edges {
            if e.a == e.b {
                problems.push(format!("edge {} is a self edge on landmark {}", e.index, e.a));
            }
            let key = (e.a.min(e.b), e.a.max(e.b));
            if !seen.insert(key) {
                problems.push(format!("edge {} duplicates pair {:?}", e.index, key));
            }
        }
        let mirror: std::collections::BTreeSet<_> = self
            .side_edges(Side::Left)
            .map(|e| {
                let (a, b) = (mirrored_id(e.a), mirrored_id(e.b));
                (a.min(b), a.max(b))
            })
            .collect();
        let right: std::collections::BTreeSet<_> = self
            .side_edges(Side::Right)
            .map(|e| (e.a.min(e.b), e.a.max(e.b)))
            .collect();
        if mirror != right {
            problems.push("left and right edge sets are not mirror images".to_string());
        }
        problems
    }
}

/// The 24-edge skeleton derived purely from the clinical parameter groupings.
pub fn table2_skeleton() -> SkeletonGraph {
    SkeletonGraph::from_category_pairs(&TABLE2_PAIRS).expect("static edge list is valid")
}

/// Default PAF skeleton: the clinical-parameter pairs plus [`SUPPORT_PAIRS`],
/// 17 edges per side.
pub fn build_default_skeleton() -> SkeletonGraph {
    let pairs: Vec<_> = TABLE2_PAIRS.iter().chain(SUPPORT_PAIRS.iter()).copied().collect();
    SkeletonGraph::from_category_pairs(&pairs).expect("static edge list is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Landmark {
    pub fn visible(x: f64, y: f64) -> Self {
        Landmark { x, y, visible: true }
    }

    pub fn missing() -> Self {
        Landmark {
            x: MISSING_COORD,
            y: MISSING_COORD,
            visible: false,
        }
    }

    pub fn position(&self) -> Option<(f64, f64)> {
        self.visible.then_some((self.x, self.y))
    }
}

/// Pixel spacing in millimetres per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
}

impl Spacing {
    pub fn uniform(mm_per_px: f64) -> Self {
        Spacing {
            x: mm_per_px,
            y: mm_per_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: GrayImage,
    pub spacing: Spacing,
    /// Indexed by global id; always [`NUM_LANDMARKS`] long.
    pub landmarks: Vec<Landmark>,
    pub structured: bool,
}

impl AnnotatedImage {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn missing_ids(&self) -> Vec<usize> {
        self.landmarks
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.visible)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Horizontal flip that also swaps left/right landmark identities.
/// `x` maps to `width - 1 - x`; applying it twice restores coordinates
/// bit for bit whenever that subtraction is exact, e.g. for coordinates on
/// a dyadic sub-pixel grid.
pub fn mirror_landmarks(a: &AnnotatedImage) -> AnnotatedImage {
    let w = a.width() as f64;
    let mut landmarks = vec![Landmark::missing(); a.landmarks.len()];
    for (id, lm) in a.landmarks.iter().enumerate() {
        landmarks[mirrored_id(id)] = if lm.visible {
            Landmark::visible(w - 1.0 - lm.x, lm.y)
        } else {
            *lm
        };
    }
    AnnotatedImage {
        id: a.id.clone(),
        pixels: a.pixels.flip_horizontal(),
        spacing: a.spacing,
        landmarks,
        structured: a.structured,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LandmarkCount { found: usize },
    OutOfBounds { id: usize, x: f64, y: f64 },
    NonFiniteCoordinate { id: usize },
    NonPositiveSpacing { axis: char, value: f64 },
    PixelOutOfRange { count: usize },
    StructuredFlag { structured: bool, missing: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LandmarkCount { found } => {
                write!(f, "expected {NUM_LANDMARKS} landmarks, found {found}")
            }
            Violation::OutOfBounds { id, x, y } => {
                write!(f, "landmark {id} at ({x}, {y}) is visible but outside the image")
            }
            Violation::NonFiniteCoordinate { id } => write!(f, "landmark {id} has a non-finite coordinate"),
            Violation::NonPositiveSpacing { axis, value } => {
                write!(f, "{axis} spacing {value} is not positive")
            }
            Violation::PixelOutOfRange { count } => write!(f, "{count} pixels outside [0, 1]"),
            Violation::StructuredFlag { structured, missing } => write!(
                f,
                "structured flag is {structured} but {missing} landmarks are invisible"
            ),
        }
    }
}

/// Checks every annotation invariant; an empty list means the record is valid.
pub fn validate_annotation(a: &AnnotatedImage) -> Vec<Violation> {
    let mut out = Vec::new();
    if a.landmarks.len() != NUM_LANDMARKS {
        out.push(Violation::LandmarkCount {
            found: a.landmarks.len(),
        });
    }
    let (w, h) = (a.width() as f64, a.height() as f64);
    for (id, lm) in a.landmarks.iter().enumerate() {
        if !lm.visible {
            continue;
        }
        if !lm.x.is_finite() || !lm.y.is_finite() {
            out.push(Violation::NonFiniteCoordinate { id });
        } else if lm.x < 0.0 || lm.y < 0.0 || lm.x > w - 1.0 || lm.y > h - 1.0 {
            out.push(Violation::OutOfBounds { id, x: lm.x, y: lm.y });
        }
    }
    for (axis, value) in [('x', a.spacing.x), ('y', a.spacing.y)] {
        if !(value > 0.0) {
            out.push(Violation::NonPositiveSpacing { axis, value });
        }
    }
    let bad = a
        .pixels
        .data()
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if bad > 0 {
        out.push(Violation::PixelOutOfRange { count: bad });
    }
    let missing = a.landmarks.iter().filter(|l| !l.visible).count();
    if a.structured != (missing == 0) {
        out.push(Violation::StructuredFlag {
            structured: a.structured,
            missing,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLandmark {
    pub category: usize,
    pub side: Side,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// JSON sidecar stored next to each PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image: String,
    pub spacing_mm: [f64; 2],
    pub landmarks: Vec<SidecarLandmark>,
    pub structured: bool,
}

impl Sidecar {
    pub fn from_annotation(a: &AnnotatedImage, image_file: &str) -> Self {
        let landmarks = a
            .landmarks
            .iter()
            .enumerate()
            .map(|(id, lm)| {
                let (category, side) = category_side(id);
                SidecarLandmark {
                    category,
                    side,
                    x: lm.x,
                    y: lm.y,
                    visible: lm.visible,
                }
            })
            .collect();
        Sidecar {
            image: image_file.to_string(),
            spacing_mm: [a.spacing.x, a.spacing.y],
            landmarks,
            structured: a.structured,
        }
    }

    pub fn landmarks_by_id(&self) -> std::result::Result<Vec<Landmark>, String> {
        let mut out: Vec<Option<Landmark>> = vec![None; NUM_LANDMARKS];
        for l in &self.landmarks {
            if !(1..=NUM_CATEGORIES).contains(&l.category) {
                return Err(format!("unknown category {}", l.category));
            }
            let id = global_id(l.category, l.side);
            if out[id].is_some() {
                return Err(format!("duplicate landmark {} {}", l.category, l.side));
            }
            out[id] = Some(if l.visible {
                Landmark::visible(l.x, l.y)
            } else {
                Landmark::missing()
            });
        }
        out.into_iter()
            .enumerate()
            .map(|(id, l)| l.ok_or_else(|| format!("landmark {id} absent")))
            .collect()
    }
}

/// Writes `<dir>/<id>.png` and `<dir>/<id>.json`.
pub fn save_annotated(a: &AnnotatedImage, dir: &Path) -> Result<()> {
    let png_name = format!("{}.png", a.id);
    a.pixels.save_png(&dir.join(&png_name))?;
    let sidecar = Sidecar::from_annotation(a, &png_name);
    let json_path = dir.join(format!("{}.json", a.id));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Reads an annotation sidecar and the PNG it names.
pub fn load_annotated(json_path: &Path) -> Result<AnnotatedImage> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(json_path, e))?;
    let landmarks = sidecar
        .landmarks_by_id()
        .map_err(|m| Error::format(json_path, m))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let pixels = GrayImage::load_png(&dir.join(&sidecar.image))?;
    let id = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    Ok(AnnotatedImage {
        id,
        pixels,
        spacing: Spacing {
            x: sidecar.spacing_mm[0],
            y: sidecar.spacing_mm[1],
        },
        landmarks,
        structured: sidecar.structured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: usize, h: usize) -> AnnotatedImage {
        AnnotatedImage {
            id: "t".into(),
            pixels: GrayImage::new(w, h),
            spacing: Spacing::uniform(1.0),
            landmarks: (0..NUM_LANDMARKS)
                .map(|i| Landmark::visible(i as f64, (i * 2) as f64))
                .collect(),
            structured: true,
        }
    }

    #[test]
    fn schema_has_24_unique_entries() {
        let specs = landmark_specs();
        assert_eq!(specs.len(), 24);
        let pairs: std::collections::HashSet<_> =
            specs.iter().map(|s| (s.category, s.side)).collect();
        assert_eq!(pairs.len(), 24);
        for s in &specs {
            assert_eq!(s.global_id, global_id(s.category, s.side));
        }
        assert_eq!(landmark_spec(11).name, "Center of the femoral head");
        assert_eq!(global_id(6, Side::Right), 11);
    }

    #[test]
    fn table2_skeleton_has_24_edges() {
        let g = table2_skeleton();
        assert_eq!(g.num_edges(), 24);
        assert_eq!(g.side_edges(Side::Left).count(), 12);
        assert_eq!(g.side_edges(Side::Right).count(), 12);
        assert!(g.edges().iter().all(|e| e.a != e.b));
        assert!(g.check().is_empty());
    }

    #[test]
    fn default_skeleton_is_symmetric_and_deterministic() {
        let g = build_default_skeleton();
        assert_eq!(g, build_default_skeleton());
        assert_eq!(g.num_edges(), 34);
        assert!(g.check().is_empty());
        let left: std::collections::BTreeSet<_> = g
            .side_edges(Side::Left)
            .map(|e| (mirrored_id(e.a), mirrored_id(e.b)))
            .collect();
        let right: std::collections::BTreeSet<_> =
            g.side_edges(Side::Right).map(|e| (e.a, e.b)).collect();
        assert_eq!(left, right);
    }

    #[test]
    fn every_clinical_landmark_has_an_edge() {
        for g in [table2_skeleton(), build_default_skeleton()] {
            for (_, cats) in CLINICAL_DEPENDENCIES {
                for &c in cats {
                    for side in Side::BOTH {
                        assert!(g.degree(global_id(c, side)) >= 1, "category {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn default_skeleton_gives_every_landmark_two_neighbours() {
        let g = build_default_skeleton();
        for id in 0..NUM_LANDMARKS {
            assert!(g.degree(id) >= 2, "landmark {id}");
        }
    }

    #[test]
    fn rejects_duplicate_and_self_edges() {
        assert!(SkeletonGraph::from_category_pairs(&[(1, 1)]).is_err());
        assert!(SkeletonGraph::from_category_pairs(&[(1, 2), (2, 1)]).is_err());
        assert!(SkeletonGraph::from_category_pairs(&[(0, 2)]).is_err());
    }

    #[test]
    fn mirror_reflects_and_swaps_sides() {
        let mut a = blank(100, 50);
        a.landmarks[global_id(6, Side::Left)] = Landmark::visible(10.0, 20.0);
        let m = mirror_landmarks(&a);
        let r = m.landmarks[global_id(6, Side::Right)];
        assert_eq!((r.x, r.y, r.visible), (89.0, 20.0, true));
        assert_eq!(mirror_landmarks(&m), a);
    }

    #[test]
    fn mirror_keeps_invisible_sentinels() {
        let mut a = blank(64, 64);
        a.landmarks.iter_mut().for_each(|l| *l = Landmark::missing());
        a.structured = false;
        let m = mirror_landmarks(&a);
        assert!(m.landmarks.iter().all(|l| !l.visible && l.x == MISSING_COORD));
        assert_eq!(mirror_landmarks(&m), a);
    }

    #[test]
    fn validation_reports_each_problem() {
        let a = blank(64, 64);
        assert!(validate_annotation(&a).is_empty());

        let mut b = a.clone();
        b.landmarks[3] = Landmark::visible(64.0 + 5.0, 3.0);
        assert_eq!(
            validate_annotation(&b),
            vec![Violation::OutOfBounds { id: 3, x: 69.0, y: 3.0 }]
        );

        let mut c = a.clone();
        c.spacing = Spacing { x: 0.0, y: 1.0 };
        assert_eq!(
            validate_annotation(&c),
            vec![Violation::NonPositiveSpacing { axis: 'x', value: 0.0 }]
        );

        let mut d = a.clone();
        d.landmarks[0] = Landmark::missing();
        assert_eq!(validate_annotation(&d).len(), 1);
        d.structured = false;
        assert!(validate_annotation(&d).is_empty());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = blank(32, 48);
        a.id = "s0".into();
        a.landmarks[5] = Landmark::missing();
        a.structured = false;
        save_annotated(&a, dir.path()).unwrap();
        let b = load_annotated(&dir.path().join("s0.json")).unwrap();
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.spacing, b.spacing);
        assert_eq!(b.structured, false);
        assert_eq!((b.width(), b.height()), (32, 48));
    }
}
