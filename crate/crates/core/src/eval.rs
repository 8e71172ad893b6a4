//! Landmark detection metrics, consistency statistics, clinical geometry
//! and structured/unstructured report aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::landmarks::{global_id, Landmark, Side, Spacing};

/// One predicted/ground-truth coordinate pair for a landmark id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub global_id: usize,
    pub pred: (f64, f64),
    pub gt: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<Pair>,
    /// Visible in the ground truth but not kept.
    pub missed: Vec<usize>,
    /// Kept but invisible in the ground truth.
    pub spurious: Vec<usize>,
}

/// Matches by landmark id; channels carry identity so no assignment is
/// needed.
pub fn match_predictions(gt: &[Landmark], kept: &[Landmark]) -> MatchResult {
    let mut m = MatchResult::default();
    for (id, (g, p)) in gt.iter().zip(kept).enumerate() {
        match (g.visible, p.visible) {
            (true, true) => m.pairs.push(Pair {
                global_id: id,
                pred: (p.x, p.y),
                gt: (g.x, g.y),
            }),
            (true, false) => m.missed.push(id),
            (false, true) => m.spurious.push(id),
            (false, false) => {}
        }
    }
    m
}

/// Distance between the two femoral head centres, or the image diagonal
/// when either is invisible.
pub fn nme_normalizer(gt: &[Landmark], width: usize, height: usize) -> f64 {
    let a = gt[global_id(6, Side::Left)];
    let b = gt[global_id(6, Side::Right)];
    if a.visible && b.visible {
        let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
        if d > 0.0 {
            return d;
        }
    }
    ((width * width + height * height) as f64).sqrt()
}

fn need_pairs(pairs: &[Pair], min: usize) -> Result<()> {
    if pairs.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} matched pairs, got {}",
            pairs.len()
        )));
    }
    Ok(())
}

fn pixel_error(p: &Pair) -> f64 {
    ((p.pred.0 - p.gt.0).powi(2) + (p.pred.1 - p.gt.1).powi(2)).sqrt()
}

pub fn radial_error_mm(p: &Pair, spacing: Spacing) -> f64 {
    (((p.pred.0 - p.gt.0) * spacing.x).powi(2) + ((p.pred.1 - p.gt.1) * spacing.y).powi(2)).sqrt()
}

pub fn nme(pairs: &[Pair], d: f64) -> Result<f64> {
    need_pairs(pairs, 1)?;
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!("normaliser {d} must be positive")));
    }
    Ok(pairs.iter().map(|p| pixel_error(p) / d).sum::<f64>() / pairs.len() as f64)
}

pub fn mre(pairs: &[Pair], spacing: Spacing) -> Result<f64> {
    need_pairs(pairs, 1)?;
    Ok(pairs.iter().map(|p| radial_error_mm(p, spacing)).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of landmarks within `threshold_mm`; missed landmarks count as
/// failures.
pub fn sdr(pairs: &[Pair], missed: usize, spacing: Spacing, threshold_mm: f64) -> Result<f64> {
    let total = pairs.len() + missed;
    if total == 0 {
        return Err(Error::InvalidArgument("no ground-truth landmarks to score".into()));
    }
    let hits = pairs.iter().filter(|p| radial_error_mm(p, spacing) <= threshold_mm).count();
    Ok(hits as f64 / total as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return if x == y { 1.0 } else { 0.0 };
    }
    sxy / (sxx * syy).sqrt()
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
/// `rows` holds one row per subject with one column per rater.
pub fn icc21(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let k = rows[0].len();
    let (nf, kf) = (n as f64, k as f64);
    let grand = rows.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let msr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (nf - 1.0);
    let msc = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (kf - 1.0);
    let mut sse = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            sse += (v - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    let denom = msr + (kf - 1.0) * mse + kf * (msc - mse) / nf;
    if denom == 0.0 {
        return 1.0;
    }
    (msr - mse) / denom
}

/// Paired two-sided t-test; returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub pcc: f64,
    pub icc: f64,
    pub t: f64,
    pub p: f64,
}

/// Statistics over the pooled sequence `x_1, y_1, x_2, y_2, ...` of
/// predicted versus ground-truth coordinates.
pub fn consistency_stats(pairs: &[Pair]) -> Result<Consistency> {
    need_pairs(pairs, 3)?;
    let pred: Vec<f64> = pairs.iter().flat_map(|p| [p.pred.0, p.pred.1]).collect();
    let gt: Vec<f64> = pairs.iter().flat_map(|p| [p.gt.0, p.gt.1]).collect();
    let rows: Vec<Vec<f64>> = pred.iter().zip(&gt).map(|(a, b)| vec![*a, *b]).collect();
    let (t, p) = paired_t_test(&pred, &gt);
    Ok(Consistency {
        pcc: pearson(&pred, &gt),
        icc: icc21(&rows),
        t,
        p,
    })
}

/// Clinical measurements for one side; `None` where a required landmark
/// is missing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SideParams {
    pub neck_shaft_deg: Option<f64>,
    pub femoral_offset_mm: Option<f64>,
    pub acetabular_offset_mm: Option<f64>,
    pub center_edge_deg: Option<f64>,
    pub acetabular_index_deg: Option<f64>,
    pub sharp_deg: Option<f64>,
    /// Signed distance of the fovea from the Skinner line, positive
    /// distally.
    pub skinner_offset_mm: Option<f64>,
    /// Femoral head centre lies medial to the Köhler line.
    pub kohler_crossed: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalParams {
    pub left: SideParams,
    pub right: SideParams,
}

type P = (f64, f64);

fn sub(a: P, b: P) -> P {
    (a.0 - b.0, a.1 - b.1)
}

fn norm(a: P) -> f64 {
    (a.0 * a.0 + a.1 * a.1).sqrt()
}

fn angle_between(u: P, v: P) -> f64 {
    let c = (u.0 * v.0 + u.1 * v.1) / (norm(u) * norm(v));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Acute angle between two undirected lines.
fn line_angle(u: P, v: P) -> f64 {
    let a = angle_between(u, v);
    a.min(180.0 - a)
}

/// Distance from `p` to the line through `a` and `b`, signed by the side.
fn signed_distance(p: P, a: P, b: P) -> f64 {
    let d = sub(b, a);
    (d.0 * (p.1 - a.1) - d.1 * (p.0 - a.0)) / norm(d)
}

pub fn clinical_parameters(kept: &[Landmark], spacing: Spacing) -> ClinicalParams {
    // Work in millimetres so anisotropic spacing gives true geometry.
    let pt = |cat: usize, side: Side| -> Option<P> {
        let l = kept[global_id(cat, side)];
        l.visible.then_some((l.x * spacing.x, l.y * spacing.y))
    };
    let reference = match (pt(8, Side::Left), pt(8, Side::Right)) {
        (Some(a), Some(b)) if a != b => sub(b, a),
        _ => (1.0, 0.0),
    };
    let side_params = |side: Side| -> SideParams {
        let q = |c| pt(c, side);
        let m = side.medial_sign();
        let mut s = SideParams::default();
        if let (Some(p6), Some(p10), Some(p11), Some(p12)) = (q(6), q(10), q(11), q(12)) {
            s.neck_shaft_deg = Some(angle_between(sub(p6, p10), sub(p12, p11)));
        }
        if let (Some(p6), Some(p11), Some(p12)) = (q(6), q(11), q(12)) {
            if p11 != p12 {
                s.femoral_offset_mm = Some(signed_distance(p6, p11, p12).abs());
            }
        }
        if let (Some(p6), Some(p8)) = (q(6), q(8)) {
            s.acetabular_offset_mm = Some(norm(sub(p8, p6)));
        }
        if let (Some(p3), Some(p6)) = (q(3), q(6)) {
            if p3 != p6 {
                s.center_edge_deg = Some(angle_between((0.0, -1.0), sub(p3, p6)));
            }
        }
        if let (Some(p2), Some(p3), Some(_)) = (q(2), q(3), q(4)) {
            if p2 != p3 {
                s.acetabular_index_deg = Some(line_angle(sub(p3, p2), reference));
            }
        }
        if let (Some(p3), Some(p8)) = (q(3), q(8)) {
            if p3 != p8 {
                s.sharp_deg = Some(line_angle(sub(p3, p8), reference));
            }
        }
        if let (Some(p5), Some(p7), Some(p11), Some(p12)) = (q(5), q(7), q(11), q(12)) {
            let axis = sub(p12, p11);
            let len = norm(axis);
            if len > 0.0 {
                let d = sub(p5, p7);
                s.skinner_offset_mm = Some((d.0 * axis.0 + d.1 * axis.1) / len);
            }
        }
        if let (Some(p1), Some(p9), Some(p6)) = (q(1), q(9), q(6)) {
            if p1.1 != p9.1 {
                let xk = p1.0 + (p6.1 - p1.1) * (p9.0 - p1.0) / (p9.1 - p1.1);
                s.kohler_crossed = Some(m * (p6.0 - xk) > 0.0);
            }
        }
        s
    };
    ClinicalParams {
        left: side_params(Side::Left),
        right: side_params(Side::Right),
    }
}

/// Per-image scoring input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub structured: bool,
    pub spacing: Spacing,
    pub normalizer: f64,
    pub matched: MatchResult,
}

impl ImageEval {
    pub fn new(id: &str, structured: bool, spacing: Spacing, width: usize, height: usize, gt: &[Landmark], kept: &[Landmark]) -> Self {
        ImageEval {
            id: id.to_string(),
            structured,
            spacing,
            normalizer: nme_normalizer(gt, width, height),
            matched: match_predictions(gt, kept),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub images: usize,
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
    pub nme: Option<f64>,
    pub mre_mm: Option<f64>,
    /// Mean radial error in pixels.
    pub mre_px: Option<f64>,
    pub sdr: Option<f64>,
    pub pcc: Option<f64>,
    pub icc: Option<f64>,
    pub t_test_p: Option<f64>,
}

impl SubsetMetrics {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageEval>, sdr_threshold_mm: f64) -> Self {
        let mut m = SubsetMetrics::default();
        let (mut nme_sum, mut mm_sum, mut px_sum, mut hits) = (0.0, 0.0, 0.0, 0usize);
        let mut pooled = Vec::new();
        for im in images {
            m.images += 1;
            m.matched += im.matched.pairs.len();
            m.missed += im.matched.missed.len();
            m.spurious += im.matched.spurious.len();
            for p in &im.matched.pairs {
                let e = pixel_error(p);
                let mm = radial_error_mm(p, im.spacing);
                nme_sum += e / im.normalizer;
                px_sum += e;
                mm_sum += mm;
                hits += (mm <= sdr_threshold_mm) as usize;
            }
            pooled.extend_from_slice(&im.matched.pairs);
        }
        if m.matched > 0 {
            let n = m.matched as f64;
            m.nme = Some(nme_sum / n);
            m.mre_mm = Some(mm_sum / n);
            m.mre_px = Some(px_sum / n);
        }
        if m.matched + m.missed > 0 {
            m.sdr = Some(hits as f64 / (m.matched + m.missed) as f64);
        }
        if let Ok(c) = consistency_stats(&pooled) {
            m.pcc = Some(c.pcc);
            m.icc = Some(c.icc);
            m.t_test_p = Some(c.p);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub all: SubsetMetrics,
    pub structured: SubsetMetrics,
    pub unstructured: SubsetMetrics,
}

pub const SDR_THRESHOLD_MM: f64 = 2.0;

pub fn stratified_report(images: &[ImageEval]) -> MetricsReport {
    MetricsReport {
        all: SubsetMetrics::from_images(images, SDR_THRESHOLD_MM),
        structured: SubsetMetrics::from_images(images.iter().filter(|i| i.structured), SDR_THRESHOLD_MM),
        unstructured: SubsetMetrics::from_images(images.iter().filter(|i| !i.structured), SDR_THRESHOLD_MM),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "subset,images,NME,MRE,SDR,PCC,ICC,T-Test,MRE_px,matched,missed,spurious";

impl MetricsReport {
    pub fn subsets(&self) -> [(&'static str, &SubsetMetrics); 3] {
        [
            ("all", &self.all),
            ("structured", &self.structured),
            ("unstructured", &self.unstructured),
        ]
    }

    /// CSV rows in the column order of `REPORT_HEADER`, without the header.
    /// Empty subsets have blank metric cells.
    pub fn csv_rows(&self) -> Vec<String> {
        self.subsets()
            .iter()
            .map(|(name, m)| {
                format!(
                    "{name},{},{},{},{},{},{},{},{},{},{},{}",
                    m.images,
                    cell(m.nme),
                    cell(m.mre_mm),
                    cell(m.sdr),
                    cell(m.pcc),
                    cell(m.icc),
                    cell(m.t_test_p),
                    cell(m.mre_px),
                    m.matched,
                    m.missed,
                    m.spurious
                )
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = format!("{REPORT_HEADER}\n");
        for row in self.csv_rows() {
            s.push_str(&row);
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// One CSV row per image and side with every clinical parameter.
pub fn write_clinical_csv(path: &Path, rows: &[(String, ClinicalParams)]) -> Result<()> {
    let mut s = String::from(
        "image,side,neck_shaft_deg,femoral_offset_mm,acetabular_offset_mm,center_edge_deg,acetabular_index_deg,sharp_deg,skinner_offset_mm,kohler_crossed\n",
    );
    for (id, c) in rows {
        for (side, p) in [("left", &c.left), ("right", &c.right)] {
            let _ = writeln!(
                s,
                "{id},{side},{},{},{},{},{},{},{},{}",
                cell(p.neck_shaft_deg),
                cell(p.femoral_offset_mm),
                cell(p.acetabular_offset_mm),
                cell(p.center_edge_deg),
                cell(p.acetabular_index_deg),
                cell(p.sharp_deg),
                cell(p.skinner_offset_mm),
                p.kohler_crossed.map(|b| b.to_string()).unwrap_or_default()
            );
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
