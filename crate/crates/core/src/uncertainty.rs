//! Landmark decoding and PAF-based uncertainty estimation.
//!
//! Each skeleton edge is scored by integrating the predicted PAF along the
//! segment between its decoded endpoints. A landmark's support is the mean
//! normalised score of its incident edges; landmarks with weak support are
//! suppressed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbCanvas};
use crate::landmarks::{SkeletonGraph, Landmark};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UeParams {
    /// Keep threshold on the aggregated normalised weight.
    pub tau: f64,
    pub epsilon: f64,
    pub n_samples: usize,
}

impl Default for UeParams {
    fn default() -> Self {
        UeParams {
            tau: 0.3,
            epsilon: 1e-6,
            n_samples: 32,
        }
    }
}

impl UeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} must lie in (0, 1)", self.tau)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedLandmark {
    pub global_id: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// Channel had no peak; position is a fallback.
    pub flat: bool,
}

/// Argmax per channel with a quarter-cell shift toward the larger
/// neighbour on each axis, scaled to input pixels. Reads sample `n`.
pub fn decode_landmarks(heatmaps: &Tensor, n: usize, stride: usize) -> Vec<DecodedLandmark> {
    let [_, c, h, w] = heatmaps.shape();
    let s = stride as f64;
    (0..c)
        .map(|ch| {
            let plane = heatmaps.plane(n, ch);
            let (best, &max) = plane
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(max > min) {
                // Flat channel: centre of mass of the grid, which for a
                // constant map is the grid centre.
                return DecodedLandmark {
                    global_id: ch,
                    x: (w as f64 - 1.0) / 2.0 * s,
                    y: (h as f64 - 1.0) / 2.0 * s,
                    score: 0.0,
                    flat: true,
                };
            }
            let (py, px) = (best / w, best % w);
            let at = |y: usize, x: usize| plane[y * w + x];
            let mut fx = px as f64;
            let mut fy = py as f64;
            if px > 0 && px + 1 < w {
                fx += quarter_shift(at(py, px - 1), at(py, px + 1));
            }
            if py > 0 && py + 1 < h {
                fy += quarter_shift(at(py - 1, px), at(py + 1, px));
            }
            DecodedLandmark {
                global_id: ch,
                x: fx * s,
                y: fy * s,
                score: max,
                flat: false,
            }
        })
        .collect()
}

fn quarter_shift(before: f64, after: f64) -> f64 {
    if after > before {
        0.25
    } else if before > after {
        -0.25
    } else {
        0.0
    }
}

pub fn unit_direction(a: (f64, f64), b: (f64, f64)) -> Result<(f64, f64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 || !len.is_finite() {
        return Err(Error::DegenerateDirection { x: a.0, y: a.1 });
    }
    Ok((dx / len, dy / len))
}

/// Bilinear sample of one plane at fractional grid coordinates, clamped to
/// the grid.
fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Raw and normalised projection weight of a PAF channel pair along the
/// segment `a -> b` (input pixels). Midpoint rule with `n` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionWeight {
    pub raw: f64,
    pub normalized: f64,
}

pub fn projection_weight(
    fx: &[f64],
    fy: &[f64],
    h: usize,
    w: usize,
    stride: usize,
    a: (f64, f64),
    b: (f64, f64),
    n: usize,
) -> Result<ProjectionWeight> {
    if n < 2 {
        return Err(Error::InvalidArgument("n_samples must be at least 2".into()));
    }
    let d = unit_direction(a, b)?;
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let ds = len / n as f64;
    let s = stride as f64;
    let mut raw = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) / n as f64;
        let (px, py) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (gx, gy) = (px / s, py / s);
        let vx = bilinear(fx, h, w, gx, gy);
        let vy = bilinear(fy, h, w, gx, gy);
        raw += (vx * d.0 + vy * d.1) * ds;
    }
    Ok(ProjectionWeight {
        raw,
        normalized: (raw / len).clamp(0.0, 1.0),
    })
}

pub fn entropy_uncertainty(w: f64, epsilon: f64) -> f64 {
    -w * (w + epsilon).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyVerdict {
    pub global_id: usize,
    pub weight: f64,
    pub uncertainty: f64,
    pub keep: bool,
    /// No incident edge; kept without assessment.
    pub unassessed: bool,
}

/// Per-edge normalised weights for decoded landmarks of sample `n`.
/// Degenerate edges score 0.
pub fn edge_weights(decoded: &[DecodedLandmark], skeleton: &SkeletonGraph, paf: &Tensor, n: usize, stride: usize, samples: usize) -> Vec<f64> {
    let [_, _, h, w] = paf.shape();
    skeleton
        .edges()
        .iter()
        .map(|e| {
            let (a, b) = (&decoded[e.a], &decoded[e.b]);
            projection_weight(
                paf.plane(n, 2 * e.index),
                paf.plane(n, 2 * e.index + 1),
                h,
                w,
                stride,
                (a.x, a.y),
                (b.x, b.y),
                samples,
            )
            .map(|p| p.normalized)
            .unwrap_or(0.0)
        })
        .collect()
}

/// Mean incident-edge weight per landmark, its entropy uncertainty, and
/// the keep verdict `weight >= tau`.
pub fn aggregate_weights(num_landmarks: usize, skeleton: &SkeletonGraph, weights: &[f64], p: &UeParams) -> Vec<UncertaintyVerdict> {
    (0..num_landmarks)
        .map(|id| {
            let inc: Vec<usize> = skeleton.incident(id).map(|e| e.index).collect();
            if inc.is_empty() {
                return UncertaintyVerdict {
                    global_id: id,
                    weight: 1.0,
                    uncertainty: entropy_uncertainty(1.0, p.epsilon),
                    keep: true,
                    unassessed: true,
                };
            }
            let wi = inc.iter().map(|&e| weights[e]).sum::<f64>() / inc.len() as f64;
            UncertaintyVerdict {
                global_id: id,
                weight: wi,
                uncertainty: entropy_uncertainty(wi, p.epsilon),
                keep: wi >= p.tau,
                unassessed: false,
            }
        })
        .collect()
}

/// Scores every decoded landmark of sample `n` and returns the verdicts
/// together with the kept landmark set (suppressed entries are invisible;
/// kept coordinates are untouched).
pub fn aggregate_and_suppress(
    decoded: &[DecodedLandmark],
    skeleton: &SkeletonGraph,
    paf: &Tensor,
    n: usize,
    stride: usize,
    p: &UeParams,
) -> Result<(Vec<UncertaintyVerdict>, Vec<Landmark>)> {
    p.validate()?;
    let weights = edge_weights(decoded, skeleton, paf, n, stride, p.n_samples);
    let verdicts = aggregate_weights(decoded.len(), skeleton, &weights, p);
    let kept = decoded
        .iter()
        .zip(&verdicts)
        .map(|(d, v)| {
            if v.keep {
                Landmark::visible(d.x, d.y)
            } else {
                Landmark::missing()
            }
        })
        .collect();
    Ok((verdicts, kept))
}

/// All decoded landmarks as visible, i.e. no suppression.
pub fn keep_all(decoded: &[DecodedLandmark]) -> Vec<Landmark> {
    decoded.iter().map(|d| Landmark::visible(d.x, d.y)).collect()
}

/// Draws decoded landmarks over `image` with brightness proportional to the
/// aggregated weight. With `debug`, suppressed landmarks are drawn inside
/// a box; otherwise they are omitted.
pub fn render_uncertainty_map(decoded: &[DecodedLandmark], verdicts: &[UncertaintyVerdict], image: &GrayImage, debug: bool) -> RgbCanvas {
    let mut canvas = RgbCanvas::from_gray(image);
    let r = (image.width().min(image.height()) as f64 / 128.0).max(1.0) * 2.0;
    for (d, v) in decoded.iter().zip(verdicts) {
        if !v.keep && !debug {
            continue;
        }
        let level = (v.weight.clamp(0.0, 1.0) * 255.0).round() as u8;
        canvas.fill_disc(d.x, d.y, r, [level, level, 0]);
        if !v.keep {
            canvas.draw_box(d.x, d.y, r + 2.0, [255, 255, 0]);
        }
    }
    canvas
}

#[derive(Debug, Serialize)]
struct ReportLine<'a> {
    image: &'a str,
    global_id: usize,
    x: f64,
    y: f64,
    weight: f64,
    uncertainty: f64,
    keep: bool,
}

/// Appends one JSON line per landmark to `out`.
pub fn write_ue_report(out: &mut impl Write, path: &Path, image: &str, decoded: &[DecodedLandmark], verdicts: &[UncertaintyVerdict]) -> Result<()> {
    for (d, v) in decoded.iter().zip(verdicts) {
        let line = ReportLine {
            image,
            global_id: d.global_id,
            x: d.x,
            y: d.y,
            weight: v.weight,
            uncertainty: v.uncertainty,
            keep: v.keep,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(out, "{s}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
