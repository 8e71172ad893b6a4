//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod criteria;

use std::path::Path;

use unsct::landmarks::Spacing;
use unsct::phantom::{build_dataset, ManifestSpec, PhantomConfig};

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Adaptive Wing written directly from its piecewise definition.
pub fn awing_ref(y: f64, t: f64, omega: f64, theta: f64, eps: f64, alpha: f64) -> f64 {
    let d = (y - t).abs();
    let a = awing_a_ref(t, omega, theta, eps, alpha);
    let c = theta * a - omega * (1.0 + (theta / eps).powf(alpha - t)).ln();
    if d < theta {
        omega * (1.0 + (d / eps).powf(alpha - t)).ln()
    } else {
        a * d - c
    }
}

pub fn awing_a_ref(t: f64, omega: f64, theta: f64, eps: f64, alpha: f64) -> f64 {
    let p = alpha - t;
    omega * (1.0 / (1.0 + (theta / eps).powf(p))) * p * (theta / eps).powf(p - 1.0) * (1.0 / eps)
}

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn mre_ref(pred: &[(f64, f64)], gt: &[(f64, f64)], s: Spacing) -> f64 {
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += (((p.0 - g.0) * s.x).powi(2) + ((p.1 - g.1) * s.y).powi(2)).sqrt();
    }
    sum / pred.len() as f64
}

pub fn nme_ref(pred: &[(f64, f64)], gt: &[(f64, f64)], d: f64) -> f64 {
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += dist(*p, *g) / d;
    }
    sum / pred.len() as f64
}

pub fn sdr_ref(pred: &[(f64, f64)], gt: &[(f64, f64)], missed: usize, s: Spacing, thr: f64) -> f64 {
    let mut hits = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let e = (((p.0 - g.0) * s.x).powi(2) + ((p.1 - g.1) * s.y).powi(2)).sqrt();
        if e <= thr {
            hits += 1;
        }
    }
    hits as f64 / (pred.len() + missed) as f64
}

pub fn pearson_ref(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Bilinear interpolation with border replication.
pub fn bilinear_ref(f: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let at = |xi: i64, yi: i64| -> f64 {
        let xi = xi.clamp(0, w as i64 - 1) as usize;
        let yi = yi.clamp(0, h as i64 - 1) as usize;
        f[yi * w + xi]
    };
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    at(xi, yi) * (1.0 - tx) * (1.0 - ty)
        + at(xi + 1, yi) * tx * (1.0 - ty)
        + at(xi, yi + 1) * (1.0 - tx) * ty
        + at(xi + 1, yi + 1) * tx * ty
}

/// Writes a small deterministic dataset and returns its spec.
pub fn small_dataset(root: &Path, size: usize, train: usize, val: usize, frac: f64, seed: u64) {
    let mut cfg = PhantomConfig::with_size(size, size);
    cfg.seed = seed;
    build_dataset(&cfg, &ManifestSpec::with_fraction(train, val, frac), root).expect("dataset builds");
}
