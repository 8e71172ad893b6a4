//! Training targets: Gaussian heatmaps, part affinity fields and the
//! heatmap loss mask, all on the output grid of the network.
//!
//! Grid cell `(row i, col j)` sits at input pixel `(j * stride, i * stride)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::landmarks::{AnnotatedImage, Landmark, SkeletonGraph};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingParams {
    pub stride: usize,
    /// Gaussian standard deviation in grid cells.
    pub sigma: f64,
    /// Half width of the PAF band in grid cells.
    pub limb_width: f64,
    pub mask_threshold: f64,
    pub mask_dilation: usize,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            stride: 4,
            sigma: 2.0,
            limb_width: 3.0,
            mask_threshold: 0.2,
            mask_dilation: 1,
        }
    }
}

impl EncodingParams {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.limb_width > 0.0) {
            return Err(Error::Config("limb_width must be positive".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("mask threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-sample training targets, each a batch of one.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub heatmaps: Tensor,
    pub paf: Tensor,
    pub mask: Tensor,
    pub stride: usize,
}

/// One Gaussian channel per landmark, scaled so the grid cell nearest the
/// landmark holds exactly 1. Invisible landmarks give all-zero channels.
pub fn encode_heatmaps(landmarks: &[Landmark], out_h: usize, out_w: usize, stride: usize, sigma: f64) -> Tensor {
    let mut out = Tensor::zeros([1, landmarks.len(), out_h, out_w]);
    let s = stride as f64;
    let two_var = 2.0 * sigma * sigma;
    for (k, lm) in landmarks.iter().enumerate() {
        if !lm.visible {
            continue;
        }
        let (gx, gy) = (lm.x / s, lm.y / s);
        let cx = gx.round().clamp(0.0, out_w as f64 - 1.0);
        let cy = gy.round().clamp(0.0, out_h as f64 - 1.0);
        let d0 = (cx - gx).powi(2) + (cy - gy).powi(2);
        let plane = out.plane_mut(0, k);
        for i in 0..out_h {
            for j in 0..out_w {
                let d = (j as f64 - gx).powi(2) + (i as f64 - gy).powi(2);
                plane[i * out_w + j] = (-(d - d0) / two_var).exp();
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PafTarget {
    /// `1 x 2E x H x W`; edge `e` uses channels `2e` and `2e + 1`.
    pub field: Tensor,
    /// Edges whose endpoints coincide; their channels are left at zero.
    pub degenerate_edges: Vec<usize>,
}

/// Unit vectors along each visible edge inside a band of half width
/// `limb_width`; vectors from several contributions to one cell average.
pub fn encode_paf(
    landmarks: &[Landmark],
    skeleton: &SkeletonGraph,
    out_h: usize,
    out_w: usize,
    stride: usize,
    limb_width: f64,
) -> PafTarget {
    let mut field = Tensor::zeros([1, skeleton.paf_channels(), out_h, out_w]);
    let mut degenerate_edges = Vec::new();
    let s = stride as f64;
    let mut count = vec![0u32; out_h * out_w];
    for e in skeleton.edges() {
        let (Some(a), Some(b)) = (landmarks[e.a].position(), landmarks[e.b].position()) else {
            continue;
        };
        let (ax, ay) = (a.0 / s, a.1 / s);
        let (vx, vy) = (b.0 / s - ax, b.1 / s - ay);
        let len = (vx * vx + vy * vy).sqrt();
        if len < 1e-9 {
            degenerate_edges.push(e.index);
            continue;
        }
        let (dx, dy) = (vx / len, vy / len);
        count.fill(0);
        let mut sum = vec![(0.0, 0.0); out_h * out_w];
        for i in 0..out_h {
            for j in 0..out_w {
                let (px, py) = (j as f64 - ax, i as f64 - ay);
                let along = px * dx + py * dy;
                let perp = (px * dy - py * dx).abs();
                if (0.0..=len).contains(&along) && perp <= limb_width {
                    let c = i * out_w + j;
                    sum[c].0 += dx;
                    sum[c].1 += dy;
                    count[c] += 1;
                }
            }
        }
        for (c, (&(sx, sy), &n)) in sum.iter().zip(&count).enumerate() {
            if n > 0 {
                field.plane_mut(0, 2 * e.index)[c] = sx / n as f64;
                field.plane_mut(0, 2 * e.index + 1)[c] = sy / n as f64;
            }
        }
    }
    PafTarget {
        field,
        degenerate_edges,
    }
}

/// Binary mask of heatmap cells above `threshold`, dilated by a square of
/// radius `dilation` cells.
pub fn encode_mask(heatmaps: &Tensor, threshold: f64, dilation: usize) -> Tensor {
    let [n, c, h, w] = heatmaps.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    let r = dilation as isize;
    for s in 0..n {
        for ch in 0..c {
            let src = heatmaps.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for i in 0..h {
                for j in 0..w {
                    if src[i * w + j] <= threshold {
                        continue;
                    }
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, x) = (i as isize + di, j as isize + dj);
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                dst[y as usize * w + x as usize] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Heatmaps, PAF and mask for one annotated image.
pub fn encode_targets(a: &AnnotatedImage, skeleton: &SkeletonGraph, p: &EncodingParams) -> Result<TargetBundle> {
    p.validate()?;
    if a.height() % p.stride != 0 || a.width() % p.stride != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is not divisible by stride {}",
            a.height(),
            a.width(),
            p.stride
        )));
    }
    let (oh, ow) = (a.height() / p.stride, a.width() / p.stride);
    let heatmaps = encode_heatmaps(&a.landmarks, oh, ow, p.stride, p.sigma);
    let paf = encode_paf(&a.landmarks, skeleton, oh, ow, p.stride, p.limb_width).field;
    let mask = encode_mask(&heatmaps, p.mask_threshold, p.mask_dilation);
    Ok(TargetBundle {
        heatmaps,
        paf,
        mask,
        stride: p.stride,
    })
}

/// Tiles every channel of a single-sample stack into one image, row-major,
/// `columns` tiles per row. Values are mapped from `[lo, hi]` to `[0, 1]`.
pub fn tile_channels(t: &Tensor, columns: usize, lo: f64, hi: f64) -> GrayImage {
    let [_, c, h, w] = t.shape();
    let columns = columns.max(1);
    let rows = c.div_ceil(columns);
    let (tw, th) = (w + 1, h + 1);
    let mut img = GrayImage::filled(columns * tw, rows * th, 0.5);
    for ch in 0..c {
        let (ox, oy) = ((ch % columns) * tw, (ch / columns) * th);
        let plane = t.plane(0, ch);
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * w + x] - lo) / (hi - lo);
                img.set(ox + x, oy + y, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::{build_default_skeleton, NUM_LANDMARKS};

    fn single(x: f64, y: f64) -> Vec<Landmark> {
        vec![Landmark::visible(x, y)]
    }

    #[test]
    fn gaussian_values_on_grid() {
        let hm = encode_heatmaps(&single(10.0, 10.0), 32, 32, 1, 2.0);
        assert_eq!(hm.at(0, 0, 10, 10), 1.0);
        assert!((hm.at(0, 0, 10, 11) - (-1.0f64 / 8.0).exp()).abs() < 1e-12);
        assert!((hm.at(0, 0, 10, 11) - 0.8825).abs() < 1e-4);
    }

    #[test]
    fn off_grid_peak_is_one_at_nearest_cell() {
        let hm = encode_heatmaps(&single(41.0, 22.5), 32, 32, 4, 2.0);
        let (max_i, max) = hm
            .plane(0, 0)
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(max, 1.0);
        assert_eq!((max_i % 32, max_i / 32), (10, 6));
        assert!(hm.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invisible_landmark_gives_empty_channel() {
        let hm = encode_heatmaps(&[Landmark::missing()], 16, 16, 4, 2.0);
        assert!(hm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paf_axis_aligned_band() {
        let g = SkeletonGraph::from_category_pairs(&[(1, 2)]).unwrap();
        let mut lms = vec![Landmark::missing(); NUM_LANDMARKS];
        lms[0] = Landmark::visible(2.0, 8.0);
        lms[2] = Landmark::visible(12.0, 8.0);
        let paf = encode_paf(&lms, &g, 20, 20, 1, 1.0).field;
        for x in 2..=12 {
            assert_eq!((paf.at(0, 0, 8, x), paf.at(0, 1, 8, x)), (1.0, 0.0));
        }
        assert_eq!((paf.at(0, 0, 10, 6), paf.at(0, 1, 10, 6)), (0.0, 0.0));
        // The right-side edge has no visible endpoints.
        assert!(paf.plane(0, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paf_diagonal_unit_vectors() {
        let g = SkeletonGraph::from_category_pairs(&[(1, 2)]).unwrap();
        let mut lms = vec![Landmark::missing(); NUM_LANDMARKS];
        lms[0] = Landmark::visible(2.0, 2.0);
        lms[2] = Landmark::visible(12.0, 12.0);
        let paf = encode_paf(&lms, &g, 16, 16, 1, 1.5).field;
        let mut inside = 0;
        for i in 0..16 {
            for j in 0..16 {
                let (vx, vy) = (paf.at(0, 0, i, j), paf.at(0, 1, i, j));
                let m = (vx * vx + vy * vy).sqrt();
                if m > 0.0 {
                    inside += 1;
                    assert!((m - 1.0).abs() < 1e-6);
                    assert!((vx - 0.5f64.sqrt()).abs() < 1e-12);
                }
            }
        }
        assert!(inside > 10);
    }

    #[test]
    fn paf_invisible_and_degenerate_edges_are_zero() {
        let g = SkeletonGraph::from_category_pairs(&[(1, 2)]).unwrap();
        let mut lms = vec![Landmark::missing(); NUM_LANDMARKS];
        lms[0] = Landmark::visible(5.0, 5.0);
        let t = encode_paf(&lms, &g, 16, 16, 1, 1.0);
        assert!(t.field.data().iter().all(|&v| v == 0.0));
        lms[2] = Landmark::visible(5.0, 5.0);
        let t = encode_paf(&lms, &g, 16, 16, 1, 1.0);
        assert_eq!(t.degenerate_edges, vec![0]);
        assert!(t.field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_cases() {
        let zero = Tensor::zeros([1, 1, 8, 8]);
        assert!(encode_mask(&zero, 0.2, 2).data().iter().all(|&v| v == 0.0));
        let hm = encode_heatmaps(&single(40.0, 40.0), 32, 32, 4, 2.0);
        let m0 = encode_mask(&hm, 0.2, 0);
        let m2 = encode_mask(&hm, 0.2, 2);
        for (a, b) in m0.data().iter().zip(m2.data()) {
            assert!(*a <= *b);
        }
        assert!(m2.data().iter().sum::<f64>() > m0.data().iter().sum::<f64>());
    }

    #[test]
    fn target_bundle_shapes() {
        let g = build_default_skeleton();
        let a = crate::phantom::generate_phantom(&crate::phantom::PhantomConfig::default(), 1).unwrap();
        let t = encode_targets(&a, &g, &EncodingParams::default()).unwrap();
        assert_eq!(t.heatmaps.shape(), [1, 24, 64, 64]);
        assert_eq!(t.paf.shape(), [1, 68, 64, 64]);
        assert_eq!(t.mask.shape(), [1, 24, 64, 64]);
        let grid = tile_channels(&t.heatmaps, 6, 0.0, 1.0);
        assert_eq!((grid.width(), grid.height()), (6 * 65, 4 * 65));
    }
}
