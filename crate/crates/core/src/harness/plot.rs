//! Minimal line charts for training curves.

use crate::image::RgbCanvas;

pub const BLUE: [u8; 3] = [40, 90, 200];
pub const RED: [u8; 3] = [210, 50, 40];

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: [u8; 3],
}

/// Draws axes and the series into the rectangle `(x0, y0, w, h)` of
/// `canvas`, scaling to the joint data range. Gridlines mark quarters.
pub fn draw_panel(canvas: &mut RgbCanvas, x0: i64, y0: i64, w: i64, h: i64, series: &[Series]) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !(xmax > xmin) {
        xmax = xmin + 1.0;
    }
    if !(ymax > ymin) {
        ymax = ymin + 1.0;
    }
    let grid = [225, 225, 225];
    for q in 1..4 {
        let gy = y0 + h - h * q / 4;
        canvas.draw_line((x0, gy), (x0 + w, gy), grid);
        let gx = x0 + w * q / 4;
        canvas.draw_line((gx, y0), (gx, y0 + h), grid);
    }
    canvas.draw_line((x0, y0 + h), (x0 + w, y0 + h), [0, 0, 0]);
    canvas.draw_line((x0, y0), (x0, y0 + h), [0, 0, 0]);
    let map = |(x, y): (f64, f64)| -> (i64, i64) {
        let px = x0 as f64 + (x - xmin) / (xmax - xmin) * w as f64;
        let py = (y0 + h) as f64 - (y - ymin) / (ymax - ymin) * h as f64;
        (px.round() as i64, py.round() as i64)
    };
    for s in series {
        let valid: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&p| map(p))
            .collect();
        for pair in valid.windows(2) {
            canvas.draw_line(pair[0], pair[1], s.color);
            canvas.draw_line((pair[0].0, pair[0].1 + 1), (pair[1].0, pair[1].1 + 1), s.color);
        }
        for &(x, y) in &valid {
            canvas.fill_disc(x as f64, y as f64, 1.5, s.color);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_draws_series_colors() {
        let mut c = RgbCanvas::new(120, 80, [255, 255, 255]);
        let a = [(1.0, 4.0), (2.0, 2.0), (3.0, 1.0)];
        let b = [(1.0, 3.0), (2.0, 3.0), (3.0, f64::NAN)];
        draw_panel(&mut c, 10, 10, 100, 60, &[Series { points: &a, color: BLUE }, Series { points: &b, color: RED }]);
        let mut seen = (false, false);
        for y in 0..80 {
            for x in 0..120 {
                seen.0 |= c.get(x, y) == BLUE;
                seen.1 |= c.get(x, y) == RED;
            }
        }
        assert_eq!(seen, (true, true));
    }
}
