//! Minimal raster figures: field maps, loss curves and bar charts.
//!
//! Figures carry no text; every plot has a CSV or JSON table next to it
//! with the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use physode::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Colormap stops from dark to bright; luminance increases monotonically so
/// the brightest pixel marks the largest value.
const STOPS: [[f64; 3]; 5] = [
    [20.0, 12.0, 80.0],
    [60.0, 70.0, 150.0],
    [40.0, 150.0, 140.0],
    [140.0, 205.0, 80.0],
    [253.0, 235.0, 60.0],
];

pub fn colormap(x: f64) -> Rgb<u8> {
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    let pos = x * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let c = |j: usize| (STOPS[i][j] + f * (STOPS[i + 1][j] - STOPS[i][j])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub fn luminance(p: &Rgb<u8>) -> f64 {
    0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
}

/// Renders an `(H, W)` field with north at the top, `scale` pixels per cell.
pub fn field_map(field: ArrayView2<f64>, scale: u32) -> Result<RgbImage> {
    let (h, w) = field.dim();
    if h == 0 || w == 0 || scale == 0 {
        return Err(Error::Shape("field map needs a nonempty field and scale".into()));
    }
    let (lo, hi) = field
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (x, y, px) in img.enumerate_pixels_mut() {
        // row 0 is the southernmost latitude
        let row = h - 1 - (y / scale) as usize;
        let col = (x / scale) as usize;
        *px = colormap((field[[row, col]] - lo) / span);
    }
    Ok(img)
}

/// Cell `(row, col)` of the brightest pixel in a field map.
pub fn brightest_cell(img: &RgbImage, height: usize, scale: u32) -> (usize, usize) {
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for (x, y, p) in img.enumerate_pixels() {
        let l = luminance(p);
        if l > best {
            best = l;
            at = (height - 1 - (y / scale) as usize, (x / scale) as usize);
        }
    }
    at
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;

fn frame() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (l, b) = (MARGIN, HEIGHT as i64 - MARGIN);
    draw_line(&mut img, (l, MARGIN / 2), (l, b), AXIS);
    draw_line(&mut img, (l, b), (WIDTH as i64 - MARGIN / 2, b), AXIS);
    img
}

/// Line plot of several series; `log_y` plots `log10(y)` for positive values.
pub fn line_plot(series: &[Vec<(f64, f64)>], log_y: bool) -> Result<RgbImage> {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all: Vec<&(f64, f64)> = points.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = all.iter().map(|p| f(p)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let (left, right, top, bottom) = (MARGIN as f64, (WIDTH as i64 - MARGIN / 2) as f64, (MARGIN / 2) as f64, (HEIGHT as i64 - MARGIN) as f64);
    let to_px = |&(x, y): &(f64, f64)| {
        (
            (left + (x - x0) / (x1 - x0) * (right - left)).round() as i64,
            (bottom - (y - y0) / (y1 - y0) * (bottom - top)).round() as i64,
        )
    };
    let mut img = frame();
    for (i, s) in points.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in s.windows(2) {
            draw_line(&mut img, to_px(&w[0]), to_px(&w[1]), color);
        }
        if s.len() == 1 {
            let (x, y) = to_px(&s[0]);
            draw_line(&mut img, (x - 2, y), (x + 2, y), color);
        }
    }
    Ok(img)
}

/// Vertical bars from zero; non-finite values leave a gap.
pub fn bar_chart(values: &[f64]) -> Result<RgbImage> {
    if values.is_empty() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let hi = values.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, &v| a.max(v.abs()));
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let mut img = frame();
    let (left, right, top, bottom) = (MARGIN, WIDTH as i64 - MARGIN / 2, MARGIN / 2, HEIGHT as i64 - MARGIN);
    let slot = (right - left) / values.len() as i64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let height = ((v.abs() / hi) * (bottom - top) as f64).round() as i64;
        let x_start = left + i as i64 * slot + slot / 6;
        let x_end = left + (i as i64 + 1) * slot - slot / 6;
        for x in x_start..x_end.max(x_start + 1) {
            draw_line(&mut img, (x, bottom - 1), (x, bottom - height), PALETTE[i % PALETTE.len()]);
        }
    }
    Ok(img)
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn colormap_luminance_is_monotone() {
        let l: Vec<f64> = (0..=100).map(|i| luminance(&colormap(i as f64 / 100.0))).collect();
        assert!(l.windows(2).all(|w| w[1] >= w[0]));
        assert!(l[100] > l[0] + 100.0);
    }

    #[test]
    fn gaussian_peak_is_the_brightest_cell() {
        let (h, w) = (16, 32);
        for &(cy, cx) in &[(3usize, 7usize), (12, 25), (0, 0)] {
            let f = Array2::from_shape_fn((h, w), |(i, j)| {
                let (dy, dx) = (i as f64 - cy as f64, j as f64 - cx as f64);
                (-(dx * dx + dy * dy) / 8.0).exp()
            });
            let img = field_map(f.view(), 4).unwrap();
            assert_eq!((img.width(), img.height()), (128, 64));
            assert_eq!(brightest_cell(&img, h, 4), (cy, cx));
        }
    }

    #[test]
    fn empty_plots_are_errors() {
        assert!(line_plot(&[vec![]], false).is_err());
        assert!(bar_chart(&[]).is_err());
        assert!(line_plot(&[vec![(0.0, -1.0)]], true).is_err());
    }
}
