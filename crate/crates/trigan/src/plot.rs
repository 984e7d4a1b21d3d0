//! Self-contained PNG chart rendering: line charts (optionally log-scale on
//! the y axis) and grouped bar charts, drawn with an embedded 5x7 bitmap
//! font so no font discovery or text shaping is involved. Output bytes are
//! a pure function of the inputs.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("plot {path}: {msg}")]
    Encode { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const WIDTH: u32 = 960;
pub const HEIGHT: u32 = 560;

const BG: [u8; 3] = [255, 255, 255];
const FG: [u8; 3] = [32, 32, 32];
const GRID: [u8; 3] = [224, 224, 224];

/// Line and bar fill colors, cycled per series.
pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// 5x7 glyphs, one byte per row, bit 4 = leftmost column. Lowercase input
/// is uppercased; anything without a glyph renders as a hollow box.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x0F, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x0E, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// A fixed-size RGB raster with primitive drawing operations.
pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Canvas {
        Canvas { img: RgbImage::from_pixel(width, height, Rgb(BG)) }
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    fn px(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    /// Bresenham segment, endpoints included.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.px(x, y, color);
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.px(xx, yy, color);
            }
        }
    }

    /// Draws `text` with its top-left corner at (x, y); 6 px per character.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: [u8; 3]) {
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (0x10 >> rx) != 0 {
                        self.px(x + i as i64 * 6 + rx, y + ry as i64, color);
                    }
                }
            }
        }
    }

    pub fn text_width(text: &str) -> i64 {
        text.chars().count() as i64 * 6
    }

    pub fn save(&self, path: &Path) -> Result<(), PlotError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.img.save(path).map_err(|e| PlotError::Encode {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// One labeled curve.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One cluster of bars sharing an x-axis label; `values[i]` belongs to
/// `series_names[i]`.
#[derive(Debug, Clone)]
pub struct BarGroup {
    pub label: String,
    pub values: Vec<f64>,
}

struct Frame {
    left: i64,
    right: i64,
    top: i64,
    bottom: i64,
}

const FRAME: Frame = Frame { left: 70, right: (WIDTH as i64) - 20, top: 34, bottom: (HEIGHT as i64) - 46 };

/// Evenly spaced "nice" tick positions covering [lo, hi].
fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).abs().max(1e-30);
    let raw_step = span / 5.0;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = mag * if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    let first = (lo / step).floor() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= hi + step * 0.5 {
        if t >= lo - step * 0.5 {
            ticks.push(t);
        }
        t += step;
    }
    ticks
}

/// Compact number labels: plain decimals in a middle range, exponent
/// notation outside it.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() || s == "-" {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

const LOG_FLOOR: f64 = 1e-12;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(lo: f64, hi: f64, log: bool) -> Axis {
        let (lo, hi) = if log {
            let lo = lo.max(LOG_FLOOR).log10();
            let hi = hi.max(LOG_FLOOR).log10();
            (lo.floor(), hi.ceil().max(lo.floor() + 1.0))
        } else if (hi - lo).abs() < 1e-30 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        Axis { lo, hi, log }
    }

    /// Maps a data value to [0, 1] along the axis.
    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.max(LOG_FLOOR).log10() } else { v };
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let mut out = Vec::new();
            let mut k = self.lo as i64;
            while (k as f64) <= self.hi + 0.5 {
                out.push((10f64.powi(k as i32), format!("1E{k}")));
                k += 1;
            }
            out
        } else {
            linear_ticks(self.lo, self.hi).into_iter().map(|t| (t, fmt_tick(t))).collect()
        }
    }
}

fn draw_frame(canvas: &mut Canvas, title: &str, x_label: &str, y_label: &str) {
    let f = &FRAME;
    canvas.line(f.left, f.top, f.left, f.bottom, FG);
    canvas.line(f.left, f.bottom, f.right, f.bottom, FG);
    let tx = (canvas.width() as i64 - Canvas::text_width(title)) / 2;
    canvas.text(tx.max(0), 12, title, FG);
    let xx = f.left + (f.right - f.left - Canvas::text_width(x_label)) / 2;
    canvas.text(xx, f.bottom + 28, x_label, FG);
    canvas.text(6, f.top - 22, y_label, FG);
}

fn draw_legend(canvas: &mut Canvas, labels: &[&str]) {
    let f = &FRAME;
    let mut y = f.top + 6;
    let widest = labels.iter().map(|l| Canvas::text_width(l)).max().unwrap_or(0);
    let x = f.right - widest - 30;
    for (i, label) in labels.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        canvas.fill_rect(x, y + 2, 18, 3, color);
        canvas.text(x + 24, y, label, FG);
        y += 12;
    }
}

/// Renders labeled curves to a PNG. With `log_y` the y axis uses decade
/// ticks; nonpositive values sit on the axis floor.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_y: bool,
) -> Result<(), PlotError> {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let f = &FRAME;
    let finite = |v: f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|v| finite(*v));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| finite(*v));
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in xs {
        x_lo = x_lo.min(v);
        x_hi = x_hi.max(v);
    }
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in ys {
        y_lo = y_lo.min(v);
        y_hi = y_hi.max(v);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    let x_axis = Axis::new(x_lo, x_hi, false);
    let y_axis = Axis::new(y_lo, y_hi, log_y);

    let to_px = |x: f64, y: f64| {
        let px = f.left as f64 + x_axis.unit(x) * (f.right - f.left) as f64;
        let py = f.bottom as f64 - y_axis.unit(y) * (f.bottom - f.top) as f64;
        (px.round() as i64, py.round() as i64)
    };

    for (t, label) in y_axis.ticks() {
        let (_, py) = to_px(x_axis.lo, t);
        canvas.line(f.left + 1, py, f.right, py, GRID);
        canvas.line(f.left - 4, py, f.left, py, FG);
        canvas.text(f.left - 8 - Canvas::text_width(&label), py - 3, &label, FG);
    }
    for (t, label) in x_axis.ticks() {
        let (px, _) = to_px(t, y_axis.lo);
        canvas.line(px, f.bottom, px, f.bottom + 4, FG);
        canvas.text(px - Canvas::text_width(&label) / 2, f.bottom + 8, &label, FG);
    }
    draw_frame(&mut canvas, title, x_label, y_label);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for w in pts.windows(2) {
            canvas.line(w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        if pts.len() == 1 {
            canvas.fill_rect(pts[0].0 - 1, pts[0].1 - 1, 3, 3, color);
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    draw_legend(&mut canvas, &labels);
    canvas.save(path)
}

/// Renders grouped bars to a PNG; bars within a group follow the series
/// order, groups spread along the x axis under their labels.
pub fn bar_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    series_names: &[String],
    groups: &[BarGroup],
) -> Result<(), PlotError> {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let f = &FRAME;
    let hi = groups
        .iter()
        .flat_map(|g| g.values.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_axis = Axis::new(0.0, if hi > 0.0 { hi * 1.08 } else { 1.0 }, false);
    for (t, label) in y_axis.ticks() {
        let py = f.bottom - (y_axis.unit(t) * (f.bottom - f.top) as f64).round() as i64;
        canvas.line(f.left + 1, py, f.right, py, GRID);
        canvas.line(f.left - 4, py, f.left, py, FG);
        canvas.text(f.left - 8 - Canvas::text_width(&label), py - 3, &label, FG);
    }
    draw_frame(&mut canvas, title, "", y_label);

    let n_groups = groups.len().max(1) as i64;
    let slot = (f.right - f.left) / n_groups;
    for (gi, group) in groups.iter().enumerate() {
        let x0 = f.left + gi as i64 * slot;
        let n = group.values.len().max(1) as i64;
        let bar_w = ((slot - 16) / n).clamp(3, 48);
        let cluster = bar_w * n;
        let start = x0 + (slot - cluster) / 2;
        for (si, &v) in group.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let h = (y_axis.unit(v) * (f.bottom - f.top) as f64).round() as i64;
            let color = PALETTE[si % PALETTE.len()];
            canvas.fill_rect(start + si as i64 * bar_w, f.bottom - h, bar_w - 2, h, color);
        }
        let lx = x0 + (slot - Canvas::text_width(&group.label)) / 2;
        canvas.text(lx, f.bottom + 8, &group.label, FG);
    }
    let labels: Vec<&str> = series_names.iter().map(|s| s.as_str()).collect();
    draw_legend(&mut canvas, &labels);
    canvas.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_fit_five_columns() {
        for c in "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,-+:/%()= ?".chars() {
            for row in glyph(c) {
                assert!(row <= 0x1F, "glyph {c:?} spills past five columns");
            }
        }
    }

    #[test]
    fn text_rendering_marks_pixels() {
        let mut canvas = Canvas::new(100, 20);
        canvas.text(2, 2, "F 0.95", FG);
        let dark = canvas.img.pixels().filter(|p| p.0 != BG).count();
        assert!(dark > 20, "only {dark} pixels drawn");
    }

    #[test]
    fn line_chart_writes_a_decodable_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            Series { label: "v2".into(), points: (0..50).map(|i| (i as f64, 1.0 / (i as f64 + 1.0))).collect() },
            Series { label: "v3".into(), points: (0..50).map(|i| (i as f64, 0.5 / (i as f64 + 1.0))).collect() },
        ];
        line_chart(&path, "gradient norms", "epoch", "norm", &series, true).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![Series {
            label: "one".into(),
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
        }];
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        line_chart(&a, "t", "x", "y", &series, false).unwrap();
        line_chart(&b, "t", "x", "y", &series, false).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn log_axis_handles_nonpositive_and_huge_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.png");
        let series = vec![Series {
            label: "wild".into(),
            points: vec![(0.0, 0.0), (1.0, 1e-9), (2.0, 1e6), (3.0, f64::NAN)],
        }];
        line_chart(&path, "t", "x", "y", &series, true).unwrap();
        assert!(path.is_file());
    }

    #[test]
    fn empty_series_render_empty_axes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.png");
        line_chart(&path, "t", "x", "y", &[], false).unwrap();
        assert!(path.is_file());
    }

    #[test]
    fn bar_chart_draws_grouped_bars() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bars.png");
        let names = vec!["baseline".to_string(), "gan-v3".to_string()];
        let groups = vec![
            BarGroup { label: "0.10".into(), values: vec![0.62, 0.71] },
            BarGroup { label: "0.25".into(), values: vec![0.70, 0.78] },
        ];
        bar_chart(&path, "macro f by ratio", "macro f", &names, &groups).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let blue = img.pixels().filter(|p| p.0 == PALETTE[0]).count();
        let orange = img.pixels().filter(|p| p.0 == PALETTE[1]).count();
        assert!(blue > 500 && orange > 500, "bars missing: {blue} / {orange}");
    }

    #[test]
    fn linear_ticks_cover_the_range() {
        for (lo, hi) in [(0.0f64, 1.0f64), (-3.0, 7.0), (0.55, 0.56), (100.0, 100.0)] {
            let ticks = linear_ticks(lo, hi.max(lo + 1e-9));
            assert!(!ticks.is_empty());
            for w in ticks.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(3.0), "3");
        assert_eq!(fmt_tick(1e-7), "1.0e-7");
        assert_eq!(fmt_tick(2.5e8), "2.5e8");
    }
}
