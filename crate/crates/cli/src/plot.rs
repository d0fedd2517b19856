//! Minimal line-chart rendering for training logs: colored series over a
//! white canvas with axes, numeric tick labels and a legend drawn with a
//! small built-in bitmap font.

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 960;
const HEIGHT: u32 = 600;
const MARGIN_L: u32 = 70;
const MARGIN_R: u32 = 20;
const MARGIN_T: u32 = 30;
const MARGIN_B: u32 = 50;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 144, 156],
];

/// 5x7 glyphs for the characters chart labels use.
fn glyph(c: char) -> Option<[u8; 7]> {
    // each byte is one row, low 5 bits used, MSB-left
    let g = match c.to_ascii_uppercase() {
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
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        ' ' => [0; 7],
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, row) in rows.iter().enumerate() {
                for bit in 0..5 {
                    if row & (1 << (4 - bit)) != 0 {
                        let px = cx + bit;
                        let py = y + ry as u32;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as u32).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

/// Renders one chart of several series over a shared x axis (epochs).
pub fn render_chart(path: &std::path::Path, title: &str, series: &[Series]) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = (WIDTH - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (HEIGHT - MARGIN_T - MARGIN_B) as f64;

    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series
        .iter()
        .flat_map(|s| s.values.iter())
        .filter(|v| v.is_finite());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in finite {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let to_px = |i: usize, v: f64| -> (f64, f64) {
        let x = MARGIN_L as f64 + plot_w * i as f64 / (n.max(2) - 1) as f64;
        let y = MARGIN_T as f64 + plot_h * (1.0 - (v - lo) / (hi - lo));
        (x, y)
    };

    // frame and gridlines with tick labels
    let axis = [120u8, 120, 120];
    let grid = [225u8, 225, 225];
    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let y = MARGIN_T as f64 + plot_h * (1.0 - t as f64 / 5.0);
        draw_line(&mut img, MARGIN_L as f64, y, (WIDTH - MARGIN_R) as f64, y, grid);
        draw_text(&mut img, 4, y as u32 - 3, &fmt_tick(v), [60, 60, 60]);
    }
    for t in 0..=6 {
        let i = (n.saturating_sub(1)) * t / 6;
        let (x, _) = to_px(i.max(0), lo);
        draw_line(&mut img, x, MARGIN_T as f64, x, (HEIGHT - MARGIN_B) as f64, grid);
        draw_text(&mut img, x as u32 - 6, HEIGHT - MARGIN_B + 8, &i.to_string(), [60, 60, 60]);
    }
    draw_line(&mut img, MARGIN_L as f64, MARGIN_T as f64, MARGIN_L as f64, (HEIGHT - MARGIN_B) as f64, axis);
    draw_line(&mut img, MARGIN_L as f64, (HEIGHT - MARGIN_B) as f64, (WIDTH - MARGIN_R) as f64, (HEIGHT - MARGIN_B) as f64, axis);
    draw_text(&mut img, MARGIN_L, 12, title, [0, 0, 0]);
    draw_text(&mut img, WIDTH / 2 - 20, HEIGHT - 16, "EPOCH", [60, 60, 60]);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for i in 1..s.values.len() {
            if s.values[i - 1].is_finite() && s.values[i].is_finite() {
                let (x0, y0) = to_px(i - 1, s.values[i - 1]);
                let (x1, y1) = to_px(i, s.values[i]);
                draw_line(&mut img, x0, y0, x1, y1, color);
            }
        }
        // legend
        let ly = MARGIN_T + 10 + 12 * si as u32;
        let lx = WIDTH - MARGIN_R - 150;
        draw_line(&mut img, lx as f64, ly as f64 + 3.0, lx as f64 + 18.0, ly as f64 + 3.0, color);
        draw_text(&mut img, lx + 24, ly, &s.label, [0, 0, 0]);
    }

    img.save(path)
        .with_context(|| format!("writing chart {}", path.display()))?;
    Ok(())
}

/// Parsed CSV: header names and per-column values.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .context("empty CSV")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for (i, cell) in line.split(',').enumerate() {
            if i < cols.len() {
                cols[i].push(cell.trim().parse().unwrap_or(f64::NAN));
            }
        }
    }
    Ok((header, cols))
}
