//! Static bar charts rendered straight to PNG.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

const LEFT: u32 = 64;
const RIGHT: u32 = 16;
const TOP: u32 = 40;
const BOTTOM: u32 = 48;
const HEIGHT: u32 = 360;
const BAR: u32 = 22;
const GAP: u32 = 18;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    /// Values printed with three decimals.
    Plain,
    /// Fractions printed as percentages.
    Percent,
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let Some(glyph) = BASIC_FONTS.get(ch) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    let px = x + (i as i64) * 8 + col;
                    let py = y + row as i64;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0..x1 {
            if x < img.width() && y < img.height() {
                img.put_pixel(x, y, color);
            }
        }
    }
}

fn label(v: f64, axis: Axis) -> String {
    match axis {
        Axis::Plain => format!("{v:.3}"),
        Axis::Percent => format!("{:.1}%", v * 100.0),
    }
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[Series], axis: Axis) -> RgbImage {
    let values = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if hi - lo < 1e-12 { (lo, lo + 1.0) } else { (lo, hi + (hi - lo) * 0.05) };
    let group_w = series.len().max(1) as u32 * BAR + GAP;
    let plot_w = (categories.len().max(1) as u32 * group_w).max(360);
    let width = LEFT + plot_w + RIGHT;
    let mut img = RgbImage::from_pixel(width, HEIGHT, WHITE);
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_of = |v: f64| TOP + ((hi - v) / (hi - lo) * plot_h as f64).round().clamp(0.0, plot_h as f64) as u32;

    text(&mut img, LEFT as i64, 12, title, BLACK);
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = y_of(v);
        fill(&mut img, LEFT, y, LEFT + plot_w, y + 1, GRID);
        let s = label(v, axis);
        text(&mut img, LEFT as i64 - 4 - 8 * s.len() as i64, y as i64 - 4, &s, BLACK);
    }
    let zero = y_of(0.0);
    for (ci, cat) in categories.iter().enumerate() {
        let gx = LEFT + ci as u32 * group_w + GAP / 2;
        for (si, s) in series.iter().enumerate() {
            let Some(v) = s.values.get(ci).copied().filter(|v| v.is_finite()) else { continue };
            let x = gx + si as u32 * BAR;
            fill(&mut img, x + 2, y_of(v), x + BAR - 2, zero, Rgb(PALETTE[si % PALETTE.len()]));
        }
        let max_chars = (group_w / 8) as usize;
        let name: String = cat.chars().take(max_chars).collect();
        let cx = gx as i64 + (group_w - GAP) as i64 / 2 - 4 * name.len() as i64;
        text(&mut img, cx, (TOP + plot_h + 8) as i64, &name, BLACK);
    }
    fill(&mut img, LEFT, TOP, LEFT + 1, TOP + plot_h, BLACK);
    fill(&mut img, LEFT, zero, LEFT + plot_w, zero + 1, BLACK);
    if series.len() > 1 {
        let mut x = LEFT as i64;
        let y = (HEIGHT - 18) as i64;
        for (si, s) in series.iter().enumerate() {
            fill(&mut img, x as u32, y as u32, x as u32 + 8, y as u32 + 8, Rgb(PALETTE[si % PALETTE.len()]));
            text(&mut img, x + 12, y, &s.name, BLACK);
            x += 12 + 8 * s.name.len() as i64 + 16;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bar_heights_track_values() {
        let img = bar_chart(
            "t",
            &cats(&["a", "b"]),
            &[Series { name: "m".into(), values: vec![1.0, 0.5] }],
            Axis::Plain,
        );
        let color = Rgb(PALETTE[0]);
        let column = |x: u32| (0..img.height()).filter(|y| *img.get_pixel(x, *y) == color).count();
        let group_w = BAR + GAP;
        let xa = LEFT + GAP / 2 + BAR / 2;
        let (ha, hb) = (column(xa), column(xa + group_w));
        assert!(ha > 0 && hb > 0);
        assert!((ha as f64 / hb as f64 - 2.0).abs() < 0.05, "{ha} {hb}");
    }

    #[test]
    fn negative_values_and_empty_input_render() {
        let img = bar_chart(
            "deltas",
            &cats(&["x"]),
            &[Series { name: "a".into(), values: vec![-0.06] }, Series { name: "b".into(), values: vec![0.02] }],
            Axis::Percent,
        );
        assert_eq!(img.height(), HEIGHT);
        let empty = bar_chart("none", &[], &[], Axis::Plain);
        assert!(empty.width() >= LEFT + 360);
    }
}
