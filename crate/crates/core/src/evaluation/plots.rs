//! Static PNG plots: match visualisations, ratio histograms and sweep curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{Error, Result};
use crate::features::Image;
use crate::geometry::Point;

const GREEN: Rgb<u8> = Rgb([40, 200, 60]);
const RED: Rgb<u8> = Rgb([220, 40, 40]);
const YELLOW: Rgb<u8> = Rgb([230, 200, 40]);
const BLUE: Rgb<u8> = Rgb([50, 90, 200]);
const GREY: Rgb<u8> = Rgb([120, 120, 120]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Line colour for a match: correct (green), wrong (red) or no ground truth
/// available (yellow).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineClass {
    Correct,
    Wrong,
    Unknown,
}

impl LineClass {
    pub fn color(self) -> Rgb<u8> {
        match self {
            LineClass::Correct => GREEN,
            LineClass::Wrong => RED,
            LineClass::Unknown => YELLOW,
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Side-by-side composite of both images with one line per match.
pub fn render_matches(a: &Image, b: &Image, lines: &[(Point, Point)], classes: &[LineClass]) -> RgbImage {
    let (wa, ha) = a.size();
    let (wb, hb) = b.size();
    let mut out = RgbImage::new((wa + wb) as u32, ha.max(hb) as u32);
    for (img, dx) in [(a, 0), (b, wa)] {
        let luma = img.to_luma8();
        for (x, y, p) in luma.enumerate_pixels() {
            out.put_pixel(x + dx as u32, y, Rgb([p[0]; 3]));
        }
    }
    for (&(pa, pb), &class) in lines.iter().zip(classes) {
        draw_line_segment_mut(
            &mut out,
            (pa[0] as f32, pa[1] as f32),
            ((pb[0] + wa as f64) as f32, pb[1] as f32),
            class.color(),
        );
    }
    out
}

pub fn write_match_plot(path: &Path, a: &Image, b: &Image, lines: &[(Point, Point)], classes: &[LineClass]) -> Result<()> {
    save(&render_matches(a, b, lines, classes), path)
}

/// Bar chart of histogram counts, bars scaled to the tallest bin.
pub fn render_histogram(counts: &[usize]) -> RgbImage {
    const W: u32 = 400;
    const H: u32 = 240;
    const PAD: u32 = 10;
    let mut out = RgbImage::from_pixel(W, H, WHITE);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = counts.len().max(1) as u32;
    let bar_w = ((W - 2 * PAD) / n).max(1);
    for (k, &c) in counts.iter().enumerate() {
        let h = ((H - 2 * PAD) as f64 * c as f64 / max).round() as u32;
        if h > 0 {
            let rect = Rect::at((PAD + k as u32 * bar_w) as i32, (H - PAD - h) as i32).of_size(bar_w.saturating_sub(1).max(1), h);
            draw_filled_rect_mut(&mut out, rect, BLUE);
        }
    }
    draw_hollow_rect_mut(&mut out, Rect::at(PAD as i32 - 1, PAD as i32 - 1).of_size(W - 2 * PAD + 2, H - 2 * PAD + 2), GREY);
    out
}

pub fn write_ratio_histogram(path: &Path, counts: &[usize]) -> Result<()> {
    save(&render_histogram(counts), path)
}

/// Polyline through `(x, y)` points, axes fitted to the data range.
pub fn render_curve(points: &[(f64, f64)]) -> RgbImage {
    const W: u32 = 400;
    const H: u32 = 240;
    const PAD: f64 = 20.0;
    let mut out = RgbImage::from_pixel(W, H, WHITE);
    draw_hollow_rect_mut(
        &mut out,
        Rect::at(PAD as i32, PAD as i32).of_size(W - 2 * PAD as u32, H - 2 * PAD as u32),
        GREY,
    );
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if finite.is_empty() {
        return out;
    }
    let (xlo, xhi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.0), h.max(p.0)));
    let (ylo, yhi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        (
            (PAD + (x - xlo) / span(xlo, xhi) * (W as f64 - 2.0 * PAD)) as f32,
            (H as f64 - PAD - (y - ylo) / span(ylo, yhi) * (H as f64 - 2.0 * PAD)) as f32,
        )
    };
    for w in finite.windows(2) {
        draw_line_segment_mut(&mut out, to_px(w[0]), to_px(w[1]), BLUE);
    }
    for &p in &finite {
        let (x, y) = to_px(p);
        draw_filled_rect_mut(&mut out, Rect::at(x as i32 - 2, y as i32 - 2).of_size(5, 5), RED);
    }
    out
}

pub fn write_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    save(&render_curve(points), path)
}
