//! Side-by-side match visualization.

use std::path::Path;

use serde::Serialize;
use winmatch_core::matcher::FineMatch;

use crate::error::Result;
use crate::image_io::{write_ppm, GrayImage, RgbImage};

pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];

/// Green above 0.5, red in (0.3, 0.5], nothing otherwise.
pub fn line_color(confidence: f64) -> Option<[u8; 3]> {
    if confidence > 0.5 {
        Some(GREEN)
    } else if confidence > 0.3 {
        Some(RED)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub red: usize,
    pub green: usize,
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.set(x, y, color);
        if (x, y) == to {
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

/// A on the left, B on the right, one line per sufficiently confident match.
pub fn render_matches(a: &GrayImage, b: &GrayImage, matches: &[FineMatch]) -> (RgbImage, RenderStats) {
    let (left, right) = (RgbImage::from_gray(a), RgbImage::from_gray(b));
    let h = a.h.max(b.h);
    let w = a.w + b.w;
    let mut out = RgbImage { h, w, pixels: vec![[0; 3]; h * w] };
    for y in 0..h {
        for x in 0..w {
            let px = if x < a.w { (y < a.h).then(|| left.get(x, y)) } else { (y < b.h).then(|| right.get(x - a.w, y)) };
            if let Some(px) = px {
                out.pixels[y * w + x] = px;
            }
        }
    }
    let mut stats = RenderStats::default();
    for m in matches {
        let Some(color) = line_color(m.confidence) else { continue };
        let from = (m.point_a[0].round() as i64, m.point_a[1].round() as i64);
        let to = ((m.point_b[0] + a.w as f64).round() as i64, m.point_b[1].round() as i64);
        draw_line(&mut out, from, to, color);
        if color == GREEN {
            stats.green += 1;
        } else {
            stats.red += 1;
        }
    }
    (out, stats)
}

pub fn render_to_file(path: &Path, a: &GrayImage, b: &GrayImage, matches: &[FineMatch]) -> Result<RenderStats> {
    let (img, stats) = render_matches(a, b, matches);
    write_ppm(path, &img)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fine(confidence: f64) -> FineMatch {
        FineMatch { i: 0, j: 0, point_a: [2.0, 3.0], point_b: [5.0, 1.0], confidence, sigma2: 0.0 }
    }

    fn count(img: &RgbImage, color: [u8; 3]) -> usize {
        img.pixels.iter().filter(|&&p| p == color).count()
    }

    #[test]
    fn colors_follow_confidence_bands() {
        assert_eq!(line_color(0.3), None);
        assert_eq!(line_color(0.31), Some(RED));
        assert_eq!(line_color(0.5), Some(RED));
        assert_eq!(line_color(0.51), Some(GREEN));
    }

    #[test]
    fn composite_and_lines() {
        let a = GrayImage::new(8, 8, vec![0.5; 64]);
        let b = GrayImage::new(8, 8, vec![0.25; 64]);
        let (img, stats) = render_matches(&a, &b, &[]);
        assert_eq!((img.w, img.h, stats), (16, 8, RenderStats::default()));
        assert_eq!(img.get(0, 0), [128; 3]);
        assert_eq!(img.get(15, 7), [64; 3]);

        let (img, stats) = render_matches(&a, &b, &[fine(0.4)]);
        assert_eq!(stats, RenderStats { red: 1, green: 0 });
        assert!(count(&img, RED) > 0 && count(&img, GREEN) == 0);
        assert_eq!(img.get(2, 3), RED);
        assert_eq!(img.get(13, 1), RED);

        let (img, stats) = render_matches(&a, &b, &[fine(0.9), fine(0.1)]);
        assert_eq!(stats, RenderStats { red: 0, green: 1 });
        assert!(count(&img, GREEN) > 0 && count(&img, RED) == 0);
    }
}
