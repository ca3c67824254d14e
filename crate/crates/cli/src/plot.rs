//! Static PNG of one video's activation curves. No text is rendered: the
//! attention curve is black, class curves use `PALETTE` in class order, and
//! ground-truth segments are shaded with a light tint of their class color.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};

use lgbm_core::feature_store::Segment;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

const WIDTH: u32 = 960;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 20;

pub struct CasPlot<'a> {
    /// `T x C` foreground activations in `[0, 1]`.
    pub activations: &'a Array2<f64>,
    pub attention: &'a Array1<f64>,
    pub segments: &'a [Segment],
    pub snippet_duration_sec: f64,
}

fn color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

fn tint(c: [u8; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (255 - (255 - v as u16) / 4) as u8))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham line, optionally thickened vertically.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if thick {
            put(img, x, y + 1, c);
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

impl CasPlot<'_> {
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let t = self.attention.len().max(1) as f64;
        let plot_w = (WIDTH - 2 * MARGIN) as f64;
        let plot_h = (HEIGHT - 2 * MARGIN) as f64;
        let px = |time: f64| MARGIN as i64 + (time / t * plot_w).round() as i64;
        let py = |v: f64| MARGIN as i64 + ((1.0 - v.clamp(0.0, 1.0)) * plot_h).round() as i64;

        for s in self.segments {
            let x0 = px(s.start_sec / self.snippet_duration_sec);
            let x1 = px(s.end_sec / self.snippet_duration_sec);
            for x in x0..x1 {
                for y in MARGIN as i64..(HEIGHT - MARGIN) as i64 {
                    put(&mut img, x, y, tint(color(s.class_id)));
                }
            }
        }
        let grey = Rgb([200, 200, 200]);
        for v in [0.0, 0.5, 1.0] {
            line(&mut img, (px(0.0), py(v)), (px(t), py(v)), grey, false);
        }

        // curves are sampled at snippet centers
        let mut curve = |values: Vec<f64>, c: Rgb<u8>, thick: bool| {
            for (i, w) in values.windows(2).enumerate() {
                let a = (px(i as f64 + 0.5), py(w[0]));
                let b = (px(i as f64 + 1.5), py(w[1]));
                line(&mut img, a, b, c, thick);
            }
        };
        for (c, column) in self.activations.columns().into_iter().enumerate() {
            curve(column.to_vec(), Rgb(color(c)), false);
        }
        curve(self.attention.to_vec(), Rgb([0, 0, 0]), true);
        img
    }

    pub fn save(&self, path: &Path) -> Result<(), image::ImageError> {
        self.render()
            .save_with_format(path, image::ImageFormat::Png)
    }
}
