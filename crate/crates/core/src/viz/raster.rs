//! Minimal drawing on RGB canvases.

use image::{Rgb, RgbImage};

pub(crate) const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub(crate) const GRAY: Rgb<u8> = Rgb([200, 200, 200]);
pub(crate) const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
pub(crate) const RED: Rgb<u8> = Rgb([230, 30, 30]);

/// Distinct colors for categorical series.
pub(crate) const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Marker {
    Circle,
    Square,
    Triangle,
}

pub(crate) fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub(crate) fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 - x0) as f64;
        let y = y0 as f64 + t * (y1 - y0) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

pub(crate) fn rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    line(img, (x0, y0), (x1, y0), c);
    line(img, (x1, y0), (x1, y1), c);
    line(img, (x1, y1), (x0, y1), c);
    line(img, (x0, y1), (x0, y0), c);
}

pub(crate) fn marker(img: &mut RgbImage, cx: i64, cy: i64, r: i64, m: Marker, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            let inside = match m {
                Marker::Circle => dx * dx + dy * dy <= r * r,
                Marker::Square => true,
                // Apex up: half-width grows linearly from top to bottom.
                Marker::Triangle => 2 * dx.abs() <= dy + r,
            };
            if inside {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Piecewise-linear approximation of the viridis colormap on [0, 1].
pub(crate) fn viridis(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mix = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Maps data coordinates into a pixel box with a margin.
pub(crate) struct Frame {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub width: u32,
    pub height: u32,
    pub margin: u32,
}

impl Frame {
    pub fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, width: u32, height: u32) -> Self {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
            width,
            height,
            margin: 24,
        }
    }

    pub fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let m = self.margin as f64;
        let w = self.width as f64 - 2.0 * m;
        let h = self.height as f64 - 2.0 * m;
        let u = (x - self.x.0) / (self.x.1 - self.x.0);
        let v = (y - self.y.0) / (self.y.1 - self.y.0);
        ((m + u * w).round() as i64, (m + (1.0 - v) * h).round() as i64)
    }

    pub fn axes(&self, img: &mut RgbImage) {
        let m = self.margin as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        line(img, (m, h - m), (w - m, h - m), BLACK);
        line(img, (m, m), (m, h - m), BLACK);
    }
}
