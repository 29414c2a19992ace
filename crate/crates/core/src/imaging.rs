//! Square three-channel images and the crop/augment/PNG plumbing around them.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// Square `3×E×E` image, channel-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    edge: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(edge: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * edge * edge {
            return Err(Error::shape("Image::new", &[3, edge, edge], &[data.len()]));
        }
        Ok(Self { edge, data })
    }

    pub fn filled(edge: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * edge * edge);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, edge * edge));
        }
        Self { edge, data }
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.edge + y) * self.edge + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let e = self.edge;
        self.data[(c * e + y) * e + x] = v;
    }

    /// Rounds every value to the nearest multiple of 1/255 in `[0, 1]`, so the
    /// image survives an 8-bit PNG round trip unchanged.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Luminance replicated into all three channels.
    pub fn grayscale(&self) -> Self {
        let n = self.edge * self.edge;
        let mut out = self.clone();
        for i in 0..n {
            let l = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            out.data[i] = l;
            out.data[n + i] = l;
            out.data[2 * n + i] = l;
        }
        out
    }

    fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let e = self.edge as f64;
        if x < -0.5 || y < -0.5 || x > e - 0.5 || y > e - 0.5 {
            return 0.0;
        }
        let xc = x.clamp(0.0, e - 1.0);
        let yc = y.clamp(0.0, e - 1.0);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.edge - 1), (y0 + 1).min(self.edge - 1));
        let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resample of the square window `window` into an `out×out`
    /// image, optionally rotated by `angle` radians about the window centre.
    /// Pixels falling outside the frame read as zero.
    pub fn crop(&self, window: &CropWindow, out: usize, angle: f64) -> Image {
        let scale = window.side / out as f64;
        let (cx, cy) = window.center();
        let (s, c) = angle.sin_cos();
        let mut img = Image::filled(out, [0.0; 3]);
        let half = out as f64 / 2.0;
        for oy in 0..out {
            for ox in 0..out {
                let dx = (ox as f64 + 0.5 - half) * scale;
                let dy = (oy as f64 + 0.5 - half) * scale;
                let sx = cx + c * dx - s * dy - 0.5;
                let sy = cy + s * dx + c * dy - 0.5;
                for ch in 0..3 {
                    img.set(ch, oy, ox, self.sample(ch, sy, sx));
                }
            }
        }
        img
    }

    pub fn to_png(&self, path: &Path) -> Result<()> {
        let e = self.edge as u32;
        let buf = ImageBuffer::from_fn(e, e, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let e = self.edge as u32;
        let buf = ImageBuffer::from_fn(e, e, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok(bytes)
    }

    pub fn from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::arg(format!("{}: frame is {w}×{h}, expected square", path.display())));
        }
        let e = w as usize;
        let mut out = Image::filled(e, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }
}

/// Square crop region in frame pixels: top-left corner and side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    /// Window of side `side` centred on `(cx, cy)`, shifted to lie inside a
    /// frame of edge `frame` when it fits.
    pub fn centered_clamped(cx: f64, cy: f64, side: f64, frame: usize) -> Self {
        let e = frame as f64;
        let side = side.max(1.0);
        let place = |c: f64| {
            let start = c - side / 2.0;
            if side >= e {
                (e - side) / 2.0
            } else {
                start.clamp(0.0, e - side)
            }
        };
        Self {
            x0: place(cx),
            y0: place(cy),
            side,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x0 + self.side / 2.0, self.y0 + self.side / 2.0)
    }

    /// Frame pixel → crop pixel for a crop resampled to `out` pixels.
    pub fn to_crop(&self, x: f64, y: f64, out: usize) -> (f64, f64) {
        let s = out as f64 / self.side;
        ((x - self.x0) * s, (y - self.y0) * s)
    }

    /// Crop pixel → frame pixel.
    pub fn to_frame(&self, x: f64, y: f64, out: usize) -> (f64, f64) {
        let s = self.side / out as f64;
        (self.x0 + x * s, self.y0 + y * s)
    }
}
