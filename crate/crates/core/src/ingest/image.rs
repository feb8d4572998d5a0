//! Planar images, a small PNM codec, capped resizing and flips.

use std::io::Write;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::density::Point;
use crate::error::{config, Error, Result};

pub const MAX_HEIGHT: usize = 768;
pub const MAX_WIDTH: usize = 1024;
pub const SIZE_MULTIPLE: usize = 32;

/// Channel-planar image with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return config(format!(
                "image {channels}x{height}x{width} cannot hold {} samples",
                data.len()
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replicates a gray plane or averages color planes as needed.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, n) => Ok(Image {
                channels: n,
                data: self.data.repeat(n),
                ..*self
            }),
            (_, 1) => {
                let n = self.height * self.width;
                let data = (0..n)
                    .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64)
                    .collect();
                Ok(Image { channels: 1, data, ..*self })
            }
            (a, b) => config(format!("cannot convert a {a}-channel image to {b} channels")),
        }
    }

    /// The image as a `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.data.chunks_mut(self.width) {
            row.reverse();
        }
    }

    /// Bilinear resample where output pixel `o` reads input coordinate `o / scale`.
    pub fn resample(&self, height: usize, width: usize, scale: f64) -> Image {
        let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = (o as f64 / scale).clamp(0.0, (n_in - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let (ys, xs) = (coords(height, self.height), coords(width, self.width));
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let at = |y: usize, x: usize| p[y * self.width + x];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Copies the window at `(top, left)`, zero-filling beyond the source.
    fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height.min(self.height - top) {
                let n = width.min(self.width - left);
                let src = (c * self.height + top + r) * self.width + left;
                let dst = (c * height + r) * width;
                out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
            }
        }
        out
    }

    /// Binary PGM for one channel, binary PPM for three.
    pub fn write_pnm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return config(format!("PNM output needs 1 or 3 channels, got {c}")),
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let n = self.height * self.width;
        let mut bytes = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                bytes.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    /// Decodes P2, P3, P5 or P6 with any maxval up to 65535.
    pub fn read_pnm(bytes: &[u8]) -> Result<Image> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.token()?;
        let (channels, ascii) = match magic {
            b"P2" => (1, true),
            b"P3" => (3, true),
            b"P5" => (1, false),
            b"P6" => (3, false),
            _ => return Err(Error::Format("unsupported PNM magic".into())),
        };
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
            return Err(Error::Format(format!("bad PNM header {width}x{height} maxval {maxval}")));
        }
        if width.saturating_mul(height) > 1 << 28 {
            return Err(Error::Format(format!("PNM image {width}x{height} too large")));
        }
        let n = width * height;
        let mut interleaved = Vec::with_capacity(n * channels);
        if ascii {
            for _ in 0..n * channels {
                interleaved.push(cur.number()?);
            }
        } else {
            // exactly one whitespace byte separates the header from the raster
            cur.pos += 1;
            let wide = maxval > 255;
            let need = n * channels * if wide { 2 } else { 1 };
            let raster = bytes
                .get(cur.pos..cur.pos + need)
                .ok_or_else(|| Error::Format("PNM raster truncated".into()))?;
            if wide {
                interleaved.extend(raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as usize));
            } else {
                interleaved.extend(raster.iter().map(|&b| b as usize));
            }
        }
        if interleaved.iter().any(|&v| v > maxval) {
            return Err(Error::Format("PNM sample exceeds maxval".into()));
        }
        let mut data = vec![0.0; n * channels];
        for (i, &v) in interleaved.iter().enumerate() {
            data[(i % channels) * n + i / channels] = v as f64 / maxval as f64;
        }
        Image::new(channels, height, width, data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("PNM data ended early".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected a number in PNM, found {:?}", String::from_utf8_lossy(t))))
    }
}

/// Downscales so the image fits `max_h × max_w`, then center-crops both
/// dimensions to multiples of 32 (zero-padding any dimension below 32).
///
/// Points are scaled with the image; points outside the crop are dropped.
pub fn resize_with_cap(image: &Image, points: &[Point], max_h: usize, max_w: usize) -> (Image, Vec<Point>) {
    let s = (max_h as f64 / image.height as f64).min(max_w as f64 / image.width as f64);
    let (resized, points): (Image, Vec<Point>) = if s < 1.0 {
        let h = ((image.height as f64 * s).round() as usize).max(1);
        let w = ((image.width as f64 * s).round() as usize).max(1);
        let pts = points.iter().map(|p| Point::new(p.col * s, p.row * s)).collect();
        (image.resample(h, w, s), pts)
    } else {
        (image.clone(), points.to_vec())
    };
    crop_to_multiple(&resized, &points, SIZE_MULTIPLE)
}

/// Center-crops each dimension down to a multiple of `multiple`.
pub fn crop_to_multiple(image: &Image, points: &[Point], multiple: usize) -> (Image, Vec<Point>) {
    let target = |n: usize| ((n / multiple) * multiple).max(multiple);
    let (h, w) = (target(image.height), target(image.width));
    let top = image.height.saturating_sub(h) / 2;
    let left = image.width.saturating_sub(w) / 2;
    let out = image.window(top, left, h, w);
    let pts = points
        .iter()
        .map(|p| Point::new(p.col - left as f64, p.row - top as f64))
        .filter(|p| p.col >= 0.0 && p.row >= 0.0 && p.col <= (w - 1) as f64 && p.row <= (h - 1) as f64)
        .collect();
    (out, pts)
}

/// Mirrors image and points with the given probability; returns whether it did.
pub fn random_flip<R: Rng>(image: &mut Image, points: &mut [Point], probability: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&probability) {
        return config(format!("flip probability must be in [0, 1], got {probability}"));
    }
    let flip = rng.random::<f64>() < probability;
    if flip {
        image.flip_horizontal();
        let max_col = (image.width - 1) as f64;
        for p in points.iter_mut() {
            p.col = max_col - p.col;
        }
    }
    Ok(flip)
}
