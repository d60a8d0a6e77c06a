//! Core value types shared across the engine: spatial grids, latents,
//! pixel images, and small dense matrices.
//!
//! Everything is `f64` and row-major. Latents follow the 4-channel,
//! 1/8-pixel-resolution layout used by latent diffusion codecs; the channel
//! count is carried explicitly so mocks and adapters agree on shapes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Number of latent channels produced by the codecs in this project.
pub const LATENT_CHANNELS: usize = 4;

/// A single-channel 2-D grid of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bilinear resample to `(target_height, target_width)` with the
    /// half-pixel-center convention (corner alignment off) and clamped edges.
    pub fn resize_bilinear(&self, target_height: usize, target_width: usize) -> Grid {
        resize_bilinear_with(
            self.height,
            self.width,
            target_height,
            target_width,
            |y, x| self.get(y, x),
        )
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Shared bilinear kernel. `fetch` reads the source at integer coordinates.
pub(crate) fn resize_bilinear_with(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    fetch: impl Fn(usize, usize) -> f64,
) -> Grid {
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = (i as f64 + 0.5) * scale - 0.5;
                let pos = pos.clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(src_h, dst_h);
    let xs = axis(src_w, dst_w);
    let mut out = Grid::zeros(dst_h, dst_w);
    for (yi, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (xi, &(x0, x1, wx)) in xs.iter().enumerate() {
            let top = fetch(y0, x0) * (1.0 - wx) + fetch(y0, x1) * wx;
            let bot = fetch(y1, x0) * (1.0 - wx) + fetch(y1, x1) * wx;
            out.set(yi, xi, top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// A multi-channel latent: `channels` grids of `height x width`, stored
/// channel-major (`[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Latent {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Latent {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Latent {
            channels,
            height,
            width,
            data,
        }
    }

    /// Standard-normal latent drawn element by element in index order, so a
    /// seeded RNG yields a reproducible noise tensor.
    pub fn gaussian(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let n = channels * height * width;
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Latent {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_channels(grids: Vec<Grid>) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Shape("latent needs at least one channel".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for (c, g) in grids.iter().enumerate() {
            if g.height != h || g.width != w {
                return Err(Error::Shape(format!(
                    "channel {c} is {}x{}, expected {h}x{w}",
                    g.height, g.width
                )));
            }
            data.extend_from_slice(&g.data);
        }
        Ok(Latent {
            channels: grids.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> Grid {
        let plane = self.height * self.width;
        Grid {
            height: self.height,
            width: self.width,
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape_of(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &Latent, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "add_scaled operands differ: {:?} vs {:?}",
                self.shape_of(),
                other.shape_of()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn linf_distance(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A pixel image: `height x width x channels`, interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean over channels at one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            return self.data[base];
        }
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    pub fn resize_bilinear(&self, target_height: usize, target_width: usize) -> Image {
        let mut out = Image::zeros(target_height, target_width, self.channels);
        for c in 0..self.channels {
            let g = resize_bilinear_with(
                self.height,
                self.width,
                target_height,
                target_width,
                |y, x| self.get(y, x, c),
            );
            for y in 0..target_height {
                for x in 0..target_width {
                    out.set(y, x, c, g.get(y, x));
                }
            }
        }
        out
    }

    /// Crop a pixel window; errors if the window exceeds the image bounds.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Argument(format!(
                "crop window ({top},{left}) {height}x{width} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(height, width, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(top + y, left + x, c));
                }
            }
        }
        Ok(out)
    }

    /// Quantized 8-bit bytes in pixel/channel order, used for content hashing
    /// and PNG encoding.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// A small dense matrix, row-major. Used for attention queries, keys,
/// values, and score tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other`, with a shape error naming both operands.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: left is {}x{}, right is {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}
