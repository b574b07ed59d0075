use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::geometry::Homography;

/// Grayscale image with intensities nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// How samples outside the image are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    Zero,
    Clamp,
    Reflect,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn get_border(&self, x: isize, y: isize, border: Border) -> f64 {
        let inside = x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height;
        if inside {
            return self.get(x as usize, y as usize);
        }
        match border {
            Border::Zero => 0.0,
            Border::Clamp => self.get(
                x.clamp(0, self.width as isize - 1) as usize,
                y.clamp(0, self.height as isize - 1) as usize,
            ),
            Border::Reflect => self.get(reflect(x, self.width), reflect(y, self.height)),
        }
    }

    pub fn bilinear(&self, x: f64, y: f64, border: Border) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.get_border(xi, yi, border);
        let v10 = self.get_border(xi + 1, yi, border);
        let v01 = self.get_border(xi, yi + 1, border);
        let v11 = self.get_border(xi + 1, yi + 1, border);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Resamples into a new image where pixel `p` takes the value at `h⁻¹(p)`,
    /// i.e. `self` is moved by `h`.
    pub fn warp(&self, h: &Homography, out_size: (usize, usize), border: Border) -> Self {
        let inv = h.inverse();
        let m = inv.to_row_major();
        Self::from_fn(out_size.0, out_size.1, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let w = m[6] * xf + m[7] * yf + m[8];
            if w.abs() <= 1e-12 {
                return 0.0;
            }
            let sx = (m[0] * xf + m[1] * yf + m[2]) / w;
            let sy = (m[3] * xf + m[4] * yf + m[5]) / w;
            if !sx.is_finite() || !sy.is_finite() {
                return 0.0;
            }
            self.bilinear(sx, sy, border)
        })
    }

    /// Separable Gaussian blur, kernel radius `ceil(3σ)`, reflected borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        let horiz = Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * self.get_border(x as isize + k as isize - radius, y as isize, Border::Reflect))
                .sum()
        });
        Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * horiz.get_border(x as isize, y as isize + k as isize - radius, Border::Reflect))
                .sum()
        })
    }

    /// Sobel derivatives normalised to intensity units per pixel, clamped borders.
    pub fn sobel(&self) -> (Self, Self) {
        let g = |x: isize, y: isize| self.get_border(x, y, Border::Clamp);
        let gx = Self::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            (g(x + 1, y - 1) + 2.0 * g(x + 1, y) + g(x + 1, y + 1)
                - g(x - 1, y - 1)
                - 2.0 * g(x - 1, y)
                - g(x - 1, y + 1))
                / 8.0
        });
        let gy = Self::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            (g(x - 1, y + 1) + 2.0 * g(x, y + 1) + g(x + 1, y + 1)
                - g(x - 1, y - 1)
                - 2.0 * g(x, y - 1)
                - g(x + 1, y - 1))
                / 8.0
        });
        (gx, gy)
    }

    pub fn gradient_magnitude(&self) -> Self {
        let (gx, gy) = self.sobel();
        Self::from_fn(self.width, self.height, |x, y| gx.get(x, y).hypot(gy.get(x, y)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma32f();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0) as f64).collect();
        Ok(Self::from_vec(w as usize, h as usize, data))
    }

    pub fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear resize (triangle filter).
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.size() {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer size");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Self::from_vec(width, height, out.into_raw().into_iter().map(f64::from).collect())
    }
}
