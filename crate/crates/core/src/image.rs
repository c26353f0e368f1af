//! RGB images with f64 pixels in [0, 1], stored row-major H×W×3.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(
                "image",
                format!("{} values for {height}x{width}x3", pixels.len()),
            ));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `1 × 3 × H × W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, 3, self.height, self.width], |_, c, y, x| self.get(y, x, c))
    }

    /// Item `n` of an `N × 3 × H × W` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let s = t.shape();
        if s.c() != 3 || n >= s.n() {
            return Err(Error::dim("image", format!("cannot take image {n} from {s}")));
        }
        Ok(Image::from_fn(s.h(), s.w(), |y, x, c| t.at(n, c, y, x)))
    }

    /// Stacks equally sized images into one batch tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|i| i.height != h || i.width != w) {
            return Err(Error::dim("image batch", "images differ in size"));
        }
        Ok(Tensor::from_fn(Shape::new(images.len(), 3, h, w), |n, c, y, x| {
            images[n].get(y, x, c)
        }))
    }

    /// Loads PNG or binary PPM (format detected from content).
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        Image::new(h as usize, w as usize, pixels)
    }

    /// Saves as 8-bit RGB; the format follows the extension (`.png` or `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Single-channel map (e.g. a snow mask), row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear (half-pixel-centre) resampling.
    pub fn resized(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let src = |d: usize, scale: f64, len: usize| {
            let p = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (p.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, p - i0 as f64)
        };
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, ty) = src(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, tx) = src(x, sx, self.width);
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                values.push(top * (1.0 - ty) + bot * ty);
            }
        }
        Mask { height, width, values }
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask {
            height: h as usize,
            width: w as usize,
            values: img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
