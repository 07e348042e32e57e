//! Dense (channels, height, width) tensors, 8-bit RGB images and the
//! hole geometry shared by the rest of the crate.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB weights used to collapse the hole to greyscale after the coarse pass.
pub const GREY_WEIGHTS: [f64; 3] = [0.212, 0.7154, 0.0721];

/// Dense real-valued array in row-major (channel, row, column) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a tensor from a per-element function of (channel, row, column).
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
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// (channels, height, width)
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `w`×`h` window with top-left corner (x, y).
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for r in 0..h {
                let src = self.index(c, y + r, x);
                let dst = out.index(c, r, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Writes `patch` into this tensor with its top-left corner at (x, y).
    pub fn paste(&mut self, patch: &Tensor, x: usize, y: usize) -> Result<()> {
        if patch.channels != self.channels
            || x + patch.width > self.width
            || y + patch.height > self.height
        {
            return Err(Error::Shape(format!(
                "paste {:?} at ({x},{y}) into {:?}",
                patch.shape(),
                self.shape()
            )));
        }
        for c in 0..self.channels {
            for r in 0..patch.height {
                let src = patch.index(c, r, 0);
                let dst = self.index(c, y + r, x);
                self.data[dst..dst + patch.width]
                    .copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
        Ok(())
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

/// The hole Ω, the width of the known band Ψ around it, and the image bounds.
/// Everything outside Ω ∪ Ψ is the source region Φ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionSpec {
    pub omega: Rect,
    pub psi_band: usize,
    pub width: usize,
    pub height: usize,
}

impl RegionSpec {
    pub fn new(omega: Rect, psi_band: usize, width: usize, height: usize) -> Result<Self> {
        if omega.right() > width || omega.bottom() > height {
            return Err(Error::InvalidArgument(format!(
                "hole {}x{}+{}+{} outside {width}x{height} image",
                omega.w, omega.h, omega.x, omega.y
            )));
        }
        Ok(RegionSpec {
            omega,
            psi_band,
            width,
            height,
        })
    }

    /// Derives the hole from a mask image (luma ≥ 128 marks Ω). The marked
    /// pixels must form a single filled rectangle.
    pub fn from_mask(mask: &image::GrayImage, psi_band: usize) -> Result<Self> {
        let (w, h) = mask.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        let mut count = 0usize;
        for (x, y, p) in mask.enumerate_pixels() {
            if p.0[0] >= 128 {
                let (x, y) = (x as usize, y as usize);
                count += 1;
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        let omega = match bbox {
            None => Rect::default(),
            Some((x0, y0, x1, y1)) => Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        };
        if count != omega.area() {
            return Err(Error::InvalidArgument(
                "mask hole is not a filled rectangle".into(),
            ));
        }
        RegionSpec::new(omega, psi_band, w, h)
    }

    #[inline]
    pub fn in_omega(&self, x: usize, y: usize) -> bool {
        self.omega.contains(x, y)
    }

    /// Ω grown by the Ψ band, clipped to the image.
    pub fn omega_with_band(&self) -> Rect {
        if self.omega.is_empty() {
            return self.omega;
        }
        let x0 = self.omega.x.saturating_sub(self.psi_band);
        let y0 = self.omega.y.saturating_sub(self.psi_band);
        let x1 = (self.omega.right() + self.psi_band).min(self.width);
        let y1 = (self.omega.bottom() + self.psi_band).min(self.height);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// 1×H×W mask with 0 inside Ω and 1 elsewhere.
    pub fn known_mask(&self) -> Tensor {
        Tensor::from_fn(1, self.height, self.width, |_, y, x| {
            if self.in_omega(x, y) {
                0.0
            } else {
                1.0
            }
        })
    }

    /// 1×H×W mask with 1 on Φ (outside Ω ∪ Ψ) and 0 elsewhere.
    pub fn source_mask(&self) -> Tensor {
        let band = self.omega_with_band();
        Tensor::from_fn(1, self.height, self.width, |_, y, x| {
            if band.contains(x, y) {
                0.0
            } else {
                1.0
            }
        })
    }
}

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        ImageBuffer {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0).collect();
        ImageBuffer::new(w as usize, h as usize, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Loads a mask PNG (greyscale or RGB) as luma.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<image::GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// 3×H×W tensor with values in [0, 255], channels in R, G, B order.
pub fn image_to_tensor(img: &ImageBuffer) -> Tensor {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(3, h, w, |c, y, x| f64::from(img.pixels[y * w + x][c]))
}

/// Clamps to [0, 255] and rounds half away from zero.
pub fn tensor_to_image(t: &Tensor) -> Result<ImageBuffer> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            t.channels()
        )));
    }
    let quantize = |v: f64| v.clamp(0.0, 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(t.width(), t.height(), |x, y| {
        [
            quantize(t.get(0, y, x)),
            quantize(t.get(1, y, x)),
            quantize(t.get(2, y, x)),
        ]
    }))
}

/// Replaces every Ω pixel, channel by channel, with the mean of that channel
/// over the pixels marked nonzero in `source_mask`.
pub fn fill_with_channel_means(
    t: &Tensor,
    region: &RegionSpec,
    source_mask: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = t.shape();
    if source_mask.shape() != (1, h, w) || (region.width, region.height) != (w, h) {
        return Err(Error::Shape(format!(
            "mask {:?} / region {}x{} vs tensor {:?}",
            source_mask.shape(),
            region.width,
            region.height,
            t.shape()
        )));
    }
    let count = source_mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptySource);
    }
    let mut out = t.clone();
    let omega = region.omega;
    for ch in 0..c {
        let sum: f64 = t
            .plane(ch)
            .iter()
            .zip(source_mask.data())
            .filter(|(_, &m)| m != 0.0)
            .map(|(v, _)| v)
            .sum();
        let mean = sum / count as f64;
        for y in omega.y..omega.bottom() {
            for x in omega.x..omega.right() {
                out.set(ch, y, x, mean);
            }
        }
    }
    Ok(out)
}

/// Sets all three channels of each Ω pixel to its weighted grey value.
pub fn to_greyscale_region(t: &Tensor, region: &RegionSpec) -> Result<Tensor> {
    to_greyscale_region_weighted(t, region, GREY_WEIGHTS)
}

/// [`to_greyscale_region`] with explicit RGB weights.
pub fn to_greyscale_region_weighted(
    t: &Tensor,
    region: &RegionSpec,
    weights: [f64; 3],
) -> Result<Tensor> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            t.channels()
        )));
    }
    let mut out = t.clone();
    let omega = region.omega;
    for y in omega.y..omega.bottom().min(t.height()) {
        for x in omega.x..omega.right().min(t.width()) {
            let grey = weights[0] * t.get(0, y, x)
                + weights[1] * t.get(1, y, x)
                + weights[2] * t.get(2, y, x);
            for c in 0..3 {
                out.set(c, y, x, grey);
            }
        }
    }
    Ok(out)
}
