//! Planar RGB images and PNG I/O.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A channel-major (C×H×W) image with `f32` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "image buffer has {} samples, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_unit_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    /// Stacks same-shaped images into a `B×C×H×W` tensor.
    pub fn stack(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty image list"))?;
        let shape = first.shape();
        let mut buf = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape() != shape {
                return Err(Error::contract(format!(
                    "image shape {:?} differs from batch shape {:?}",
                    img.shape(),
                    shape
                )));
            }
            buf.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            buf,
            (images.len(), shape.0, shape.1, shape.2),
            device,
        )?)
    }

    /// Inverse of [`Image::stack`]; accepts any float tensor of rank 4.
    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let per = c * h * w;
        Ok((0..b)
            .map(|i| Image {
                channels: c,
                height: h,
                width: w,
                data: flat[i * per..(i + 1) * per].to_vec(),
            })
            .collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynimg = ::image::open(path).map_err(|e| match e {
            ::image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?;
        let color = dynimg.color();
        if color.channel_count() != 3 || color.has_alpha() {
            return Err(Error::Format(format!(
                "{}: expected 3-channel RGB, found {color:?}",
                path.display()
            )));
        }
        if !matches!(
            color,
            ::image::ColorType::Rgb8 | ::image::ColorType::Rgb16 | ::image::ColorType::Rgb32F
        ) {
            return Err(Error::Format(format!(
                "{}: unsupported sample type {color:?}",
                path.display()
            )));
        }
        // integer samples are rescaled onto [0,1] by the conversion
        let rgb = dynimg.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let mut img = Image::zeros(3, h as usize, w as usize);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px[c].clamp(0.0, 1.0));
            }
        }
        Ok(img)
    }

    /// Writes an 8-bit PNG; values are clamped to [0,1]. Single-channel images
    /// are written as grayscale.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let result = match self.channels {
            1 => ::image::GrayImage::from_fn(w, h, |x, y| {
                ::image::Luma([to_u8(self.get(0, y as usize, x as usize))])
            })
            .save(path),
            3 => ::image::RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                ::image::Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ])
            })
            .save(path),
            c => {
                return Err(Error::contract(format!(
                    "can only write 1- or 3-channel images, got {c}"
                )))
            }
        };
        result.map_err(|e| match e {
            ::image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
    }

    /// Rescales each channel independently to span [0,1]. Flat channels map to 0.
    pub fn normalized_for_display(&self) -> Image {
        let mut out = self.clone();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let chunk = &mut out.data[c * plane..(c + 1) * plane];
            let (lo, hi) = chunk
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let span = hi - lo;
            for v in chunk.iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        out
    }
}

/// Tiles equally sized images into a grid with one row per entry of `rows`.
/// All images must share height and width; channel counts may be 1 or 3
/// (grayscale cells are broadcast to RGB).
pub fn image_grid(rows: &[Vec<Image>], pad: usize) -> Result<Image> {
    let cell = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::contract("image grid needs at least one cell"))?;
    let (ch, cw) = (cell.height, cell.width);
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * (ch + pad) + pad;
    let width = ncols * (cw + pad) + pad;
    let mut grid = Image::filled(3, height, width, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if img.height != ch || img.width != cw {
                return Err(Error::contract("grid cells must share spatial size"));
            }
            let (oy, ox) = (pad + r * (ch + pad), pad + k * (cw + pad));
            for c in 0..3 {
                let src_c = if img.channels == 1 { 0 } else { c };
                for y in 0..ch {
                    for x in 0..cw {
                        grid.set(c, oy + y, ox + x, img.get(src_c, y, x));
                    }
                }
            }
        }
    }
    Ok(grid)
}
