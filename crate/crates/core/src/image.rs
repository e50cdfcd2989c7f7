//! Host-side RGB images with pixels in `[-1, 1]`, stored row-major HWC.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("image buffer", height * width * 3, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = self.idx(y, x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if top + size_h > self.height || left + size_w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {size_h}x{size_w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w * 3);
        for y in top..top + size_h {
            let s = self.idx(y, left);
            data.extend_from_slice(&self.data[s..s + size_w * 3]);
        }
        Self::new(size_h, size_w, data)
    }

    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size > self.height || size > self.width {
            return Err(Error::InvalidArgument(format!(
                "center crop {size} exceeds {}x{}",
                self.height, self.width
            )));
        }
        self.crop(
            (self.height - size) / 2,
            (self.width - size) / 2,
            size,
            size,
        )
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear resample with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::filled(height, width, [0.0; 3]);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b, c, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                let mut p = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - wx) + b[k] * wx;
                    let bot = c[k] * (1.0 - wx) + d[k] * wx;
                    p[k] = top * (1.0 - wy) + bot * wy;
                }
                out.set_pixel(y, x, p);
            }
        }
        out
    }

    /// 8-bit quantization used for PNG storage: `v = (x + 1) * 127.5`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect(),
        )
    }

    /// Snaps every value onto the 8-bit grid so that PNG round trips are exact.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.height, self.width, &self.to_rgb8()).unwrap()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::InvalidArgument("image buffer size".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::ImageDecode { reason, .. } => Error::ImageDecode {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Center crop to a square, then bilinear resize to `size x size`.
    pub fn fit_square(&self, size: usize) -> Self {
        let side = self.height.min(self.width);
        let sq = self
            .crop(
                (self.height - side) / 2,
                (self.width - side) / 2,
                side,
                side,
            )
            .unwrap();
        sq.resize_bilinear(size, size)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, self.height, self.width, 3), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    /// Read image `i` of an NHWC batch.
    pub fn from_tensor(batch: &Tensor, i: usize) -> Result<Self> {
        let (_, h, w, c) = batch.dims4()?;
        if c != 3 {
            return Err(Error::shape("image channels", 3, c));
        }
        let data: Vec<f32> = batch
            .get(i)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        Self::new(h, w, data)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Stacks same-sized images into an NHWC tensor.
pub fn stack(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(
                "image batch",
                format!("{h}x{w}"),
                format!("{}x{}", img.height, img.width),
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}
