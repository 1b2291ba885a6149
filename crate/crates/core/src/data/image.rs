use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

/// Axis-aligned rectangle in pixel coordinates of some source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRegion {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height >= 1
            && self.width >= 1
            && self.top + self.height <= height
            && self.left + self.width <= width
    }

    /// Region expressed in the coordinates of an image this one was cut from.
    pub fn offset(&self, top: usize, left: usize) -> CropRegion {
        CropRegion {
            top: self.top + top,
            left: self.left + left,
            ..*self
        }
    }
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("image extent {height}x{width} is empty")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Invalid(format!(
                "image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copies `region` out without interpolation.
    pub fn crop(&self, region: &CropRegion) -> Result<Image> {
        if !region.fits(self.height, self.width) {
            return Err(Error::Invalid(format!(
                "crop {region:?} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(region.height * region.width * 3);
        for y in region.top..region.top + region.height {
            let start = (y * self.width + region.left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + region.width * 3]);
        }
        Ok(Image {
            height: region.height,
            width: region.width,
            pixels,
        })
    }

    /// Bilinear resize of the whole image.
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("resize target {height}x{width} is empty")));
        }
        let full = CropRegion {
            top: 0,
            left: 0,
            height: self.height,
            width: self.width,
        };
        Ok(resize_region(self, &full, height, width).to_u8())
    }

    #[cfg(test)]
    pub(crate) fn to_float(&self) -> FloatImage {
        FloatImage {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        }
    }
}

/// Working buffer for photometric transforms: interleaved RGB in `[0, 1]`.
#[derive(Clone, Debug)]
pub(crate) struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn to_u8(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(3)
    }
}

/// Bilinear resize of `region` of `src` to `out_h x out_w`, half-pixel centers.
///
/// Sample positions are clamped to the region, so no pixel outside it is read.
pub(crate) fn resize_region(src: &Image, region: &CropRegion, out_h: usize, out_w: usize) -> FloatImage {
    let sy = region.height as f64 / out_h as f64;
    let sx = region.width as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, len: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|ox| axis(ox, sx, region.width)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, region.height);
        let (y0, y1) = (y0 + region.top, y1 + region.top);
        for &(x0, x1, fx) in &xs {
            let (x0, x1) = (x0 + region.left, x1 + region.left);
            for ch in 0..3 {
                let p = |y: usize, x: usize| f64::from(src.pixels[(y * src.width + x) * 3 + ch]);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) / 255.0);
            }
        }
    }
    FloatImage {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Invalid(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for ch in 0..3 {
            data.extend(img.pixels.iter().skip(ch).step_by(3).map(|&p| f64::from(p) / 255.0));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
