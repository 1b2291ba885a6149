//! Center cropping, center-suppressed random cropping and the photometric transform set.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::image::{resize_region, CropRegion, FloatImage, Image};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side-length ratio kept by the center crop.
    pub p: f64,
    /// Shape of the symmetric Beta distribution placing crop centers.
    pub alpha: f64,
    pub out_size: usize,
    /// Crop area as a fraction of the source area.
    pub scale_range: [f64; 2],
    /// Width / height ratio bounds.
    pub aspect_range: [f64; 2],
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub flip_prob: f64,
    /// Center-crop both views instead of only the first.
    pub center_crop_both: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p: 0.5,
            alpha: 0.6,
            out_size: 32,
            scale_range: [0.2, 1.0],
            aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            jitter_strength: 0.4,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            flip_prob: 0.5,
            center_crop_both: false,
        }
    }
}

impl AugmentConfig {
    /// Crops only: full-image crop, no photometric randomness.
    pub fn identity(out_size: usize) -> Self {
        AugmentConfig {
            p: 1.0,
            out_size,
            scale_range: [1.0, 1.0],
            aspect_range: [1.0, 1.0],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("augment.{k}");
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config(key("p"), "p must be in (0,1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(key("alpha"), "alpha must be in (0,1)"));
        }
        if self.out_size < 4 {
            return Err(Error::config(key("out_size"), "out_size must be at least 4"));
        }
        let [smin, smax] = self.scale_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::config(
                key("scale_range"),
                "scale_range must satisfy 0 < min <= max <= 1",
            ));
        }
        let [amin, amax] = self.aspect_range;
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::config(
                key("aspect_range"),
                "aspect_range must satisfy 0 < min <= max",
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::config(key("jitter_strength"), "jitter_strength must be in [0,1]"));
        }
        for (name, v) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key(name), format!("{name} must be in [0,1]")));
            }
        }
        let [bmin, bmax] = self.blur_sigma;
        if !(bmin > 0.0 && bmin <= bmax && bmax.is_finite()) {
            return Err(Error::config(key("blur_sigma"), "blur_sigma must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// Region kept by a center crop with side ratio `p`.
///
/// Extents are `floor(p * len)`; the offset is `floor((len - extent) / 2)`.
pub fn center_crop_region(height: usize, width: usize, p: f64) -> Result<CropRegion> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Invalid(format!("center crop ratio {p} outside (0,1]")));
    }
    // The epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    let extent = |len: usize| (p * len as f64 + 1e-9).floor() as usize;
    let (ch, cw) = (extent(height), extent(width));
    if ch < 1 || cw < 1 {
        return Err(Error::Invalid(format!(
            "center crop of {height}x{width} at p={p} is smaller than one pixel"
        )));
    }
    Ok(CropRegion {
        top: (height - ch) / 2,
        left: (width - cw) / 2,
        height: ch,
        width: cw,
    })
}

pub fn center_crop(img: &Image, p: f64) -> Result<Image> {
    let region = center_crop_region(img.height(), img.width(), p)?;
    img.crop(&region)
}

/// Draws from Beta(alpha, alpha) with Jöhnk's algorithm (requires `0 < alpha < 1`).
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("beta shape {alpha} outside (0,1)")));
    }
    loop {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        if u == 0.0 || v == 0.0 {
            continue;
        }
        // Work with logs of x = u^(1/a), y = v^(1/a); small alpha underflows otherwise.
        let lx = u.ln() / alpha;
        let ly = v.ln() / alpha;
        let lm = lx.max(ly);
        let lsum = lm + ((lx - lm).exp() + (ly - lm).exp()).ln();
        if lsum <= 0.0 {
            return Ok((lx - lsum).exp());
        }
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Samples a crop rectangle: area and aspect ratio uniform, centers placed by Beta(alpha, alpha).
pub(crate) fn sample_crop_region(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<CropRegion> {
    let area = (height * width) as f64;
    let (lmin, lmax) = (cfg.aspect_range[0].ln(), cfg.aspect_range[1].ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = uniform(rng, cfg.scale_range[0], cfg.scale_range[1]) * area;
        let ratio = uniform(rng, lmin, lmax).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=width).contains(&cw) && (1..=height).contains(&ch) {
            let u = sample_beta(cfg.alpha, rng)?;
            let v = sample_beta(cfg.alpha, rng)?;
            return Ok(CropRegion {
                top: (v * (height - ch) as f64).round() as usize,
                left: (u * (width - cw) as f64).round() as usize,
                height: ch,
                width: cw,
            });
        }
    }
    let side = height.min(width);
    Ok(CropRegion {
        top: (height - side) / 2,
        left: (width - side) / 2,
        height: side,
        width: side,
    })
}

/// Random crop with center-suppressed placement, resized to `out_size x out_size`.
pub fn center_suppressed_crop(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(CropRegion, Image)> {
    let region = sample_crop_region(img.height(), img.width(), cfg, rng)?;
    let out = resize_region(img, &region, cfg.out_size, cfg.out_size).to_u8();
    Ok((region, out))
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn rgb_to_hsv(px: &[f64]) -> (f64, f64, f64) {
    let (r, g, b) = (px[0], px[1], px[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64, px: &mut [f64]) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    px[0] = r;
    px[1] = g;
    px[2] = b;
}

fn color_jitter(img: &mut FloatImage, strength: f64, rng: &mut Rng) {
    let brightness = uniform(rng, 1.0 - strength, 1.0 + strength);
    let contrast = uniform(rng, 1.0 - strength, 1.0 + strength);
    let saturation = uniform(rng, 1.0 - strength, 1.0 + strength);
    let hue = uniform(rng, -0.1 * strength, 0.1 * strength);

    for px in img.pixels_mut() {
        for c in px.iter_mut() {
            *c = (*c * brightness).clamp(0.0, 1.0);
        }
    }
    let n = (img.height * img.width) as f64;
    let mean = img.data.chunks_exact(3).map(luma).sum::<f64>() / n;
    for px in img.pixels_mut() {
        for c in px.iter_mut() {
            *c = (mean + (*c - mean) * contrast).clamp(0.0, 1.0);
        }
    }
    for px in img.pixels_mut() {
        let gray = luma(px);
        for c in px.iter_mut() {
            *c = (gray + (*c - gray) * saturation).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for px in img.pixels_mut() {
            let (h, s, v) = rgb_to_hsv(px);
            hsv_to_rgb(h + hue, s, v, px);
        }
    }
}

fn grayscale(img: &mut FloatImage) {
    for px in img.pixels_mut() {
        let g = luma(px);
        px.fill(g);
    }
}

fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    // Reflect-101 border handling.
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m >= n { period - m } else { m }) as usize
    };
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x + k as isize - radius as isize, w);
                    s += kv * img.data[((y as usize) * img.width + xx) * 3 + c];
                }
                tmp[((y as usize) * img.width + x as usize) * 3 + c] = s;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y + k as isize - radius as isize, h);
                    s += kv * tmp[(yy * img.width + x as usize) * 3 + c];
                }
                img.data[((y as usize) * img.width + x as usize) * 3 + c] = s;
            }
        }
    }
}

fn hflip(img: &mut FloatImage) {
    let w = img.width;
    for row in img.data.chunks_exact_mut(w * 3) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

/// The photometric transform set: color jitter, grayscale, blur, horizontal flip.
fn photometric(img: &mut FloatImage, cfg: &AugmentConfig, rng: &mut Rng) {
    // Every draw is taken unconditionally so each branch consumes a fixed amount of randomness.
    let jitter = rng.gen::<f64>() < cfg.jitter_prob;
    let gray = rng.gen::<f64>() < cfg.grayscale_prob;
    let blur = rng.gen::<f64>() < cfg.blur_prob;
    let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    if jitter && cfg.jitter_strength > 0.0 {
        color_jitter(img, cfg.jitter_strength, rng);
    }
    if gray {
        grayscale(img);
    }
    if blur {
        gaussian_blur(img, sigma);
    }
    if flip {
        hflip(img);
    }
}

/// Source regions (in original-image coordinates) the two views were resampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairTrace {
    pub first: CropRegion,
    pub second: CropRegion,
}

fn one_view(
    img: &Image,
    centered: bool,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(CropRegion, Image)> {
    let base = if centered {
        center_crop_region(img.height(), img.width(), cfg.p)?
    } else {
        CropRegion {
            top: 0,
            left: 0,
            height: img.height(),
            width: img.width(),
        }
    };
    let local = sample_crop_region(base.height, base.width, cfg, rng)?;
    let region = local.offset(base.top, base.left);
    let mut view = resize_region(img, &region, cfg.out_size, cfg.out_size);
    photometric(&mut view, cfg, rng);
    Ok((region, view.to_u8()))
}

/// Two views of one image: the first is cropped from the center-cropped image,
/// the second from the full image. Both then pass through the photometric set.
pub fn augment_pair_traced(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Image, Image, PairTrace)> {
    if img.height() < 4 || img.width() < 4 {
        return Err(Error::Invalid(format!(
            "image {}x{} is too small to augment",
            img.height(),
            img.width()
        )));
    }
    let (first, x1) = one_view(img, true, cfg, rng)?;
    let (second, x2) = one_view(img, cfg.center_crop_both, cfg, rng)?;
    Ok((x1, x2, PairTrace { first, second }))
}

pub fn augment_pair(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Image, Image)> {
    augment_pair_traced(img, cfg, rng).map(|(a, b, _)| (a, b))
}

/// Augments a batch in parallel. Sample `i` draws from the substream
/// `(seed, AUGMENT, epoch, ids[i])`, so output is independent of thread count.
pub fn augment_batch(
    images: &[&Image],
    ids: &[u64],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let pairs: Result<Vec<(Image, Image)>> = images
        .par_iter()
        .zip(ids.par_iter())
        .map(|(img, &id)| {
            let mut r = rng::substream(seed, rng::domain::AUGMENT, &[epoch, id]);
            augment_pair(img, cfg, &mut r)
        })
        .collect();
    Ok(pairs?.into_iter().unzip())
}
