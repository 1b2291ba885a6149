//! Procedural stand-in for a small natural-image dataset.
//!
//! Each class has its own base hue, stripe orientation and blob position; images add
//! random stripe phase, blob jitter, brightness shifts and pixel noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;

use crate::data::cifar::{write_cifar, DatasetRecord, NUM_CLASSES, SIDE};
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

fn hue_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    // Box-Muller; one draw per call keeps consumption fixed.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn render(class: usize, classes: usize, rng: &mut Rng) -> Image {
    let frac = class as f64 / classes as f64;
    let base = hue_to_rgb(frac, 0.75, 0.75);
    let theta = PI * frac;
    let (dx, dy) = (theta.cos(), theta.sin());
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let blob_angle = 2.0 * PI * frac;
    let bx = 15.5 + 8.0 * blob_angle.cos() + (rng.gen::<f64>() - 0.5) * 4.0;
    let by = 15.5 + 8.0 * blob_angle.sin() + (rng.gen::<f64>() - 0.5) * 4.0;
    let brightness = 1.0 + (rng.gen::<f64>() - 0.5) * 0.2;

    let mut pixels = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (xf, yf) = (x as f64, y as f64);
            let stripe = 0.25 * ((xf * dx + yf * dy) * 2.0 * PI / 8.0 + phase).sin();
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            let blob = 0.45 * (-d2 / (2.0 * 16.0)).exp();
            for &c in &base {
                let v = (c * (1.0 + stripe) + blob) * brightness + 0.04 * gaussian(rng);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image::new(SIDE, SIDE, pixels).expect("fixed-size synthetic image")
}

/// Generates `classes * per_class` records, interleaved by class.
pub fn synthetic_records(classes: usize, per_class: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if classes == 0 || classes > NUM_CLASSES {
        return Err(Error::Invalid(format!("classes must be in 1..={NUM_CLASSES}, got {classes}")));
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for c in 0..classes {
            let mut r = rng::substream(seed, rng::domain::SYNTHETIC, &[c as u64, i as u64]);
            out.push(DatasetRecord {
                label: c as u8,
                image: render(c, classes, &mut r),
            });
        }
    }
    Ok(out)
}

/// Writes a synthetic dataset in the CIFAR binary layout.
pub fn generate_synthetic(
    path: impl AsRef<Path>,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    let records = synthetic_records(classes, per_class, seed)?;
    write_cifar(path, &records)?;
    Ok(records)
}
