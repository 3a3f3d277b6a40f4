//! Procedural images for desk-scale experiments and tests.
//!
//! Content images are smooth random colour fields. A synthetic "artist" is a
//! hue-shifted duotone: luminance is remapped between a dark and a light
//! colour of the artist's hue, so artists are separable by colour statistics
//! while sharing arbitrary content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::LabeledCorpus;
use crate::error::Result;
use crate::model::ImageBatch;
use crate::tensor::Tensor;

/// Smooth random RGB image of size `h x w`.
pub fn content_image(h: usize, w: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let data = (0..3)
        .flat_map(|c| {
            let waves = &waves[c * 3..c * 3 + 3];
            (0..h * w).map(move |i| {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                let s: f64 = waves
                    .iter()
                    .map(|[fy, fx, ph, a]| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                    .sum::<f64>();
                (0.5 + 0.25 * s).clamp(0.0, 1.0)
            })
        })
        .collect();
    ImageBatch::new(Tensor::new(&[1, 3, h, w], data).expect("sized")).expect("values in [0, 1]")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// The duotone palette `(dark, light)` of artist `k` out of `n`.
pub fn palette(k: usize, n: usize) -> ([f64; 3], [f64; 3]) {
    let hue = 0.05 + k as f64 / n as f64;
    (hsv_to_rgb(hue, 0.9, 0.2), hsv_to_rgb(hue, 0.55, 1.0))
}

/// Renders `img` in the style of synthetic artist `k` out of `n`.
pub fn apply_style(img: &ImageBatch, k: usize, n: usize) -> Result<ImageBatch> {
    let (dark, light) = palette(k, n);
    let [b, _, h, w] = img.tensor().dims4()?;
    let plane = h * w;
    let src = img.tensor().data();
    let mut out = vec![0.0; src.len()];
    for s in 0..b {
        let base = s * 3 * plane;
        for i in 0..plane {
            let (r, g, bl) = (src[base + i], src[base + plane + i], src[base + 2 * plane + i]);
            let lum = 0.299 * r + 0.587 * g + 0.114 * bl;
            for c in 0..3 {
                out[base + c * plane + i] = (dark[c] + lum * (light[c] - dark[c])).clamp(0.0, 1.0);
            }
        }
    }
    ImageBatch::new(Tensor::new(img.tensor().shape(), out)?)
}

/// `n_styles` synthetic artists with `per_style` images each; every image
/// has its own random content.
pub fn style_corpus(n_styles: usize, per_style: usize, size: usize, seed: u64) -> Result<LabeledCorpus> {
    let mut images = Vec::with_capacity(n_styles * per_style);
    for k in 0..n_styles {
        for i in 0..per_style {
            let content = content_image(size, size, seed.wrapping_mul(1_000_003).wrapping_add((k * per_style + i) as u64));
            images.push((k, apply_style(&content, k, n_styles)?));
        }
    }
    Ok(LabeledCorpus {
        classes: (0..n_styles).map(|k| format!("artist{k}")).collect(),
        images,
    })
}
