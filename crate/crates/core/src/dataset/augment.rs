//! Stochastic view generation: resized crop, color jitter, grayscale,
//! horizontal flip and Gaussian blur, applied in that order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Fraction of the image area kept by the random crop.
    pub crop_scale: (f32, f32),
    /// Aspect ratio range of the random crop.
    pub crop_ratio: (f32, f32),
    pub jitter_prob: f32,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`; the hue shift from `[-s / 4, s / 4]`.
    pub jitter_strength: f32,
    pub grayscale_prob: f32,
    pub flip_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

impl AugmentationPolicy {
    /// A policy that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Key of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTuple {
    pub seed: u64,
    pub epoch: u64,
    pub record: u64,
    pub view: u64,
}

impl SeedTuple {
    pub fn rng(&self) -> ChaCha8Rng {
        seed::stream(&[seed::domain::AUGMENT, self.seed, self.epoch, self.record, self.view])
    }
}

#[inline]
fn draw(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[inline]
fn chance(rng: &mut ChaCha8Rng, p: f32) -> bool {
    p > 0.0 && rng.random::<f32>() < p
}

pub fn augment(image: &Image, policy: &AugmentationPolicy, key: SeedTuple) -> Image {
    let mut rng = key.rng();
    let (x0, y0, w, h) = crop_window(image.width, image.height, policy, &mut rng);
    let mut out = image.resample(x0, y0, w, h, image.width, image.height);

    if chance(&mut rng, policy.jitter_prob) {
        color_jitter(&mut out, policy.jitter_strength, &mut rng);
    }
    if chance(&mut rng, policy.grayscale_prob) {
        grayscale(&mut out);
    }
    if chance(&mut rng, policy.flip_prob) {
        flip_horizontal(&mut out);
    }
    if chance(&mut rng, policy.blur_prob) {
        let sigma = draw(&mut rng, policy.blur_sigma.0, policy.blur_sigma.1);
        gaussian_blur(&mut out, sigma);
    }
    out
}

fn crop_window(
    width: usize,
    height: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (width * height) as f32;
    let (lr0, lr1) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * draw(rng, policy.crop_scale.0, policy.crop_scale.1);
        let aspect = draw(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            return (x0, y0, w, h);
        }
    }
    // Fall back to the central crop with the ratio clamped into range.
    let in_ratio = width as f32 / height as f32;
    let (w, h) = if in_ratio < policy.crop_ratio.0 {
        (width, ((width as f32 / policy.crop_ratio.0).round() as usize).min(height))
    } else if in_ratio > policy.crop_ratio.1 {
        (((height as f32 * policy.crop_ratio.1).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

#[inline]
fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &mut Image, strength: f32, rng: &mut ChaCha8Rng) {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let brightness = draw(rng, lo, hi);
    let contrast = draw(rng, lo, hi);
    let saturation = draw(rng, lo, hi);
    let hue = draw(rng, -strength / 4.0, strength / 4.0);
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => {
                for v in &mut img.data {
                    *v = (*v * brightness).clamp(0.0, 1.0);
                }
            }
            1 => {
                let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>()
                    / (img.width * img.height) as f32;
                for v in &mut img.data {
                    *v = (contrast * *v + (1.0 - contrast) * mean).clamp(0.0, 1.0);
                }
            }
            2 => {
                for p in img.data.chunks_exact_mut(3) {
                    let g = luma([p[0], p[1], p[2]]);
                    for v in p.iter_mut() {
                        *v = (saturation * *v + (1.0 - saturation) * g).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                if hue != 0.0 {
                    for p in img.data.chunks_exact_mut(3) {
                        let (h, s, v) = rgb_to_hsv([p[0], p[1], p[2]]);
                        let rgb = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
                        p.copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
}

pub(crate) fn rgb_to_hsv(p: [f32; 3]) -> (f32, f32, f32) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == p[0] {
        ((p[1] - p[2]) / delta).rem_euclid(6.0)
    } else if max == p[1] {
        (p[2] - p[0]) / delta + 2.0
    } else {
        (p[0] - p[1]) / delta + 4.0
    };
    (h / 6.0, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn grayscale(img: &mut Image) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]);
        p.fill(g);
    }
}

fn flip_horizontal(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_exact_mut(w * 3) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, img.width.min(img.height).saturating_sub(1).max(1));
    let kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - radius as isize, w);
                let o = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * img.data[o + c];
                }
            }
            tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - radius as isize, h);
                let o = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[o + c];
                }
            }
            acc.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            img.data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        img
    }

    fn key(view: u64) -> SeedTuple {
        SeedTuple { seed: 3, epoch: 1, record: 42, view }
    }

    #[test]
    fn degenerate_policy_is_identity() {
        let img = ramp(32, 32);
        for v in 0..20 {
            assert_eq!(augment(&img, &AugmentationPolicy::identity(), key(v)), img);
        }
    }

    #[test]
    fn flip_only_mirrors() {
        let img = ramp(9, 9);
        let policy = AugmentationPolicy {
            flip_prob: 1.0,
            ..AugmentationPolicy::identity()
        };
        let out = augment(&img, &policy, key(0));
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(out.pixel(x, y), img.pixel(8 - x, y));
            }
        }
    }

    #[test]
    fn default_policy_is_deterministic_per_key() {
        let img = ramp(32, 32);
        let policy = AugmentationPolicy::default();
        assert_eq!(augment(&img, &policy, key(5)), augment(&img, &policy, key(5)));
        let differs = (0..8).any(|v| augment(&img, &policy, key(v)) != augment(&img, &policy, key(v + 100)));
        assert!(differs);
    }

    #[test]
    fn hsv_round_trip() {
        for &p in &[[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.8, 0.3]] {
            let (h, s, v) = rgb_to_hsv(p);
            let q = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::from_data(8, 8, vec![0.3; 192]).unwrap();
        gaussian_blur(&mut img, 1.5);
        assert!(img.data.iter().all(|&v| (v - 0.3).abs() < 1e-5));
    }

    proptest! {
        #[test]
        fn views_keep_shape_and_range(seed in any::<u64>(), w in 4usize..24, h in 4usize..24) {
            let img = ramp(w, h);
            let out = augment(&img, &AugmentationPolicy::default(), SeedTuple { seed, epoch: 0, record: 0, view: 0 });
            prop_assert_eq!((out.width, out.height, out.data.len()), (w, h, w * h * 3));
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
