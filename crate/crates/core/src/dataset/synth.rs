//! Procedural "synthetic city": Voronoi land-use zones sampled on jittered
//! grids, with one textured image per sample point.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::hsv_to_rgb;
use super::{GeoImageRecord, Image, ImageRef};
use crate::error::{Error, Result};
use crate::geo::{project, unproject, GeoPoint, ProjectedPoint};
use crate::seed;

/// Land-use names given to the first five synthetic categories.
pub const LAND_USE_NAMES: [&str; 5] = [
    "residential",
    "greenfield",
    "commercial",
    "industrial",
    "transportation",
];

pub fn category_name(category: usize) -> String {
    LAND_USE_NAMES
        .get(category)
        .map_or_else(|| format!("category_{category}"), |s| (*s).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCitySpec {
    /// Side length of the square city, in projected meters.
    pub extent_m: f64,
    pub zones: usize,
    pub categories: usize,
    pub image_size: usize,
    pub samples_per_zone: usize,
    pub distractor_prob: f64,
    pub seed: u64,
    /// South-west corner of the city.
    pub origin: GeoPoint,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        Self {
            extent_m: 3500.0,
            zones: 10,
            categories: 5,
            image_size: 32,
            samples_per_zone: 200,
            distractor_prob: 0.4,
            seed: 0,
            origin: GeoPoint { lon: 9.16, lat: 45.44 },
        }
    }
}

impl SyntheticCitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.zones == 0 {
            return Err(Error::Config("synthetic city needs at least one zone".into()));
        }
        if self.categories == 0 || self.categories > self.zones {
            return Err(Error::Config(format!(
                "{} categories cannot be spread over {} zones",
                self.categories, self.zones
            )));
        }
        if !(self.extent_m > 0.0) {
            return Err(Error::Config("extent must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("images must be at least 4 px wide".into()));
        }
        if self.samples_per_zone == 0 {
            return Err(Error::Config("samples_per_zone must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must lie in [0, 1]".into()));
        }
        self.origin.validate()
    }

    /// Category of zone `z`: zones are dealt round-robin over the categories.
    pub fn zone_category(&self, zone: usize) -> usize {
        zone % self.categories
    }
}

/// A generated city: records plus the zone layout that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub spec: SyntheticCitySpec,
    pub records: Vec<GeoImageRecord>,
    /// Zone seeds in projected meters.
    pub zone_seeds: Vec<ProjectedPoint>,
    /// Zone index of every record.
    pub zones: Vec<usize>,
}

impl SyntheticCity {
    pub fn category_names(&self) -> Vec<String> {
        (0..self.spec.categories).map(category_name).collect()
    }

    /// Zone containing `p` (nearest seed, lowest index on ties).
    pub fn zone_at(&self, p: ProjectedPoint) -> usize {
        nearest_seed(&self.zone_seeds, p)
    }
}

fn nearest_seed(seeds: &[ProjectedPoint], p: ProjectedPoint) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in seeds.iter().enumerate() {
        let d = s.distance_squared(&p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn generate_city(spec: &SyntheticCitySpec) -> Result<SyntheticCity> {
    spec.validate()?;
    let origin = project(spec.origin)?;
    let extent = spec.extent_m;
    let mut rng = seed::stream(&[seed::domain::CITY, spec.seed]);
    let zone_seeds: Vec<ProjectedPoint> = (0..spec.zones)
        .map(|_| {
            ProjectedPoint::new(
                origin.x + rng.random_range(0.0..extent),
                origin.y + rng.random_range(0.0..extent),
            )
        })
        .collect();

    // Zone areas from a raster, used to pick each zone's grid spacing.
    const RASTER: usize = 200;
    let mut cells = vec![0usize; spec.zones];
    for j in 0..RASTER {
        for i in 0..RASTER {
            let p = ProjectedPoint::new(
                origin.x + (i as f64 + 0.5) * extent / RASTER as f64,
                origin.y + (j as f64 + 0.5) * extent / RASTER as f64,
            );
            cells[nearest_seed(&zone_seeds, p)] += 1;
        }
    }

    let mut records = Vec::with_capacity(spec.zones * spec.samples_per_zone);
    let mut zones = Vec::with_capacity(records.capacity());
    for zone in 0..spec.zones {
        let area = (cells[zone].max(1) as f64) * (extent / RASTER as f64).powi(2);
        let points = zone_samples(spec, &zone_seeds, zone, origin, area, &mut rng);
        let category = spec.zone_category(zone);
        for p in points {
            let index = records.len();
            let geo = unproject(p);
            let image_seed = seed::derive(&[seed::domain::IMAGE, spec.seed, index as u64]);
            records.push(GeoImageRecord {
                id: format!("s{index:05}"),
                image: ImageRef::Synthetic {
                    category,
                    categories: spec.categories,
                    seed: image_seed,
                    distractor_prob: spec.distractor_prob,
                    size: spec.image_size,
                },
                geo,
                proj: project(geo)?,
                label: Some(category_name(category)),
            });
            zones.push(zone);
        }
    }
    Ok(SyntheticCity {
        spec: spec.clone(),
        records,
        zone_seeds,
        zones,
    })
}

/// Exactly `samples_per_zone` jittered-grid points inside the zone's cell.
fn zone_samples(
    spec: &SyntheticCitySpec,
    seeds: &[ProjectedPoint],
    zone: usize,
    origin: ProjectedPoint,
    area: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ProjectedPoint> {
    let n = spec.samples_per_zone;
    let extent = spec.extent_m;
    let mut spacing = (area / n as f64).sqrt();
    loop {
        let ox = rng.random_range(0.0..spacing);
        let oy = rng.random_range(0.0..spacing);
        let steps = (extent / spacing).ceil() as usize + 1;
        let mut inside = Vec::new();
        for j in 0..steps {
            for i in 0..steps {
                let jx = rng.random_range(-0.3..0.3) * spacing;
                let jy = rng.random_range(-0.3..0.3) * spacing;
                let x = (ox + i as f64 * spacing + jx).clamp(0.0, extent);
                let y = (oy + j as f64 * spacing + jy).clamp(0.0, extent);
                if x >= extent || y >= extent {
                    continue;
                }
                let p = ProjectedPoint::new(origin.x + x, origin.y + y);
                if nearest_seed(seeds, p) == zone {
                    inside.push(p);
                }
            }
        }
        if inside.len() >= n {
            let mut keep = sample(rng, inside.len(), n).into_vec();
            keep.sort_unstable();
            return keep.into_iter().map(|i| inside[i]).collect();
        }
        spacing *= 0.93;
    }
}

/// Texture family, base palette and stripe frequency of a category.
#[derive(Debug, Clone, Copy)]
struct CategoryStyle {
    pattern: usize,
    palette: [[f32; 3]; 3],
    frequency: f32,
}

fn category_style(category: usize, categories: usize) -> CategoryStyle {
    let hue = category as f32 / categories.max(1) as f32 + 0.03;
    let palette = [
        hsv_to_rgb(hue, 0.70, 0.90),
        hsv_to_rgb(hue + 0.03, 0.45, 0.55),
        hsv_to_rgb(hue - 0.03, 0.85, 0.30),
    ];
    CategoryStyle {
        pattern: category % 5,
        palette,
        frequency: 2.5 + (category / 5) as f32 * 1.5,
    }
}

/// Scalar field in `[0, 1]` describing the category texture at `(u, v)`.
fn texture(pattern: usize, u: f32, v: f32, freq: f32, phase: f32) -> f32 {
    use std::f32::consts::TAU;
    match pattern {
        0 => 0.5 + 0.5 * (TAU * (freq * v + phase)).sin(),
        1 => 0.5 + 0.5 * (TAU * (freq * u + phase)).sin(),
        2 => {
            let a = (freq * u + phase).floor() as i64;
            let b = (freq * v + phase).floor() as i64;
            if (a + b) % 2 == 0 { 1.0 } else { 0.0 }
        }
        3 => 0.5 + 0.5 * (TAU * (freq * (u + v) * 0.7 + phase)).sin(),
        _ => {
            let du = (freq * u + phase).fract() - 0.5;
            let dv = (freq * v + phase).fract() - 0.5;
            if du * du + dv * dv < 0.09 { 1.0 } else { 0.0 }
        }
    }
}

fn blend(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// A rendered sample together with what was composited into it.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: Image,
    /// Category whose palette paints the occluder, if one was drawn.
    pub occluder_category: Option<usize>,
    /// Per-pixel occluder coverage, row-major.
    pub occluder_mask: Vec<bool>,
}

/// Renders one sample of `category`.
///
/// The base layer is the category texture in the category palette, plus a
/// few small palette-colored blocks and pixel noise. With probability
/// `distractor_prob` a large ellipse or rectangle filled with the palette of
/// a different category covers 30-50% of the frame.
pub fn render_image(
    category: usize,
    categories: usize,
    seed: u64,
    distractor_prob: f64,
    size: usize,
) -> RenderedImage {
    let mut rng = seed::stream(&[seed::domain::IMAGE, seed, category as u64]);
    let style = category_style(category, categories);
    let freq = style.frequency * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..1.0f32);
    let mut image = Image::new(size, size);
    let s = size as f32;
    for y in 0..size {
        for x in 0..size {
            let t = texture(style.pattern, x as f32 / s, y as f32 / s, freq, phase);
            image.set_pixel(x, y, blend(style.palette[2], style.palette[0], t));
        }
    }
    // Small geometric noise: blocks in the category's middle tone.
    for _ in 0..rng.random_range(2..5) {
        let w = rng.random_range(size / 8..=size / 4).max(1);
        let h = rng.random_range(size / 8..=size / 4).max(1);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let tone = style.palette[1];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                image.set_pixel(x, y, tone);
            }
        }
    }
    for v in &mut image.data {
        *v = (*v + rng.random_range(-0.04..0.04f32)).clamp(0.0, 1.0);
    }

    let mut mask = vec![false; size * size];
    let mut occluder_category = None;
    if categories > 1 && rng.random::<f64>() < distractor_prob {
        let other = (category + rng.random_range(1..categories)) % categories;
        let other_style = category_style(other, categories);
        let coverage = rng.random_range(0.30..0.50f32);
        let ellipse = rng.random_bool(0.5);
        let aspect = rng.random_range(0.6..1.6f32);
        let area = coverage * s * s;
        let (hw, hh) = if ellipse {
            let r = (area / std::f32::consts::PI).sqrt();
            (r * aspect.sqrt(), r / aspect.sqrt())
        } else {
            let r = area.sqrt() / 2.0;
            (r * aspect.sqrt(), r / aspect.sqrt())
        };
        let hw = hw.min(s / 2.0);
        let hh = hh.min(s / 2.0);
        let cx = rng.random_range(hw..=s - hw);
        let cy = rng.random_range(hh..=s - hh);
        let shade = rng.random_range(0.0..1.0f32);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f32 + 0.5 - cx) / hw;
                let dy = (y as f32 + 0.5 - cy) / hh;
                let hit = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if hit {
                    let t = (0.5 + 0.5 * dy + 0.3 * shade).fract();
                    image.set_pixel(x, y, blend(other_style.palette[0], other_style.palette[1], t));
                    mask[y * size + x] = true;
                }
            }
        }
        occluder_category = Some(other);
    }
    image.quantize();
    RenderedImage {
        image,
        occluder_category,
        occluder_mask: mask,
    }
}
