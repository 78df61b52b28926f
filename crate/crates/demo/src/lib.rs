//! WebAssembly bindings behind `www/index.html`. Each method returns a JSON
//! string so the page needs no extra glue beyond what `wasm-bindgen` emits.

use ccgp::dataset::{generate_city, render_image, truth_labels, SyntheticCity, SyntheticCitySpec};
use ccgp::evaluation::{weighted_morans_i, SpatialWeights};
use ccgp::geo::{dbscan_dedupe, SpatialIndex};
use ccgp::pcva::{export_geojson, grid_map, CategoryProbs, GridSpec, LabelMap};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
struct CityView {
    extent_m: f64,
    origin: [f64; 2],
    categories: Vec<String>,
    /// `[x, y, category]` relative to the south-west corner.
    points: Vec<(f64, f64, usize)>,
}

#[derive(Serialize)]
struct NeighborView {
    /// Pairs of point indexes.
    edges: Vec<(usize, usize)>,
    neighborless: usize,
    kept_after_dedupe: usize,
}

#[derive(Serialize)]
struct MapView {
    moran: Option<f64>,
    geojson: serde_json::Value,
}

#[wasm_bindgen]
pub struct Demo {
    city: SyntheticCity,
    truth: Vec<usize>,
    names: Vec<String>,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a synthetic city.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, zones: usize, samples_per_zone: usize, distractor_prob: f64) -> Result<Demo, JsValue> {
        Self::build(seed, zones, samples_per_zone, distractor_prob).map_err(js_err)
    }

    /// Points with their truth categories, as JSON.
    pub fn city(&self) -> String {
        let (ox, oy) = self.origin();
        let view = CityView {
            extent_m: self.city.spec.extent_m,
            origin: [ox, oy],
            categories: self.names.clone(),
            points: self
                .city
                .records
                .iter()
                .zip(&self.truth)
                .map(|(r, &t)| (r.proj.x - ox, r.proj.y - oy, t))
                .collect(),
        };
        serde_json::to_string(&view).expect("serializable")
    }

    /// Spatial-neighbor edges for `k` and `d_m`, plus the dedupe count at `eps_m`.
    pub fn neighbors(&self, k: usize, d_m: f64, eps_m: f64) -> Result<String, JsValue> {
        let index = SpatialIndex::from_records(&self.city.records).map_err(js_err)?;
        let table = index.neighbor_table(k, d_m).map_err(js_err)?;
        let edges = table
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |n| (i, n.index)))
            .collect();
        let points: Vec<_> = self.city.records.iter().map(|r| r.proj).collect();
        let view = NeighborView {
            edges,
            neighborless: table.neighborless().len(),
            kept_after_dedupe: dbscan_dedupe(&points, eps_m).len(),
        };
        Ok(serde_json::to_string(&view).expect("serializable"))
    }

    /// Truth-label grid map at `cell_m` and its weighted Moran's I at `threshold_m`.
    pub fn grid(&self, cell_m: f64, threshold_m: f64) -> Result<String, JsValue> {
        let points: Vec<_> = self.city.records.iter().map(|r| r.proj).collect();
        let c = self.names.len();
        let mut probs = vec![0.0; points.len() * c];
        for (i, &t) in self.truth.iter().enumerate() {
            probs[i * c + t] = 1.0;
        }
        let probs = CategoryProbs {
            categories: self.names.clone(),
            probs,
        };
        let spec = GridSpec::covering(&points, cell_m).map_err(js_err)?;
        let grid = grid_map(&points, &probs, spec).map_err(js_err)?;
        let mut map = LabelMap::default();
        for (i, n) in self.names.iter().enumerate() {
            map.assignments.insert(i.to_string(), n.clone());
        }
        let moran = SpatialWeights::new(&points, threshold_m)
            .and_then(|w| weighted_morans_i(&self.truth, &w, None))
            .ok();
        let view = MapView {
            moran,
            geojson: export_geojson(&grid, &map),
        };
        Ok(serde_json::to_string(&view).expect("serializable"))
    }

    /// RGBA pixels of the `index`-th record's image, for a canvas.
    pub fn thumbnail(&self, index: usize) -> Result<Vec<u8>, JsValue> {
        let r = self.city.records.get(index).ok_or_else(|| js_err("no such record"))?;
        let ccgp::dataset::ImageRef::Synthetic {
            category,
            categories,
            seed,
            distractor_prob,
            size,
        } = r.image
        else {
            return Err(js_err("record has no synthetic image"));
        };
        let rgb = render_image(category, categories, seed, distractor_prob, size).image.to_rgb8();
        Ok(rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
    }

    pub fn image_size(&self) -> usize {
        self.city.spec.image_size
    }
}

impl Demo {
    fn build(seed: u64, zones: usize, samples_per_zone: usize, distractor_prob: f64) -> ccgp::Result<Self> {
        let spec = SyntheticCitySpec {
            seed,
            zones,
            categories: zones.min(5),
            samples_per_zone,
            distractor_prob,
            ..Default::default()
        };
        let city = generate_city(&spec)?;
        let (names, truth) = truth_labels(&city.records);
        let truth = truth.into_iter().map(|t| t.unwrap_or(0)).collect();
        Ok(Self { city, truth, names })
    }

    fn origin(&self) -> (f64, f64) {
        let min = |f: fn(&ccgp::geo::ProjectedPoint) -> f64| {
            self.city.records.iter().map(|r| f(&r.proj)).fold(f64::INFINITY, f64::min)
        };
        (min(|p| p.x), min(|p| p.y))
    }
}
