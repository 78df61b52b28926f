//! Post-clustering visual assignment: representative extraction, the
//! many-to-one label map, and the cumulative-probability grid map.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::geo::ProjectedPoint;
use crate::trainer::{argmax, AssignmentMatrix};

/// Colors handed out to categories the palette does not name.
const FALLBACK_COLORS: [&str; 10] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
    "#bcf60c", "#008080",
];

/// Many-to-one mapping from cluster ids to category names.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub assignments: BTreeMap<String, String>,
    #[serde(default)]
    pub palette: BTreeMap<String, String>,
}

fn parse_color(c: &str) -> Option<[u8; 3]> {
    let hex = c.strip_prefix('#')?;
    if hex.len() != 6 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let v = u32::from_str_radix(hex, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

impl LabelMap {
    /// Each cluster its own category, named `cluster_<id>`.
    pub fn identity(m: usize) -> Self {
        let assignments = (0..m).map(|c| (c.to_string(), format!("cluster_{c}"))).collect();
        Self {
            assignments,
            palette: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Checks the map is total over `0..m` and the palette is well formed.
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.assignments.is_empty() {
            return Err(Error::InvalidArgument("label map names no category".into()));
        }
        for key in self.assignments.keys() {
            match key.parse::<usize>() {
                Ok(c) if c < m && c.to_string() == *key => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "label map key {key:?} is not a cluster id below {m}"
                    )))
                }
            }
        }
        if let Some(c) = (0..m).find(|c| !self.assignments.contains_key(&c.to_string())) {
            return Err(Error::UnmappedCluster(c));
        }
        if let Some((cat, color)) = self.palette.iter().find(|(_, c)| parse_color(c).is_none()) {
            return Err(Error::InvalidArgument(format!("palette color {color:?} for {cat} is not #RRGGBB")));
        }
        if self.assignments.values().any(|c| c.is_empty()) {
            return Err(Error::InvalidArgument("category names must be nonempty".into()));
        }
        Ok(())
    }

    /// Distinct category names, sorted; this order indexes category vectors.
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.assignments.values().collect();
        set.into_iter().cloned().collect()
    }

    /// `result[cluster]` = index into [`LabelMap::categories`].
    pub fn cluster_categories(&self, m: usize) -> Result<Vec<usize>> {
        self.validate(m)?;
        let cats = self.categories();
        Ok((0..m)
            .map(|c| {
                let name = &self.assignments[&c.to_string()];
                cats.binary_search(name).expect("category listed")
            })
            .collect())
    }

    /// Palette color of `category`, or a stable fallback.
    pub fn color(&self, category: &str) -> [u8; 3] {
        if let Some(c) = self.palette.get(category).and_then(|c| parse_color(c)) {
            return c;
        }
        let idx = self.categories().iter().position(|c| c == category).unwrap_or(0);
        parse_color(FALLBACK_COLORS[idx % FALLBACK_COLORS.len()]).expect("valid fallback")
    }

    pub fn color_hex(&self, category: &str) -> String {
        let [r, g, b] = self.color(category);
        format!("#{r:02x}{g:02x}{b:02x}")
    }
}

/// Maps each cluster to the truth class most common among its members.
/// Clusters with no members fall back to the class with the largest summed
/// probability. Ties go to the lower class index.
pub fn majority_label_map(assign: &AssignmentMatrix, truth: &[usize], class_names: &[String]) -> Result<LabelMap> {
    if truth.len() != assign.len() {
        return Err(Error::Shape("truth labels do not match the assignments".into()));
    }
    let c = class_names.len();
    let m = assign.clusters;
    let mut hard = vec![vec![0usize; c]; m];
    let mut soft = vec![vec![0.0f64; c]; m];
    for (i, &t) in truth.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidArgument(format!("truth label {t} has no class name")));
        }
        let row = assign.row(i);
        hard[argmax(row)][t] += 1;
        for k in 0..m {
            soft[k][t] += row[k];
        }
    }
    let mut assignments = BTreeMap::new();
    for k in 0..m {
        let class = if hard[k].iter().any(|&n| n > 0) {
            let counts: Vec<f64> = hard[k].iter().map(|&n| n as f64).collect();
            argmax(&counts)
        } else {
            argmax(&soft[k])
        };
        assignments.insert(k.to_string(), class_names[class].clone());
    }
    Ok(LabelMap {
        assignments,
        palette: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub record_id: String,
    pub confidence: f64,
}

/// For every cluster, the `top_n` records with the highest probability for
/// it, descending, ties by record id.
pub fn representatives(assign: &AssignmentMatrix, top_n: usize) -> Result<Vec<Vec<Representative>>> {
    if top_n < 1 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    Ok((0..assign.clusters)
        .map(|k| {
            let mut order: Vec<usize> = (0..assign.len()).collect();
            order.sort_by(|&a, &b| {
                assign.row(b)[k]
                    .total_cmp(&assign.row(a)[k])
                    .then_with(|| assign.ids[a].cmp(&assign.ids[b]))
            });
            order
                .into_iter()
                .take(top_n)
                .map(|i| Representative {
                    record_id: assign.ids[i].clone(),
                    confidence: assign.row(i)[k],
                })
                .collect()
        })
        .collect())
}

/// Per-record probability over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProbs {
    pub categories: Vec<String>,
    /// Row-major `N x categories`.
    pub probs: Vec<f64>,
}

impl CategoryProbs {
    pub fn len(&self) -> usize {
        self.probs.len() / self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.categories.len();
        &self.probs[i * c..(i + 1) * c]
    }
}

/// Sums the probabilities of clusters that share a category.
pub fn apply_label_map(assign: &AssignmentMatrix, map: &LabelMap) -> Result<CategoryProbs> {
    let to_cat = map.cluster_categories(assign.clusters)?;
    let categories = map.categories();
    let c = categories.len();
    let mut probs = vec![0.0; assign.len() * c];
    for i in 0..assign.len() {
        for (k, &p) in assign.row(i).iter().enumerate() {
            probs[i * c + to_cat[k]] += p;
        }
    }
    Ok(CategoryProbs { categories, probs })
}

/// A regular grid in projected meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
}

impl GridSpec {
    /// Smallest grid with origin snapped to a multiple of `cell_size` that
    /// covers every point.
    pub fn covering(points: &[ProjectedPoint], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidArgument("cell size must be positive".into()));
        }
        if points.is_empty() {
            return Err(Error::Empty("grid needs at least one point"));
        }
        let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_x = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let max_y = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let origin_x = (min_x / cell_size).floor() * cell_size;
        let origin_y = (min_y / cell_size).floor() * cell_size;
        let cols = ((max_x - origin_x) / cell_size).floor() as usize + 1;
        let rows = ((max_y - origin_y) / cell_size).floor() as usize + 1;
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
            cols,
            rows,
        })
    }

    /// Half-open cell containing `p`: `[x, x + size) x [y, y + size)`.
    pub fn cell_of(&self, p: ProjectedPoint) -> Option<(usize, usize)> {
        let cx = ((p.x - self.origin_x) / self.cell_size).floor();
        let cy = ((p.y - self.origin_y) / self.cell_size).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.cols as f64 || cy >= self.rows as f64 {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    /// Closed polygon ring of cell `(col, row)`, counter-clockwise.
    pub fn ring(&self, col: usize, row: usize) -> [[f64; 2]; 5] {
        let x0 = self.origin_x + col as f64 * self.cell_size;
        let y0 = self.origin_y + row as f64 * self.cell_size;
        let (x1, y1) = (x0 + self.cell_size, y0 + self.cell_size);
        [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub sums: Vec<f64>,
    pub n_images: usize,
}

impl GridCell {
    /// Winning category, `None` for NODATA.
    pub fn category(&self) -> Option<usize> {
        (self.n_images > 0).then(|| argmax(&self.sums))
    }

    pub fn confidence(&self) -> Option<f64> {
        let total: f64 = self.sums.iter().sum();
        self.category().map(|c| self.sums[c] / total)
    }
}

/// Cells in row-major order, row 0 at the southern edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub spec: GridSpec,
    pub categories: Vec<String>,
    pub cells: Vec<GridCell>,
}

impl GridMap {
    pub fn cell(&self, col: usize, row: usize) -> &GridCell {
        &self.cells[row * self.spec.cols + col]
    }
}

/// Sums each cell's category vectors and takes the argmax.
///
/// Vectors are added in a canonical order so the result does not depend on
/// record order.
pub fn grid_map(points: &[ProjectedPoint], probs: &CategoryProbs, spec: GridSpec) -> Result<GridMap> {
    if points.len() != probs.len() {
        return Err(Error::Shape("category rows do not match the points".into()));
    }
    let c = probs.categories.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.cols * spec.rows];
    for (i, &p) in points.iter().enumerate() {
        let (col, row) = spec
            .cell_of(p)
            .ok_or_else(|| Error::OutsideGrid(format!("point ({:.2}, {:.2}) lies outside the grid", p.x, p.y)))?;
        members[row * spec.cols + col].push(i);
    }
    let cells = members
        .into_iter()
        .map(|mut idx| {
            idx.sort_by(|&a, &b| {
                probs
                    .row(a)
                    .iter()
                    .zip(probs.row(b))
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut sums = vec![0.0; c];
            for &i in &idx {
                for (s, v) in sums.iter_mut().zip(probs.row(i)) {
                    *s += v;
                }
            }
            GridCell {
                sums,
                n_images: idx.len(),
            }
        })
        .collect();
    Ok(GridMap {
        spec,
        categories: probs.categories.clone(),
        cells,
    })
}

/// FeatureCollection of occupied cells in EPSG:3857 meters.
pub fn export_geojson(grid: &GridMap, map: &LabelMap) -> Value {
    let mut features = Vec::new();
    for row in 0..grid.spec.rows {
        for col in 0..grid.spec.cols {
            let cell = grid.cell(col, row);
            let Some(cat) = cell.category() else { continue };
            let name = &grid.categories[cat];
            features.push(json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [grid.spec.ring(col, row).to_vec()],
                },
                "properties": {
                    "category": name,
                    "confidence": cell.confidence(),
                    "n_images": cell.n_images,
                    "color": map.color_hex(name),
                    "col": col,
                    "row": row,
                },
            }));
        }
    }
    json!({
        "type": "FeatureCollection",
        "crs": {"type": "name", "properties": {"name": "urn:ogc:def:crs:EPSG::3857"}},
        "features": features,
    })
}

/// Raster render, north up, `px` pixels per cell; NODATA cells are white.
pub fn render_png(grid: &GridMap, map: &LabelMap, px: u32) -> Result<Vec<u8>> {
    let px = px.max(1) as usize;
    let (w, h) = (grid.spec.cols * px, grid.spec.rows * px);
    let colors: Vec<[u8; 3]> = grid.categories.iter().map(|c| map.color(c)).collect();
    let mut rgb = vec![255u8; w * h * 3];
    for row in 0..grid.spec.rows {
        for col in 0..grid.spec.cols {
            let Some(cat) = grid.cell(col, row).category() else { continue };
            let top = (grid.spec.rows - 1 - row) * px;
            for y in top..top + px {
                for x in col * px..(col + 1) * px {
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&colors[cat]);
                }
            }
        }
    }
    let img = Image::from_rgb8(w, h, &rgb)?;
    img.encode_png()
}
