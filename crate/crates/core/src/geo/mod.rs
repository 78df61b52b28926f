//! Web Mercator projection, KD-tree neighbor search and DBSCAN deduplication.
//!
//! All distances are planar Euclidean distances between EPSG:3857 coordinates,
//! in meters. Mercator scale grows with `1 / cos(lat)`, so at city scale a
//! "meter" here is uniformly stretched by the local scale factor; no geodesic
//! correction is applied.

mod dedupe;
mod kdtree;

pub use dedupe::dbscan_dedupe;
pub use kdtree::KdTree;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sphere radius used by EPSG:3857.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Latitude at which the Web Mercator square ends, `atan(sinh(pi))` in degrees.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

/// WGS84 longitude/latitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        let p = Self { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !self.lat.is_finite() || self.lat.abs() >= MAX_LATITUDE {
            return Err(Error::Domain(format!(
                "latitude {} outside (-{MAX_LATITUDE}, {MAX_LATITUDE})",
                self.lat
            )));
        }
        Ok(())
    }
}

/// EPSG:3857 coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn distance_squared(&self, other: &Self) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn distance(&self, other: &Self) -> f64 {
        self.distance_squared(other).sqrt()
    }
}

/// Spherical Web Mercator forward projection.
pub fn project(p: GeoPoint) -> Result<ProjectedPoint> {
    p.validate()?;
    let lon = p.lon.to_radians();
    let lat = p.lat.to_radians();
    Ok(ProjectedPoint {
        x: EARTH_RADIUS_M * lon,
        // ln(tan(pi/4 + lat/2)) == asinh(tan(lat)), exact at the equator
        y: EARTH_RADIUS_M * lat.tan().asinh(),
    })
}

/// Inverse of [`project`].
pub fn unproject(p: ProjectedPoint) -> GeoPoint {
    let lon = (p.x / EARTH_RADIUS_M).to_degrees();
    let lat = (p.y / EARTH_RADIUS_M).sinh().atan().to_degrees();
    GeoPoint { lon, lat }
}

/// One entry of a neighbor list: the neighbor's record position and its distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Cached top-K in-range neighbors for every record, aligned with record order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub rows: Vec<Vec<Neighbor>>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, index: usize) -> &[Neighbor] {
        &self.rows[index]
    }

    /// Positions of records without a single neighbor in range.
    pub fn neighborless(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_empty())
            .map(|(i, _)| i)
            .collect()
    }
}

/// KD-tree over projected record positions, keyed by record id.
///
/// Internally the tree stores points in ascending id order, so equal-distance
/// candidates come back ordered by id.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    tree: KdTree,
    /// tree entry -> record position
    entry_record: Vec<usize>,
    /// record position -> tree entry
    record_entry: Vec<usize>,
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl SpatialIndex {
    pub fn new(ids: Vec<String>, points: &[ProjectedPoint]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("spatial index needs at least one record"));
        }
        if ids.len() != points.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} points",
                ids.len(),
                points.len()
            )));
        }
        let mut entry_record: Vec<usize> = (0..ids.len()).collect();
        entry_record.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));
        let mut record_entry = vec![0; ids.len()];
        for (entry, &record) in entry_record.iter().enumerate() {
            record_entry[record] = entry;
        }
        let tree_points: Vec<[f64; 2]> = entry_record
            .iter()
            .map(|&r| [points[r].x, points[r].y])
            .collect();
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId { id: id.clone(), line: i + 1 });
            }
        }
        Ok(Self {
            tree: KdTree::new(tree_points),
            entry_record,
            record_entry,
            ids,
            lookup,
        })
    }

    pub fn from_records(records: &[crate::dataset::GeoImageRecord]) -> Result<Self> {
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let points: Vec<ProjectedPoint> = records.iter().map(|r| r.proj).collect();
        Self::new(ids, &points)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    /// Up to `k` nearest other records within `d` meters of `query_id`.
    pub fn knn(&self, query_id: &str, k: usize, d: f64) -> Result<Vec<Neighbor>> {
        let index = self
            .position(query_id)
            .ok_or_else(|| Error::UnknownId(query_id.to_owned()))?;
        self.knn_at(index, k, d)
    }

    /// As [`SpatialIndex::knn`], addressed by record position.
    pub fn knn_at(&self, index: usize, k: usize, d: f64) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("distance threshold {d} must be positive")));
        }
        let entry = *self
            .record_entry
            .get(index)
            .ok_or_else(|| Error::UnknownId(format!("#{index}")))?;
        let q = self.tree.point(entry);
        Ok(self
            .tree
            .knn(q, k, d, Some(entry))
            .into_iter()
            .map(|(e, dist)| Neighbor {
                index: self.entry_record[e],
                distance: dist,
            })
            .collect())
    }

    /// Neighbor rows for every record.
    pub fn neighbor_table(&self, k: usize, d: f64) -> Result<NeighborTable> {
        let rows = (0..self.len())
            .map(|i| self.knn_at(i, k, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(NeighborTable { rows })
    }

    /// Record positions within `radius` of `p` (inclusive), in ascending id order.
    pub fn within(&self, p: ProjectedPoint, radius: f64) -> Vec<usize> {
        let mut hits = self.tree.within([p.x, p.y], radius);
        hits.sort_unstable();
        hits.into_iter().map(|e| self.entry_record[e]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn origin_is_fixed() {
        let p = project(GeoPoint::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(p, ProjectedPoint::new(0.0, 0.0));
    }

    #[test]
    fn one_degree_of_longitude_on_the_equator() {
        let p = project(GeoPoint::new(1.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(p.x, 111_319.490_793_273_57, epsilon = 1e-6);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-9);
        let edge = project(GeoPoint::new(180.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(edge.x, 20_037_508.342_789_244, epsilon = 1e-6);
        assert!(edge.x.abs() <= std::f64::consts::PI * EARTH_RADIUS_M);
    }

    #[test]
    fn out_of_range_latitude_is_a_domain_error() {
        assert!(matches!(
            project(GeoPoint { lon: 0.0, lat: 86.0 }),
            Err(Error::Domain(_))
        ));
        assert!(GeoPoint::new(0.0, -MAX_LATITUDE).is_err());
        assert!(GeoPoint::new(181.0, 0.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn round_trip_under_a_micro_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let g = GeoPoint::new(
                rng.random_range(-180.0..=180.0),
                rng.random_range(-85.05..85.05),
            )
            .unwrap();
            let back = unproject(project(g).unwrap());
            assert!((back.lon - g.lon).abs() < 1e-6 && (back.lat - g.lat).abs() < 1e-6);
        }
    }

    fn line(xs: &[f64]) -> SpatialIndex {
        let ids = (0..xs.len()).map(|i| format!("p{i}")).collect();
        let pts: Vec<_> = xs.iter().map(|&x| ProjectedPoint::new(x, 0.0)).collect();
        SpatialIndex::new(ids, &pts).unwrap()
    }

    #[test]
    fn singleton_has_no_neighbors() {
        let idx = line(&[5.0]);
        assert!(idx.knn("p0", 3, 1e9).unwrap().is_empty());
    }

    #[test]
    fn collinear_neighbors_in_distance_order() {
        let idx = line(&[0.0, 10.0, 30.0]);
        let row = idx.knn("p1", 2, 100.0).unwrap();
        assert_eq!(row.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(row[0].distance, 10.0);
        assert_eq!(row[1].distance, 20.0);
    }

    #[test]
    fn knn_respects_the_distance_threshold() {
        let idx = line(&[0.0, 10.0, 30.0]);
        let row = idx.knn("p0", 1, 15.0).unwrap();
        assert_eq!(row, vec![Neighbor { index: 1, distance: 10.0 }]);
        assert!(idx.knn("p0", 1, 5.0).unwrap().is_empty());
    }

    #[test]
    fn knn_argument_errors() {
        let idx = line(&[0.0, 10.0]);
        assert!(matches!(idx.knn("nope", 1, 1.0), Err(Error::UnknownId(_))));
        assert!(idx.knn("p0", 0, 1.0).is_err());
        assert!(idx.knn("p0", 1, 0.0).is_err());
        assert!(SpatialIndex::new(vec![], &[]).is_err());
    }

    #[test]
    fn equal_distances_break_ties_by_id() {
        // "b" and "a" are both 10 m from "c"; id order decides.
        let pts = [
            ProjectedPoint::new(10.0, 0.0),
            ProjectedPoint::new(-10.0, 0.0),
            ProjectedPoint::new(0.0, 0.0),
        ];
        let idx = SpatialIndex::new(vec!["b".into(), "a".into(), "c".into()], &pts).unwrap();
        let row = idx.knn("c", 1, 50.0).unwrap();
        assert_eq!(row[0].index, 1);
    }
}
