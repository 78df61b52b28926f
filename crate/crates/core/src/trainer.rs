//! Training with spatial positives: neighbor caching, batch construction,
//! Adam updates, per-epoch checkpoints, and inference.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, TrainConfig};
use crate::dataset::{augment, AugmentationPolicy, GeoImageRecord, Image, SeedTuple};
use crate::error::{Error, Result};
use crate::geo::{NeighborTable, SpatialIndex};
use crate::losses::{batch_objective, LossBreakdown, PositiveStructure};
use crate::model::{pack_images, save_checkpoint, CheckpointMeta, Model};
use crate::optim::Adam;
use crate::seed;

/// Top-`k` neighbors within `d` meters for every record, built once.
pub fn cache_neighbors(records: &[GeoImageRecord], k: usize, d: f64) -> Result<NeighborTable> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("neighbor caching needs at least two records".into()));
    }
    let table = SpatialIndex::from_records(records)?.neighbor_table(k, d)?;
    let lonely = table.neighborless().len();
    if lonely > 0 {
        log::info!("{lonely} of {} records have no neighbor within {d} m", records.len());
    }
    Ok(table)
}

/// Loads (or renders) every record's image at `size x size`.
pub fn load_images(records: &[GeoImageRecord], base_dir: &Path, size: usize) -> Result<Vec<Image>> {
    records.iter().map(|r| r.load_image(base_dir, size)).collect()
}

/// One mini-batch: `B` anchor views followed by `B` positive views.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub anchors: Vec<usize>,
    /// Record each positive view was rendered from.
    pub partners: Vec<usize>,
    /// Anchors whose positive is a re-augmentation of themselves.
    pub fallback: usize,
    /// `2B` packed NHWC images.
    pub images: Vec<f32>,
    pub positives: PositiveStructure,
}

/// Builds the views for `batch_ids` in `epoch`.
///
/// Each anchor draws one of its cached neighbors uniformly; anchors without
/// one, and every anchor in baseline mode, pair with a second augmentation of
/// themselves.
pub fn make_batch(
    images: &[Image],
    table: &NeighborTable,
    batch_ids: &[usize],
    epoch: usize,
    train: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Batch {
    let mut partners = Vec::with_capacity(batch_ids.len());
    let mut fallback = 0;
    for &a in batch_ids {
        let row = table.row(a);
        if train.cc_baseline_mode || row.is_empty() {
            fallback += 1;
            partners.push(a);
        } else {
            let mut rng = seed::stream(&[seed::domain::NEIGHBOR, train.seed, epoch as u64, a as u64]);
            partners.push(row[rng.random_range(0..row.len())].index);
        }
    }
    let view = |record: usize, source: usize, v: u64| {
        let key = SeedTuple {
            seed: train.seed,
            epoch: epoch as u64,
            record: record as u64,
            view: v,
        };
        augment(&images[source], policy, key)
    };
    let mut views: Vec<Image> = batch_ids.iter().map(|&a| view(a, a, 0)).collect();
    views.extend(batch_ids.iter().zip(&partners).map(|(&a, &p)| view(a, p, 1)));
    let refs: Vec<&Image> = views.iter().collect();
    Batch {
        anchors: batch_ids.to_vec(),
        partners,
        fallback,
        images: pack_images(&refs),
        positives: PositiveStructure::paired(batch_ids.len()),
    }
}

/// Loss components averaged over one epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub sich: f64,
    pub scch: f64,
    pub entropy: f64,
    pub total: f64,
    pub fallback_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub clusters: usize,
    pub config_hash: String,
    pub dataset_hash: String,
    pub records: usize,
    pub neighborless: usize,
    pub epochs: Vec<EpochStats>,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Where and under which identity checkpoints are written.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub checkpoint_dir: Option<PathBuf>,
    pub dataset_hash: String,
}

#[derive(Debug, Serialize)]
struct DivergenceDump<'a> {
    epoch: usize,
    step: usize,
    anchor_ids: Vec<&'a str>,
    partner_ids: Vec<&'a str>,
    detail: String,
}

/// Runs the full training loop and returns the final model.
pub fn train(
    cfg: &PipelineConfig,
    records: &[GeoImageRecord],
    images: &[Image],
    out: &TrainOutput,
) -> Result<(Model<f32>, TrainReport)> {
    cfg.validate()?;
    let tc = &cfg.train;
    if records.len() != images.len() {
        return Err(Error::Shape("one image per record is required".into()));
    }
    if records.len() < tc.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot fill a batch of {}",
            records.len(),
            tc.batch_size
        )));
    }
    if let Some(img) = images.iter().find(|i| i.width != cfg.model.image_size || i.height != cfg.model.image_size) {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {1}x{1}",
            img.width, cfg.model.image_size
        )));
    }
    let started = Instant::now();
    let table = cache_neighbors(records, tc.k, tc.d_m)?;
    let mut model = Model::<f32>::new(&cfg.model, tc.seed)?;
    let mut opt = Adam::new(model.param_count(), tc.learning_rate, tc.weight_decay)?;
    let config_json = serde_json::to_value(cfg)?;
    let config_hash = cfg.hash();
    let zd = cfg.model.projection_dim;
    let m = cfg.model.clusters;
    let steps_per_epoch = records.len() / tc.batch_size;

    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut seed::stream(&[seed::domain::SHUFFLE, tc.seed, epoch as u64]));
        let mut sum = LossBreakdown::default();
        let mut fallback = 0;
        for step in 0..steps_per_epoch {
            let ids = &order[step * tc.batch_size..(step + 1) * tc.batch_size];
            let batch = make_batch(images, &table, ids, epoch, tc, &cfg.data.augment);
            fallback += batch.fallback;
            let views = 2 * ids.len();
            let (output, tape) = model.forward(&batch.images, views)?;
            let z: Vec<f64> = output.z.iter().map(|&v| f64::from(v)).collect();
            let q: Vec<f64> = output.q.iter().map(|&v| f64::from(v)).collect();
            let result = batch_objective(&z, zd, &q, m, &batch.positives, &cfg.loss);
            let (loss, grad) = match result {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    return Err(diverged(out, records, &batch, epoch, step, e.to_string()));
                }
                Err(e) => return Err(e),
            };
            let dz: Vec<f32> = grad.dz.iter().map(|&v| v as f32).collect();
            let dq: Vec<f32> = grad.dq.iter().map(|&v| v as f32).collect();
            let grads = model.backward(&tape, &dz, &dq)?;
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                let detail = format!("gradient of parameter {bad} is not finite");
                return Err(diverged(out, records, &batch, epoch, step, detail));
            }
            opt.update(model.params_mut(), &grads)?;
            sum.sich += loss.sich;
            sum.scch += loss.scch;
            sum.entropy += loss.entropy;
            sum.total += loss.total;
        }
        let s = steps_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            steps: steps_per_epoch,
            sich: sum.sich / s,
            scch: sum.scch / s,
            entropy: sum.entropy / s,
            total: sum.total / s,
            fallback_positives: fallback,
        };
        log::info!(
            "epoch {epoch}: total {:.4} (instance {:.4}, cluster {:.4}, entropy {:.4})",
            stats.total,
            stats.sich,
            stats.scch,
            stats.entropy
        );
        history.push(stats);
        if let Some(dir) = &out.checkpoint_dir {
            let meta = CheckpointMeta {
                config: config_json.clone(),
                config_hash: config_hash.clone(),
                encoder: cfg.model.clone(),
                clusters: m,
                epoch: epoch + 1,
                dataset_hash: out.dataset_hash.clone(),
                seed: tc.seed,
            };
            save_checkpoint(dir, &model, &meta)?;
        }
    }
    let report = TrainReport {
        seed: tc.seed,
        clusters: m,
        config_hash,
        dataset_hash: out.dataset_hash.clone(),
        records: records.len(),
        neighborless: table.neighborless().len(),
        epochs: history,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: out.checkpoint_dir.clone(),
    };
    Ok((model, report))
}

/// Writes the offending batch next to the checkpoint (when there is one)
/// and builds the error.
fn diverged(
    out: &TrainOutput,
    records: &[GeoImageRecord],
    batch: &Batch,
    epoch: usize,
    step: usize,
    detail: String,
) -> Error {
    let dump = DivergenceDump {
        epoch,
        step,
        anchor_ids: batch.anchors.iter().map(|&i| records[i].id.as_str()).collect(),
        partner_ids: batch.partners.iter().map(|&i| records[i].id.as_str()).collect(),
        detail: detail.clone(),
    };
    let mut detail = detail;
    if let Some(dir) = &out.checkpoint_dir {
        let path = dir.join("divergence.json");
        let written = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| Ok(std::fs::write(&path, serde_json::to_vec_pretty(&dump)?)?));
        if written.is_ok() {
            detail = format!("{detail}; batch written to {}", path.display());
        }
    }
    Error::Diverged { epoch, step, detail }
}

/// Per-record soft assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub ids: Vec<String>,
    pub clusters: usize,
    /// Row-major `N x clusters`.
    pub probs: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn new(ids: Vec<String>, clusters: usize, probs: Vec<f64>) -> Result<Self> {
        if clusters == 0 || probs.len() != ids.len() * clusters {
            return Err(Error::Shape("assignment matrix shape mismatch".into()));
        }
        Ok(Self { ids, clusters, probs })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.clusters..(i + 1) * self.clusters]
    }

    /// Hard labels; ties go to the lower cluster index.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode forward over un-augmented images.
pub fn predict(model: &Model<f32>, records: &[GeoImageRecord], images: &[Image]) -> Result<AssignmentMatrix> {
    if records.len() != images.len() {
        return Err(Error::Shape("one image per record is required".into()));
    }
    let m = model.config().clusters;
    let mut probs = Vec::with_capacity(records.len() * m);
    for chunk in images.chunks(256) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let out = model.infer(&pack_images(&refs), chunk.len())?;
        probs.extend(out.q.iter().map(|&v| f64::from(v)));
    }
    AssignmentMatrix::new(records.iter().map(|r| r.id.clone()).collect(), m, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_city, SyntheticCitySpec};
    use crate::geo::{project, GeoPoint};

    fn record(id: &str, x_m: f64) -> GeoImageRecord {
        let lon = x_m / crate::geo::EARTH_RADIUS_M * 180.0 / std::f64::consts::PI;
        let geo = GeoPoint::new(lon, 0.0).unwrap();
        GeoImageRecord {
            id: id.into(),
            image: crate::dataset::ImageRef::Path("x.png".into()),
            geo,
            proj: project(geo).unwrap(),
            label: None,
        }
    }

    #[test]
    fn close_pair_are_mutual_neighbors() {
        let t = cache_neighbors(&[record("a", 0.0), record("b", 50.0)], 1, 150.0).unwrap();
        assert_eq!(t.row(0)[0].index, 1);
        assert_eq!(t.row(1)[0].index, 0);
        let far = cache_neighbors(&[record("a", 0.0), record("b", 500.0)], 1, 150.0).unwrap();
        assert_eq!(far.neighborless(), vec![0, 1]);
    }

    fn tiny_city() -> (Vec<GeoImageRecord>, Vec<Image>) {
        let spec = SyntheticCitySpec {
            zones: 4,
            categories: 2,
            samples_per_zone: 10,
            image_size: 8,
            extent_m: 600.0,
            ..Default::default()
        };
        let city = generate_city(&spec).unwrap();
        let images = load_images(&city.records, Path::new("."), 8).unwrap();
        (city.records, images)
    }

    #[test]
    fn baseline_mode_pairs_each_anchor_with_itself() {
        let (records, images) = tiny_city();
        let table = cache_neighbors(&records, 1, 150.0).unwrap();
        let mut tc = TrainConfig::default();
        let ids: Vec<usize> = (0..8).collect();
        let policy = AugmentationPolicy::default();
        let spatial = make_batch(&images, &table, &ids, 0, &tc, &policy);
        assert_eq!(spatial.positives, PositiveStructure::paired(8));
        assert!(spatial.anchors.iter().zip(&spatial.partners).any(|(a, p)| a != p));
        assert_eq!(spatial, make_batch(&images, &table, &ids, 0, &tc, &policy));
        tc.cc_baseline_mode = true;
        let cc = make_batch(&images, &table, &ids, 0, &tc, &policy);
        assert_eq!(cc.partners, ids);
        assert_eq!(cc.fallback, 8);
        // Anchor views do not depend on the mode.
        let half = cc.images.len() / 2;
        assert_eq!(cc.images[..half], spatial.images[..half]);
    }

    #[test]
    fn two_epoch_smoke_run() {
        let (records, images) = tiny_city();
        let mut cfg = PipelineConfig::default();
        cfg.model.image_size = 8;
        cfg.model.base_width = 4;
        cfg.train.batch_size = 16;
        cfg.train.epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            dataset_hash: "h".into(),
        };
        let (model, report) = train(&cfg, &records, &images, &out).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(report.epochs.iter().all(|e| e.total.is_finite()));
        let (_, meta) = crate::model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.epoch, 2);
        let (again, _) = train(&cfg, &records, &images, &TrainOutput::default()).unwrap();
        assert_eq!(again.params(), model.params());

        let a = predict(&model, &records, &images).unwrap();
        for i in 0..a.len() {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let dup = predict(&model, &records[..1], &images[..1]).unwrap();
        assert_eq!(dup.row(0), a.row(0));
    }

    #[test]
    fn too_few_records_for_a_batch() {
        let (records, images) = tiny_city();
        let cfg = PipelineConfig::default();
        assert!(train(&cfg, &records[..10], &images[..10], &TrainOutput::default()).is_err());
    }
}
