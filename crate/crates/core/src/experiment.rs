//! Train-and-score helpers shared by the command line and the acceptance
//! experiments: labeled datasets, merged over-clustering accuracy, and the
//! neighbor-count sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{generate_city, truth_labels, GeoImageRecord, Image, SyntheticCitySpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, hungarian_align, MetricsReport};
use crate::geo::ProjectedPoint;
use crate::model::Model;
use crate::pcva::{apply_label_map, majority_label_map};
use crate::trainer::{argmax, load_images, predict, train, AssignmentMatrix, TrainOutput, TrainReport};

/// Records with decoded images and integer truth labels.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub records: Vec<GeoImageRecord>,
    pub images: Vec<Image>,
    pub truth: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledData {
    pub fn new(records: Vec<GeoImageRecord>, base_dir: &Path, image_size: usize) -> Result<Self> {
        let (class_names, truth) = truth_labels(&records);
        let truth = truth
            .into_iter()
            .zip(&records)
            .map(|(t, r)| t.ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.id))))
            .collect::<Result<Vec<_>>>()?;
        let images = load_images(&records, base_dir, image_size)?;
        Ok(Self {
            records,
            images,
            truth,
            class_names,
        })
    }

    pub fn synthetic(spec: &SyntheticCitySpec) -> Result<Self> {
        let city = generate_city(spec)?;
        Self::new(city.records, Path::new("."), spec.image_size)
    }

    pub fn coords(&self) -> Vec<ProjectedPoint> {
        self.records.iter().map(|r| r.proj).collect()
    }
}

pub struct RunResult {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub assignments: AssignmentMatrix,
    pub metrics: MetricsReport,
}

/// Trains on `data` with `cfg` and scores the hard predictions.
pub fn train_and_score(cfg: &PipelineConfig, data: &LabeledData) -> Result<RunResult> {
    let (model, report) = train(cfg, &data.records, &data.images, &TrainOutput::default())?;
    let assignments = predict(&model, &data.records, &data.images)?;
    let coords = data.coords();
    let metrics = evaluate(
        &assignments.labels(),
        &data.truth,
        &data.class_names,
        Some(&coords),
        cfg.eval.moran_threshold_m,
        cfg.eval.moran_counts,
    )?;
    Ok(RunResult {
        model,
        report,
        assignments,
        metrics,
    })
}

/// Accuracy after merging clusters with the truth-majority label map.
pub fn merged_accuracy(assign: &AssignmentMatrix, data: &LabeledData) -> Result<f64> {
    let map = majority_label_map(assign, &data.truth, &data.class_names)?;
    let merged = apply_label_map(assign, &map)?;
    let pred: Vec<usize> = (0..merged.len())
        .map(|i| {
            let name = &merged.categories[argmax(merged.row(i))];
            data.class_names.iter().position(|c| c == name).expect("truth category")
        })
        .collect();
    Ok(hungarian_align(&pred, &data.truth, data.class_names.len())?.acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsweepRow {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
    /// Sample standard deviation across seeds.
    pub std_acc: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one model per `(k, seed)` and summarizes accuracy per `k`.
pub fn ksweep(
    base: &PipelineConfig,
    data: &LabeledData,
    ks: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(usize, u64, f64),
) -> Result<Vec<KsweepRow>> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ksweep needs at least one k and one seed".into()));
    }
    ks.iter()
        .map(|&k| {
            let mut accs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.train.k = k;
                cfg.train.seed = seed;
                let acc = train_and_score(&cfg, data)?.metrics.acc;
                progress(k, seed, acc);
                accs.push(acc);
            }
            let (mean_acc, std_acc) = mean_std(&accs);
            Ok(KsweepRow {
                k,
                seeds: seeds.to_vec(),
                accs,
                mean_acc,
                std_acc,
            })
        })
        .collect()
}

pub fn ksweep_csv(rows: &[KsweepRow]) -> String {
    let mut out = String::from("k,mean_acc,std_acc,seeds\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", r.k, r.mean_acc, r.std_acc, r.seeds.len());
    }
    out
}
