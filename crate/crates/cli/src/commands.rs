//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccgp::config::PipelineConfig;
use ccgp::dataset::{
    dataset_hash, generate_city, load_manifest, manifest_entry, materialize, GeoImageRecord, Image, ImageRef,
};
use ccgp::evaluation::evaluate as score;
use ccgp::experiment::{ksweep_csv, LabeledData};
use ccgp::geo::dbscan_dedupe;
use ccgp::model::load_checkpoint;
use ccgp::pcva::{apply_label_map, export_geojson, grid_map, render_png, representatives, GridSpec, LabelMap};
use ccgp::trainer::{load_images, predict as infer, train as fit, TrainOutput};
use clap::{Args, Parser, Subcommand};

use crate::files::{align, points_for, read_assignments, read_labels, write_assignments, write_atomic, write_json};

#[derive(Debug, Parser)]
#[command(name = "ccgp", version, about = "Unsupervised land-use clustering of geotagged street-level images")]
pub struct Cli {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and materialize a synthetic city.
    Synth(SynthArgs),
    /// Drop near-duplicate locations from a manifest.
    Dedupe(DedupeArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Write per-record cluster probabilities.
    Predict(PredictArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Top-confidence records and contact sheets per cluster.
    Representatives(RepresentativesArgs),
    /// Build the land-use grid map.
    Map(MapArgs),
    /// Accuracy mean and spread over neighbor counts and seeds.
    Ksweep(KsweepArgs),
    /// Serve the cluster review API.
    Serve(crate::service::ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub zones: Option<usize>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub samples_per_zone: Option<usize>,
    #[arg(long)]
    pub distractor_prob: Option<f64>,
    #[arg(long)]
    pub extent_m: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DedupeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub eps_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TrainReport path; defaults to `<out>/train_report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d_m: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Positives are re-augmentations of the anchor itself.
    #[arg(long)]
    pub cc_baseline: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Assignments or any JSON Lines file with `id` and `cluster`/`label`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest or label file holding the reference labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Coordinates for the weighted Moran's I when `--truth` has none.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RepresentativesArgs {
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `representatives.json` and `cluster_<id>.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Label map JSON; each cluster is its own category when omitted.
    #[arg(long)]
    pub labelmap: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long)]
    pub cell_size_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct KsweepArgs {
    /// Labeled manifest; the configured synthetic city when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20, 50])]
    pub k: Vec<usize>,
    /// Number of seeds, starting at the configured seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub d_m: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a),
        Command::Dedupe(a) => dedupe(&cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Representatives(a) => representatives_cmd(&cfg, a),
        Command::Map(a) => map(&cfg, a),
        Command::Ksweep(a) => ksweep(&mut cfg, a),
        Command::Serve(a) => crate::service::serve(&cfg, a),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn synth(cfg: &mut PipelineConfig, a: SynthArgs) -> Result<()> {
    let spec = &mut cfg.data.synth;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.zones {
        spec.zones = v;
    }
    if let Some(v) = a.categories {
        spec.categories = v;
    }
    if let Some(v) = a.samples_per_zone {
        spec.samples_per_zone = v;
    }
    if let Some(v) = a.distractor_prob {
        spec.distractor_prob = v;
    }
    if let Some(v) = a.extent_m {
        spec.extent_m = v;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    let city = generate_city(spec)?;
    let manifest = materialize(&a.out, &city.records, spec.image_size)?;
    println!("{} records written to {}", city.records.len(), manifest.display());
    Ok(())
}

fn dedupe(cfg: &PipelineConfig, a: DedupeArgs) -> Result<()> {
    let eps = a.eps_m.unwrap_or(cfg.data.dedupe_eps_m);
    let records = load_manifest(&a.manifest)?;
    let points: Vec<_> = records.iter().map(|r| r.proj).collect();
    let kept = dbscan_dedupe(&points, eps);
    let src_dir = manifest_dir(&a.manifest);
    let same_dir = fs::canonicalize(&src_dir).ok() == a.out.parent().and_then(|d| fs::canonicalize(d).ok());
    let mut out = Vec::new();
    for &i in &kept {
        let mut entry = manifest_entry(&records[i]);
        if !same_dir && Path::new(&entry.image_path).is_relative() {
            let abs = fs::canonicalize(src_dir.join(&entry.image_path))
                .with_context(|| format!("resolving image of {}", entry.id))?;
            entry.image_path = abs.to_string_lossy().into_owned();
        }
        serde_json::to_writer(&mut out, &entry)?;
        out.push(b'\n');
    }
    write_atomic(&a.out, &out)?;
    println!("kept {} of {} records (eps {eps} m)", kept.len(), records.len());
    Ok(())
}

fn train(cfg: &mut PipelineConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.k {
        t.k = v;
    }
    if let Some(v) = a.d_m {
        t.d_m = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if a.cc_baseline {
        t.cc_baseline_mode = true;
    }
    if let Some(v) = a.clusters {
        cfg.model.clusters = v;
    }
    cfg.validate()?;
    let records = load_manifest(&a.manifest)?;
    let images = load_images(&records, &manifest_dir(&a.manifest), cfg.model.image_size)?;
    let out = TrainOutput {
        checkpoint_dir: Some(a.out.clone()),
        dataset_hash: dataset_hash(&records),
    };
    let (_, report) = fit(cfg, &records, &images, &out)?;
    let report_path = a.report.unwrap_or_else(|| a.out.join("train_report.json"));
    write_json(&report_path, &report)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} epochs in {:.1}s; final loss {:.4}; checkpoint {}",
            report.epochs.len(),
            report.wall_time_s,
            last.total,
            a.out.display()
        );
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let records = load_manifest(&a.manifest)?;
    let images = load_images(&records, &manifest_dir(&a.manifest), meta.encoder.image_size)?;
    let assign = infer(&model, &records, &images)?;
    write_assignments(&a.out, &assign)?;
    println!("{} records assigned to {} clusters", assign.len(), assign.clusters);
    Ok(())
}

fn evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<()> {
    let pred = read_labels(&a.pred)?;
    let truth = read_labels(&a.truth)?;
    let mut aligned = align(&pred, &truth)?;
    if let Some(m) = &a.manifest {
        let coords: BTreeMap<String, _> = load_manifest(m)?.into_iter().map(|r| (r.id, r.proj)).collect();
        let by_id: std::collections::HashMap<&str, ()> = pred.iter().map(|r| (r.id.as_str(), ())).collect();
        let ids: Vec<&str> = truth.iter().map(|t| t.id.as_str()).filter(|id| by_id.contains_key(id)).collect();
        aligned.points = Some(points_for(&ids, &coords)?);
    }
    let report = score(
        &aligned.pred,
        &aligned.truth,
        &aligned.class_names,
        aligned.points.as_deref(),
        cfg.eval.moran_threshold_m,
        cfg.eval.moran_counts,
    )?;
    match &a.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprintln!("nmi {:.4} ari {:.4} acc {:.4} mf1 {:.4}", report.nmi, report.ari, report.acc, report.mf1);
    Ok(())
}

/// Loads assignments and checks they cover the manifest's records in order.
pub fn assignments_for(path: &Path, records: &[GeoImageRecord]) -> Result<ccgp::trainer::AssignmentMatrix> {
    let assign = read_assignments(path)?;
    if assign.ids.len() != records.len() || assign.ids.iter().zip(records).any(|(a, r)| *a != r.id) {
        bail!("{} does not list the manifest's records in manifest order", path.display());
    }
    Ok(assign)
}

fn contact_sheet(images: &[Image], size: usize) -> Image {
    let cols = (images.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = images.len().div_ceil(cols).max(1);
    let mut sheet = Image::new(cols * size, rows * size);
    for (n, img) in images.iter().enumerate() {
        let (ox, oy) = ((n % cols) * size, (n / cols) * size);
        for y in 0..size {
            for x in 0..size {
                sheet.set_pixel(ox + x, oy + y, img.pixel(x, y));
            }
        }
    }
    sheet
}

fn representatives_cmd(cfg: &PipelineConfig, a: RepresentativesArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let assign = assignments_for(&a.assignments, &records)?;
    let top_n = a.top_n.unwrap_or(cfg.map.top_n);
    let reps = representatives(&assign, top_n)?;
    let index: BTreeMap<&str, &GeoImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let dir = manifest_dir(&a.manifest);
    let size = cfg.model.image_size;
    let mut listing = BTreeMap::new();
    let mut sheets = Vec::new();
    for (k, list) in reps.iter().enumerate() {
        let imgs = list
            .iter()
            .map(|r| index[r.record_id.as_str()].load_image(&dir, size))
            .collect::<ccgp::Result<Vec<_>>>()?;
        sheets.push((format!("cluster_{k:02}.png"), contact_sheet(&imgs, size).encode_png()?));
        listing.insert(k.to_string(), list.clone());
    }
    write_json(&a.out.join("representatives.json"), &listing)?;
    for (name, bytes) in sheets {
        write_atomic(&a.out.join(name), &bytes)?;
    }
    println!("{} clusters, top {top_n} each, written to {}", reps.len(), a.out.display());
    Ok(())
}

/// Grid map GeoJSON for `assign` under `labelmap`, plus the PNG render.
pub fn build_map(
    cfg: &PipelineConfig,
    records: &[GeoImageRecord],
    assign: &ccgp::trainer::AssignmentMatrix,
    labelmap: &LabelMap,
    cell_size: f64,
) -> Result<(serde_json::Value, Vec<u8>)> {
    let probs = apply_label_map(assign, labelmap)?;
    let points: Vec<_> = records.iter().map(|r| r.proj).collect();
    let spec = GridSpec::covering(&points, cell_size)?;
    let grid = grid_map(&points, &probs, spec)?;
    let png = render_png(&grid, labelmap, cfg.map.png_cell_px)?;
    Ok((export_geojson(&grid, labelmap), png))
}

fn map(cfg: &PipelineConfig, a: MapArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let assign = assignments_for(&a.assignments, &records)?;
    let labelmap = match &a.labelmap {
        Some(p) => LabelMap::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => LabelMap::identity(assign.clusters),
    };
    labelmap.validate(assign.clusters)?;
    let cell = a.cell_size_m.unwrap_or(cfg.map.cell_size_m);
    let (doc, png) = build_map(cfg, &records, &assign, &labelmap, cell)?;
    write_json(&a.out, &doc)?;
    if let Some(p) = &a.png {
        write_atomic(p, &png)?;
    }
    let n = doc["features"].as_array().map_or(0, Vec::len);
    println!("{n} occupied cells written to {}", a.out.display());
    Ok(())
}

fn ksweep(cfg: &mut PipelineConfig, a: KsweepArgs) -> Result<()> {
    if let Some(v) = a.d_m {
        cfg.train.d_m = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    cfg.validate()?;
    let data = match &a.manifest {
        Some(m) => LabeledData::new(load_manifest(m)?, &manifest_dir(m), cfg.model.image_size)?,
        None => LabeledData::synthetic(&cfg.data.synth)?,
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|s| cfg.train.seed + s).collect();
    let rows = ccgp::experiment::ksweep(cfg, &data, &a.k, &seeds, |k, seed, acc| {
        eprintln!("k={k} seed={seed} acc={acc:.4}");
    })?;
    write_atomic(&a.out, ksweep_csv(&rows).as_bytes())?;
    print!("{}", ksweep_csv(&rows));
    Ok(())
}

/// Path of a record's image on disk, if it has one.
pub fn image_path(record: &GeoImageRecord, base: &Path) -> Option<PathBuf> {
    match &record.image {
        ImageRef::Path(p) if p.is_absolute() => Some(p.clone()),
        ImageRef::Path(p) => Some(base.join(p)),
        ImageRef::Synthetic { .. } => None,
    }
}
