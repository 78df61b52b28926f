//! HTTP API for reviewing clusters and submitting label maps.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ccgp::config::PipelineConfig;
use ccgp::dataset::{load_manifest, GeoImageRecord};
use ccgp::model::load_checkpoint;
use ccgp::pcva::{representatives, LabelMap};
use ccgp::trainer::{load_images, predict, AssignmentMatrix};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{assignments_for, build_map, image_path};
use crate::files::{write_assignments, write_atomic, write_json};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Precomputed assignments; inferred from the checkpoint when omitted.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    /// Where the label map and regenerated grid map are persisted.
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

/// The label map currently in force with the grid map derived from it.
struct MapVersion {
    labelmap: LabelMap,
    version: u64,
    geojson: Vec<u8>,
}

pub struct AppState {
    cfg: PipelineConfig,
    checkpoint: String,
    records: Vec<GeoImageRecord>,
    by_id: HashMap<String, usize>,
    base_dir: PathBuf,
    assign: AssignmentMatrix,
    state_dir: PathBuf,
    current: RwLock<MapVersion>,
}

const LABELMAP_FILE: &str = "labelmap.json";
const GEOJSON_FILE: &str = "map.geojson";
const PNG_FILE: &str = "map.png";

impl AppState {
    /// Builds the state, loading a persisted label map from `state_dir`
    /// when one exists.
    pub fn new(
        cfg: PipelineConfig,
        checkpoint: String,
        records: Vec<GeoImageRecord>,
        base_dir: PathBuf,
        assign: AssignmentMatrix,
        state_dir: PathBuf,
    ) -> Result<Self> {
        let saved = state_dir.join(LABELMAP_FILE);
        let (labelmap, version) = if saved.exists() {
            (LabelMap::load(&saved)?, 1)
        } else {
            (LabelMap::identity(assign.clusters), 0)
        };
        let by_id = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        let state = Self {
            cfg,
            checkpoint,
            records,
            by_id,
            base_dir,
            assign,
            state_dir,
            current: RwLock::new(MapVersion {
                labelmap: LabelMap::default(),
                version,
                geojson: Vec::new(),
            }),
        };
        let (geojson, png) = state.render(&labelmap)?;
        state.persist(&labelmap, &geojson, &png, version > 0)?;
        *state.current.write().expect("lock") = MapVersion {
            labelmap,
            version,
            geojson,
        };
        Ok(state)
    }

    fn render(&self, labelmap: &LabelMap) -> Result<(Vec<u8>, Vec<u8>)> {
        labelmap.validate(self.assign.clusters)?;
        let (doc, png) = build_map(&self.cfg, &self.records, &self.assign, labelmap, self.cfg.map.cell_size_m)?;
        Ok((serde_json::to_vec(&doc)?, png))
    }

    fn persist(&self, labelmap: &LabelMap, geojson: &[u8], png: &[u8], with_map: bool) -> Result<()> {
        if with_map {
            labelmap.save(&self.state_dir.join(LABELMAP_FILE))?;
        }
        write_atomic(&self.state_dir.join(GEOJSON_FILE), geojson)?;
        write_atomic(&self.state_dir.join(PNG_FILE), png)?;
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/clusters", get(clusters))
        .route("/api/representatives/{cluster_id}", get(reps))
        .route("/api/images/{record_id}", get(image))
        .route("/api/labelmap", post(submit_labelmap).get(current_labelmap))
        .route("/api/map.geojson", get(map_geojson))
        .route("/api/status", get(status))
        .with_state(state)
}

fn error(code: StatusCode, message: impl std::fmt::Display) -> Response {
    (code, Json(json!({ "error": message.to_string() }))).into_response()
}

#[derive(Serialize)]
struct ClusterSummary {
    cluster_id: usize,
    size: usize,
    top_confidence: f64,
}

async fn clusters(State(s): State<Arc<AppState>>) -> Json<Vec<ClusterSummary>> {
    let m = s.assign.clusters;
    let mut size = vec![0; m];
    for l in s.assign.labels() {
        size[l] += 1;
    }
    let top = (0..m)
        .map(|k| (0..s.assign.len()).map(|i| s.assign.row(i)[k]).fold(0.0, f64::max))
        .collect::<Vec<_>>();
    Json(
        (0..m)
            .map(|k| ClusterSummary {
                cluster_id: k,
                size: size[k],
                top_confidence: top[k],
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct RepsQuery {
    n: Option<usize>,
}

#[derive(Serialize)]
struct RankedImage {
    record_id: String,
    confidence: f64,
    image_url: String,
}

async fn reps(
    State(s): State<Arc<AppState>>,
    UrlPath(cluster_id): UrlPath<usize>,
    Query(q): Query<RepsQuery>,
) -> Response {
    if cluster_id >= s.assign.clusters {
        return error(StatusCode::NOT_FOUND, format!("no cluster {cluster_id}"));
    }
    let n = q.n.unwrap_or(s.cfg.map.top_n);
    match representatives(&s.assign, n) {
        Ok(mut all) => {
            let list: Vec<RankedImage> = all
                .swap_remove(cluster_id)
                .into_iter()
                .map(|r| RankedImage {
                    image_url: format!("/api/images/{}", r.record_id),
                    record_id: r.record_id,
                    confidence: r.confidence,
                })
                .collect();
            Json(list).into_response()
        }
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn image(State(s): State<Arc<AppState>>, UrlPath(record_id): UrlPath<String>) -> Response {
    let Some(&i) = s.by_id.get(&record_id) else {
        return error(StatusCode::NOT_FOUND, format!("no record {record_id}"));
    };
    let record = &s.records[i];
    let bytes = match image_path(record, &s.base_dir) {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) => std::fs::read(&p).map_err(anyhow::Error::from),
        _ => record
            .load_image(&s.base_dir, s.cfg.model.image_size)
            .and_then(|img| img.encode_png())
            .map_err(anyhow::Error::from),
    };
    match bytes {
        Ok(b) => ([(header::CONTENT_TYPE, "image/png")], b).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn submit_labelmap(State(s): State<Arc<AppState>>, body: axum::body::Bytes) -> Response {
    let labelmap: LabelMap = match serde_json::from_slice(&body) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid label map: {e}")),
    };
    let state = Arc::clone(&s);
    let result = tokio::task::spawn_blocking(move || -> Result<(), (StatusCode, String)> {
        let (geojson, png) = state
            .render(&labelmap)
            .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        // Hold the write lock across persist and swap so readers see one version.
        let mut cur = state.current.write().expect("lock");
        state
            .persist(&labelmap, &geojson, &png, true)
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        *cur = MapVersion {
            labelmap,
            version: cur.version + 1,
            geojson,
        };
        Ok(())
    })
    .await;
    match result {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err((code, msg))) => error(code, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn current_labelmap(State(s): State<Arc<AppState>>) -> Json<LabelMap> {
    Json(s.current.read().expect("lock").labelmap.clone())
}

async fn map_geojson(State(s): State<Arc<AppState>>) -> Response {
    let body = s.current.read().expect("lock").geojson.clone();
    ([(header::CONTENT_TYPE, "application/geo+json")], body).into_response()
}

async fn status(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let version = s.current.read().expect("lock").version;
    Json(json!({
        "checkpoint": s.checkpoint,
        "M": s.assign.clusters,
        "labelmap_version": version,
    }))
}

/// Loads everything the service needs from disk.
pub fn load_state(cfg: &PipelineConfig, a: &ServeArgs) -> Result<AppState> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let records = load_manifest(&a.manifest)?;
    let base_dir = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let assign = match &a.assignments {
        Some(p) => assignments_for(p, &records)?,
        None => {
            let images = load_images(&records, &base_dir, meta.encoder.image_size)?;
            let assign = predict(&model, &records, &images)?;
            write_assignments(&a.state.join("assignments.jsonl"), &assign)?;
            assign
        }
    };
    let mut cfg = cfg.clone();
    cfg.model = meta.encoder.clone();
    write_json(&a.state.join("status.json"), &json!({"checkpoint": a.checkpoint, "M": meta.clusters}))?;
    AppState::new(
        cfg,
        a.checkpoint.display().to_string(),
        records,
        base_dir,
        assign,
        a.state.clone(),
    )
}

pub fn serve(cfg: &PipelineConfig, a: ServeArgs) -> Result<()> {
    let state = Arc::new(load_state(cfg, &a)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
