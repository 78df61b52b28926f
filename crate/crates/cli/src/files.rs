//! On-disk formats owned by the command line: assignment files, generic
//! label files, and atomic writes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ccgp::geo::{project, GeoPoint, ProjectedPoint};
use ccgp::trainer::AssignmentMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes))
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentLine {
    id: String,
    cluster: usize,
    probs: Vec<f64>,
}

/// One JSON object per record: `{"id", "cluster", "probs"}`.
pub fn write_assignments(path: &Path, a: &AssignmentMatrix) -> Result<()> {
    let labels = a.labels();
    let mut out = Vec::new();
    for i in 0..a.len() {
        let line = AssignmentLine {
            id: a.ids[i].clone(),
            cluster: labels[i],
            probs: a.row(i).to_vec(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_assignments(path: &Path) -> Result<AssignmentMatrix> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (mut ids, mut probs, mut m) = (Vec::new(), Vec::new(), None);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AssignmentLine = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed assignment line", path.display(), n + 1))?;
        if *m.get_or_insert(row.probs.len()) != row.probs.len() || row.probs.is_empty() {
            bail!("{}:{}: inconsistent probability vector length", path.display(), n + 1);
        }
        ids.push(row.id);
        probs.extend(row.probs);
    }
    let m = m.ok_or_else(|| anyhow!("{} holds no assignments", path.display()))?;
    Ok(AssignmentMatrix::new(ids, m, probs)?)
}

/// A label read from any JSON Lines file with an `id` field.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub label: String,
    pub point: Option<ProjectedPoint>,
}

/// Reads `id` plus a label from each line: `cluster` when present (an
/// assignments file), otherwise `label` (a manifest or plain label file).
/// Lines with `lon`/`lat` also yield projected coordinates.
pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}: not JSON", at()))?;
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("{}: missing string id", at()))?
            .to_owned();
        let label = match v.get("cluster").or_else(|| v.get("label")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(x)) => x.to_string(),
            _ => bail!("{}: record {id} has no label", at()),
        };
        let point = match (v.get("lon").and_then(Value::as_f64), v.get("lat").and_then(Value::as_f64)) {
            (Some(lon), Some(lat)) => Some(project(GeoPoint::new(lon, lat)?)?),
            _ => None,
        };
        rows.push(LabelRow { id, label, point });
    }
    Ok(rows)
}

/// Aligned integer labels for the records both files share, in `truth` order.
pub struct AlignedLabels {
    pub pred: Vec<usize>,
    pub truth: Vec<usize>,
    pub class_names: Vec<String>,
    pub points: Option<Vec<ProjectedPoint>>,
}

/// Integer codes for labels: numeric labels keep their value when every
/// label is numeric, otherwise labels are numbered in sorted order.
fn encode(labels: &[&str]) -> (Vec<usize>, Vec<String>) {
    if let Some(nums) = labels.iter().map(|l| l.parse::<usize>().ok()).collect::<Option<Vec<_>>>() {
        let max = nums.iter().max().map_or(0, |m| m + 1);
        return (nums, (0..max).map(|i| i.to_string()).collect());
    }
    let mut names: Vec<String> = labels.iter().map(|s| (*s).to_owned()).collect();
    names.sort();
    names.dedup();
    let codes = labels.iter().map(|l| names.binary_search(&(*l).to_owned()).expect("listed")).collect();
    (codes, names)
}

pub fn align(pred: &[LabelRow], truth: &[LabelRow]) -> Result<AlignedLabels> {
    let by_id: HashMap<&str, &LabelRow> = pred.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::new();
    let mut missing = 0;
    for t in truth {
        match by_id.get(t.id.as_str()) {
            Some(p) => pairs.push((*p, t)),
            None => missing += 1,
        }
    }
    if pairs.is_empty() {
        bail!("prediction and truth files share no record id");
    }
    if missing > 0 {
        log::warn!("{missing} truth records have no prediction and are ignored");
    }
    let (pred_codes, _) = encode(&pairs.iter().map(|(p, _)| p.label.as_str()).collect::<Vec<_>>());
    let (truth_codes, class_names) = encode(&pairs.iter().map(|(_, t)| t.label.as_str()).collect::<Vec<_>>());
    let points = pairs
        .iter()
        .map(|(p, t)| t.point.or(p.point))
        .collect::<Option<Vec<_>>>();
    Ok(AlignedLabels {
        pred: pred_codes,
        truth: truth_codes,
        class_names,
        points,
    })
}

/// Attaches coordinates from a manifest to aligned rows.
pub fn points_for(ids: &[&str], coords: &BTreeMap<String, ProjectedPoint>) -> Result<Vec<ProjectedPoint>> {
    ids.iter()
        .map(|id| coords.get(*id).copied().ok_or_else(|| anyhow!("record {id} is not in the manifest")))
        .collect()
}
