//! Partition agreement metrics (NMI, ARI, Hungarian-aligned accuracy and
//! F1) and inverse-distance Moran's I.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{KdTree, ProjectedPoint};

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metrics need at least one labeled sample"));
    }
    Ok(())
}

/// Dense contingency table `rows = pred label, cols = truth label`.
fn contingency(pred: &[usize], truth: &[usize]) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
    let rp = pred.iter().max().map_or(0, |m| m + 1);
    let ct = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; ct]; rp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let a = table.iter().map(|r| r.iter().sum()).collect();
    let b = (0..ct).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, a, b)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of both entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = pred.len() as f64;
    let (table, a, b) = contingency(pred, truth);
    let (ha, hb) = (entropy(&a, n), entropy(&b, n));
    if ha == 0.0 && hb == 0.0 {
        // Both partitions are a single block, hence identical.
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (ha + hb);
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let (table, a, b) = contingency(pred, truth);
    let index: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sa: f64 = a.iter().map(|&c| comb2(c)).sum();
    let sb: f64 = b.iter().map(|&c| comb2(c)).sum();
    let total = comb2(pred.len() as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        // Both partitions trivial in the same way (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost perfect assignment on a square matrix; returns the column
/// assigned to each row.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    // Potentials formulation, 1-based with a dummy column 0.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Result of matching clusters to classes one-to-one.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `mapping[cluster] = class` (classes `>=` the truth count are unmatched slots).
    pub mapping: Vec<usize>,
    pub acc: f64,
    /// Mean F1 over classes that occur in the truth.
    pub mf1: f64,
    /// F1 per truth class index; `None` for classes absent from the truth.
    pub per_class_f1: Vec<Option<f64>>,
}

/// Optimal one-to-one cluster-to-class matching over an `m x m` table.
pub fn hungarian_align(pred: &[usize], truth: &[usize], m: usize) -> Result<Alignment> {
    check_pair(pred, truth)?;
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= m) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} does not fit {m} clusters; M is smaller than the label count"
        )));
    }
    let mut counts = vec![vec![0i64; m]; m];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let cost: Vec<Vec<i64>> = counts.iter().map(|r| r.iter().map(|&c| -c).collect()).collect();
    let mapping = min_cost_assignment(&cost);
    let matched: i64 = (0..m).map(|c| counts[c][mapping[c]]).sum();
    let acc = matched as f64 / pred.len() as f64;

    let mut tp = vec![0u64; m];
    let mut pred_n = vec![0u64; m];
    let mut true_n = vec![0u64; m];
    for (&p, &t) in pred.iter().zip(truth) {
        let c = mapping[p];
        pred_n[c] += 1;
        true_n[t] += 1;
        if c == t {
            tp[c] += 1;
        }
    }
    let per_class_f1: Vec<Option<f64>> = (0..m)
        .map(|c| {
            (true_n[c] > 0).then(|| 2.0 * tp[c] as f64 / (pred_n[c] + true_n[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    let mf1 = present.iter().sum::<f64>() / present.len() as f64;
    Ok(Alignment {
        mapping,
        acc,
        mf1,
        per_class_f1,
    })
}

/// Sparse inverse-distance weights `w_ij = 1/d_ij` for `0 < d_ij <= threshold`.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    /// Per point: (neighbor index ascending, weight).
    rows: Vec<Vec<(usize, f64)>>,
    total: f64,
}

impl SpatialWeights {
    pub fn new(coords: &[ProjectedPoint], threshold: f64) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidArgument("Moran's I needs at least two points".into()));
        }
        if !(threshold > 0.0) {
            return Err(Error::InvalidArgument("distance threshold must be positive".into()));
        }
        let tree = KdTree::new(coords.iter().map(|p| [p.x, p.y]).collect());
        let mut total = 0.0;
        let rows = coords
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut hits = tree.within([p.x, p.y], threshold);
                hits.sort_unstable();
                hits.into_iter()
                    .filter(|&j| j != i)
                    .filter_map(|j| {
                        let d = p.distance(&coords[j]);
                        (d > 0.0 && d <= threshold).then(|| {
                            total += 1.0 / d;
                            (j, 1.0 / d)
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self { rows, total })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Moran's I of `values` under these weights.
    pub fn morans_i(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.rows.len() {
            return Err(Error::Shape("values do not match the weight matrix".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let var: f64 = dev.iter().map(|d| d * d).sum();
        if var <= 0.0 {
            return Err(Error::UndefinedMoran("values have zero variance"));
        }
        if self.total <= 0.0 {
            return Err(Error::UndefinedMoran("no pair of points lies within the threshold"));
        }
        let mut num = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                num += w * dev[i] * dev[j];
            }
        }
        Ok(n / self.total * num / var)
    }
}

/// Moran's I with inverse-distance weights inside `threshold` meters.
pub fn morans_i(values: &[f64], coords: &[ProjectedPoint], threshold: f64) -> Result<f64> {
    if values.len() != coords.len() {
        return Err(Error::Shape("values and coordinates differ in length".into()));
    }
    SpatialWeights::new(coords, threshold)?.morans_i(values)
}

/// Literal O(N^2) double loop over all pairs; reference for [`morans_i`].
pub fn morans_i_literal(values: &[f64], coords: &[ProjectedPoint], threshold: f64) -> Result<f64> {
    if values.len() != coords.len() {
        return Err(Error::Shape("values and coordinates differ in length".into()));
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgument("Moran's I needs at least two points".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if var <= 0.0 {
        return Err(Error::UndefinedMoran("values have zero variance"));
    }
    let (mut w_sum, mut num) = (0.0, 0.0);
    for i in 0..values.len() {
        for j in 0..values.len() {
            if i == j {
                continue;
            }
            let d = coords[i].distance(&coords[j]);
            if d > 0.0 && d <= threshold {
                let w = 1.0 / d;
                w_sum += w;
                num += w * (values[i] - mean) * (values[j] - mean);
            }
        }
    }
    if w_sum <= 0.0 {
        return Err(Error::UndefinedMoran("no pair of points lies within the threshold"));
    }
    Ok(n / w_sum * num / var)
}

/// Labeling whose class frequencies weight the per-class Moran's I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSource {
    /// The labeling being scored.
    Evaluated,
    /// The ground truth.
    Truth,
}

/// Class-share weighted mean of the Moran's I of each binarized class.
///
/// `shares_from` supplies the labeling whose class counts weight each
/// class; `None` uses `labels` itself. Classes whose indicator has zero
/// variance are skipped and the remaining weights renormalized.
pub fn weighted_morans_i(
    labels: &[usize],
    weights: &SpatialWeights,
    shares_from: Option<&[usize]>,
) -> Result<f64> {
    if labels.len() != weights.len() {
        return Err(Error::Shape("labels do not match the weight matrix".into()));
    }
    let shares = shares_from.unwrap_or(labels);
    if shares.len() != labels.len() {
        return Err(Error::Shape("share labeling differs in length".into()));
    }
    let classes = labels.iter().chain(shares).max().map_or(0, |m| m + 1);
    let mut present = vec![0usize; classes];
    for &l in labels {
        present[l] += 1;
    }
    if present.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::UndefinedMoran("weighted Moran's I needs at least two classes"));
    }
    let mut counts = vec![0usize; classes];
    for &s in shares {
        counts[s] += 1;
    }
    let (mut acc, mut mass) = (0.0, 0.0);
    for c in 0..classes {
        if counts[c] == 0 {
            continue;
        }
        if present[c] == 0 || present[c] == labels.len() {
            log::warn!("class {c} has a constant indicator; skipped in weighted Moran's I");
            continue;
        }
        let indicator: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == c))).collect();
        let share = counts[c] as f64;
        acc += share * weights.morans_i(&indicator)?;
        mass += share;
    }
    Ok(acc / mass)
}

/// Serialized evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub mf1: f64,
    /// `None` when no coordinates were available.
    pub moran_weighted: Option<f64>,
    pub per_class_f1: BTreeMap<String, f64>,
    /// Rows are truth classes (in `per_class_f1` order), columns predicted labels.
    pub confusion_matrix: Vec<Vec<u64>>,
}

/// Scores `pred` against `truth`. `class_names[t]` names truth class `t`;
/// `coords` enables the weighted Moran's I of the predictions.
pub fn evaluate(
    pred: &[usize],
    truth: &[usize],
    class_names: &[String],
    coords: Option<&[ProjectedPoint]>,
    threshold: f64,
    counts: CountSource,
) -> Result<MetricsReport> {
    check_pair(pred, truth)?;
    if let Some(&t) = truth.iter().find(|&&t| t >= class_names.len()) {
        return Err(Error::InvalidArgument(format!("truth label {t} has no class name")));
    }
    let n_pred = pred.iter().max().map_or(0, |m| m + 1);
    let m = n_pred.max(class_names.len());
    let align = hungarian_align(pred, truth, m)?;
    let mut confusion = vec![vec![0u64; n_pred]; class_names.len()];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let per_class_f1 = class_names
        .iter()
        .enumerate()
        .filter_map(|(i, name)| align.per_class_f1[i].map(|f| (name.clone(), f)))
        .collect();
    let moran_weighted = match coords {
        Some(c) => {
            let w = SpatialWeights::new(c, threshold)?;
            let shares = matches!(counts, CountSource::Truth).then_some(truth);
            Some(weighted_morans_i(pred, &w, shares)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        acc: align.acc,
        mf1: align.mf1,
        moran_weighted,
        per_class_f1,
        confusion_matrix: confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pts(xy: &[(f64, f64)]) -> Vec<ProjectedPoint> {
        xy.iter().map(|&(x, y)| ProjectedPoint { x, y }).collect()
    }

    fn four_points() -> Vec<ProjectedPoint> {
        pts(&[(0.0, 0.0), (50.0, 0.0), (1000.0, 0.0), (1050.0, 0.0)])
    }

    #[test]
    fn nmi_of_identical_and_relabeled_partitions() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(nmi(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nmi(&[2, 2, 0, 0, 1, 1], &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nmi(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_of_independent_halves_is_zero() {
        // The 2x2 contingency table is all ones: MI = 0.
        assert_abs_diff_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_special_cases() {
        assert_abs_diff_eq!(ari(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ari(&[0; 6], &[0, 1, 0, 2, 1, 2]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian_align(&[0, 0, 1, 1, 2], &[1, 1, 0, 0, 2], 3).unwrap();
        assert_eq!(a.mapping, vec![1, 0, 2]);
        assert_eq!(a.acc, 1.0);
        let b = hungarian_align(&[0, 0, 0, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(b.acc, 0.75);
        assert_eq!(b.mapping, vec![0, 1]);
        assert!(hungarian_align(&[0, 1, 2], &[0, 1, 2], 2).is_err());
    }

    #[test]
    fn moran_four_point_configuration() {
        let c = four_points();
        let v = [1.0, 1.0, 0.0, 0.0];
        assert_abs_diff_eq!(morans_i(&v, &c, 100.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(morans_i_literal(&v, &c, 100.0).unwrap(), 1.0, epsilon = 1e-12);
        let w = SpatialWeights::new(&c, 100.0).unwrap();
        assert_abs_diff_eq!(weighted_morans_i(&[0, 0, 1, 1], &w, None).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn moran_errors() {
        let c = four_points();
        assert!(matches!(morans_i(&[1.0; 4], &c, 100.0), Err(Error::UndefinedMoran(_))));
        assert!(matches!(morans_i(&[1.0, 0.0, 1.0, 0.0], &c, 10.0), Err(Error::UndefinedMoran(_))));
        let w = SpatialWeights::new(&c, 100.0).unwrap();
        assert!(weighted_morans_i(&[3; 4], &w, None).is_err());
    }

    #[test]
    fn coincident_duplicates_carry_no_weight() {
        let mut c = four_points();
        let base = morans_i(&[1.0, 1.0, 0.0, 0.0], &c, 100.0).unwrap();
        c.push(c[0]);
        let w = SpatialWeights::new(&c, 100.0).unwrap();
        assert!(w.rows[4].iter().all(|&(j, _)| j != 0));
        let with_dup = morans_i(&[1.0, 1.0, 0.0, 0.0, 1.0], &c, 100.0).unwrap();
        assert!(with_dup.is_finite());
        assert!(base > 0.9);
    }

    #[test]
    fn report_for_a_perfect_prediction() {
        let names = vec!["a".to_owned(), "b".to_owned()];
        let r = evaluate(&[1, 1, 0, 0], &[0, 0, 1, 1], &names, Some(&four_points()), 100.0, CountSource::Evaluated)
            .unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.mf1, 1.0);
        assert_eq!(r.moran_weighted, Some(1.0));
        assert_eq!(r.confusion_matrix, vec![vec![0, 2], vec![2, 0]]);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["nmi", "ari", "acc", "mf1", "moran_weighted", "per_class_f1", "confusion_matrix"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn nmi_and_ari_are_symmetric(pairs in proptest::collection::vec((0usize..4, 0usize..4), 2..60)) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn aligned_accuracy_dominates_identity(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..80)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let identity = p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
            prop_assert!(hungarian_align(&p, &t, 5).unwrap().acc >= identity - 1e-12);
        }
    }
}
