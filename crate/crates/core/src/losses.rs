//! Spatial instance-level and cluster-level contrastive losses, the
//! cluster-balance entropy regularizer, and their weighted sum.
//!
//! All losses take row-major `f64` matrices and return the value together
//! with its gradient w.r.t. every input entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `log M - (1/M) sum Z log Z`, as printed. Lower at collapse than at
    /// the uniform distribution.
    Paper,
    /// `log M + sum Z log Z = KL(Z || uniform)`: 0 when balanced, `log M`
    /// when all mass sits in one cluster.
    KlUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_instance: f64,
    pub tau_cluster: f64,
    pub lambda: f64,
    pub eta: f64,
    pub entropy_form: EntropyForm,
    pub scch_symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_instance: 0.5,
            tau_cluster: 1.0,
            lambda: 2.0,
            eta: 0.2,
            entropy_form: EntropyForm::KlUniform,
            scch_symmetrize: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_instance > 0.0) || !(self.tau_cluster > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// For every view in the batch, the views that are its spatial positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveStructure {
    pub positives: Vec<Vec<usize>>,
}

impl PositiveStructure {
    /// Anchor `i` paired with view `offset + i`, both directions.
    pub fn paired(pairs: usize) -> Self {
        let mut positives = vec![Vec::new(); 2 * pairs];
        for i in 0..pairs {
            positives[i].push(pairs + i);
            positives[pairs + i].push(i);
        }
        Self { positives }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    fn validate(&self, views: usize) -> Result<()> {
        if self.positives.len() != views {
            return Err(Error::Shape(format!(
                "positive structure covers {} views, batch has {views}",
                self.positives.len()
            )));
        }
        for (i, p) in self.positives.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::InvalidArgument(format!("anchor {i} has no positive")));
            }
            if p.iter().any(|&j| j == i || j >= views) {
                return Err(Error::InvalidArgument(format!("anchor {i} has an invalid positive")));
            }
        }
        Ok(())
    }
}

/// Spatial instance-level contrastive loss.
///
/// For each anchor `i`, the mean over its positives `j` of
/// `-log(exp(z_i.z_j / tau) / sum_{a != i} exp(z_i.z_a / tau))`, averaged
/// over anchors. Returns the loss and `d loss / d z`.
pub fn sich_loss(z: &[f64], dim: usize, pos: &PositiveStructure, tau: f64) -> Result<(f64, Vec<f64>)> {
    if dim == 0 || z.len() % dim != 0 {
        return Err(Error::Shape("feature matrix is not a whole number of rows".into()));
    }
    let v = z.len() / dim;
    if v < 2 {
        return Err(Error::InvalidArgument("instance loss needs at least two views".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    pos.validate(v)?;

    let mut logits = vec![0.0; v * v];
    gemm(false, true, v, v, dim, 1.0 / tau, z, z, 0.0, &mut logits);

    let mut loss = 0.0;
    // d loss / d logits, later pushed through the Gram product.
    let mut dl = vec![0.0; v * v];
    let scale = 1.0 / v as f64;
    for i in 0..v {
        let row = &logits[i * v..(i + 1) * v];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != i)
            .fold(f64::NEG_INFINITY, |m, (_, &x)| m.max(x));
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != i)
            .map(|(_, &x)| (x - max).exp())
            .sum();
        let lse = max + sum.ln();
        let p = &pos.positives[i];
        let inv_p = 1.0 / p.len() as f64;
        let mean_pos: f64 = p.iter().map(|&j| row[j]).sum::<f64>() * inv_p;
        loss += lse - mean_pos;
        let drow = &mut dl[i * v..(i + 1) * v];
        for a in 0..v {
            if a != i {
                drow[a] = scale * (row[a] - lse).exp();
            }
        }
        for &j in p {
            drow[j] -= scale * inv_p;
        }
    }
    loss *= scale;

    // logits = Z Z^T / tau  =>  dZ = (dL + dL^T) Z / tau
    let mut sym = vec![0.0; v * v];
    for i in 0..v {
        for a in 0..v {
            sym[i * v + a] = dl[i * v + a] + dl[a * v + i];
        }
    }
    let mut dz = vec![0.0; v * dim];
    gemm(false, false, v, dim, v, 1.0 / tau, &sym, z, 0.0, &mut dz);
    Ok((loss, dz))
}

/// Columns of `q` (rows x m) scaled to unit length. Zero columns get `1e-12`
/// added to every entry first.
fn unit_columns(q: &[f64], rows: usize, m: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut u = vec![0.0; m * rows];
    let mut norms = vec![0.0; m];
    let mut degenerate = vec![false; m];
    for k in 0..m {
        let mut ss: f64 = (0..rows).map(|r| q[r * m + k].powi(2)).sum();
        let eps = if ss == 0.0 {
            degenerate[k] = true;
            log::warn!("cluster {k} received no probability mass in this batch");
            ss = rows as f64 * 1e-24;
            1e-12
        } else {
            0.0
        };
        let norm = ss.sqrt();
        norms[k] = norm;
        for r in 0..rows {
            u[k * rows + r] = (q[r * m + k] + eps) / norm;
        }
    }
    (u, norms, degenerate)
}

/// One direction of the cluster loss over unit column matrices `u`, `w`
/// (`m x rows` each). Returns loss, `d/du`, `d/dw`.
fn cluster_direction(u: &[f64], w: &[f64], m: usize, rows: usize, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = vec![0.0; m * m];
    gemm(false, true, m, m, rows, 1.0 / tau, u, w, 0.0, &mut g);
    let mut loss = 0.0;
    let mut dg = vec![0.0; m * m];
    for i in 0..m {
        let row = &g[i * m..(i + 1) * m];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[i];
        for j in 0..m {
            dg[i * m + j] = ((row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    loss /= m as f64;
    let mut du = vec![0.0; m * rows];
    let mut dw = vec![0.0; m * rows];
    gemm(false, false, m, rows, m, 1.0 / tau, &dg, w, 0.0, &mut du);
    gemm(true, false, m, rows, m, 1.0 / tau, &dg, u, 0.0, &mut dw);
    (loss, du, dw)
}

/// Spatial cluster-level contrastive loss between anchor assignments
/// `qa` and neighbor assignments `qn` (both `rows x m`).
///
/// Columns act as cluster representations: each is L2-normalized, and
/// column `i` of `qa` must pick out column `i` of `qn` among all `m` columns.
/// With `symmetrize` the mirrored direction is averaged in.
/// Returns the loss and its gradients w.r.t. `qa` and `qn`.
pub fn scch_loss(
    qa: &[f64],
    qn: &[f64],
    m: usize,
    tau: f64,
    symmetrize: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if m == 0 || qa.len() % m != 0 || qa.len() != qn.len() {
        return Err(Error::Shape("cluster assignment matrices disagree in shape".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let rows = qa.len() / m;
    if rows == 0 {
        return Err(Error::Empty("cluster loss needs a nonempty batch"));
    }
    if rows < m {
        log::warn!("batch of {rows} is smaller than the {m} clusters");
    }
    let (u, nu, deg_u) = unit_columns(qa, rows, m);
    let (w, nw, deg_w) = unit_columns(qn, rows, m);
    let (mut loss, mut du, mut dw) = cluster_direction(&u, &w, m, rows, tau);
    if symmetrize {
        let (l2, dw2, du2) = cluster_direction(&w, &u, m, rows, tau);
        loss = 0.5 * (loss + l2);
        for (a, b) in du.iter_mut().zip(&du2) {
            *a = 0.5 * (*a + b);
        }
        for (a, b) in dw.iter_mut().zip(&dw2) {
            *a = 0.5 * (*a + b);
        }
    }
    let back = |unit: &[f64], d: &[f64], norms: &[f64], deg: &[bool]| {
        let mut dq = vec![0.0; rows * m];
        for k in 0..m {
            if deg[k] {
                continue;
            }
            let uk = &unit[k * rows..(k + 1) * rows];
            let dk = &d[k * rows..(k + 1) * rows];
            let dot: f64 = uk.iter().zip(dk).map(|(a, b)| a * b).sum();
            for r in 0..rows {
                dq[r * m + k] = (dk[r] - uk[r] * dot) / norms[k];
            }
        }
        dq
    };
    let dqa = back(&u, &du, &nu, &deg_u);
    let dqn = back(&w, &dw, &nw, &deg_w);
    Ok((loss, dqa, dqn))
}

/// Entropy-based balance regularizer over the column distribution of `q`
/// (`rows x m`). `0 log 0` is taken as 0. Returns the value and `d/dq`.
pub fn entropy_reg(q: &[f64], m: usize, form: EntropyForm) -> Result<(f64, Vec<f64>)> {
    if m == 0 || q.len() % m != 0 || q.is_empty() {
        return Err(Error::Shape("assignment matrix is empty or ragged".into()));
    }
    let rows = q.len() / m;
    let mut col = vec![0.0; m];
    for r in 0..rows {
        for k in 0..m {
            col[k] += q[r * m + k];
        }
    }
    let total: f64 = col.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("assignment matrix carries no mass".into()));
    }
    let zl: Vec<f64> = col.iter().map(|c| c / total).collect();
    let plogp: f64 = zl.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum();
    let log_m = (m as f64).ln();
    let (value, coeff) = match form {
        EntropyForm::KlUniform => (log_m + plogp, 1.0),
        EntropyForm::Paper => (log_m - plogp / m as f64, -1.0 / m as f64),
    };
    // dL/dZ_l = coeff (ln Z_l + 1); dZ_l/dcol_k = (delta_lk - Z_l) / total
    let dz: Vec<f64> = zl
        .iter()
        .map(|&p| coeff * (p.max(1e-300).ln() + 1.0))
        .collect();
    let mean: f64 = dz.iter().zip(&zl).map(|(d, p)| d * p).sum();
    let dcol: Vec<f64> = dz.iter().map(|d| (d - mean) / total).collect();
    let mut dq = vec![0.0; q.len()];
    for row in dq.chunks_exact_mut(m) {
        row.copy_from_slice(&dcol);
    }
    Ok((value, dq))
}

/// `sich + lambda * scch + eta * entropy`.
pub fn total_loss(sich: f64, scch: f64, entropy: f64, lambda: f64, eta: f64) -> Result<f64> {
    for (component, value) in [("instance", sich), ("cluster", scch), ("entropy", entropy)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(sich + lambda * scch + eta * entropy)
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sich: f64,
    pub scch: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Gradients of the total objective w.r.t. the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub dz: Vec<f64>,
    /// Gradient for the stacked `[anchors; neighbors]` assignment rows.
    pub dq: Vec<f64>,
}

/// Full training objective for a batch of `2B` views laid out as
/// `[anchor views; positive views]`.
///
/// The instance loss sees all views; the cluster loss contrasts the anchor
/// half against the positive half; the entropy term is the mean of the
/// regularizer on each half.
pub fn batch_objective(
    z: &[f64],
    dim: usize,
    q: &[f64],
    m: usize,
    pos: &PositiveStructure,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ObjectiveGrad)> {
    let views = pos.len();
    if views % 2 != 0 || q.len() != views * m {
        return Err(Error::Shape("objective expects [anchors; positives] halves".into()));
    }
    let half = views / 2 * m;
    let (sich, dz_i) = sich_loss(z, dim, pos, cfg.tau_instance)?;
    let (scch, dqa, dqn) = scch_loss(&q[..half], &q[half..], m, cfg.tau_cluster, cfg.scch_symmetrize)?;
    let (ea, dea) = entropy_reg(&q[..half], m, cfg.entropy_form)?;
    let (en, den) = entropy_reg(&q[half..], m, cfg.entropy_form)?;
    let entropy = 0.5 * (ea + en);
    let total = total_loss(sich, scch, entropy, cfg.lambda, cfg.eta)?;

    let mut dq = Vec::with_capacity(q.len());
    dq.extend(
        dqa.iter()
            .zip(&dea)
            .map(|(c, e)| cfg.lambda * c + cfg.eta * 0.5 * e),
    );
    dq.extend(
        dqn.iter()
            .zip(&den)
            .map(|(c, e)| cfg.lambda * c + cfg.eta * 0.5 * e),
    );
    Ok((
        LossBreakdown {
            sich,
            scch,
            entropy,
            total,
        },
        ObjectiveGrad { dz: dz_i, dq },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(angle_deg: f64) -> [f64; 2] {
        let a = angle_deg.to_radians();
        [a.cos(), a.sin()]
    }

    #[test]
    fn two_mutual_views_have_zero_instance_loss() {
        let z = [unit(10.0), unit(75.0)].concat();
        let (l, _) = sich_loss(&z, 2, &PositiveStructure::paired(1), 0.5).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let z = [unit(0.0), unit(1.0), unit(2.0)].concat();
        let pos = PositiveStructure {
            positives: vec![vec![1], vec![0], vec![]],
        };
        assert!(sich_loss(&z, 2, &pos, 0.5).is_err());
    }

    #[test]
    fn identity_assignments_give_the_closed_form_cluster_loss() {
        let q = [1.0, 0.0, 0.0, 1.0];
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(expected, 0.313_262, epsilon = 1e-6);
        for sym in [false, true] {
            let (l, _, _) = scch_loss(&q, &q, 2, 1.0, sym).unwrap();
            assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_vanish_at_low_temperature() {
        let q = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (l, _, _) = scch_loss(&q, &q, 3, 0.01, true).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn empty_cluster_column_is_survivable() {
        let q = [1.0, 0.0, 1.0, 0.0];
        let (l, dqa, _) = scch_loss(&q, &q, 2, 1.0, true).unwrap();
        assert!(l.is_finite());
        assert!(dqa.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn entropy_closed_forms() {
        let uniform = vec![0.2; 5];
        let onehot = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let l5 = 5f64.ln();
        assert_abs_diff_eq!(entropy_reg(&uniform, 5, EntropyForm::KlUniform).unwrap().0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(entropy_reg(&onehot, 5, EntropyForm::KlUniform).unwrap().0, l5, epsilon = 1e-12);
        assert_abs_diff_eq!(l5, 1.609_438, epsilon = 1e-6);
        let paper = entropy_reg(&uniform, 5, EntropyForm::Paper).unwrap().0;
        assert_abs_diff_eq!(paper, l5 + l5 / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(paper, 1.931_325, epsilon = 1e-6);
        // The printed form rewards collapse.
        assert_abs_diff_eq!(entropy_reg(&onehot, 5, EntropyForm::Paper).unwrap().0, l5, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 2.0, 0.2).unwrap(), 0.0);
        assert_abs_diff_eq!(total_loss(1.0, 0.5, 0.2, 2.0, 0.2).unwrap(), 2.04, epsilon = 1e-12);
        assert!(matches!(
            total_loss(1.0, f64::NAN, 0.0, 2.0, 0.2),
            Err(Error::NonFinite { component: "cluster", .. })
        ));
    }

    #[test]
    fn pulling_a_positive_closer_lowers_the_loss() {
        let mut z = [unit(0.0), unit(40.0), unit(120.0), unit(130.0)].concat();
        let pos = PositiveStructure::paired(2);
        let (before, _) = sich_loss(&z, 2, &pos, 0.5).unwrap();
        // View 2 is the positive of view 0.
        z[4..6].copy_from_slice(&unit(10.0));
        let (after, _) = sich_loss(&z, 2, &pos, 0.5).unwrap();
        assert!(after < before);
    }

    fn numeric(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rows_softmax(raw: &[f64], m: usize) -> Vec<f64> {
        let mut q = raw.to_vec();
        for row in q.chunks_exact_mut(m) {
            crate::model::softmax_in_place(row);
        }
        q
    }

    proptest::proptest! {
        #[test]
        fn instance_gradient_matches_finite_differences(
            z in proptest::collection::vec(-1.0f64..1.0, 18),
            tau in 0.2f64..2.0,
        ) {
            let pos = PositiveStructure {
                positives: vec![vec![3, 4], vec![4], vec![5], vec![0], vec![1, 0], vec![2]],
            };
            let (_, g) = sich_loss(&z, 3, &pos, tau).unwrap();
            let n = numeric(&|x| sich_loss(x, 3, &pos, tau).unwrap().0, &z);
            for (a, b) in g.iter().zip(&n) {
                proptest::prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn cluster_gradient_matches_finite_differences(
            raw in proptest::collection::vec(-2.0f64..2.0, 24),
            tau in 0.3f64..2.0,
            sym: bool,
        ) {
            let q = rows_softmax(&raw, 3);
            let (qa, qn) = q.split_at(12);
            let (_, ga, gn) = scch_loss(qa, qn, 3, tau, sym).unwrap();
            let na = numeric(&|x| scch_loss(x, qn, 3, tau, sym).unwrap().0, qa);
            let nn = numeric(&|x| scch_loss(qa, x, 3, tau, sym).unwrap().0, qn);
            for (a, b) in ga.iter().chain(&gn).zip(na.iter().chain(&nn)) {
                proptest::prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn entropy_gradient_matches_finite_differences(
            raw in proptest::collection::vec(-2.0f64..2.0, 12),
            paper: bool,
        ) {
            let form = if paper { EntropyForm::Paper } else { EntropyForm::KlUniform };
            let q = rows_softmax(&raw, 4);
            let (_, g) = entropy_reg(&q, 4, form).unwrap();
            let n = numeric(&|x| entropy_reg(x, 4, form).unwrap().0, &q);
            for (a, b) in g.iter().zip(&n) {
                proptest::prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn losses_are_finite_and_bounded(
            raw in proptest::collection::vec(-3.0f64..3.0, 40),
        ) {
            let q = rows_softmax(&raw, 5);
            let (qa, qn) = q.split_at(20);
            let (c, _, _) = scch_loss(qa, qn, 5, 1.0, true).unwrap();
            proptest::prop_assert!(c.is_finite() && c >= 0.0);
            let (e, _) = entropy_reg(qa, 5, EntropyForm::KlUniform).unwrap();
            proptest::prop_assert!(e >= -1e-12 && e <= 5f64.ln() + 1e-12);
            let mut z = raw.clone();
            for row in z.chunks_exact_mut(5) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                row.iter_mut().for_each(|v| *v /= n);
            }
            let (s, _) = sich_loss(&z, 5, &PositiveStructure::paired(4), 0.5).unwrap();
            // Bounded below by 0 and above by 2/tau + log(V - 1).
            proptest::prop_assert!(s >= 0.0 && s <= 4.0 + 7f64.ln() + 1e-9);
        }
    }
}
