//! Independent reference implementations, written straight from the
//! formulas with no shared code paths: plain loops, no stabilization
//! tricks, brute-force search where a fast algorithm exists.

#![allow(dead_code)]

use ccgp::geo::ProjectedPoint;
use ccgp::losses::{batch_objective, LossConfig, PositiveStructure};
use ccgp::model::{EncoderConfig, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Instance loss: per anchor, mean over positives of
/// `-log(exp(s_ij) / sum_{a != i} exp(s_ia))`, then mean over anchors.
pub fn sich(z: &[Vec<f64>], pos: &[Vec<usize>], tau: f64) -> f64 {
    let v = z.len();
    let mut total = 0.0;
    for i in 0..v {
        let denom: f64 = (0..v).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut per = 0.0;
        for &j in &pos[i] {
            let num = (dot(&z[i], &z[j]) / tau).exp();
            per += -(num / denom).ln();
        }
        total += per / pos[i].len() as f64;
    }
    total / v as f64
}

fn unit_column(q: &[Vec<f64>], k: usize) -> Vec<f64> {
    let col: Vec<f64> = q.iter().map(|r| r[k]).collect();
    let n = dot(&col, &col).sqrt();
    col.iter().map(|c| c / n).collect()
}

/// Cluster loss over L2-normalized columns, optionally symmetrized.
pub fn scch(qa: &[Vec<f64>], qn: &[Vec<f64>], tau: f64, symmetric: bool) -> f64 {
    let m = qa[0].len();
    let ua: Vec<Vec<f64>> = (0..m).map(|k| unit_column(qa, k)).collect();
    let un: Vec<Vec<f64>> = (0..m).map(|k| unit_column(qn, k)).collect();
    let one_way = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..m {
            let denom: f64 = (0..m).map(|j| (dot(&x[i], &y[j]) / tau).exp()).sum();
            s += -((dot(&x[i], &y[i]) / tau).exp() / denom).ln();
        }
        s / m as f64
    };
    if symmetric {
        0.5 * (one_way(&ua, &un) + one_way(&un, &ua))
    } else {
        one_way(&ua, &un)
    }
}

/// `kl`: `log M + sum Z log Z`; otherwise the printed `log M - (1/M) sum Z log Z`.
pub fn entropy(q: &[Vec<f64>], kl: bool) -> f64 {
    let m = q[0].len();
    let sums: Vec<f64> = (0..m).map(|k| q.iter().map(|r| r[k]).sum()).collect();
    let total: f64 = sums.iter().sum();
    let mut s = 0.0;
    for c in sums {
        let z = c / total;
        if z > 0.0 {
            s += z * z.ln();
        }
    }
    let lm = (m as f64).ln();
    if kl {
        lm + s
    } else {
        lm - s / m as f64
    }
}

pub fn random_unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn random_simplex_rows(r: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let e: Vec<f64> = (0..m).map(|_| r.random_range(-3.0f64..3.0).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Sorted `(distance, id)` scan over every other point.
pub fn knn_brute(ids: &[String], pts: &[ProjectedPoint], q: usize, k: usize, d: f64) -> Vec<usize> {
    let mut c: Vec<(f64, &str, usize)> = (0..pts.len())
        .filter(|&j| j != q)
        .map(|j| (pts[q].distance(&pts[j]), ids[j].as_str(), j))
        .filter(|&(dist, _, _)| dist <= d)
        .collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    c.into_iter().take(k).map(|t| t.2).collect()
}

/// Adjusted Rand index by explicit pair counting.
pub fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            if sa {
                in_a += 1.0;
            }
            if sb {
                in_b += 1.0;
            }
            if sa && sb {
                both += 1.0;
            }
        }
    }
    let expected = in_a * in_b / pairs;
    let max = 0.5 * (in_a + in_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Best accuracy over all `m!` cluster-to-class permutations.
pub fn best_permutation_acc(pred: &[usize], truth: &[usize], m: usize) -> f64 {
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits = pred.iter().zip(truth).filter(|(&c, &t)| p[c] == t).count();
        best = best.max(hits);
    });
    best as f64 / pred.len() as f64
}

fn permute(p: &mut Vec<usize>, at: usize, f: &mut dyn FnMut(&[usize])) {
    if at == p.len() {
        f(p);
        return;
    }
    for i in at..p.len() {
        p.swap(at, i);
        permute(p, at + 1, f);
        p.swap(at, i);
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub params: usize,
    pub checked: usize,
    /// Parameters whose difference quotient straddles a rectifier kink.
    pub kinks: usize,
    pub max_rel_err: f64,
}

/// Compares the analytic gradient of the total loss with central
/// differences at step `h`, in float64, on `pairs` anchor/neighbor pairs.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; a parameter whose
/// quotients at `h` and `h/4` disagree sits on a ReLU kink and is counted
/// separately rather than compared.
pub fn gradient_check(pairs: usize, h: f64, seed: u64) -> GradCheck {
    let cfg = EncoderConfig {
        image_size: 8,
        base_width: 2,
        clusters: 4,
        ..Default::default()
    };
    let loss_cfg = LossConfig::default();
    let mut model = Model::<f64>::new(&cfg, seed).unwrap();
    let mut r = rng(seed);
    // Perturb the biases so they are not all exactly zero.
    for p in model.params_mut() {
        *p += r.random_range(-0.05..0.05);
    }
    let n = 2 * pairs;
    let images: Vec<f64> = (0..n * 8 * 8 * 3).map(|_| r.random::<f64>()).collect();
    let pos = PositiveStructure::paired(pairs);
    let loss = |m: &Model<f64>| {
        let out = m.infer(&images, n).unwrap();
        batch_objective(&out.z, cfg.projection_dim, &out.q, cfg.clusters, &pos, &loss_cfg)
            .unwrap()
            .0
            .total
    };
    let (out, tape) = model.forward(&images, n).unwrap();
    let (_, g) = batch_objective(&out.z, cfg.projection_dim, &out.q, cfg.clusters, &pos, &loss_cfg).unwrap();
    let analytic = model.backward(&tape, &g.dz, &g.dq).unwrap();

    let mut quotient = |i: usize, step: f64| {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + step;
        let up = loss(&model);
        model.params_mut()[i] = orig - step;
        let down = loss(&model);
        model.params_mut()[i] = orig;
        (up - down) / (2.0 * step)
    };
    let floor = 1e-6;
    let mut report = GradCheck {
        params: analytic.len(),
        checked: 0,
        kinks: 0,
        max_rel_err: 0.0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let num = quotient(i, h);
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        if err < 1e-3 {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            continue;
        }
        let fine = quotient(i, h / 4.0);
        if (fine - num).abs() / fine.abs().max(num.abs()).max(floor) > 1e-4 {
            report.kinks += 1;
        } else {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    report
}
