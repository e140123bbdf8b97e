//! Reference computations for tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` row lists and shares no code
//! with the `embedit` library: eigenvalues come from a cyclic Jacobi sweep,
//! subspaces from modified Gram–Schmidt, scores from literal loops.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in [-1, 1).
pub fn seeded_matrix(seed: u64, rows: usize, cols: usize) -> Rows {
    let mut r = rng(seed);
    random_matrix(&mut r, rows, cols)
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Rows {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Product of a `rows×rank` and a `rank×cols` random factor.
pub fn random_low_rank(r: &mut impl Rng, rows: usize, cols: usize, rank: usize) -> Rows {
    let left = random_matrix(r, rows, rank);
    let right = random_matrix(r, rank, cols);
    matmul(&left, &right)
}

pub fn transpose(m: &[Vec<f64>]) -> Rows {
    if m.is_empty() {
        return Vec::new();
    }
    let cols = m[0].len();
    (0..cols).map(|c| m.iter().map(|row| row[c]).collect()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Rows {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| (0..cols).map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum()).collect())
        .collect()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / (norm(u) * norm(v))
}

pub fn column_mean(m: &[Vec<f64>]) -> Vec<f64> {
    let cols = m[0].len();
    let mut mean = vec![0.0; cols];
    for row in m {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for x in &mut mean {
        *x /= m.len() as f64;
    }
    mean
}

pub fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| {
            assert_eq!(ra.len(), rb.len(), "column count");
            ra.iter().zip(rb).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in nonincreasing order with matching unit eigenvectors.
pub fn jacobi_eigen(sym: &[Vec<f64>]) -> (Vec<f64>, Rows) {
    let n = sym.len();
    let mut a: Rows = sym.to_vec();
    let mut v: Rows = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Singular values as square roots of the eigenvalues of the smaller Gram matrix.
pub fn singular_values_via_gram(m: &[Vec<f64>]) -> Vec<f64> {
    let rows = m.len();
    let cols = m[0].len();
    let gram = if rows <= cols {
        matmul(m, &transpose(m))
    } else {
        matmul(&transpose(m), m)
    };
    let (vals, _) = jacobi_eigen(&gram);
    vals.into_iter()
        .take(rows.min(cols))
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

#[derive(Debug, Clone)]
pub struct Component {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Nonzero singular triplets built from the eigenvectors of `m·mᵀ`.
///
/// Components with `σ ≤ rel_cutoff · σ_max` are dropped. Right vectors are
/// `v = mᵀu / σ`.
pub fn svd_via_gram(m: &[Vec<f64>], rel_cutoff: f64) -> Vec<Component> {
    let (vals, vecs) = jacobi_eigen(&matmul(m, &transpose(m)));
    let sigma_max = vals.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let mt = transpose(m);
    vals.iter()
        .zip(vecs)
        .filter_map(|(&l, u)| {
            let sigma = l.max(0.0).sqrt();
            if sigma_max == 0.0 || sigma <= rel_cutoff * sigma_max {
                return None;
            }
            let v = mt.iter().map(|col| dot(col, &u) / sigma).collect();
            Some(Component { sigma, u, v })
        })
        .collect()
}

/// Flip each component so its right vector has nonnegative dot with `mean`.
pub fn align_signs(components: &mut [Component], mean: &[f64]) {
    for c in components {
        if dot(&c.v, mean) < 0.0 {
            c.u.iter_mut().for_each(|x| *x = -*x);
            c.v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Σ σ_i v_i after sign alignment against the anchor's column mean.
pub fn reference_vector(reference: &[Vec<f64>], anchor: &[Vec<f64>]) -> Vec<f64> {
    let mut comps = svd_via_gram(reference, 1e-10);
    align_signs(&mut comps, &column_mean(anchor));
    let d = reference[0].len();
    let mut out = vec![0.0; d];
    for c in &comps {
        for (o, x) in out.iter_mut().zip(&c.v) {
            *o += c.sigma * x;
        }
    }
    out
}

/// Orthonormal basis of the row space by modified Gram–Schmidt with one
/// re-orthogonalization pass. Rows whose residual falls below
/// `tol · max_row_norm` are treated as dependent.
pub fn gram_schmidt_basis(m: &[Vec<f64>], tol: f64) -> Rows {
    let max_norm = m.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let mut basis: Rows = Vec::new();
    for row in m {
        let mut w = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&w);
        if max_norm > 0.0 && n > tol * max_norm {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Σ_b (x·b) b for every row x.
pub fn project_onto(rows: &[Vec<f64>], basis: &[Vec<f64>]) -> Rows {
    rows.iter()
        .map(|x| {
            let mut out = vec![0.0; x.len()];
            for b in basis {
                let c = dot(x, b);
                for (o, y) in out.iter_mut().zip(b) {
                    *o += c * y;
                }
            }
            out
        })
        .collect()
}

/// Σ_b b bᵀ.
pub fn projector_matrix(basis: &[Vec<f64>], dim: usize) -> Rows {
    let mut p = vec![vec![0.0; dim]; dim];
    for b in basis {
        for i in 0..dim {
            for j in 0..dim {
                p[i][j] += b[i] * b[j];
            }
        }
    }
    p
}

#[derive(Debug, Clone)]
pub struct RescaleOutcome {
    pub output: Rows,
    pub threshold: f64,
    pub similarities: Vec<f64>,
    pub selected: Vec<bool>,
    pub sigmas: Vec<f64>,
}

/// Literal six-step selective rescaling.
///
/// `above = true` selects components whose cosine exceeds the mean (expression),
/// `false` selects those below it (suppression).
pub fn selective_rescale(
    target: &[Vec<f64>],
    reference: &[Vec<f64>],
    reference_anchor: &[Vec<f64>],
    above: bool,
    scale: impl Fn(f64) -> f64,
) -> RescaleOutcome {
    let v_ref = reference_vector(reference, reference_anchor);
    let mut comps = svd_via_gram(target, 1e-10);
    align_signs(&mut comps, &column_mean(target));
    let similarities: Vec<f64> = comps.iter().map(|c| cosine(&c.v, &v_ref)).collect();
    let threshold = similarities.iter().sum::<f64>() / similarities.len() as f64;
    let selected: Vec<bool> = similarities
        .iter()
        .map(|&s| if above { s > threshold } else { s < threshold })
        .collect();
    let rows = target.len();
    let cols = target[0].len();
    let mut output = vec![vec![0.0; cols]; rows];
    let mut sigmas = Vec::new();
    for (c, &sel) in comps.iter().zip(&selected) {
        let sigma = if sel { scale(c.sigma) } else { c.sigma };
        sigmas.push(c.sigma);
        for i in 0..rows {
            for j in 0..cols {
                output[i][j] += sigma * c.u[i] * c.v[j];
            }
        }
    }
    RescaleOutcome {
        output,
        threshold,
        similarities,
        selected,
        sigmas,
    }
}

/// Mean distance of unit-normalized vectors to their centroid.
pub fn euclidean_radius(vectors: &[Vec<f64>]) -> f64 {
    let unit: Rows = vectors
        .iter()
        .map(|v| {
            let n = norm(v);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let dim = unit[0].len();
    let mut centroid = vec![0.0; dim];
    for v in &unit {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x / unit.len() as f64;
        }
    }
    unit.iter()
        .map(|v| {
            v.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / unit.len() as f64
}

/// One prompt set as plain arrays.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub t: Vec<f64>,
    pub a: Vec<f64>,
    pub dist: Rows,
}

#[derive(Debug, Clone)]
pub struct CqsOracle {
    pub s: Vec<f64>,
    pub d_star: Vec<f64>,
    pub h: Vec<f64>,
    pub cqs: f64,
}

/// Spreadsheet-style recomputation of the harmonic consistency score.
pub fn cqs_direct(sets: &[ScoreSet], mu: f64, tau: f64, lambda: f64, eps: f64) -> CqsOracle {
    // column: d_raw
    let mut d_raw = Vec::new();
    let mut t = Vec::new();
    let mut a = Vec::new();
    for set in sets {
        let k = set.t.len();
        for i in 0..k {
            let mut total = 0.0;
            for j in 0..k {
                if j != i {
                    total += set.dist[i][j];
                }
            }
            d_raw.push(total / (k as f64 - 1.0));
            t.push(set.t[i]);
            a.push(set.a[i]);
        }
    }
    let n = t.len();

    // column: similarity, min-max onto the t range
    let x: Vec<f64> = d_raw.iter().map(|d| 1.0 - d).collect();
    let (mut x_min, mut x_max, mut t_min, mut t_max) = (x[0], x[0], t[0], t[0]);
    for i in 0..n {
        x_min = x_min.min(x[i]);
        x_max = x_max.max(x[i]);
        t_min = t_min.min(t[i]);
        t_max = t_max.max(t[i]);
    }
    let mut s = vec![0.0; n];
    for i in 0..n {
        s[i] = if x_max == x_min || t_max == t_min {
            x[i].max(t_min).min(t_max)
        } else {
            t_min + (x[i] - x_min) * (t_max - t_min) / (x_max - x_min)
        };
    }

    // columns: gaps and their conditional means
    let gap: Vec<f64> = (0..n).map(|i| a[i] - t[i]).collect();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for &g in &gap {
        if g > 0.0 {
            pos_sum += g;
            pos_n += 1;
        }
        if g < 0.0 {
            neg_sum += g;
            neg_n += 1;
        }
    }
    let pos_mean = if pos_n > 0 { pos_sum / pos_n as f64 } else { 0.0 };
    let neg_mean = if neg_n > 0 { neg_sum / neg_n as f64 } else { 0.0 };

    let mut d_star = vec![0.0; n];
    let mut h = vec![0.0; n];
    for i in 0..n {
        let pen = (1.0 - lambda) * neg_mean.abs() + lambda * (-gap[i]).max(0.0);
        let rew = (1.0 - lambda) * pos_mean + lambda * gap[i].max(0.0);
        let mut ds = s[i];
        if gap[i] < 0.0 {
            ds -= mu * pen;
        }
        if gap[i] > 0.0 {
            ds += tau * rew;
        }
        d_star[i] = ds.max(0.0);
        h[i] = 2.0 * t[i] * d_star[i] / (t[i] + d_star[i] + eps);
    }
    let cqs = h.iter().sum::<f64>() / n as f64;
    CqsOracle { s, d_star, h, cqs }
}

/// Random score sets with `k ∈ 2..=max_k` images each.
pub fn random_score_sets(r: &mut impl Rng, n_sets: usize, max_k: usize) -> Vec<ScoreSet> {
    (0..n_sets)
        .map(|_| {
            let k = r.random_range(2..=max_k);
            let t = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
            let a = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
            let mut dist = vec![vec![0.0; k]; k];
            for i in 0..k {
                for j in (i + 1)..k {
                    let d = r.random_range(0.0..1.0);
                    dist[i][j] = d;
                    dist[j][i] = d;
                }
            }
            ScoreSet { t, a, dist }
        })
        .collect()
}
