//! Independent oracles shared by the integration and acceptance tests.
//! Everything here is written from the definitions, without calling the
//! library routine it checks.
#![allow(dead_code)]

use std::collections::HashMap;

use ceir_core::cbl::loss_gradient;
use ceir_core::numerics::{GaussianStream, Matrix};
use ceir_core::vae::{elbo_gradients, elbo_loss, VaeModel};

/// Σ_k −cos(standardize(Q[:,k])³, P[:,k]³) with plain loops.
pub fn alignment_loss_oracle(q: &Matrix, p: &Matrix) -> f64 {
    alignment_loss_oracle_f64(&q.to_f64(), q.rows(), q.cols(), p)
}

/// As [`alignment_loss_oracle`] with row-major f64 activations.
pub fn alignment_loss_oracle_f64(q: &[f64], n: usize, m: usize, p: &Matrix) -> f64 {
    let mut total = 0.0;
    for k in 0..m {
        let mut mean = 0.0;
        for i in 0..n {
            mean += q[i * m + k];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = q[i * m + k] - mean;
            var += d * d;
        }
        let sd = (var / n as f64).sqrt();
        let mut a = vec![0.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            let s = if sd < 1e-8 { 0.0 } else { (q[i * m + k] - mean) / sd };
            a[i] = s * s * s;
            let pv = f64::from(p.get(i, k));
            c[i] = pv * pv * pv;
        }
        let (mut ab, mut aa, mut cc) = (0.0, 0.0, 0.0);
        for i in 0..n {
            ab += a[i] * c[i];
            aa += a[i] * a[i];
            cc += c[i] * c[i];
        }
        if aa.sqrt() < 1e-12 || cc.sqrt() < 1e-12 {
            continue;
        }
        total -= ab / (aa.sqrt() * cc.sqrt());
    }
    total
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut GaussianStream) -> Matrix {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_f64(rows, cols, &v).unwrap()
}

/// ‖analytic − numeric‖ / ‖numeric‖ (absolute when the numeric norm is tiny).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Perturbs `m[r][c]` by roughly `h` and returns the step that f32 storage
/// actually took.
fn nudge(m: &mut Matrix, r: usize, c: usize, original: f32, h: f64) -> f64 {
    let v = (f64::from(original) + h) as f32;
    m.set(r, c, v);
    f64::from(v) - f64::from(original)
}

/// Analytic and central-difference gradients of the alignment loss w.r.t. W.
pub fn bottleneck_fd(x: &Matrix, w: &Matrix, p: &Matrix, h: f64) -> (Vec<f64>, Vec<f64>) {
    let analytic = loss_gradient(x, w, p).unwrap().to_f64();
    let (n, m, d) = (x.rows(), w.rows(), x.cols());
    // Activations stay in f64 so the difference quotient sees no f32 rounding.
    let loss = |w: &Matrix| {
        let mut q = vec![0.0; n * m];
        for i in 0..n {
            for k in 0..m {
                q[i * m + k] = (0..d).map(|j| f64::from(x.get(i, j)) * f64::from(w.get(k, j))).sum();
            }
        }
        alignment_loss_oracle_f64(&q, n, m, p)
    };
    let mut numeric = Vec::new();
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let orig = w.get(r, c);
            let mut plus = w.clone();
            let hp = nudge(&mut plus, r, c, orig, h);
            let mut minus = w.clone();
            let hm = nudge(&mut minus, r, c, orig, -h);
            numeric.push((loss(&plus) - loss(&minus)) / (hp - hm));
        }
    }
    (analytic, numeric)
}

fn param_mut(m: &mut VaeModel, layer: usize, bias: bool) -> &mut Matrix {
    let dense = &mut m.layers[layer];
    if bias {
        &mut dense.bias
    } else {
        &mut dense.weight
    }
}

/// Analytic and central-difference ELBO gradients on `coords` =
/// (layer, is_bias, row, col) with the noise fixed by `seed`.
pub fn vae_fd(
    model: &VaeModel,
    batch: &Matrix,
    seed: u64,
    coords: &[(usize, bool, usize, usize)],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (_, grads) = elbo_gradients(model, batch, seed).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &(layer, bias, r, c) in coords {
        let g = &grads.layers[layer];
        analytic.push(f64::from(if bias { g.1.get(r, c) } else { g.0.get(r, c) }));
        let mut plus = model.clone();
        let mut minus = model.clone();
        let orig = param_mut(&mut plus, layer, bias).get(r, c);
        let hp = nudge(param_mut(&mut plus, layer, bias), r, c, orig, h);
        let hm = nudge(param_mut(&mut minus, layer, bias), r, c, orig, -h);
        let lp = elbo_loss(&plus, batch, seed).unwrap().total;
        let lm = elbo_loss(&minus, batch, seed).unwrap().total;
        numeric.push((lp - lm) / (hp - hm));
    }
    (analytic, numeric)
}

/// Every parameter coordinate of a model, as used by [`vae_fd`].
pub fn all_vae_coords(model: &VaeModel) -> Vec<(usize, bool, usize, usize)> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for r in 0..layer.weight.rows() {
            for c in 0..layer.weight.cols() {
                out.push((l, false, r, c));
            }
            out.push((l, true, 0, r));
        }
    }
    out
}

fn counts(v: &[usize]) -> HashMap<usize, f64> {
    let mut m = HashMap::new();
    for &x in v {
        *m.entry(x).or_insert(0.0) += 1.0;
    }
    m
}

/// I(a;b)/sqrt(H(a)H(b)) from probability tables.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (ca, cb) = (counts(a), counts(b));
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
    }
    let h = |c: &HashMap<usize, f64>| -> f64 { c.values().map(|v| -(v / n) * (v / n).ln()).sum() };
    let (ha, hb) = (h(&ca), h(&cb));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &v) in &joint {
        let pxy = v / n;
        mi += pxy * (pxy / ((ca[&x] / n) * (cb[&y] / n))).ln();
    }
    mi / (ha * hb).sqrt()
}

/// Pair-counting ARI by enumerating every pair of items.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut same_a, mut same_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            same_a += f64::from(u8::from(sa));
            same_b += f64::from(u8::from(sb));
            both += f64::from(u8::from(sa && sb));
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = same_a * same_b / pairs;
    let max = (same_a + same_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best one-to-one matching total by enumerating every permutation of the
/// zero-padded square matrix.
pub fn best_matching_oracle(counts: &[Vec<u64>]) -> u64 {
    let rows = counts.len();
    let cols = counts.iter().map(Vec::len).max().unwrap_or(0);
    let n = rows.max(cols);
    let at = |i: usize, j: usize| counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
    permutations(n)
        .iter()
        .map(|perm| (0..n).map(|i| at(i, perm[i])).sum())
        .max()
        .unwrap_or(0)
}

/// Clustering accuracy by brute force over cluster→class maps.
pub fn accuracy_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let mut pid: Vec<usize> = pred.to_vec();
    pid.sort_unstable();
    pid.dedup();
    let mut tid: Vec<usize> = truth.to_vec();
    tid.sort_unstable();
    tid.dedup();
    let mut table = vec![vec![0u64; tid.len()]; pid.len()];
    for (p, t) in pred.iter().zip(truth) {
        let i = pid.binary_search(p).unwrap();
        let j = tid.binary_search(t).unwrap();
        table[i][j] += 1;
    }
    best_matching_oracle(&table) as f64 / pred.len() as f64
}
