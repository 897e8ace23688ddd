//! Clustering and linear-probe evaluation of latent representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, AdamState, GaussianStream, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 10,
            max_iters: 300,
            tol: 1e-4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (ties to the lower index) and its squared distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut GaussianStream) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.index(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every point coincides with a centroid already.
            rng.index(n)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, restart: usize) -> ClusterAssignment {
    let mut rng = GaussianStream::new(derive_seed(cfg.seed, &[0x6b6d, restart as u64]));
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;

    for _ in 0..cfg.max_iters.max(1) {
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        history.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed to the point farthest from its centroid; zero its
                // distance so two empty clusters do not take the same point.
                let far = (0..points.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        if prev - inertia <= cfg.tol * inertia.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
    }

    // Final assignment against the final centroids.
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignments[i] = c;
        inertia += d;
    }
    history.push(inertia);
    ClusterAssignment {
        assignments,
        k,
        inertia,
        inertia_history: history,
        restart,
    }
}

/// Best-of-restarts Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(h: &Matrix, k: usize, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    if k == 0 || h.rows() < k {
        return Err(Error::Input(format!("kmeans needs 1 ≤ k ≤ N, got k={k}, N={}", h.rows())));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("kmeans restarts must be positive".into()));
    }
    let points: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row_f64(i)).collect();
    let runs: Vec<ClusterAssignment> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| lloyd(&points, k, cfg, r))
        .collect();
    // Ordered reduction: lowest inertia, ties to the earliest restart.
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart"))
}

fn check_pair(a: &[usize], b: &[usize], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min_len {
        return Err(Error::Input(format!("need at least {min_len} labels")));
    }
    Ok(())
}

/// Dense contingency table with rows indexed by `a`'s ids and columns by `b`'s.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
    let compact = |v: &[usize]| -> Vec<usize> {
        let ids: BTreeMap<usize, usize> = v
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        v.iter().map(|x| ids[x]).collect()
    };
    let (ca, cb) = (compact(a), compact(b));
    let ra = ca.iter().max().map_or(0, |m| m + 1);
    let rb = cb.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; rb]; ra];
    for (&x, &y) in ca.iter().zip(&cb) {
        table[x][y] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..rb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
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

/// Normalized mutual information, `I(a;b) / sqrt(H(a)·H(b))`.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b, 1)?;
    let (table, ra, rb) = contingency(a, b);
    let n = a.len() as f64;
    let (ha, hb) = (entropy(&ra, n), entropy(&rb, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (ra[i] as f64 * rb[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn pairs(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (table, ra, rb) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = ra.iter().map(|&c| pairs(c)).sum();
    let sum_b: f64 = rb.iter().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(a.len() as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions are all-in-one or all-singletons: identical.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost perfect matching on a square cost matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("hungarian cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: 0 });
    }
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Maximum total of a one-to-one row↔column matching on a rectangular count
/// matrix (padded square with zeros).
pub fn max_matching(counts: &[Vec<u64>]) -> Result<u64> {
    let rows = counts.len();
    let cols = counts.iter().map(Vec::len).max().unwrap_or(0);
    let n = rows.max(cols);
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| -(counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost)?;
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0))
        .sum())
}

/// Best one-to-one cluster↔class matching accuracy.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let (table, _, _) = contingency(pred, truth);
    Ok(max_matching(&table)? as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub backbone: String,
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "dataset\tbackbone\tnmi\tacc\tari\tk\tn\tseed";

    pub fn from_labels(pred: &[usize], truth: &[usize], k: usize, seed: u64) -> Result<Self> {
        Ok(EvalReport {
            dataset: String::new(),
            backbone: String::new(),
            nmi: nmi(pred, truth)?,
            acc: clustering_accuracy(pred, truth)?,
            ari: ari(pred, truth)?,
            k,
            n: pred.len(),
            seed,
        })
    }

    pub fn with_names(mut self, dataset: &str, backbone: &str) -> Self {
        self.dataset = dataset.to_string();
        self.backbone = backbone.to_string();
        self
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        let _ = writeln!(
            s,
            "\n{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.dataset, self.backbone, self.nmi, self.acc, self.ari, self.k, self.n, self.seed
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// K-means on `h` with `k` clusters, scored against `truth`.
pub fn evaluate_clustering(h: &Matrix, truth: &[usize], k: usize, cfg: &KMeansConfig) -> Result<(ClusterAssignment, EvalReport)> {
    if truth.len() != h.rows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", truth.len(), h.rows())));
    }
    let clusters = kmeans(h, k, cfg)?;
    let report = EvalReport::from_labels(&clusters.assignments, truth, k, cfg.seed)?;
    Ok((clusters, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 1e-3,
            epochs: 120,
            batch_size: 256,
            seed: 42,
        }
    }
}

/// Softmax regression head: logits = W h + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    fn logits(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let d = x.len();
        b.iter()
            .enumerate()
            .map(|(c, bc)| bc + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Argmax logit per row, ties to the lowest class id.
    pub fn predict(&self, h: &Matrix) -> Result<Vec<usize>> {
        if h.cols() != self.weight.cols() {
            return Err(Error::Dimension(format!(
                "probe expects {} features, got {}",
                self.weight.cols(),
                h.cols()
            )));
        }
        let (w, b) = (self.weight.to_f64(), self.bias.to_f64());
        Ok((0..h.rows())
            .map(|i| {
                let z = Self::logits(&w, &b, &h.row_f64(i));
                z.iter()
                    .enumerate()
                    .fold(0, |best, (c, v)| if *v > z[best] { c } else { best })
            })
            .collect())
    }
}

/// Trains a softmax-regression probe with Adam on mean cross-entropy.
pub fn train_probe(h: &Matrix, y: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if y.len() != h.rows() || h.rows() == 0 {
        return Err(Error::Dimension(format!("{} labels for {} rows", y.len(), h.rows())));
    }
    if num_classes < 2 || y.iter().any(|&c| c >= num_classes) {
        return Err(Error::Input(format!("probe needs ≥ 2 classes with ids < {num_classes}")));
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("probe batch_size and learning_rate must be positive".into()));
    }
    let d = h.cols();
    let mut probe = LinearProbe {
        weight: Matrix::zeros(num_classes, d),
        bias: Matrix::zeros(1, num_classes),
    };
    let mut adam_w = AdamState::for_params(&probe.weight, cfg.learning_rate);
    let mut adam_b = AdamState::for_params(&probe.bias, cfg.learning_rate);
    let rows: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row_f64(i)).collect();
    let mut order: Vec<usize> = (0..h.rows()).collect();
    let mut rng = GaussianStream::new(derive_seed(cfg.seed, &[0x7072_6f62]));

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (w, b) = (probe.weight.to_f64(), probe.bias.to_f64());
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; num_classes];
            for &i in batch {
                let z = LinearProbe::logits(&w, &b, &rows[i]);
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..num_classes {
                    let g = exps[c] / total - if c == y[i] { 1.0 } else { 0.0 };
                    gb[c] += g;
                    gw[c * d..(c + 1) * d]
                        .iter_mut()
                        .zip(&rows[i])
                        .for_each(|(acc, x)| *acc += g * x);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= scale);
            adam_w.update(&mut probe.weight, &Matrix::from_f64(num_classes, d, &gw)?)?;
            adam_b.update(&mut probe.bias, &Matrix::from_f64(1, num_classes, &gb)?)?;
        }
    }
    Ok(probe)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Trains on the train split and reports plain accuracy, NMI and ARI of the
/// test predictions against the test labels.
pub fn linear_probe(
    h_train: &Matrix,
    y_train: &[usize],
    h_test: &Matrix,
    y_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    if h_train.cols() != h_test.cols() {
        return Err(Error::Dimension("train and test latents differ in width".into()));
    }
    if y_test.len() != h_test.rows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", y_test.len(), h_test.rows())));
    }
    let num_classes = y_train.iter().chain(y_test).max().map_or(0, |m| m + 1);
    let probe = train_probe(h_train, y_train, num_classes, cfg)?;
    let pred = probe.predict(h_test)?;
    Ok(EvalReport {
        dataset: String::new(),
        backbone: String::new(),
        nmi: nmi(&pred, y_test)?,
        acc: accuracy(&pred, y_test)?,
        ari: if pred.len() >= 2 { ari(&pred, y_test)? } else { 1.0 },
        k: num_classes,
        n: pred.len(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_gaussian;
    use proptest::prelude::*;

    fn blobs(per: usize, centers: &[[f32; 2]], spread: f32, seed: u64) -> (Matrix, Vec<usize>) {
        let noise = seeded_gaussian(per * centers.len(), 2, seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per {
                let r = c * per + i;
                data.push(center[0] + spread * noise.get(r, 0));
                data.push(center[1] + spread * noise.get(r, 1));
                labels.push(c);
            }
        }
        (Matrix::new(labels.len(), 2, data).unwrap(), labels)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (h, truth) = blobs(20, &[[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]], 0.5, 3);
        let (c, report) = evaluate_clustering(&h, &truth, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(report.acc, 1.0);
        assert!(c.assignments.iter().all(|&a| a < 3));
        for w in c.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_inertia() {
        let h = seeded_gaussian(7, 3, 8);
        let c = kmeans(&h, 7, &KMeansConfig::default()).unwrap();
        assert!(c.inertia.abs() < 1e-12);
        assert!(kmeans(&h, 8, &KMeansConfig::default()).is_err());
        assert!(kmeans(&h, 0, &KMeansConfig::default()).is_err());
    }

    fn brute_force_two_partition(points: &[[f64; 2]]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64; 2]> =
                    (0..n).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| &points[i]).collect();
                let m = members.len() as f64;
                let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
                let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
                total += members.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn kmeans_matches_exhaustive_two_partition() {
        let pts = [
            [0.0, 0.0],
            [1.0, 0.5],
            [0.5, 2.0],
            [3.0, 3.0],
            [4.0, 2.5],
            [3.5, 4.0],
            [1.5, 1.5],
            [2.5, 1.0],
        ];
        let flat: Vec<f32> = pts.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
        let h = Matrix::new(8, 2, flat).unwrap();
        let c = kmeans(&h, 2, &KMeansConfig::default()).unwrap();
        assert!((c.inertia - brute_force_two_partition(&pts)).abs() < 1e-9);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let h = seeded_gaussian(40, 3, 1);
        let cfg = KMeansConfig::default();
        assert_eq!(kmeans(&h, 4, &cfg).unwrap(), kmeans(&h, 4, &cfg).unwrap());
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ari_examples() {
        assert!((ari(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap() - 1.0).abs() < 1e-12);
        // Pair counts: index 0, expected 2·2/6, max 2 → (0 − 2/3)/(2 − 2/3) = −1/2.
        // The unadjusted Rand index of this pair is 1/3.
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(clustering_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[2, 0, 1, 1], &[0, 1, 2, 2]).unwrap(), 1.0);
        // Confusion [[5,2],[1,4]] (rows = clusters, cols = classes).
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (c, t, n) in [(0, 0, 5), (0, 1, 2), (1, 0, 1), (1, 1, 4)] {
            pred.extend(std::iter::repeat_n(c, n));
            truth.extend(std::iter::repeat_n(t, n));
        }
        assert!((clustering_accuracy(&pred, &truth).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(max_matching(&[vec![5, 2], vec![1, 4]]).unwrap(), 9);
    }

    #[test]
    fn hungarian_rectangular_padding() {
        // 3 clusters, 2 classes: the best two rows win.
        assert_eq!(max_matching(&[vec![1, 0], vec![0, 7], vec![6, 1]]).unwrap(), 13);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn probe_separates_blobs_deterministically() {
        let (train, ytr) = blobs(60, &[[-3.0, -3.0], [3.0, 3.0]], 0.7, 11);
        let (test, yte) = blobs(40, &[[-3.0, -3.0], [3.0, 3.0]], 0.7, 12);
        let cfg = ProbeConfig::default();
        let r = linear_probe(&train, &ytr, &test, &yte, &cfg).unwrap();
        assert!(r.acc >= 0.99, "acc {}", r.acc);
        assert_eq!(r, linear_probe(&train, &ytr, &test, &yte, &cfg).unwrap());
        let same = linear_probe(&train, &ytr, &train, &ytr, &cfg).unwrap();
        let probe = train_probe(&train, &ytr, 2, &cfg).unwrap();
        assert_eq!(same.acc, accuracy(&probe.predict(&train).unwrap(), &ytr).unwrap());
        assert!(linear_probe(&train, &ytr, &test, &yte[1..], &cfg).is_err());
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::from_labels(&[0, 0, 1, 1], &[0, 0, 1, 1], 2, 42)
            .unwrap()
            .with_names("synthetic", "planted");
        let tsv = r.to_tsv();
        assert_eq!(
            tsv,
            "dataset\tbackbone\tnmi\tacc\tari\tk\tn\tseed\nsynthetic\tplanted\t1.000000\t1.000000\t1.000000\t2\t4\t42\n"
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["k"], 2);
        assert_eq!(v["dataset"], "synthetic");
    }

    fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_relabel_invariant((a, b) in labels(), shift in 1usize..7) {
            let relabeled: Vec<usize> = a.iter().map(|x| (x + shift) % 5 + 10).collect();
            let (n, acc, r) = (nmi(&a, &b).unwrap(), clustering_accuracy(&a, &b).unwrap(), ari(&a, &b).unwrap());
            prop_assert!((0.0..=1.0).contains(&n));
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((nmi(&relabeled, &b).unwrap() - n).abs() < 1e-12);
            prop_assert!((ari(&relabeled, &b).unwrap() - r).abs() < 1e-12);
            prop_assert_eq!(clustering_accuracy(&relabeled, &b).unwrap(), acc);
        }
    }
}
