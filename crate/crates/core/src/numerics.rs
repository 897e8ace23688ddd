//! Dense kernels shared by every training phase.
//!
//! Storage is `f32` row-major; every reduction accumulates in `f64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Standard deviations below this are treated as a constant column.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rounds `f64` values to storage precision.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn column_f64(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| f64::from(self.get(r, c))).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · otherᵀ`, accumulated in `f64`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let a = self.to_f64();
        let b = other.to_f64();
        let out = matmul_nt(&a, &b, self.rows, other.rows, self.cols);
        Matrix::from_f64(self.rows, other.rows, &out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Dimension(format!("row {i} out of {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn select_cols(&self, indices: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = indices.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Dimension(format!("column {bad} out of {}", self.cols)));
        }
        let mut data = Vec::with_capacity(indices.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(indices.iter().map(|&c| row[c]));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: indices.len(),
            data,
        })
    }

    /// Row concatenation; all parts must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Dimension("vstack column counts differ".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Row-major `a (n×k) · b (m×k)ᵀ → n×m` in `f64`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero-mean, unit population standard deviation. Constant columns map to zeros.
pub fn standardize_column(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::Dimension(format!(
            "standardization needs at least 2 values, got {}",
            v.len()
        )));
    }
    let (mean, std) = mean_std(v);
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| (x - mean) / std).collect())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with β = (0.9, 0.999) and ε = 1e-8.
    pub fn new(rows: usize, cols: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn for_params(params: &Matrix, learning_rate: f64) -> Self {
        Self::new(params.rows(), params.cols(), learning_rate)
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.first_moment.shape() {
            return Err(Error::Dimension(format!(
                "adam: params {:?}, grads {:?}, moments {:?}",
                params.shape(),
                grads.shape(),
                self.first_moment.shape()
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Input("adam betas must lie in [0, 1)".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.data.len() {
            let g = f64::from(grads.data[i]);
            let m = b1 * f64::from(self.first_moment.data[i]) + (1.0 - b1) * g;
            let v = b2 * f64::from(self.second_moment.data[i]) + (1.0 - b2) * g * g;
            self.first_moment.data[i] = m as f32;
            self.second_moment.data[i] = v as f32;
            let m_hat = f64::from(self.first_moment.data[i]) / bc1;
            let v_hat = f64::from(self.second_moment.data[i]) / bc2;
            let p = f64::from(params.data[i]) - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            params.data[i] = p as f32;
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::update`].
pub fn adam_step(params: &Matrix, grads: &Matrix, state: &AdamState) -> Result<(Matrix, AdamState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.update(&mut params, grads)?;
    Ok((params, state))
}

/// Mixes stream identifiers into a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        h = h.wrapping_add(s).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Seeded counter-based (ChaCha8) generator with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// `len` standard normal draws for `seed`, in `f64`.
pub fn gaussian_vec(len: usize, seed: u64) -> Vec<f64> {
    GaussianStream::new(seed).normals(len)
}

pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let data = gaussian_vec(rows * cols, seed);
    Matrix {
        rows,
        cols,
        data: data.into_iter().map(|v| v as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass_oracle(v: &[f64]) -> Vec<f64> {
        let mut sum = 0.0;
        for x in v {
            sum += x;
        }
        let mean = sum / v.len() as f64;
        let mut ss = 0.0;
        for x in v {
            ss += (x - mean) * (x - mean);
        }
        let std = (ss / v.len() as f64).sqrt();
        v.iter().map(|x| (x - mean) / std).collect()
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize_column(&[1.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(standardize_column(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let v = [1.0, 2.0, 3.0, 6.0];
        let got = standardize_column(&v).unwrap();
        for (a, b) in got.iter().zip(two_pass_oracle(&v)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(standardize_column(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((c - 4.0 / 5.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let p = Matrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let g = Matrix::zeros(1, 3);
        let state = AdamState::for_params(&p, 1e-3);
        let (p2, s2) = adam_step(&p, &g, &state).unwrap();
        assert_eq!(p2, p);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let p = Matrix::new(1, 1, vec![0.0]).unwrap();
        let g = Matrix::new(1, 1, vec![1.0]).unwrap();
        let (p2, _) = adam_step(&p, &g, &AdamState::for_params(&p, 1e-3)).unwrap();
        assert!((f64::from(p2.get(0, 0)) + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // Reference keeps moments and the parameter at f32 storage precision,
        // exactly as the matrix form stores them.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64);
        let (mut w, mut m, mut v) = (1.0f32, 0.0f32, 0.0f32);
        let mut params = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut state = AdamState::for_params(&params, lr);
        for t in 1..=2 {
            let g = 2.0 * f64::from(w);
            m = (b1 * f64::from(m) + (1.0 - b1) * g) as f32;
            v = (b2 * f64::from(v) + (1.0 - b2) * g * g) as f32;
            let mh = f64::from(m) / (1.0 - b1.powi(t));
            let vh = f64::from(v) / (1.0 - b2.powi(t));
            w = (f64::from(w) - lr * mh / (vh.sqrt() + eps)) as f32;

            let grad = Matrix::new(1, 1, vec![2.0 * params.get(0, 0)]).unwrap();
            state.update(&mut params, &grad).unwrap();
            assert!((f64::from(params.get(0, 0)) - f64::from(w)).abs() < 1e-8);
        }
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        assert!(matches!(
            adam_step(&p, &g, &AdamState::for_params(&p, 1e-3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_is_deterministic_and_standard() {
        assert_eq!(seeded_gaussian(3, 4, 7), seeded_gaussian(3, 4, 7));
        assert_ne!(seeded_gaussian(3, 4, 7), seeded_gaussian(3, 4, 8));
        let v = gaussian_vec(10_000, 42);
        let (mean, std) = mean_std(&v);
        assert!(mean.abs() < 0.05);
        assert!((std * std - 1.0).abs() < 0.05);
    }

    #[test]
    fn matrix_rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        GaussianStream::new(3).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    proptest! {
        #[test]
        fn standardize_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let once = standardize_column(&v).unwrap();
            let twice = standardize_column(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_self_and_symmetry(
            u in prop::collection::vec(-10.0f64..10.0, 1..16),
            seed in any::<u64>(),
        ) {
            prop_assume!(norm(&u) > 1e-6);
            let v = gaussian_vec(u.len(), seed);
            prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn adam_zero_grad_identity_any_state(
            vals in prop::collection::vec(-5.0f32..5.0, 4),
            steps in 0u64..50,
            v in prop::collection::vec(0.0f32..1.0, 4),
        ) {
            // Only momentum-free states: a nonzero first moment keeps moving params.
            let p = Matrix::new(2, 2, vals).unwrap();
            let mut state = AdamState::for_params(&p, 1e-2);
            state.step_count = steps;
            state.second_moment = Matrix::new(2, 2, v).unwrap();
            let (p2, _) = adam_step(&p, &Matrix::zeros(2, 2), &state).unwrap();
            prop_assert_eq!(p2, p);
        }
    }
}
