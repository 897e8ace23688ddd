//! Concept bottleneck layer: a bias-free linear map from backbone features to
//! concept activations, trained so each standardized, cubed activation column
//! points the same way as the cubed image-text similarity column.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "CBLW" u32 version=1
//! u64 M, u64 d0, M·d0 f32 weights (row-major)
//! [32] pool fingerprint, [32] config hash, u64 seed
//! f64 learning_rate, u64 max_epochs, u64 batch_size, u64 early_stop_tolerance,
//! u64 train seed, u8 standardize_p
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::artifact::{read_file, write_file, ByteReader, ByteWriter, Lineage};
use crate::concept_pool::{ConceptPool, RemovalReason};
use crate::embedding_store::{write_atomic, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::numerics::{dot, mean_std, seeded_gaussian, AdamState, Matrix, DEGENERATE_STD};

pub const CBLW_MAGIC: &[u8; 4] = b"CBLW";
pub const CBLW_VERSION: u32 = 1;

/// Cubed columns with a norm below this contribute nothing to the loss.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_tolerance: usize,
    pub seed: u64,
    /// Standardize similarity columns before cubing as well.
    pub standardize_p: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 1000,
            batch_size: 50_000,
            early_stop_tolerance: 50,
            seed: 42,
            standardize_p: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.learning_rate.is_nan() || self.learning_rate <= 0.0) || self.batch_size == 0 || self.early_stop_tolerance == 0 {
            return Err(Error::Config(
                "bottleneck learning_rate, batch_size and early_stop_tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckModel {
    /// M × d0, one row per active concept.
    pub weights: Matrix,
    pub lineage: Lineage,
    pub train_config: TrainConfig,
}

impl BottleneckModel {
    pub fn concept_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn check_pool(&self, pool: &ConceptPool) -> Result<()> {
        if self.lineage.pool_fingerprint != pool.fingerprint() || self.concept_count() != pool.active_count() {
            return Err(Error::Lineage(format!(
                "bottleneck was trained on pool {} ({} concepts), current pool is {} ({} concepts)",
                self.lineage.pool_fingerprint,
                self.concept_count(),
                pool.fingerprint(),
                pool.active_count()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(CBLW_MAGIC, CBLW_VERSION);
        w.u64(self.weights.rows() as u64);
        w.u64(self.weights.cols() as u64);
        w.f32s(&self.weights);
        w.lineage(&self.lineage);
        let c = &self.train_config;
        w.f64(c.learning_rate);
        w.u64(c.max_epochs as u64);
        w.u64(c.batch_size as u64);
        w.u64(c.early_stop_tolerance as u64);
        w.u64(c.seed);
        w.u8(u8::from(c.standardize_p));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(CBLW_MAGIC, CBLW_VERSION)?;
        let m = r.usize()?;
        let d0 = r.usize()?;
        let weights = r.f32s(m, d0)?;
        let lineage = r.lineage()?;
        let train_config = TrainConfig {
            learning_rate: r.f64()?,
            max_epochs: r.usize()?,
            batch_size: r.usize()?,
            early_stop_tolerance: r.usize()?,
            seed: r.u64()?,
            standardize_p: r.u8()? != 0,
        };
        r.finish()?;
        Ok(BottleneckModel {
            weights,
            lineage,
            train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// One column's contribution to the loss, kept for the backward pass.
struct ColumnTerm {
    cosine: f64,
    /// ∂L/∂l for this column (empty when the column is degenerate).
    grad: Vec<f64>,
}

/// `target` is the cubed (optionally pre-standardized) similarity column.
fn column_term(l: &[f64], target: &[f64], target_norm: f64, want_grad: bool) -> ColumnTerm {
    let zero = ColumnTerm {
        cosine: 0.0,
        grad: Vec::new(),
    };
    let n = l.len() as f64;
    let (mean, std) = mean_std(l);
    if std < DEGENERATE_STD || target_norm < DEGENERATE_NORM {
        return zero;
    }
    let s: Vec<f64> = l.iter().map(|v| (v - mean) / std).collect();
    let a: Vec<f64> = s.iter().map(|v| v * v * v).collect();
    let a_norm = dot(&a, &a).sqrt();
    if a_norm < DEGENERATE_NORM {
        return zero;
    }
    let cosine = dot(&a, target) / (a_norm * target_norm);
    if !want_grad {
        return ColumnTerm { cosine, grad: Vec::new() };
    }
    // term = -cos(a, c); a = s³; s = (l - mean) / std.
    let g_s: Vec<f64> = (0..l.len())
        .map(|i| {
            let g_a = -(target[i] / (a_norm * target_norm) - cosine * a[i] / (a_norm * a_norm));
            g_a * 3.0 * s[i] * s[i]
        })
        .collect();
    let mean_g = g_s.iter().sum::<f64>() / n;
    let mean_gs = g_s.iter().zip(&s).map(|(g, s)| g * s).sum::<f64>() / n;
    let grad = g_s
        .iter()
        .zip(&s)
        .map(|(g, s)| (g - mean_g - s * mean_gs) / std)
        .collect();
    ColumnTerm { cosine, grad }
}

fn prepare_targets(p: &Matrix, standardize_p: bool) -> Vec<(Vec<f64>, f64)> {
    (0..p.cols())
        .map(|k| {
            let mut col = p.column_f64(k);
            if standardize_p {
                let (mean, std) = mean_std(&col);
                col = if std < DEGENERATE_STD {
                    vec![0.0; col.len()]
                } else {
                    col.iter().map(|v| (v - mean) / std).collect()
                };
            }
            let cubed: Vec<f64> = col.iter().map(|v| v * v * v).collect();
            let norm = dot(&cubed, &cubed).sqrt();
            (cubed, norm)
        })
        .collect()
}

fn check_loss_shapes(q: &Matrix, p: &Matrix) -> Result<()> {
    if q.shape() != p.shape() {
        return Err(Error::Dimension(format!(
            "activations {:?} vs similarity {:?}",
            q.shape(),
            p.shape()
        )));
    }
    if q.rows() < 2 {
        return Err(Error::Dimension(format!("alignment loss needs at least 2 rows, got {}", q.rows())));
    }
    Ok(())
}

/// Per-concept cosine between the standardized cubed activations and the
/// cubed similarity column (0 for degenerate columns).
pub fn alignment_scores(q: &Matrix, p: &Matrix, standardize_p: bool) -> Result<Vec<f64>> {
    check_loss_shapes(q, p)?;
    let targets = prepare_targets(p, standardize_p);
    Ok((0..q.cols())
        .into_par_iter()
        .map(|k| column_term(&q.column_f64(k), &targets[k].0, targets[k].1, false).cosine)
        .collect())
}

pub fn alignment_loss(q: &Matrix, p: &Matrix, standardize_p: bool) -> Result<f64> {
    Ok(-alignment_scores(q, p, standardize_p)?.iter().sum::<f64>())
}

/// Sum over concepts of the negative cosine between `standardize(Q[:,k])³`
/// and `P[:,k]³`; lies in `[-M, M]`.
pub fn cubed_alignment_loss(q: &Matrix, p: &Matrix) -> Result<f64> {
    alignment_loss(q, p, false)
}

/// Full-batch loss and gradient for a fixed feature/similarity pair.
pub struct AlignmentObjective {
    features: Vec<f64>,
    rows: usize,
    dim: usize,
    targets: Vec<(Vec<f64>, f64)>,
}

impl AlignmentObjective {
    pub fn new(features: &Matrix, p: &Matrix, standardize_p: bool) -> Result<Self> {
        if features.rows() != p.rows() {
            return Err(Error::Dimension(format!(
                "{} feature rows vs {} similarity rows",
                features.rows(),
                p.rows()
            )));
        }
        if features.rows() < 2 {
            return Err(Error::Dimension("alignment loss needs at least 2 rows".into()));
        }
        Ok(AlignmentObjective {
            features: features.to_f64(),
            rows: features.rows(),
            dim: features.cols(),
            targets: prepare_targets(p, standardize_p),
        })
    }

    pub fn concept_count(&self) -> usize {
        self.targets.len()
    }

    fn activations(&self, w_row: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| dot(&self.features[i * self.dim..(i + 1) * self.dim], w_row))
            .collect()
    }

    /// Loss, and the M × d0 gradient when `want_grad` is set.
    pub fn evaluate(&self, weights: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
        if weights.rows() != self.concept_count() || weights.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "weights {:?}, expected ({}, {})",
                weights.shape(),
                self.concept_count(),
                self.dim
            )));
        }
        let per_concept: Vec<(f64, Vec<f64>)> = (0..self.concept_count())
            .into_par_iter()
            .map(|k| {
                let w = weights.row_f64(k);
                let l = self.activations(&w);
                let (target, norm) = &self.targets[k];
                let term = column_term(&l, target, *norm, want_grad);
                let mut g = vec![0.0; self.dim];
                for (i, gl) in term.grad.iter().enumerate() {
                    let x = &self.features[i * self.dim..(i + 1) * self.dim];
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += gl * xj;
                    }
                }
                (-term.cosine, g)
            })
            .collect();
        let loss = per_concept.iter().map(|(t, _)| t).sum();
        let grad = if want_grad {
            let flat: Vec<f64> = per_concept.into_iter().flat_map(|(_, g)| g).collect();
            if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
            }
            Some(Matrix::from_f64(self.concept_count(), self.dim, &flat)?)
        } else {
            None
        };
        Ok((loss, grad))
    }
}

/// ∂L/∂W for `L = cubed_alignment_loss(X·Wᵀ, P)`.
pub fn loss_gradient(features: &Matrix, weights: &Matrix, p: &Matrix) -> Result<Matrix> {
    loss_gradient_with(features, weights, p, false)
}

pub fn loss_gradient_with(features: &Matrix, weights: &Matrix, p: &Matrix, standardize_p: bool) -> Result<Matrix> {
    if features.cols() != weights.cols() || weights.rows() != p.cols() {
        return Err(Error::Dimension(format!(
            "features {:?}, weights {:?}, similarity {:?}",
            features.shape(),
            weights.shape(),
            p.shape()
        )));
    }
    let obj = AlignmentObjective::new(features, p, standardize_p)?;
    Ok(obj.evaluate(weights, true)?.1.expect("gradient requested"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (0 = initialization).
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,heldout_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.9},{:.9}", e.epoch, e.train_loss, e.heldout_loss);
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Weights ~ N(0, 1/d0) from the config seed.
pub fn initial_weights(concepts: usize, feature_dim: usize, seed: u64) -> Result<Matrix> {
    let scale = 1.0 / (feature_dim.max(1) as f32).sqrt();
    seeded_gaussian(concepts, feature_dim, seed).map(|v| v * scale)
}

fn active_similarity(bundle: &EmbeddingBundle, pool: &ConceptPool) -> Result<Matrix> {
    let p = bundle.require_similarity()?;
    let rows = pool.active_source_rows();
    if let Some(&max) = rows.iter().max() {
        if max >= p.cols() {
            return Err(Error::Dimension(format!(
                "split {:?}: similarity has {} concept columns, pool needs {}",
                bundle.split_name,
                p.cols(),
                max + 1
            )));
        }
    }
    p.select_cols(&rows)
}

/// Adam on the alignment loss with held-out early stopping; returns the
/// snapshot with the lowest held-out loss.
pub fn train_projection(
    train: &EmbeddingBundle,
    heldout: &EmbeddingBundle,
    pool: &ConceptPool,
    cfg: &TrainConfig,
    lineage: Lineage,
) -> Result<(BottleneckModel, TrainingLog)> {
    cfg.validate()?;
    if pool.fingerprint() != lineage.pool_fingerprint {
        return Err(Error::Lineage("training lineage does not match the pool".into()));
    }
    if train.feature_dim() != heldout.feature_dim() {
        return Err(Error::Dimension("train and held-out feature widths differ".into()));
    }
    let m = pool.active_count();
    let d0 = train.feature_dim();
    let p_train = active_similarity(train, pool)?;
    let p_held = active_similarity(heldout, pool)?;

    let full = AlignmentObjective::new(&train.backbone_features, &p_train, cfg.standardize_p)?;
    let held = AlignmentObjective::new(&heldout.backbone_features, &p_held, cfg.standardize_p)?;
    let batches: Vec<AlignmentObjective> = if train.len() <= cfg.batch_size {
        Vec::new()
    } else {
        let mut out = Vec::new();
        let mut start = 0;
        while start < train.len() {
            let end = (start + cfg.batch_size).min(train.len());
            // A trailing single row cannot be standardized; fold it into the previous batch.
            let end = if train.len() - end < 2 { train.len() } else { end };
            let idx: Vec<usize> = (start..end).collect();
            out.push(AlignmentObjective::new(
                &train.backbone_features.select_rows(&idx)?,
                &p_train.select_rows(&idx)?,
                cfg.standardize_p,
            )?);
            start = end;
        }
        out
    };

    let mut weights = initial_weights(m, d0, cfg.seed)?;
    let mut adam = AdamState::for_params(&weights, cfg.learning_rate);
    let mut best = weights.clone();
    let mut best_loss = f64::INFINITY;
    let mut log = TrainingLog::default();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let steps: Vec<&AlignmentObjective> = if batches.is_empty() {
            vec![&full]
        } else {
            batches.iter().collect()
        };
        for obj in steps {
            let (loss, grad) = obj.evaluate(&weights, true)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            adam.update(&mut weights, &grad.expect("gradient requested"))?;
        }
        let train_loss = full.evaluate(&weights, false)?.0;
        let heldout_loss = held.evaluate(&weights, false)?.0;
        if !train_loss.is_finite() || !heldout_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {epoch}: train loss {train_loss}, held-out loss {heldout_loss}"
            )));
        }
        log::debug!("cbl epoch {epoch}: train {train_loss:.6} heldout {heldout_loss:.6}");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            heldout_loss,
        });
        if heldout_loss < best_loss {
            best_loss = heldout_loss;
            best = weights.clone();
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_tolerance {
                log::info!("cbl early stop at epoch {epoch}, best epoch {}", log.best_epoch);
                break;
            }
        }
    }

    Ok((
        BottleneckModel {
            weights: best,
            lineage,
            train_config: cfg.clone(),
        },
        log,
    ))
}

/// `Q = features · weightsᵀ`.
pub fn project_concepts(model: &BottleneckModel, features: &Matrix) -> Result<Matrix> {
    if features.cols() != model.feature_dim() {
        return Err(Error::Dimension(format!(
            "features have {} columns, bottleneck expects {}",
            features.cols(),
            model.feature_dim()
        )));
    }
    features.matmul_transposed(&model.weights)
}

/// Scores each concept on validation data and drops those whose alignment
/// falls below `interp_threshold`; dimensions are renumbered.
pub fn prune_uninterpretable(
    model: &BottleneckModel,
    pool: &ConceptPool,
    val: &EmbeddingBundle,
    interp_threshold: f64,
) -> Result<(BottleneckModel, ConceptPool, Vec<f64>)> {
    model.check_pool(pool)?;
    let p = active_similarity(val, pool)?;
    let q = project_concepts(model, &val.backbone_features)?;
    let scores = alignment_scores(&q, &p, model.train_config.standardize_p)?;
    let (keep, drop): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&k| scores[k] >= interp_threshold);
    if keep.is_empty() {
        return Err(Error::EmptyModel);
    }
    let pruned_pool = pool.remove_active(&drop, RemovalReason::Uninterpretable);
    let mut lineage = model.lineage;
    lineage.pool_fingerprint = pruned_pool.fingerprint();
    let pruned = BottleneckModel {
        weights: model.weights.select_rows(&keep)?,
        lineage,
        train_config: model.train_config.clone(),
    };
    Ok((pruned, pruned_pool, scores))
}

/// Zeroes entries whose magnitude is below `cutoff`.
pub fn apply_sparsity_cutoff(q: &Matrix, cutoff: f64) -> Result<Matrix> {
    if cutoff.is_nan() || cutoff < 0.0 {
        return Err(Error::Input(format!("sparsity cutoff must be >= 0, got {cutoff}")));
    }
    q.map(|v| if f64::from(v.abs()) < cutoff { 0.0 } else { v })
}
