//! Label-free attribution of latents to concept dimensions.
//!
//! The surrogate `g_q(q̃) = ⟨f(q), f(q̃)⟩` turns the vector-valued encoder
//! into a scalar, and integrated gradients from the zero baseline split
//! `g_q(q) − g_q(0)` across the M concept dimensions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_pool::ConceptPool;
use crate::embedding_store::write_atomic;
use crate::artifact::read_file;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::vae::FrozenVae;

/// Deterministic map from concept space to latent space with a
/// vector–Jacobian product.
pub trait Encoder: Sync {
    fn input_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode_mean(&self, q: &[f64]) -> Result<Vec<f64>>;
    /// `J_f(q)ᵀ · cotangent`.
    fn mean_vjp(&self, q: &[f64], cotangent: &[f64]) -> Result<Vec<f64>>;
}

impl Encoder for FrozenVae {
    fn input_dim(&self) -> usize {
        FrozenVae::input_dim(self)
    }

    fn latent_dim(&self) -> usize {
        FrozenVae::latent_dim(self)
    }

    fn encode_mean(&self, q: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(q)?.0)
    }

    fn mean_vjp(&self, q: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        FrozenVae::mean_vjp(self, q, cotangent)
    }
}

/// `f(q) = A q` with `A` stored K × M.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    a: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl LinearEncoder {
    pub fn new(a: &Matrix) -> Self {
        LinearEncoder {
            a: a.to_f64(),
            rows: a.rows(),
            cols: a.cols(),
        }
    }
}

impl Encoder for LinearEncoder {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn latent_dim(&self) -> usize {
        self.rows
    }

    fn encode_mean(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len(q, self.cols)?;
        Ok(self.a.chunks(self.cols).map(|row| dot(row, q)).collect())
    }

    fn mean_vjp(&self, q: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(q, self.cols)?;
        check_len(cotangent, self.rows)?;
        let mut out = vec![0.0; self.cols];
        for (row, c) in self.a.chunks(self.cols).zip(cotangent) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += c * a);
        }
        Ok(out)
    }
}

fn check_len(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension(format!("vector has {} entries, expected {expected}", v.len())));
    }
    Ok(())
}

pub fn surrogate_value(encoder: &dyn Encoder, q_ref: &[f64], q_probe: &[f64]) -> Result<f64> {
    check_len(q_ref, encoder.input_dim())?;
    check_len(q_probe, encoder.input_dim())?;
    Ok(dot(&encoder.encode_mean(q_ref)?, &encoder.encode_mean(q_probe)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub importance: Vec<f64>,
    pub completeness_gap: f64,
    pub steps: usize,
}

/// Integrated gradients of `g_q` from the zero baseline with trapezoidal
/// integration over `steps + 1` equally spaced nodes.
pub fn integrated_gradients(encoder: &dyn Encoder, q: &[f64], steps: usize) -> Result<AttributionResult> {
    if steps < 2 {
        return Err(Error::Input(format!("integrated gradients needs steps ≥ 2, got {steps}")));
    }
    check_len(q, encoder.input_dim())?;
    let f_q = encoder.encode_mean(q)?;
    let mut avg = vec![0.0; q.len()];
    for s in 0..=steps {
        let alpha = s as f64 / steps as f64;
        let weight = if s == 0 || s == steps { 0.5 } else { 1.0 } / steps as f64;
        let point: Vec<f64> = q.iter().map(|v| alpha * v).collect();
        let grad = encoder.mean_vjp(&point, &f_q)?;
        avg.iter_mut().zip(&grad).for_each(|(a, g)| *a += weight * g);
    }
    let importance: Vec<f64> = q.iter().zip(&avg).map(|(q, g)| q * g).collect();
    if let Some(index) = importance.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let zero = vec![0.0; q.len()];
    let delta = dot(&f_q, &f_q) - dot(&f_q, &encoder.encode_mean(&zero)?);
    let completeness_gap = (importance.iter().sum::<f64>() - delta).abs();
    Ok(AttributionResult {
        importance,
        completeness_gap,
        steps,
    })
}

pub fn weighted_concept_vector(q: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(b, q.len())?;
    Ok(q.iter().zip(b).map(|(q, b)| q * b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept: String,
    #[serde(skip)]
    pub dimension: usize,
    pub activation: f64,
    pub importance: f64,
    pub weighted: f64,
    pub negated: bool,
}

impl ConceptEntry {
    pub fn label(&self) -> String {
        if self.negated {
            format!("Not {}", self.concept)
        } else {
            self.concept.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptReport {
    pub entries: Vec<ConceptEntry>,
    pub threshold: f64,
    pub normalized: bool,
}

/// Keeps dimensions whose |b_j·q_j| reaches `threshold` (after dividing by
/// the per-image maximum when `normalize` is set), sorted by magnitude.
pub fn concept_report(q: &[f64], b: &[f64], pool: &ConceptPool, threshold: f64, normalize: bool) -> Result<ConceptReport> {
    if pool.active_count() != q.len() {
        return Err(Error::Dimension(format!(
            "pool has {} active concepts, vector has {}",
            pool.active_count(),
            q.len()
        )));
    }
    let weighted = weighted_concept_vector(q, b)?;
    let scale = if normalize {
        weighted.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        1.0
    };
    let texts = pool.active_texts();
    let mut entries: Vec<ConceptEntry> = weighted
        .iter()
        .enumerate()
        .filter(|(_, w)| scale > 0.0 && w.abs() / scale >= threshold)
        .map(|(j, &w)| ConceptEntry {
            concept: texts[j].to_string(),
            dimension: j,
            activation: q[j],
            importance: b[j],
            weighted: w,
            negated: q[j] < 0.0,
        })
        .collect();
    entries.sort_by(|x, y| {
        y.weighted
            .abs()
            .total_cmp(&x.weighted.abs())
            .then(x.dimension.cmp(&y.dimension))
    });
    Ok(ConceptReport {
        entries,
        threshold,
        normalized: normalize,
    })
}

#[derive(Serialize, Deserialize)]
struct ReportLine {
    image_id: usize,
    threshold: f64,
    normalized: bool,
    entries: Vec<ConceptEntry>,
}

/// One JSON object per image: `{image_id, threshold, normalized, entries: [...]}`.
pub fn report_json(image_id: usize, report: &ConceptReport) -> String {
    serde_json::to_string(&ReportLine {
        image_id,
        threshold: report.threshold,
        normalized: report.normalized,
        entries: report.entries.clone(),
    })
    .expect("report serializes")
}

/// Occurrence counts of rendered concept labels across reports, dropping
/// rows below `min_count`; sorted by count descending, then label.
pub fn concept_frequency(reports: &[ConceptReport], min_count: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in reports {
        for e in &r.entries {
            *counts.entry(e.label()).or_default() += 1;
        }
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

pub fn frequency_tsv(rows: &[(String, usize)]) -> String {
    let mut s = String::from("concept\tcount\n");
    for (concept, count) in rows {
        let _ = writeln!(s, "{concept}\t{count}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeConfig {
    pub steps: usize,
    pub threshold: f64,
    pub normalize: bool,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        AttributeConfig {
            steps: 64,
            threshold: 0.05,
            normalize: false,
        }
    }
}

/// Attributes every row of `q`; rows are independent and results are
/// returned in row order.
pub fn attribute_rows(
    encoder: &dyn Encoder,
    q: &Matrix,
    pool: &ConceptPool,
    cfg: &AttributeConfig,
) -> Result<Vec<(AttributionResult, ConceptReport)>> {
    if q.cols() != encoder.input_dim() {
        return Err(Error::Dimension(format!(
            "concept matrix has {} columns, encoder expects {}",
            q.cols(),
            encoder.input_dim()
        )));
    }
    (0..q.rows())
        .into_par_iter()
        .map(|i| {
            let row = q.row_f64(i);
            let attr = integrated_gradients(encoder, &row, cfg.steps)?;
            let report = concept_report(&row, &attr.importance, pool, cfg.threshold, cfg.normalize)?;
            Ok((attr, report))
        })
        .collect()
}

/// Writes the per-image JSON lines file.
pub fn save_reports(path: impl AsRef<Path>, reports: &[ConceptReport]) -> Result<()> {
    let mut s = String::new();
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&report_json(i, r));
        s.push('\n');
    }
    write_atomic(path.as_ref(), s.as_bytes())
}

/// Reads a file written by [`save_reports`]; entries come back without
/// their dimension index.
pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<ConceptReport>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, e.valid_up_to() as u64, "not UTF-8"))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let parsed: ReportLine =
                serde_json::from_str(line).map_err(|e| Error::format(path, offset, e.to_string()))?;
            out.push(ConceptReport {
                entries: parsed.entries,
                threshold: parsed.threshold,
                normalized: parsed.normalized,
            });
        }
        offset += line.len() as u64;
    }
    Ok(out)
}
