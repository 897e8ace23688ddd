//! Concept list parsing, class tagging, and the pre-training filters.
//!
//! Every filter takes a pool and returns a new one. Removed concepts stay in
//! the list with a reason so the final artifact can explain each drop; the
//! active concepts, in order, define the dimensions of every concept vector.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::embedding_store::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Matrix};

pub const CLASS_PREFIX: &str = "class:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RemovalReason {
    TooLong,
    Duplicate,
    LowActivation,
    Uninterpretable,
    /// Dropped by the remove-class-concepts ablation.
    ClassConcept,
}

impl RemovalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalReason::TooLong => "too_long",
            RemovalReason::Duplicate => "duplicate",
            RemovalReason::LowActivation => "low_activation",
            RemovalReason::Uninterpretable => "uninterpretable",
            RemovalReason::ClassConcept => "class_concept",
        }
    }
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RemovalReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "too_long" => RemovalReason::TooLong,
            "duplicate" => RemovalReason::Duplicate,
            "low_activation" => RemovalReason::LowActivation,
            "uninterpretable" => RemovalReason::Uninterpretable,
            "class_concept" => RemovalReason::ClassConcept,
            other => return Err(Error::Input(format!("unknown removal reason {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptStatus {
    Active,
    Removed(RemovalReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub text: String,
    pub class_tag: Option<String>,
    pub status: ConceptStatus,
    /// Index of the concept among the non-blank lines of the source file;
    /// this is the row of the matching text embedding.
    pub source_row: usize,
}

impl Concept {
    pub fn is_active(&self) -> bool {
        self.status == ConceptStatus::Active
    }
}

/// SHA-256 over the ordered active concept list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolFingerprint(pub [u8; 32]);

impl PoolFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for PoolFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptPool {
    concepts: Vec<Concept>,
}

impl ConceptPool {
    /// Parses concept lines; blank lines are skipped and exact duplicates
    /// collapse onto their first occurrence.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut concepts = Vec::new();
        let mut seen = HashSet::new();
        let mut source_row = 0;
        for raw in lines {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let row = source_row;
            source_row += 1;
            let (text, class_tag) = match line.strip_prefix(CLASS_PREFIX) {
                Some(rest) => {
                    let t = rest.trim().replace('\t', " ");
                    (t.clone(), Some(t))
                }
                None => (line.replace('\t', " "), None),
            };
            if text.is_empty() || !seen.insert(text.clone()) {
                continue;
            }
            concepts.push(Concept {
                text,
                class_tag,
                status: ConceptStatus::Active,
                source_row: row,
            });
        }
        if concepts.is_empty() {
            return Err(Error::EmptyPool("no concepts in input".into()));
        }
        Ok(ConceptPool { concepts })
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn active(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(|c| c.is_active())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn active_texts(&self) -> Vec<&str> {
        self.active().map(|c| c.text.as_str()).collect()
    }

    pub fn active_source_rows(&self) -> Vec<usize> {
        self.active().map(|c| c.source_row).collect()
    }

    /// Display string for active dimension `k`.
    pub fn active_text(&self, k: usize) -> Option<&str> {
        self.active().nth(k).map(|c| c.text.as_str())
    }

    pub fn fingerprint(&self) -> PoolFingerprint {
        let mut h = Sha256::new();
        for c in self.active() {
            h.update(c.text.as_bytes());
            h.update([0u8]);
            if let Some(tag) = &c.class_tag {
                h.update(tag.as_bytes());
            }
            h.update(b"\n");
        }
        PoolFingerprint(h.finalize().into())
    }

    /// Marks active dimensions (indices into the active list) as removed.
    pub fn remove_active(&self, dims: &[usize], reason: RemovalReason) -> ConceptPool {
        let drop: HashSet<usize> = dims.iter().copied().collect();
        let mut out = self.clone();
        for (k, c) in out.concepts.iter_mut().filter(|c| c.is_active()).enumerate() {
            if drop.contains(&k) {
                c.status = ConceptStatus::Removed(reason);
            }
        }
        out
    }

    /// Rows of a full text-embedding matrix belonging to the active concepts.
    pub fn select_text_rows(&self, text_emb_full: &Matrix) -> Result<Matrix> {
        text_emb_full.select_rows(&self.active_source_rows())
    }

    /// Columns of a full similarity matrix belonging to the active concepts.
    pub fn select_similarity_cols(&self, similarity_full: &Matrix) -> Result<Matrix> {
        similarity_full.select_cols(&self.active_source_rows())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("source_row\ttext\tclass_tag\tstatus\n");
        for c in &self.concepts {
            let status = match c.status {
                ConceptStatus::Active => "active".to_string(),
                ConceptStatus::Removed(r) => format!("removed:{r}"),
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.source_row,
                c.text,
                c.class_tag.as_deref().unwrap_or(""),
                status
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut concepts = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Input(format!("pool line {}: expected 4 fields", n + 1)));
            }
            let source_row = fields[0]
                .parse()
                .map_err(|_| Error::Input(format!("pool line {}: bad source row", n + 1)))?;
            let status = match fields[3] {
                "active" => ConceptStatus::Active,
                s => match s.strip_prefix("removed:") {
                    Some(r) => ConceptStatus::Removed(r.parse()?),
                    None => return Err(Error::Input(format!("pool line {}: bad status {s:?}", n + 1))),
                },
            };
            concepts.push(Concept {
                text: fields[1].to_string(),
                class_tag: (!fields[2].is_empty()).then(|| fields[2].to_string()),
                status,
                source_row,
            });
        }
        if concepts.is_empty() {
            return Err(Error::EmptyPool("pool file lists no concepts".into()));
        }
        Ok(ConceptPool { concepts })
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_tsv().as_bytes())
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Active concepts, one per line.
    pub fn filtered_txt(&self) -> String {
        self.active().map(|c| format!("{}\n", c.text)).collect()
    }

    /// `concept<TAB>reason` for every removed concept, in pool order.
    pub fn removals_tsv(&self) -> String {
        let mut s = String::from("concept\treason\n");
        for c in &self.concepts {
            if let ConceptStatus::Removed(r) = c.status {
                s.push_str(&format!("{}\t{}\n", c.text, r));
            }
        }
        s
    }
}

pub fn load_concepts(path: impl AsRef<Path>) -> Result<ConceptPool> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ConceptPool::from_lines(text.lines())
}

/// Removes concepts longer than `max_chars` Unicode scalar values.
pub fn filter_length(pool: &ConceptPool, max_chars: usize) -> ConceptPool {
    let mut out = pool.clone();
    for c in out.concepts.iter_mut().filter(|c| c.is_active()) {
        if c.text.chars().count() > max_chars {
            c.status = ConceptStatus::Removed(RemovalReason::TooLong);
        }
    }
    out
}

/// Tags concepts whose lowercase text contains a lowercase class name.
/// Concepts already tagged keep their tag.
pub fn tag_class_concepts(pool: &ConceptPool, class_names: &[String]) -> ConceptPool {
    let lowered: Vec<(String, &String)> = class_names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| (n.trim().to_lowercase(), n))
        .collect();
    let mut out = pool.clone();
    for c in out.concepts.iter_mut().filter(|c| c.class_tag.is_none()) {
        let text = c.text.to_lowercase();
        if let Some((_, name)) = lowered.iter().find(|(l, _)| text.contains(l.as_str())) {
            c.class_tag = Some(name.trim().to_string());
        }
    }
    out
}

/// Ablation: remove every class-tagged concept.
pub fn drop_class_concepts(pool: &ConceptPool) -> ConceptPool {
    let mut out = pool.clone();
    for c in out.concepts.iter_mut().filter(|c| c.is_active() && c.class_tag.is_some()) {
        c.status = ConceptStatus::Removed(RemovalReason::ClassConcept);
    }
    out
}

/// Greedy in-order dedup: a concept goes when its cosine with any earlier
/// kept concept exceeds `threshold`. Class-tagged concepts are never removed.
///
/// `text_emb` row `k` belongs to active concept `k`.
pub fn dedup_by_similarity(pool: &ConceptPool, text_emb: &Matrix, threshold: f64) -> Result<ConceptPool> {
    let active = pool.active_count();
    if text_emb.rows() != active {
        return Err(Error::Dimension(format!(
            "{} text embedding rows for {active} active concepts",
            text_emb.rows()
        )));
    }
    let mut remove = Vec::new();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for (k, c) in pool.active().enumerate() {
        let row = text_emb.row_f64(k);
        let mut duplicate = false;
        if c.class_tag.is_none() {
            for earlier in &kept {
                if cosine_similarity(&row, earlier)? > threshold {
                    duplicate = true;
                    break;
                }
            }
        }
        if duplicate {
            remove.push(k);
        } else {
            kept.push(row);
        }
    }
    Ok(pool.remove_active(&remove, RemovalReason::Duplicate))
}

/// Removes concept `k` when the mean of the `top_k` largest entries of
/// `similarity[:, k]` falls below `cutoff`. Uses every row when there are fewer.
pub fn filter_low_activation(pool: &ConceptPool, similarity: &Matrix, top_k: usize, cutoff: f64) -> Result<ConceptPool> {
    let active = pool.active_count();
    if similarity.cols() != active {
        return Err(Error::Dimension(format!(
            "similarity has {} columns for {active} active concepts",
            similarity.cols()
        )));
    }
    let mut remove = Vec::new();
    for k in 0..active {
        let mut col = similarity.column_f64(k);
        col.sort_by(|a, b| b.total_cmp(a));
        let take = top_k.max(1).min(col.len());
        if take == 0 {
            continue;
        }
        let mean = col[..take].iter().sum::<f64>() / take as f64;
        if mean < cutoff {
            remove.push(k);
        }
    }
    Ok(pool.remove_active(&remove, RemovalReason::LowActivation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub max_chars: usize,
    pub dedup_threshold: f64,
    pub top_k: usize,
    pub activation_cutoff: f64,
    pub drop_class_concepts: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_chars: 30,
            dedup_threshold: 0.9,
            top_k: 5,
            activation_cutoff: 0.25,
            drop_class_concepts: false,
        }
    }
}

/// Length cut, class tagging, similarity dedup, then the activation cutoff.
///
/// `text_emb_full` and `similarity_full` are indexed by source row, i.e. they
/// cover every non-blank line of the concept file.
pub fn filter_pipeline(
    pool: &ConceptPool,
    class_names: &[String],
    text_emb_full: &Matrix,
    similarity_full: &Matrix,
    cfg: &FilterConfig,
) -> Result<ConceptPool> {
    let pool = filter_length(pool, cfg.max_chars);
    let mut pool = tag_class_concepts(&pool, class_names);
    if cfg.drop_class_concepts {
        pool = drop_class_concepts(&pool);
    }
    let pool = dedup_by_similarity(&pool, &pool.select_text_rows(text_emb_full)?, cfg.dedup_threshold)?;
    let sim = pool.select_similarity_cols(similarity_full)?;
    let pool = filter_low_activation(&pool, &sim, cfg.top_k, cfg.activation_cutoff)?;
    if pool.active_count() == 0 {
        return Err(Error::EmptyPool("every concept was filtered out".into()));
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(lines: &[&str]) -> ConceptPool {
        ConceptPool::from_lines(lines.iter().copied()).unwrap()
    }

    #[test]
    fn load_collapses_duplicates_and_reads_tags() {
        let p = pool(&["wheel", "", "wheel"]);
        assert_eq!(p.active_count(), 1);
        let p = pool(&["class:airplane", "wings"]);
        assert_eq!(p.active_count(), 2);
        assert_eq!(p.concepts()[0].class_tag.as_deref(), Some("airplane"));
        assert_eq!(p.concepts()[0].text, "airplane");
        assert_eq!(p.concepts()[1].class_tag, None);
        assert_eq!(p.concepts()[1].source_row, 1);
        assert!(matches!(ConceptPool::from_lines(["", "  "]), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn source_rows_skip_blank_lines_only() {
        let p = pool(&["a", "", "b", "a", "c"]);
        assert_eq!(p.active_source_rows(), vec![0, 1, 3]);
    }

    #[test]
    fn length_boundary_is_strict() {
        let thirty = "a".repeat(30);
        let thirty_one = "b".repeat(31);
        let p = filter_length(&pool(&[&thirty, &thirty_one]), 30);
        assert_eq!(p.active_texts(), vec![thirty.as_str()]);
        assert_eq!(p.concepts()[1].status, ConceptStatus::Removed(RemovalReason::TooLong));
        // Counted in scalar values, not bytes.
        let accented = "é".repeat(30);
        assert_eq!(filter_length(&pool(&[&accented]), 30).active_count(), 1);
    }

    #[test]
    fn length_filter_mixed_fixture() {
        let lines = [
            "red wings",
            "a jet engine mounted under each wing",
            "propeller",
            "long wide body with many oval windows",
            "tail fin",
            "landing gear",
            "white fuselage",
            "cockpit windows",
            "runway with painted markings and lights",
            "contrail",
        ];
        assert_eq!(filter_length(&pool(&lines), 30).active_count(), 7);
    }

    #[test]
    fn class_tagging_uses_case_insensitive_substring() {
        let classes = vec!["airplane".to_string(), "Cat".to_string()];
        let p = tag_class_concepts(&pool(&["airplane", "jet engine", "a small cat"]), &classes);
        assert_eq!(p.concepts()[0].class_tag.as_deref(), Some("airplane"));
        assert_eq!(p.concepts()[1].class_tag, None);
        assert_eq!(p.concepts()[2].class_tag.as_deref(), Some("Cat"));
    }

    #[test]
    fn dedup_examples() {
        let p = pool(&["a", "b"]);
        let same = Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = dedup_by_similarity(&p, &same, 0.9).unwrap();
        assert_eq!(out.active_texts(), vec!["a"]);
        let orth = Matrix::identity(2);
        assert_eq!(dedup_by_similarity(&p, &orth, 0.9).unwrap().active_count(), 2);
        assert!(dedup_by_similarity(&p, &Matrix::identity(3), 0.9).is_err());
    }

    #[test]
    fn dedup_never_removes_tagged() {
        let p = tag_class_concepts(&pool(&["plane", "airplane"]), &["airplane".to_string()]);
        let same = Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(dedup_by_similarity(&p, &same, 0.9).unwrap().active_count(), 2);
    }

    /// Greedy keep-set by brute force over the full pairwise cosine table.
    fn greedy_oracle(emb: &[Vec<f64>], threshold: f64) -> Vec<usize> {
        let cos = |a: &Vec<f64>, b: &Vec<f64>| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut kept: Vec<usize> = Vec::new();
        for i in 0..emb.len() {
            if kept.iter().all(|&j| cos(&emb[i], &emb[j]) <= threshold) {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn dedup_chain_matches_greedy_oracle() {
        // Consecutive pairs: cos(0,1)=0.95, cos(1,2)=0.5, cos(2,3)=0.91.
        let a = [1.0f64, 0.0, 0.0, 0.0];
        let b = [0.95f64, (1.0f64 - 0.95 * 0.95).sqrt(), 0.0, 0.0];
        let c0 = 0.3f64;
        let c1 = (0.5 - 0.95 * c0) / b[1];
        let c = [c0, c1, (1.0 - c0 * c0 - c1 * c1).sqrt(), 0.0];
        let e = (1.0f64 - 0.91 * 0.91).sqrt();
        let d = [0.91 * c[0], 0.91 * c[1], 0.91 * c[2], e];
        let rows = [a, b, c, d];
        let emb = Matrix::from_rows(&rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect::<Vec<_>>())
            .unwrap();
        let rows64: Vec<Vec<f64>> = (0..4).map(|r| emb.row_f64(r)).collect();
        let p = pool(&["w", "x", "y", "z"]);
        let out = dedup_by_similarity(&p, &emb, 0.9).unwrap();
        let kept: Vec<usize> = out.active().map(|c| c.source_row).collect();
        assert_eq!(kept, greedy_oracle(&rows64, 0.9));
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn low_activation_examples() {
        let p = pool(&["hi", "zero", "spiky"]);
        let col_hi = [0.3f32; 6];
        let col_zero = [0.0f32; 6];
        let col_spiky = [0.5f32, 0.1, 0.1, 0.1, 0.1, 0.1];
        let mut data = Vec::new();
        for i in 0..6 {
            data.extend([col_hi[i], col_zero[i], col_spiky[i]]);
        }
        let sim = Matrix::new(6, 3, data).unwrap();
        let out = filter_low_activation(&p, &sim, 5, 0.25).unwrap();
        assert_eq!(out.active_texts(), vec!["hi"]);
        // Fewer rows than top_k: mean over all rows.
        let small = Matrix::new(2, 1, vec![0.4, 0.2]).unwrap();
        assert_eq!(filter_low_activation(&pool(&["q"]), &small, 5, 0.25).unwrap().active_count(), 1);
    }

    #[test]
    fn tsv_round_trip_and_fingerprint() {
        let p = tag_class_concepts(&pool(&["airplane", "wings", "x".repeat(40).as_str()]), &["airplane".into()]);
        let p = filter_length(&p, 30);
        let back = ConceptPool::from_tsv(&p.to_tsv()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.fingerprint(), p.fingerprint());
        let other = p.remove_active(&[1], RemovalReason::Uninterpretable);
        assert_ne!(other.fingerprint(), p.fingerprint());
        assert!(p.removals_tsv().contains("too_long"));
        assert_eq!(p.filtered_txt(), "airplane\nwings\n");
    }

    #[test]
    fn drop_class_concepts_removes_tagged() {
        let p = tag_class_concepts(&pool(&["airplane", "wings"]), &["airplane".into()]);
        let p = drop_class_concepts(&p);
        assert_eq!(p.active_texts(), vec!["wings"]);
    }
}
