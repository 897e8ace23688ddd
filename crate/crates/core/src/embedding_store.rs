//! `.cemb` matrix files, label files, and per-split embedding bundles.
//!
//! A `.cemb` file is the 4-byte magic `CEMB`, a little-endian `u32` version (1),
//! `u64` rows, `u64` cols, then `rows × cols` little-endian `f32` values in
//! row-major order. Nothing follows the payload.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/clip_text.cemb          M × dc, row k = concept line k
//! <root>/<split>/backbone.cemb   N × d0
//! <root>/<split>/clip_image.cemb N × dc
//! <root>/<split>/labels.txt      one class id per line (optional)
//! <root>/<split>/similarity.cemb N × M precomputed P (optional)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

pub const CEMB_MAGIC: &[u8; 4] = b"CEMB";
pub const CEMB_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 8;

pub const BACKBONE_FILE: &str = "backbone.cemb";
pub const CLIP_IMAGE_FILE: &str = "clip_image.cemb";
pub const CLIP_TEXT_FILE: &str = "clip_text.cemb";
pub const SIMILARITY_FILE: &str = "similarity.cemb";
pub const LABELS_FILE: &str = "labels.txt";

/// Writes `bytes` to `path` through a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Dimension(format!(
            "refusing to write empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * m.as_slice().len());
    out.extend_from_slice(CEMB_MAGIC);
    out.extend_from_slice(&CEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_matrix(m)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Parses a `.cemb` payload; `path` is only used for error messages.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 4 || &bytes[..4] != CEMB_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected CEMB"));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CEMB_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, 8, format!("empty {rows}x{cols} matrix")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, 8, "dimensions overflow"))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::format(path, actual, format!("truncated payload, expected {expected} bytes")));
    }
    if actual > expected {
        return Err(Error::format(path, expected, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for (i, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(path, HEADER_LEN + 4 * i as u64, "non-finite value"));
        }
        data.push(v);
    }
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(LabelVector { labels, num_classes })
    }

    /// Infers `num_classes` as one past the largest label.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        LabelVector { labels, num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let v = trimmed
                .parse::<usize>()
                .map_err(|_| Error::format(path, offset, format!("not a class id: {trimmed:?}")))?;
            labels.push(v);
        }
        offset += line.len() as u64;
    }
    Ok(LabelVector::from_labels(labels))
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    write_atomic(path.as_ref(), s.as_bytes())
}

/// `P[i][j] = image_i · text_j`, optionally after L2-normalizing every row.
pub fn compute_similarity(image_emb: &Matrix, text_emb: &Matrix, l2_normalize: bool) -> Result<Matrix> {
    if image_emb.cols() != text_emb.cols() {
        return Err(Error::Dimension(format!(
            "image embeddings have {} columns, text embeddings {}",
            image_emb.cols(),
            text_emb.cols()
        )));
    }
    let prepare = |m: &Matrix, what: &str| -> Result<Vec<Vec<f64>>> {
        (0..m.rows())
            .map(|r| {
                let mut row = m.row_f64(r);
                if l2_normalize {
                    let n = norm(&row);
                    if n == 0.0 {
                        return Err(Error::Degenerate(format!("{what} row {r} has zero norm")));
                    }
                    row.iter_mut().for_each(|v| *v /= n);
                }
                Ok(row)
            })
            .collect()
    };
    let images = prepare(image_emb, "image")?;
    let texts = prepare(text_emb, "text")?;
    let mut out = Vec::with_capacity(images.len() * texts.len());
    for img in &images {
        for txt in &texts {
            let v = dot(img, txt);
            out.push(if l2_normalize { v.clamp(-1.0, 1.0) } else { v });
        }
    }
    Matrix::from_f64(image_emb.rows(), text_emb.rows(), &out)
}

/// Everything known about one dataset split.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub split_name: String,
    pub backbone_features: Matrix,
    pub clip_image: Option<Matrix>,
    pub clip_text: Option<Matrix>,
    /// N × M over the raw concept list (one column per `clip_text` row).
    pub similarity: Option<Matrix>,
    pub labels: Option<LabelVector>,
}

impl EmbeddingBundle {
    pub fn new(split_name: impl Into<String>, backbone_features: Matrix) -> Self {
        EmbeddingBundle {
            split_name: split_name.into(),
            backbone_features,
            clip_image: None,
            clip_text: None,
            similarity: None,
            labels: None,
        }
    }

    pub fn with_similarity(mut self, similarity: Matrix) -> Result<Self> {
        self.set_similarity(similarity)?;
        Ok(self)
    }

    pub fn set_similarity(&mut self, similarity: Matrix) -> Result<()> {
        if similarity.rows() != self.len() {
            return Err(Error::Dimension(format!(
                "similarity has {} rows, bundle has {}",
                similarity.rows(),
                self.len()
            )));
        }
        self.similarity = Some(similarity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.backbone_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_features.cols()
    }

    /// Loads `<root>/<split>/` plus the shared text embeddings.
    ///
    /// Only the backbone features are mandatory; similarity is read from
    /// `similarity.cemb` when present, otherwise computed from the CLIP matrices.
    pub fn load(root: impl AsRef<Path>, split: &str, l2_normalize: bool) -> Result<Self> {
        let root = root.as_ref();
        let dir = root.join(split);
        let backbone = read_matrix(dir.join(BACKBONE_FILE))?;
        let mut bundle = EmbeddingBundle::new(split, backbone);
        bundle.clip_image = read_optional(&dir.join(CLIP_IMAGE_FILE))?;
        bundle.clip_text = read_optional(&root.join(CLIP_TEXT_FILE))?;
        if let Some(img) = &bundle.clip_image {
            if img.rows() != bundle.len() {
                return Err(Error::Dimension(format!(
                    "{split}: clip_image has {} rows, backbone {}",
                    img.rows(),
                    bundle.len()
                )));
            }
        }
        let labels_path = dir.join(LABELS_FILE);
        if labels_path.exists() {
            let labels = read_labels(&labels_path)?;
            if labels.len() != bundle.len() {
                return Err(Error::Dimension(format!(
                    "{split}: {} labels for {} rows",
                    labels.len(),
                    bundle.len()
                )));
            }
            bundle.labels = Some(labels);
        }
        if let Some(p) = read_optional(&dir.join(SIMILARITY_FILE))? {
            bundle.set_similarity(p)?;
        } else if let (Some(img), Some(txt)) = (&bundle.clip_image, &bundle.clip_text) {
            let p = compute_similarity(img, txt, l2_normalize)?;
            bundle.similarity = Some(p);
        }
        Ok(bundle)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let dir = root.join(&self.split_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_matrix(&self.backbone_features, dir.join(BACKBONE_FILE))?;
        if let Some(img) = &self.clip_image {
            write_matrix(img, dir.join(CLIP_IMAGE_FILE))?;
        }
        if let Some(txt) = &self.clip_text {
            write_matrix(txt, root.join(CLIP_TEXT_FILE))?;
        }
        if let Some(labels) = &self.labels {
            write_labels(&labels.labels, dir.join(LABELS_FILE))?;
        }
        Ok(())
    }

    pub fn require_similarity(&self) -> Result<&Matrix> {
        self.similarity.as_ref().ok_or_else(|| {
            Error::Input(format!(
                "split {:?} has no similarity matrix (needs {CLIP_IMAGE_FILE} + {CLIP_TEXT_FILE} or {SIMILARITY_FILE})",
                self.split_name
            ))
        })
    }

    /// Row concatenation of several splits (features, and similarity when all carry one).
    pub fn merge(name: impl Into<String>, parts: &[&EmbeddingBundle]) -> Result<Self> {
        let features: Vec<&Matrix> = parts.iter().map(|b| &b.backbone_features).collect();
        let mut merged = EmbeddingBundle::new(name, Matrix::vstack(&features)?);
        let sims: Option<Vec<&Matrix>> = parts.iter().map(|b| b.similarity.as_ref()).collect();
        if let Some(sims) = sims {
            merged.similarity = Some(Matrix::vstack(&sims)?);
        }
        Ok(merged)
    }
}

fn read_optional(path: &PathBuf) -> Result<Option<Matrix>> {
    if path.exists() {
        read_matrix(path).map(Some)
    } else {
        Ok(None)
    }
}
