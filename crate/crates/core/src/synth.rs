//! Planted-cluster dataset generator for smoke tests and demos.
//!
//! Each class owns a block of concepts. An image's concept strengths are
//! large on its class's block and near zero elsewhere; its vision-language
//! image embedding is those strengths plus noise (text embeddings are the
//! standard basis, so P is the normalized strength vector), and its backbone
//! features are a fixed random linear map of the strengths plus noise.

use std::fs;
use std::path::Path;

use crate::embedding_store::{write_atomic, EmbeddingBundle, LabelVector};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, GaussianStream, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub classes: usize,
    pub concepts_per_class: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Backbone feature scale; larger values make concept vectors larger.
    pub feature_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    /// 3 classes × 4 concepts, d0 = 16, 600 rows split evenly into train and test.
    fn default() -> Self {
        FixtureSpec {
            classes: 3,
            concepts_per_class: 4,
            feature_dim: 16,
            train_per_class: 100,
            test_per_class: 100,
            feature_scale: 3.0,
            noise: 0.05,
            seed: 42,
        }
    }
}

const CLASS_NAMES: [&str; 8] = ["heron", "tractor", "lantern", "otter", "violin", "glacier", "kettle", "maple"];
const TRAITS: [&str; 8] = [
    "long slender legs",
    "large rear tyres",
    "warm flickering glow",
    "sleek wet fur",
    "carved wooden body",
    "vast blue ice",
    "curved spout",
    "lobed red leaves",
];
const QUALIFIERS: [&str; 4] = ["", "visible ", "prominent ", "distinct "];

impl FixtureSpec {
    pub fn concept_count(&self) -> usize {
        self.classes * self.concepts_per_class
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|c| match CLASS_NAMES.get(c) {
                Some(name) => name.to_string(),
                None => format!("class {c}"),
            })
            .collect()
    }

    pub fn concept_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in 0..self.classes {
            for j in 0..self.concepts_per_class {
                let base = TRAITS.get(c).copied().unwrap_or("trait");
                let name = match QUALIFIERS.get(j) {
                    Some(q) => format!("{q}{base}"),
                    None => format!("{base} {j}"),
                };
                out.push(if c >= TRAITS.len() { format!("{name} {c}") } else { name });
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.concepts_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Input("fixture needs ≥ 2 classes, ≥ 1 concept per class, d0 ≥ 1".into()));
        }
        if self.train_per_class < 2 || self.test_per_class < 2 {
            return Err(Error::Input("fixture needs ≥ 2 rows per class in each split".into()));
        }
        Ok(())
    }
}

fn split(spec: &FixtureSpec, name: &str, per_class: usize, mixing: &[f64], stream: u64) -> Result<EmbeddingBundle> {
    let m = spec.concept_count();
    let d0 = spec.feature_dim;
    let n = per_class * spec.classes;
    let mut rng = GaussianStream::new(derive_seed(spec.seed, &[stream]));
    let mut strengths = vec![0.0; n * m];
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for i in 0..per_class {
            let row = c * per_class + i;
            labels.push(c);
            for j in 0..m {
                let own = j / spec.concepts_per_class == c;
                let v = if own {
                    0.6 + 0.15 * rng.normal()
                } else {
                    0.05 * rng.normal().abs()
                };
                strengths[row * m + j] = v;
            }
        }
    }
    let image: Vec<f64> = strengths.iter().map(|s| s + spec.noise * rng.normal()).collect();
    let mut features = vec![0.0; n * d0];
    for r in 0..n {
        for f in 0..d0 {
            let mut acc = 0.0;
            for j in 0..m {
                acc += strengths[r * m + j] * mixing[j * d0 + f];
            }
            features[r * d0 + f] = spec.feature_scale * acc + spec.noise * rng.normal();
        }
    }
    let mut bundle = EmbeddingBundle::new(name, Matrix::from_f64(n, d0, &features)?);
    bundle.clip_image = Some(Matrix::from_f64(n, m, &image)?);
    bundle.labels = Some(LabelVector::new(labels, spec.classes)?);
    Ok(bundle)
}

/// Writes `concepts.txt`, `classes.txt`, `clip_text.cemb` and the `train/`
/// and `test/` split directories under `dir`.
pub fn write_fixture(dir: impl AsRef<Path>, spec: &FixtureSpec) -> Result<()> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = spec.concept_count();
    let d0 = spec.feature_dim;
    let mut rng = GaussianStream::new(derive_seed(spec.seed, &[0]));
    let scale = 1.0 / (m as f64).sqrt();
    let mixing: Vec<f64> = rng.normals(m * d0).into_iter().map(|v| v * scale).collect();

    let mut train = split(spec, "train", spec.train_per_class, &mixing, 1)?;
    train.clip_text = Some(Matrix::identity(m));
    train.save(dir)?;
    split(spec, "test", spec.test_per_class, &mixing, 2)?.save(dir)?;

    let concepts = spec.concept_names().join("\n") + "\n";
    write_atomic(&dir.join("concepts.txt"), concepts.as_bytes())?;
    let classes = spec.class_names().join("\n") + "\n";
    write_atomic(&dir.join("classes.txt"), classes.as_bytes())?;
    Ok(())
}

/// Config for the planted fixture: table defaults except a desk-sized VAE.
pub const FIXTURE_CONFIG: &str = "\
[pipeline]
dataset = synthetic
backbone = planted
classes = classes.txt

[vae]
hidden_dim = 64
latent_dim = 8
learning_rate = 1e-3
batch_size = 64
";
