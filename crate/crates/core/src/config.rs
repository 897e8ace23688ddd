//! Pipeline configuration: `key = value` lines grouped by `[section]`.
//!
//! Every key has a default, so an empty file is a complete config. Relative
//! paths resolve against the config file's directory.
//!
//! ```text
//! [pipeline]   dataset, backbone, data_root, concepts, classes, artifacts, seed,
//!              l2_normalize, train_split, heldout_split, eval_split,
//!              vae_splits, embed_splits
//! [filter]     max_chars, dedup_threshold, top_k, activation_cutoff, drop_class_concepts
//! [cbl]        learning_rate, max_epochs, batch_size, early_stop_tolerance,
//!              standardize_p, interp_threshold, sparsity_cutoff
//! [vae]        learning_rate, max_epochs, batch_size, latent_dim, hidden_dim, activation
//! [cluster]    k, restarts, max_iters, tol
//! [probe]      learning_rate, epochs, batch_size
//! [attribute]  steps, threshold, normalize, min_count, limit
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::attribution::AttributeConfig;
use crate::cbl::TrainConfig;
use crate::concept_pool::FilterConfig;
use crate::error::{Error, Result};
use crate::evaluation::{KMeansConfig, ProbeConfig};
use crate::vae::{Activation, VaeTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: String,
    pub backbone: String,
    pub data_root: PathBuf,
    pub concepts: PathBuf,
    pub classes: Option<PathBuf>,
    pub artifacts: PathBuf,
    pub seed: u64,
    pub l2_normalize: bool,
    pub train_split: String,
    pub heldout_split: String,
    pub eval_split: String,
    /// Splits whose concept vectors are pooled for VAE training.
    pub vae_splits: Vec<String>,
    pub embed_splits: Vec<String>,
    pub filter: FilterConfig,
    pub cbl: TrainConfig,
    pub interp_threshold: f64,
    pub sparsity_cutoff: f64,
    pub vae: VaeTrainConfig,
    /// Cluster count; 0 means the number of classes in the eval labels.
    pub cluster_k: usize,
    pub kmeans: KMeansConfig,
    pub probe: ProbeConfig,
    pub attribute: AttributeConfig,
    pub min_count: usize,
    /// Attribute at most this many rows; 0 means all.
    pub attribute_limit: usize,
}

/// Pipeline stages whose settings feed an artifact's config hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Filter,
    Cbl,
    Vae,
}

impl PipelineConfig {
    /// Defaults rooted at `base` (data in `base`, artifacts in `base/artifacts`).
    pub fn with_base(base: &Path) -> Self {
        PipelineConfig {
            dataset: "dataset".into(),
            backbone: "backbone".into(),
            data_root: base.to_path_buf(),
            concepts: base.join("concepts.txt"),
            classes: None,
            artifacts: base.join("artifacts"),
            seed: 42,
            l2_normalize: true,
            train_split: "train".into(),
            heldout_split: "test".into(),
            eval_split: "test".into(),
            vae_splits: vec!["train".into(), "test".into()],
            embed_splits: vec!["train".into(), "test".into()],
            filter: FilterConfig::default(),
            cbl: TrainConfig::default(),
            interp_threshold: 0.45,
            sparsity_cutoff: 0.0,
            vae: VaeTrainConfig::default(),
            cluster_k: 0,
            kmeans: KMeansConfig::default(),
            probe: ProbeConfig::default(),
            attribute: AttributeConfig::default(),
            min_count: 5,
            attribute_limit: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::with_base(base);
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("pipeline");
            for (key, value) in props.iter() {
                cfg.set(section, key, value.trim(), base)?;
            }
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates one seed to every phase.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.cbl.seed = seed;
        self.vae.seed = seed;
        self.kmeans.seed = seed;
        self.probe.seed = seed;
    }

    fn set(&mut self, section: &str, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| base.join(v);
        match (section, key) {
            ("pipeline", "dataset") => self.dataset = v.into(),
            ("pipeline", "backbone") => self.backbone = v.into(),
            ("pipeline", "data_root") => self.data_root = path(v),
            ("pipeline", "concepts") => self.concepts = path(v),
            ("pipeline", "classes") => self.classes = (!v.is_empty()).then(|| path(v)),
            ("pipeline", "artifacts") => self.artifacts = path(v),
            ("pipeline", "seed") => self.seed = parse(section, key, v)?,
            ("pipeline", "l2_normalize") => self.l2_normalize = parse_bool(section, key, v)?,
            ("pipeline", "train_split") => self.train_split = v.into(),
            ("pipeline", "heldout_split") => self.heldout_split = v.into(),
            ("pipeline", "eval_split") => self.eval_split = v.into(),
            ("pipeline", "vae_splits") => self.vae_splits = parse_list(v),
            ("pipeline", "embed_splits") => self.embed_splits = parse_list(v),

            ("filter", "max_chars") => self.filter.max_chars = parse(section, key, v)?,
            ("filter", "dedup_threshold") => self.filter.dedup_threshold = parse(section, key, v)?,
            ("filter", "top_k") => self.filter.top_k = parse(section, key, v)?,
            ("filter", "activation_cutoff") => self.filter.activation_cutoff = parse(section, key, v)?,
            ("filter", "drop_class_concepts") => self.filter.drop_class_concepts = parse_bool(section, key, v)?,

            ("cbl", "learning_rate") => self.cbl.learning_rate = parse(section, key, v)?,
            ("cbl", "max_epochs") => self.cbl.max_epochs = parse(section, key, v)?,
            ("cbl", "batch_size") => self.cbl.batch_size = parse(section, key, v)?,
            ("cbl", "early_stop_tolerance") => self.cbl.early_stop_tolerance = parse(section, key, v)?,
            ("cbl", "standardize_p") => self.cbl.standardize_p = parse_bool(section, key, v)?,
            ("cbl", "interp_threshold") => self.interp_threshold = parse(section, key, v)?,
            ("cbl", "sparsity_cutoff") => self.sparsity_cutoff = parse(section, key, v)?,

            ("vae", "learning_rate") => self.vae.learning_rate = parse(section, key, v)?,
            ("vae", "max_epochs") => self.vae.max_epochs = parse(section, key, v)?,
            ("vae", "batch_size") => self.vae.batch_size = parse(section, key, v)?,
            ("vae", "latent_dim") => self.vae.latent_dim = parse(section, key, v)?,
            ("vae", "hidden_dim") => self.vae.hidden_dim = parse(section, key, v)?,
            ("vae", "activation") => self.vae.activation = Activation::from_str(v)?,

            ("cluster", "k") => self.cluster_k = parse(section, key, v)?,
            ("cluster", "restarts") => self.kmeans.restarts = parse(section, key, v)?,
            ("cluster", "max_iters") => self.kmeans.max_iters = parse(section, key, v)?,
            ("cluster", "tol") => self.kmeans.tol = parse(section, key, v)?,

            ("probe", "learning_rate") => self.probe.learning_rate = parse(section, key, v)?,
            ("probe", "epochs") => self.probe.epochs = parse(section, key, v)?,
            ("probe", "batch_size") => self.probe.batch_size = parse(section, key, v)?,

            ("attribute", "steps") => self.attribute.steps = parse(section, key, v)?,
            ("attribute", "threshold") => self.attribute.threshold = parse(section, key, v)?,
            ("attribute", "normalize") => self.attribute.normalize = parse_bool(section, key, v)?,
            ("attribute", "min_count") => self.min_count = parse(section, key, v)?,
            ("attribute", "limit") => self.attribute_limit = parse(section, key, v)?,

            _ => return Err(Error::Config(format!("unknown key [{section}] {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.cbl.validate()?;
        self.vae.validate()?;
        if self.vae_splits.is_empty() {
            return Err(Error::Config("vae_splits must name at least one split".into()));
        }
        if self.sparsity_cutoff.is_nan() || self.sparsity_cutoff < 0.0 {
            return Err(Error::Config("sparsity_cutoff must be ≥ 0".into()));
        }
        if self.attribute.steps < 2 {
            return Err(Error::Config("attribute steps must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` text of every setting up to `phase` (paths excluded,
    /// so relocating a dataset keeps hashes stable).
    pub fn canonical(&self, phase: Phase) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset={}\nseed={}\nl2_normalize={}", self.dataset, self.seed, self.l2_normalize);
        let _ = writeln!(s, "train_split={}\nheldout_split={}", self.train_split, self.heldout_split);
        let f = &self.filter;
        let _ = writeln!(
            s,
            "filter.max_chars={}\nfilter.dedup_threshold={:e}\nfilter.top_k={}\nfilter.activation_cutoff={:e}\nfilter.drop_class_concepts={}",
            f.max_chars, f.dedup_threshold, f.top_k, f.activation_cutoff, f.drop_class_concepts
        );
        if phase >= Phase::Cbl {
            let c = &self.cbl;
            let _ = writeln!(
                s,
                "cbl.learning_rate={:e}\ncbl.max_epochs={}\ncbl.batch_size={}\ncbl.early_stop_tolerance={}\ncbl.standardize_p={}\ncbl.interp_threshold={:e}\ncbl.sparsity_cutoff={:e}",
                c.learning_rate, c.max_epochs, c.batch_size, c.early_stop_tolerance, c.standardize_p,
                self.interp_threshold, self.sparsity_cutoff
            );
        }
        if phase >= Phase::Vae {
            let v = &self.vae;
            let _ = writeln!(
                s,
                "vae.splits={}\nvae.learning_rate={:e}\nvae.max_epochs={}\nvae.batch_size={}\nvae.latent_dim={}\nvae.hidden_dim={}\nvae.activation={:?}",
                self.vae_splits.join(","),
                v.learning_rate, v.max_epochs, v.batch_size, v.latent_dim, v.hidden_dim, v.activation
            );
        }
        s
    }

    pub fn config_hash(&self, phase: Phase) -> [u8; 32] {
        Sha256::digest(self.canonical(phase).as_bytes()).into()
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
