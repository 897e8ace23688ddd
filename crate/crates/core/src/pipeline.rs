//! Artifact-directory orchestration behind the `ceir` subcommands.
//!
//! Each step reads its inputs from the data root and the artifact directory,
//! verifies the lineage of any model it loads, and writes its outputs
//! atomically. A [`Workspace`] holds an exclusive lock on the artifact
//! directory for its lifetime.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::artifact::Lineage;
use crate::attribution::{attribute_rows, concept_frequency, frequency_tsv, load_reports, save_reports, ConceptReport};
use crate::cbl::{apply_sparsity_cutoff, project_concepts, prune_uninterpretable, train_projection, BottleneckModel};
use crate::concept_pool::{filter_pipeline, load_concepts, ConceptPool};
use crate::config::{Phase, PipelineConfig};
use crate::embedding_store::{read_matrix, write_atomic, write_matrix, EmbeddingBundle, LabelVector, CLIP_TEXT_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_clustering, linear_probe, EvalReport};
use crate::numerics::Matrix;
use crate::vae::{latent_representation, train_vae, VaeModel};

pub const LOCK_FILE: &str = ".lock";
pub const POOL_FILE: &str = "pool.tsv";
pub const FILTERED_FILE: &str = "concepts.filtered.txt";
pub const REMOVALS_FILE: &str = "removals.tsv";
pub const CBL_MODEL_FILE: &str = "cbl.model";
pub const CBL_LOG_FILE: &str = "cbl_log.csv";
pub const PRUNE_SCORES_FILE: &str = "prune_scores.tsv";
pub const VAE_MODEL_FILE: &str = "vae.model";
pub const VAE_LOG_FILE: &str = "vae_log.csv";

pub struct Workspace {
    cfg: PipelineConfig,
    _lock: File,
}

impl Workspace {
    /// Creates the artifact directory if needed and locks it; blocks while
    /// another process holds the lock.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = &cfg.artifacts;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(Workspace { cfg, _lock: lock })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.artifacts.join(name)
    }

    pub fn cluster_report_path(&self, ext: &str) -> PathBuf {
        self.artifact(&format!("cluster_{}.{ext}", self.cfg.eval_split))
    }

    pub fn probe_report_path(&self, ext: &str) -> PathBuf {
        self.artifact(&format!("probe_{}.{ext}", self.cfg.eval_split))
    }

    pub fn reports_path(&self) -> PathBuf {
        self.artifact(&format!("reports_{}.jsonl", self.cfg.eval_split))
    }

    pub fn frequency_path(&self) -> PathBuf {
        self.artifact(&format!("frequency_{}.tsv", self.cfg.eval_split))
    }

    fn lineage(&self, pool: &ConceptPool, phase: Phase) -> Lineage {
        Lineage::new(pool.fingerprint(), self.cfg.config_hash(phase), self.cfg.seed)
    }

    fn check_lineage(&self, what: &str, found: &Lineage, pool: &ConceptPool, phase: Phase) -> Result<()> {
        if found.pool_fingerprint != pool.fingerprint() {
            return Err(Error::Lineage(format!(
                "{what} was trained on pool {}, current pool is {}; retrain it",
                found.pool_fingerprint,
                pool.fingerprint()
            )));
        }
        let expected = self.lineage(pool, phase);
        if found.config_hash != expected.config_hash || found.seed != expected.seed {
            return Err(Error::Lineage(format!(
                "{what} was produced with config {} seed {}, current config is {} seed {}; retrain it",
                found.config_hash_hex(),
                found.seed,
                expected.config_hash_hex(),
                expected.seed
            )));
        }
        Ok(())
    }

    fn load_split(&self, split: &str) -> Result<EmbeddingBundle> {
        EmbeddingBundle::load(&self.cfg.data_root, split, self.cfg.l2_normalize)
    }

    pub fn load_pool(&self) -> Result<ConceptPool> {
        let path = self.artifact(POOL_FILE);
        if !path.exists() {
            return Err(Error::Input(format!("{} not found; run filter-concepts first", path.display())));
        }
        ConceptPool::load_tsv(path)
    }

    fn save_pool(&self, pool: &ConceptPool) -> Result<()> {
        pool.save_tsv(self.artifact(POOL_FILE))?;
        write_atomic(&self.artifact(FILTERED_FILE), pool.filtered_txt().as_bytes())?;
        write_atomic(&self.artifact(REMOVALS_FILE), pool.removals_tsv().as_bytes())
    }

    pub fn load_cbl(&self, pool: &ConceptPool) -> Result<BottleneckModel> {
        let model = BottleneckModel::load(self.artifact(CBL_MODEL_FILE))?;
        model.check_pool(pool)?;
        self.check_lineage("bottleneck model", &model.lineage, pool, Phase::Cbl)?;
        Ok(model)
    }

    pub fn load_vae(&self, pool: &ConceptPool) -> Result<VaeModel> {
        let model = VaeModel::load(self.artifact(VAE_MODEL_FILE))?;
        if model.input_dim() != pool.active_count() {
            return Err(Error::Lineage(format!(
                "VAE expects {} concepts, pool has {}",
                model.input_dim(),
                pool.active_count()
            )));
        }
        self.check_lineage("VAE model", &model.lineage, pool, Phase::Vae)?;
        Ok(model)
    }

    fn read_classes(&self) -> Result<Vec<String>> {
        let Some(path) = &self.cfg.classes else {
            return Ok(Vec::new());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    /// Length cut, class tagging, dedup and the activation cutoff; writes
    /// the pool, the filtered concept list and the removal log.
    pub fn filter_concepts(&self) -> Result<ConceptPool> {
        let raw = load_concepts(&self.cfg.concepts)?;
        let classes = self.read_classes()?;
        let text_path = self.cfg.data_root.join(CLIP_TEXT_FILE);
        let text_emb = read_matrix(&text_path)?;
        let train = self.load_split(&self.cfg.train_split)?;
        let pool = filter_pipeline(&raw, &classes, &text_emb, train.require_similarity()?, &self.cfg.filter)?;
        self.save_pool(&pool)?;
        log::info!("filter: {} of {} concepts active", pool.active_count(), raw.active_count());
        Ok(pool)
    }

    pub fn train_cbl(&self) -> Result<BottleneckModel> {
        let pool = self.load_pool()?;
        let train = self.load_split(&self.cfg.train_split)?;
        let heldout = self.load_split(&self.cfg.heldout_split)?;
        let (model, log) = train_projection(&train, &heldout, &pool, &self.cfg.cbl, self.lineage(&pool, Phase::Cbl))?;
        model.save(self.artifact(CBL_MODEL_FILE))?;
        log.save_csv(self.artifact(CBL_LOG_FILE))?;
        if let Some(best) = log.epochs.iter().find(|e| e.epoch == log.best_epoch) {
            log::info!(
                "cbl: best epoch {} train {:.6} heldout {:.6}",
                best.epoch,
                best.train_loss,
                best.heldout_loss
            );
        }
        Ok(model)
    }

    /// Drops concepts that align poorly on the held-out split; rewrites the
    /// pool and the bottleneck model in place.
    pub fn prune(&self) -> Result<(ConceptPool, Vec<f64>)> {
        let pool = self.load_pool()?;
        let model = self.load_cbl(&pool)?;
        let val = self.load_split(&self.cfg.heldout_split)?;
        let (pruned, pruned_pool, scores) = prune_uninterpretable(&model, &pool, &val, self.cfg.interp_threshold)?;
        let mut tsv = String::from("concept\tscore\tkept\n");
        for (text, score) in pool.active_texts().iter().zip(&scores) {
            let _ = writeln!(tsv, "{text}\t{score:.6}\t{}", *score >= self.cfg.interp_threshold);
        }
        write_atomic(&self.artifact(PRUNE_SCORES_FILE), tsv.as_bytes())?;
        self.save_pool(&pruned_pool)?;
        pruned.save(self.artifact(CBL_MODEL_FILE))?;
        log::info!("prune: {} of {} concepts kept", pruned_pool.active_count(), pool.active_count());
        Ok((pruned_pool, scores))
    }

    fn concept_vectors(&self, cbl: &BottleneckModel, split: &str) -> Result<(Matrix, Option<LabelVector>)> {
        let bundle = self.load_split(split)?;
        let q = project_concepts(cbl, &bundle.backbone_features)?;
        let q = if self.cfg.sparsity_cutoff > 0.0 {
            apply_sparsity_cutoff(&q, self.cfg.sparsity_cutoff)?
        } else {
            q
        };
        Ok((q, bundle.labels))
    }

    /// Trains the VAE on the concept vectors of every configured split, merged.
    pub fn train_vae(&self) -> Result<VaeModel> {
        let pool = self.load_pool()?;
        let cbl = self.load_cbl(&pool)?;
        let parts: Vec<Matrix> = self
            .cfg
            .vae_splits
            .iter()
            .map(|s| self.concept_vectors(&cbl, s).map(|(q, _)| q))
            .collect::<Result<_>>()?;
        let q_all = Matrix::vstack(&parts.iter().collect::<Vec<_>>())?;
        let (model, log) = train_vae(&q_all, &self.cfg.vae, self.lineage(&pool, Phase::Vae))?;
        model.save(self.artifact(VAE_MODEL_FILE))?;
        log.save_csv(self.artifact(VAE_LOG_FILE))?;
        Ok(model)
    }

    /// Bottleneck training, pruning and VAE training in sequence.
    pub fn train(&self) -> Result<VaeModel> {
        self.train_cbl()?;
        self.prune()?;
        self.train_vae()
    }

    fn latents(&self, split: &str) -> Result<(Matrix, Matrix, Option<LabelVector>, ConceptPool, VaeModel)> {
        let pool = self.load_pool()?;
        let cbl = self.load_cbl(&pool)?;
        let vae = self.load_vae(&pool)?;
        let (q, labels) = self.concept_vectors(&cbl, split)?;
        let h = latent_representation(&vae, &q)?;
        Ok((q, h, labels, pool, vae))
    }

    /// Writes `concepts/<split>.cemb` and `latents/<split>.cemb` for every embed split.
    pub fn embed(&self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for split in &self.cfg.embed_splits {
            let (q, h, ..) = self.latents(split)?;
            for (dir, m) in [("concepts", &q), ("latents", &h)] {
                let d = self.artifact(dir);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                let path = d.join(format!("{split}.cemb"));
                write_matrix(m, &path)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    fn require_labels(split: &str, labels: Option<LabelVector>) -> Result<LabelVector> {
        labels.ok_or_else(|| Error::Input(format!("split {split:?} has no labels.txt")))
    }

    fn save_report(&self, report: &EvalReport, tsv: &Path, json: &Path) -> Result<()> {
        write_atomic(tsv, report.to_tsv().as_bytes())?;
        write_atomic(json, report.to_json().as_bytes())
    }

    /// K-means on the eval split's latents, scored against its labels.
    pub fn cluster(&self) -> Result<EvalReport> {
        let split = &self.cfg.eval_split;
        let (_, h, labels, ..) = self.latents(split)?;
        let labels = Self::require_labels(split, labels)?;
        let k = if self.cfg.cluster_k > 0 {
            self.cfg.cluster_k
        } else {
            labels.num_classes
        };
        let (clusters, report) = evaluate_clustering(&h, &labels.labels, k, &self.cfg.kmeans)?;
        let report = report.with_names(&self.cfg.dataset, &self.cfg.backbone);
        self.save_report(&report, &self.cluster_report_path("tsv"), &self.cluster_report_path("json"))?;
        let assignments: String = clusters.assignments.iter().map(|a| format!("{a}\n")).collect();
        write_atomic(&self.artifact(&format!("assignments_{split}.txt")), assignments.as_bytes())?;
        Ok(report)
    }

    /// Linear probe trained on the train split, reported on the eval split.
    pub fn probe(&self) -> Result<EvalReport> {
        let (_, h_train, y_train, ..) = self.latents(&self.cfg.train_split)?;
        let (_, h_test, y_test, ..) = self.latents(&self.cfg.eval_split)?;
        let y_train = Self::require_labels(&self.cfg.train_split, y_train)?;
        let y_test = Self::require_labels(&self.cfg.eval_split, y_test)?;
        let report = linear_probe(&h_train, &y_train.labels, &h_test, &y_test.labels, &self.cfg.probe)?
            .with_names(&self.cfg.dataset, &self.cfg.backbone);
        self.save_report(&report, &self.probe_report_path("tsv"), &self.probe_report_path("json"))?;
        Ok(report)
    }

    /// Per-image concept reports for the eval split.
    pub fn attribute(&self) -> Result<Vec<ConceptReport>> {
        let (q, _, _, pool, vae) = self.latents(&self.cfg.eval_split)?;
        let q = match self.cfg.attribute_limit {
            0 => q,
            n if n < q.rows() => q.select_rows(&(0..n).collect::<Vec<_>>())?,
            _ => q,
        };
        let results = attribute_rows(&vae.frozen(), &q, &pool, &self.cfg.attribute)?;
        let worst = results.iter().map(|(a, _)| a.completeness_gap).fold(0.0, f64::max);
        log::info!("attribute: {} rows, largest completeness gap {worst:.3e}", results.len());
        let reports: Vec<ConceptReport> = results.into_iter().map(|(_, r)| r).collect();
        save_reports(self.reports_path(), &reports)?;
        Ok(reports)
    }

    /// Corpus-level concept counts from the saved reports.
    pub fn frequency(&self) -> Result<Vec<(String, usize)>> {
        let path = self.reports_path();
        if !path.exists() {
            return Err(Error::Input(format!("{} not found; run attribute first", path.display())));
        }
        let rows = concept_frequency(&load_reports(&path)?, self.cfg.min_count);
        write_atomic(&self.frequency_path(), frequency_tsv(&rows).as_bytes())?;
        Ok(rows)
    }
}
