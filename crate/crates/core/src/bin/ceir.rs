use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ceir_core::config::PipelineConfig;
use ceir_core::pipeline::Workspace;
use ceir_core::synth::{write_fixture, FixtureSpec, FIXTURE_CONFIG};
use ceir_core::{Error, Result};

/// Concept-based explainable image representations.
#[derive(Parser)]
#[command(name = "ceir", version)]
struct Cli {
    /// Pipeline config file (`key = value` lines with `[section]` groups).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of every phase.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory; overrides the config's `artifacts` key.
    #[arg(long, global = true, env = "CEIR_ARTIFACTS")]
    artifacts: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the raw concept list into the active pool.
    FilterConcepts {
        /// Remove class-tagged concepts instead of protecting them.
        #[arg(long)]
        drop_class_concepts: bool,
    },
    /// Train the concept bottleneck on the train split.
    TrainCbl,
    /// Drop concepts whose held-out alignment is below the threshold.
    Prune,
    /// Train the VAE on the merged concept vectors.
    TrainVae,
    /// train-cbl, prune and train-vae in sequence.
    Train,
    /// Write concept vectors and latents for the embed splits.
    Embed,
    /// K-means on eval-split latents with NMI/ACC/ARI.
    Cluster,
    /// Linear probe from the train split to the eval split.
    Probe,
    /// Per-image concept reports for the eval split.
    Attribute {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Threshold products relative to each image's largest one.
        #[arg(long)]
        normalize: bool,
        /// Attribute only the first N rows.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Concept frequency table from the saved reports.
    Frequency {
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Write the planted three-cluster dataset and a matching config.
    MakeFixture {
        /// Output directory.
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
            PipelineConfig::with_base(&cwd)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &cli.artifacts {
        cfg.artifacts = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::MakeFixture { out } = &cli.command {
        let spec = FixtureSpec {
            seed: cli.seed.unwrap_or(42),
            ..FixtureSpec::default()
        };
        write_fixture(out, &spec)?;
        let path = out.join("ceir.conf");
        ceir_core::embedding_store::write_atomic(&path, FIXTURE_CONFIG.as_bytes())?;
        println!("wrote fixture to {}", out.display());
        return Ok(());
    }

    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::FilterConcepts { drop_class_concepts } => cfg.filter.drop_class_concepts |= drop_class_concepts,
        Command::Attribute {
            threshold,
            steps,
            normalize,
            limit,
        } => {
            if let Some(t) = threshold {
                cfg.attribute.threshold = *t;
            }
            if let Some(s) = steps {
                cfg.attribute.steps = *s;
            }
            cfg.attribute.normalize |= normalize;
            if let Some(l) = limit {
                cfg.attribute_limit = *l;
            }
        }
        Command::Frequency { min_count: Some(m) } => cfg.min_count = *m,
        _ => {}
    }
    let ws = Workspace::open(cfg)?;

    match cli.command {
        Command::FilterConcepts { .. } => {
            let pool = ws.filter_concepts()?;
            println!("{} active concepts (fingerprint {})", pool.active_count(), pool.fingerprint());
        }
        Command::TrainCbl => {
            let model = ws.train_cbl()?;
            println!("trained bottleneck {}×{}", model.concept_count(), model.feature_dim());
        }
        Command::Prune => {
            let (pool, scores) = ws.prune()?;
            println!("kept {} of {} concepts", pool.active_count(), scores.len());
        }
        Command::TrainVae => {
            let model = ws.train_vae()?;
            println!("trained VAE {}→{}", model.input_dim(), model.latent_dim());
        }
        Command::Train => {
            let model = ws.train()?;
            println!("trained VAE {}→{}", model.input_dim(), model.latent_dim());
        }
        Command::Embed => {
            for path in ws.embed()? {
                println!("{}", path.display());
            }
        }
        Command::Cluster => print!("{}", ws.cluster()?.to_tsv()),
        Command::Probe => print!("{}", ws.probe()?.to_tsv()),
        Command::Attribute { .. } => {
            let reports = ws.attribute()?;
            let empty = reports.iter().filter(|r| r.entries.is_empty()).count();
            println!("{} reports ({empty} empty) in {}", reports.len(), ws.reports_path().display());
        }
        Command::Frequency { .. } => print!("{}", ceir_core::attribution::frequency_tsv(&ws.frequency()?)),
        Command::MakeFixture { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
