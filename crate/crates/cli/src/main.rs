use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vast_core::eval::{cluster_report, diversity_report, run_inference, transfer_error};
use vast_core::face::{categorize_expressions, BlendshapeProxy};
use vast_core::store::NamedTensorArchive;
use vast_core::synth::{gen_corpus, Corpus, CorpusConfig};
use vast_core::trainer::{fit, grad_check, probe_inputs, Checkpoint, TrainConfig};
use vast_core::{Error, Result};

/// Variational facial style transfer on a synthetic blendshape face.
#[derive(Parser)]
#[command(name = "vast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "data/corpus")]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate an expression sequence for a PPG in the style of a prompt.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ppg: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample the style latent instead of using the posterior mean.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the test split of a corpus.
    Eval {
        metric: Metric,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Inter-sequence diversity instead of intra-sequence.
        #[arg(long)]
        inter: bool,
        /// Cap on transfer pairs (0 = all).
        #[arg(long, default_value_t = 0)]
        max_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split expression parameters into speech-weak and speech-strong sets.
    Categorize {
        #[arg(long)]
        proxy: PathBuf,
        #[arg(long, default_value_t = 85)]
        n_strong: usize,
        /// Also write the split to this archive.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    GradCheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the bundled blendshape proxy to an archive.
    ExportProxy {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Diversity,
    Transfer,
    Cluster,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = CorpusConfig::from_toml(&fs::read_to_string(config)?)?;
            let corpus = gen_corpus(&cfg, &out)?;
            println!(
                "wrote {} sequences to {} (fingerprint {})",
                corpus.records.len(),
                out.display(),
                corpus.fingerprint
            );
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::from_toml(&fs::read_to_string(config)?)?;
            let start = resume.map(Checkpoint::load).transpose()?;
            let out = fit(&cfg, start)?;
            for (step, v) in &out.history.validation {
                println!("step {step}: val_recon {v:.6}");
            }
            println!("checkpoint {} at step {}", cfg.checkpoint.display(), out.checkpoint.meta.step);
        }
        Command::Infer { ckpt, ppg, prompt, out, sample, seed } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let eps: Option<Vec<f64>> = sample.then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..ckpt.model.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            });
            let seq = run_inference(&ckpt, ppg, prompt, &out, eps.as_deref())?;
            println!("wrote {} x {} expression frames to {}", seq.len(), seq.dims(), out.display());
        }
        Command::Eval { metric, ckpt, data, report, inter, max_pairs, seed } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let corpus = Corpus::open(data)?;
            let rep = match metric {
                Metric::Diversity => diversity_report(&ckpt, &corpus, inter)?,
                Metric::Transfer => transfer_error(&ckpt, &corpus, max_pairs, seed)?,
                Metric::Cluster => cluster_report(&ckpt, &corpus)?,
            };
            rep.write_csv(&report)?;
            for (k, v) in &rep.metrics {
                println!("{k}\t{v}");
            }
        }
        Command::Categorize { proxy, n_strong, out } => {
            let proxy = BlendshapeProxy::from_archive(&NamedTensorArchive::load(proxy)?)?;
            let split = categorize_expressions(&proxy, n_strong)?;
            println!("weak\t{}", split.weak_ids.len());
            println!("strong\t{}", split.strong_ids.len());
            println!("threshold\t{}", split.threshold);
            let ids: Vec<String> = split.strong_ids.iter().map(usize::to_string).collect();
            println!("strong_ids\t{}", ids.join(","));
            if let Some(path) = out {
                let mut a = NamedTensorArchive::new();
                split.write_into("split.", &mut a)?;
                a.save(path)?;
            }
        }
        Command::GradCheck { ckpt, seed } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mut params = ckpt.params.cast::<f64>();
            let (batch, noise) = probe_inputs(&ckpt.model, seed)?;
            let lambda = ckpt.meta.train.lambda;
            let rep = grad_check(&ckpt.model, &mut params, &batch, &noise, 1.0, lambda, seed)?;
            println!("max_rel_error\t{:e}", rep.max_rel_error);
            if let Some(p) = rep.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)) {
                println!(
                    "worst\t{}[{},{}]\tanalytic {:e}\tnumeric {:e}",
                    p.param, p.index.0, p.index.1, p.analytic, p.numeric
                );
            }
            if rep.max_rel_error >= 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "gradient check failed: max relative error {:e}",
                    rep.max_rel_error
                )));
            }
        }
        Command::ExportProxy { out } => {
            BlendshapeProxy::default_proxy().to_archive()?.save(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
