//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pruning::{count_architectures, edge_choice_counts};

use super::checkpoint::Checkpoint;
use super::config::{parse_config, RunConfig};
use super::dataset::{gen_toy_dataset, read_dataset};
use super::genotype_io::{parse_genotype, serialize_genotype};
use super::gradsuite::{format_table, run_suite, SUITE_TOL};
use super::pipeline::{
    evaluate, load_images, prune_checkpoint, random_baseline, run_retrain_job, run_search_job, write_genotype,
    GENOTYPE_TXT, RETRAIN_CKPT, SEARCH_CKPT,
};

#[derive(Parser, Debug)]
#[command(name = "degas", version, about = "Generator architecture search with GLO")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search the supergraph; writes a checkpoint and loss CSV per epoch.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Writes the pruned genotype of a search checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prune uniformly random logits instead (baseline).
        #[arg(long)]
        random: bool,
    },
    /// Trains a genotype from scratch with GLO.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the base size (resolution transfer).
        #[arg(long)]
        base: Option<usize>,
        /// Overrides the latent width.
        #[arg(long)]
        latent: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Proxy Fréchet distance of a retrained generator against held-out images.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out images (defaults to `eval_dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Exact number of architectures for per-edge choice counts.
    CountSpace {
        /// Choice counts; the configured space is used when empty.
        factors: Vec<u64>,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = SUITE_TOL)]
        tol: f64,
    },
    /// Renders the procedural toy dataset.
    GenData {
        path: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let say = |out: &mut dyn Write, s: &str| {
        let _ = writeln!(out, "{s}");
    };
    match &cli.command {
        Command::Search {
            data,
            resume,
            max_epochs,
        } => {
            let images = load_images(&cfg, data.as_deref())?;
            let mut log = |s: &str| say(out, s);
            let rep = run_search_job(&cfg, &images, &cfg.out, *resume, *max_epochs, &mut log)?;
            let _ = writeln!(out, "checkpoint {}", rep.checkpoint.display());
        }
        Command::Prune { checkpoint, random } => {
            let g = if *random {
                random_baseline(&cfg, cfg.seed)?
            } else {
                let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join(SEARCH_CKPT));
                prune_checkpoint(&path)?
            };
            fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
            let path = cfg.out.join(GENOTYPE_TXT);
            write_genotype(&path, &g)?;
            let _ = write!(out, "{}", serialize_genotype(&g));
        }
        Command::Retrain {
            genotype,
            data,
            base,
            latent,
            resume,
            max_epochs,
        } => {
            let text = fs::read_to_string(genotype).map_err(|e| Error::io(genotype, e))?;
            let g = parse_genotype(&text)?;
            if let Some(b) = base {
                cfg.base = *b;
            }
            if let Some(d) = latent {
                cfg.latent_dim = *d;
            }
            if base.is_some() || latent.is_some() {
                cfg.image_size = None;
            }
            cfg.validate().map_err(Error::Config)?;
            let images = load_images(&cfg, data.as_deref())?;
            let mut log = |s: &str| say(out, s);
            let rep = run_retrain_job(&cfg, &g, &images, &cfg.out, *resume, *max_epochs, &mut log)?;
            let _ = writeln!(out, "checkpoint {}", rep.checkpoint.display());
        }
        Command::Eval { checkpoint, data } => {
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join(RETRAIN_CKPT));
            let ck = Checkpoint::load(&path)?;
            let held = data
                .clone()
                .or_else(|| ck.config.eval_dataset.clone())
                .or_else(|| cfg.eval_dataset.clone())
                .ok_or_else(|| Error::Config("no held-out data (set `eval_dataset` or pass --data)".into()))?;
            let images = read_dataset(&held)?;
            ck.config.check_images(images.shape())?;
            let rep = evaluate(&ck, &images, cfg.seed, Some(&cfg.out))?;
            let _ = writeln!(out, "proxy_fid {:.6}", rep.proxy_fid);
        }
        Command::CountSpace { factors } => {
            let factors = if factors.is_empty() {
                edge_choice_counts(&cfg.graph_spec())?
            } else {
                factors.clone()
            };
            if let Some(bad) = factors.iter().find(|&&f| f == 0) {
                return Err(Error::Config(format!("choice counts must be positive, got {bad}")));
            }
            let _ = writeln!(out, "{}", count_architectures(&factors));
        }
        Command::GradCheck { tol } => {
            let rows = run_suite(*tol);
            let _ = write!(out, "{}", format_table(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.pass) {
                return Err(Error::Metrics(format!(
                    "gradient check failed for {} (max relative error {:.3e})",
                    bad.label, bad.max_rel_err
                )));
            }
        }
        Command::GenData { path, count, size } => {
            gen_toy_dataset(*count, *size, cfg.seed, path)?;
            let _ = writeln!(out, "wrote {count} images of {size}x{size} to {}", path.display());
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{e}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 }
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("usage error");
                    let _ = writeln!(err, "{first}");
                    2
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
