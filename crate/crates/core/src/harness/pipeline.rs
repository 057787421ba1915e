//! Search, prune, retrain and evaluate, with their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::glo::{EpochRecord, SearchState};
use crate::metrics::{fit_latent_gaussian, interpolate, proxy_fid, sample_images};
use crate::pruning::{prune_network, random_genotype, validate};
use crate::search_space::{build_supergraph, instantiate_genotype, Genotype, Provenance};
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, Phase};
use super::config::RunConfig;
use super::dataset::{read_dataset, write_dataset};
use super::genotype_io::serialize_genotype;
use super::lock::OutputLock;

pub const SEARCH_CKPT: &str = "search.ckpt";
pub const SEARCH_CSV: &str = "search_loss.csv";
pub const RETRAIN_CKPT: &str = "retrain.ckpt";
pub const RETRAIN_CSV: &str = "retrain_loss.csv";
pub const GENOTYPE_TXT: &str = "genotype.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const SAMPLES_DGS: &str = "samples.dgs";
pub const INTERP_DGS: &str = "interpolation.dgs";

pub const CSV_HEADER: &str = "epoch,w_loss,a_loss,lr,seconds,config_hash,seed";

/// Seed of the latent table and shuffling, kept apart from weight init.
pub fn state_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_5EED
}

pub fn csv_row(rec: &EpochRecord, hash: &str, seed: u64) -> String {
    format!(
        "{},{:.10e},{},{:.6e},{:.3},{hash},{seed}",
        rec.epoch,
        rec.w_loss,
        rec.a_loss.map(|a| format!("{a:.10e}")).unwrap_or_default(),
        rec.lr,
        rec.seconds
    )
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Starts a loss CSV, keeping rows up to `keep_epochs` when resuming.
fn reset_csv(path: &Path, keep_epochs: usize) -> Result<()> {
    let mut text = format!("{CSV_HEADER}\n");
    if keep_epochs > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e <= keep_epochs) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_images(cfg: &RunConfig, path: Option<&Path>) -> Result<Tensor> {
    let path = path
        .or(cfg.dataset.as_deref())
        .ok_or_else(|| Error::Config("no dataset given (set `dataset` or pass --data)".into()))?;
    let images = read_dataset(path)?;
    cfg.check_images(images.shape())?;
    Ok(images)
}

#[derive(Debug)]
pub struct RunReport {
    pub state: SearchState,
    /// Records of the epochs run by this call.
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    cfg: &RunConfig,
    mut state: SearchState,
    images: &Tensor,
    out: &Path,
    phase: Phase,
    genotype: Option<&Genotype>,
    max_epochs: Option<usize>,
    log: &mut dyn FnMut(&str),
) -> Result<RunReport> {
    let (ckpt, csv) = match phase {
        Phase::Search => (out.join(SEARCH_CKPT), out.join(SEARCH_CSV)),
        Phase::Retrain => (out.join(RETRAIN_CKPT), out.join(RETRAIN_CSV)),
    };
    reset_csv(&csv, state.epoch)?;
    let hash = cfg.hash();
    let stop = max_epochs.map_or(cfg.epochs, |m| (state.epoch + m).min(cfg.epochs));
    let mut history = Vec::new();
    while state.epoch < stop {
        let rec = state.run_epoch(images)?;
        append(&csv, &csv_row(&rec, &hash, cfg.seed))?;
        Checkpoint::capture(cfg, phase, cfg.seed, genotype, &state).save(&ckpt)?;
        log(&format!(
            "epoch {}/{} w_loss {:.5} a_loss {} lr {:.4e} ({:.1}s)",
            rec.epoch,
            cfg.epochs,
            rec.w_loss,
            rec.a_loss.map(|a| format!("{a:.5}")).unwrap_or_else(|| "-".into()),
            rec.lr,
            rec.seconds
        ));
        history.push(rec);
    }
    if state.epoch == 0 {
        Checkpoint::capture(cfg, phase, cfg.seed, genotype, &state).save(&ckpt)?;
    }
    Ok(RunReport {
        state,
        history,
        checkpoint: ckpt,
    })
}

fn resume_from(path: &Path, cfg: &RunConfig, phase: Phase) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(path)?;
    if ck.phase != phase || ck.config.hash() != cfg.hash() || ck.config.seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "{} was written by a different configuration or seed",
            path.display()
        )));
    }
    Ok(Some(ck))
}

/// Runs (or resumes) the architecture search. `max_epochs` bounds how many
/// epochs this call runs, for interrupting deliberately.
pub fn run_search_job(
    cfg: &RunConfig,
    images: &Tensor,
    out: &Path,
    resume: bool,
    max_epochs: Option<usize>,
    log: &mut dyn FnMut(&str),
) -> Result<RunReport> {
    cfg.check_images(images.shape())?;
    let _lock = OutputLock::acquire(out)?;
    let existing = if resume {
        resume_from(&out.join(SEARCH_CKPT), cfg, Phase::Search)?
    } else {
        None
    };
    let state = match existing {
        Some(ck) => {
            log(&format!("resuming search at epoch {}", ck.epoch));
            ck.restore()?
        }
        None => {
            let net = build_supergraph(&cfg.graph_spec(), cfg.seed)?;
            SearchState::new_search(net, images.shape()[0], cfg.train_settings(), state_seed(cfg.seed))?
        }
    };
    train_loop(cfg, state, images, out, Phase::Search, None, max_epochs, log)
}

/// Genotype of a search checkpoint, stamped with its config hash and seed.
pub fn prune_checkpoint(path: &Path) -> Result<Genotype> {
    let ck = Checkpoint::load(path)?;
    if ck.phase != Phase::Search {
        return Err(Error::Checkpoint(format!("{} is not a search checkpoint", path.display())));
    }
    let mut g = prune_network(&ck.network()?)?;
    g.provenance = Some(Provenance {
        config_hash: ck.config.hash(),
        seed: ck.config.seed,
    });
    Ok(g)
}

pub fn random_baseline(cfg: &RunConfig, seed: u64) -> Result<Genotype> {
    let mut g = random_genotype(&cfg.graph_spec(), seed)?;
    g.provenance = Some(Provenance {
        config_hash: cfg.hash(),
        seed,
    });
    Ok(g)
}

pub fn write_genotype(path: &Path, g: &Genotype) -> Result<()> {
    fs::write(path, serialize_genotype(g)).map_err(|e| Error::io(path, e))
}

/// GLO training of a fixed genotype from scratch (or from its checkpoint).
pub fn run_retrain_job(
    cfg: &RunConfig,
    genotype: &Genotype,
    images: &Tensor,
    out: &Path,
    resume: bool,
    max_epochs: Option<usize>,
    log: &mut dyn FnMut(&str),
) -> Result<RunReport> {
    cfg.check_images(images.shape())?;
    let mut probe = genotype.clone();
    probe.base = cfg.base;
    probe.latent_dim = cfg.latent_dim;
    let errs = validate(&probe, &cfg.graph_spec().topology()?);
    if !errs.is_empty() {
        return Err(Error::Genotype(errs.join("; ")));
    }
    let _lock = OutputLock::acquire(out)?;
    let existing = if resume {
        resume_from(&out.join(RETRAIN_CKPT), cfg, Phase::Retrain)?
    } else {
        None
    };
    let state = match existing {
        Some(ck) => {
            log(&format!("resuming retraining at epoch {}", ck.epoch));
            ck.restore()?
        }
        None => {
            let net = instantiate_genotype(genotype, &cfg.graph_spec(), cfg.seed)?;
            SearchState::new_retrain(net, images.shape()[0], cfg.train_settings(), state_seed(cfg.seed))?
        }
    };
    train_loop(cfg, state, images, out, Phase::Retrain, Some(genotype), max_epochs, log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub proxy_fid: f64,
    pub samples: usize,
}

/// Samples from a retrained generator and compares them to `heldout`.
pub fn evaluate(ck: &Checkpoint, heldout: &Tensor, seed: u64, out: Option<&Path>) -> Result<EvalReport> {
    let state = ck.restore()?;
    let mut net = state.network;
    let stats = fit_latent_gaussian(&state.latents)?;
    let count = heldout.shape()[0];
    let samples = sample_images(&mut net, &stats, count, seed)?;
    let fid = proxy_fid(&samples, heldout)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_dataset(&dir.join(SAMPLES_DGS), &samples)?;
        if state.latents.len() >= 2 {
            let frames = interpolate(&mut net, state.latents.row(0), state.latents.row(1), 8)?;
            write_dataset(&dir.join(INTERP_DGS), &Tensor::stack(&frames)?)?;
        }
        let text = format!(
            "metric,value,config_hash,seed\nproxy_fid,{fid:.10e},{h},{s}\nsamples,{count},{h},{s}\n",
            h = ck.config.hash(),
            s = ck.config.seed
        );
        let path = dir.join(EVAL_CSV);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(EvalReport {
        proxy_fid: fid,
        samples: count,
    })
}
