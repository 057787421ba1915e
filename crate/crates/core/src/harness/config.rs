//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::glo::TrainSettings;
use crate::search_space::catalog::{normal_op, upsample_op, NORMAL_OPS, UPSAMPLE_OPS};
use crate::search_space::GraphSpec;

/// Weight learning rate for small (32x32-like) datasets.
pub const LR_SMALL: f64 = 3e-1;
/// Weight learning rate for datasets flagged as STL/CelebA-like.
pub const LR_LARGE: f64 = 3e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar,
    Stl,
    Celeba,
    Toy,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar => "cifar",
            DatasetKind::Stl => "stl",
            DatasetKind::Celeba => "celeba",
            DatasetKind::Toy => "toy",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            DatasetKind::Stl | DatasetKind::Celeba => LR_LARGE,
            DatasetKind::Cifar | DatasetKind::Toy => LR_SMALL,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar" => Ok(DatasetKind::Cifar),
            "stl" => Ok(DatasetKind::Stl),
            "celeba" => Ok(DatasetKind::Celeba),
            "toy" => Ok(DatasetKind::Toy),
            _ => Err(format!("unknown dataset kind `{s}` (cifar, stl, celeba, toy)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stages: usize,
    pub n: usize,
    pub base: usize,
    pub latent_dim: usize,
    /// Stem channels; halved at every up-sampling node.
    pub channels: usize,
    pub normal_ops: Vec<String>,
    pub upsample_ops: Vec<String>,
    pub lambda: f64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub momentum: f64,
    pub alpha_betas: (f64, f64),
    pub weight_decay: f64,
    pub alpha_weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub levels: usize,
    pub seed: u64,
    pub dataset_kind: DatasetKind,
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    /// Expected image side; checked against `base * 2^stages`.
    pub image_size: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stages: 3,
            n: 1,
            base: 4,
            latent_dim: 64,
            channels: 32,
            normal_ops: NORMAL_OPS.iter().map(|s| s.to_string()).collect(),
            upsample_ops: UPSAMPLE_OPS.iter().map(|s| s.to_string()).collect(),
            lambda: 1.0,
            lr: LR_SMALL,
            alpha_lr: 3e-4,
            momentum: 0.9,
            alpha_betas: (0.5, 0.999),
            weight_decay: 3e-4,
            alpha_weight_decay: 1e-3,
            grad_clip: Some(5.0),
            batch_size: 32,
            epochs: 50,
            levels: 3,
            seed: 0,
            dataset_kind: DatasetKind::Cifar,
            dataset: None,
            eval_dataset: None,
            image_size: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn parse_rate(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if !x.is_finite() || x < 0.0 {
        return Err(format!("`{v}` must be a finite non-negative number"));
    }
    Ok(x)
}

fn parse_positive(v: &str) -> std::result::Result<usize, String> {
    let x: usize = parse_num(v)?;
    if x == 0 {
        return Err("must be positive".into());
    }
    Ok(x)
}

fn parse_list(v: &str, check: impl Fn(&str) -> bool, what: &str) -> std::result::Result<Vec<String>, String> {
    let items: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(format!("empty {what} list"));
    }
    for (i, it) in items.iter().enumerate() {
        if !check(it) {
            return Err(format!("unknown {what} `{it}`"));
        }
        if items[..i].contains(it) {
            return Err(format!("duplicate {what} `{it}`"));
        }
    }
    Ok(items)
}

/// Parses `key = value` lines over the defaults. Blank lines and `#`
/// comments are skipped; unknown keys, bad values and violated constraints
/// are reported with their line number.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut lr_set = false;
    let mut lines = std::collections::BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::ConfigLine { line, msg };
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if lines.insert(k.to_string(), line).is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
        let r: std::result::Result<(), String> = (|| {
            match k {
                "stages" => c.stages = parse_positive(v)?,
                "n" => c.n = parse_positive(v)?,
                "base" => c.base = parse_positive(v)?,
                "latent_dim" => c.latent_dim = parse_positive(v)?,
                "channels" => c.channels = parse_positive(v)?,
                "normal_ops" => c.normal_ops = parse_list(v, |s| normal_op(s).is_ok(), "normal op")?,
                "upsample_ops" => {
                    c.upsample_ops = parse_list(v, |s| upsample_op(s, 2).is_ok(), "up-sample op")?
                }
                "lambda" => c.lambda = parse_rate(v)?,
                "lr" => {
                    c.lr = parse_rate(v)?;
                    lr_set = true;
                }
                "alpha_lr" => c.alpha_lr = parse_rate(v)?,
                "momentum" => c.momentum = parse_rate(v)?,
                "alpha_beta1" => c.alpha_betas.0 = parse_rate(v)?,
                "alpha_beta2" => c.alpha_betas.1 = parse_rate(v)?,
                "weight_decay" => c.weight_decay = parse_rate(v)?,
                "alpha_weight_decay" => c.alpha_weight_decay = parse_rate(v)?,
                "grad_clip" => {
                    c.grad_clip = match v {
                        "none" => None,
                        _ => {
                            let x = parse_rate(v)?;
                            if x == 0.0 {
                                return Err("must be positive or `none`".into());
                            }
                            Some(x)
                        }
                    }
                }
                "batch_size" => c.batch_size = parse_positive(v)?,
                "epochs" => c.epochs = parse_num(v)?,
                "levels" => c.levels = parse_num(v)?,
                "seed" => c.seed = parse_num(v)?,
                "dataset_kind" => c.dataset_kind = v.parse()?,
                "dataset" => c.dataset = Some(PathBuf::from(v)),
                "eval_dataset" => c.eval_dataset = Some(PathBuf::from(v)),
                "image_size" => c.image_size = Some(parse_positive(v)?),
                "out" => c.out = PathBuf::from(v),
                _ => return Err(format!("unknown key `{k}`")),
            }
            Ok(())
        })();
        r.map_err(err)?;
    }
    if !lr_set {
        c.lr = c.dataset_kind.default_lr();
    }
    let at = |keys: &[&str]| keys.iter().filter_map(|k| lines.get(*k)).copied().max().unwrap_or(0);
    if c.alpha_betas.0 >= 1.0 || c.alpha_betas.1 >= 1.0 {
        return Err(Error::ConfigLine {
            line: at(&["alpha_beta1", "alpha_beta2"]),
            msg: "Adam betas must be below 1".into(),
        });
    }
    c.validate()
        .map_err(|msg| Error::ConfigLine {
            line: at(&["stages", "n", "base", "latent_dim", "channels", "image_size", "levels"]),
            msg,
        })?;
    Ok(c)
}

impl RunConfig {
    /// Structural constraints shared by parsing and command-line overrides.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.graph_spec().topology().map_err(|e| e.to_string())?;
        let size = self.output_size();
        if !size.is_multiple_of(1 << self.levels) {
            return Err(format!("image size {size} not divisible by 2^{} pyramid levels", self.levels));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.base << self.stages
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec {
            stages: self.stages,
            n: self.n,
            base: self.base,
            latent_dim: self.latent_dim,
            channels: self.channels,
            normal_ops: self.normal_ops.clone(),
            upsample_ops: self.upsample_ops.clone(),
            image_size: self.image_size,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lambda: self.lambda,
            levels: self.levels,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            alpha_lr: self.alpha_lr,
            alpha_betas: self.alpha_betas,
            alpha_weight_decay: self.alpha_weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            grad_clip: self.grad_clip,
        }
    }

    /// Checks a loaded image batch against the generator output.
    pub fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.output_size();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "dataset images {:?} do not match base {} x 2^{} = {s} (3 channels)",
                &shape[1.min(shape.len())..],
                self.base,
                self.stages
            )));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields this config again.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_keys(&mut s, true);
        s
    }

    fn write_keys(&self, s: &mut String, with_run_keys: bool) {
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stages", self.stages.to_string());
        kv("n", self.n.to_string());
        kv("base", self.base.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("channels", self.channels.to_string());
        kv("normal_ops", self.normal_ops.join(", "));
        kv("upsample_ops", self.upsample_ops.join(", "));
        kv("lambda", format!("{:?}", self.lambda));
        kv("lr", format!("{:?}", self.lr));
        kv("alpha_lr", format!("{:?}", self.alpha_lr));
        kv("momentum", format!("{:?}", self.momentum));
        kv("alpha_beta1", format!("{:?}", self.alpha_betas.0));
        kv("alpha_beta2", format!("{:?}", self.alpha_betas.1));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("alpha_weight_decay", format!("{:?}", self.alpha_weight_decay));
        kv(
            "grad_clip",
            self.grad_clip.map_or_else(|| "none".to_string(), |g| format!("{g:?}")),
        );
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("levels", self.levels.to_string());
        kv("dataset_kind", self.dataset_kind.name().to_string());
        if let Some(p) = &self.dataset {
            kv("dataset", p.display().to_string());
        }
        if let Some(p) = &self.eval_dataset {
            kv("eval_dataset", p.display().to_string());
        }
        if let Some(sz) = self.image_size {
            kv("image_size", sz.to_string());
        }
        if with_run_keys {
            kv("seed", self.seed.to_string());
            kv("out", self.out.display().to_string());
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, without
    /// seed and output directory (the seed is recorded separately).
    pub fn hash(&self) -> String {
        let mut s = String::new();
        self.write_keys(&mut s, false);
        let digest = Sha256::digest(s.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.lr, 3e-1);
        assert_eq!(c.output_size(), 32);
    }

    #[test]
    fn n_two_and_comments() {
        let c = parse_config("# ablation\nn = 2   # two normal maps\n").unwrap();
        assert_eq!(c.n, 2);
    }

    #[test]
    fn size_constraint_names_line() {
        let e = parse_config("stages = 3\nbase = 4\nimage_size = 16\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 3, .. }), "{e}");
    }

    #[test]
    fn large_kind_lowers_lr() {
        assert_eq!(parse_config("dataset_kind = stl").unwrap().lr, 3e-2);
        assert_eq!(parse_config("dataset_kind = celeba\nlr = 0.1").unwrap().lr, 0.1);
    }

    #[test]
    fn errors_name_line() {
        for (text, line) in [
            ("foo = 1", 1),
            ("\nstages = x", 2),
            ("lr = -1", 1),
            ("batch_size = 0", 1),
            ("normal_ops = conv3x3, bogus", 1),
            ("seed = 1\nseed = 2", 2),
            ("just words", 1),
        ] {
            match parse_config(text) {
                Err(Error::ConfigLine { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = parse_config("stages = 2\nn = 2\nlambda = 0.5\ngrad_clip = none").unwrap();
        c.dataset = Some("data/toy.dgs".into());
        let back = parse_config(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let mut d = c.clone();
        d.seed = 99;
        d.out = "elsewhere".into();
        assert_eq!(d.hash(), c.hash());
        d.lambda = 0.6;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }
}
