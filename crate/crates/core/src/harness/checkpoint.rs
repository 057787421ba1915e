//! Binary checkpoints.
//!
//! Layout (all integers little-endian): magic `DGCK`, u32 version, u32
//! section count, then one `(tag: [u8; 4], offset: u64, length: u64)` entry
//! per section, then the section payloads in table order. Offsets are from
//! the start of the file.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::glo::{LatentTable, OptimizerKind, OptimizerState, SearchState, Slot};
use crate::search_space::{build_supergraph, instantiate_genotype, Genotype, Network};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

use super::config::{parse_config, RunConfig};
use super::genotype_io::{parse_genotype, serialize_genotype};

pub const MAGIC: &[u8; 4] = b"DGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Search,
    Retrain,
}

/// Serializable snapshot of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: Phase,
    /// Network seed used to build the generator before loading weights.
    pub net_seed: u64,
    /// Present for retraining runs.
    pub genotype: Option<Genotype>,
    pub epoch: u64,
    pub params: ParamStore,
    pub latents: Tensor,
    pub w_rows: Vec<usize>,
    pub a_rows: Vec<usize>,
    pub optimizers: [OptimizerState; 3],
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn rows(&mut self, r: &[usize]) {
        self.u64(r.len() as u64);
        for &v in r {
            self.u64(v as u64);
        }
    }
}

struct R<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> R<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        R { buf, pos: 0, section }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("section {} truncated", self.section)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 * 8 + 8 {
            return Err(Error::Checkpoint(format!("section {}: implausible length {n}", self.section)));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("section {}: invalid UTF-8", self.section)))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::Checkpoint(format!("section {}: {nd}-d tensor", self.section)));
        }
        let mut shape = Vec::with_capacity(nd);
        let mut numel: usize = 1;
        for _ in 0..nd {
            let d = self.len()?;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("section {} truncated", self.section)))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn rows(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("section {}: trailing bytes", self.section)));
        }
        Ok(())
    }
}

fn write_optimizer(w: &mut W, o: &OptimizerState) {
    match o.kind {
        OptimizerKind::SgdMomentum { momentum } => {
            w.u8(0);
            w.f64(momentum);
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            w.u8(1);
            w.f64(beta1);
            w.f64(beta2);
            w.f64(eps);
        }
    }
    w.f64(o.lr);
    w.f64(o.weight_decay);
    w.u64(o.step_count);
    w.u64(o.slots.len() as u64);
    for (k, s) in &o.slots {
        w.u64(*k);
        w.u64(s.steps);
        w.tensor(&s.first);
        match &s.second {
            Some(t) => {
                w.u8(1);
                w.tensor(t);
            }
            None => w.u8(0),
        }
    }
}

fn read_optimizer(r: &mut R) -> Result<OptimizerState> {
    let kind = match r.u8()? {
        0 => OptimizerKind::SgdMomentum { momentum: r.f64()? },
        1 => OptimizerKind::Adam {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        },
        k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
    };
    let mut o = OptimizerState {
        kind,
        lr: r.f64()?,
        weight_decay: r.f64()?,
        slots: Default::default(),
        step_count: r.u64()?,
    };
    let n = r.len()?;
    for _ in 0..n {
        let key = r.u64()?;
        let steps = r.u64()?;
        let first = r.tensor()?;
        let second = match r.u8()? {
            0 => None,
            1 => Some(r.tensor()?),
            f => return Err(Error::Checkpoint(format!("bad slot flag {f}"))),
        };
        o.slots.insert(key, Slot { first, second, steps });
    }
    Ok(o)
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, phase: Phase, net_seed: u64, genotype: Option<&Genotype>, s: &SearchState) -> Self {
        Checkpoint {
            config: config.clone(),
            phase,
            net_seed,
            genotype: genotype.cloned(),
            epoch: s.epoch as u64,
            params: s.network.store.clone(),
            latents: s.latents.tensor().clone(),
            w_rows: s.w_rows.clone(),
            a_rows: s.a_rows.clone(),
            optimizers: [s.weight_opt.clone(), s.latent_opt.clone(), s.alpha_opt.clone()],
            rng_seed: s.rng.get_seed(),
            rng_stream: s.rng.get_stream(),
            rng_word_pos: s.rng.get_word_pos(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        let mut w = W(Vec::new());
        w.str(&self.config.to_text());
        sections.push((b"CONF", w.0));

        let mut w = W(Vec::new());
        w.u8(match self.phase {
            Phase::Search => 0,
            Phase::Retrain => 1,
        });
        w.u64(self.net_seed);
        w.u64(self.epoch);
        w.str(&self.genotype.as_ref().map(serialize_genotype).unwrap_or_default());
        sections.push((b"META", w.0));

        let mut w = W(Vec::new());
        w.u64(self.params.len() as u64);
        for e in self.params.entries() {
            w.str(&e.name);
            w.u8(e.group.tag());
            w.tensor(&e.value);
        }
        sections.push((b"PARM", w.0));

        let mut w = W(Vec::new());
        w.tensor(&self.latents);
        w.rows(&self.w_rows);
        w.rows(&self.a_rows);
        sections.push((b"LATN", w.0));

        let mut w = W(Vec::new());
        for o in &self.optimizers {
            write_optimizer(&mut w, o);
        }
        sections.push((b"OPTS", w.0));

        let mut w = W(Vec::new());
        w.0.extend_from_slice(&self.rng_seed);
        w.u64(self.rng_stream);
        w.u128(self.rng_word_pos);
        sections.push((b"RNGS", w.0));

        let mut out = W(Vec::new());
        out.0.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.u32(sections.len() as u32);
        let mut offset = (12 + sections.len() * 20) as u64;
        for (tag, body) in &sections {
            out.0.extend_from_slice(*tag);
            out.u64(offset);
            out.u64(body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in sections {
            out.0.extend_from_slice(&body);
        }
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut h = R::new(bytes, "header");
        h.take(4)?;
        let version = h.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = h.u32()? as usize;
        let mut table = std::collections::BTreeMap::new();
        for _ in 0..count {
            let tag: [u8; 4] = h.take(4)?.try_into().unwrap();
            let (off, len) = (h.u64()?, h.u64()?);
            let end = off.checked_add(len).filter(|&e| e <= bytes.len() as u64);
            let Some(end) = end else {
                return Err(Error::Checkpoint(format!(
                    "section {} runs past end of file",
                    String::from_utf8_lossy(&tag)
                )));
            };
            table.insert(tag, &bytes[off as usize..end as usize]);
        }
        let section = |tag: &[u8; 4], name: &'static str| -> Result<R> {
            table
                .get(tag)
                .map(|b| R::new(b, name))
                .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
        };

        let mut r = section(b"CONF", "CONF")?;
        let config = parse_config(&r.str()?)?;
        r.done()?;

        let mut r = section(b"META", "META")?;
        let phase = match r.u8()? {
            0 => Phase::Search,
            1 => Phase::Retrain,
            p => return Err(Error::Checkpoint(format!("unknown phase {p}"))),
        };
        let net_seed = r.u64()?;
        let epoch = r.u64()?;
        let gtext = r.str()?;
        let genotype = if gtext.is_empty() {
            None
        } else {
            Some(parse_genotype(&gtext)?)
        };
        r.done()?;

        let mut r = section(b"PARM", "PARM")?;
        let n = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let tag = r.u8()?;
            let group = ParamGroup::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group {tag}")))?;
            params.push(name, group, r.tensor()?);
        }
        r.done()?;

        let mut r = section(b"LATN", "LATN")?;
        let latents = r.tensor()?;
        let w_rows = r.rows()?;
        let a_rows = r.rows()?;
        r.done()?;

        let mut r = section(b"OPTS", "OPTS")?;
        let optimizers = [read_optimizer(&mut r)?, read_optimizer(&mut r)?, read_optimizer(&mut r)?];
        r.done()?;

        let mut r = section(b"RNGS", "RNGS")?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = r.u128()?;
        r.done()?;

        Ok(Checkpoint {
            config,
            phase,
            net_seed,
            genotype,
            epoch,
            params,
            latents,
            w_rows,
            a_rows,
            optimizers,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the generator this checkpoint was taken from.
    pub fn network(&self) -> Result<Network> {
        let spec = self.config.graph_spec();
        let mut net = match (&self.phase, &self.genotype) {
            (Phase::Search, _) => build_supergraph(&spec, self.net_seed)?,
            (Phase::Retrain, Some(g)) => instantiate_genotype(g, &spec, self.net_seed)?,
            (Phase::Retrain, None) => {
                return Err(Error::Checkpoint("retraining checkpoint without genotype".into()))
            }
        };
        net.store
            .load_values(&self.params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the network: {e}")))?;
        for (mine, theirs) in net.store.entries().iter().zip(self.params.entries()) {
            if mine.group != theirs.group {
                return Err(Error::Checkpoint(format!("parameter `{}` changed group", mine.name)));
            }
        }
        Ok(net)
    }

    /// Full training state, ready to continue with the next epoch.
    pub fn restore(&self) -> Result<SearchState> {
        let network = self.network()?;
        let latents = LatentTable::from_tensor(self.latents.clone())?;
        if latents.dim() != self.config.latent_dim {
            return Err(Error::Checkpoint("latent width does not match config".into()));
        }
        let n = latents.len();
        if self.w_rows.iter().chain(&self.a_rows).any(|&r| r >= n) {
            return Err(Error::Checkpoint("row index out of range".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        let [weight_opt, latent_opt, alpha_opt] = self.optimizers.clone();
        Ok(SearchState {
            network,
            latents,
            w_rows: self.w_rows.clone(),
            a_rows: self.a_rows.clone(),
            weight_opt,
            latent_opt,
            alpha_opt,
            epoch: self.epoch as usize,
            rng,
            settings: self.config.train_settings(),
        })
    }
}
