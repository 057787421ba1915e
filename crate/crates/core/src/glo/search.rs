//! Alternating optimization: GLO steps on generator weights and latents,
//! Adam steps on architecture logits.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::glo::latent::{project_latent, LatentTable};
use crate::glo::loss::recon_loss_var;
use crate::glo::optim::{cosine_lr, OptimizerState};
use crate::search_space::{edge_weights, Network};
use crate::tensor::{Gradients, Mode, ParamGroup, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    /// Weight of the squared-error term next to the pyramid term.
    pub lambda: f64,
    pub levels: usize,
    /// Initial learning rate of weights and latents (cosine-annealed).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm clip applied to weight gradients.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lambda: 1.0,
            levels: 3,
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            batch_size: 32,
            epochs: 50,
            grad_clip: Some(5.0),
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub w_loss: f64,
    /// `None` when no architecture step ran (fixed networks).
    pub a_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

/// Everything that evolves during search or retraining.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub network: Network,
    pub latents: LatentTable,
    /// Rows used for weight steps.
    pub w_rows: Vec<usize>,
    /// Rows used for architecture steps; empty when retraining.
    pub a_rows: Vec<usize>,
    pub weight_opt: OptimizerState,
    pub latent_opt: OptimizerState,
    pub alpha_opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub settings: TrainSettings,
}

impl SearchState {
    fn with_rows(network: Network, num_images: usize, settings: TrainSettings, seed: u64, split: bool) -> Result<Self> {
        if num_images == 0 {
            return Err(Error::Dataset("no images".into()));
        }
        if split && num_images < 2 {
            return Err(Error::Dataset("search needs at least two images for the W/A split".into()));
        }
        if settings.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = LatentTable::init(num_images, network.topology.latent_dim, &mut rng);
        let mut order: Vec<usize> = (0..num_images).collect();
        let (w_rows, a_rows) = if split {
            order.shuffle(&mut rng);
            let half = num_images.div_ceil(2);
            let mut w = order[..half].to_vec();
            let mut a = order[half..].to_vec();
            w.sort_unstable();
            a.sort_unstable();
            (w, a)
        } else {
            (order, Vec::new())
        };
        let s = &settings;
        Ok(SearchState {
            network,
            latents,
            w_rows,
            a_rows,
            weight_opt: OptimizerState::sgd(s.lr, s.momentum, s.weight_decay),
            latent_opt: OptimizerState::sgd(s.lr, s.momentum, 0.0),
            alpha_opt: OptimizerState::adam(s.alpha_lr, s.alpha_betas.0, s.alpha_betas.1, ADAM_EPS, s.alpha_weight_decay),
            epoch: 0,
            rng,
            settings,
        })
    }

    /// Search state over a supergraph: latents for every image, 50/50 W/A split.
    pub fn new_search(network: Network, num_images: usize, settings: TrainSettings, seed: u64) -> Result<Self> {
        if !network.is_searchable() {
            return Err(Error::Config("search requires a supergraph with architecture logits".into()));
        }
        Self::with_rows(network, num_images, settings, seed, true)
    }

    /// Plain GLO training of a fixed network on every image.
    pub fn new_retrain(network: Network, num_images: usize, settings: TrainSettings, seed: u64) -> Result<Self> {
        Self::with_rows(network, num_images, settings, seed, false)
    }

    /// Weight learning rate for the current epoch.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.settings.lr, self.epoch as f64, self.settings.epochs as f64)
    }

    /// Forward + loss + backward for a batch. The latent leaf covers the
    /// distinct rows in `rows`; duplicates share it.
    fn loss_and_grads(
        &mut self,
        images: &Tensor,
        rows: &[usize],
        trainable: &[ParamGroup],
    ) -> Result<(f64, Gradients, Vec<usize>, crate::tensor::Var)> {
        if images.shape().first() != Some(&rows.len()) {
            return Err(Error::shape(
                "glo_step",
                format!("{} rows for image batch {:?}", rows.len(), images.shape()),
            ));
        }
        let mut unique = rows.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let positions: Vec<usize> = rows
            .iter()
            .map(|r| unique.binary_search(r).unwrap())
            .collect();
        let mut tape = Tape::with_trainable(trainable);
        let zleaf = tape.leaf(self.latents.gather(&unique), true)?;
        let z = tape.gather_rows(zleaf, &positions)?;
        let out = self.network.forward(z, &mut tape, Mode::Train)?;
        let target = tape.constant(images.clone())?;
        let loss = recon_loss_var(&mut tape, out, target, self.settings.lambda, self.settings.levels)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, grads, unique, zleaf))
    }

    fn update_latents(&mut self, grads: &Gradients, unique: &[usize], zleaf: crate::tensor::Var, lr: f64) -> Result<()> {
        let g = grads
            .get(zleaf)
            .ok_or_else(|| Error::Config("latent leaf received no gradient".into()))?;
        let d = self.latents.dim();
        for (i, &r) in unique.iter().enumerate() {
            let mut row = Tensor::from_vec(&[d], self.latents.row(r).to_vec());
            let gr = Tensor::from_vec(&[d], g.data()[i * d..(i + 1) * d].to_vec());
            self.latent_opt.update(r as u64, &mut row, &gr, lr)?;
            let dst = self.latents.row_mut(r);
            dst.copy_from_slice(row.data());
            project_latent(dst);
        }
        Ok(())
    }

    /// One GLO step: SGD on generator weights and on the batch's latent rows
    /// (same rate), then projection. Returns the loss before the update.
    pub fn glo_step(&mut self, images: &Tensor, rows: &[usize], lr: f64) -> Result<f64> {
        let (loss, grads, unique, zleaf) = self.loss_and_grads(images, rows, &[ParamGroup::Weight])?;
        let ids = self.network.store.ids_in(ParamGroup::Weight);
        let mut scale = 1.0;
        if let Some(clip) = self.settings.grad_clip {
            let norm = ids
                .iter()
                .filter_map(|&id| grads.param(id))
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let g = if scale != 1.0 { g.map(|v| v * scale) } else { g.clone() };
            let p = self.network.store.get_mut(id);
            self.weight_opt.update(id.0 as u64, p, &g, lr)?;
        }
        self.update_latents(&grads, &unique, zleaf, lr)?;
        Ok(loss)
    }

    /// One architecture step: Adam on every logit (first-order), SGD on the
    /// batch's latent rows at `latent_lr`. Weights stay fixed.
    pub fn alpha_step(&mut self, images: &Tensor, rows: &[usize], latent_lr: f64) -> Result<f64> {
        let (loss, grads, unique, zleaf) = self.loss_and_grads(images, rows, &[ParamGroup::Arch])?;
        let lr = self.settings.alpha_lr;
        for id in self.network.store.ids_in(ParamGroup::Arch) {
            let Some(g) = grads.param(id) else { continue };
            let g = g.clone();
            let p = self.network.store.get_mut(id);
            self.alpha_opt.update(id.0 as u64, p, &g, lr)?;
        }
        self.update_latents(&grads, &unique, zleaf, latent_lr)?;
        Ok(loss)
    }

    /// One pass over the W rows, interleaving an architecture step after
    /// every weight step when the network is searchable.
    pub fn run_epoch(&mut self, images: &Tensor) -> Result<EpochRecord> {
        if images.shape().first() != Some(&self.latents.len()) {
            return Err(Error::Dataset(format!(
                "dataset has {:?} images, latent table has {} rows",
                images.shape().first(),
                self.latents.len()
            )));
        }
        let start = Instant::now();
        let lr = self.current_lr();
        let bs = self.settings.batch_size;
        let mut w = self.w_rows.clone();
        let mut a = self.a_rows.clone();
        w.shuffle(&mut self.rng);
        a.shuffle(&mut self.rng);
        let search = self.network.is_searchable() && !a.is_empty();
        let a_batches: Vec<&[usize]> = a.chunks(bs).collect();
        let (mut w_sum, mut w_n, mut a_sum, mut a_n) = (0.0, 0usize, 0.0, 0usize);
        for (i, batch) in w.chunks(bs).enumerate() {
            let imgs = select_rows(images, batch);
            w_sum += self.glo_step(&imgs, batch, lr)? * batch.len() as f64;
            w_n += batch.len();
            if search {
                let ab = a_batches[i % a_batches.len()];
                let imgs = select_rows(images, ab);
                a_sum += self.alpha_step(&imgs, ab, lr)? * ab.len() as f64;
                a_n += ab.len();
            }
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            w_loss: w_sum / w_n as f64,
            a_loss: search.then(|| a_sum / a_n as f64),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(&mut self, images: &Tensor, mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&SearchState, &EpochRecord) -> Result<()>,
    {
        let mut history = Vec::new();
        while self.epoch < self.settings.epochs {
            let rec = self.run_epoch(images)?;
            on_epoch(self, &rec)?;
            history.push(rec);
        }
        Ok(history)
    }

    /// Softmax weights of every mixed edge, in edge order.
    pub fn edge_softmax(&self) -> Vec<Vec<f64>> {
        self.network
            .edges
            .iter()
            .map(|e| edge_weights(&self.network.store, e))
            .collect()
    }

    /// Raw logits of every mixed edge, in edge order.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.network
            .edges
            .iter()
            .map(|e| e.alpha.map_or_else(Vec::new, |a| self.network.store.get(a).data().to_vec()))
            .collect()
    }
}

/// Images at the given batch positions.
pub fn select_rows(images: &Tensor, rows: &[usize]) -> Tensor {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(per * rows.len());
    for &r in rows {
        data.extend_from_slice(&images.data()[r * per..(r + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_vec(&shape, data)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub history: Vec<EpochRecord>,
}

impl SearchOutcome {
    pub fn final_alphas(&self) -> Vec<Vec<f64>> {
        self.state.alphas()
    }
}

/// Builds the search state and runs every epoch.
pub fn run_search<F>(
    network: Network,
    images: &Tensor,
    settings: TrainSettings,
    seed: u64,
    on_epoch: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&SearchState, &EpochRecord) -> Result<()>,
{
    let size = network.topology.output_size();
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::Dataset(format!(
            "images {s:?} do not match generator output 3x{size}x{size}"
        )));
    }
    let mut state = SearchState::new_search(network, s[0], settings, seed)?;
    let history = state.run(images, on_epoch)?;
    Ok(SearchOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{build_supergraph, GraphSpec};

    fn tiny() -> (Network, Tensor) {
        let net = build_supergraph(&GraphSpec::new(2, 1, 2, 8, 4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = Tensor::rand_uniform(&[6, 3, 8, 8], -0.8, 0.8, &mut rng);
        (net, imgs)
    }

    fn settings() -> TrainSettings {
        TrainSettings {
            batch_size: 2,
            epochs: 2,
            levels: 2,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn split_is_disjoint_cover() {
        let (net, _) = tiny();
        let s = SearchState::new_search(net, 7, settings(), 3).unwrap();
        let mut all = [s.w_rows.clone(), s.a_rows.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(s.w_rows.len(), 4);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (net, imgs) = tiny();
        let mut s = SearchState::new_search(net, 6, settings(), 3).unwrap();
        let batch = select_rows(&imgs, &[0, 1]);
        let before = (s.network.store.ids_in(ParamGroup::Weight), s.latents.clone());
        let w0: Vec<Tensor> = before.0.iter().map(|&i| s.network.store.get(i).clone()).collect();
        let l0 = s.glo_step(&batch, &[0, 1], 0.0).unwrap();
        let l1 = s.glo_step(&batch, &[0, 1], 0.0).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(s.latents, before.1);
        for (i, w) in before.0.iter().zip(&w0) {
            assert_eq!(s.network.store.get(*i), w);
        }
    }

    #[test]
    fn small_step_descends() {
        let (net, imgs) = tiny();
        let mut s = SearchState::new_search(net, 6, settings(), 3).unwrap();
        let batch = select_rows(&imgs, &[0, 1, 2]);
        let l0 = s.glo_step(&batch, &[0, 1, 2], 1e-4).unwrap();
        let l1 = s.glo_step(&batch, &[0, 1, 2], 0.0).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn epochs_are_reproducible() {
        let run = || {
            let (net, imgs) = tiny();
            run_search(net, &imgs, settings(), 5, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.w_loss, r.a_loss, r.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.final_alphas(), b.final_alphas());
        assert_eq!(a.history.len(), 2);
        assert!(a.state.latents.max_row_norm() <= 1.0 + 1e-12);
        assert!(a.history.iter().all(|r| r.a_loss.is_some()));
    }

    #[test]
    fn mismatched_images_rejected() {
        let (net, _) = tiny();
        let imgs = Tensor::zeros(&[4, 3, 16, 16]);
        assert!(run_search(net, &imgs, settings(), 1, |_, _| Ok(())).is_err());
    }
}
