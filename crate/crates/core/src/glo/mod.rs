//! Reconstruction objective, latent table, optimizers and the search loop.

pub mod latent;
pub mod loss;
pub mod optim;
pub mod search;

pub use latent::{project_latent, LatentTable};
pub use loss::{lap1_loss, lap1_loss_var, lap_pyramid, lap_reconstruct, recon_loss, recon_loss_var};
pub use optim::{adam_step, cosine_lr, sgd_step, OptimizerKind, OptimizerState, Slot};
pub use search::{run_search, select_rows, EpochRecord, SearchOutcome, SearchState, TrainSettings};
