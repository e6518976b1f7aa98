//! Distance-aware classifier head: a spectral-normalized MLP, a frozen
//! random Fourier feature map and a Laplace-style GP output layer, plus the
//! MC-dropout baseline and attention pooling used at slide level.

mod abmil;
mod checkpoint;
mod dropout;
mod head;
mod mlp;
mod rff;
mod train;

pub use abmil::{AbmilConfig, AbmilNet, AbmilPooled};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use dropout::{mc_dropout_predict, DropoutHead, McDropoutOutput, DEFAULT_PASSES};
pub use head::{probs_from_moments, BatchPrediction, GpPosterior, PredictiveIntegral, PredictiveOutput, SngpHead};
pub use mlp::{Activation, DenseLayer, SnMlp, SnMlpConfig};
pub use rff::RffProjection;
pub use train::{fit_head, FitReport, TrainConfig};
