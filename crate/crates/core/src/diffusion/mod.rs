//! Pixel-space conditional denoiser, its objective and training.

pub mod dists;
pub mod model;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;

pub use dists::{dists_like, ea_dists, sobel, sobel_var, DistsLike};
pub use model::{IdentityInputs, RestorationModel, IMAGE_SIDE};
pub use schedule::{add_noise, decode_pixels, encode_pixels, make_schedule, predict_x0, NoiseSchedule};
pub use text::{Prompt, PromptTokens, TextEncoder, PROMPT_LEN, VOCAB};
pub use train::{
    ea_active, loss_from_prediction, loss_graph, train, training_loss, LossBreakdown, Phase, StepRecord, TrainBatch,
    TrainState,
};
pub use unet::{Denoiser, TtabHook};
