//! Identity conditioning: global embedding, organ-weighted facial tokens and
//! their fusion into denoiser tokens.

pub mod facial;
pub mod fusion;
pub mod identity;
pub mod patches;
pub mod refs;

pub use facial::{encode_facial, FacialBatch, FacialTokens, PatchEncoder};
pub use fusion::{id_fusion, FusedIdentityTokens, FusionShape, IdFusion};
pub use identity::{
    identity_separation, train_identity_encoder, train_identity_encoder_with, IdentityEmbedding, IdentityEncoder,
    IdentityTrainConfig, Separation,
};
pub use patches::{patch_weights, patchify, pool_mask, reweight_tokens, Grid, PatchWeightMap};
pub use refs::{aggregate_global, mean_embedding, ReferenceEntry, ReferenceSet, MAX_REFERENCES};
