//! Metrics, toy age estimator and the ablation runners.

pub mod age;
pub mod metrics;
pub mod report;
pub mod runners;

pub use age::{train_age_estimator, AgeEstimator, AgeTrainConfig};
pub use metrics::{ids, ids_batch, mean_abs_error, mse, psnr, ssim, ssim_with, SsimParams, PSNR_CAP};
pub use report::{AblationResult, MetricReport, SuiteReport, VARIANT_LABELS};
pub use runners::{
    face_region, gap_bucket_items, masked_change, run_age_gap_sweep, run_guidance_ablation, run_identity_ablation,
    select_items, EvalContext, EvalItem, GapBucket, IDENTITY_VARIANTS,
};
