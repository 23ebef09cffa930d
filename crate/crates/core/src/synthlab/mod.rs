//! Synthetic identity/age-factored faces, degradation and datasets.

mod dataset;
mod degrade;
mod face;

pub use dataset::{
    build_dataset, build_dataset_with, AgeSpread, Dataset, DatasetManifest, DatasetOptions, ManifestRecord,
    Sample, Split, MANIFEST_FILE, MAX_REFERENCES,
};
pub use degrade::{degrade, DegradeConfig, DegradeRanges, DOWNSCALE_FACTORS, QUANT_LEVELS};
pub use face::{
    gen_identity, geom, render_face, render_face_sized, AgeFactor, IdentitySpec, RenderedFace, DEFAULT_SIZE,
    GEOMETRY_DIM, MAX_AGE, MIN_AGE,
};
