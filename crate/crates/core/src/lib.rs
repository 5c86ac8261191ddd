//! Embedding-guided 3D image registration.
//!
//! A fixed and a moving volume are aligned in three consecutive stages:
//!
//! 1. **affine**: per-voxel embeddings are matched on a regular grid inside the
//!    body mask, low-similarity matches are dropped, and a 4×4 affine is fitted
//!    by least squares;
//! 2. **coarse**: the grid points are re-matched after the affine warp and the
//!    sparse displacements are interpolated into a dense field;
//! 3. **deform**: a dense displacement field is optimized directly on a
//!    multi-resolution pyramid against local NCC, an embedding-similarity
//!    term, and a gradient smoothness penalty.
//!
//! Embeddings are pluggable (any C-channel `.evol` file); a deterministic
//! synthetic descriptor is built in. Evaluation covers Dice, average surface
//! distance and Jacobian-determinant statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod affine;
pub mod deform;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod field;
mod filter;
mod interp;
pub mod io;
pub mod labels;
pub mod mask;
pub mod matching;
mod par;
pub mod pipeline;
pub mod slices;
pub mod synthetic;
pub mod volume;

pub use affine::{apply_affine, apply_affine_embedding, fit_affine, AffineFit, AffineTransform};
pub use deform::{
    correlation_feature, gradient_check, local_ncc_loss, optimize_field, sam_loss, smoothness_loss,
    CorrelationFeature, LossInputs, LossReport, LossTerm, OptParams,
};
pub use embedding::{normalize_embedding, synth_descriptors, EmbeddingVolume};
pub use error::{Error, Result};
pub use eval::{average_surface_distance, dice, jacobian_stats, MetricsReport};
pub use field::{
    build_coarse_field, compose_fields, warp_by_field, warp_embedding_by_field,
    warp_labels_by_field, DisplacementField,
};
pub use labels::LabelVolume;
pub use mask::{compute_body_mask, BodyMask};
pub use matching::{grid_match, match_point, match_points, MatchParams, MatchSet};
pub use pipeline::{
    run_pipeline, run_with_inputs, PipelineConfig, PipelineInputs, RunReport, Stage,
};
pub use slices::{emit_slices, SlicePanel};
pub use volume::{resample_isotropic, window_normalize, Dims, Volume};
