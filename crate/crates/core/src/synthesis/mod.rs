//! Copy-and-blend data synthesis.
//!
//! An object cut from one image is seamlessly cloned into another by solving
//! a Poisson equation per color channel. In normal mode the pasted object is
//! a distractor and the ground truth is kept; in reverse mode the target's
//! own object is pasted onto a foreign background and becomes the ground
//! truth.

pub mod blend;
pub mod dataset;
pub mod poisson;

pub use blend::{
    bounding_box, object_patch, seamless_clone, synthesize_normal, synthesize_reverse, Blend, CloneResult,
    LabeledImage, Patch, SynthMode, MAX_OVERLAP, PLACEMENT_ATTEMPTS, SCALE_RANGE,
};
pub use dataset::{build_synth_dataset, read_manifest, write_toy_corpus, ManifestEntry, Modes, SynthSummary, MANIFEST};
pub use poisson::{laplacian, poisson_solve, residual_norm, PoissonProblem, PoissonSolution, DEFAULT_TOLERANCE};
