//! Dataset plumbing: versioned on-disk annotation records, the split-aware
//! loader with access auditing, the synthetic articulated-skeleton
//! generator, occlusion masking, and text perturbation for robustness
//! sweeps.

mod mask;
mod perturb;
mod records;
mod synth;

pub use mask::{apply_mask, MASK_FILL};
pub use perturb::{text_perturb, PerturbMode, SynonymTable};
pub use records::{
    load_dataset, load_image, parse_records, write_records, CategorySplit, Dataset,
    DatasetSample, SplitPart,
};
pub use synth::{
    blob_style, built_in_templates, generate_synthetic, BlobStyle, GenerationSummary,
    JointSpec, SyntheticSpec, Template,
};
