//! On-disk formats shared by every stage of the pipeline.

pub mod frames;
pub mod genjob;
pub mod manifest;
pub mod pavf;

pub use frames::{compile_masks, expand_to_frames, read_masks, write_masks, FrameMask, MaskSpec};
pub use genjob::{read_generation_manifest, write_generation_manifest, GenerationJob};
pub use manifest::{parse_manifest, read_manifest, DatasetManifest, Domain, Label, ManifestEntry};
pub use pavf::{read_tensor, write_tensor, PavfTensor};
