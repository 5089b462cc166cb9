//! File formats: volumes, markers, manifests, checkpoints, and the
//! synthetic dataset generator.

mod checkpoint;
pub mod codec;
mod manifest;
mod markers;
mod synth;
mod volume;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use markers::{
    markers_to_csv, parse_case_markers, parse_markers_csv, read_markers, write_markers,
    MARKER_HEADER,
};
pub use synth::{
    case_id, hard_indices, oracle_markers, synth_case, synth_cases, synth_dataset, SynthConfig,
    MIN_SYNTH_EXTENT, ORACLE_BG_MARKER, ORACLE_ET_MARKER, ORACLE_WT_MARKER,
};
pub use volume::{
    decode_labels, decode_volume, encode_labels, encode_nifti, encode_volume, read_labels,
    read_volume, write_labels, write_volume, Dtype, NATIVE_MAGIC,
};
