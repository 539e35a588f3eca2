//! Phantom datasets, volume files, manifests and subject-level splits.

mod manifest;
mod split;
mod synth;
mod volume;

pub use manifest::{parse_manifest, read_manifest, write_manifest, Lesion, VolumeRecord};
pub use split::{audit_leakage, kfold, split_stratified};
pub use synth::{
    generate_synthetic, lesion_mask, normalize_volume, subject_label, synth_subject, Phantom, SynthConfig,
};
pub use volume::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC};
