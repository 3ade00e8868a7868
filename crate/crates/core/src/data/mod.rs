//! Dataset manifests, the procedural synthetic corpus and the
//! identity-disjoint query/gallery protocol.

mod manifest;
mod split;
mod synth;

pub use manifest::{load_image, load_manifest, DatasetManifest, ImageRecord, Platform};
pub use split::{split_protocol, Split, SplitConfig};
pub use synth::{
    generate_synthetic, render_person, AerialTransform, BodyBand, SyntheticDataset, SyntheticSpec,
};

/// SplitMix64 finaliser, used to derive independent per-item seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
