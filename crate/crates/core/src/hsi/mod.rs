//! Hyperspectral cubes: file format, synthesis, patch extraction and splits.

mod cube;
mod patch;
mod split;
mod synth;

pub use cube::{convert_raw, load_cube, save_cube, HsiCube, RawHeader, RawType, CUBE_HEADER_LEN, CUBE_MAGIC};
pub(crate) use cube::{verify_crc, Reader};
pub use patch::{pad_cube, BandStats, PatchExtractor, PatchSample};
pub use split::{largest_remainder, stratified_split, Split, SplitRatio, SplitSpec};
pub use synth::{synth_cube, synth_cube_with_signatures, SynthCube};
