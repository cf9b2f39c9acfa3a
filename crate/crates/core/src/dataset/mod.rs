//! Paired sketch/face dataset construction: background cleanup, edge
//! extraction at three abstraction levels, stochastic region recombination
//! and the on-disk manifest.

mod build;
mod edges;
mod sra;
mod toy;

pub use build::{
    build_dataset, load_samples, load_split, process_image, split_ids, DatasetConfig, DatasetManifest,
    LevelSketches, LoadedSample, PairedSample, ProcessedImage, Split, SplitName, SraSketch, MANIFEST_FILE,
};
pub use edges::{extract_edges, extract_edges_with, remove_background, AbstractionLevel, EdgeConfig};
pub use sra::{sra_choice, sra_recombine, stitch, SraProvenance};
pub use toy::{toy_faces, write_toy_corpus, ToyFace};
