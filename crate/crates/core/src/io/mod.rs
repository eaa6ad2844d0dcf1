//! On-disk formats: the tensor container, checkpoints and corpora.

mod checkpoint;
mod container;
mod corpus;

pub use checkpoint::{config_json, Checkpoint, CheckpointKind, TrainerState};
pub use container::{sha256_hex, Entry, TensorFile, FORMAT_VERSION, MAGIC};
pub use corpus::{load_corpus, read_manifest, save_corpus, ManifestRow, MANIFEST_HEADER};
