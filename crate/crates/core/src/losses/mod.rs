//! Training objectives: cosine similarity between embedding sequences, frame-level
//! cross entropy, and CTC with greedy decoding.

mod cross_entropy;
mod ctc;
mod similarity;

pub use cross_entropy::{frame_cross_entropy, frame_cross_entropy_value, FrameTargets};
pub use ctc::{
    ctc_brute_force, ctc_greedy_decode, ctc_loss, ctc_loss_on_tape, required_frames, CtcLattice,
    CtcLoss, BLANK,
};
pub use similarity::{
    similarity_loss, similarity_loss_on_tape, Reduction, SimilarityLossValue, DEGENERATE_NORM,
};
