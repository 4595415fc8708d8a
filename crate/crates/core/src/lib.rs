//! MOL-Mamba: molecular representation learning on bi-level graphs.
//!
//! The pipeline ingests molecules (atoms, 3-D positions, bonds, optional
//! electrochemical descriptors), mines a fragment vocabulary, and trains a
//! stack of encoders:
//!
//! - a fragment-graph GIN encoder,
//! - an atom-level geometric encoder feeding a graph-modulated selective
//!   state-space (Mamba) module with fragment-aware node sorting,
//! - a descriptor encoder and Mamba-Transformer fuser with masked
//!   descriptor reconstruction.
//!
//! Training runs in two self-supervised stages (structure collaboration,
//! then electronic-semantic fusion) followed by supervised fine-tuning.
//! Everything runs on an in-crate f64 autodiff tensor engine so results
//! are deterministic given a seed.

pub mod encoders;
pub mod fragmenter;
pub mod fuser;
pub mod gssm;
pub mod model;
pub mod molgraph;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

/// Cap the global worker pool used for corpus-level parallelism.
///
/// Call once before any parallel work; later calls are ignored by rayon.
pub fn configure_threads(n: Option<usize>) {
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
