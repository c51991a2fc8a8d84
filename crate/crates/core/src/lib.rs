//! Concept-driven routing between an AI classifier and a human expert.
//!
//! A decoupled concept bottleneck model ([`cbm`]) is trained first and
//! frozen. A gating network over its concept predictions ([`strategy`])
//! then picks AI-only, AI+Human or Defer-to-Human per instance, and a
//! fusion head combines model logits with the expert's label. [`eval`]
//! sweeps the human-cost weight to trace accuracy against coverage, and
//! [`intervene`] edits concepts at test time.
//!
//! Everything is generic over [`Scalar`]; the aliases at the crate root fix
//! the scalar to `f64`.

pub mod cbm;
pub mod checkpoint;
pub mod container;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod expert;
pub mod intervene;
pub mod numerics;
pub mod scalar;
pub mod strategy;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type ProbVector = numerics::ProbVector<f64>;
pub type DifferentiableStack = numerics::DifferentiableStack<f64>;
pub type TripletDataset = dataio::TripletDataset<f64>;
pub type SplitBundle = dataio::SplitBundle<f64>;
pub type DcbmModel = cbm::DcbmModel<f64>;
pub type ConceptActivations = cbm::ConceptActivations<f64>;
pub type GatingNet = strategy::GatingNet<f64>;
pub type FusionNet = strategy::FusionNet<f64>;

pub type MatrixF32 = numerics::Matrix<f32>;
pub type DcbmModelF32 = cbm::DcbmModel<f32>;
pub type GatingNetF32 = strategy::GatingNet<f32>;
pub type FusionNetF32 = strategy::FusionNet<f32>;

/// SplitMix64 step, used to derive independent sub-seeds from one run seed.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
