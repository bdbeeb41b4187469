//! Safety-critical scenario generation and closed-loop adversarial training
//! for 2D driving policies.
//!
//! The crate turns logged traffic scenarios into collision-prone variants by
//! resampling one opponent's future: candidate futures from a traffic prior are
//! weighted by how likely they are to hit the ego vehicle's recent rollouts,
//! and the most likely candidate replaces the logged one. The [`pipeline`]
//! module alternates this generation with policy optimization.

pub mod agents;
pub mod eval;
pub mod forge;
pub mod geometry;
pub mod pipeline;
pub mod predictor;
pub mod render;
pub mod resampler;
pub mod scenario;
pub mod simulator;
