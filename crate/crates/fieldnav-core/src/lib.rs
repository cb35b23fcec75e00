//! Trajectory generation on synthetic 2-D occupancy-grid worlds.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`world`] — synthetic occupancy grids (open rooms, T-junctions, winding
//!    corridors, cluttered fields), expert demonstrations from a grid planner,
//!    and exact Euclidean distance transforms.
//! 2. [`features`] — temporal feature sequences and their closed-form
//!    smoothing projection, plus the softmax-weighted context vector used to
//!    condition the flow model.
//! 3. [`field`] — a variational success-probability field solved from
//!    demonstration labels with gradient and curvature penalties.
//! 4. [`prior`] — multi-modal trajectory priors: K-shortest paths through the
//!    field's energy graph, diversity selection, and a softmax mixture.
//! 5. [`flow`] — a small velocity-field MLP trained by flow matching with
//!    smoothness and clearance regularizers, and Euler-integration refinement.
//! 6. [`metrics`] — episode execution (success rate, SPL, collisions) and
//!    trajectory smoothness (integrated squared snap).
//! 7. [`pipeline`] — end-to-end episode orchestration, ablation modes, paired
//!    seed schedules, and refinement-step sweeps.
//!
//! All randomness flows through explicit 64-bit seeds; every stage is
//! deterministic given its configuration.

pub mod error;
pub mod features;
pub mod field;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod trajectory;
pub mod world;

pub use error::{Error, Result};
pub use features::{FeatureSequence, RefinedFeatures};
pub use field::SuccessField;
pub use flow::{FlowModel, TrainConfig};
pub use metrics::{EpisodeResult, MetricsReport};
pub use pipeline::{AblationMode, PipelineConfig};
pub use prior::MixturePrior;
pub use trajectory::{Point2, Trajectory};
pub use world::{DistanceField, LabelField, OccupancyGrid, Scenario, ScenarioKind};

/// Mixes a sequence of seed parts into a single 64-bit stream seed.
///
/// Used to derive independent, reproducible RNG streams for sub-tasks
/// (scenario layout, demonstrations, prior sampling, training batches, ...)
/// from one master seed without correlated streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 finalizer applied over a running combine.
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        acc = acc.wrapping_add(p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        acc ^= acc >> 30;
        acc = acc.wrapping_mul(0x94d0_49bb_1331_11eb);
        acc ^= acc >> 31;
    }
    acc
}
