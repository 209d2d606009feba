//! Two-view (vehicle + infrastructure) trajectory forecasting with
//! cross-graph attention fusion, a Laplace mixture decoder and post-hoc
//! conformal prediction regions.

pub mod conformal;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod scene;
pub mod synthgen;
pub mod trainer;

pub use decoder::{best_mode, loss, LossConfig, MixturePrediction};
pub use encoder::{EncoderConfig, NodeEmbedding};
pub use error::{Error, Result};
pub use fusion::FusionConfig;
pub use metrics::MetricRow;
pub use model::{FusionMode, Model, ModelConfig, PreparedScenario};
pub use scene::{AgentTrack, LaneSegment, NormalizedScenario, Point, Scenario, SceneGraph, View};
pub use synthgen::GenConfig;
