//! Scenario data model, ego-frame normalization, scene graphs and the
//! JSON-lines scenario format.

mod graph;
mod io;
mod normalize;

pub use graph::{build_graph, Edge, SceneGraph};
pub use io::{read_scenarios, scenario_from_json, scenario_to_json, write_scenarios};
pub use normalize::{normalize, NormalizedAgent, NormalizedLane, NormalizedScenario, RigidTransform};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 2D point or vector in meters.
pub type Point = [f64; 2];

pub const DEFAULT_HISTORY_LEN: usize = 50;
pub const DEFAULT_FUTURE_LEN: usize = 50;
/// Sampling interval of every track, seconds.
pub const STEP_SECONDS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Vehicle,
    Infrastructure,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Vehicle => "vehicle",
            View::Infrastructure => "infrastructure",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    pub view: View,
    #[serde(rename = "xy")]
    pub positions: Vec<Point>,
    #[serde(rename = "mask")]
    pub observed: Vec<bool>,
}

impl AgentTrack {
    pub fn fully_observed(id: impl Into<String>, view: View, positions: Vec<Point>) -> Self {
        let observed = vec![true; positions.len()];
        Self {
            id: id.into(),
            view,
            positions,
            observed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub view: View,
    pub start: Point,
    pub end: Point,
}

impl LaneSegment {
    pub fn midpoint(&self) -> Point {
        [
            0.5 * (self.start[0] + self.end[0]),
            0.5 * (self.start[1] + self.end[1]),
        ]
    }
}

fn default_history_len() -> usize {
    DEFAULT_HISTORY_LEN
}

fn default_future_len() -> usize {
    DEFAULT_FUTURE_LEN
}

/// One two-view scene: agent tracks and lane segments from both the
/// vehicle and the infrastructure side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub ego_agent_id: String,
    pub target_ids: Vec<String>,
    #[serde(rename = "t_h", default = "default_history_len")]
    pub history_len: usize,
    #[serde(rename = "t_f", default = "default_future_len")]
    pub future_len: usize,
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LaneSegment>,
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: scenario {scenario_id}: {message}")]
    InvalidAt {
        line: usize,
        scenario_id: String,
        message: String,
    },
    #[error("scenario {scenario_id}: {message}")]
    Invalid { scenario_id: String, message: String },
    #[error("scenario {scenario_id}: ego heading is undefined (no nonzero history displacement)")]
    DegenerateHeading { scenario_id: String },
    #[error("graph radius must be positive, got {0}")]
    Radius(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Scenario {
    pub fn agent(&self, id: &str, view: View) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id && a.view == view)
    }

    pub fn agents_in(&self, view: View) -> impl Iterator<Item = &AgentTrack> {
        self.agents.iter().filter(move |a| a.view == view)
    }

    fn invalid(&self, message: impl Into<String>) -> SceneError {
        SceneError::Invalid {
            scenario_id: self.scenario_id.clone(),
            message: message.into(),
        }
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<(), SceneError> {
        let th = self.history_len;
        let full = th + self.future_len;
        if th == 0 {
            return Err(self.invalid("history length must be positive"));
        }
        let mut seen = HashSet::new();
        for a in &self.agents {
            if !seen.insert((a.id.as_str(), a.view)) {
                return Err(self.invalid(format!("duplicate agent {} in {} view", a.id, a.view.as_str())));
            }
            if a.positions.len() != th && a.positions.len() != full {
                return Err(self.invalid(format!(
                    "agent {} has {} steps, expected {th} or {full}",
                    a.id,
                    a.positions.len()
                )));
            }
            if a.observed.len() != a.positions.len() {
                return Err(self.invalid(format!(
                    "agent {} mask length {} differs from {} positions",
                    a.id,
                    a.observed.len(),
                    a.positions.len()
                )));
            }
            if !a.observed[..th].iter().any(|&m| m) {
                return Err(self.invalid(format!("agent {} has no observed history step", a.id)));
            }
            if a.positions.iter().flatten().any(|v| !v.is_finite()) {
                return Err(self.invalid(format!("agent {} has non-finite coordinates", a.id)));
            }
        }
        for (i, l) in self.lanes.iter().enumerate() {
            if l.start == l.end {
                return Err(self.invalid(format!("lane {i} has zero length")));
            }
        }
        if self.agent(&self.ego_agent_id, View::Vehicle).is_none() {
            return Err(self.invalid(format!(
                "ego agent {} is not in the vehicle view",
                self.ego_agent_id
            )));
        }
        for t in &self.target_ids {
            let Some(a) = self.agent(t, View::Vehicle) else {
                return Err(self.invalid(format!("target {t} is not in the vehicle view")));
            };
            if a.positions.len() != full || !a.observed[th..].iter().all(|&m| m) {
                return Err(self.invalid(format!("target {t} lacks a fully observed future")));
            }
        }
        Ok(())
    }
}
