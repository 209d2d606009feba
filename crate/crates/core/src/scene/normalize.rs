use serde::{Deserialize, Serialize};

use super::{AgentTrack, Point, Scenario, SceneError, View};

/// World-to-ego rigid transform: translate by `-origin`, then rotate by
/// `-heading`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub origin: Point,
    pub heading: f64,
}

impl RigidTransform {
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn apply_vector(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn invert(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.origin[0],
            s * p[0] + c * p[1] + self.origin[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAgent {
    pub id: String,
    pub view: View,
    /// History positions in the ego frame, gaps linearly interpolated.
    pub history: Vec<Point>,
    /// `displacements[t] = history[t] - history[t-1]`; the first entry is zero.
    pub displacements: Vec<Point>,
    pub observed: Vec<bool>,
    pub future: Option<Vec<Point>>,
}

impl NormalizedAgent {
    /// Position at the last history step (t = 0).
    pub fn last(&self) -> Point {
        *self.history.last().expect("nonempty history")
    }

    /// First history position plus the running sum of displacements.
    pub fn reconstruct_history(&self) -> Vec<Point> {
        let mut p = self.history[0];
        self.displacements
            .iter()
            .map(|d| {
                p = [p[0] + d[0], p[1] + d[1]];
                p
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLane {
    pub view: View,
    pub start: Point,
    pub end: Point,
    pub displacement: Point,
    pub midpoint: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScenario {
    pub scenario_id: String,
    pub ego_agent_id: String,
    pub target_ids: Vec<String>,
    pub history_len: usize,
    pub future_len: usize,
    pub transform: RigidTransform,
    pub agents: Vec<NormalizedAgent>,
    pub lanes: Vec<NormalizedLane>,
}

impl NormalizedScenario {
    pub fn agents_in(&self, view: View) -> impl Iterator<Item = &NormalizedAgent> {
        self.agents.iter().filter(move |a| a.view == view)
    }

    pub fn lanes_in(&self, view: View) -> impl Iterator<Item = &NormalizedLane> {
        self.lanes.iter().filter(move |l| l.view == view)
    }

    pub fn agent(&self, id: &str, view: View) -> Option<&NormalizedAgent> {
        self.agents.iter().find(|a| a.id == id && a.view == view)
    }

    /// Copy with one view's agents and lanes removed.
    pub fn without_view(&self, view: View) -> Self {
        let mut out = self.clone();
        out.agents.retain(|a| a.view != view);
        out.lanes.retain(|l| l.view != view);
        out
    }
}

/// Linear interpolation over unobserved steps; leading and trailing gaps
/// hold the nearest observed position.
fn fill_gaps(positions: &[Point], observed: &[bool]) -> Vec<Point> {
    let obs: Vec<usize> = (0..positions.len()).filter(|&i| observed[i]).collect();
    (0..positions.len())
        .map(|i| {
            if observed[i] {
                return positions[i];
            }
            let next = obs.partition_point(|&o| o < i);
            match (next.checked_sub(1).map(|p| obs[p]), obs.get(next).copied()) {
                (Some(a), Some(b)) => {
                    let w = (i - a) as f64 / (b - a) as f64;
                    [
                        positions[a][0] + w * (positions[b][0] - positions[a][0]),
                        positions[a][1] + w * (positions[b][1] - positions[a][1]),
                    ]
                }
                (Some(a), None) => positions[a],
                (None, Some(b)) => positions[b],
                (None, None) => positions[i],
            }
        })
        .collect()
}

fn ego_heading(scenario: &Scenario, ego: &AgentTrack) -> Result<(Point, f64), SceneError> {
    let th = scenario.history_len;
    let observed = ego.observed[..th].iter().filter(|&&m| m).count();
    if observed < 2 {
        return Err(SceneError::Invalid {
            scenario_id: scenario.scenario_id.clone(),
            message: format!("ego needs at least 2 observed history steps, has {observed}"),
        });
    }
    let hist = fill_gaps(&ego.positions[..th], &ego.observed[..th]);
    let origin = hist[th - 1];
    for t in (1..th).rev() {
        let dx = hist[t][0] - hist[t - 1][0];
        let dy = hist[t][1] - hist[t - 1][1];
        if dx != 0.0 || dy != 0.0 {
            return Ok((origin, dy.atan2(dx)));
        }
    }
    Err(SceneError::DegenerateHeading {
        scenario_id: scenario.scenario_id.clone(),
    })
}

/// Expresses every coordinate of both views in the ego frame (ego at the
/// origin at t = 0, heading along +x) and encodes histories as displacements.
pub fn normalize(scenario: &Scenario) -> Result<NormalizedScenario, SceneError> {
    scenario.validate()?;
    let th = scenario.history_len;
    let ego = scenario
        .agent(&scenario.ego_agent_id, View::Vehicle)
        .expect("validated");
    let (origin, heading) = ego_heading(scenario, ego)?;
    let tf = RigidTransform { origin, heading };

    let agents = scenario
        .agents
        .iter()
        .map(|a| {
            let filled = fill_gaps(&a.positions[..th], &a.observed[..th]);
            let history: Vec<Point> = filled.iter().map(|&p| tf.apply(p)).collect();
            let mut displacements = Vec::with_capacity(th);
            displacements.push([0.0, 0.0]);
            for t in 1..th {
                displacements.push([
                    history[t][0] - history[t - 1][0],
                    history[t][1] - history[t - 1][1],
                ]);
            }
            let future = (a.positions.len() > th)
                .then(|| a.positions[th..].iter().map(|&p| tf.apply(p)).collect());
            NormalizedAgent {
                id: a.id.clone(),
                view: a.view,
                history,
                displacements,
                observed: a.observed[..th].to_vec(),
                future,
            }
        })
        .collect();

    let lanes = scenario
        .lanes
        .iter()
        .map(|l| {
            let start = tf.apply(l.start);
            let end = tf.apply(l.end);
            NormalizedLane {
                view: l.view,
                start,
                end,
                displacement: [end[0] - start[0], end[1] - start[1]],
                midpoint: tf.apply(l.midpoint()),
            }
        })
        .collect();

    Ok(NormalizedScenario {
        scenario_id: scenario.scenario_id.clone(),
        ego_agent_id: scenario.ego_agent_id.clone(),
        target_ids: scenario.target_ids.clone(),
        history_len: th,
        future_len: scenario.future_len,
        transform: tf,
        agents,
        lanes,
    })
}
