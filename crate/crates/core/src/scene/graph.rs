use super::{NormalizedScenario, Point, SceneError, View};

/// Directed edge between local node indices. `rel` is the position of the
/// source minus the position of the destination at t = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: Point,
}

/// Per-view graph of agent nodes and lane nodes.
///
/// Agent indices are local to the view (`agent_index[i]` is the position of
/// node `i` in `NormalizedScenario::agents`); likewise for lanes.
#[derive(Clone, Debug)]
pub struct SceneGraph {
    pub view: View,
    pub radius: f64,
    pub agent_ids: Vec<String>,
    pub agent_index: Vec<usize>,
    pub lane_index: Vec<usize>,
    /// Both directions of every agent pair within the radius.
    pub agent_edges: Vec<Edge>,
    /// Agent (src) to lane (dst) edges, by lane midpoint distance.
    pub lane_edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn num_agents(&self) -> usize {
        self.agent_index.len()
    }

    pub fn num_lanes(&self) -> usize {
        self.lane_index.len()
    }

    pub fn undirected_pair_count(&self) -> usize {
        self.agent_edges.iter().filter(|e| e.src < e.dst).count()
    }

    /// For each agent, the agents whose edge points at it (its attention
    /// neighborhood), in ascending order.
    pub fn agent_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_agents()];
        for e in &self.agent_edges {
            out[e.dst].push(e.src);
        }
        out
    }

    pub fn lane_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_agents()];
        for e in &self.lane_edges {
            out[e.src].push(e.dst);
        }
        out
    }
}

fn within(a: Point, b: Point, radius: f64) -> bool {
    (a[0] - b[0]).hypot(a[1] - b[1]) <= radius
}

pub fn build_graph(ns: &NormalizedScenario, view: View, radius: f64) -> Result<SceneGraph, SceneError> {
    if !(radius > 0.0) {
        return Err(SceneError::Radius(radius));
    }
    let agent_index: Vec<usize> = (0..ns.agents.len()).filter(|&i| ns.agents[i].view == view).collect();
    let lane_index: Vec<usize> = (0..ns.lanes.len()).filter(|&i| ns.lanes[i].view == view).collect();
    let last: Vec<Point> = agent_index.iter().map(|&i| ns.agents[i].last()).collect();

    let mut agent_edges = Vec::new();
    for (i, &xi) in last.iter().enumerate() {
        for (j, &xj) in last.iter().enumerate() {
            if i != j && within(xi, xj, radius) {
                agent_edges.push(Edge {
                    src: i,
                    dst: j,
                    rel: [xi[0] - xj[0], xi[1] - xj[1]],
                });
            }
        }
    }
    let mut lane_edges = Vec::new();
    for (i, &xi) in last.iter().enumerate() {
        for (l, &li) in lane_index.iter().enumerate() {
            let mid = ns.lanes[li].midpoint;
            if within(xi, mid, radius) {
                lane_edges.push(Edge {
                    src: i,
                    dst: l,
                    rel: [xi[0] - mid[0], xi[1] - mid[1]],
                });
            }
        }
    }
    Ok(SceneGraph {
        view,
        radius,
        agent_ids: agent_index.iter().map(|&i| ns.agents[i].id.clone()).collect(),
        agent_index,
        lane_index,
        agent_edges,
        lane_edges,
    })
}
