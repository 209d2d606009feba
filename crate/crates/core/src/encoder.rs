//! Single-view encoder: per-timestep neighbor attention, temporal attention
//! over each agent's own history, lane cross-attention and one global
//! interaction round. Lanes act as keys only and receive no embedding.
//!
//! Every geometric input is relative (displacements, pairwise offsets,
//! agent-to-lane offsets), so embeddings do not depend on where the view
//! sits in the ego frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionProj, Mlp, Pass, LN_EPS};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::{NormalizedAgent, NormalizedScenario, Point, SceneGraph, View};

/// Length scale applied to relative positions before they enter a layer.
pub const POS_SCALE: f64 = 10.0;
const LANE_DISP_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub n_heads: usize,
    pub n_temporal_layers: usize,
    pub radius: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            n_heads: 8,
            n_temporal_layers: 1,
            radius: 50.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h ({}) must be a positive multiple of n_heads ({})",
                self.d_h, self.n_heads
            )));
        }
        if self.n_temporal_layers == 0 {
            return Err(Error::Config("n_temporal_layers must be at least 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Materialized embedding of one agent node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbedding {
    pub agent_id: String,
    pub view: View,
    pub vector: Vec<f64>,
    pub last_position: Point,
}

/// Encoder output still attached to the tape.
#[derive(Clone, Debug)]
pub struct EncodedView {
    pub view: View,
    pub agent_ids: Vec<String>,
    pub positions: Vec<Point>,
    /// `[n_agents x d_h]`.
    pub h: Var,
}

impl EncodedView {
    pub fn len(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_ids.is_empty()
    }

    pub fn embeddings(&self, tape: &Tape<'_>) -> Vec<NodeEmbedding> {
        let h = tape.value(self.h);
        self.agent_ids
            .iter()
            .enumerate()
            .map(|(i, id)| NodeEmbedding {
                agent_id: id.clone(),
                view: self.view,
                vector: h.row(i).to_vec(),
                last_position: self.positions[i],
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct TemporalLayer {
    attn: AttentionProj,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub history_len: usize,
    embed: Mlp,
    spatial: AttentionProj,
    positional: ParamId,
    temporal: Vec<TemporalLayer>,
    lane_embed: Mlp,
    lane_attn: AttentionProj,
    global: AttentionProj,
}

fn rel(a: Point, b: Point) -> [f64; 2] {
    [(a[0] - b[0]) / POS_SCALE, (a[1] - b[1]) / POS_SCALE]
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        history_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_h;
        let temporal = (0..cfg.n_temporal_layers)
            .map(|l| TemporalLayer {
                attn: AttentionProj::new(store, &format!("{name}.temporal{l}.attn"), d, d, d, rng),
                ffn: Mlp::new(store, &format!("{name}.temporal{l}.ffn"), d, 2 * d, d, rng),
            })
            .collect();
        let positional = store.add_glorot(format!("{name}.positional"), history_len, d, rng);
        Ok(Self {
            embed: Mlp::new(store, &format!("{name}.embed"), 3, d, d, rng),
            spatial: AttentionProj::new(store, &format!("{name}.spatial"), d, d + 2, d, rng),
            positional,
            temporal,
            lane_embed: Mlp::new(store, &format!("{name}.lane_embed"), 4, d, d, rng),
            lane_attn: AttentionProj::new(store, &format!("{name}.lane_attn"), d, d, d, rng),
            global: AttentionProj::new(store, &format!("{name}.global"), d, d + 2, d, rng),
            cfg,
            history_len,
        })
    }

    fn check_agent(&self, a: &NormalizedAgent) -> Result<()> {
        if a.history.len() != self.history_len {
            return Err(Error::Data(format!(
                "agent {} has {} history steps, encoder expects {}",
                a.id,
                a.history.len(),
                self.history_len
            )));
        }
        if !a.observed.iter().any(|&m| m) {
            return Err(Error::Data(format!("agent {} has no observed step", a.id)));
        }
        Ok(())
    }

    /// Embeds `[dx, dy, observed]` for every (agent, step) row.
    fn embed_steps(&self, tape: &mut Tape<'_>, agents: &[&NormalizedAgent], pass: &mut Pass<'_>) -> Result<Var> {
        let t = self.history_len;
        let mut feat = Vec::with_capacity(agents.len() * t * 3);
        for a in agents {
            for s in 0..t {
                let d = a.displacements[s];
                feat.extend([d[0], d[1], if a.observed[s] { 1.0 } else { 0.0 }]);
            }
        }
        let x = tape.constant(Tensor::matrix(agents.len() * t, 3, feat));
        Ok(self.embed.forward(tape, x, pass)?)
    }

    /// Temporal attention over each agent's own observed steps; returns one
    /// row per agent taken at the final step.
    fn temporal_stage(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        agents: &[&NormalizedAgent],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let t = self.history_len;
        let heads = self.cfg.n_heads;
        let tile: Vec<usize> = (0..agents.len()).flat_map(|_| 0..t).collect();
        let pos = tape.param(self.positional);
        let pos = tape.gather_rows(pos, &tile)?;
        let mut z = tape.add(x, pos)?;
        let observed_rows = |i: usize| -> Vec<usize> {
            (0..t).filter(|&s| agents[i].observed[s]).map(|s| i * t + s).collect()
        };
        let last_rows: Vec<usize> = (0..agents.len()).map(|i| i * t + t - 1).collect();
        let n_layers = self.temporal.len();
        for (l, layer) in self.temporal.iter().enumerate() {
            let zn = tape.layer_norm(z, LN_EPS);
            if l + 1 < n_layers {
                let nbrs = (0..agents.len() * t).map(|r| observed_rows(r / t)).collect();
                if let Some(a) = layer.attn.forward(tape, zn, zn, nbrs, heads)? {
                    z = tape.add(z, a)?;
                }
                let zn = tape.layer_norm(z, LN_EPS);
                let f = layer.ffn.forward(tape, zn, pass)?;
                z = tape.add(z, f)?;
            } else {
                let q = tape.gather_rows(zn, &last_rows)?;
                let nbrs = (0..agents.len()).map(observed_rows).collect();
                let mut u = tape.gather_rows(z, &last_rows)?;
                if let Some(a) = layer.attn.forward(tape, q, zn, nbrs, heads)? {
                    u = tape.add(u, a)?;
                }
                let un = tape.layer_norm(u, LN_EPS);
                let f = layer.ffn.forward(tape, un, pass)?;
                z = tape.add(u, f)?;
            }
        }
        Ok(z)
    }

    /// The encoding an agent gets when it has no neighbors and no lanes:
    /// step embedding followed by temporal attention only.
    pub fn temporal_encoding(&self, tape: &mut Tape<'_>, agent: &NormalizedAgent, pass: &mut Pass<'_>) -> Result<Var> {
        self.check_agent(agent)?;
        let agents = [agent];
        let x = self.embed_steps(tape, &agents, pass)?;
        self.temporal_stage(tape, x, &agents, pass)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        ns: &NormalizedScenario,
        graph: &SceneGraph,
        pass: &mut Pass<'_>,
    ) -> Result<EncodedView> {
        let d = self.cfg.d_h;
        let heads = self.cfg.n_heads;
        let t = self.history_len;
        let agents: Vec<&NormalizedAgent> = graph.agent_index.iter().map(|&i| &ns.agents[i]).collect();
        for a in &agents {
            if a.view != graph.view {
                return Err(Error::Data(format!(
                    "graph for {} view contains agent {} from the {} view",
                    graph.view.as_str(),
                    a.id,
                    a.view.as_str()
                )));
            }
            self.check_agent(a)?;
        }
        let positions: Vec<Point> = agents.iter().map(|a| a.last()).collect();
        if agents.is_empty() {
            let h = tape.constant(Tensor::matrix(0, d, Vec::new()));
            return Ok(EncodedView {
                view: graph.view,
                agent_ids: Vec::new(),
                positions,
                h,
            });
        }
        let agent_nbrs = graph.agent_neighbors();

        // (a) neighbor attention at every step, over neighbors observed then
        let x0 = self.embed_steps(tape, &agents, pass)?;
        let mut src_rows = Vec::new();
        let mut rel_feat = Vec::new();
        let mut nbrs = vec![Vec::new(); agents.len() * t];
        for (i, ai) in agents.iter().enumerate() {
            for s in 0..t {
                for &j in &agent_nbrs[i] {
                    if agents[j].observed[s] {
                        nbrs[i * t + s].push(src_rows.len());
                        src_rows.push(j * t + s);
                        rel_feat.extend(rel(ai.history[s], agents[j].history[s]));
                    }
                }
            }
        }
        let x1 = if src_rows.is_empty() {
            x0
        } else {
            let y = tape.layer_norm(x0, LN_EPS);
            let kv = tape.gather_rows(y, &src_rows)?;
            let r = tape.constant(Tensor::matrix(src_rows.len(), 2, rel_feat));
            let kv = tape.concat_cols(&[kv, r])?;
            match self.spatial.forward(tape, y, kv, nbrs, heads)? {
                Some(a) => tape.add(x0, a)?,
                None => x0,
            }
        };

        // (b) temporal attention
        let mut u = self.temporal_stage(tape, x1, &agents, pass)?;

        // (c) lanes as keys
        if !graph.lane_edges.is_empty() {
            let mut feat = Vec::with_capacity(graph.lane_edges.len() * 4);
            let mut nbrs = vec![Vec::new(); agents.len()];
            for (e, edge) in graph.lane_edges.iter().enumerate() {
                let lane = &ns.lanes[graph.lane_index[edge.dst]];
                feat.extend([
                    lane.displacement[0] * LANE_DISP_SCALE,
                    lane.displacement[1] * LANE_DISP_SCALE,
                    edge.rel[0] / POS_SCALE,
                    edge.rel[1] / POS_SCALE,
                ]);
                nbrs[edge.src].push(e);
            }
            let f = tape.constant(Tensor::matrix(graph.lane_edges.len(), 4, feat));
            let lanes = self.lane_embed.forward(tape, f, pass)?;
            let un = tape.layer_norm(u, LN_EPS);
            if let Some(a) = self.lane_attn.forward(tape, un, lanes, nbrs, heads)? {
                u = tape.add(u, a)?;
            }
        }

        // (d) one global interaction round over the other agents in range
        if !graph.agent_edges.is_empty() {
            let mut src = Vec::with_capacity(graph.agent_edges.len());
            let mut feat = Vec::with_capacity(graph.agent_edges.len() * 2);
            let mut nbrs = vec![Vec::new(); agents.len()];
            for (i, list) in agent_nbrs.iter().enumerate() {
                for &j in list {
                    nbrs[i].push(src.len());
                    src.push(j);
                    feat.extend(rel(positions[i], positions[j]));
                }
            }
            let un = tape.layer_norm(u, LN_EPS);
            let kv = tape.gather_rows(un, &src)?;
            let r = tape.constant(Tensor::matrix(src.len(), 2, feat));
            let kv = tape.concat_cols(&[kv, r])?;
            if let Some(a) = self.global.forward(tape, un, kv, nbrs, heads)? {
                u = tape.add(u, a)?;
            }
        }

        Ok(EncodedView {
            view: graph.view,
            agent_ids: agents.iter().map(|a| a.id.clone()).collect(),
            positions,
            h: u,
        })
    }
}

/// Convenience wrapper: a fresh eval-mode tape, returning materialized
/// embeddings.
pub fn encode(
    store: &ParamStore,
    encoder: &Encoder,
    ns: &NormalizedScenario,
    graph: &SceneGraph,
) -> Result<Vec<NodeEmbedding>> {
    let mut tape = Tape::new(store);
    let out = encoder.encode(&mut tape, ns, graph, &mut Pass::eval())?;
    Ok(out.embeddings(&tape))
}
