//! Cross-graph attention: vehicle-view nodes attend to infrastructure-view
//! nodes within a radius, and a sigmoid gate blends the attended message
//! with a projection of the node's own embedding.
//!
//! For vehicle node `i` and infrastructure neighbor `j`, keys and values are
//! computed from `[h_j, phi((x_i - x_j) / POS_SCALE)]`, where `phi` is a
//! small MLP embedding of the relative position. Heads attend
//! independently; their outputs are concatenated into the message `m_i`,
//! which is zero when `i` has no neighbor. Then
//! `g = sigmoid(W_gate [h_i, m_i] + b)`,
//! `h~ = g * (W_self h_i) + (1 - g) * m_i`, followed by a residual
//! two-layer MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedView, POS_SCALE};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Pass};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::scene::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub radius: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_heads: 8,
            n_layers: 1,
            radius: 50.0,
        }
    }
}

impl FusionConfig {
    /// Per-head key width for embeddings of width `d_h`.
    pub fn d_k(&self, d_h: usize) -> usize {
        d_h / self.n_heads
    }

    pub fn validate(&self, d_h: usize) -> Result<()> {
        if self.n_heads == 0 || d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "fusion heads ({}) must divide d_h ({d_h})",
                self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("fusion needs at least one layer".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("fusion radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct FusionLayer {
    edge: Mlp,
    q: Linear,
    k: Linear,
    v: Linear,
    gate: Linear,
    self_proj: Linear,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub d_h: usize,
    layers: Vec<FusionLayer>,
}

/// Output of [`Fusion::fuse`].
#[derive(Clone, Debug)]
pub struct Fused {
    /// `[n_vehicle x d_h]`.
    pub h: Var,
    /// Per layer, the attention node (absent when no vehicle node had an
    /// infrastructure neighbor) and the gate values.
    pub attention: Vec<Option<Var>>,
    pub gates: Vec<Var>,
    /// Infrastructure indices attended by each vehicle node, in the order
    /// of the attention weights.
    pub neighbors: Vec<Vec<usize>>,
}

/// Infrastructure nodes within `radius` of each vehicle node.
pub fn cross_neighbors(vehicle: &[Point], infra: &[Point], radius: f64) -> Vec<Vec<usize>> {
    vehicle
        .iter()
        .map(|xi| {
            infra
                .iter()
                .enumerate()
                .filter(|(_, xj)| (xi[0] - xj[0]).hypot(xi[1] - xj[1]) <= radius)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: FusionConfig,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d_h)?;
        let d = d_h;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}{l}");
                FusionLayer {
                    edge: Mlp::new(store, &format!("{p}.edge"), 2, d, d, rng),
                    q: Linear::new(store, &format!("{p}.q"), d, d, false, rng),
                    k: Linear::new(store, &format!("{p}.k"), 2 * d, d, false, rng),
                    v: Linear::new(store, &format!("{p}.v"), 2 * d, d, false, rng),
                    gate: Linear::new(store, &format!("{p}.gate"), 2 * d, d, true, rng),
                    self_proj: Linear::new(store, &format!("{p}.self"), d, d, false, rng),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, d, d, rng),
                }
            })
            .collect();
        Ok(Self { cfg, d_h, layers })
    }

    /// Fuses `infra` into `vehicle`. Passing `None` (or an empty view)
    /// gives every vehicle node an empty neighborhood.
    pub fn fuse(
        &self,
        tape: &mut Tape<'_>,
        vehicle: &EncodedView,
        infra: Option<&EncodedView>,
        pass: &mut Pass<'_>,
    ) -> Result<Fused> {
        let nv = vehicle.len();
        let d = self.d_h;
        let neighbors = match infra {
            Some(inf) => cross_neighbors(&vehicle.positions, &inf.positions, self.cfg.radius),
            None => vec![Vec::new(); nv],
        };
        // one key/value row per (vehicle, infrastructure) edge
        let mut src = Vec::new();
        let mut rel = Vec::new();
        let mut edge_lists = vec![Vec::new(); nv];
        if let Some(inf) = infra {
            for (i, list) in neighbors.iter().enumerate() {
                let xi = vehicle.positions[i];
                for &j in list {
                    let xj = inf.positions[j];
                    edge_lists[i].push(src.len());
                    src.push(j);
                    rel.extend([(xi[0] - xj[0]) / POS_SCALE, (xi[1] - xj[1]) / POS_SCALE]);
                }
            }
        }
        let edge_input = match infra {
            Some(inf) if !src.is_empty() => {
                let hj = tape.gather_rows(inf.h, &src)?;
                let r = tape.constant(Tensor::matrix(src.len(), 2, rel));
                Some((hj, r))
            }
            _ => None,
        };

        let mut h = vehicle.h;
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (m, att) = match edge_input {
                Some((hj, r)) => {
                    let phi = layer.edge.forward(tape, r, pass)?;
                    let e = tape.concat_cols(&[hj, phi])?;
                    let q = layer.q.forward(tape, h)?;
                    let k = layer.k.forward(tape, e)?;
                    let v = layer.v.forward(tape, e)?;
                    let a = tape.attention(q, k, v, edge_lists.clone(), self.cfg.n_heads)?;
                    (a, Some(a))
                }
                None => (tape.constant(Tensor::matrix(nv, d, vec![0.0; nv * d])), None),
            };
            let hm = tape.concat_cols(&[h, m])?;
            let g = layer.gate.forward(tape, hm)?;
            let g = tape.sigmoid(g);
            let s = layer.self_proj.forward(tape, h)?;
            // g * s + (1 - g) * m  ==  m + g * (s - m)
            let diff = tape.sub(s, m)?;
            let gd = tape.mul(g, diff)?;
            let mixed = tape.add(m, gd)?;
            let f = layer.mlp.forward(tape, mixed, pass)?;
            h = tape.add(mixed, f)?;
            attention.push(att);
            gates.push(g);
        }
        Ok(Fused {
            h,
            attention,
            gates,
            neighbors,
        })
    }
}
