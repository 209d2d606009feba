//! The full forecaster: one encoder per view, cross-graph fusion and the
//! mixture decoder, plus the per-scenario preprocessing they share.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{mixture_loss, DecodedVars, Decoder, LossVars, MixturePrediction};
use crate::encoder::{EncodedView, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fused, Fusion, FusionConfig};
use crate::nn::Pass;
use crate::numerics::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore, Tape};
use crate::scene::{build_graph, normalize, NormalizedScenario, Point, Scenario, SceneGraph, View};

/// Whether the infrastructure stream is used at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Vehicle view only; fusion sees an empty infrastructure set.
    Ego,
    #[default]
    Fused,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Ego => "ego",
            FusionMode::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub modes: usize,
    pub history_len: usize,
    pub future_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            modes: 6,
            history_len: crate::scene::DEFAULT_HISTORY_LEN,
            future_len: crate::scene::DEFAULT_FUTURE_LEN,
            seed: 0,
        }
    }
}

/// A scenario normalized to the ego frame with both graphs built and its
/// scored agents resolved to vehicle-graph rows.
#[derive(Clone, Debug)]
pub struct PreparedScenario {
    pub scenario_id: String,
    pub ns: NormalizedScenario,
    pub vehicle: SceneGraph,
    pub infra: SceneGraph,
    /// Vehicle-graph row of each scored agent.
    pub target_rows: Vec<usize>,
    pub target_ids: Vec<String>,
    /// Ego-frame futures of the scored agents.
    pub futures: Vec<Vec<Point>>,
}

pub fn prepare(s: &Scenario, radius: f64) -> Result<PreparedScenario> {
    let ns = normalize(s)?;
    let vehicle = build_graph(&ns, View::Vehicle, radius)?;
    let infra = build_graph(&ns, View::Infrastructure, radius)?;
    let mut target_rows = Vec::with_capacity(ns.target_ids.len());
    let mut futures = Vec::with_capacity(ns.target_ids.len());
    for id in &ns.target_ids {
        let row = vehicle
            .agent_ids
            .iter()
            .position(|a| a == id)
            .ok_or_else(|| Error::Data(format!("target {id} missing from vehicle graph")))?;
        let fut = ns.agents[vehicle.agent_index[row]]
            .future
            .clone()
            .ok_or_else(|| Error::Data(format!("target {id} has no future")))?;
        target_rows.push(row);
        futures.push(fut);
    }
    Ok(PreparedScenario {
        scenario_id: s.scenario_id.clone(),
        target_ids: ns.target_ids.clone(),
        ns,
        vehicle,
        infra,
        target_rows,
        futures,
    })
}

pub fn prepare_all(scenarios: &[Scenario], radius: f64) -> Result<Vec<PreparedScenario>> {
    scenarios.iter().map(|s| prepare(s, radius)).collect()
}

/// Everything a forward pass left on the tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub vehicle: EncodedView,
    pub infra: Option<EncodedView>,
    pub fused: Fused,
    pub decoded: DecodedVars,
}

/// Materialized forecast for one scored agent, in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentForecast {
    pub scenario_id: String,
    pub agent_id: String,
    pub prediction: MixturePrediction,
    pub future: Vec<Point>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vehicle_encoder: Encoder,
    pub infra_encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl Model {
    /// Builds a model with freshly initialized parameters; initialization is
    /// a pure function of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.history_len < 2 {
            return Err(Error::Config("history_len must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.encoder.d_h;
        let th = config.history_len;
        let vehicle_encoder = Encoder::new(&mut params, "enc_vehicle", config.encoder.clone(), th, &mut rng)?;
        let infra_encoder = Encoder::new(&mut params, "enc_infra", config.encoder.clone(), th, &mut rng)?;
        let fusion = Fusion::new(&mut params, "fusion", config.fusion.clone(), d, &mut rng)?;
        let decoder = Decoder::new(&mut params, "decoder", d, config.modes, config.future_len, &mut rng)?;
        Ok(Self {
            config,
            params,
            vehicle_encoder,
            infra_encoder,
            fusion,
            decoder,
        })
    }

    pub fn check_horizons(&self, p: &PreparedScenario) -> Result<()> {
        let (th, tf) = (p.ns.history_len, p.ns.future_len);
        if th != self.config.history_len || (!p.futures.is_empty() && tf != self.config.future_len) {
            return Err(Error::Data(format!(
                "scenario {} has T_h={th}, T_f={tf} but the model expects T_h={}, T_f={}",
                p.scenario_id, self.config.history_len, self.config.future_len
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &PreparedScenario,
        mode: FusionMode,
        pass: &mut Pass<'_>,
    ) -> Result<ForwardOutput> {
        self.check_horizons(p)?;
        let vehicle = self.vehicle_encoder.encode(tape, &p.ns, &p.vehicle, pass)?;
        let infra = match mode {
            FusionMode::Fused => Some(self.infra_encoder.encode(tape, &p.ns, &p.infra, pass)?),
            FusionMode::Ego => None,
        };
        let fused = self.fusion.fuse(tape, &vehicle, infra.as_ref(), pass)?;
        let decoded = self.decoder.decode(tape, fused.h, &vehicle.positions, pass)?;
        Ok(ForwardOutput {
            vehicle,
            infra,
            fused,
            decoded,
        })
    }

    /// Forward pass plus loss over the scenario's scored agents.
    pub fn loss_on(
        &self,
        tape: &mut Tape<'_>,
        p: &PreparedScenario,
        mode: FusionMode,
        epsilon: f64,
        normalizer: usize,
        pass: &mut Pass<'_>,
    ) -> Result<(ForwardOutput, LossVars)> {
        let out = self.forward(tape, p, mode, pass)?;
        let loss = mixture_loss(tape, &out.decoded, &p.target_rows, &p.futures, epsilon, normalizer)?;
        Ok((out, loss))
    }

    /// Eval-mode forecasts for every scored agent of `p`.
    pub fn predict(&self, p: &PreparedScenario, mode: FusionMode) -> Result<Vec<AgentForecast>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, p, mode, &mut Pass::eval())?;
        Ok(p
            .target_rows
            .iter()
            .zip(&p.target_ids)
            .zip(&p.futures)
            .map(|((&row, id), fut)| AgentForecast {
                scenario_id: p.scenario_id.clone(),
                agent_id: id.clone(),
                prediction: self.decoder.prediction(&tape, &out.decoded, row),
                future: fut.clone(),
            })
            .collect())
    }

    pub fn predict_all(&self, data: &[PreparedScenario], mode: FusionMode) -> Result<Vec<AgentForecast>> {
        let mut out = Vec::new();
        for p in data {
            out.extend(self.predict(p, mode)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = Checkpoint::from_store(self.config.clone(), &self.params);
        write_checkpoint(path, &ck)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint<ModelConfig> = read_checkpoint(path)?;
        let mut model = Model::new(ck.config.clone())?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}
