//! Synthetic two-view intersection scenarios with controllable occlusion.
//!
//! Every scenario is a four-arm intersection. Agents drive along lane
//! centerlines at constant speed and pick a maneuver (straight, left, right)
//! when they reach the stop line. Some agents travel in leader/follower
//! pairs: the leader is already inside the intersection at t = 0, so its
//! history shows the maneuver it is executing; the follower is still
//! approaching, usually copies the leader's maneuver, and converges to the
//! leader's speed during the first second of the future. An occluded leader
//! is visible only from the infrastructure side, which is what makes the
//! infrastructure stream informative for the vehicle-view targets.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AgentTrack, LaneSegment, Point, Scenario, View, STEP_SECONDS};

/// Half-size of the intersection box: distance from center to stop line.
const STOP_LINE: f64 = 8.0;
const LANE_OFFSET: f64 = 1.75;
const ARM_LENGTH: f64 = 60.0;
const RIGHT_RADIUS: f64 = STOP_LINE - LANE_OFFSET;
const LEFT_RADIUS: f64 = STOP_LINE + LANE_OFFSET;
pub const MAX_SPEED: f64 = 14.0;
/// Time over which a follower adopts its leader's speed.
const SPEED_RAMP_SECONDS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    Straight,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManeuverMix {
    pub straight: f64,
    pub left: f64,
    pub right: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            straight: 0.4,
            left: 0.3,
            right: 0.3,
        }
    }
}

impl ManeuverMix {
    fn sample<R: Rng>(&self, rng: &mut R) -> Maneuver {
        let u: f64 = rng.random::<f64>() * (self.straight + self.left + self.right);
        if u < self.straight {
            Maneuver::Straight
        } else if u < self.straight + self.left {
            Maneuver::Left
        } else {
            Maneuver::Right
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_scenarios: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    pub history_len: usize,
    pub future_len: usize,
    /// Fraction of non-ego agents hidden from the vehicle view.
    pub occlusion_rate: f64,
    pub maneuvers: ManeuverMix,
    /// Standard deviation of the position noise, meters.
    pub noise_sigma: f64,
    /// Probability that a follower copies its leader's maneuver.
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 100,
            min_agents: 4,
            max_agents: 8,
            history_len: 50,
            future_len: 50,
            occlusion_rate: 0.5,
            maneuvers: ManeuverMix::default(),
            noise_sigma: 0.05,
            follow_prob: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let m = &self.maneuvers;
        let bad = |msg: &str| Err(SynthError::Config(msg.to_string()));
        if [m.straight, m.left, m.right].iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad("maneuver probabilities must lie in [0, 1]");
        }
        if (m.straight + m.left + m.right - 1.0).abs() > 1e-9 {
            return bad("maneuver probabilities must sum to 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return bad("follow_prob must lie in [0, 1]");
        }
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return bad("agent range must satisfy 1 <= min <= max");
        }
        if self.history_len < 2 {
            return bad("history_len must be at least 2");
        }
        Ok(())
    }
}

/// Centerline of an approach heading `heading` followed by `maneuver`,
/// parameterized by signed arc length from the stop line.
#[derive(Clone, Copy, Debug)]
struct Route {
    heading: f64,
    maneuver: Maneuver,
}

impl Route {
    fn point(&self, s: f64) -> Point {
        let (sin, cos) = self.heading.sin_cos();
        let u = [cos, sin];
        let right = [sin, -cos];
        let entry = [
            -STOP_LINE * u[0] + LANE_OFFSET * right[0],
            -STOP_LINE * u[1] + LANE_OFFSET * right[1],
        ];
        if s <= 0.0 || self.maneuver == Maneuver::Straight {
            return [entry[0] + s * u[0], entry[1] + s * u[1]];
        }
        let (radius, turn_sign) = match self.maneuver {
            Maneuver::Left => (LEFT_RADIUS, 1.0),
            Maneuver::Right => (RIGHT_RADIUS, -1.0),
            Maneuver::Straight => unreachable!(),
        };
        // center of the arc sits perpendicular to the approach direction
        let left = [-right[0], -right[1]];
        let c = [
            entry[0] + turn_sign * radius * left[0],
            entry[1] + turn_sign * radius * left[1],
        ];
        let arc_len = FRAC_PI_2 * radius;
        let phi = s.min(arc_len) / radius;
        // start vector from center to entry, rotated by turn_sign * phi
        let r0 = [entry[0] - c[0], entry[1] - c[1]];
        let (sp, cp) = (turn_sign * phi).sin_cos();
        let p = [c[0] + cp * r0[0] - sp * r0[1], c[1] + sp * r0[0] + cp * r0[1]];
        if s <= arc_len {
            return p;
        }
        let h = self.heading + turn_sign * FRAC_PI_2;
        let extra = s - arc_len;
        [p[0] + extra * h.cos(), p[1] + extra * h.sin()]
    }
}

#[derive(Clone, Debug)]
struct AgentPlan {
    route: Route,
    /// Arc length at t = 0.
    s0: f64,
    history_speed: f64,
    future_speed: f64,
}

impl AgentPlan {
    fn arc_length(&self, t: isize) -> f64 {
        let dt = STEP_SECONDS;
        if t <= 0 {
            return self.s0 + self.history_speed * t as f64 * dt;
        }
        let ramp_steps = (SPEED_RAMP_SECONDS / dt).round() as isize;
        let mut s = self.s0;
        for k in 1..=t {
            let w = (k.min(ramp_steps) as f64) / ramp_steps as f64;
            s += dt * (self.history_speed + w * (self.future_speed - self.history_speed));
        }
        s
    }

    fn positions(&self, history_len: usize, future_len: usize) -> Vec<Point> {
        let first = -(history_len as isize - 1);
        (first..=future_len as isize)
            .map(|t| self.route.point(self.arc_length(t)))
            .collect()
    }
}

const HEADINGS: [f64; 4] = [0.0, FRAC_PI_2, PI, 1.5 * PI];

fn solo<R: Rng>(rng: &mut R, heading: f64, mix: &ManeuverMix) -> AgentPlan {
    let v = rng.random_range(5.0..MAX_SPEED);
    AgentPlan {
        route: Route {
            heading,
            maneuver: mix.sample(rng),
        },
        s0: rng.random_range(-25.0..-2.0),
        history_speed: v,
        future_speed: v,
    }
}

fn platoon<R: Rng>(rng: &mut R, heading: f64, cfg: &GenConfig) -> (AgentPlan, AgentPlan) {
    let leader_speed = rng.random_range(1.0..MAX_SPEED);
    let leader_maneuver = cfg.maneuvers.sample(rng);
    let leader = AgentPlan {
        route: Route {
            heading,
            maneuver: leader_maneuver,
        },
        s0: rng.random_range(3.0..8.0),
        history_speed: leader_speed,
        future_speed: leader_speed,
    };
    let follower_maneuver = if rng.random_bool(cfg.follow_prob) {
        leader_maneuver
    } else {
        cfg.maneuvers.sample(rng)
    };
    let follower = AgentPlan {
        route: Route {
            heading,
            maneuver: follower_maneuver,
        },
        s0: leader.s0 - rng.random_range(8.0..14.0),
        history_speed: rng.random_range(5.0..MAX_SPEED),
        future_speed: leader_speed,
    };
    (leader, follower)
}

fn lane_segments(view: View) -> Vec<LaneSegment> {
    let mut out = Vec::new();
    for &heading in &HEADINGS {
        let straight = Route {
            heading,
            maneuver: Maneuver::Straight,
        };
        let mut push = |a: Point, b: Point| out.push(LaneSegment { view, start: a, end: b });
        // approach, in two pieces
        let approach = -(ARM_LENGTH - STOP_LINE);
        push(straight.point(approach), straight.point(approach / 2.0));
        push(straight.point(approach / 2.0), straight.point(0.0));
        // through the box and out the far side
        let exit = 2.0 * STOP_LINE;
        push(straight.point(0.0), straight.point(exit));
        push(straight.point(exit), straight.point(exit + (ARM_LENGTH - STOP_LINE) / 2.0));
        push(
            straight.point(exit + (ARM_LENGTH - STOP_LINE) / 2.0),
            straight.point(exit + ARM_LENGTH - STOP_LINE),
        );
        for (maneuver, radius, pieces) in [(Maneuver::Left, LEFT_RADIUS, 3), (Maneuver::Right, RIGHT_RADIUS, 2)] {
            let r = Route { heading, maneuver };
            let arc = FRAC_PI_2 * radius;
            for k in 0..pieces {
                let a = arc * k as f64 / pieces as f64;
                let b = arc * (k + 1) as f64 / pieces as f64;
                push(r.point(a), r.point(b));
            }
        }
    }
    out
}

fn rotate_translate(p: Point, angle: f64, shift: Point) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]]
}

fn scenario_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one scenario; scenario `index` is independent of every other
/// index given the seed.
pub fn generate_one(cfg: &GenConfig, index: usize) -> Scenario {
    let mut rng = scenario_rng(cfg.seed, index);
    let n_agents = rng.random_range(cfg.min_agents..=cfg.max_agents);

    // ego always approaches heading north in the world layout
    let ego_heading = FRAC_PI_2;
    let mut plans: Vec<AgentPlan> = Vec::with_capacity(n_agents);
    if n_agents >= 2 && rng.random_bool(0.5) {
        let (leader, follower) = platoon(&mut rng, ego_heading, cfg);
        plans.push(follower);
        plans.push(leader);
    } else {
        plans.push(solo(&mut rng, ego_heading, &cfg.maneuvers));
    }
    while plans.len() < n_agents {
        let heading = HEADINGS[rng.random_range(0..4)];
        if n_agents - plans.len() >= 2 && rng.random_bool(0.6) {
            let (leader, follower) = platoon(&mut rng, heading, cfg);
            plans.push(leader);
            plans.push(follower);
        } else {
            plans.push(solo(&mut rng, heading, &cfg.maneuvers));
        }
    }

    let mut others: Vec<usize> = (1..n_agents).collect();
    others.shuffle(&mut rng);
    let n_hidden = (cfg.occlusion_rate * (n_agents - 1) as f64).round() as usize;
    let hidden: Vec<bool> = {
        let mut h = vec![false; n_agents];
        for &i in &others[..n_hidden] {
            h[i] = true;
        }
        h
    };

    let angle = rng.random_range(0.0..2.0 * PI);
    let shift = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let jitter = |rng: &mut ChaCha8Rng, p: Point| -> Point {
        if cfg.noise_sigma == 0.0 {
            p
        } else {
            [p[0] + noise.sample(rng), p[1] + noise.sample(rng)]
        }
    };

    let th = cfg.history_len;
    let tf = cfg.future_len;
    let mut agents = Vec::new();
    let mut target_ids = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let id = format!("a{i}");
        let clean: Vec<Point> = plan
            .positions(th, tf)
            .into_iter()
            .map(|p| rotate_translate(p, angle, shift))
            .collect();
        if !hidden[i] {
            let xy = clean.iter().map(|&p| jitter(&mut rng, p)).collect();
            agents.push(AgentTrack::fully_observed(id.clone(), View::Vehicle, xy));
            target_ids.push(id.clone());
        }
        let xy = clean[..th].iter().map(|&p| jitter(&mut rng, p)).collect();
        agents.push(AgentTrack::fully_observed(id, View::Infrastructure, xy));
    }

    let mut lanes = lane_segments(View::Vehicle);
    lanes.extend(lane_segments(View::Infrastructure));
    for l in &mut lanes {
        l.start = rotate_translate(l.start, angle, shift);
        l.end = rotate_translate(l.end, angle, shift);
    }

    Scenario {
        scenario_id: format!("syn-{}-{index:06}", cfg.seed),
        ego_agent_id: "a0".to_string(),
        target_ids,
        history_len: th,
        future_len: tf,
        agents,
        lanes,
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Scenario>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.n_scenarios).map(|i| generate_one(cfg, i)).collect())
}
