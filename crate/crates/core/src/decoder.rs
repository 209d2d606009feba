//! Laplace mixture decoder and its winner-take-all training loss.
//!
//! Three MLPs read the fused embedding: locations (offsets from the agent's
//! last observed position), per-axis scales `b = max(softplus(z), 1e-3)` and
//! mode scores turned into mixing weights by a softmax.
//!
//! The loss regresses only the best mode `k~` (smallest average displacement
//! to the truth; the choice itself is not differentiated) with the Laplace
//! negative log-likelihood, and adds `epsilon` times the cross-entropy of
//! the mixing weights against `k~`:
//!
//! ```text
//! J_reg = 1/(n T_f) * sum_i sum_t sum_axis [ log(2 b) + |y - mu| / b ]
//! J_cls = -1/n * sum_i log pi_{k~(i)}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::POS_SCALE;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Pass};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::scene::Point;

/// Lower bound on every predicted scale, meters.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub modes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            modes: 6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.modes == 0 {
            return Err(Error::Config("at least one mode is required".into()));
        }
        Ok(())
    }
}

/// Mixture forecast for one agent. `mu` and `b` are stored flat in
/// mode-major, step-major, axis-minor order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    pub modes: usize,
    pub future_len: usize,
    pub mu: Vec<f64>,
    pub b: Vec<f64>,
    pub pi: Vec<f64>,
}

impl MixturePrediction {
    pub fn new(modes: usize, future_len: usize, mu: Vec<f64>, b: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        let n = modes * future_len * 2;
        if mu.len() != n || b.len() != n || pi.len() != modes {
            return Err(Error::Data(format!(
                "mixture of {modes} modes x {future_len} steps needs {n} locations and scales and {modes} weights, got {}/{}/{}",
                mu.len(),
                b.len(),
                pi.len()
            )));
        }
        Ok(Self {
            modes,
            future_len,
            mu,
            b,
            pi,
        })
    }

    fn at(&self, k: usize, t: usize) -> usize {
        (k * self.future_len + t) * 2
    }

    pub fn mu(&self, k: usize, t: usize) -> Point {
        let i = self.at(k, t);
        [self.mu[i], self.mu[i + 1]]
    }

    pub fn b(&self, k: usize, t: usize) -> Point {
        let i = self.at(k, t);
        [self.b[i], self.b[i + 1]]
    }

    pub fn trajectory(&self, k: usize) -> Vec<Point> {
        (0..self.future_len).map(|t| self.mu(k, t)).collect()
    }

    pub fn trajectories(&self) -> Vec<Vec<Point>> {
        (0..self.modes).map(|k| self.trajectory(k)).collect()
    }

    pub fn check_scales(&self) -> Result<()> {
        match self.b.iter().find(|&&b| !(b > 0.0)) {
            Some(&b) => Err(Error::NonPositiveScale(b)),
            None => Ok(()),
        }
    }
}

/// Index of the mode with the smallest average displacement to `y`; ties
/// go to the lowest index.
pub fn best_mode(pred: &MixturePrediction, y: &[Point]) -> usize {
    best_mode_flat(&pred.mu, pred.modes, pred.future_len, y)
}

fn best_mode_flat(mu: &[f64], modes: usize, t_f: usize, y: &[Point]) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for k in 0..modes {
        let row = &mu[k * t_f * 2..(k + 1) * t_f * 2];
        let err = y
            .iter()
            .enumerate()
            .map(|(t, p)| (row[2 * t] - p[0]).hypot(row[2 * t + 1] - p[1]))
            .sum::<f64>()
            / t_f as f64;
        if err < best_err {
            best_err = err;
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub modes: usize,
    pub future_len: usize,
    loc: Mlp,
    scale: Mlp,
    score: Mlp,
}

/// Decoder output on the tape, one row per agent.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// `[n x K*T_f*2]`, ego-frame meters.
    pub mu: Var,
    /// `[n x K*T_f*2]`, positive.
    pub b: Var,
    /// `[n x K]` log mixing weights.
    pub log_pi: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub reg: Var,
    pub cls: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_h: usize,
        modes: usize,
        future_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if modes == 0 || future_len == 0 {
            return Err(Error::Config("decoder needs at least one mode and one step".into()));
        }
        let out = modes * future_len * 2;
        Ok(Self {
            modes,
            future_len,
            loc: Mlp::new(store, &format!("{name}.loc"), d_h, d_h, out, rng),
            scale: Mlp::new(store, &format!("{name}.scale"), d_h, d_h, out, rng),
            score: Mlp::new(store, &format!("{name}.score"), d_h, d_h, modes, rng),
        })
    }

    /// Output layer of the score head; zeroing it makes `pi` uniform.
    pub fn score_head(&self) -> &Mlp {
        &self.score
    }

    pub fn scale_head(&self) -> &Mlp {
        &self.scale
    }

    /// Decodes rows of `h` (one per agent); `origins` are the agents' last
    /// observed positions.
    pub fn decode(&self, tape: &mut Tape<'_>, h: Var, origins: &[Point], pass: &mut Pass<'_>) -> Result<DecodedVars> {
        let width = self.modes * self.future_len * 2;
        let n = origins.len();
        if tape.value(h).rows() != n {
            return Err(Error::Data(format!(
                "{} embeddings but {n} origins",
                tape.value(h).rows()
            )));
        }
        let offsets = self.loc.forward(tape, h, pass)?;
        let offsets = tape.scale(offsets, POS_SCALE);
        let mut base = Vec::with_capacity(n * width);
        for o in origins {
            for _ in 0..width / 2 {
                base.extend_from_slice(o);
            }
        }
        let base = tape.constant(Tensor::matrix(n, width, base));
        let mu = tape.add(offsets, base)?;
        let z = self.scale.forward(tape, h, pass)?;
        let b = tape.softplus(z);
        let b = tape.clamp_min(b, SCALE_FLOOR);
        let s = self.score.forward(tape, h, pass)?;
        let log_pi = tape.log_softmax(s);
        Ok(DecodedVars { mu, b, log_pi })
    }

    /// Materializes row `row` of a decoded batch.
    pub fn prediction(&self, tape: &Tape<'_>, out: &DecodedVars, row: usize) -> MixturePrediction {
        MixturePrediction {
            modes: self.modes,
            future_len: self.future_len,
            mu: tape.value(out.mu).row(row).to_vec(),
            b: tape.value(out.b).row(row).to_vec(),
            pi: tape.value(out.log_pi).row(row).iter().map(|v| v.exp()).collect(),
        }
    }
}

/// Winner-take-all mixture loss on the tape.
///
/// `rows[i]` selects the decoded row scored against `targets[i]`;
/// `normalizer` is the `n` of the loss (the number of scored agents in the
/// whole batch, which may span several tapes).
pub fn mixture_loss(
    tape: &mut Tape<'_>,
    out: &DecodedVars,
    rows: &[usize],
    targets: &[Vec<Point>],
    epsilon: f64,
    normalizer: usize,
) -> Result<LossVars> {
    if rows.len() != targets.len() {
        return Err(Error::Data(format!("{} rows but {} targets", rows.len(), targets.len())));
    }
    if normalizer == 0 {
        return Err(Error::Data("loss over zero agents".into()));
    }
    let mu_all = tape.value(out.mu);
    let (_, width) = mu_all.dims2();
    let modes = tape.value(out.log_pi).cols();
    let t_f = width / (2 * modes);
    if let Some(&b) = tape.value(out.b).data().iter().find(|&&b| !(b > 0.0)) {
        return Err(Error::NonPositiveScale(b));
    }
    let mut best = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len() * t_f * 2);
    for (&r, target) in rows.iter().zip(targets) {
        if target.len() != t_f {
            return Err(Error::Data(format!(
                "target has {} steps, decoder predicts {t_f}",
                target.len()
            )));
        }
        best.push(best_mode_flat(mu_all.row(r), modes, t_f, target));
        y.extend(target.iter().flatten());
    }
    let mu = tape.gather_rows(out.mu, rows)?;
    let b = tape.gather_rows(out.b, rows)?;
    let log_pi = tape.gather_rows(out.log_pi, rows)?;
    let offsets: Vec<usize> = best.iter().map(|&k| k * t_f * 2).collect();
    let mu_k = tape.select_blocks(mu, &offsets, t_f * 2)?;
    let b_k = tape.select_blocks(b, &offsets, t_f * 2)?;
    let y = tape.constant(Tensor::matrix(rows.len(), t_f * 2, y));

    let err = tape.sub(y, mu_k)?;
    let err = tape.abs(err);
    let inv_b = tape.recip(b_k);
    let scaled = tape.mul(err, inv_b)?;
    let two_b = tape.scale(b_k, 2.0);
    let log_norm = tape.log(two_b);
    let nll = tape.add(log_norm, scaled)?;
    let nll = tape.sum(nll);
    let reg = tape.scale(nll, 1.0 / (normalizer * t_f) as f64);

    let picked = tape.select_blocks(log_pi, &best, 1)?;
    let picked = tape.sum(picked);
    let cls = tape.scale(picked, -1.0 / normalizer as f64);
    let weighted = tape.scale(cls, epsilon);
    let total = tape.add(reg, weighted)?;
    Ok(LossVars { total, reg, cls })
}

/// Loss of materialized predictions against their labels, with `n` equal to
/// the number of predictions.
pub fn loss(preds: &[MixturePrediction], ys: &[Vec<Point>], cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    let Some(first) = preds.first() else {
        return Err(Error::Data("loss over zero agents".into()));
    };
    let (modes, t_f) = (first.modes, first.future_len);
    let mut mu = Vec::new();
    let mut b = Vec::new();
    let mut log_pi = Vec::new();
    for p in preds {
        if p.modes != modes || p.future_len != t_f {
            return Err(Error::Data("predictions disagree on modes or horizon".into()));
        }
        p.check_scales()?;
        mu.extend_from_slice(&p.mu);
        b.extend_from_slice(&p.b);
        log_pi.extend(p.pi.iter().map(|v| v.ln()));
    }
    let n = preds.len();
    let mut tape = Tape::detached();
    let out = DecodedVars {
        mu: tape.constant(Tensor::matrix(n, modes * t_f * 2, mu)),
        b: tape.constant(Tensor::matrix(n, modes * t_f * 2, b)),
        log_pi: tape.constant(Tensor::matrix(n, modes, log_pi)),
    };
    let rows: Vec<usize> = (0..n).collect();
    let vars = mixture_loss(&mut tape, &out, &rows, ys, cfg.epsilon, n)?;
    Ok(LossValue {
        total: tape.value(vars.total).item(),
        reg: tape.value(vars.reg).item(),
        cls: tape.value(vars.cls).item(),
    })
}
