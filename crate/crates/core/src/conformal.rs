//! Post-hoc conformal prediction for multimodal trajectory forecasts.
//!
//! Nonconformity scores are computed on each calibration agent's best mode
//! (smallest average displacement). Two procedures turn them into a band
//! `H` of per-step (and, for `Z`/`L1`, per-axis) half-widths:
//!
//! * **CF-RNN**: a Bonferroni-corrected split-conformal quantile per
//!   coordinate, at level `(1 - a/T_f)(1 + 1/n)` with `a = alpha` for `L2`
//!   and `alpha / 2` for the per-axis scores. The quantile is the
//!   `ceil(level * n)`-th order statistic; a level above 1 gives `+inf`.
//! * **Copula**: the calibration set is split in two. Per-coordinate
//!   empirical CDFs come from the first half; on the second half we search
//!   for the smallest shared CDF level whose thresholds cover every step
//!   simultaneously for at least `1 - alpha` of the agents (`1 - alpha/2`
//!   per axis for `Z`/`L1`). Because every empirical quantile function is a
//!   step function of the level, the search runs over order-statistic
//!   indices, which is exactly what bisection on the level converges to.
//!
//! Regions are ellipses (`Z`: semi-axes `b * H`; `L1`: `H`) or circles
//! (`L2`: radius `H`) around every mode's predicted location.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{best_mode, MixturePrediction};
use crate::error::{Error, Result};
use crate::metrics::{circle_area, ellipse_area, in_circle, in_ellipse, MetricRow};
use crate::model::AgentForecast;
use crate::scene::Point;

/// Slack used when rounding `level * n` up to an order-statistic index, so
/// that products which are integers in exact arithmetic are not pushed to
/// the next index by floating-point error.
pub const CEIL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `|y - mu| / b` per axis.
    Z,
    /// `|y - mu|` per axis.
    L1,
    /// `||y - mu||_2` per step.
    L2,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Z, ScoreKind::L1, ScoreKind::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Z => "z",
            ScoreKind::L1 => "l1",
            ScoreKind::L2 => "l2",
        }
    }

    /// Score components per step.
    pub fn dims(self) -> usize {
        match self {
            ScoreKind::L2 => 1,
            _ => 2,
        }
    }

    /// Miscoverage budget for each coordinate group before the time
    /// correction.
    fn group_alpha(self, alpha: f64) -> f64 {
        alpha / self.dims() as f64
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(ScoreKind::Z),
            "l1" => Ok(ScoreKind::L1),
            "l2" => Ok(ScoreKind::L2),
            other => Err(Error::Config(format!("unknown score function {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cfrnn,
    Copula,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Cfrnn, Method::Copula];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cfrnn => "cfrnn",
            Method::Copula => "copula",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfrnn" => Ok(Method::Cfrnn),
            "copula" => Ok(Method::Copula),
            other => Err(Error::Config(format!("unknown calibration method {other:?}"))),
        }
    }
}

/// Scores of one agent, step-major: `values[t * dims + axis]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonconformityScores {
    pub kind: ScoreKind,
    pub future_len: usize,
    pub values: Vec<f64>,
}

impl NonconformityScores {
    pub fn new(kind: ScoreKind, future_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != future_len * kind.dims() {
            return Err(Error::Data(format!(
                "{kind} scores over {future_len} steps need {} values, got {}",
                future_len * kind.dims(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Data(format!("nonconformity scores must be nonnegative, got {v}")));
        }
        Ok(Self {
            kind,
            future_len,
            values,
        })
    }
}

/// Nonconformity of `y` under the best mode of `pred`.
pub fn score(pred: &MixturePrediction, y: &[Point], kind: ScoreKind) -> Result<NonconformityScores> {
    if y.len() != pred.future_len {
        return Err(Error::Data(format!(
            "label has {} steps, prediction has {}",
            y.len(),
            pred.future_len
        )));
    }
    let k = best_mode(pred, y);
    let mut values = Vec::with_capacity(pred.future_len * kind.dims());
    for (t, p) in y.iter().enumerate() {
        let mu = pred.mu(k, t);
        let e = [(p[0] - mu[0]).abs(), (p[1] - mu[1]).abs()];
        match kind {
            ScoreKind::Z => {
                let b = pred.b(k, t);
                if let Some(&bad) = b.iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::NonPositiveScale(bad));
                }
                values.extend([e[0] / b[0], e[1] / b[1]]);
            }
            ScoreKind::L1 => values.extend(e),
            ScoreKind::L2 => values.push(e[0].hypot(e[1])),
        }
    }
    NonconformityScores::new(kind, pred.future_len, values)
}

pub fn score_all(forecasts: &[AgentForecast], kind: ScoreKind) -> Result<Vec<NonconformityScores>> {
    forecasts.iter().map(|f| score(&f.prediction, &f.future, kind)).collect()
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Calibrated half-widths, step-major like [`NonconformityScores`].
/// Infinite entries serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub method: Method,
    pub score: ScoreKind,
    pub alpha: f64,
    /// Calibration agents used.
    pub n: usize,
    pub future_len: usize,
    #[serde(with = "inf_as_null")]
    pub h: Vec<f64>,
    /// Some coordinate needed a level above 1 and is unbounded.
    pub infinite: bool,
    /// The copula search could not reach the target coverage even at the
    /// largest calibration score.
    pub under_coverage: bool,
}

impl QuantileBand {
    pub fn at(&self, t: usize) -> [f64; 2] {
        match self.score.dims() {
            1 => [self.h[t], self.h[t]],
            _ => [self.h[2 * t], self.h[2 * t + 1]],
        }
    }
}

fn check_scores(scores: &[NonconformityScores]) -> Result<(ScoreKind, usize)> {
    let Some(first) = scores.first() else {
        return Err(Error::Data("calibration needs at least one score".into()));
    };
    if scores.iter().any(|s| s.kind != first.kind || s.future_len != first.future_len) {
        return Err(Error::Data("calibration scores disagree on kind or horizon".into()));
    }
    Ok((first.kind, first.future_len))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// One-based order-statistic index for `level` over `n` samples.
pub fn order_index(level: f64, n: usize) -> usize {
    ((level * n as f64) - CEIL_TOLERANCE).ceil().max(1.0) as usize
}

fn column(scores: &[NonconformityScores], c: usize) -> Vec<f64> {
    let mut col: Vec<f64> = scores.iter().map(|s| s.values[c]).collect();
    col.sort_by(f64::total_cmp);
    col
}

/// Bonferroni-corrected split-conformal band.
pub fn quantile_cfrnn(scores: &[NonconformityScores], alpha: f64) -> Result<QuantileBand> {
    check_alpha(alpha)?;
    let (kind, t_f) = check_scores(scores)?;
    let n = scores.len();
    let a = kind.group_alpha(alpha);
    let level = (1.0 - a / t_f as f64) * (1.0 + 1.0 / n as f64);
    let k = order_index(level, n);
    let h: Vec<f64> = (0..t_f * kind.dims())
        .map(|c| if k > n { f64::INFINITY } else { column(scores, c)[k - 1] })
        .collect();
    Ok(QuantileBand {
        method: Method::Cfrnn,
        score: kind,
        alpha,
        n,
        future_len: t_f,
        infinite: k > n,
        under_coverage: false,
        h,
    })
}

/// Seeded split of the calibration set into CDF-fitting and copula halves;
/// `ratio` is the share of the first part.
pub fn copula_halves(scores: &[NonconformityScores], ratio: f64, seed: u64) -> Result<(Vec<NonconformityScores>, Vec<NonconformityScores>)> {
    let n = scores.len();
    let n1 = (ratio * n as f64).round() as usize;
    if n1 == 0 || n1 >= n {
        return Err(Error::Data(format!(
            "copula calibration needs both halves nonempty; {n} scores with ratio {ratio}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| scores[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n1]), pick(&order[n1..])))
}

/// Copula band from an explicit split.
pub fn quantile_copula_split(cal1: &[NonconformityScores], cal2: &[NonconformityScores], alpha: f64) -> Result<QuantileBand> {
    check_alpha(alpha)?;
    let (kind, t_f) = check_scores(cal1)?;
    let (kind2, t_f2) = check_scores(cal2)?;
    if kind != kind2 || t_f != t_f2 {
        return Err(Error::Data("copula halves disagree on kind or horizon".into()));
    }
    let dims = kind.dims();
    let target = 1.0 - kind.group_alpha(alpha);
    let n1 = cal1.len();
    let sorted: Vec<Vec<f64>> = (0..t_f * dims).map(|c| column(cal1, c)).collect();

    let mut h = vec![0.0; t_f * dims];
    let mut under_coverage = false;
    for axis in 0..dims {
        let coords: Vec<usize> = (0..t_f).map(|t| t * dims + axis).collect();
        // fraction of cal2 agents inside the thresholds at index j, every step
        let coverage = |j: usize| -> f64 {
            let inside = cal2
                .iter()
                .filter(|s| coords.iter().all(|&c| s.values[c] <= sorted[c][j - 1]))
                .count();
            inside as f64 / cal2.len() as f64
        };
        let j = if coverage(n1) < target {
            under_coverage = true;
            n1
        } else {
            let (mut lo, mut hi) = (0, n1);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if coverage(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        for &c in &coords {
            h[c] = sorted[c][j - 1];
        }
    }
    if under_coverage {
        log::warn!("copula calibration under-covers at alpha {alpha}: using the largest calibration scores");
    }
    Ok(QuantileBand {
        method: Method::Copula,
        score: kind,
        alpha,
        n: n1 + cal2.len(),
        future_len: t_f,
        h,
        infinite: false,
        under_coverage,
    })
}

pub const DEFAULT_COPULA_RATIO: f64 = 0.5;

pub fn quantile_copula(scores: &[NonconformityScores], alpha: f64, ratio: f64, seed: u64) -> Result<QuantileBand> {
    check_scores(scores)?;
    let (cal1, cal2) = copula_halves(scores, ratio, seed)?;
    quantile_copula_split(&cal1, &cal2, alpha)
}

pub fn calibrate(scores: &[NonconformityScores], method: Method, alpha: f64, seed: u64) -> Result<QuantileBand> {
    match method {
        Method::Cfrnn => quantile_cfrnn(scores, alpha),
        Method::Copula => quantile_copula(scores, alpha, DEFAULT_COPULA_RATIO, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Ellipse,
    Circle,
}

/// Confidence regions around every mode and step, mode-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRegion {
    pub shape: RegionShape,
    pub modes: usize,
    pub future_len: usize,
    pub centers: Vec<Point>,
    /// Ellipse semi-axes; for circles both entries hold the radius.
    #[serde(with = "pairs_inf_as_null")]
    pub half_widths: Vec<[f64; 2]>,
    pub infinite: bool,
}

mod pairs_inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[[f64; 2]], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<[Option<f64>; 2]> = v
            .iter()
            .map(|p| [p[0].is_finite().then_some(p[0]), p[1].is_finite().then_some(p[1])])
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[f64; 2]>, D::Error> {
        let opt: Vec<[Option<f64>; 2]> = Vec::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|p| [p[0].unwrap_or(f64::INFINITY), p[1].unwrap_or(f64::INFINITY)])
            .collect())
    }
}

impl PredictionRegion {
    fn at(&self, k: usize, t: usize) -> usize {
        k * self.future_len + t
    }

    pub fn contains(&self, k: usize, t: usize, p: Point) -> bool {
        let i = self.at(k, t);
        match self.shape {
            RegionShape::Ellipse => in_ellipse(self.centers[i], self.half_widths[i], p),
            RegionShape::Circle => in_circle(self.centers[i], self.half_widths[i][0], p),
        }
    }

    pub fn area(&self, k: usize, t: usize) -> f64 {
        let h = self.half_widths[self.at(k, t)];
        match self.shape {
            RegionShape::Ellipse => ellipse_area(h[0], h[1]),
            RegionShape::Circle => circle_area(h[0]),
        }
    }
}

pub fn build_region(pred: &MixturePrediction, band: &QuantileBand) -> Result<PredictionRegion> {
    if band.future_len != pred.future_len {
        return Err(Error::Data(format!(
            "band covers {} steps, prediction has {}",
            band.future_len, pred.future_len
        )));
    }
    let shape = match band.score {
        ScoreKind::L2 => RegionShape::Circle,
        _ => RegionShape::Ellipse,
    };
    let mut centers = Vec::with_capacity(pred.modes * pred.future_len);
    let mut half_widths = Vec::with_capacity(pred.modes * pred.future_len);
    for k in 0..pred.modes {
        for t in 0..pred.future_len {
            centers.push(pred.mu(k, t));
            let h = band.at(t);
            half_widths.push(match band.score {
                ScoreKind::Z => {
                    let b = pred.b(k, t);
                    if let Some(&bad) = b.iter().find(|&&v| !(v > 0.0)) {
                        return Err(Error::NonPositiveScale(bad));
                    }
                    [b[0] * h[0], b[1] * h[1]]
                }
                _ => h,
            });
        }
    }
    Ok(PredictionRegion {
        shape,
        modes: pred.modes,
        future_len: pred.future_len,
        infinite: half_widths.iter().flatten().any(|v| v.is_infinite()),
        centers,
        half_widths,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UqMetrics {
    pub ind_coverage: f64,
    pub joint_coverage: f64,
    pub mean_size: f64,
    pub agents: usize,
}

/// Coverage and size of one agent's regions: (ind, joint, size).
pub fn agent_uq(region: &PredictionRegion, y: &[Point]) -> (f64, bool, f64) {
    let t_f = region.future_len;
    let mut best_mode = 0;
    let mut best_cov = -1.0;
    let mut joint = false;
    for k in 0..region.modes {
        let inside = (0..t_f).filter(|&t| region.contains(k, t, y[t])).count();
        let cov = inside as f64 / t_f as f64;
        joint |= inside == t_f;
        if cov > best_cov {
            best_cov = cov;
            best_mode = k;
        }
    }
    let size = (0..t_f).map(|t| region.area(best_mode, t)).sum::<f64>() / t_f as f64;
    (best_cov, joint, size)
}

pub fn uq_metrics(regions: &[PredictionRegion], labels: &[Vec<Point>]) -> Result<UqMetrics> {
    if regions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} regions but {} labels",
            regions.len(),
            labels.len()
        )));
    }
    if regions.is_empty() {
        return Ok(UqMetrics::default());
    }
    let mut acc = UqMetrics {
        agents: regions.len(),
        ..Default::default()
    };
    for (r, y) in regions.iter().zip(labels) {
        if y.len() != r.future_len {
            return Err(Error::Data("label and region horizons differ".into()));
        }
        let (ind, joint, size) = agent_uq(r, y);
        acc.ind_coverage += ind;
        acc.joint_coverage += if joint { 1.0 } else { 0.0 };
        acc.mean_size += size;
    }
    let n = regions.len() as f64;
    acc.ind_coverage /= n;
    acc.joint_coverage /= n;
    acc.mean_size /= n;
    Ok(acc)
}

/// Regions for every forecast under `band`, then their metrics.
pub fn evaluate_band(forecasts: &[AgentForecast], band: &QuantileBand) -> Result<UqMetrics> {
    let regions = forecasts
        .iter()
        .map(|f| build_region(&f.prediction, band))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<Point>> = forecasts.iter().map(|f| f.future.clone()).collect();
    uq_metrics(&regions, &labels)
}

pub fn uq_rows(m: &UqMetrics, band: &QuantileBand) -> Vec<MetricRow> {
    [
        ("ind_coverage", m.ind_coverage),
        ("joint_coverage", m.joint_coverage),
        ("size", m.mean_size),
    ]
    .into_iter()
    .map(|(name, value)| MetricRow {
        metric: name.to_string(),
        alpha: Some(band.alpha),
        method: Some(band.method.as_str().to_string()),
        score: Some(band.score.as_str().to_string()),
        value,
    })
    .collect()
}

pub fn band_file_name(band: &QuantileBand) -> String {
    format!("band_{}_{}_a{}.json", band.method, band.score, band.alpha)
}

pub fn write_band(path: impl AsRef<Path>, band: &QuantileBand) -> Result<()> {
    let text = serde_json::to_string_pretty(band)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_band(path: impl AsRef<Path>) -> Result<QuantileBand> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One forecast per line.
pub fn write_forecasts(path: impl AsRef<Path>, forecasts: &[AgentForecast]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in forecasts {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_forecasts(path: impl AsRef<Path>) -> Result<Vec<AgentForecast>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: AgentForecast = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("forecast line {}: {e}", i + 1)))?;
        out.push(f);
    }
    Ok(out)
}
