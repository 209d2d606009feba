//! Displacement errors, region geometry and metric rows shared by the
//! trainer and the conformal module.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scene::Point;

/// Final displacement error above which a forecast counts as a miss.
pub const MISS_THRESHOLD_M: f64 = 2.0;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean L2 error over all steps.
pub fn ade(pred: &[Point], truth: &[Point]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).map(|(&p, &y)| dist(p, y)).sum::<f64>() / pred.len() as f64
}

/// L2 error at the last step.
pub fn fde(pred: &[Point], truth: &[Point]) -> f64 {
    match (pred.last(), truth.last()) {
        (Some(&p), Some(&y)) => dist(p, y),
        _ => 0.0,
    }
}

pub fn miss(pred: &[Point], truth: &[Point]) -> bool {
    fde(pred, truth) > MISS_THRESHOLD_M
}

/// How the "best" mode is chosen when reporting minADE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestModeRule {
    /// The mode with the smallest final error (reporting default).
    #[default]
    MinFde,
    /// The mode with the smallest average error.
    MinAde,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentErrors {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
}

/// Errors of the best of several candidate trajectories. Ties go to the
/// lowest mode index.
pub fn best_of_modes(modes: &[Vec<Point>], truth: &[Point], rule: BestModeRule) -> AgentErrors {
    let key = |m: &Vec<Point>| match rule {
        BestModeRule::MinFde => fde(m, truth),
        BestModeRule::MinAde => ade(m, truth),
    };
    let mut best = 0;
    let mut best_key = f64::INFINITY;
    for (k, m) in modes.iter().enumerate() {
        let v = key(m);
        if v < best_key {
            best_key = v;
            best = k;
        }
    }
    let chosen = &modes[best];
    let min_fde = modes.iter().map(|m| fde(m, truth)).fold(f64::INFINITY, f64::min);
    AgentErrors {
        min_ade: ade(chosen, truth),
        min_fde,
        miss: fde(chosen, truth) > MISS_THRESHOLD_M,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub agents: usize,
}

pub fn summarize(errors: &[AgentErrors]) -> ForecastSummary {
    let n = errors.len();
    if n == 0 {
        return ForecastSummary::default();
    }
    let nf = n as f64;
    ForecastSummary {
        min_ade: errors.iter().map(|e| e.min_ade).sum::<f64>() / nf,
        min_fde: errors.iter().map(|e| e.min_fde).sum::<f64>() / nf,
        miss_rate: errors.iter().filter(|e| e.miss).count() as f64 / nf,
        agents: n,
    }
}

pub fn ellipse_area(semi_x: f64, semi_y: f64) -> f64 {
    PI * semi_x * semi_y
}

pub fn circle_area(radius: f64) -> f64 {
    PI * radius * radius
}

/// `(dx/a)^2 + (dy/b)^2 <= 1`. A zero semi-axis admits only zero offset on
/// that axis.
pub fn in_ellipse(center: Point, semi: [f64; 2], p: Point) -> bool {
    let mut acc = 0.0;
    for axis in 0..2 {
        let d = p[axis] - center[axis];
        if semi[axis] == f64::INFINITY {
            continue;
        }
        if semi[axis] == 0.0 {
            if d != 0.0 {
                return false;
            }
            continue;
        }
        acc += (d / semi[axis]).powi(2);
    }
    acc <= 1.0
}

pub fn in_circle(center: Point, radius: f64, p: Point) -> bool {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    dx * dx + dy * dy <= radius * radius
}

/// One row of a results table. Optional columns are left empty in CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub alpha: Option<f64>,
    pub method: Option<String>,
    pub score: Option<String>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            alpha: None,
            method: None,
            score: None,
            value,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.value.is_finite() || self.value == f64::INFINITY
    }
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,alpha,method,score,value\n");
    for r in rows {
        let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.metric,
            alpha,
            r.method.as_deref().unwrap_or(""),
            r.score.as_deref().unwrap_or(""),
            if r.value.is_finite() { r.value.to_string() } else { "inf".into() }
        );
    }
    out
}
