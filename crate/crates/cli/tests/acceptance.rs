//! Acceptance gate. Prints one PASS/FAIL line per criterion. Failures are
//! reported, not fatal, unless `COVIEW_STRICT_ACCEPTANCE` is set, in which
//! case any failed criterion makes the target exit nonzero.
//!
//! The training-based criteria share one scaled-down synthetic experiment:
//! short histories (1 s) and a 3 s horizon keep a CPU run within minutes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use coview_cli::{main_with_args, RunManifest, MANIFEST_FILE};
use coview_core::conformal::{
    build_region, calibrate, copula_halves, evaluate_band, quantile_cfrnn, quantile_copula_split, score, score_all,
    uq_metrics, Method, NonconformityScores, ScoreKind,
};
use coview_core::decoder::{loss, LossConfig, MixturePrediction};
use coview_core::encoder::{encode, EncodedView, EncoderConfig};
use coview_core::fusion::FusionConfig;
use coview_core::metrics::{ade, fde, BestModeRule, MISS_THRESHOLD_M};
use coview_core::model::{prepare, prepare_all, AgentForecast, FusionMode, Model, ModelConfig, PreparedScenario};
use coview_core::nn::Pass;
use coview_core::numerics::{grad_check, Tape, Tensor};
use coview_core::scene::{
    build_graph, normalize, read_scenarios, write_scenarios, AgentTrack, LaneSegment, Point, Scenario, View,
};
use coview_core::synthgen::{generate, GenConfig};
use coview_core::trainer::{forecasts, split, summarize_forecasts, train, Splits, TrainConfig};
use coview_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerances and thresholds of the gate.
mod tol {
    pub const GRAD_REL_ERROR: f64 = 1e-4;
    pub const GRAD_SECONDS: f64 = 60.0;
    pub const NLL_ABS: f64 = 1e-9;
    pub const FUSION_GAIN: f64 = 0.10;
    pub const FUSION_SECONDS: f64 = 30.0 * 60.0;
    pub const SPLIT_COVERAGE_SLACK: f64 = 0.03;
    pub const SPLIT_SECONDS: f64 = 120.0;
    pub const CFRNN_SIZE_RATIO: f64 = 2.0;
    pub const COPULA_COVERAGE_SLACK: f64 = 0.05;
    pub const ATTENTION_SUM: f64 = 1e-12;
    pub const PERMUTATION: f64 = 1e-10;
}

const ALPHAS: [f64; 3] = [0.2, 0.1, 0.05];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    // cargo passes harness flags such as `--nocapture`; a name filter that
    // does not mention the gate skips it
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let criteria: [(u8, &str, fn() -> Outcome); 8] = [
        (1, "gradient integrity", c1_gradients),
        (2, "Laplace NLL closed form", c2_laplace),
        (3, "fusion benefit", c3_fusion_benefit),
        (4, "split-conformal validity", c4_split_validity),
        (5, "CF-RNN conservatism", c5_cfrnn),
        (6, "copula validity and efficiency", c6_copula),
        (7, "quantile oracle equivalence", c7_oracles),
        (8, "structural invariants", c8_invariants),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{verdict}] {name}: {} ({:.1}s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 && std::env::var_os("COVIEW_STRICT_ACCEPTANCE").is_some() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn line(id: &str, view: View, start: Point, step: Point, n: usize, rng: &mut ChaCha8Rng) -> AgentTrack {
    let xy = (0..n)
        .map(|i| {
            [
                start[0] + step[0] * i as f64 + rng.random_range(-0.05..0.05),
                start[1] + step[1] * i as f64 + rng.random_range(-0.05..0.05),
            ]
        })
        .collect();
    AgentTrack::fully_observed(id, view, xy)
}

/// Ego, a second vehicle-view target, and an agent only the
/// infrastructure sees.
fn three_agents(seed: u64, th: usize, tf: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = th + tf;
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = [heading.cos(), heading.sin()];
    let agents = vec![
        line("ego", View::Vehicle, [0.0, 0.0], dir, n, &mut rng),
        line("b", View::Vehicle, [6.0, 8.0], [-0.4, 0.9], n, &mut rng),
        line("ego", View::Infrastructure, [0.0, 0.0], dir, th, &mut rng),
        line("b", View::Infrastructure, [6.0, 8.0], [-0.4, 0.9], th, &mut rng),
        line("c", View::Infrastructure, [-12.0, 3.0], [0.8, -0.3], th, &mut rng),
    ];
    let lane = |view| LaneSegment {
        view,
        start: [-15.0, -2.0],
        end: [25.0, 2.0],
    };
    Scenario {
        scenario_id: format!("grad-{seed}"),
        ego_agent_id: "ego".into(),
        target_ids: vec!["ego".into(), "b".into()],
        history_len: th,
        future_len: tf,
        agents,
        lanes: vec![lane(View::Vehicle), lane(View::Infrastructure)],
    }
}

fn small_config(seed: u64, d_h: usize, heads: usize, th: usize, tf: usize, modes: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_h,
            n_heads: heads,
            ..Default::default()
        },
        fusion: FusionConfig {
            n_heads: heads,
            ..Default::default()
        },
        modes,
        history_len: th,
        future_len: tf,
        seed,
    }
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..5 {
        let p = prepare(&three_agents(seed, 10, 5), 50.0).unwrap();
        let mut model = Model::new(small_config(seed, 16, 2, 10, 5, 3)).unwrap();
        let skeleton = model.clone();
        let report = grad_check(
            &mut model.params,
            |tape: &mut Tape<'_>| -> Result<_, Error> {
                let (_, l) = skeleton.loss_on(tape, &p, FusionMode::Fused, 1.0, 2, &mut Pass::eval())?;
                Ok(l.total)
            },
            1e-5,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
        checked += report.entries_checked;
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        worst < tol::GRAD_REL_ERROR && secs < tol::GRAD_SECONDS,
        format!("max relative error {worst:.2e} over {checked} entries, 5 seeds, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn c2_laplace() -> Outcome {
    let cfg = LossConfig { epsilon: 0.0, modes: 1 };
    let one = |mu: Point, b: f64| MixturePrediction::new(1, 1, mu.to_vec(), vec![b, b], vec![1.0]).unwrap();
    let exact = loss(&[one([1.5, -2.0], 0.5)], &[vec![[1.5, -2.0]]], &cfg).unwrap().reg;
    let off = loss(&[one([0.0, 0.0], 1.0)], &[vec![[1.0, 0.0]]], &cfg).unwrap().reg;
    // reg = log(2b) + |y - mu| / b per coordinate, averaged over steps
    let want_exact = 2.0 * (2.0f64 * 0.5).ln();
    let want_off = 2.0 * 2f64.ln() + 1.0;
    let e1 = (exact - want_exact).abs();
    let e2 = (off - want_off).abs();
    Outcome::new(
        e1 < tol::NLL_ABS && e2 < tol::NLL_ABS,
        format!("exact-hit loss {exact:.12} (want 0), unit-offset loss {off:.12} (want {want_off:.12})"),
    )
}

// ---------------------------------------------------------------- shared experiment

const EXP_SCENARIOS: usize = 12000;
const EXP_HISTORY: usize = 10;
const EXP_FUTURE: usize = 30;

struct Experiment {
    splits: Splits<PreparedScenario>,
    fused: Model,
    fused_val_fde: f64,
    ego_val_fde: f64,
    seconds: f64,
}

fn experiment_train_config(mode: FusionMode) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 8,
        lr: 2e-3,
        train_ratio: 0.5,
        val_ratio: 0.1,
        mode,
        ..Default::default()
    }
}

fn experiment() -> &'static Experiment {
    static CELL: std::sync::OnceLock<Experiment> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let gen = GenConfig {
            n_scenarios: EXP_SCENARIOS,
            history_len: EXP_HISTORY,
            future_len: EXP_FUTURE,
            occlusion_rate: 0.5,
            seed: 7,
            ..Default::default()
        };
        let data = prepare_all(&generate(&gen).unwrap(), 50.0).unwrap();
        let splits = split(&data, &experiment_train_config(FusionMode::Fused)).unwrap();
        let run = |mode| {
            let model = Model::new(small_config(0, 32, 4, EXP_HISTORY, EXP_FUTURE, 6)).unwrap();
            let out = train(model, &splits.train, &splits.val, &experiment_train_config(mode)).unwrap();
            let fde = out.log[out.best_epoch - 1].val.min_fde;
            (out.model, fde)
        };
        let (fused, fused_val_fde) = run(FusionMode::Fused);
        let (_, ego_val_fde) = run(FusionMode::Ego);
        Experiment {
            splits,
            fused,
            fused_val_fde,
            ego_val_fde,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn c3_fusion_benefit() -> Outcome {
    let e = experiment();
    let gain = 1.0 - e.fused_val_fde / e.ego_val_fde;
    Outcome::new(
        gain >= tol::FUSION_GAIN && e.seconds < tol::FUSION_SECONDS,
        format!(
            "val minFDE fused {:.3} vs ego {:.3} ({:.1}% lower) on {} scenarios, {:.0}s for both runs",
            e.fused_val_fde,
            e.ego_val_fde,
            100.0 * gain,
            EXP_SCENARIOS,
            e.seconds
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_split_validity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // single-mode T_f = 1 regression with heteroscedastic noise
    let pool: Vec<(MixturePrediction, Vec<Point>)> = (0..3000)
        .map(|_| {
            let x: f64 = rng.random_range(-3.0..3.0);
            let mu = [x, 0.5 * x];
            let s = [0.5 + 0.2 * x.abs(), 1.0];
            let noise = |rng: &mut ChaCha8Rng| {
                let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            let y = [mu[0] + s[0] * noise(&mut rng), mu[1] + s[1] * noise(&mut rng)];
            (MixturePrediction::new(1, 1, mu.to_vec(), s.to_vec(), vec![1.0]).unwrap(), vec![y])
        })
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for method in Method::ALL {
        for alpha in ALPHAS {
            let mut total = 0.0;
            for rep in 0..20u64 {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rep));
                let (cal, test) = idx.split_at(800);
                let scores: Vec<_> = cal.iter().map(|&i| score(&pool[i].0, &pool[i].1, ScoreKind::L2).unwrap()).collect();
                let band = calibrate(&scores, method, alpha, rep).unwrap();
                let regions: Vec<_> = test.iter().map(|&i| build_region(&pool[i].0, &band).unwrap()).collect();
                let labels: Vec<_> = test.iter().map(|&i| pool[i].1.clone()).collect();
                total += uq_metrics(&regions, &labels).unwrap().joint_coverage;
            }
            let cov = total / 20.0;
            pass &= cov >= 1.0 - alpha - tol::SPLIT_COVERAGE_SLACK && cov <= 1.0;
            parts.push(format!("{method}@{alpha}={cov:.3}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        pass && secs < tol::SPLIT_SECONDS,
        format!("L2 coverage over 20 splits of n_cal=800: {}", parts.join(" ")),
    )
}

// ---------------------------------------------------------------- 5, 6

struct UqRow {
    kind: ScoreKind,
    method: Method,
    alpha: f64,
    joint: f64,
    size: f64,
}

fn uq_table() -> &'static (Vec<UqRow>, usize, usize) {
    static CELL: std::sync::OnceLock<(Vec<UqRow>, usize, usize)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let e = experiment();
        let cal = forecasts(&e.fused, &e.splits.cal, FusionMode::Fused).unwrap();
        let test = forecasts(&e.fused, &e.splits.test, FusionMode::Fused).unwrap();
        let mut rows = Vec::new();
        for kind in ScoreKind::ALL {
            let scores = score_all(&cal, kind).unwrap();
            for method in Method::ALL {
                for alpha in ALPHAS {
                    let band = calibrate(&scores, method, alpha, 0).unwrap();
                    let m = evaluate_band(&test, &band).unwrap();
                    rows.push(UqRow {
                        kind,
                        method,
                        alpha,
                        joint: m.joint_coverage,
                        size: m.mean_size,
                    });
                }
            }
        }
        (rows, cal.len(), test.len())
    })
}

fn row(rows: &[UqRow], kind: ScoreKind, method: Method, alpha: f64) -> &UqRow {
    rows.iter()
        .find(|r| r.kind == kind && r.method == method && r.alpha == alpha)
        .unwrap()
}

fn c5_cfrnn() -> Outcome {
    let (rows, n_cal, n_test) = uq_table();
    let mut pass = *n_cal >= 800;
    let mut parts = Vec::new();
    for kind in ScoreKind::ALL {
        for alpha in ALPHAS {
            let cf = row(rows, kind, Method::Cfrnn, alpha);
            let co = row(rows, kind, Method::Copula, alpha);
            let ratio = cf.size / co.size;
            pass &= cf.joint >= 1.0 - alpha && ratio >= tol::CFRNN_SIZE_RATIO;
            parts.push(format!("{kind}@{alpha}: cov {:.3} size x{ratio:.1}", cf.joint));
        }
    }
    Outcome::new(pass, format!("n_cal={n_cal} n_test={n_test}; {}", parts.join(", ")))
}

fn c6_copula() -> Outcome {
    let (rows, _, _) = uq_table();
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in ALPHAS {
        let mut covs = Vec::new();
        for kind in ScoreKind::ALL {
            let co = row(rows, kind, Method::Copula, alpha);
            pass &= co.joint >= 1.0 - alpha - tol::COPULA_COVERAGE_SLACK;
            covs.push(format!("{kind} {:.3}", co.joint));
        }
        let size = |k| row(rows, k, Method::Copula, alpha).size;
        let smaller = size(ScoreKind::L1).min(size(ScoreKind::L2)) < size(ScoreKind::Z);
        pass &= smaller;
        parts.push(format!(
            "alpha {alpha}: cov [{}], size z {:.1} l1 {:.1} l2 {:.1}",
            covs.join(", "),
            size(ScoreKind::Z),
            size(ScoreKind::L1),
            size(ScoreKind::L2)
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

// ---------------------------------------------------------------- 7

fn kth_smallest(values: &[f64], k: usize) -> f64 {
    values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&w| w <= v).count() >= k)
        .fold(f64::INFINITY, f64::min)
}

fn oracle_cfrnn(scores: &[NonconformityScores], alpha: f64) -> Vec<f64> {
    let n = scores.len();
    let (kind, t_f) = (scores[0].kind, scores[0].future_len);
    let level = (1.0 - alpha / kind.dims() as f64 / t_f as f64) * (1.0 + 1.0 / n as f64);
    let k = (1..=n).find(|&k| k as f64 >= level * n as f64 - 1e-9);
    (0..t_f * kind.dims())
        .map(|c| k.map_or(f64::INFINITY, |k| kth_smallest(&scores.iter().map(|s| s.values[c]).collect::<Vec<_>>(), k)))
        .collect()
}

fn oracle_copula(cal1: &[NonconformityScores], cal2: &[NonconformityScores], alpha: f64) -> Vec<f64> {
    let (kind, t_f) = (cal1[0].kind, cal1[0].future_len);
    let dims = kind.dims();
    let n1 = cal1.len();
    let inv = |c: usize, u: f64| {
        let k = ((u * n1 as f64).ceil() as usize).clamp(1, n1);
        kth_smallest(&cal1.iter().map(|s| s.values[c]).collect::<Vec<_>>(), k)
    };
    let target = 1.0 - alpha / dims as f64;
    let mut h = vec![0.0; t_f * dims];
    for axis in 0..dims {
        let coverage = |u: f64| {
            cal2.iter()
                .filter(|s| (0..t_f).all(|t| s.values[t * dims + axis] <= inv(t * dims + axis, u)))
                .count() as f64
                / cal2.len() as f64
        };
        let u = if coverage(1.0) < target {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > 1e-4 {
                let mid = 0.5 * (lo + hi);
                if coverage(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        for t in 0..t_f {
            h[t * dims + axis] = inv(t * dims + axis, u);
        }
    }
    h
}

fn c7_oracles() -> Outcome {
    let mut mismatches = 0;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + case);
        let kind = ScoreKind::ALL[case as usize % 3];
        let n = rng.random_range(2..=50);
        let t_f = rng.random_range(1..=5);
        let alpha = [0.05, 0.1, 0.2, 0.3][rng.random_range(0..4)];
        let scores: Vec<_> = (0..n)
            .map(|_| {
                let v = (0..t_f * kind.dims()).map(|_| rng.random_range(0..30) as f64 / 6.0).collect();
                NonconformityScores::new(kind, t_f, v).unwrap()
            })
            .collect();
        if quantile_cfrnn(&scores, alpha).unwrap().h != oracle_cfrnn(&scores, alpha) {
            mismatches += 1;
        }
        let (c1, c2) = copula_halves(&scores, 0.5, case).unwrap();
        if quantile_copula_split(&c1, &c2, alpha).unwrap().h != oracle_copula(&c1, &c2, alpha) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches} mismatches over 50 calibration sets x 2 procedures"))
}

// ---------------------------------------------------------------- 8

fn c8_invariants() -> Outcome {
    let checks: [(&str, fn() -> Result<(), String>); 6] = [
        ("attention normalization", inv_attention),
        ("permutation invariance", inv_permutation),
        ("locality", inv_locality),
        ("metric brute force", inv_metrics),
        ("scenario JSONL round trip", inv_jsonl),
        ("CLI seed determinism", inv_cli),
    ];
    let mut failures = Vec::new();
    for (name, f) in checks {
        if let Err(e) = f() {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Outcome::new(true, "6 of 6 invariant checks hold")
    } else {
        Outcome::new(false, failures.join("; "))
    }
}

fn small_synthetic(n: usize, seed: u64) -> Vec<Scenario> {
    generate(&GenConfig {
        n_scenarios: n,
        history_len: 8,
        future_len: 6,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn inv_attention() -> Result<(), String> {
    let model = Model::new(small_config(1, 16, 4, 8, 6, 3)).unwrap();
    for s in small_synthetic(20, 3) {
        let p = prepare(&s, 50.0).unwrap();
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &p, FusionMode::Fused, &mut Pass::eval()).unwrap();
        let Some(att) = out.fused.attention[0] else { continue };
        let w = tape.attention_weights(att).unwrap();
        for (row, nbrs) in w.iter().zip(&out.fused.neighbors) {
            for head in row {
                let sum: f64 = head.iter().sum();
                if !nbrs.is_empty() && (sum - 1.0).abs() > tol::ATTENTION_SUM {
                    return Err(format!("weights sum to {sum}"));
                }
            }
        }
    }
    Ok(())
}

fn inv_permutation() -> Result<(), String> {
    let model = Model::new(small_config(2, 16, 4, 8, 6, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in small_synthetic(10, 4) {
        let mut shuffled = s.clone();
        shuffled.agents.shuffle(&mut rng);
        shuffled.lanes.shuffle(&mut rng);
        let a = model.predict(&prepare(&s, 50.0).unwrap(), FusionMode::Fused).unwrap();
        let b = model.predict(&prepare(&shuffled, 50.0).unwrap(), FusionMode::Fused).unwrap();
        for fa in &a {
            let fb = b.iter().find(|f| f.agent_id == fa.agent_id).ok_or("agent lost")?;
            let worst = fa
                .prediction
                .mu
                .iter()
                .zip(&fb.prediction.mu)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if worst > tol::PERMUTATION {
                return Err(format!("forecast moved by {worst:e}"));
            }
        }
        // embeddings per view, by agent id
        let ns = normalize(&s).unwrap();
        let nss = normalize(&shuffled).unwrap();
        for view in [View::Vehicle, View::Infrastructure] {
            let enc = match view {
                View::Vehicle => &model.vehicle_encoder,
                View::Infrastructure => &model.infra_encoder,
            };
            let ea = encode(&model.params, enc, &ns, &build_graph(&ns, view, 50.0).unwrap()).unwrap();
            let eb = encode(&model.params, enc, &nss, &build_graph(&nss, view, 50.0).unwrap()).unwrap();
            for x in &ea {
                let y = eb.iter().find(|e| e.agent_id == x.agent_id).ok_or("embedding lost")?;
                if x.vector.iter().zip(&y.vector).any(|(u, v)| (u - v).abs() > tol::PERMUTATION) {
                    return Err(format!("{view:?} embedding of {} changed", x.agent_id));
                }
            }
        }
    }
    Ok(())
}

fn inv_locality() -> Result<(), String> {
    let model = Model::new(small_config(3, 16, 4, 8, 6, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new(&model.params);
    let view = |n: usize, rng: &mut ChaCha8Rng| {
        let h: Vec<f64> = (0..n * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pos: Vec<Point> = (0..n).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]).collect();
        (h, pos)
    };
    let (hv, pv) = view(3, &mut rng);
    let (mut hi, mut pi) = view(5, &mut rng);
    // two nodes far outside every vehicle node's radius
    pi[0] = [400.0, 0.0];
    pi[1] = [0.0, -900.0];
    let leaf = |tape: &mut Tape<'_>, v: View, h: &[f64], pos: &[Point]| EncodedView {
        view: v,
        agent_ids: (0..pos.len()).map(|i| i.to_string()).collect(),
        positions: pos.to_vec(),
        h: tape.leaf(Tensor::matrix(pos.len(), 16, h.to_vec())),
    };
    let v = leaf(&mut tape, View::Vehicle, &hv, &pv);
    let i1 = leaf(&mut tape, View::Infrastructure, &hi, &pi);
    let a = model.fusion.fuse(&mut tape, &v, Some(&i1), &mut Pass::eval()).unwrap();
    for x in &mut hi[..32] {
        *x += rng.random_range(-10.0..10.0);
    }
    pi[0] = [-600.0, 50.0];
    let i2 = leaf(&mut tape, View::Infrastructure, &hi, &pi);
    let b = model.fusion.fuse(&mut tape, &v, Some(&i2), &mut Pass::eval()).unwrap();
    if tape.value(a.h).data() != tape.value(b.h).data() {
        return Err("far infrastructure nodes changed the fused embeddings".into());
    }
    Ok(())
}

fn inv_metrics() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (k, t_f) = (rng.random_range(1..7), rng.random_range(1..8));
        let agents: Vec<AgentForecast> = (0..rng.random_range(1..10))
            .map(|i| {
                let mu: Vec<f64> = (0..k * t_f * 2).map(|_| rng.random_range(-4.0..4.0)).collect();
                let future: Vec<Point> = (0..t_f).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
                AgentForecast {
                    scenario_id: "m".into(),
                    agent_id: i.to_string(),
                    prediction: MixturePrediction::new(k, t_f, mu, vec![1.0; k * t_f * 2], vec![1.0 / k as f64; k]).unwrap(),
                    future,
                }
            })
            .collect();
        let s = summarize_forecasts(&agents, BestModeRule::MinFde);
        let (mut sa, mut sf, mut sm) = (0.0, 0.0, 0.0);
        for a in &agents {
            let modes = a.prediction.trajectories();
            let last = |m: &Vec<Point>| {
                let (p, q) = (m[t_f - 1], a.future[t_f - 1]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            };
            let best = (0..k).fold(0, |b, j| if last(&modes[j]) < last(&modes[b]) { j } else { b });
            let avg = (0..t_f)
                .map(|t| ((modes[best][t][0] - a.future[t][0]).powi(2) + (modes[best][t][1] - a.future[t][1]).powi(2)).sqrt())
                .sum::<f64>()
                / t_f as f64;
            sa += avg;
            sf += last(&modes[best]);
            sm += if last(&modes[best]) > MISS_THRESHOLD_M { 1.0 } else { 0.0 };
            if (ade(&modes[best], &a.future) - avg).abs() > 1e-12 || (fde(&modes[best], &a.future) - last(&modes[best])).abs() > 1e-12 {
                return Err("per-agent ADE/FDE disagree".into());
            }
        }
        let n = agents.len() as f64;
        if (s.min_ade - sa / n).abs() > 1e-12 || (s.min_fde - sf / n).abs() > 1e-12 || (s.miss_rate - sm / n).abs() > 1e-12 {
            return Err("summary differs from brute force".into());
        }
    }
    Ok(())
}

fn inv_jsonl() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("s.jsonl");
    let scenarios = small_synthetic(25, 9);
    write_scenarios(&path, &scenarios).map_err(|e| e.to_string())?;
    let back = read_scenarios(&path).map_err(|e| e.to_string())?;
    if back != scenarios {
        return Err("scenarios differ after a round trip".into());
    }
    Ok(())
}

fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        let bytes = if name == MANIFEST_FILE {
            let mut m = RunManifest::read(dir).unwrap();
            m.wall_clock_seconds = 0.0;
            serde_json::to_vec(&m).unwrap()
        } else {
            std::fs::read(&p).unwrap()
        };
        files.insert(name, bytes);
    }
    files
}

fn inv_cli() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |rel: &str| tmp.path().join(rel).display().to_string();
    let (data, ck) = (p("gen/scenarios.jsonl"), p("train/checkpoint.json"));
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen", vec!["generate", "--out", &p("gen"), "--seed", "11", "--scenarios", "30", "--history", "6", "--future", "6"]
            .into_iter()
            .map(String::from)
            .collect()),
        ("train", ["train", "--data", &data, "--out", &p("train"), "--epochs", "2", "--batch", "4", "--d-model", "8", "--heads", "2", "--modes", "2", "--train-ratio", "0.4", "--val-ratio", "0.1"]
            .into_iter()
            .map(String::from)
            .collect()),
        ("eval", ["evaluate", "--data", &data, "--checkpoint", &ck, "--out", &p("eval")].into_iter().map(String::from).collect()),
        ("bands", ["calibrate", "--data", &data, "--checkpoint", &ck, "--out", &p("bands")].into_iter().map(String::from).collect()),
        ("report", ["report", "--data", &data, "--checkpoint", &ck, "--bands", &p("bands"), "--out", &p("report")]
            .into_iter()
            .map(String::from)
            .collect()),
    ];
    let run_all = || -> Result<Vec<BTreeMap<String, Vec<u8>>>, String> {
        let mut snaps = Vec::new();
        for (dir, args) in &commands {
            let argv = std::iter::once("coview".to_string()).chain(args.iter().cloned());
            let code = main_with_args(argv);
            if code != 0 {
                return Err(format!("{} exited with {code}", args[0]));
            }
            snaps.push(dir_snapshot(&tmp.path().join(dir)));
        }
        Ok(snaps)
    };
    let first = run_all()?;
    let second = run_all()?;
    for ((dir, _), (a, b)) in commands.iter().zip(first.iter().zip(&second)) {
        if a != b {
            return Err(format!("{dir} outputs differ between runs"));
        }
    }
    Ok(())
}
