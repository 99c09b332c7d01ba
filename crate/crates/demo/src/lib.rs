//! Browser demo: generate a synthetic worker snapshot, score a hand-typed
//! route against the observed visit order, and compare the two greedy
//! baselines.
//!
//! The `*_json` functions hold the logic and run natively; the exported
//! wasm functions are thin wrappers that turn errors into JS exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use routerl::metrics::SampleMetrics;
use routerl::reward::{classify, route_rewards, RewardCase, RewardConfig};
use routerl::synthgen::{
    baseline_distance_greedy, baseline_time_greedy, generate_dataset, parse_sample, GenConfig, ProfileMix,
    WorkerProfile,
};
use routerl::{RoutePermutation, Sample};

#[derive(Serialize)]
struct Metrics {
    hr1: f64,
    acc3: Option<f64>,
    krc: Option<f64>,
    lmd: f64,
    lsd: f64,
    ed: f64,
}

impl From<SampleMetrics> for Metrics {
    fn from(m: SampleMetrics) -> Self {
        Self {
            hr1: m.hr1,
            acc3: m.acc3,
            krc: m.krc,
            lmd: m.lmd,
            lsd: m.lsd,
            ed: m.ed,
        }
    }
}

#[derive(Serialize)]
struct Step {
    t: usize,
    task: usize,
    case: &'static str,
    reward: f64,
}

#[derive(Serialize)]
struct Score {
    route: Vec<usize>,
    metrics: Metrics,
    steps: Vec<Step>,
    total_reward: f64,
}

#[derive(Serialize)]
struct Baselines {
    time_greedy: Score,
    distance_greedy: Score,
}

fn case_name(case: RewardCase) -> &'static str {
    match case {
        RewardCase::UnlabelledEarly => "unlabelled-early",
        RewardCase::UnlabelledLate => "unlabelled-late",
        RewardCase::Misplaced { .. } => "misplaced",
        RewardCase::Exact => "exact",
    }
}

fn load(sample_json: &str) -> Result<Sample, String> {
    parse_sample(sample_json, 1).map_err(|e| e.to_string())
}

fn score(sample: &Sample, route: RoutePermutation) -> Result<Score, String> {
    if route.len() != sample.n() {
        return Err(format!("route has {} tasks, the sample has {}", route.len(), sample.n()));
    }
    let cfg = RewardConfig::default();
    let metrics = SampleMetrics::compute(0, &route, &sample.label).map_err(|e| e.to_string())?;
    let rewards = route_rewards(route.as_slice(), &sample.label, &cfg);
    let steps = route
        .as_slice()
        .iter()
        .zip(&rewards)
        .enumerate()
        .map(|(i, (&task, &reward))| Step {
            t: i + 1,
            task,
            case: case_name(classify(task, i + 1, &sample.label)),
            reward,
        })
        .collect();
    Ok(Score {
        route: route.into_inner(),
        metrics: metrics.into(),
        steps,
        total_reward: rewards.iter().sum(),
    })
}

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// One sample with `n` tasks as a dataset line. `profile` is `mixed`,
/// `distance` or `time`; `noise_temp` only applies to the latter two.
pub fn generate_json(seed: u64, n: usize, profile: &str, noise_temp: f64) -> Result<String, String> {
    let profiles = match profile {
        "mixed" => ProfileMix::Mixed,
        "distance" => ProfileMix::Fixed(WorkerProfile::distance_only(noise_temp)),
        "time" => ProfileMix::Fixed(WorkerProfile::time_only(noise_temp)),
        other => return Err(format!("unknown profile {other:?}")),
    };
    let cfg = GenConfig {
        workers: 1,
        samples_per_worker: 1,
        n_min: n,
        n_max: n,
        profiles,
        seed,
        ..GenConfig::default()
    };
    let sample = generate_dataset(&cfg).map_err(|e| e.to_string())?.remove(0);
    to_json(&sample)
}

/// Scores a route given as task ids separated by spaces or commas.
pub fn score_json(sample_json: &str, route: &str) -> Result<String, String> {
    let sample = load(sample_json)?;
    let ids = route
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("not a task id: {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let route = RoutePermutation::new(ids).map_err(|e| e.to_string())?;
    to_json(&score(&sample, route)?)
}

pub fn baselines_json(sample_json: &str) -> Result<String, String> {
    let sample = load(sample_json)?;
    to_json(&Baselines {
        time_greedy: score(&sample, baseline_time_greedy(&sample))?,
        distance_greedy: score(&sample, baseline_distance_greedy(&sample))?,
    })
}

#[wasm_bindgen]
pub fn generate(seed: u32, n: usize, profile: &str, noise_temp: f64) -> Result<String, JsError> {
    generate_json(seed.into(), n, profile, noise_temp).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_route(sample_json: &str, route: &str) -> Result<String, JsError> {
    score_json(sample_json, route).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn baselines(sample_json: &str) -> Result<String, JsError> {
    baselines_json(sample_json).map_err(|e| JsError::new(&e))
}
