//! Synthetic courier datasets, the two greedy baselines and dataset files.
//!
//! Each simulated worker repeatedly picks the next task from a softmax over
//! an urgency score that trades distance against remaining promised time.
//! The full visit order is simulated and its first `m` tasks become the label.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{
    validate_sample, RouteLabel, RoutePermutation, Sample, Task, TaskId, Violation, N_MAX,
};

/// Side length of the square zone grid used for `aoi_id`.
const AOI_GRID: usize = 3;
const PROFILE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const DEFAULT_NOISE_TEMP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerProfile {
    pub beta_dist: f64,
    pub beta_time: f64,
    /// Softmax temperature of the choice noise. Zero means a deterministic
    /// argmax with ties broken by lowest id.
    pub noise_temp: f64,
    /// Units per minute.
    pub speed: f64,
    pub seed: u64,
}

/// How worker profiles are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileMix {
    /// Every worker gets its own random trade-off between distance and time.
    Mixed,
    /// All workers use the given profile weights (seed ignored).
    Fixed(WorkerProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub workers: usize,
    pub samples_per_worker: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Label truncation ratio: `m = max(1, ceil(rho * n))`.
    pub rho: f64,
    /// Coordinates are drawn in `[0, box_size]^2`.
    pub box_size: f64,
    /// Promised remaining time range in minutes.
    pub promise_min: f64,
    pub promise_max: f64,
    pub profiles: ProfileMix,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            workers: 50,
            samples_per_worker: 20,
            n_min: 5,
            n_max: 10,
            rho: 0.7,
            box_size: 10.0,
            promise_min: -10.0,
            promise_max: 120.0,
            profiles: ProfileMix::Mixed,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {}", join_violations(violations))]
    Invalid { line: usize, violations: Vec<Violation> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_min < 1 || self.n_min > self.n_max || self.n_max > N_MAX {
            return bad(&format!(
                "need 1 <= n_min <= n_max <= {N_MAX}, got n_min={} n_max={}",
                self.n_min, self.n_max
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(&format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.box_size > 0.0) || !(self.promise_min <= self.promise_max) {
            return bad("box_size must be positive and promise_min <= promise_max");
        }
        if let ProfileMix::Fixed(p) = &self.profiles {
            p.validate()?;
        }
        Ok(())
    }

    /// Applies one `key=value` setting. `profile` takes `mixed`,
    /// `distance` or `time`; `noise_temp` applies to the fixed profiles.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        let v = value.trim();
        let bad = || SynthError::Config(format!("bad value for {}: {v}", key.trim()));
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad())?
            };
        }
        match key.trim() {
            "workers" => self.workers = num!(),
            "samples_per_worker" => self.samples_per_worker = num!(),
            "n_min" => self.n_min = num!(),
            "n_max" => self.n_max = num!(),
            "rho" => self.rho = num!(),
            "box_size" => self.box_size = num!(),
            "promise_min" => self.promise_min = num!(),
            "promise_max" => self.promise_max = num!(),
            "seed" => self.seed = num!(),
            "profile" => {
                let noise = match &self.profiles {
                    ProfileMix::Fixed(p) => p.noise_temp,
                    ProfileMix::Mixed => DEFAULT_NOISE_TEMP,
                };
                self.profiles = match v {
                    "mixed" => ProfileMix::Mixed,
                    "distance" => ProfileMix::Fixed(WorkerProfile::distance_only(noise)),
                    "time" => ProfileMix::Fixed(WorkerProfile::time_only(noise)),
                    _ => return Err(bad()),
                };
            }
            "noise_temp" => match &mut self.profiles {
                ProfileMix::Fixed(p) => p.noise_temp = num!(),
                ProfileMix::Mixed => {
                    return Err(SynthError::Config("noise_temp needs a fixed profile".into()))
                }
            },
            other => return Err(SynthError::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Applies flat `key=value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), SynthError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SynthError::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn label_len(&self, n: usize) -> usize {
        ((self.rho * n as f64).ceil() as usize).clamp(1, n)
    }
}

impl WorkerProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.beta_dist < 0.0 || self.beta_time < 0.0 || self.beta_dist + self.beta_time == 0.0 {
            return Err(SynthError::Config(
                "beta_dist and beta_time must be non-negative and not both zero".into(),
            ));
        }
        if !(self.noise_temp >= 0.0) || !(self.speed > 0.0) {
            return Err(SynthError::Config("noise_temp must be >= 0 and speed > 0".into()));
        }
        Ok(())
    }

    /// Always heads for the nearest task.
    pub fn distance_only(noise_temp: f64) -> Self {
        Self {
            beta_dist: 1.0,
            beta_time: 0.0,
            noise_temp,
            speed: 0.5,
            seed: 0,
        }
    }

    /// Always heads for the most urgent task.
    pub fn time_only(noise_temp: f64) -> Self {
        Self {
            beta_dist: 0.0,
            beta_time: 1.0,
            noise_temp,
            speed: 0.5,
            seed: 0,
        }
    }

    /// A random profile for a mixed population.
    pub fn random<R: Rng>(rng: &mut R, seed: u64) -> Self {
        Self {
            beta_dist: rng.gen_range(0.3..1.5),
            beta_time: rng.gen_range(0.0..0.08),
            noise_temp: rng.gen_range(0.1..0.4),
            speed: rng.gen_range(0.3..0.6),
            seed,
        }
    }

    /// Urgency of a task reached after `travel` distance with `remaining`
    /// promised minutes left once there. Higher is more attractive.
    fn score(&self, travel: f64, remaining: f64) -> f64 {
        -self.beta_dist * travel - self.beta_time * remaining
    }
}

fn dist(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx).hypot(ay - by)
}

fn aoi_of(x: f64, y: f64, box_size: f64) -> u32 {
    let cell = |v: f64| ((v / box_size * AOI_GRID as f64) as usize).min(AOI_GRID - 1);
    (cell(y) * AOI_GRID + cell(x)) as u32
}

/// Runs the worker's choice process over all tasks and returns the full
/// visit order.
pub fn simulate_visit_order<R: Rng>(sample: &Sample, profile: &WorkerProfile, rng: &mut R) -> Vec<TaskId> {
    let n = sample.n();
    let mut done = vec![false; n];
    let (mut px, mut py) = (sample.worker_x, sample.worker_y);
    let mut clock = 0.0;
    let mut order = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    for _ in 0..n {
        for (i, t) in sample.tasks.iter().enumerate() {
            let d = dist(px, py, t.x, t.y);
            let remaining = t.promise_remaining - clock - d / profile.speed;
            scores[i] = profile.score(d, remaining);
        }
        let pick = if profile.noise_temp == 0.0 {
            let mut best: Option<usize> = None;
            for i in (0..n).filter(|&i| !done[i]) {
                if best.map_or(true, |b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            best.expect("a task remains")
        } else {
            let max = (0..n)
                .filter(|&i| !done[i])
                .map(|i| scores[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..n)
                .map(|i| {
                    if done[i] {
                        0.0
                    } else {
                        ((scores[i] - max) / profile.noise_temp).exp()
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                if done[i] {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.expect("a task remains")
        };
        let t = &sample.tasks[pick];
        clock += dist(px, py, t.x, t.y) / profile.speed;
        px = t.x;
        py = t.y;
        done[pick] = true;
        order.push(pick + 1);
    }
    order
}

fn profile_for(cfg: &GenConfig, worker: usize) -> WorkerProfile {
    let seed = cfg.seed ^ PROFILE_SALT.wrapping_mul(worker as u64 + 1);
    match &cfg.profiles {
        ProfileMix::Mixed => WorkerProfile::random(&mut ChaCha8Rng::seed_from_u64(seed), seed),
        ProfileMix::Fixed(p) => WorkerProfile { seed, ..p.clone() },
    }
}

/// Draws one sample's tasks and simulates its label.
fn generate_sample(cfg: &GenConfig, worker: usize, index: usize, profile: &WorkerProfile) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    let b = cfg.box_size;
    let worker_x = rng.gen_range(0.0..b);
    let worker_y = rng.gen_range(0.0..b);
    let tasks = (1..=n)
        .map(|id| {
            let x = rng.gen_range(0.0..b);
            let y = rng.gen_range(0.0..b);
            let promise_remaining = if cfg.promise_max > cfg.promise_min {
                rng.gen_range(cfg.promise_min..cfg.promise_max)
            } else {
                cfg.promise_min
            };
            Task {
                id,
                x,
                y,
                dist_to_worker: dist(worker_x, worker_y, x, y),
                accept_elapsed: rng.gen_range(0.0..120.0),
                promise_remaining,
                aoi_id: aoi_of(x, y, b),
                weight: rng.gen_range(0.2..10.0),
                type_code: rng.gen_range(0..4),
            }
        })
        .collect();
    let k = index % cfg.samples_per_worker.max(1);
    let mut sample = Sample {
        worker_id: worker as u64,
        query_time: 480.0 + 30.0 * k as f64 + 1440.0 * worker as f64,
        worker_x,
        worker_y,
        tasks,
        label: RouteLabel::new_unchecked(Vec::new()),
    };
    let mut order = simulate_visit_order(&sample, profile, &mut rng);
    order.truncate(cfg.label_len(n));
    sample.label = RouteLabel::new_unchecked(order);
    sample
}

/// Generates `workers * samples_per_worker` samples, deterministically in
/// the seed.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Sample>, SynthError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.workers * cfg.samples_per_worker);
    for w in 0..cfg.workers {
        let profile = profile_for(cfg, w);
        for k in 0..cfg.samples_per_worker {
            let index = w * cfg.samples_per_worker + k;
            out.push(generate_sample(cfg, w, index, &profile));
        }
    }
    Ok(out)
}

/// Most urgent first: ascending remaining promised time, ties by lower id.
pub fn baseline_time_greedy(sample: &Sample) -> RoutePermutation {
    let mut ids: Vec<TaskId> = (1..=sample.n()).collect();
    ids.sort_by(|&a, &b| {
        let (pa, pb) = (sample.tasks[a - 1].promise_remaining, sample.tasks[b - 1].promise_remaining);
        pa.total_cmp(&pb).then(a.cmp(&b))
    });
    RoutePermutation::new(ids).expect("sorted ids form a permutation")
}

/// Nearest-neighbour tour from the worker's position, ties by lower id.
pub fn baseline_distance_greedy(sample: &Sample) -> RoutePermutation {
    let n = sample.n();
    let mut done = vec![false; n];
    let (mut px, mut py) = (sample.worker_x, sample.worker_y);
    let mut route = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in sample.tasks.iter().enumerate() {
            if done[i] {
                continue;
            }
            let d = dist(px, py, t.x, t.y);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("a task remains");
        done[i] = true;
        px = sample.tasks[i].x;
        py = sample.tasks[i].y;
        route.push(i + 1);
    }
    RoutePermutation::new(route).expect("each task visited once")
}

/// Writes one JSON object per line.
pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one dataset line and validates it.
pub fn parse_sample(text: &str, line: usize) -> Result<Sample, SynthError> {
    let mut s: Sample = serde_json::from_str(text).map_err(|e| SynthError::Malformed {
        line,
        message: e.to_string(),
    })?;
    s.renumber();
    let violations = validate_sample(&s);
    if !violations.is_empty() {
        return Err(SynthError::Invalid { line, violations });
    }
    Ok(s)
}

/// Reads a dataset written by [`write_dataset`]. Blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>, SynthError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sample(&line, i + 1)?);
    }
    Ok(out)
}
