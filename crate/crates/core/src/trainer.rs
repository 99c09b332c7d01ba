//! Cross-entropy pretraining and the policy-gradient trainers
//! (REINFORCE, one-step actor-critic and GAE).
//!
//! All losses are minimisation targets. A batch of `N` samples is processed
//! one computation graph per sample; gradients are summed across the batch
//! and applied with a single Adam step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{
    critic_graph, decode_forced, decode_route, encode, predict, AgentConfig, AgentError, DecodeMode,
    DecoderContext, RouteAgent,
};
use crate::domain::{RouteLabel, Sample, N_MAX};
use crate::metrics::{evaluate_dataset, Bucket, MetricError};
use crate::numerics::checkpoint::load_into;
use crate::numerics::{
    load_checkpoint, save_checkpoint, Adam, CheckpointError, Gradients, Graph, NodeId, NumericsError,
};
use crate::reward::{discounted_returns, route_rewards, RewardConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ce,
    Reinforce,
    Ac,
    Gae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Reinforce => "reinforce",
            Method::Ac => "ac",
            Method::Gae => "gae",
        }
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(Method::Ce),
            "reinforce" => Ok(Method::Reinforce),
            "ac" => Ok(Method::Ac),
            "gae" => Ok(Method::Gae),
            other => Err(ConfigError::Value {
                key: "method".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha_a: f64,
    pub alpha_c: f64,
    pub alpha_ce: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub r_bar: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub seed: u64,
    pub d_h: usize,
    pub n_head: usize,
    pub n_blocks: usize,
    pub n_max: usize,
    pub critic_hidden: usize,
    /// Zero-mean, unit-variance advantages per batch.
    pub normalize_advantages: bool,
    /// Stop the critic loss from reaching the shared actor weights.
    pub freeze_shared: bool,
    pub rollouts_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Gae,
            alpha_a: 0.3,
            alpha_c: 0.1,
            alpha_ce: 0.7,
            lambda: 0.95,
            gamma: 1.0,
            r_bar: 20.0,
            batch_size: 64,
            lr: 1e-3,
            pretrain_epochs: 10,
            train_epochs: 20,
            seed: 0,
            d_h: 32,
            n_head: 4,
            n_blocks: 2,
            n_max: N_MAX,
            critic_hidden: 64,
            normalize_advantages: false,
            freeze_shared: false,
            rollouts_per_sample: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "alpha_a" => self.alpha_a = parse_value(key, v)?,
            "alpha_c" => self.alpha_c = parse_value(key, v)?,
            "alpha_ce" => self.alpha_ce = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "gamma" | "reward.gamma" => self.gamma = parse_value(key, v)?,
            "r_bar" | "reward.r_bar" => self.r_bar = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "epochs" => {
                self.pretrain_epochs = parse_value(key, v)?;
                self.train_epochs = self.pretrain_epochs;
            }
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "train_epochs" => self.train_epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "d_h" => self.d_h = parse_value(key, v)?,
            "n_head" => self.n_head = parse_value(key, v)?,
            "K" => self.n_blocks = parse_value(key, v)?,
            "N_max" => self.n_max = parse_value(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_value(key, v)?,
            "normalize_advantages" => self.normalize_advantages = parse_value(key, v)?,
            "freeze_shared" => self.freeze_shared = parse_value(key, v)?,
            "rollouts_per_sample" => self.rollouts_per_sample = parse_value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parses flat `key=value` text on top of the defaults. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if let Err(e) = self.reward().validate() {
            return bad(e.to_string());
        }
        if [self.alpha_a, self.alpha_c, self.alpha_ce].iter().any(|a| !(*a >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if self.method != Method::Ce && (self.alpha_ce + self.alpha_a - 1.0).abs() > 1e-9 {
            return bad(format!(
                "alpha_ce + alpha_a must equal 1, got {}",
                self.alpha_ce + self.alpha_a
            ));
        }
        if self.batch_size == 0 || self.rollouts_per_sample == 0 {
            return bad("batch_size and rollouts_per_sample must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.n_max == 0 || self.n_max > N_MAX {
            return bad(format!("N_max must lie in 1..={N_MAX}"));
        }
        Ok(())
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            r_bar: self.r_bar,
            gamma: self.gamma,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            d_h: self.d_h,
            n_head: self.n_head,
            n_blocks: self.n_blocks,
            n_max: self.n_max,
            critic_hidden: self.critic_hidden,
            seed: self.seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("method `{0}` cannot be used here")]
    WrongMethod(&'static str),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error("advantage is NaN")]
    NanAdvantage,
    #[error("training diverged at epoch {epoch}, batch {batch}: {what} is not finite")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: &'static str,
        /// Parameters before the failing update, and the epochs completed so far.
        last_good: Box<(RouteAgent, TrainLog)>,
    },
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Agent(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean undiscounted return of the episodes sampled this epoch.
    pub mean_reward: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_ce: f64,
    pub val_lsd: f64,
    pub val_krc: f64,
    pub val_acc3: f64,
    /// Not part of the CSV, which must be reproducible.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub method: Option<Method>,
    pub rows: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_reward,loss_actor,loss_critic,loss_ce,val_lsd,val_krc,val_acc3";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.mean_reward,
                r.loss_actor,
                r.loss_critic,
                r.loss_ce,
                r.val_lsd,
                r.val_krc,
                r.val_acc3
            );
        }
        out
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_reward).collect()
    }
}

/// `A_t = sum_{t' >= t} (gamma lambda)^(t'-t) delta_t'` with
/// `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)` and a zero terminal value.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "rewards and values differ in length");
    let t_max = rewards.len();
    let mut out = vec![0.0; t_max];
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        let next = if t + 1 < t_max { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = if lambda == 0.0 { delta } else { delta + gamma * lambda * acc };
        out[t] = acc;
    }
    out
}

/// Rescales all advantages of a batch to zero mean and unit variance.
pub fn normalize_advantages(batch: &mut [Vec<f64>]) {
    let count: usize = batch.iter().map(Vec::len).sum();
    if count < 2 {
        return;
    }
    let mean = batch.iter().flatten().sum::<f64>() / count as f64;
    let var = batch.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt().max(1e-8);
    for a in batch.iter_mut().flatten() {
        *a = (*a - mean) / std;
    }
}

/// `-scale * sum_t log_pi_t * A_t`. Advantages enter as constants.
pub fn actor_loss(
    g: &mut Graph<'_>,
    log_probs: &[NodeId],
    advantages: &[f64],
    scale: f64,
) -> Result<NodeId, TrainError> {
    if advantages.iter().any(|a| a.is_nan()) {
        return Err(TrainError::NanAdvantage);
    }
    let terms: Vec<_> = log_probs
        .iter()
        .zip(advantages)
        .map(|(&lp, &a)| (lp, -scale * a))
        .collect();
    Ok(g.combine(&terms)?)
}

/// `scale * sum_t smooth_l1(V_t - G_t)` for a `T x 1` value node.
pub fn critic_loss(
    g: &mut Graph<'_>,
    values: NodeId,
    returns: &[f64],
    scale: f64,
) -> Result<NodeId, TrainError> {
    let v = g.transpose(values);
    let s = g.smooth_l1_sum(v, returns.to_vec())?;
    Ok(g.scale(s, scale))
}

/// Teacher-forced cross-entropy along the label, `-scale * sum_t log P`.
pub fn ce_loss(
    g: &mut Graph<'_>,
    ctx: &DecoderContext,
    label: &RouteLabel,
    scale: f64,
) -> Result<NodeId, TrainError> {
    let pass = decode_forced(g, ctx, label.as_slice())?;
    let terms: Vec<_> = pass.log_probs.iter().map(|&lp| (lp, -scale)).collect();
    Ok(g.combine(&terms)?)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, epoch: usize, slot: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ slot)
}

const SHUFFLE_SLOT: u64 = u64::MAX;

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, SHUFFLE_SLOT)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Joint(Method),
}

struct Episode {
    log_probs: Vec<NodeId>,
    values: Option<NodeId>,
    rewards: Vec<f64>,
    value_data: Vec<f64>,
}

#[derive(Default)]
struct BatchStats {
    actor: f64,
    critic: f64,
    ce: f64,
    returns: Vec<f64>,
}

/// Builds every sample's graph, computes advantages for the whole batch,
/// then backpropagates the weighted losses.
fn run_batch(
    agent: &RouteAgent,
    data: &[Sample],
    batch: &[usize],
    cfg: &TrainConfig,
    phase: Phase,
    epoch: usize,
) -> Result<(Gradients, BatchStats), TrainError> {
    let n = batch.len() as f64;
    let k = cfg.rollouts_per_sample;
    let reward_cfg = cfg.reward();
    let (w_actor, w_critic, w_ce) = match phase {
        Phase::Pretrain => (0.0, 0.0, 1.0),
        Phase::Joint(Method::Reinforce) => (cfg.alpha_a, 0.0, cfg.alpha_ce),
        Phase::Joint(_) => (cfg.alpha_a, cfg.alpha_c, cfg.alpha_ce),
    };
    let rollouts = if phase == Phase::Pretrain { 1 } else { k };
    let mut stats = BatchStats::default();

    let mut graphs = Vec::with_capacity(batch.len());
    let mut episodes: Vec<Vec<Episode>> = Vec::with_capacity(batch.len());
    for &idx in batch {
        let sample = &data[idx];
        let mut g = Graph::new(&agent.params);
        let e = encode(&mut g, agent, sample)?;
        let ctx = DecoderContext::new(&mut g, e)?;
        let mut eps = Vec::with_capacity(rollouts);
        for r in 0..rollouts {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, (idx * k + r) as u64));
            let pass = decode_route(&mut g, &ctx, DecodeMode::Sample, &mut rng)?;
            let rewards = route_rewards(&pass.actions, &sample.label, &reward_cfg);
            stats.returns.push(rewards.iter().sum());
            let values = if w_critic > 0.0 || phase == Phase::Joint(Method::Ac) || phase == Phase::Joint(Method::Gae) {
                Some(critic_graph(&mut g, agent, &pass.probs, cfg.freeze_shared)?)
            } else {
                None
            };
            let value_data = values.map(|v| g.value(v).data.clone()).unwrap_or_default();
            eps.push(Episode {
                log_probs: pass.log_probs,
                values,
                rewards,
                value_data,
            });
        }
        let ce = if w_ce > 0.0 {
            let node = ce_loss(&mut g, &ctx, &sample.label, 1.0 / n)?;
            stats.ce += g.scalar(node);
            Some(node)
        } else {
            None
        };
        graphs.push((g, ce));
        episodes.push(eps);
    }

    // Advantages for every episode, computed before any loss is built so
    // that batch normalization can see all of them.
    let mut advantages: Vec<Vec<f64>> = Vec::new();
    if let Phase::Joint(method) = phase {
        for ep in episodes.iter().flatten() {
            let adv = match method {
                Method::Reinforce => {
                    let g0 = discounted_returns(&ep.rewards, cfg.gamma).first().copied().unwrap_or(0.0);
                    vec![g0; ep.rewards.len()]
                }
                Method::Ac => gae_advantages(&ep.rewards, &ep.value_data, cfg.gamma, 0.0),
                Method::Gae => gae_advantages(&ep.rewards, &ep.value_data, cfg.gamma, cfg.lambda),
                Method::Ce => unreachable!("joint phase never uses ce"),
            };
            advantages.push(adv);
        }
        if cfg.normalize_advantages {
            normalize_advantages(&mut advantages);
        }
    }

    let mut total = Gradients::new(agent.params.len());
    let mut adv_iter = advantages.iter();
    let scale = 1.0 / (n * rollouts as f64);
    for ((mut g, ce), eps) in graphs.into_iter().zip(episodes) {
        let mut terms = Vec::new();
        if let Some(ce) = ce {
            terms.push((ce, w_ce));
        }
        if let Phase::Joint(_) = phase {
            for ep in &eps {
                let adv = adv_iter.next().expect("one advantage vector per episode");
                if w_actor > 0.0 {
                    let la = actor_loss(&mut g, &ep.log_probs, adv, scale)?;
                    stats.actor += g.scalar(la);
                    terms.push((la, w_actor));
                }
                if let Some(values) = ep.values {
                    let returns = discounted_returns(&ep.rewards, cfg.gamma);
                    let lc = critic_loss(&mut g, values, &returns, scale)?;
                    stats.critic += g.scalar(lc);
                    if w_critic > 0.0 {
                        terms.push((lc, w_critic));
                    }
                }
            }
        }
        if terms.is_empty() {
            continue;
        }
        let loss = g.combine(&terms)?;
        total.add_scaled(&g.backward(loss)?, 1.0);
    }
    Ok((total, stats))
}

/// Greedy-decoding metrics on the validation set: `(lsd, krc, acc3)`.
fn validate(agent: &RouteAgent, val: &[Sample]) -> Result<(f64, f64, f64), TrainError> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let preds = val.iter().map(|s| predict(s, agent)).collect::<Result<Vec<_>, _>>()?;
    let report = evaluate_dataset(val, &preds, Bucket { max: agent.config.n_max })?;
    Ok((report.lsd, report.krc, report.acc3))
}

fn run_epochs(
    mut agent: RouteAgent,
    data: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
) -> Result<(RouteAgent, TrainLog), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog {
        method: Some(match phase {
            Phase::Pretrain => Method::Ce,
            Phase::Joint(m) => m,
        }),
        rows: Vec::with_capacity(epochs),
    };
    for epoch in 1..=epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0);
        let mut returns = Vec::with_capacity(data.len());
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let (grads, stats) = run_batch(&agent, data, batch, cfg, phase, epoch)?;
            let loss = stats.actor + stats.critic + stats.ce;
            let what = if !loss.is_finite() {
                Some("loss")
            } else if !grads.is_finite() {
                Some("gradient")
            } else {
                None
            };
            if let Some(what) = what {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b + 1,
                    what,
                    last_good: Box::new((agent, log)),
                });
            }
            agent.params.store_grads(&grads, false);
            adam.step(&mut agent.params);
            sums.0 += stats.actor;
            sums.1 += stats.critic;
            sums.2 += stats.ce;
            returns.extend(stats.returns);
        }
        let nb = batches.len() as f64;
        let (val_lsd, val_krc, val_acc3) = validate(&agent, val)?;
        log.rows.push(EpochLog {
            epoch,
            mean_reward: returns.iter().sum::<f64>() / returns.len() as f64,
            loss_actor: sums.0 / nb,
            loss_critic: sums.1 / nb,
            loss_ce: sums.2 / nb,
            val_lsd,
            val_krc,
            val_acc3,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((agent, log))
}

/// Cross-entropy pretraining for `cfg.pretrain_epochs` epochs. The logged
/// mean reward comes from one sampled episode per sample, which does not
/// contribute to the update.
pub fn pretrain(
    data: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    agent: RouteAgent,
) -> Result<(RouteAgent, TrainLog), TrainError> {
    run_epochs(agent, data, val, cfg, Phase::Pretrain, cfg.pretrain_epochs)
}

/// Joint training for `cfg.train_epochs` epochs with the configured
/// policy-gradient method. REINFORCE uses the whole-episode return as the
/// advantage of every step and does not train the critic.
pub fn train(
    data: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    agent: RouteAgent,
) -> Result<(RouteAgent, TrainLog), TrainError> {
    if cfg.method == Method::Ce {
        return Err(TrainError::WrongMethod("ce"));
    }
    run_epochs(agent, data, val, cfg, Phase::Joint(cfg.method), cfg.train_epochs)
}

/// Sidecar path holding the architecture next to a checkpoint.
pub fn metadata_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Writes the checkpoint and its metadata sidecar.
pub fn save_model(agent: &RouteAgent, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    let path = path.as_ref();
    save_checkpoint(&agent.params, path)?;
    let meta = metadata_path(path);
    fs::write(&meta, agent.config.to_metadata()).map_err(|source| ModelIoError::Io { path: meta, source })
}

/// Loads a checkpoint. Without a sidecar the default architecture is
/// assumed, and any mismatch is reported by parameter name.
pub fn load_model(path: impl AsRef<Path>) -> Result<RouteAgent, ModelIoError> {
    let path = path.as_ref();
    let meta = metadata_path(path);
    let config = match fs::read_to_string(&meta) {
        Ok(text) => AgentConfig::from_metadata(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => AgentConfig::default(),
        Err(source) => return Err(ModelIoError::Io { path: meta, source }),
    };
    let loaded = load_checkpoint(path)?;
    let mut agent = RouteAgent::new(config)?;
    load_into(&mut agent.params, &loaded)?;
    Ok(agent)
}
