//! Route-prediction actor and its critic head.
//!
//! The actor encodes the task set with stacked attention blocks and decodes
//! a route with an LSTM pointer decoder whose scores are masked so that no
//! task is emitted twice. The critic reads the decoder's per-step output
//! distribution, zero-padded to [`N_MAX`] slots, and regresses the
//! reward-to-go. Both live in one [`ParameterStore`]; critic weights sit
//! under the `critic.` prefix.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Constraint, RouteError, RoutePermutation, Sample, TaskId, D_FEATURE, N_MAX};
use crate::numerics::layers::{init_bound, init_linear, init_mha_ffn_block, init_recurrent, linear};
use crate::numerics::{mha_ffn_block, recurrent_step, Graph, NodeId, NumericsError, ParameterStore, Tensor};

/// Fixed scaling that brings raw task features to unit order of magnitude.
const FEATURE_SCALE: [f64; D_FEATURE] = [0.1, 0.1, 0.1, 1.0 / 60.0, 1.0 / 60.0, 0.1, 0.2, 0.2];

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sample has no tasks")]
    EmptySample,
    #[error("{n} tasks exceeds the model's capacity of {max}")]
    TooManyTasks { n: usize, max: usize },
    #[error("invalid route: {0}")]
    InvalidRoute(#[from] RouteError),
    #[error("route has {got} tasks, sample has {expected}")]
    RouteLength { expected: usize, got: usize },
    #[error("bad model metadata: {0}")]
    Metadata(String),
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub d_h: usize,
    pub n_head: usize,
    /// Number of encoder blocks.
    pub n_blocks: usize,
    pub n_max: usize,
    pub critic_hidden: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            n_head: 4,
            n_blocks: 2,
            n_max: N_MAX,
            critic_hidden: 64,
            seed: 0,
        }
    }
}

impl AgentConfig {
    /// `key=value` sidecar stored next to checkpoints.
    pub fn to_metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d_h={}", self.d_h);
        let _ = writeln!(s, "n_head={}", self.n_head);
        let _ = writeln!(s, "K={}", self.n_blocks);
        let _ = writeln!(s, "N_max={}", self.n_max);
        let _ = writeln!(s, "d_feature={D_FEATURE}");
        let _ = writeln!(s, "critic_hidden={}", self.critic_hidden);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_metadata(text: &str) -> Result<Self, AgentError> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AgentError::Metadata(format!("not key=value: {line}")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| AgentError::Metadata(format!("bad value for {k}: {v}")))
            };
            match k.trim() {
                "d_h" => cfg.d_h = parse(v)? as usize,
                "n_head" => cfg.n_head = parse(v)? as usize,
                "K" => cfg.n_blocks = parse(v)? as usize,
                "N_max" => cfg.n_max = parse(v)? as usize,
                "critic_hidden" => cfg.critic_hidden = parse(v)? as usize,
                "seed" => cfg.seed = parse(v)?,
                "d_feature" => {
                    if parse(v)? as usize != D_FEATURE {
                        return Err(AgentError::Metadata(format!("d_feature must be {D_FEATURE}")));
                    }
                }
                other => return Err(AgentError::Metadata(format!("unknown key {other}"))),
            }
        }
        Ok(cfg)
    }
}

/// Actor and critic weights plus their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteAgent {
    pub config: AgentConfig,
    pub params: ParameterStore,
}

impl RouteAgent {
    /// Fresh weights, uniform in `[-1/sqrt(d_h), 1/sqrt(d_h)]`.
    pub fn new(config: AgentConfig) -> Result<Self, AgentError> {
        if config.n_head == 0 || config.d_h % config.n_head != 0 {
            return Err(NumericsError::HeadSplit {
                d_h: config.d_h,
                n_head: config.n_head,
            }
            .into());
        }
        let d = config.d_h;
        let bound = init_bound(d);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParameterStore::new();
        init_linear(&mut p, "enc.input", D_FEATURE, d, bound, &mut rng);
        for l in 0..config.n_blocks {
            init_mha_ffn_block(&mut p, l, d, &mut rng);
        }
        init_recurrent(&mut p, "dec.lstm", d, &mut rng);
        p.uniform("dec.h0", vec![d], bound, &mut rng);
        p.uniform("dec.c0", vec![d], bound, &mut rng);
        p.uniform("dec.w1", vec![d, d], bound, &mut rng);
        p.uniform("dec.w2", vec![d, d], bound, &mut rng);
        p.uniform("dec.v", vec![d, 1], bound, &mut rng);
        init_linear(&mut p, "critic.l1", config.n_max, config.critic_hidden, bound, &mut rng);
        init_linear(&mut p, "critic.l2", config.critic_hidden, 1, init_bound(config.critic_hidden), &mut rng);
        Ok(Self { config, params: p })
    }

    fn check_size(&self, n: usize) -> Result<(), AgentError> {
        if n == 0 {
            return Err(AgentError::EmptySample);
        }
        if n > self.config.n_max {
            return Err(AgentError::TooManyTasks {
                n,
                max: self.config.n_max,
            });
        }
        Ok(())
    }
}

/// Scaled `n x d_feature` input matrix.
pub fn feature_matrix(sample: &Sample) -> Tensor {
    let n = sample.n();
    let mut data = Vec::with_capacity(n * D_FEATURE);
    for t in &sample.tasks {
        data.extend(t.features().iter().zip(FEATURE_SCALE).map(|(v, s)| v * s));
    }
    Tensor::from_vec(n, D_FEATURE, data)
}

/// Task embeddings `E` (`n x d_h`): input projection then the encoder blocks.
pub fn encode(g: &mut Graph<'_>, agent: &RouteAgent, sample: &Sample) -> Result<NodeId, AgentError> {
    agent.check_size(sample.n())?;
    let x = g.input(feature_matrix(sample));
    let mut e = linear(g, "enc.input", x)?;
    for l in 0..agent.config.n_blocks {
        e = mha_ffn_block(g, e, l, agent.config.n_head)?;
    }
    Ok(e)
}

/// Step-invariant decoder inputs computed once per sample.
#[derive(Debug, Clone, Copy)]
pub struct DecoderContext {
    pub embeddings: NodeId,
    /// `E W1`, shared by every step's attention scores.
    projected: NodeId,
    w2: NodeId,
    v: NodeId,
    /// Mean task embedding, the first recurrent input.
    mean: NodeId,
    n: usize,
}

impl DecoderContext {
    pub fn new(g: &mut Graph<'_>, embeddings: NodeId) -> Result<Self, AgentError> {
        let w1 = g.param("dec.w1")?;
        let projected = g.matmul(embeddings, w1)?;
        let w2 = g.param("dec.w2")?;
        let v = g.param("dec.v")?;
        let mean = g.mean_rows(embeddings);
        Ok(Self {
            embeddings,
            projected,
            w2,
            v,
            mean,
            n: g.shape(embeddings).0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Decoder state before step `t`.
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// 1-based index of the next step.
    pub t: usize,
    pub h: NodeId,
    pub c: NodeId,
    pub emitted: Vec<TaskId>,
    /// `true` marks a task that may still be emitted.
    pub mask: Vec<bool>,
    /// Recurrent input for the next step: the mean embedding at `t = 1`,
    /// afterwards the embedding of the last emitted task.
    pub last_input: NodeId,
}

impl DecoderState {
    pub fn initial(g: &mut Graph<'_>, ctx: &DecoderContext) -> Result<Self, AgentError> {
        Ok(Self {
            t: 1,
            h: g.param("dec.h0")?,
            c: g.param("dec.c0")?,
            emitted: Vec::with_capacity(ctx.n),
            mask: vec![true; ctx.n],
            last_input: ctx.mean,
        })
    }

    /// Records `task` as emitted and advances to the next step.
    pub fn emit(&mut self, g: &mut Graph<'_>, ctx: &DecoderContext, task: TaskId) -> Result<(), AgentError> {
        if task == 0 || task > ctx.n || !self.mask[task - 1] {
            return Err(RouteError::Duplicate(task).into());
        }
        self.emitted.push(task);
        self.mask = Constraint::NoDuplication.mask(ctx.n, &self.emitted);
        self.last_input = g.row(ctx.embeddings, task - 1)?;
        self.t += 1;
        Ok(())
    }
}

/// Nodes produced by one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `1 x n` probabilities, exactly zero on masked tasks.
    pub probs: NodeId,
    /// `1 x n` log-probabilities, `-inf` on masked tasks.
    pub log_probs: NodeId,
    pub h: NodeId,
    pub c: NodeId,
}

/// Advances the recurrent cell and scores every feasible task with
/// `v^T tanh(W1 e_j + W2 h_t)`. The caller commits the choice through
/// [`DecoderState::emit`] after updating `h`/`c` from the output.
pub fn decode_step(
    g: &mut Graph<'_>,
    ctx: &DecoderContext,
    state: &DecoderState,
) -> Result<StepOutput, AgentError> {
    if !state.mask.iter().any(|&ok| ok) {
        return Err(NumericsError::NoFeasibleAction.into());
    }
    let (h, c) = recurrent_step(g, "dec.lstm", state.last_input, (state.h, state.c))?;
    let query = g.matmul(h, ctx.w2)?;
    let pre = g.add_row(ctx.projected, query)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, ctx.v)?;
    let scores = g.transpose(scores);
    let probs = g.masked_softmax(scores, &state.mask)?;
    let log_probs = g.masked_log_softmax(scores, &state.mask)?;
    Ok(StepOutput {
        probs,
        log_probs,
        h,
        c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Feasible argmax; ties go to the lowest task id.
pub fn greedy_choice(probs: &[f64], mask: &[bool]) -> TaskId {
    let mut best = None;
    for (i, (&p, &ok)) in probs.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.expect("at least one feasible task").0 + 1
}

/// Inverse-CDF draw from a masked distribution.
pub fn sample_choice<R: Rng>(probs: &[f64], mask: &[bool], rng: &mut R) -> TaskId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&p, &ok)) in probs.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return i + 1;
        }
    }
    last.expect("at least one feasible task") + 1
}

/// Graph nodes of a full decoding pass.
#[derive(Debug, Clone)]
pub struct DecodePass {
    pub actions: Vec<TaskId>,
    /// Scalar log-probability of each chosen task.
    pub log_probs: Vec<NodeId>,
    /// Per-step `1 x n` output distributions.
    pub probs: Vec<NodeId>,
}

/// Decodes a full route, choosing each task greedily or by sampling.
pub fn decode_route<R: Rng>(
    g: &mut Graph<'_>,
    ctx: &DecoderContext,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<DecodePass, AgentError> {
    let mut state = DecoderState::initial(g, ctx)?;
    let mut pass = DecodePass {
        actions: Vec::with_capacity(ctx.n),
        log_probs: Vec::with_capacity(ctx.n),
        probs: Vec::with_capacity(ctx.n),
    };
    for _ in 0..ctx.n {
        let out = decode_step(g, ctx, &state)?;
        let p = &g.value(out.probs).data;
        let task = match mode {
            DecodeMode::Greedy => greedy_choice(p, &state.mask),
            DecodeMode::Sample => sample_choice(p, &state.mask, rng),
        };
        pass.log_probs.push(g.gather(out.log_probs, task - 1)?);
        pass.probs.push(out.probs);
        pass.actions.push(task);
        state.h = out.h;
        state.c = out.c;
        state.emit(g, ctx, task)?;
    }
    Ok(pass)
}

/// Teacher-forced decoding along `route`, which may be a prefix.
pub fn decode_forced(
    g: &mut Graph<'_>,
    ctx: &DecoderContext,
    route: &[TaskId],
) -> Result<DecodePass, AgentError> {
    let mut state = DecoderState::initial(g, ctx)?;
    let mut pass = DecodePass {
        actions: route.to_vec(),
        log_probs: Vec::with_capacity(route.len()),
        probs: Vec::with_capacity(route.len()),
    };
    for &task in route {
        if task == 0 || task > ctx.n || !state.mask[task - 1] {
            return Err(RouteError::Duplicate(task).into());
        }
        let out = decode_step(g, ctx, &state)?;
        pass.log_probs.push(g.gather(out.log_probs, task - 1)?);
        pass.probs.push(out.probs);
        state.h = out.h;
        state.c = out.c;
        state.emit(g, ctx, task)?;
    }
    Ok(pass)
}

/// Critic estimates (`T x 1`) for a sequence of output distributions.
/// With `detach` the critic's gradient stops at its input.
pub fn critic_graph(
    g: &mut Graph<'_>,
    agent: &RouteAgent,
    dists: &[NodeId],
    detach: bool,
) -> Result<NodeId, AgentError> {
    let mut rows = Vec::with_capacity(dists.len());
    for &d in dists {
        let n = g.shape(d).1;
        if n > agent.config.n_max {
            return Err(AgentError::TooManyTasks {
                n,
                max: agent.config.n_max,
            });
        }
        let d = if detach { g.detach(d) } else { d };
        rows.push(g.pad_cols(d, agent.config.n_max)?);
    }
    let x = g.concat_rows(&rows)?;
    let h = linear(g, "critic.l1", x)?;
    let h = g.relu(h);
    Ok(linear(g, "critic.l2", h)?)
}

/// Value estimate for every step's output distribution.
pub fn critic_values(dists: &[Vec<f64>], agent: &RouteAgent) -> Result<Vec<f64>, AgentError> {
    if dists.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(&agent.params);
    let nodes: Vec<_> = dists
        .iter()
        .map(|d| g.input(Tensor::row_vector(d.clone())))
        .collect();
    let v = critic_graph(&mut g, agent, &nodes, false)?;
    Ok(g.value(v).data.clone())
}

/// One decoded route with its per-step bookkeeping. Rewards, values and
/// advantages are filled in by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<TaskId>,
    pub log_probs: Vec<f64>,
    pub distributions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub total_return: f64,
}

impl Trajectory {
    pub fn route(&self) -> RoutePermutation {
        RoutePermutation::new(self.actions.clone()).expect("decoder emits permutations")
    }
}

/// Decodes a full route for `sample`. Sampling draws from a generator
/// seeded with `seed`; greedy decoding ignores it.
pub fn rollout(
    sample: &Sample,
    agent: &RouteAgent,
    mode: DecodeMode,
    seed: u64,
) -> Result<Trajectory, AgentError> {
    let mut g = Graph::new(&agent.params);
    let e = encode(&mut g, agent, sample)?;
    let ctx = DecoderContext::new(&mut g, e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pass = decode_route(&mut g, &ctx, mode, &mut rng)?;
    let values = critic_graph(&mut g, agent, &pass.probs, false)?;
    let n = pass.actions.len();
    Ok(Trajectory {
        log_probs: pass.log_probs.iter().map(|&id| g.scalar(id)).collect(),
        distributions: pass.probs.iter().map(|&id| g.value(id).data.clone()).collect(),
        values: g.value(values).data.clone(),
        actions: pass.actions,
        rewards: vec![0.0; n],
        advantages: vec![0.0; n],
        total_return: 0.0,
    })
}

/// Greedy route prediction.
pub fn predict(sample: &Sample, agent: &RouteAgent) -> Result<RoutePermutation, AgentError> {
    Ok(rollout(sample, agent, DecodeMode::Greedy, 0)?.route())
}

/// Log-probability of `route` under teacher-forced decoding.
pub fn route_log_prob(sample: &Sample, route: &RoutePermutation, agent: &RouteAgent) -> Result<f64, AgentError> {
    if route.len() != sample.n() {
        return Err(AgentError::RouteLength {
            expected: sample.n(),
            got: route.len(),
        });
    }
    let mut g = Graph::new(&agent.params);
    let e = encode(&mut g, agent, sample)?;
    let ctx = DecoderContext::new(&mut g, e)?;
    let pass = decode_forced(&mut g, &ctx, route.as_slice())?;
    Ok(pass.log_probs.iter().map(|&id| g.scalar(id)).sum())
}
