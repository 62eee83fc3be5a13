//! PPO training of the task policy over a generated controller set
//! (discrete action = controller index), plus the continuous
//! end-effector-space baseline, GAE advantage estimation, and vectorized
//! rollout collection.
//!
//! The policy and value networks are separate two-hidden-layer tanh MLPs.
//! Rollouts auto-reset finished episodes, cycling each environment through a
//! pool of task instances (scene variation + its controller set) round-robin,
//! so every update sees a mix of variations. Everything is deterministic
//! given config + seed: environments step in a fixed order and sampling draws
//! from a single seeded stream.

use crate::controllers::{Command, GripperAction};
use crate::ctrlgen::ControllerSet;
use crate::diffkernel::{
    adam_step, checkpoint_bytes, load_checkpoint_bytes, AdamState, Graph, NodeId, Tensor,
};
use crate::geom::{AngleAxis, Vec3};
use crate::sim::env::{EnvConfig, TaskEnv};
use crate::sim::scene::{SceneModel, TaskFamily};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Hidden width of both MLPs.
pub const HIDDEN: usize = 64;
/// Continuous end-effector action: 3 translation + 3 rotation + gripper.
pub const EE_ACTION_DIM: usize = 7;
/// Per-component translation clamp for end-effector actions (m).
pub const EE_TRANS_CLAMP: f64 = 0.02;
/// Per-component rotation-vector clamp for end-effector actions (rad).
pub const EE_ROT_CLAMP: f64 = 0.05;
/// Initial log standard deviation of the Gaussian head.
const LOG_STD_INIT: f64 = -3.0;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// What kind of head the policy network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    /// Categorical over `n` controller indices.
    Discrete { n: usize },
    /// Diagonal Gaussian over `dim` continuous values.
    Box { dim: usize },
}

impl ActionSpace {
    /// Output width of the policy head (logits or mean).
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Box { dim } => dim,
        }
    }

    fn tag(&self) -> String {
        match *self {
            ActionSpace::Discrete { n } => format!("disc{n}"),
            ActionSpace::Box { dim } => format!("box{dim}"),
        }
    }
}

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Entropy coefficient; with `entropy_coef_final` set it anneals linearly
    /// from this value to the final one over `total_env_steps`.
    pub entropy_coef: f64,
    pub entropy_coef_final: Option<f64>,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Rollout length per environment between updates.
    pub num_steps: usize,
    pub num_envs: usize,
    /// Total environment (policy) steps to train for.
    pub total_env_steps: usize,
    pub seed: u64,
}

impl PpoConfig {
    /// Per-family defaults: shared γ/λ/clip/lr/epochs, with the minibatch
    /// count, entropy and value coefficients, rollout length, and budget
    /// varying by task.
    pub fn for_family(family: TaskFamily) -> PpoConfig {
        let (minibatches, entropy_coef, entropy_coef_final, value_coef, num_steps, budget) =
            match family {
                TaskFamily::Button => (30, 0.01, None, 0.5, 120, 200_000),
                TaskFamily::BlockTumble => (30, 0.01, None, 0.1, 120, 500_000),
                TaskFamily::DoorOpen => (40, 0.1, Some(0.01), 0.5, 240, 2_000_000),
            };
        PpoConfig {
            gamma: 0.995,
            lambda: 0.95,
            clip: 0.2,
            lr: 2.5e-4,
            epochs: 4,
            minibatches,
            entropy_coef,
            entropy_coef_final,
            value_coef,
            max_grad_norm: 0.5,
            num_steps,
            num_envs: 20,
            total_env_steps: budget,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("entropy_coef+1", self.entropy_coef + 1.0),
            ("value_coef+1", self.value_coef + 1.0),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("ppo {name} must be positive, got {v}")));
            }
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("ppo clip must lie in (0,1), got {}", self.clip)));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.num_steps == 0 || self.num_envs == 0 {
            return Err(Error::Config("ppo epochs/minibatches/steps/envs must be nonzero".into()));
        }
        let batch = self.num_envs * self.num_steps;
        if batch % self.minibatches != 0 {
            return Err(Error::Config(format!(
                "batch size {batch} not divisible into {} minibatches",
                self.minibatches
            )));
        }
        Ok(())
    }

    /// Entropy coefficient at a training progress fraction in [0, 1].
    fn entropy_coef_at(&self, progress: f64) -> f64 {
        match self.entropy_coef_final {
            Some(end) => {
                let p = progress.clamp(0.0, 1.0);
                self.entropy_coef + (end - self.entropy_coef) * p
            }
            None => self.entropy_coef,
        }
    }
}

// ---------------------------------------------------------------------------
// Policy networks
// ---------------------------------------------------------------------------

/// Named parameter layout shared by every graph that hosts the policy.
fn param_specs(obs_dim: usize, space: ActionSpace) -> Vec<(String, Vec<usize>)> {
    let a = space.head_dim();
    let mut specs = vec![
        ("pi.l1.w".into(), vec![HIDDEN, obs_dim]),
        ("pi.l1.b".into(), vec![HIDDEN]),
        ("pi.l2.w".into(), vec![HIDDEN, HIDDEN]),
        ("pi.l2.b".into(), vec![HIDDEN]),
        ("pi.head.w".into(), vec![a, HIDDEN]),
        ("pi.head.b".into(), vec![a]),
    ];
    if let ActionSpace::Box { dim } = space {
        specs.push(("pi.log_std".into(), vec![dim]));
    }
    specs.extend([
        ("vf.l1.w".into(), vec![HIDDEN, obs_dim]),
        ("vf.l1.b".into(), vec![HIDDEN]),
        ("vf.l2.w".into(), vec![HIDDEN, HIDDEN]),
        ("vf.l2.b".into(), vec![HIDDEN]),
        ("vf.out.w".into(), vec![1, HIDDEN]),
        ("vf.out.b".into(), vec![1]),
    ]);
    specs
}

fn fresh_policy_weights(obs_dim: usize, space: ActionSpace, rng: &mut impl Rng) -> Vec<Tensor> {
    param_specs(obs_dim, space)
        .iter()
        .map(|(name, shape)| {
            if name == "pi.log_std" {
                Tensor {
                    shape: shape.clone(),
                    data: vec![LOG_STD_INIT; shape[0]],
                }
            } else if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                Tensor::init_uniform(shape, shape[1], rng)
            }
        })
        .collect()
}

fn arch_string(obs_dim: usize, space: ActionSpace) -> String {
    format!("rl.policy obs{} {} mlp{} tanh", obs_dim, space.tag(), HIDDEN)
}

/// Registers the policy parameters on a graph in canonical order.
fn register_policy(g: &mut Graph, obs_dim: usize, space: ActionSpace, weights: &[Tensor]) -> Vec<NodeId> {
    param_specs(obs_dim, space)
        .iter()
        .zip(weights)
        .map(|((name, _), t)| g.param(name, t.clone()))
        .collect()
}

/// obs → tanh MLP → head output, given six parameter nodes.
fn mlp3(g: &mut Graph, x: NodeId, p: &[NodeId]) -> Result<NodeId> {
    let h = g.matmul_nt(x, p[0])?;
    let h = g.add_row_broadcast(h, p[1])?;
    let h = g.tanh(h);
    let h = g.matmul_nt(h, p[2])?;
    let h = g.add_row_broadcast(h, p[3])?;
    let h = g.tanh(h);
    let o = g.matmul_nt(h, p[4])?;
    g.add_row_broadcast(o, p[5])
}

/// Index of the first value-network parameter within the canonical order.
fn value_param_offset(space: ActionSpace) -> usize {
    match space {
        ActionSpace::Discrete { .. } => 6,
        ActionSpace::Box { .. } => 7,
    }
}

/// Task policy: separate policy and value MLPs plus their architecture
/// record, independent of any graph.
#[derive(Debug, Clone)]
pub struct TaskPolicy {
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub hidden: usize,
    pub seed: u64,
    weights: Vec<Tensor>,
}

impl TaskPolicy {
    pub fn new(obs_dim: usize, action_space: ActionSpace, seed: u64) -> TaskPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TaskPolicy {
            obs_dim,
            action_space,
            hidden: HIDDEN,
            seed,
            weights: fresh_policy_weights(obs_dim, action_space, &mut rng),
        }
    }

    /// Single-observation forward pass: (logits or mean, value).
    pub fn forward_one(&self, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        if obs.len() != self.obs_dim {
            return Err(Error::Config(format!(
                "observation length {} != policy obs_dim {}",
                obs.len(),
                self.obs_dim
            )));
        }
        let mut actor = ActorGraph::new(self, 1)?;
        let out = actor.forward(obs)?;
        Ok((out.head.clone(), out.values[0]))
    }

    /// Gaussian head log standard deviations (Box policies only).
    pub fn log_std(&self) -> Option<&[f64]> {
        match self.action_space {
            ActionSpace::Box { .. } => Some(&self.weights[6].data),
            ActionSpace::Discrete { .. } => None,
        }
    }

    /// Serialized checkpoint image (magic, meta, weights) — the exact bytes
    /// [`TaskPolicy::save`] writes. Also the canonical form for detecting
    /// parameter changes (keypoint learning freezes the policy by bytes).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        register_policy(&mut g, self.obs_dim, self.action_space, &self.weights);
        let ckpt = checkpoint_bytes(&arch_string(self.obs_dim, self.action_space), &g);
        #[derive(Serialize)]
        struct Meta {
            obs_dim: usize,
            action_space: ActionSpace,
            hidden: usize,
            seed: u64,
        }
        let meta = serde_json::to_vec(&Meta {
            obs_dim: self.obs_dim,
            action_space: self.action_space,
            hidden: self.hidden,
            seed: self.seed,
        })?;
        let mut out = Vec::with_capacity(12 + meta.len() + ckpt.len());
        out.extend_from_slice(b"TAXPOLI1");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&ckpt);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaskPolicy> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TaskPolicy> {
        #[derive(Deserialize)]
        struct Meta {
            obs_dim: usize,
            action_space: ActionSpace,
            hidden: usize,
            seed: u64,
        }
        if bytes.len() < 12 || &bytes[..8] != b"TAXPOLI1" {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: Meta = serde_json::from_slice(
            bytes
                .get(12..12 + meta_len)
                .ok_or_else(|| Error::Checkpoint("truncated policy meta".into()))?,
        )?;
        if meta.hidden != HIDDEN {
            return Err(Error::Checkpoint(format!(
                "unsupported hidden width {}",
                meta.hidden
            )));
        }
        let mut g = Graph::new();
        let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
        register_policy(
            &mut g,
            meta.obs_dim,
            meta.action_space,
            &fresh_policy_weights(meta.obs_dim, meta.action_space, &mut seed_rng),
        );
        load_checkpoint_bytes(
            &bytes[12 + meta_len..],
            &arch_string(meta.obs_dim, meta.action_space),
            &mut g,
        )?;
        let weights = g
            .param_ids()
            .to_vec()
            .iter()
            .map(|&id| g.param_value(id).clone())
            .collect();
        Ok(TaskPolicy {
            obs_dim: meta.obs_dim,
            action_space: meta.action_space,
            hidden: meta.hidden,
            seed: meta.seed,
            weights,
        })
    }
}

// ---------------------------------------------------------------------------
// Actor graph: batched forward passes for rollouts and evaluation
// ---------------------------------------------------------------------------

struct ActorOutput {
    /// Per-row logits (discrete) or mean (box), row-major.
    head: Vec<f64>,
    /// Per-row log-softmax (discrete only).
    logp_all: Vec<f64>,
    values: Vec<f64>,
}

/// Forward-only graph evaluating the policy on `n` observations at once.
struct ActorGraph {
    graph: Graph,
    obs: NodeId,
    head: NodeId,
    logp_all: Option<NodeId>,
    value: NodeId,
    n: usize,
    obs_dim: usize,
    space: ActionSpace,
    log_std: Vec<f64>,
}

impl ActorGraph {
    fn new(policy: &TaskPolicy, n: usize) -> Result<ActorGraph> {
        let mut g = Graph::new();
        let obs = g.input("obs", &[n, policy.obs_dim]);
        let params = register_policy(&mut g, policy.obs_dim, policy.action_space, &policy.weights);
        let head = mlp3(&mut g, obs, &params[..6])?;
        let logp_all = match policy.action_space {
            ActionSpace::Discrete { .. } => Some(g.row_log_softmax(head)?),
            ActionSpace::Box { .. } => None,
        };
        let voff = value_param_offset(policy.action_space);
        let v = mlp3(&mut g, obs, &params[voff..voff + 6])?;
        let value = g.reshape(v, &[n])?;
        let log_std = policy.log_std().map(<[f64]>::to_vec).unwrap_or_default();
        Ok(ActorGraph {
            graph: g,
            obs,
            head,
            logp_all,
            value,
            n,
            obs_dim: policy.obs_dim,
            space: policy.action_space,
            log_std,
        })
    }

    /// Overwrites parameters from canonical weight tensors.
    fn refresh(&mut self, weights: &[Tensor]) {
        let ids = self.graph.param_ids().to_vec();
        for (id, w) in ids.iter().zip(weights) {
            *self.graph.param_value_mut(*id) = w.clone();
        }
        if matches!(self.space, ActionSpace::Box { .. }) {
            self.log_std = weights[6].data.clone();
        }
    }

    fn forward(&mut self, obs_flat: &[f64]) -> Result<ActorOutput> {
        self.graph.set_input(
            self.obs,
            Tensor::new(vec![self.n, self.obs_dim], obs_flat.to_vec())?,
        )?;
        self.graph.forward()?;
        Ok(ActorOutput {
            head: self.graph.value(self.head)?.data.clone(),
            logp_all: match self.logp_all {
                Some(id) => self.graph.value(id)?.data.clone(),
                None => Vec::new(),
            },
            values: self.graph.value(self.value)?.data.clone(),
        })
    }
}

/// One standard-normal draw via Box–Muller (two uniforms per call, the sine
/// branch discarded, keeping the stream layout obvious and deterministic).
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Actions for one vectorized step.
#[derive(Debug, Clone)]
pub enum ActionStep {
    Discrete(Vec<usize>),
    /// Row-major `[n_envs × dim]`.
    Continuous { dim: usize, data: Vec<f64> },
}

/// Samples actions (and their log-probs) from an actor forward pass.
fn sample_actions(
    out: &ActorOutput,
    space: ActionSpace,
    log_std: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> (ActionStep, Vec<f64>) {
    match space {
        ActionSpace::Discrete { n: a } => {
            let mut actions = Vec::with_capacity(n);
            let mut logps = Vec::with_capacity(n);
            for row in 0..n {
                let lp = &out.logp_all[row * a..(row + 1) * a];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = a - 1;
                for (i, l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                actions.push(chosen);
                logps.push(lp[chosen]);
            }
            (ActionStep::Discrete(actions), logps)
        }
        ActionSpace::Box { dim } => {
            let mut data = Vec::with_capacity(n * dim);
            let mut logps = Vec::with_capacity(n);
            for row in 0..n {
                let mut logp = 0.0;
                for i in 0..dim {
                    let mu = out.head[row * dim + i];
                    let z = standard_normal(rng);
                    let sigma = log_std[i].exp();
                    data.push(mu + sigma * z);
                    logp += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
                }
                logps.push(logp);
            }
            (ActionStep::Continuous { dim, data }, logps)
        }
    }
}

/// Greedy actions: argmax logits (row-major tie-break) or the Gaussian mean.
fn deterministic_actions(out: &ActorOutput, space: ActionSpace, n: usize) -> ActionStep {
    match space {
        ActionSpace::Discrete { n: a } => {
            let mut actions = Vec::with_capacity(n);
            for row in 0..n {
                let logits = &out.head[row * a..(row + 1) * a];
                let mut best = 0;
                for (i, l) in logits.iter().enumerate() {
                    if *l > logits[best] {
                        best = i;
                    }
                }
                actions.push(best);
            }
            ActionStep::Discrete(actions)
        }
        ActionSpace::Box { dim } => ActionStep::Continuous {
            dim,
            data: out.head[..n * dim].to_vec(),
        },
    }
}

// ---------------------------------------------------------------------------
// Vectorized environments over a variation pool
// ---------------------------------------------------------------------------

/// How policy actions drive the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionInterface {
    /// Discrete controller index into the instance's `ControllerSet`.
    Controllers,
    /// Continuous end-effector deltas (the EE-Space baseline).
    EESpace,
}

/// One task variation the policy can be dropped into: the sampled scene and,
/// for controller interfaces, its generated/loaded controller set.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub scene: SceneModel,
    pub controllers: Option<ControllerSet>,
}

/// Completed-episode statistics.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub steps: usize,
    pub success: bool,
    pub instance: usize,
}

/// Per-environment record of one vectorized step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Environment fault (simulation error): the episode was dropped.
    pub fault: bool,
    pub finished: Option<EpisodeStats>,
}

/// Fixed-size bank of environments cycling round-robin through a variation
/// pool; finished episodes reset in place.
pub struct VecTaskEnv {
    pub family: TaskFamily,
    pub interface: ActionInterface,
    pub env_config: EnvConfig,
    instances: Vec<TaskInstance>,
    envs: Vec<TaskEnv>,
    current: Vec<usize>,
    episode_return: Vec<f64>,
    cursor: usize,
    dropped: usize,
}

impl VecTaskEnv {
    pub fn new(
        instances: Vec<TaskInstance>,
        num_envs: usize,
        env_config: EnvConfig,
        interface: ActionInterface,
    ) -> Result<VecTaskEnv> {
        if instances.is_empty() || num_envs == 0 {
            return Err(Error::Config("need at least one instance and one env".into()));
        }
        let family = instances[0].scene.family;
        for (i, inst) in instances.iter().enumerate() {
            if inst.scene.family != family {
                return Err(Error::Config(format!(
                    "instance {i} family {:?} != {:?}",
                    inst.scene.family, family
                )));
            }
            if interface == ActionInterface::Controllers {
                let set = inst.controllers.as_ref().ok_or_else(|| {
                    Error::Config(format!("instance {i} has no controller set"))
                })?;
                if set.len() != instances[0].controllers.as_ref().unwrap().len() {
                    return Err(Error::Config(format!(
                        "instance {i} controller count {} differs from {}",
                        set.len(),
                        instances[0].controllers.as_ref().unwrap().len()
                    )));
                }
            }
        }
        let mut pool = VecTaskEnv {
            family,
            interface,
            env_config,
            instances,
            envs: Vec::new(),
            current: Vec::new(),
            episode_return: vec![0.0; num_envs],
            cursor: 0,
            dropped: 0,
        };
        for _ in 0..num_envs {
            let idx = pool.next_instance();
            pool.envs
                .push(TaskEnv::new(pool.instances[idx].scene.clone(), pool.env_config.clone()));
            pool.current.push(idx);
        }
        Ok(pool)
    }

    fn next_instance(&mut self) -> usize {
        let idx = self.cursor % self.instances.len();
        self.cursor += 1;
        idx
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn obs_dim(&self) -> usize {
        TaskEnv::obs_dim(self.family)
    }

    /// Number of discrete actions, or the continuous action dimension.
    pub fn n_actions(&self) -> usize {
        match self.interface {
            ActionInterface::Controllers => {
                self.instances[0].controllers.as_ref().unwrap().len()
            }
            ActionInterface::EESpace => EE_ACTION_DIM,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.interface {
            ActionInterface::Controllers => ActionSpace::Discrete { n: self.n_actions() },
            ActionInterface::EESpace => ActionSpace::Box { dim: EE_ACTION_DIM },
        }
    }

    /// Environments dropped due to simulation faults so far.
    pub fn dropped_episodes(&self) -> usize {
        self.dropped
    }

    /// Current observations, row-major `[num_envs × obs_dim]`.
    pub fn obs_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.envs.len() * self.obs_dim());
        for env in &self.envs {
            out.extend(env.observe());
        }
        out
    }

    fn reset_env(&mut self, e: usize) {
        let idx = self.next_instance();
        let scene = self.instances[idx].scene.clone();
        self.envs[e].reset(scene);
        self.current[e] = idx;
        self.episode_return[e] = 0.0;
    }

    /// Steps every environment with its action; finished episodes reset in
    /// place (the next `obs_flat` is the reset observation).
    pub fn step(&mut self, actions: &ActionStep) -> Result<Vec<StepRecord>> {
        let n = self.envs.len();
        let mut records = Vec::with_capacity(n);
        for e in 0..n {
            let result = match (self.interface, actions) {
                (ActionInterface::Controllers, ActionStep::Discrete(idx)) => {
                    let a = idx[e];
                    let set = self.instances[self.current[e]].controllers.as_ref().unwrap();
                    let spec = set.controllers.get(a).ok_or_else(|| {
                        Error::Config(format!("action {a} out of range {}", set.len()))
                    })?;
                    self.envs[e].step_specs(std::slice::from_ref(spec))
                }
                (ActionInterface::EESpace, ActionStep::Continuous { dim, data }) => {
                    let cmd = ee_command_from_action(&data[e * dim..(e + 1) * dim]);
                    self.envs[e].step_command(&cmd)
                }
                _ => {
                    return Err(Error::Config(
                        "action kind does not match the pool's interface".into(),
                    ))
                }
            };
            match result {
                Ok(step) => {
                    self.episode_return[e] += step.reward;
                    let finished = if step.done {
                        let stats = EpisodeStats {
                            episode_return: self.episode_return[e],
                            steps: self.envs[e].steps_taken(),
                            success: step.success,
                            instance: self.current[e],
                        };
                        self.reset_env(e);
                        Some(stats)
                    } else {
                        None
                    };
                    records.push(StepRecord {
                        reward: step.reward,
                        done: step.done,
                        success: step.success,
                        fault: false,
                        finished,
                    });
                }
                Err(err) => {
                    // Episode dropped: boundary-masked like a normal terminal,
                    // but excluded from episode statistics.
                    self.dropped += 1;
                    eprintln!("env {e} fault, episode dropped: {err}");
                    self.reset_env(e);
                    records.push(StepRecord {
                        reward: 0.0,
                        done: true,
                        success: false,
                        fault: true,
                        finished: None,
                    });
                }
            }
        }
        Ok(records)
    }
}

/// Maps a raw 7-vector to an end-effector command: translation components
/// clamped to ±0.02 m, rotation-vector components clamped to ±0.05 rad, and
/// the gripper thresholded at zero (non-negative closes).
pub fn ee_command_from_action(raw: &[f64]) -> Command {
    debug_assert_eq!(raw.len(), EE_ACTION_DIM);
    let c = |v: f64, lim: f64| v.clamp(-lim, lim);
    let dx = Vec3::new(
        c(raw[0], EE_TRANS_CLAMP),
        c(raw[1], EE_TRANS_CLAMP),
        c(raw[2], EE_TRANS_CLAMP),
    );
    let rv = Vec3::new(
        c(raw[3], EE_ROT_CLAMP),
        c(raw[4], EE_ROT_CLAMP),
        c(raw[5], EE_ROT_CLAMP),
    );
    Command {
        delta_translation: dx,
        delta_rotation: AngleAxis::from_vector(rv),
        force: Vec3::zeros(),
        gripper: if raw[6] >= 0.0 {
            GripperAction::Close
        } else {
            GripperAction::Open
        },
        translation_axis_used: None,
    }
}

// ---------------------------------------------------------------------------
// Rollouts and GAE
// ---------------------------------------------------------------------------

/// Actions of a whole rollout, time-major (`t * num_envs + e`).
#[derive(Debug, Clone)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous { dim: usize, data: Vec<f64> },
}

/// One collected on-policy batch, time-major (`t * num_envs + e`).
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: ActionBatch,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub dropped_episodes: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    /// Fraction of episodes completed during collection that succeeded.
    pub fn success_ratio(&self) -> f64 {
        if self.episode_successes.is_empty() {
            return 0.0;
        }
        let wins = self.episode_successes.iter().filter(|s| **s).count();
        wins as f64 / self.episode_successes.len() as f64
    }
}

/// Generalized advantage estimation for one environment sequence.
///
/// `values` carries the bootstrap value of the state after the last step
/// (index `T`); a terminal step masks it out, matching the zero terminal
/// bootstrap. Returns `(advantages, returns)` with `returns = A + V`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if values.len() != t + 1 || dones.len() != t {
        return Err(Error::Config(format!(
            "gae arrays misaligned: rewards {t}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; t];
    let mut carry = 0.0;
    for i in (0..t).rev() {
        let mask = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * mask - values[i];
        carry = delta + gamma * lambda * mask * carry;
        adv[i] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Normalizes advantages in place to mean 0, std 1 (population std); a
/// near-constant batch is only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

/// Runs the policy for `steps` vectorized steps, sampling actions, and fills
/// in GAE advantages/returns with a bootstrap value at the cut.
fn collect_with_actor(
    actor: &mut ActorGraph,
    pool: &mut VecTaskEnv,
    steps: usize,
    gamma: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let n = pool.num_envs();
    let obs_dim = pool.obs_dim();
    let dropped_before = pool.dropped_episodes();
    let mut obs = Vec::with_capacity(steps * n * obs_dim);
    let mut log_probs = Vec::with_capacity(steps * n);
    let mut rewards = Vec::with_capacity(steps * n);
    let mut values = Vec::with_capacity(steps * n);
    let mut dones = Vec::with_capacity(steps * n);
    let mut episode_returns = Vec::new();
    let mut episode_successes = Vec::new();
    let mut actions = match pool.action_space() {
        ActionSpace::Discrete { .. } => ActionBatch::Discrete(Vec::with_capacity(steps * n)),
        ActionSpace::Box { dim } => ActionBatch::Continuous {
            dim,
            data: Vec::with_capacity(steps * n * dim),
        },
    };
    for _ in 0..steps {
        let obs_t = pool.obs_flat();
        let out = actor.forward(&obs_t)?;
        let (step_actions, logps) = sample_actions(&out, actor.space, &actor.log_std, n, rng);
        let records = pool.step(&step_actions)?;
        obs.extend_from_slice(&obs_t);
        log_probs.extend_from_slice(&logps);
        values.extend_from_slice(&out.values);
        match (&mut actions, &step_actions) {
            (ActionBatch::Discrete(all), ActionStep::Discrete(now)) => all.extend_from_slice(now),
            (ActionBatch::Continuous { data, .. }, ActionStep::Continuous { data: now, .. }) => {
                data.extend_from_slice(now)
            }
            _ => unreachable!("action kind fixed by the pool"),
        }
        for r in &records {
            rewards.push(r.reward);
            dones.push(r.done);
            if let Some(stats) = r.finished {
                episode_returns.push(stats.episode_return);
                episode_successes.push(stats.success);
            }
        }
    }
    // Bootstrap values at the rollout cut.
    let tail = actor.forward(&pool.obs_flat())?.values;
    let mut advantages = vec![0.0; steps * n];
    let mut returns = vec![0.0; steps * n];
    for e in 0..n {
        let mut r_e = Vec::with_capacity(steps);
        let mut v_e = Vec::with_capacity(steps + 1);
        let mut d_e = Vec::with_capacity(steps);
        for t in 0..steps {
            r_e.push(rewards[t * n + e]);
            v_e.push(values[t * n + e]);
            d_e.push(dones[t * n + e]);
        }
        v_e.push(tail[e]);
        let (a_e, g_e) = gae(&r_e, &v_e, &d_e, gamma, lambda)?;
        for t in 0..steps {
            advantages[t * n + e] = a_e[t];
            returns[t * n + e] = g_e[t];
        }
    }
    Ok(RolloutBatch {
        num_envs: n,
        steps,
        obs_dim,
        obs,
        actions,
        log_probs,
        rewards,
        values,
        dones,
        advantages,
        returns,
        episode_returns,
        episode_successes,
        dropped_episodes: pool.dropped_episodes() - dropped_before,
    })
}

/// Collects a rollout batch with a standalone policy (fresh actor graph),
/// using the shared default discounts γ = 0.995, λ = 0.95.
pub fn collect_rollouts(
    policy: &TaskPolicy,
    pool: &mut VecTaskEnv,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let mut actor = ActorGraph::new(policy, pool.num_envs())?;
    collect_with_actor(&mut actor, pool, steps, 0.995, 0.95, rng)
}

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

/// Per-update metrics.
#[derive(Debug, Clone, Copy)]
pub struct UpdateMetrics {
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub entropy_coef: f64,
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub update: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub success_ratio: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

impl TrainRecord {
    pub fn csv_header() -> &'static str {
        "update,steps,mean_reward,success_ratio,kl,clip_frac,entropy"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.mean_reward,
            self.success_ratio,
            self.kl,
            self.clip_fraction,
            self.entropy
        )
    }
}

struct UpdateNodes {
    obs: NodeId,
    act: NodeId,
    old_logp: NodeId,
    adv: NodeId,
    ret: NodeId,
    ent_coef: NodeId,
    loss: NodeId,
    ratio: NodeId,
    logp_new: NodeId,
    entropy: NodeId,
}

/// PPO learner: persistent update graph (canonical parameters), Adam state,
/// and a cached actor graph for rollout collection.
pub struct PpoTrainer {
    pub config: PpoConfig,
    obs_dim: usize,
    space: ActionSpace,
    seed_record: u64,
    graph: Graph,
    nodes: UpdateNodes,
    adam: AdamState,
    actor: ActorGraph,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub updates_done: usize,
}

impl PpoTrainer {
    pub fn new(policy: TaskPolicy, config: PpoConfig) -> Result<PpoTrainer> {
        config.validate()?;
        let mb = config.num_envs * config.num_steps / config.minibatches;
        let mut g = Graph::new();
        let obs = g.input("obs", &[mb, policy.obs_dim]);
        let act = match policy.action_space {
            ActionSpace::Discrete { .. } => g.input("act", &[mb]),
            ActionSpace::Box { dim } => g.input("act", &[mb, dim]),
        };
        let old_logp = g.input("old_logp", &[mb]);
        let adv = g.input("adv", &[mb]);
        let ret = g.input("ret", &[mb]);
        let ent_coef = g.input("ent_coef", &[1]);
        let params = register_policy(&mut g, policy.obs_dim, policy.action_space, &policy.weights);
        let head = mlp3(&mut g, obs, &params[..6])?;
        let (logp_new, entropy) = match policy.action_space {
            ActionSpace::Discrete { .. } => {
                let logp_all = g.row_log_softmax(head)?;
                let logp_a = g.select_per_row(logp_all, act)?;
                let p = g.row_softmax(head)?;
                let plogp = g.mul(p, logp_all)?;
                let row_ent = g.row_sum(plogp)?;
                let row_ent = g.scale(row_ent, -1.0);
                let entropy = g.mean_all(row_ent);
                (logp_a, entropy)
            }
            ActionSpace::Box { dim } => {
                let log_std = params[6];
                let neg_log_std = g.scale(log_std, -1.0);
                let inv_std_row = g.exp(neg_log_std);
                let inv_std = g.expand_rows(inv_std_row, mb)?;
                let diff = g.sub(act, head)?;
                let z = g.mul(diff, inv_std)?;
                let zsq = g.square(z);
                let zsum = g.row_sum(zsq)?;
                let zterm = g.scale(zsum, -0.5);
                let ls_rows = g.expand_rows(log_std, mb)?;
                let ls_sum = g.row_sum(ls_rows)?;
                let logp = g.sub(zterm, ls_sum)?;
                let logp = g.add_const(logp, -0.5 * dim as f64 * LN_2PI);
                let ls_total = g.sum_all(log_std);
                let entropy = g.add_const(ls_total, 0.5 * dim as f64 * (LN_2PI + 1.0));
                (logp, entropy)
            }
        };
        let dlp = g.sub(logp_new, old_logp)?;
        let ratio = g.exp(dlp);
        let surr1 = g.mul(ratio, adv)?;
        let clipped = g.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
        let surr2 = g.mul(clipped, adv)?;
        let objective = g.min(surr1, surr2)?;
        let mean_obj = g.mean_all(objective);
        let pg_loss = g.scale(mean_obj, -1.0);
        let voff = value_param_offset(policy.action_space);
        let v = mlp3(&mut g, obs, &params[voff..voff + 6])?;
        let v = g.reshape(v, &[mb])?;
        let verr = g.sub(v, ret)?;
        let vsq = g.square(verr);
        let v_loss = g.mean_all(vsq);
        let v_term = g.scale(v_loss, config.value_coef);
        let base = g.add(pg_loss, v_term)?;
        let ent_term = g.mul(ent_coef, entropy)?;
        let loss = g.sub(base, ent_term)?;
        let adam = AdamState::for_graph(&g);
        let actor = ActorGraph::new(&policy, config.num_envs)?;
        Ok(PpoTrainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            obs_dim: policy.obs_dim,
            space: policy.action_space,
            seed_record: policy.seed,
            graph: g,
            nodes: UpdateNodes {
                obs,
                act,
                old_logp,
                adv,
                ret,
                ent_coef,
                loss,
                ratio,
                logp_new,
                entropy,
            },
            adam,
            actor,
            env_steps: 0,
            updates_done: 0,
        })
    }

    /// Snapshot of the current parameters as a standalone policy.
    pub fn policy(&self) -> TaskPolicy {
        let weights = self
            .graph
            .param_ids()
            .to_vec()
            .iter()
            .map(|&id| self.graph.param_value(id).clone())
            .collect();
        TaskPolicy {
            obs_dim: self.obs_dim,
            action_space: self.space,
            hidden: HIDDEN,
            seed: self.seed_record,
            weights,
        }
    }

    /// Collects one on-policy batch with the cached actor graph.
    pub fn collect(&mut self, pool: &mut VecTaskEnv, rng: &mut ChaCha8Rng) -> Result<RolloutBatch> {
        collect_with_actor(
            &mut self.actor,
            pool,
            self.config.num_steps,
            self.config.gamma,
            self.config.lambda,
            rng,
        )
    }

    fn fill_minibatch(&mut self, batch: &RolloutBatch, idx: &[usize], ent: f64) -> Result<()> {
        let mb = idx.len();
        let od = batch.obs_dim;
        let mut obs = Vec::with_capacity(mb * od);
        let mut old_logp = Vec::with_capacity(mb);
        let mut adv = Vec::with_capacity(mb);
        let mut ret = Vec::with_capacity(mb);
        for &i in idx {
            obs.extend_from_slice(&batch.obs[i * od..(i + 1) * od]);
            old_logp.push(batch.log_probs[i]);
            adv.push(batch.advantages[i]);
            ret.push(batch.returns[i]);
        }
        let g = &mut self.graph;
        g.set_input(self.nodes.obs, Tensor::new(vec![mb, od], obs)?)?;
        match (&batch.actions, self.space) {
            (ActionBatch::Discrete(a), ActionSpace::Discrete { .. }) => {
                let sel: Vec<f64> = idx.iter().map(|&i| a[i] as f64).collect();
                g.set_input(self.nodes.act, Tensor::new(vec![mb], sel)?)?;
            }
            (ActionBatch::Continuous { dim, data }, ActionSpace::Box { .. }) => {
                let mut sel = Vec::with_capacity(mb * dim);
                for &i in idx {
                    sel.extend_from_slice(&data[i * dim..(i + 1) * dim]);
                }
                g.set_input(self.nodes.act, Tensor::new(vec![mb, *dim], sel)?)?;
            }
            _ => return Err(Error::Config("batch action kind != policy head".into())),
        }
        g.set_input(self.nodes.old_logp, Tensor::new(vec![mb], old_logp)?)?;
        g.set_input(self.nodes.adv, Tensor::new(vec![mb], adv)?)?;
        g.set_input(self.nodes.ret, Tensor::new(vec![mb], ret)?)?;
        g.set_input(self.nodes.ent_coef, Tensor::new(vec![1], vec![ent])?)?;
        Ok(())
    }

    /// One PPO update over a batch whose advantages are already normalized.
    /// Runs `epochs × minibatches` clipped-objective steps with global-norm
    /// gradient clipping, then refreshes the actor graph.
    pub fn ppo_update(&mut self, batch: &RolloutBatch) -> Result<UpdateMetrics> {
        let total = batch.len();
        let mb_count = self.config.minibatches;
        if total != self.config.num_envs * self.config.num_steps {
            return Err(Error::Config(format!(
                "batch size {total} != envs×steps {}",
                self.config.num_envs * self.config.num_steps
            )));
        }
        let mb = total / mb_count;
        let progress = self.env_steps as f64 / self.config.total_env_steps.max(1) as f64;
        let ent_coef = self.config.entropy_coef_at(progress);
        let mut indices: Vec<usize> = (0..total).collect();
        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut clip_sum = 0.0;
        let mut ent_sum = 0.0;
        let mut tail_count = 0.0;
        for epoch in 0..self.config.epochs {
            // Fisher–Yates with the trainer's stream keeps updates
            // reproducible for a fixed config + seed.
            for i in (1..total).rev() {
                let j = self.rng.gen_range(0..=i);
                indices.swap(i, j);
            }
            for m in 0..mb_count {
                let idx = &indices[m * mb..(m + 1) * mb];
                self.fill_minibatch(batch, idx, ent_coef)?;
                self.graph.forward()?;
                let loss = self.graph.value(self.nodes.loss)?.data[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "ppo loss at update {}, epoch {epoch}, minibatch {m}",
                        self.updates_done
                    )));
                }
                if epoch == self.config.epochs - 1 {
                    let ratios = &self.graph.value(self.nodes.ratio)?.data;
                    let new_lp = &self.graph.value(self.nodes.logp_new)?.data;
                    let clip = self.config.clip;
                    clip_sum += ratios
                        .iter()
                        .filter(|r| (**r - 1.0).abs() > clip)
                        .count() as f64
                        / ratios.len() as f64;
                    kl_sum += idx
                        .iter()
                        .zip(new_lp.iter())
                        .map(|(&i, lp)| batch.log_probs[i] - lp)
                        .sum::<f64>()
                        / mb as f64;
                    ent_sum += self.graph.value(self.nodes.entropy)?.data[0];
                    loss_sum += loss;
                    tail_count += 1.0;
                }
                self.graph.backward(self.nodes.loss)?;
                adam_step(
                    &mut self.graph,
                    &mut self.adam,
                    self.config.lr,
                    Some(self.config.max_grad_norm),
                )?;
            }
        }
        self.env_steps += total;
        self.updates_done += 1;
        let weights: Vec<Tensor> = self
            .graph
            .param_ids()
            .to_vec()
            .iter()
            .map(|&id| self.graph.param_value(id).clone())
            .collect();
        self.actor.refresh(&weights);
        Ok(UpdateMetrics {
            loss: loss_sum / tail_count,
            kl: kl_sum / tail_count,
            clip_fraction: clip_sum / tail_count,
            entropy: ent_sum / tail_count,
            entropy_coef: ent_coef,
        })
    }

    /// Recomputes importance ratios for a slice of batch rows without
    /// stepping the optimizer (diagnostics and tests).
    fn probe_ratios(&mut self, batch: &RolloutBatch, idx: &[usize]) -> Result<Vec<f64>> {
        self.fill_minibatch(batch, idx, 0.0)?;
        self.graph.forward()?;
        Ok(self.graph.value(self.nodes.ratio)?.data.clone())
    }
}

/// Full training loop: collect → normalize advantages → update, until the
/// step budget is exhausted. `on_update` fires after every update with a
/// parameter snapshot and the metrics row.
pub fn train_ppo(
    pool: &mut VecTaskEnv,
    config: &PpoConfig,
    mut on_update: impl FnMut(&PpoTrainer, &TrainRecord),
) -> Result<(TaskPolicy, Vec<TrainRecord>)> {
    config.validate()?;
    let policy = TaskPolicy::new(pool.obs_dim(), pool.action_space(), config.seed);
    let mut trainer = PpoTrainer::new(policy, config.clone())?;
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut records = Vec::new();
    while trainer.env_steps < config.total_env_steps {
        let mut batch = trainer.collect(pool, &mut rollout_rng)?;
        normalize_advantages(&mut batch.advantages);
        let metrics = trainer.ppo_update(&batch)?;
        let record = TrainRecord {
            update: trainer.updates_done,
            env_steps: trainer.env_steps,
            mean_reward: batch.mean_reward(),
            success_ratio: batch.success_ratio(),
            kl: metrics.kl,
            clip_fraction: metrics.clip_fraction,
            entropy: metrics.entropy,
        };
        on_update(&trainer, &record);
        records.push(record);
    }
    Ok((trainer.policy(), records))
}

/// Runs `episodes` deterministic episodes, cycling through the instances
/// round-robin (one env), and returns per-episode outcomes.
pub fn evaluate_policy(
    policy: &TaskPolicy,
    instances: &[TaskInstance],
    episodes: usize,
    env_config: EnvConfig,
    interface: ActionInterface,
) -> Result<Vec<EpisodeStats>> {
    let mut pool = VecTaskEnv::new(instances.to_vec(), 1, env_config, interface)?;
    let mut actor = ActorGraph::new(policy, 1)?;
    let mut outcomes = Vec::with_capacity(episodes);
    while outcomes.len() < episodes {
        let out = actor.forward(&pool.obs_flat())?;
        let actions = deterministic_actions(&out, actor.space, 1);
        let records = pool.step(&actions)?;
        if let Some(stats) = records[0].finished {
            outcomes.push(stats);
        } else if records[0].fault {
            // A dropped episode still consumes an evaluation slot as a
            // failure so eval cannot loop forever on a faulty variation.
            outcomes.push(EpisodeStats {
                episode_return: 0.0,
                steps: 0,
                success: false,
                instance: 0,
            });
        }
    }
    Ok(outcomes)
}
