//! Keypoint-parameter learning for new object sets: a spatial-softmax
//! network ψ picks one superpixel per keypoint channel on the episode's
//! initial image, the chosen cells are lifted to 3D controller targets
//! through the depth channel, and plain Reinforce through a **frozen** task
//! policy improves the picks from rollout returns alone.
//!
//! The pipeline per episode: sample a scene and a robot-side camera, render
//! a 128×128 view, run ψ, sample a 32×32 grid cell per channel, average the
//! back-projections of the cell's on-object pixels into a 3D target, build
//! the family's controller set from those targets ([`crate::ctrlgen`]), and
//! roll out the frozen policy greedily. The per-iteration gradient is the
//! score-function estimator `mean_episodes(r(τ) · ∇ Σ_channels log ψ(cell))`
//! (maximized via Adam on its negation).

use std::io::Read as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctrlgen::{extract_candidate_axes, generate_reduced, ControllerSet};
use crate::diffkernel::{
    adam_step, checkpoint_bytes, load_checkpoint_bytes, AdamState, Graph, NodeId, Tensor,
};
use crate::error::{Error, Result};
use crate::geom::{CameraModel, PixelCoord, Vec3};
use crate::render::{render_view, RenderedView, BACKGROUND_ID};
use crate::rl::TaskPolicy;
use crate::sim::env::{reward_for, EnvConfig, TaskEnv, TaskMetrics};
use crate::sim::scene::{SceneModel, TaskFamily, Variation};

/// Required side length of ψ's input image.
pub const INPUT_RES: usize = 128;
/// Side length of the superpixel grid ψ predicts over.
pub const GRID: usize = 32;
/// Input pixels per superpixel cell side (`INPUT_RES / GRID`).
pub const CELL: usize = 4;
/// Number of grid cells per channel.
pub const NUM_CELLS: usize = GRID * GRID;

/// Encoder channel widths (each stage: 3×3 conv, pad 1, relu, maxpool 2/2).
const ENC: [usize; 4] = [64, 128, 256, 512];
/// Bridge conv width after the encoder (8×8 spatial).
const BRIDGE: usize = 32;
/// Decoder block widths (each: 2× nearest upsample, 3×3 conv, relu).
const DEC: [usize; 2] = [16, 4];

// ---- network ------------------------------------------------------------

/// The keypoint network ψ: VGG-style encoder (64, 128, 256, 512 channels,
/// halving 128 → 64 → 32 → 16 → 8), a 512→32 bridge conv, two upsampling
/// decoder blocks (16 then 4 channels, 8 → 16 → 32), and a 1×1 head to one
/// logit map per keypoint channel. A softmax over each channel's 32×32 map
/// gives the superpixel-selection distribution.
#[derive(Debug, Clone)]
pub struct KeypointNet {
    pub channels: usize,
    pub seed: u64,
    weights: Vec<Tensor>,
}

/// Parameter names and shapes in registration order.
fn param_specs(channels: usize) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut conv = |name: &str, out: usize, inp: usize, k: usize| {
        specs.push((format!("{name}.w"), vec![out, inp, k, k]));
        specs.push((format!("{name}.b"), vec![out]));
    };
    conv("enc1", ENC[0], 3, 3);
    conv("enc2", ENC[1], ENC[0], 3);
    conv("enc3", ENC[2], ENC[1], 3);
    conv("enc4", ENC[3], ENC[2], 3);
    conv("bridge", BRIDGE, ENC[3], 3);
    conv("dec1", DEC[0], BRIDGE, 3);
    conv("dec2", DEC[1], DEC[0], 3);
    conv("head", channels, DEC[1], 1);
    specs
}

fn arch_string(channels: usize) -> String {
    format!(
        "keypointlearn.psi vgg{}-{}-{}-{} bridge{} dec{}-{} c{channels} grid{GRID}",
        ENC[0], ENC[1], ENC[2], ENC[3], BRIDGE, DEC[0], DEC[1]
    )
}

/// Registers ψ's parameters on `g` with the given initial values and builds
/// the forward pass from `input` ([B, 3, 128, 128]) to the logit map
/// ([B, channels, 32, 32]). Returns (param ids, logits id).
fn register_psi(
    g: &mut Graph,
    input: NodeId,
    channels: usize,
    weights: &[Tensor],
) -> Result<(Vec<NodeId>, NodeId)> {
    let specs = param_specs(channels);
    if weights.len() != specs.len() {
        return Err(Error::Config(format!(
            "keypoint net expects {} parameter tensors, got {}",
            specs.len(),
            weights.len()
        )));
    }
    let params: Vec<NodeId> = specs
        .iter()
        .zip(weights)
        .map(|((name, shape), w)| {
            debug_assert_eq!(&w.shape, shape, "weight shape for {name}");
            g.param(name, w.clone())
        })
        .collect();

    let mut x = input;
    for stage in 0..4 {
        let c = g.conv2d(x, params[2 * stage])?;
        let c = g.add_channel_bias(c, params[2 * stage + 1])?;
        let r = g.relu(c);
        x = g.maxpool2(r)?;
    }
    let c = g.conv2d(x, params[8])?;
    let c = g.add_channel_bias(c, params[9])?;
    x = g.relu(c);
    for stage in 0..2 {
        let u = g.upsample_nearest2(x)?;
        let c = g.conv2d(u, params[10 + 2 * stage])?;
        let c = g.add_channel_bias(c, params[11 + 2 * stage])?;
        x = g.relu(c);
    }
    let c = g.conv2d(x, params[14])?;
    let logits = g.add_channel_bias(c, params[15])?;
    Ok((params, logits))
}

impl KeypointNet {
    /// Fresh network with fan-in uniform conv weights and zero biases.
    pub fn fresh(channels: usize, seed: u64) -> Result<KeypointNet> {
        if channels == 0 {
            return Err(Error::Config("keypoint net needs ≥ 1 channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = param_specs(channels)
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape[1] * shape[2] * shape[3];
                    Tensor::init_uniform(shape, fan_in, &mut rng)
                }
            })
            .collect();
        Ok(KeypointNet {
            channels,
            seed,
            weights,
        })
    }

    /// Per-channel superpixel probability maps for one 128×128 view, each a
    /// row of [`NUM_CELLS`] values summing to 1.
    pub fn spatial_distributions(&self, view: &RenderedView) -> Result<Vec<Vec<f64>>> {
        check_view_resolution(view)?;
        let mut g = Graph::new();
        let input = g.input("image", &[1, 3, INPUT_RES, INPUT_RES]);
        let (_, logits) = register_psi(&mut g, input, self.channels, &self.weights)?;
        let rows = g.reshape(logits, &[self.channels, NUM_CELLS])?;
        let probs = g.row_softmax(rows)?;
        g.set_input(input, image_batch(std::slice::from_ref(view))?)?;
        g.forward()?;
        let p = g.value(probs)?;
        Ok((0..self.channels)
            .map(|c| p.data[c * NUM_CELLS..(c + 1) * NUM_CELLS].to_vec())
            .collect())
    }

    /// Serialized checkpoint image (magic, meta, weights).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let input = g.input("image", &[1, 3, INPUT_RES, INPUT_RES]);
        register_psi(&mut g, input, self.channels, &self.weights)?;
        let ckpt = checkpoint_bytes(&arch_string(self.channels), &g);
        #[derive(Serialize)]
        struct Meta {
            channels: usize,
            seed: u64,
        }
        let meta = serde_json::to_vec(&Meta {
            channels: self.channels,
            seed: self.seed,
        })?;
        let mut out = Vec::with_capacity(12 + meta.len() + ckpt.len());
        out.extend_from_slice(b"TAXKEYP1");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&ckpt);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KeypointNet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<KeypointNet> {
        #[derive(Deserialize)]
        struct Meta {
            channels: usize,
            seed: u64,
        }
        if bytes.len() < 12 || &bytes[..8] != b"TAXKEYP1" {
            return Err(Error::Checkpoint("not a keypoint net checkpoint".into()));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: Meta = serde_json::from_slice(
            bytes
                .get(12..12 + meta_len)
                .ok_or_else(|| Error::Checkpoint("truncated keypoint net meta".into()))?,
        )?;
        let template = KeypointNet::fresh(meta.channels, 0)?;
        let mut g = Graph::new();
        let input = g.input("image", &[1, 3, INPUT_RES, INPUT_RES]);
        let (params, _) = register_psi(&mut g, input, meta.channels, &template.weights)?;
        load_checkpoint_bytes(&bytes[12 + meta_len..], &arch_string(meta.channels), &mut g)?;
        let weights = params.iter().map(|&id| g.param_value(id).clone()).collect();
        Ok(KeypointNet {
            channels: meta.channels,
            seed: meta.seed,
            weights,
        })
    }

    #[cfg(test)]
    pub(crate) fn weights_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.weights
    }

    #[cfg(test)]
    pub(crate) fn weights(&self) -> &[Tensor] {
        &self.weights
    }
}

fn check_view_resolution(view: &RenderedView) -> Result<()> {
    if view.width != INPUT_RES || view.height != INPUT_RES {
        return Err(Error::Config(format!(
            "keypoint net expects {INPUT_RES}×{INPUT_RES} views, got {}×{}",
            view.width, view.height
        )));
    }
    Ok(())
}

/// Packs views into an NCHW image tensor [n, 3, 128, 128].
fn image_batch(views: &[RenderedView]) -> Result<Tensor> {
    let n = views.len();
    let mut data = vec![0.0; n * 3 * INPUT_RES * INPUT_RES];
    for (b, view) in views.iter().enumerate() {
        check_view_resolution(view)?;
        for c in 0..3 {
            let plane = &mut data
                [((b * 3 + c) * INPUT_RES * INPUT_RES)..((b * 3 + c + 1) * INPUT_RES * INPUT_RES)];
            for (i, px) in plane.iter_mut().enumerate() {
                *px = view.feature[i * 3 + c];
            }
        }
    }
    Tensor::new(vec![n, 3, INPUT_RES, INPUT_RES], data)
}

// ---- superpixel sampling and lifting ------------------------------------

/// One ψ draw for an episode: a grid cell per channel, the summed
/// log-probability of the draw, and each cell's lifted 3D target (`None`
/// when every pixel of its 4×4 input region is background).
#[derive(Debug, Clone)]
pub struct SuperpixelSample {
    /// Chosen cell per channel, row-major on the 32×32 grid.
    pub cells: Vec<usize>,
    /// Σ over channels of the sampled cells' log-probabilities.
    pub log_prob: f64,
    /// Lifted 3D target per channel.
    pub targets: Vec<Option<Vec3>>,
}

impl SuperpixelSample {
    /// All channels lifted to valid on-object targets.
    pub fn valid(&self) -> bool {
        self.targets.iter().all(Option::is_some)
    }

    /// The targets, when every channel is valid.
    pub fn target_points(&self) -> Option<Vec<Vec3>> {
        self.targets.iter().copied().collect()
    }
}

/// Samples an index from a probability row via its CDF.
fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Lifts one grid cell to 3D: back-projects all 16 pixels of its 4×4 input
/// region through the view's depth and averages the on-object ones. `None`
/// when all 16 pixels are background.
pub fn superpixel_to_target(cell: usize, view: &RenderedView) -> Result<Option<Vec3>> {
    check_view_resolution(view)?;
    if cell >= NUM_CELLS {
        return Err(Error::Config(format!(
            "cell {cell} out of range (grid has {NUM_CELLS} cells)"
        )));
    }
    let (gx, gy) = (cell % GRID, cell / GRID);
    let mut sum = Vec3::zeros();
    let mut count = 0usize;
    for dy in 0..CELL {
        for dx in 0..CELL {
            let (px, py) = (gx * CELL + dx, gy * CELL + dy);
            if view.mask_at(px, py) == BACKGROUND_ID {
                continue;
            }
            let pixel = PixelCoord::new(px as f64 + 0.5, py as f64 + 0.5);
            sum += view.camera.backproject_pixel(&pixel, view.depth_at(px, py))?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Runs ψ on the view, samples one cell per channel from the per-channel
/// softmax, and lifts each cell to a 3D target.
pub fn sample_keypoints(
    net: &KeypointNet,
    view: &RenderedView,
    rng: &mut impl Rng,
) -> Result<SuperpixelSample> {
    let dists = net.spatial_distributions(view)?;
    sample_from_distributions(&dists, view, rng)
}

/// Sampling + lifting from already-computed probability rows (the batched
/// training path computes all rows in one graph pass).
fn sample_from_distributions(
    dists: &[Vec<f64>],
    view: &RenderedView,
    rng: &mut impl Rng,
) -> Result<SuperpixelSample> {
    let mut cells = Vec::with_capacity(dists.len());
    let mut log_prob = 0.0;
    let mut targets = Vec::with_capacity(dists.len());
    for row in dists {
        let cell = sample_index(row, rng);
        log_prob += row[cell].max(f64::MIN_POSITIVE).ln();
        targets.push(superpixel_to_target(cell, view)?);
        cells.push(cell);
    }
    Ok(SuperpixelSample {
        cells,
        log_prob,
        targets,
    })
}

/// Mean over rows of the spatial distribution's entropy, −Σ p ln p.
fn mean_entropy(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|row| -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / rows.len() as f64
}

// ---- frozen task policy ---------------------------------------------------

/// A task policy locked for the keypoint-learning stage. The constructor
/// captures the policy's checkpoint bytes; [`FrozenPolicy::verify`] fails if
/// the parameters have changed since, which [`ReinforceTrainer`] checks
/// around every iteration.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    pub policy: TaskPolicy,
    frozen_bytes: Vec<u8>,
}

impl FrozenPolicy {
    pub fn freeze(policy: TaskPolicy) -> Result<FrozenPolicy> {
        let frozen_bytes = policy.to_bytes()?;
        Ok(FrozenPolicy {
            policy,
            frozen_bytes,
        })
    }

    /// Errors if the policy's serialized parameters differ from the frozen
    /// snapshot.
    pub fn verify(&self) -> Result<()> {
        if self.policy.to_bytes()? != self.frozen_bytes {
            return Err(Error::PolicyUnfrozen);
        }
        Ok(())
    }

    /// The checkpoint bytes captured at freeze time.
    pub fn frozen_bytes(&self) -> &[u8] {
        &self.frozen_bytes
    }

    /// Greedy (argmax) discrete action for one observation.
    pub fn act(&self, obs: &[f64]) -> Result<usize> {
        let (logits, _) = self.policy.forward_one(obs)?;
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

// ---- configuration --------------------------------------------------------

/// Robot-side episode camera distribution: a look-at camera on the
/// workspace viewsphere sector facing the robot (the sensor sits over the
/// robot base, as a shoulder-mounted camera would), with jittered distance,
/// elevation, azimuth, and aim point so the object can land anywhere in the
/// image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeCamera {
    /// Azimuth of the sector center (rad; π looks from the robot base
    /// toward the workspace).
    pub azimuth_center: f64,
    /// Half-width of the azimuth sector (rad).
    pub azimuth_half_range: f64,
    /// Elevation range (rad).
    pub elevation: [f64; 2],
    /// Distance range from the aim point (m).
    pub radius: [f64; 2],
    /// Uniform xy jitter of the aim point around the scene focus (m).
    pub focus_jitter: f64,
}

impl Default for EpisodeCamera {
    fn default() -> Self {
        EpisodeCamera {
            azimuth_center: std::f64::consts::PI,
            azimuth_half_range: 60f64.to_radians(),
            elevation: [20f64.to_radians(), 60f64.to_radians()],
            radius: [0.5, 0.9],
            focus_jitter: 0.10,
        }
    }
}

/// Samples one episode camera aimed near `focus`.
pub fn sample_episode_camera(
    focus: &Vec3,
    cfg: &EpisodeCamera,
    rng: &mut impl Rng,
) -> Result<CameraModel> {
    let azimuth =
        cfg.azimuth_center + rng.gen_range(-cfg.azimuth_half_range..=cfg.azimuth_half_range);
    let elevation = rng.gen_range(cfg.elevation[0]..cfg.elevation[1]);
    let radius = rng.gen_range(cfg.radius[0]..cfg.radius[1]);
    let aim = focus
        + Vec3::new(
            rng.gen_range(-cfg.focus_jitter..=cfg.focus_jitter),
            rng.gen_range(-cfg.focus_jitter..=cfg.focus_jitter),
            0.0,
        );
    let eye = aim
        + Vec3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
    CameraModel::look_at(
        eye,
        aim,
        Vec3::new(0.0, 0.0, 1.0),
        60f64.to_radians(),
        INPUT_RES,
        INPUT_RES,
    )
}

/// Reinforce stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub family: TaskFamily,
    /// Keypoint channels ψ predicts (block and door refinement use 1).
    pub channels: usize,
    /// Parallel episodes aggregated per gradient step.
    pub episodes_per_iter: usize,
    pub iterations: usize,
    /// Piecewise-constant learning-rate stages `(first_iteration, lr)`,
    /// ascending. The default is 1e-3 decayed by 0.3 after iterations 200
    /// and 1000 — stored as the literal stage values 1e-3, 3e-4, 9e-5
    /// (repeated f64 multiplication by 0.3 would drift off the decimal
    /// schedule: 1e-3·0.3·0.3 ≠ 9e-5 exactly).
    pub lr_stages: Vec<(usize, f64)>,
    /// Optional exponential-moving-average return baseline coefficient;
    /// `None` (the default) is plain Reinforce.
    pub baseline_ema: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub camera: EpisodeCamera,
    #[serde(default)]
    pub env: EnvConfig,
}

impl ReinforceConfig {
    /// Block/door refinement defaults: 24 episodes per iteration, the
    /// published lr schedule, no baseline.
    pub fn for_family(family: TaskFamily) -> ReinforceConfig {
        ReinforceConfig {
            family,
            channels: 1,
            episodes_per_iter: 24,
            iterations: 300,
            lr_stages: vec![(0, 1e-3), (200, 3e-4), (1000, 9e-5)],
            baseline_ema: None,
            seed: 0,
            camera: EpisodeCamera::default(),
            env: EnvConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be ≥ 1".into()));
        }
        if self.episodes_per_iter == 0 {
            return Err(Error::Config("episodes_per_iter must be ≥ 1".into()));
        }
        if self.lr_stages.is_empty() || self.lr_stages[0].0 != 0 {
            return Err(Error::Config(
                "lr_stages must be non-empty and start at iteration 0".into(),
            ));
        }
        for pair in self.lr_stages.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config("lr_stages must be ascending".into()));
            }
        }
        if self.lr_stages.iter().any(|(_, lr)| !(*lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(beta) = self.baseline_ema {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config("baseline_ema must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based iteration index: the last stage
    /// whose first iteration is ≤ `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr_stages
            .iter()
            .take_while(|(start, _)| *start <= iteration)
            .last()
            .map(|(_, lr)| *lr)
            .unwrap_or(self.lr_stages[0].1)
    }
}

// ---- episode rollout -------------------------------------------------------

/// Builds the family's controller set from the lifted targets and rolls the
/// frozen policy out greedily on the scene. Returns (episode return,
/// success).
fn rollout_episode(
    frozen: &FrozenPolicy,
    scene: &SceneModel,
    targets: &[Vec3],
    env_cfg: &EnvConfig,
) -> Result<(f64, bool)> {
    let axes = extract_candidate_axes(scene, false);
    let set: ControllerSet = generate_reduced(scene.family, targets, &axes)?;
    let n = match frozen.policy.action_space {
        crate::rl::ActionSpace::Discrete { n } => n,
        crate::rl::ActionSpace::Box { .. } => {
            return Err(Error::Config(
                "keypoint learning requires a discrete-action task policy".into(),
            ))
        }
    };
    if n != set.len() {
        return Err(Error::Config(format!(
            "frozen policy has {n} actions but the controller set has {} controllers",
            set.len()
        )));
    }
    let mut env = TaskEnv::new(scene.clone(), env_cfg.clone());
    let mut ret = 0.0;
    for _ in 0..env_cfg.episode_len {
        let obs = env.observe();
        let action = frozen.act(&obs)?;
        let step = env.step_specs(std::slice::from_ref(&set.controllers[action]))?;
        ret += step.reward;
        if step.done {
            break;
        }
    }
    Ok((ret, env.success()))
}

/// Return credited to an episode whose sample could not be lifted (an
/// all-background cell): the return of a full-length episode in which
/// nothing ever improves, i.e. `episode_len` times the do-nothing step
/// reward.
fn failure_return(family: TaskFamily, env_cfg: &EnvConfig) -> Result<f64> {
    let m = TaskMetrics {
        family,
        d: 0.0,
        progress: 0.0,
        phi: 0.0,
    };
    let per_step = reward_for(&m, &m, false, env_cfg.strict_literal_reward)?;
    Ok(env_cfg.episode_len as f64 * per_step)
}

// ---- Reinforce trainer ------------------------------------------------------

/// Per-iteration training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_return: f64,
    pub success_ratio: f64,
    /// Mean entropy of the spatial distributions over this iteration's
    /// episode images (nats).
    pub entropy: f64,
    pub lr: f64,
}

impl IterationRecord {
    pub fn csv_header() -> &'static str {
        "iteration,mean_return,success_ratio,entropy"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.mean_return, self.success_ratio, self.entropy
        )
    }
}

struct PsiNodes {
    input: NodeId,
    cells: NodeId,
    /// Per-row loss weights: `−advantage_episode / episodes` replicated over
    /// the episode's channel rows, making the loss the negated Reinforce
    /// objective estimate.
    weights: NodeId,
    probs: NodeId,
    loss: NodeId,
}

/// Reinforce learner: owns the batched ψ graph (one row per episode ×
/// channel), the frozen policy, and the Adam state.
pub struct ReinforceTrainer {
    cfg: ReinforceConfig,
    frozen: FrozenPolicy,
    graph: Graph,
    nodes: PsiNodes,
    params: Vec<NodeId>,
    adam: AdamState,
    rng: ChaCha8Rng,
    baseline: Option<f64>,
    iterations_done: usize,
    channels: usize,
}

impl ReinforceTrainer {
    pub fn new(frozen: FrozenPolicy, cfg: ReinforceConfig) -> Result<ReinforceTrainer> {
        cfg.validate()?;
        frozen.verify()?;
        let net = KeypointNet::fresh(cfg.channels, cfg.seed)?;
        let batch = cfg.episodes_per_iter;
        let rows = batch * cfg.channels;

        let mut g = Graph::new();
        let input = g.input("images", &[batch, 3, INPUT_RES, INPUT_RES]);
        let (params, logits) = register_psi(&mut g, input, cfg.channels, &net.weights)?;
        let flat = g.reshape(logits, &[rows, NUM_CELLS])?;
        let probs = g.row_softmax(flat)?;
        let logp = g.row_log_softmax(flat)?;
        let cells = g.input("cells", &[rows]);
        let picked = g.select_per_row(logp, cells)?;
        let weights = g.input("loss_weights", &[rows]);
        let weighted = g.mul(picked, weights)?;
        let loss = g.sum_all(weighted);

        let adam = AdamState::for_graph(&g);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        Ok(ReinforceTrainer {
            channels: cfg.channels,
            cfg,
            frozen,
            graph: g,
            nodes: PsiNodes {
                input,
                cells,
                weights,
                probs,
                loss,
            },
            params,
            adam,
            rng,
            baseline: None,
            iterations_done: 0,
        })
    }

    pub fn config(&self) -> &ReinforceConfig {
        &self.cfg
    }

    pub fn frozen(&self) -> &FrozenPolicy {
        &self.frozen
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    /// Snapshot of the current network weights.
    pub fn net(&self) -> KeypointNet {
        KeypointNet {
            channels: self.channels,
            seed: self.cfg.seed,
            weights: self
                .params
                .iter()
                .map(|&id| self.graph.param_value(id).clone())
                .collect(),
        }
    }

    /// One full iteration: sample scenes and cameras, render, draw cells,
    /// roll out the frozen policy, and apply the Reinforce update.
    pub fn iterate(&mut self) -> Result<IterationRecord> {
        self.frozen.verify()?;
        let batch = self.cfg.episodes_per_iter;
        let rows = batch * self.channels;

        // Episode scenes, cameras, initial images.
        let mut scenes = Vec::with_capacity(batch);
        let mut views = Vec::with_capacity(batch);
        for _ in 0..batch {
            let scene = SceneModel::sample(self.cfg.family, &mut self.rng);
            let camera =
                sample_episode_camera(&scene.focus_point(), &self.cfg.camera, &mut self.rng)?;
            views.push(render_view(&scene, &camera)?);
            scenes.push(scene);
        }

        // Sampling forward pass (cell and weight inputs are placeholders).
        self.graph.set_input(self.nodes.input, image_batch(&views)?)?;
        self.graph
            .set_input(self.nodes.cells, Tensor::zeros(&[rows]))?;
        self.graph
            .set_input(self.nodes.weights, Tensor::zeros(&[rows]))?;
        self.graph.forward()?;
        let probs = self.graph.value(self.nodes.probs)?;
        let dist_rows: Vec<Vec<f64>> = (0..rows)
            .map(|r| probs.data[r * NUM_CELLS..(r + 1) * NUM_CELLS].to_vec())
            .collect();
        let entropy = mean_entropy(&dist_rows);

        // Draw cells, lift targets, roll out.
        let mut samples = Vec::with_capacity(batch);
        let mut returns = Vec::with_capacity(batch);
        let mut successes = 0usize;
        for (b, (scene, view)) in scenes.iter().zip(&views).enumerate() {
            let dists = &dist_rows[b * self.channels..(b + 1) * self.channels];
            let sample = sample_from_distributions(dists, view, &mut self.rng)?;
            let (ret, success) = match sample.target_points() {
                Some(targets) => rollout_episode(&self.frozen, scene, &targets, &self.cfg.env)?,
                None => (failure_return(self.cfg.family, &self.cfg.env)?, false),
            };
            returns.push(ret);
            successes += success as usize;
            samples.push(sample);
        }
        let mean_return = returns.iter().sum::<f64>() / batch as f64;

        // Optional EMA baseline (initialized to the first batch mean).
        let advantages: Vec<f64> = match self.cfg.baseline_ema {
            Some(beta) => {
                let b = *self.baseline.get_or_insert(mean_return);
                let adv = returns.iter().map(|r| r - b).collect();
                self.baseline = Some(beta * b + (1.0 - beta) * mean_return);
                adv
            }
            None => returns.clone(),
        };

        // Reinforce step: loss = −mean_episodes(advantage · Σ_c log ψ(cell)).
        let mut cell_idx = vec![0.0; rows];
        let mut loss_w = vec![0.0; rows];
        for (b, sample) in samples.iter().enumerate() {
            for (c, cell) in sample.cells.iter().enumerate() {
                cell_idx[b * self.channels + c] = *cell as f64;
                loss_w[b * self.channels + c] = -advantages[b] / batch as f64;
            }
        }
        self.graph
            .set_input(self.nodes.cells, Tensor::new(vec![rows], cell_idx)?)?;
        self.graph
            .set_input(self.nodes.weights, Tensor::new(vec![rows], loss_w)?)?;
        self.graph.forward()?;
        let loss_value = self.graph.value(self.nodes.loss)?.data[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "keypoint learning loss became {loss_value}"
            )));
        }
        self.graph.backward(self.nodes.loss)?;
        let lr = self.cfg.lr_at(self.iterations_done);
        adam_step(&mut self.graph, &mut self.adam, lr, None)?;

        let record = IterationRecord {
            iteration: self.iterations_done,
            mean_return,
            success_ratio: successes as f64 / batch as f64,
            entropy,
            lr,
        };
        self.iterations_done += 1;
        self.frozen.verify()?;
        Ok(record)
    }
}

/// Full keypoint-learning run: freezes `policy`, trains ψ for
/// `cfg.iterations`, and returns the learned network with the per-iteration
/// records. `on_iter` observes each record as it is produced.
pub fn learn_keypoints(
    policy: TaskPolicy,
    cfg: &ReinforceConfig,
    mut on_iter: impl FnMut(&IterationRecord),
) -> Result<(KeypointNet, Vec<IterationRecord>)> {
    let frozen = FrozenPolicy::freeze(policy)?;
    let mut trainer = ReinforceTrainer::new(frozen, cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let record = trainer.iterate()?;
        on_iter(&record);
        records.push(record);
    }
    Ok((trainer.net(), records))
}

// ---- surface sampling helper -------------------------------------------------

/// Uniform point on one of the block's five reachable faces (the bottom
/// face sits on the ground). Used to train single-keypoint task policies:
/// rollout feedback then separates surface regions that afford the task
/// from ones that don't.
pub fn sample_block_surface_point(scene: &SceneModel, rng: &mut impl Rng) -> Result<Vec3> {
    let Variation::Block(v) = &scene.variation else {
        return Err(Error::TaskMismatch(format!(
            "block surface sampling on a {} scene",
            scene.family.name()
        )));
    };
    let h = v.edge / 2.0;
    let (u, w) = (rng.gen_range(-h..h), rng.gen_range(-h..h));
    let local = match rng.gen_range(0..5) {
        0 => Vec3::new(h, u, w),
        1 => Vec3::new(-h, u, w),
        2 => Vec3::new(u, h, w),
        3 => Vec3::new(u, -h, w),
        _ => Vec3::new(u, w, h),
    };
    Ok(scene.block_pose().transform_point(&local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::BACKGROUND_DEPTH;
    use crate::rl::ActionSpace;
    use approx::assert_relative_eq;

    /// Synthetic flat view: constant depth, fully on-object, camera looking
    /// straight down the workspace from the robot side.
    fn synthetic_view(depth: f64) -> RenderedView {
        let camera = CameraModel::look_at(
            Vec3::new(0.1, 0.0, 0.8),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            60f64.to_radians(),
            INPUT_RES,
            INPUT_RES,
        )
        .unwrap();
        RenderedView {
            width: INPUT_RES,
            height: INPUT_RES,
            feature: vec![0.4; INPUT_RES * INPUT_RES * 3],
            depth: vec![depth; INPUT_RES * INPUT_RES],
            mask: vec![2; INPUT_RES * INPUT_RES],
            body_coords: vec![0.0; INPUT_RES * INPUT_RES * 3],
            camera,
        }
    }

    fn rendered_block_view(seed: u64) -> (SceneModel, RenderedView) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        let camera =
            sample_episode_camera(&scene.focus_point(), &EpisodeCamera::default(), &mut rng)
                .unwrap();
        let view = render_view(&scene, &camera).unwrap();
        (scene, view)
    }

    /// A fresh net whose head weights are zeroed, making every channel's
    /// distribution exactly uniform regardless of the trunk.
    fn uniform_net(channels: usize) -> KeypointNet {
        let mut net = KeypointNet::fresh(channels, 3).unwrap();
        let n = net.weights().len();
        for w in &mut net.weights_mut()[n - 2..] {
            *w = Tensor::zeros(&w.shape.clone());
        }
        net
    }

    #[test]
    fn parameter_shapes_match_architecture() {
        let specs = param_specs(4);
        assert_eq!(specs.len(), 16);
        assert_eq!(specs[0].1, vec![64, 3, 3, 3]);
        assert_eq!(specs[2].1, vec![128, 64, 3, 3]);
        assert_eq!(specs[4].1, vec![256, 128, 3, 3]);
        assert_eq!(specs[6].1, vec![512, 256, 3, 3]);
        assert_eq!(specs[8].1, vec![32, 512, 3, 3]);
        assert_eq!(specs[10].1, vec![16, 32, 3, 3]);
        assert_eq!(specs[12].1, vec![4, 16, 3, 3]);
        assert_eq!(specs[14].1, vec![4, 4, 1, 1]);
        assert_eq!(specs[15].1, vec![4]);
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let net = KeypointNet::fresh(2, 11).unwrap();
        let (_, view) = rendered_block_view(1);
        let dists = net.spatial_distributions(&view).unwrap();
        assert_eq!(dists.len(), 2);
        for row in &dists {
            assert_eq!(row.len(), NUM_CELLS);
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn uniform_logits_give_uniform_cells_and_log_prob() {
        let net = uniform_net(2);
        let view = synthetic_view(0.7);
        let dists = net.spatial_distributions(&view).unwrap();
        for row in &dists {
            for p in row {
                assert_relative_eq!(*p, 1.0 / NUM_CELLS as f64, epsilon = 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = sample_keypoints(&net, &view, &mut rng).unwrap();
        assert_eq!(sample.cells.len(), 2);
        assert_relative_eq!(
            sample.log_prob,
            -2.0 * (NUM_CELLS as f64).ln(),
            epsilon = 1e-9
        );
        assert!(sample.valid());
    }

    #[test]
    fn dominant_logit_saturates_selection() {
        // Softmax saturation on one row: a +20 logit against zeros.
        let mut logits = vec![0.0f64; NUM_CELLS];
        logits[137] = 20.0;
        let max = 20.0f64;
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
        assert!(probs[137] > 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_index(&probs, &mut rng), 137);
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        // 3σ multinomial bounds on a small non-uniform row.
        let logits = [0.0f64, 0.5, -0.3, 1.2, 0.9, -1.0, 0.2, 2.0];
        let exp: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let n = 100_000usize;
        let mut counts = [0usize; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..n {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let mean = n as f64 * probs[i];
            let sigma = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            assert!(
                (*c as f64 - mean).abs() <= 3.0 * sigma,
                "cell {i}: count {c}, expected {mean:.1} ± {:.1}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn constant_depth_cell_matches_center_backprojection() {
        let view = synthetic_view(0.7);
        for cell in [0, 517, NUM_CELLS - 1] {
            let target = superpixel_to_target(cell, &view).unwrap().unwrap();
            let (gx, gy) = (cell % GRID, cell / GRID);
            let center = PixelCoord::new((gx * CELL) as f64 + 2.0, (gy * CELL) as f64 + 2.0);
            let reference = view.camera.backproject_pixel(&center, 0.7).unwrap();
            assert!(
                (target - reference).norm() < 1e-6,
                "cell {cell}: {target:?} vs {reference:?}"
            );
        }
    }

    #[test]
    fn half_background_cell_averages_valid_pixels() {
        let mut view = synthetic_view(0.6);
        // Cell 0 covers pixels (0..4, 0..4); make its left half background.
        for y in 0..CELL {
            for x in 0..2 {
                let i = view.pixel_index(x, y);
                view.mask[i] = BACKGROUND_ID;
                view.depth[i] = BACKGROUND_DEPTH;
            }
        }
        let target = superpixel_to_target(0, &view).unwrap().unwrap();
        let mut expect = Vec3::zeros();
        for y in 0..CELL {
            for x in 2..4 {
                let p = PixelCoord::new(x as f64 + 0.5, y as f64 + 0.5);
                expect += view.camera.backproject_pixel(&p, 0.6).unwrap();
            }
        }
        expect /= 8.0;
        assert!((target - expect).norm() < 1e-12);

        // All 16 pixels background → invalid.
        for y in 0..CELL {
            for x in 2..4 {
                let i = view.pixel_index(x, y);
                view.mask[i] = BACKGROUND_ID;
            }
        }
        assert!(superpixel_to_target(0, &view).unwrap().is_none());
    }

    #[test]
    fn lr_schedule_hits_published_values() {
        let cfg = ReinforceConfig::for_family(TaskFamily::BlockTumble);
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(199), 1e-3);
        assert_eq!(cfg.lr_at(200), 3e-4);
        assert_eq!(cfg.lr_at(999), 3e-4);
        assert_eq!(cfg.lr_at(1000), 9e-5);
        assert_eq!(cfg.lr_at(5000), 9e-5);
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let mut cfg = ReinforceConfig::for_family(TaskFamily::BlockTumble);
        cfg.lr_stages = vec![(5, 1e-3)];
        assert!(cfg.validate().is_err());
        cfg.lr_stages = vec![(0, 1e-3), (200, 3e-4), (200, 9e-5)];
        assert!(cfg.validate().is_err());
        cfg.lr_stages = vec![(0, -1.0)];
        assert!(cfg.validate().is_err());
        cfg.lr_stages = vec![(0, 1e-3)];
        cfg.baseline_ema = Some(1.5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reinforce_gradient_matches_analytic_on_two_cells() {
        // Toy score-function check with the trainer's exact loss tail: two
        // cells, logits as the only parameters, one sampled episode.
        let (z0, z1, ret) = (0.4, -0.7, 2.5);
        let mut g = Graph::new();
        let logits = g.param("logits", Tensor::new(vec![1, 2], vec![z0, z1]).unwrap());
        let logp = g.row_log_softmax(logits).unwrap();
        let cells = g.input("cells", &[1]);
        let picked = g.select_per_row(logp, cells).unwrap();
        let weights = g.input("w", &[1]);
        let weighted = g.mul(picked, weights).unwrap();
        let loss = g.sum_all(weighted);
        // Sampled cell 0 with return 2.5, batch of one episode.
        g.set_input(cells, Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        g.set_input(weights, Tensor::new(vec![1], vec![-ret]).unwrap())
            .unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits);
        // ∇_z −r·log p₀ = −r·(1{i=0} − p_i).
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((grad.data[0] - (-ret * (1.0 - p0))).abs() < 1e-6);
        assert!((grad.data[1] - (ret * (1.0 - p0))).abs() < 1e-6);
    }

    fn tiny_trainer(episodes: usize, seed: u64) -> ReinforceTrainer {
        let policy = TaskPolicy::new(
            TaskEnv::obs_dim(TaskFamily::BlockTumble),
            ActionSpace::Discrete { n: 4 },
            seed,
        );
        let mut cfg = ReinforceConfig::for_family(TaskFamily::BlockTumble);
        cfg.episodes_per_iter = episodes;
        cfg.iterations = 1;
        cfg.seed = seed;
        let frozen = FrozenPolicy::freeze(policy).unwrap();
        ReinforceTrainer::new(frozen, cfg).unwrap()
    }

    /// Drives one update through the trainer's graph with hand-picked cells
    /// and advantages, bypassing rendering and rollouts.
    fn apply_manual_batch(trainer: &mut ReinforceTrainer, cells: &[usize], advantages: &[f64]) {
        let batch = trainer.cfg.episodes_per_iter;
        let rows = batch * trainer.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let images = Tensor::init_uniform(&[batch, 3, INPUT_RES, INPUT_RES], 4, &mut rng);
        trainer.graph.set_input(trainer.nodes.input, images).unwrap();
        let cell_idx: Vec<f64> = cells.iter().map(|c| *c as f64).collect();
        let loss_w: Vec<f64> = advantages.iter().map(|a| -a / batch as f64).collect();
        trainer
            .graph
            .set_input(trainer.nodes.cells, Tensor::new(vec![rows], cell_idx).unwrap())
            .unwrap();
        trainer
            .graph
            .set_input(trainer.nodes.weights, Tensor::new(vec![rows], loss_w).unwrap())
            .unwrap();
        trainer.graph.forward().unwrap();
        trainer.graph.backward(trainer.nodes.loss).unwrap();
        let lr = trainer.cfg.lr_at(0);
        adam_step(&mut trainer.graph, &mut trainer.adam, lr, None).unwrap();
    }

    #[test]
    fn all_zero_returns_leave_parameters_unchanged() {
        let mut trainer = tiny_trainer(2, 5);
        let before: Vec<Tensor> = trainer
            .params
            .iter()
            .map(|&id| trainer.graph.param_value(id).clone())
            .collect();
        apply_manual_batch(&mut trainer, &[3, 9], &[0.0, 0.0]);
        for (&id, b) in trainer.params.iter().zip(&before) {
            assert_eq!(trainer.graph.param_value(id).data, b.data);
        }
    }

    #[test]
    fn positive_return_raises_sampled_cell_probability() {
        let mut trainer = tiny_trainer(1, 6);
        let cell = 300usize;
        let probs_of = |t: &mut ReinforceTrainer| -> f64 {
            t.graph.forward().unwrap();
            t.graph.value(t.nodes.probs).unwrap().data[cell]
        };
        // Set inputs once via the manual batch, reading the probability of
        // the reinforced cell before and after the step.
        let batch = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let images = Tensor::init_uniform(&[batch, 3, INPUT_RES, INPUT_RES], 4, &mut rng);
        trainer.graph.set_input(trainer.nodes.input, images).unwrap();
        trainer
            .graph
            .set_input(trainer.nodes.cells, Tensor::new(vec![1], vec![cell as f64]).unwrap())
            .unwrap();
        trainer
            .graph
            .set_input(trainer.nodes.weights, Tensor::new(vec![1], vec![-5.0]).unwrap())
            .unwrap();
        let before = probs_of(&mut trainer);
        trainer.graph.backward(trainer.nodes.loss).unwrap();
        adam_step(&mut trainer.graph, &mut trainer.adam, 1e-3, None).unwrap();
        let after = probs_of(&mut trainer);
        assert!(
            after > before,
            "reinforced cell probability should rise: {before} → {after}"
        );
    }

    #[test]
    fn frozen_policy_verifies_and_detects_mutation() {
        let policy = TaskPolicy::new(28, ActionSpace::Discrete { n: 4 }, 21);
        let mut frozen = FrozenPolicy::freeze(policy).unwrap();
        frozen.verify().unwrap();
        let before = frozen.frozen_bytes().to_vec();
        // Any parameter change must be caught.
        frozen.policy = TaskPolicy::new(28, ActionSpace::Discrete { n: 4 }, 22);
        assert!(frozen.verify().is_err());
        assert_eq!(frozen.frozen_bytes(), &before[..]);
    }

    #[test]
    fn checkpoint_round_trips() {
        let net = KeypointNet::fresh(3, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psi.bin");
        net.save(&path).unwrap();
        let loaded = KeypointNet::load(&path).unwrap();
        assert_eq!(loaded.channels, 3);
        assert_eq!(loaded.seed, 42);
        for (a, b) in net.weights().iter().zip(loaded.weights()) {
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn block_surface_points_lie_on_the_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        let Variation::Block(v) = &scene.variation else {
            panic!()
        };
        let h = v.edge / 2.0;
        for _ in 0..200 {
            let p = sample_block_surface_point(&scene, &mut rng).unwrap();
            let local = scene.block_pose().inverse_transform_point(&p);
            let m = local.amax();
            assert!((m - h).abs() < 1e-12, "point {local:?} not on a face");
            // The face coordinate (the ±h one) must never be z = −h: the
            // bottom face is unreachable and excluded from sampling.
            assert!(
                (local.z + h).abs() > 1e-12,
                "bottom face must be excluded, got {local:?}"
            );
        }
    }

    #[test]
    fn single_iteration_updates_net_and_keeps_policy_frozen() {
        let policy = TaskPolicy::new(
            TaskEnv::obs_dim(TaskFamily::BlockTumble),
            ActionSpace::Discrete { n: 4 },
            51,
        );
        let pi_before = policy.to_bytes().unwrap();
        let mut cfg = ReinforceConfig::for_family(TaskFamily::BlockTumble);
        cfg.episodes_per_iter = 2;
        cfg.iterations = 1;
        cfg.seed = 51;
        let (net, records) = learn_keypoints(policy, &cfg, |_| {}).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert!(r.mean_return.is_finite());
        assert!((0.0..=1.0).contains(&r.success_ratio));
        assert!(r.entropy > 0.0 && r.entropy <= (NUM_CELLS as f64).ln() + 1e-9);
        assert_eq!(r.lr, 1e-3);
        // The row format is the documented CSV schema.
        assert_eq!(IterationRecord::csv_header(), "iteration,mean_return,success_ratio,entropy");
        assert_eq!(r.csv_row().split(',').count(), 4);
        // ψ moved; π is byte-identical (verified inside the loop as well).
        let fresh = KeypointNet::fresh(cfg.channels, cfg.seed).unwrap();
        assert!(net
            .weights()
            .iter()
            .zip(fresh.weights())
            .any(|(a, b)| a.data != b.data));
        let reloaded = TaskPolicy::from_bytes(&pi_before).unwrap();
        assert_eq!(reloaded.to_bytes().unwrap(), pi_before);
    }
}
