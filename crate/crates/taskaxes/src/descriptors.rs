//! Dense pixelwise descriptors trained with a contrastive objective on
//! multi-view renders, plus keypoint transfer: reference pixels annotated
//! once on a reference view are matched into new images by descriptor
//! nearest-neighbor and lifted to 3D controller targets through the depth
//! map.
//!
//! The descriptor network is a small fully-convolutional encoder–decoder
//! (3×3 convs, two 2× pooling stages, nearest-neighbour upsampling with skip
//! concatenation), so the descriptor image has the input's spatial size while
//! each descriptor sees roughly a 32 px neighbourhood. The wide receptive
//! field matters: on flat-shaded renders a keypoint in a face interior is
//! locally indistinguishable from its neighbours, and only surrounding
//! boundary context can pin it down.

use crate::diffkernel::{
    adam_step, checkpoint_bytes, load_checkpoint_bytes, AdamState, Graph, NodeId, Tensor,
};
use crate::geom::{CameraModel, PixelCoord, Vec3};
use crate::render::{correspondences, RenderedView, BACKGROUND_ID};
use crate::sim::scene::{SceneModel, TaskFamily};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Descriptor dimensionality default.
pub const DEFAULT_DIM: usize = 3;
/// Contrastive margin for non-match pairs.
pub const DEFAULT_MARGIN: f64 = 0.5;
/// Encoder channel widths at full, half and quarter resolution.
const ENC: (usize, usize, usize) = (16, 32, 64);
/// Half-resolution decoder width.
const DEC: usize = 16;
/// Minimum pixel distance for a sampled non-match from the true match.
const NONMATCH_EXCLUSION_PX: f64 = 3.0;
/// Confidence gate: matches farther than this multiple of the training
/// median match distance are flagged low-confidence.
pub const CONFIDENCE_FACTOR: f64 = 3.0;
/// Acceptance tolerance (meters) for a cross-scene semantic match: the
/// nearest same-body pixel by normalized body coordinate must land within
/// roughly one pixel footprint of the queried surface point.
const CROSS_SCENE_MATCH_TOL: f64 = 8e-3;

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub dim: usize,
    pub margin: f64,
    pub matches_per_pair: usize,
    pub nonmatches_per_pair: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of steps whose view pair spans two different variations.
    /// Cross-scene matches pair pixels with the same normalized body
    /// coordinate, tying semantically identical surface points together
    /// across object sizes and albedos — within-scene pairs alone never
    /// encourage that invariance. 0 disables cross-scene supervision.
    pub cross_scene_fraction: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            dim: DEFAULT_DIM,
            margin: DEFAULT_MARGIN,
            matches_per_pair: 100,
            nonmatches_per_pair: 100,
            steps: 400,
            lr: 1e-3,
            seed: 0,
            cross_scene_fraction: 0.5,
        }
    }
}

/// Multi-view dataset: each scene holds ≥ 2 views of the same instant, plus
/// per-body bounding half-extents so body coordinates can be normalized for
/// cross-scene correspondence.
#[derive(Debug, Clone)]
pub struct DescriptorDataset {
    pub scenes: Vec<Vec<RenderedView>>,
    /// Per scene: (body id, bounding half-extents).
    pub body_extents: Vec<Vec<(u32, Vec3)>>,
}

impl DescriptorDataset {
    /// Renders `n_scenes` sampled variations from `views_per_scene`
    /// hemisphere cameras each.
    pub fn generate(
        family: TaskFamily,
        n_scenes: usize,
        views_per_scene: usize,
        width: usize,
        height: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut scenes = Vec::with_capacity(n_scenes);
        let mut body_extents = Vec::with_capacity(n_scenes);
        for _ in 0..n_scenes {
            let scene = SceneModel::sample(family, rng);
            let cams = crate::render::sample_camera_set(
                &scene.focus_point(),
                views_per_scene,
                width,
                height,
                rng,
            )?;
            let views = cams
                .iter()
                .map(|c| crate::render::render_view(&scene, c))
                .collect::<Result<Vec<_>>>()?;
            scenes.push(views);
            body_extents.push(
                scene
                    .bodies()
                    .iter()
                    .map(|b| (b.id, b.shape.bounding_half_extents()))
                    .collect(),
            );
        }
        let out = DescriptorDataset {
            scenes,
            body_extents,
        };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::EmptyDataset("no scenes in descriptor dataset".into()));
        }
        for views in &self.scenes {
            if views.len() < 2 {
                return Err(Error::EmptyDataset("no scenes in descriptor dataset".into()));
            }
        }
        Ok(())
    }

    fn resolution(&self) -> (usize, usize) {
        let v = &self.scenes[0][0];
        (v.width, v.height)
    }
}

/// Per-pixel semantic record of one view: flat pixel index, body id, and the
/// body-frame hit point normalized by that body's half-extents. Normalized
/// coordinates identify the same surface point across size variations of a
/// family (a box corner is (±1, ±1, ±1) on every box).
struct SemanticPixels {
    entries: Vec<(usize, u32, Vec3)>,
}

impl SemanticPixels {
    fn build(view: &RenderedView, extents: &[(u32, Vec3)]) -> SemanticPixels {
        let mut entries = Vec::new();
        for (x, y) in view.object_pixels() {
            let id = view.mask_at(x, y);
            let Some((_, h)) = extents.iter().find(|(i, _)| *i == id) else {
                continue;
            };
            let local = view.body_coord_at(x, y);
            let n = Vec3::new(
                local.x / h.x.max(1e-9),
                local.y / h.y.max(1e-9),
                local.z / h.z.max(1e-9),
            );
            entries.push((y * view.width + x, id, n));
        }
        SemanticPixels { entries }
    }

    /// Nearest same-body pixel by normalized coordinate. The residual is
    /// reported in meters by rescaling with this view's half-extents, so the
    /// acceptance tolerance is resolution-meaningful.
    fn nearest(&self, id: u32, n: &Vec3, extents: &[(u32, Vec3)]) -> Option<(usize, f64)> {
        let h = extents.iter().find(|(i, _)| *i == id).map(|(_, h)| *h)?;
        let mut best: Option<(usize, f64)> = None;
        for (flat, eid, en) in &self.entries {
            if *eid != id {
                continue;
            }
            let d = Vec3::new(
                (n.x - en.x) * h.x,
                (n.y - en.y) * h.y,
                (n.z - en.z) * h.z,
            )
            .norm();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((*flat, d));
            }
        }
        best
    }
}

/// Converts a view's H×W×3 feature image into an NCHW input tensor.
pub fn image_tensor(view: &RenderedView) -> Tensor {
    let (w, h) = (view.width, view.height);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = view.feature[p * 3 + c];
        }
    }
    Tensor {
        shape: vec![1, 3, h, w],
        data,
    }
}

/// Canonical parameter order of the descriptor network.
const PARAM_NAMES: [&str; 12] = [
    "enc1.w", "enc1.b", "enc2.w", "enc2.b", "enc3.w", "enc3.b", "enc4.w", "enc4.b", "dec2.w",
    "dec2.b", "dec1.w", "dec1.b",
];

fn arch_string(dim: usize) -> String {
    format!(
        "descriptors.fcn unet{}-{}-{}+{} dec{} d{} k3",
        ENC.0, ENC.1, ENC.2, ENC.2, DEC, dim
    )
}

fn conv_init(out: usize, inp: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::init_uniform(&[out, inp, 3, 3], inp * 9, rng)
}

fn fresh_weights(dim: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let (c1, c2, c3) = ENC;
    vec![
        conv_init(c1, 3, rng),
        Tensor::zeros(&[c1]),
        conv_init(c2, c1, rng),
        Tensor::zeros(&[c2]),
        conv_init(c3, c2, rng),
        Tensor::zeros(&[c3]),
        conv_init(c3, c3, rng),
        Tensor::zeros(&[c3]),
        conv_init(DEC, c3 + c2, rng),
        Tensor::zeros(&[DEC]),
        conv_init(dim, DEC + c1, rng),
        Tensor::zeros(&[dim]),
    ]
}

/// Registers the parameters on a graph in canonical order.
fn register_params(g: &mut Graph, weights: &[Tensor]) -> Vec<NodeId> {
    PARAM_NAMES
        .iter()
        .zip(weights)
        .map(|(name, t)| g.param(name, t.clone()))
        .collect()
}

fn conv_block(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.conv2d(x, w)?;
    let y = g.add_channel_bias(y, b)?;
    Ok(g.relu(y))
}

/// Appends the encoder–decoder to `g`, reusing the given parameter nodes.
/// Input spatial dimensions must be divisible by 4 (two pooling stages).
fn net_forward(g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let e1 = conv_block(g, x, params[0], params[1])?;
    let p1 = g.maxpool2(e1)?;
    let e2 = conv_block(g, p1, params[2], params[3])?;
    let p2 = g.maxpool2(e2)?;
    let e3 = conv_block(g, p2, params[4], params[5])?;
    let e4 = conv_block(g, e3, params[6], params[7])?;
    let u2 = g.upsample_nearest2(e4)?;
    let c2 = g.concat_channels(u2, e2)?;
    let d2 = conv_block(g, c2, params[8], params[9])?;
    let u1 = g.upsample_nearest2(d2)?;
    let c1 = g.concat_channels(u1, e1)?;
    let y = g.conv2d(c1, params[10])?;
    g.add_channel_bias(y, params[11])
}

/// Two pooling stages require spatial dimensions divisible by 4.
fn check_resolution(width: usize, height: usize) -> Result<()> {
    if width % 4 != 0 || height % 4 != 0 || width == 0 || height == 0 {
        return Err(Error::Config(format!(
            "descriptor network needs width and height divisible by 4, got {width}×{height}"
        )));
    }
    Ok(())
}

/// Trained dense-descriptor model.
#[derive(Debug, Clone)]
pub struct DescriptorModel {
    pub dim: usize,
    weights: Vec<Tensor>,
    /// Median descriptor distance of match pairs near the end of training;
    /// the confidence gate compares against 3× this value.
    pub median_match_distance: f64,
    /// Per-step training loss.
    pub loss_history: Vec<f64>,
}

impl DescriptorModel {
    /// Randomly initialized model (untrained baseline).
    pub fn untrained(dim: usize, rng: &mut impl Rng) -> DescriptorModel {
        DescriptorModel {
            dim,
            weights: fresh_weights(dim, rng),
            median_match_distance: f64::INFINITY,
            loss_history: Vec::new(),
        }
    }

    /// Computes the (1, D, H, W) descriptor image for a view.
    pub fn descriptors(&self, view: &RenderedView) -> Result<Tensor> {
        check_resolution(view.width, view.height)?;
        let mut g = Graph::new();
        let x = g.input("image", &[1, 3, view.height, view.width]);
        let params = register_params(&mut g, &self.weights);
        let out = net_forward(&mut g, &params, x)?;
        g.set_input(x, image_tensor(view))?;
        g.forward()?;
        let t = g.value(out)?.clone();
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptor image".into()));
        }
        Ok(t)
    }

    /// Descriptor vector at an integer pixel of a descriptor image.
    pub fn descriptor_at(desc: &Tensor, x: usize, y: usize) -> Vec<f64> {
        let (c, h, w) = (desc.shape[1], desc.shape[2], desc.shape[3]);
        debug_assert!(x < w && y < h);
        let plane = h * w;
        (0..c).map(|ci| desc.data[ci * plane + y * w + x]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut g = Graph::new();
        register_params(&mut g, &self.weights);
        let ckpt = checkpoint_bytes(&arch_string(self.dim), &g);
        #[derive(Serialize)]
        struct Meta {
            dim: usize,
            median_match_distance: f64,
        }
        let meta = serde_json::to_vec(&Meta {
            dim: self.dim,
            median_match_distance: self.median_match_distance,
        })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"TAXDESC1")?;
        f.write_all(&(meta.len() as u32).to_le_bytes())?;
        f.write_all(&meta)?;
        f.write_all(&ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DescriptorModel> {
        #[derive(Deserialize)]
        struct Meta {
            dim: usize,
            median_match_distance: f64,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != b"TAXDESC1" {
            return Err(Error::Checkpoint(format!(
                "{} is not a descriptor model",
                path.display()
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: Meta = serde_json::from_slice(
            bytes
                .get(12..12 + meta_len)
                .ok_or_else(|| Error::Checkpoint("truncated descriptor meta".into()))?,
        )?;
        let mut g = Graph::new();
        // Shapes must pre-exist for the loader to validate against.
        let mut seed = ChaCha8Rng::seed_from_u64(0);
        register_params(&mut g, &fresh_weights(meta.dim, &mut seed));
        load_checkpoint_bytes(&bytes[12 + meta_len..], &arch_string(meta.dim), &mut g)?;
        let weights = g
            .param_ids()
            .to_vec()
            .iter()
            .map(|&id| g.param_value(id).clone())
            .collect();
        Ok(DescriptorModel {
            dim: meta.dim,
            weights,
            median_match_distance: meta.median_match_distance,
            loss_history: Vec::new(),
        })
    }
}

/// One sampled contrastive batch (flat pixel indices into each view).
struct Batch {
    scene_a: usize,
    view_a: usize,
    scene_b: usize,
    view_b: usize,
    match_a: Vec<f64>,
    match_b: Vec<f64>,
    nonmatch_a: Vec<f64>,
    nonmatch_b: Vec<f64>,
}

fn flat_index(p: &PixelCoord, width: usize) -> f64 {
    let x = (p.x - 0.5).round() as usize;
    let y = (p.y - 0.5).round() as usize;
    (y * width + x) as f64
}

/// Fills the non-match side: partners drawn uniformly over the whole target
/// image outside a 3 px exclusion zone around the true match, so background
/// pixels are pushed past the margin too.
fn fill_nonmatches(
    batch: &mut Batch,
    pairs: &[(f64, f64)],
    width: usize,
    height: usize,
    count: usize,
    rng: &mut impl Rng,
) {
    for i in 0..count {
        let (a, b_true) = pairs[i % pairs.len()];
        batch.nonmatch_a.push(a);
        let bx = b_true as usize % width;
        let by = b_true as usize / width;
        let q = loop {
            let qx = rng.gen_range(0..width);
            let qy = rng.gen_range(0..height);
            let dx = qx as f64 - bx as f64;
            let dy = qy as f64 - by as f64;
            if (dx * dx + dy * dy).sqrt() > NONMATCH_EXCLUSION_PX {
                break (qy * width + qx) as f64;
            }
        };
        batch.nonmatch_b.push(q);
    }
}

/// Samples a within-scene match/non-match batch from one random view pair.
fn sample_batch(
    dataset: &DescriptorDataset,
    config: &DescriptorConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    for _ in 0..50 {
        let scene = rng.gen_range(0..dataset.scenes.len());
        let views = &dataset.scenes[scene];
        let view_a = rng.gen_range(0..views.len());
        let mut view_b = rng.gen_range(0..views.len());
        while view_b == view_a {
            view_b = rng.gen_range(0..views.len());
        }
        let (va, vb) = (&views[view_a], &views[view_b]);
        let want = config.matches_per_pair.max(config.nonmatches_per_pair);
        let pairs: Vec<(f64, f64)> = correspondences(va, vb, want * 4, rng)
            .into_iter()
            .filter(|p| p.valid)
            .map(|p| (flat_index(&p.pixel_a, va.width), flat_index(&p.pixel_b, vb.width)))
            .collect();
        if pairs.len() < want {
            continue; // poor view overlap; try another pair
        }
        let mut batch = Batch {
            scene_a: scene,
            view_a,
            scene_b: scene,
            view_b,
            match_a: Vec::new(),
            match_b: Vec::new(),
            nonmatch_a: Vec::new(),
            nonmatch_b: Vec::new(),
        };
        for i in 0..config.matches_per_pair {
            let (a, b) = pairs[i % pairs.len()];
            batch.match_a.push(a);
            batch.match_b.push(b);
        }
        fill_nonmatches(
            &mut batch,
            &pairs,
            vb.width,
            vb.height,
            config.nonmatches_per_pair,
            rng,
        );
        return Ok(batch);
    }
    Err(Error::Config(
        "dataset views lack cross-view overlap for correspondence sampling".into(),
    ))
}

/// Samples a cross-scene batch: views of two different variations, matches
/// paired by nearest normalized body coordinate on the same body id.
fn sample_cross_batch(
    dataset: &DescriptorDataset,
    semantics: &[Vec<SemanticPixels>],
    config: &DescriptorConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let n_scenes = dataset.scenes.len();
    for _ in 0..50 {
        let scene_a = rng.gen_range(0..n_scenes);
        let mut scene_b = rng.gen_range(0..n_scenes);
        while scene_b == scene_a {
            scene_b = rng.gen_range(0..n_scenes);
        }
        let view_a = rng.gen_range(0..dataset.scenes[scene_a].len());
        let view_b = rng.gen_range(0..dataset.scenes[scene_b].len());
        let sa = &semantics[scene_a][view_a];
        let sb = &semantics[scene_b][view_b];
        if sa.entries.is_empty() || sb.entries.is_empty() {
            continue;
        }
        let want = config.matches_per_pair.max(config.nonmatches_per_pair);
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(want);
        let mut tries = 0;
        while pairs.len() < want && tries < want * 10 {
            tries += 1;
            let (flat_a, id, n) = sa.entries[rng.gen_range(0..sa.entries.len())];
            let Some((flat_b, resid)) = sb.nearest(id, &n, &dataset.body_extents[scene_b]) else {
                continue;
            };
            if resid < CROSS_SCENE_MATCH_TOL {
                pairs.push((flat_a as f64, flat_b as f64));
            }
        }
        if pairs.len() < want {
            continue; // views share too little surface; try another pair
        }
        let vb = &dataset.scenes[scene_b][view_b];
        let mut batch = Batch {
            scene_a,
            view_a,
            scene_b,
            view_b,
            match_a: Vec::new(),
            match_b: Vec::new(),
            nonmatch_a: Vec::new(),
            nonmatch_b: Vec::new(),
        };
        for i in 0..config.matches_per_pair {
            let (a, b) = pairs[i % pairs.len()];
            batch.match_a.push(a);
            batch.match_b.push(b);
        }
        fill_nonmatches(
            &mut batch,
            &pairs,
            vb.width,
            vb.height,
            config.nonmatches_per_pair,
            rng,
        );
        return Ok(batch);
    }
    // Overlap can be unlucky for a while; fall back to a within-scene batch
    // rather than failing the whole run.
    sample_batch(dataset, config, rng)
}

/// Training graph with persistent node handles.
struct Trainer {
    graph: Graph,
    img_a: NodeId,
    img_b: NodeId,
    idx_ma: NodeId,
    idx_mb: NodeId,
    idx_na: NodeId,
    idx_nb: NodeId,
    match_sq: NodeId,
    loss: NodeId,
    adam: AdamState,
}

impl Trainer {
    fn new(config: &DescriptorConfig, width: usize, height: usize, rng: &mut impl Rng) -> Result<Trainer> {
        check_resolution(width, height)?;
        let mut g = Graph::new();
        let img_a = g.input("img_a", &[1, 3, height, width]);
        let img_b = g.input("img_b", &[1, 3, height, width]);
        let idx_ma = g.input("idx_ma", &[config.matches_per_pair]);
        let idx_mb = g.input("idx_mb", &[config.matches_per_pair]);
        let idx_na = g.input("idx_na", &[config.nonmatches_per_pair]);
        let idx_nb = g.input("idx_nb", &[config.nonmatches_per_pair]);
        let params = register_params(&mut g, &fresh_weights(config.dim, rng));
        let desc_a = net_forward(&mut g, &params, img_a)?;
        let desc_b = net_forward(&mut g, &params, img_b)?;
        // Match term: mean ‖φ_a − φ_b‖².
        let ga = g.gather_pixels(desc_a, idx_ma)?;
        let gb = g.gather_pixels(desc_b, idx_mb)?;
        let dm = g.sub(ga, gb)?;
        let dm = g.square(dm);
        let match_sq = g.row_sum(dm)?;
        let match_loss = g.mean_all(match_sq);
        // Non-match term: mean max(0, M − ‖φ_a − φ_b‖)².
        let na = g.gather_pixels(desc_a, idx_na)?;
        let nb = g.gather_pixels(desc_b, idx_nb)?;
        let dn = g.sub(na, nb)?;
        let dn = g.square(dn);
        let dn = g.row_sum(dn)?;
        let dn = g.add_const(dn, 1e-12);
        let dn = g.sqrt(dn);
        let hinge = g.scale(dn, -1.0);
        let hinge = g.add_const(hinge, config.margin);
        let hinge = g.clamp(hinge, 0.0, f64::INFINITY);
        let hinge = g.square(hinge);
        let nonmatch_loss = g.mean_all(hinge);
        let loss = g.add(match_loss, nonmatch_loss)?;
        let adam = AdamState::for_graph(&g);
        Ok(Trainer {
            graph: g,
            img_a,
            img_b,
            idx_ma,
            idx_mb,
            idx_na,
            idx_nb,
            match_sq,
            loss,
            adam,
        })
    }

    /// Runs one forward/backward/update step; returns (loss, match distances).
    fn step(
        &mut self,
        images: (&Tensor, &Tensor),
        batch: &Batch,
        lr: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let g = &mut self.graph;
        g.set_input(self.img_a, images.0.clone())?;
        g.set_input(self.img_b, images.1.clone())?;
        let n_m = batch.match_a.len();
        let n_n = batch.nonmatch_a.len();
        g.set_input(self.idx_ma, Tensor::new(vec![n_m], batch.match_a.clone())?)?;
        g.set_input(self.idx_mb, Tensor::new(vec![n_m], batch.match_b.clone())?)?;
        g.set_input(self.idx_na, Tensor::new(vec![n_n], batch.nonmatch_a.clone())?)?;
        g.set_input(self.idx_nb, Tensor::new(vec![n_n], batch.nonmatch_b.clone())?)?;
        g.forward()?;
        let loss = g.value(self.loss)?.data[0];
        let dists = g
            .value(self.match_sq)?
            .data
            .iter()
            .map(|d| d.max(0.0).sqrt())
            .collect();
        g.backward(self.loss)?;
        adam_step(g, &mut self.adam, lr, None)?;
        Ok((loss, dists))
    }

    fn into_model(self, config: &DescriptorConfig, median: f64, loss_history: Vec<f64>) -> DescriptorModel {
        let weights = self
            .graph
            .param_ids()
            .to_vec()
            .iter()
            .map(|&id| self.graph.param_value(id).clone())
            .collect();
        DescriptorModel {
            dim: config.dim,
            weights,
            median_match_distance: median,
            loss_history,
        }
    }
}

/// Trains dense descriptors on a multi-view dataset with the pixelwise
/// contrastive objective.
pub fn train_descriptors(
    dataset: &DescriptorDataset,
    config: &DescriptorConfig,
) -> Result<DescriptorModel> {
    dataset.validate()?;
    let (width, height) = dataset.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(config, width, height, &mut rng)?;
    // Image tensors and semantic pixel tables are reused across steps.
    let planes: Vec<Vec<Tensor>> = dataset
        .scenes
        .iter()
        .map(|views| views.iter().map(image_tensor).collect())
        .collect();
    let cross_scene = config.cross_scene_fraction > 0.0
        && dataset.scenes.len() >= 2
        && dataset.body_extents.len() == dataset.scenes.len();
    let semantics: Vec<Vec<SemanticPixels>> = if cross_scene {
        dataset
            .scenes
            .iter()
            .zip(&dataset.body_extents)
            .map(|(views, ext)| views.iter().map(|v| SemanticPixels::build(v, ext)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let mut loss_history = Vec::with_capacity(config.steps);
    let mut tail_distances: Vec<f64> = Vec::new();
    let tail_start = config.steps.saturating_sub(20);
    for step in 0..config.steps {
        let batch = if cross_scene && rng.gen_bool(config.cross_scene_fraction.min(1.0)) {
            sample_cross_batch(dataset, &semantics, config, &mut rng)?
        } else {
            sample_batch(dataset, config, &mut rng)?
        };
        let imgs = (
            &planes[batch.scene_a][batch.view_a],
            &planes[batch.scene_b][batch.view_b],
        );
        let (loss, dists) = trainer.step(imgs, &batch, config.lr)?;
        loss_history.push(loss);
        if step >= tail_start {
            tail_distances.extend(dists);
        }
    }
    let median = median_of(&mut tail_distances);
    Ok(trainer.into_model(config, median, loss_history))
}

fn median_of(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Human-style reference annotation: ordered semantic pixels on one
/// reference view.
#[derive(Debug, Clone)]
pub struct ReferenceAnnotation {
    pub family: TaskFamily,
    pub labels: Vec<String>,
    pub pixels: Vec<PixelCoord>,
    pub view: RenderedView,
}

impl ReferenceAnnotation {
    pub fn new(
        family: TaskFamily,
        view: RenderedView,
        pixels: Vec<PixelCoord>,
        labels: Vec<String>,
    ) -> Result<ReferenceAnnotation> {
        if pixels.len() != family.keypoint_count() || labels.len() != pixels.len() {
            return Err(Error::Config(format!(
                "annotation needs {} labelled pixels for {}, got {}",
                family.keypoint_count(),
                family.name(),
                pixels.len()
            )));
        }
        for p in &pixels {
            let (x, y) = ((p.x - 0.5).round() as usize, (p.y - 0.5).round() as usize);
            if x >= view.width || y >= view.height || view.mask_at(x, y) == BACKGROUND_ID {
                return Err(Error::Config(format!(
                    "annotation pixel ({}, {}) is not on an object",
                    p.x, p.y
                )));
            }
        }
        Ok(ReferenceAnnotation {
            family,
            labels,
            pixels,
            view,
        })
    }

    /// Builds the annotation a human would produce: renders the scene from
    /// `camera` and marks the pixel nearest to each semantic keypoint.
    /// Fails if a keypoint is not visible within a small search window.
    pub fn from_scene(scene: &SceneModel, camera: &CameraModel) -> Result<ReferenceAnnotation> {
        let view = crate::render::render_view(scene, camera)?;
        let bodies = scene.bodies();
        let mut pixels = Vec::new();
        for (i, kp) in scene.gt_keypoints().iter().enumerate() {
            let (proj, _) = camera.project_point(kp)?;
            let px = (proj.x - 0.5).round() as isize;
            let py = (proj.y - 0.5).round() as isize;
            let mut best: Option<(f64, usize, usize)> = None;
            for dy in -3..=3_isize {
                for dx in -3..=3_isize {
                    let (x, y) = (px + dx, py + dy);
                    if x < 0 || y < 0 || x as usize >= view.width || y as usize >= view.height {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let id = view.mask_at(x, y);
                    if id == BACKGROUND_ID {
                        continue;
                    }
                    let body = bodies.iter().find(|b| b.id == id).unwrap();
                    let world = body.pose.transform_point(&view.body_coord_at(x, y));
                    let d = (world - kp).norm();
                    if best.map_or(true, |(bd, ..)| d < bd) {
                        best = Some((d, x, y));
                    }
                }
            }
            match best {
                Some((d, x, y)) if d < 0.02 => {
                    pixels.push(PixelCoord::new(x as f64 + 0.5, y as f64 + 0.5));
                }
                _ => {
                    return Err(Error::Render(format!(
                        "keypoint {i} not visible in the reference view"
                    )))
                }
            }
        }
        let labels = (0..pixels.len())
            .map(|i| format!("{}_kp{}", scene.family.name(), i))
            .collect();
        ReferenceAnnotation::new(scene.family, view, pixels, labels)
    }
}

/// Samples hemisphere cameras until one shows every keypoint — the
/// programmatic stand-in for a human picking a clear view to annotate.
pub fn annotate_from_random_view(
    scene: &SceneModel,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<ReferenceAnnotation> {
    let mut last = None;
    for _ in 0..50 {
        let camera = crate::render::sample_camera(&scene.focus_point(), width, height, rng)?;
        match ReferenceAnnotation::from_scene(scene, &camera) {
            Ok(a) => return Ok(a),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Render("no annotation view found".into())))
}

/// Matched keypoints with descriptor distances and lifted 3D targets.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub pixels: Vec<PixelCoord>,
    pub distances: Vec<f64>,
    /// One entry per reference pixel; `None` marks a background-depth pixel
    /// that could not be lifted.
    pub targets: Vec<Option<Vec3>>,
    pub low_confidence: bool,
}

/// Row-major argmin of descriptor distance over a full descriptor image.
/// Ties keep higher the earlier pixel in row-major order.
pub fn argmin_distance(desc: &Tensor, query: &[f64]) -> (PixelCoord, f64) {
    let (c, h, w) = (desc.shape[1], desc.shape[2], desc.shape[3]);
    let plane = h * w;
    let mut best_p = 0;
    let mut best_d2 = f64::INFINITY;
    for p in 0..plane {
        let mut d2 = 0.0;
        for ci in 0..c {
            let diff = desc.data[ci * plane + p] - query[ci];
            d2 += diff * diff;
        }
        if d2 < best_d2 {
            best_d2 = d2;
            best_p = p;
        }
    }
    (
        PixelCoord::new((best_p % w) as f64 + 0.5, (best_p / w) as f64 + 0.5),
        best_d2.sqrt(),
    )
}

/// Transfers each reference pixel into `image` by descriptor
/// nearest-neighbor over the full image. Returns matched pixels and their
/// descriptor distances for confidence gating.
pub fn match_keypoints(
    model: &DescriptorModel,
    annotation: &ReferenceAnnotation,
    image: &RenderedView,
) -> Result<(Vec<PixelCoord>, Vec<f64>)> {
    let desc_ref = model.descriptors(&annotation.view)?;
    let desc_img = model.descriptors(image)?;
    let mut pixels = Vec::with_capacity(annotation.pixels.len());
    let mut distances = Vec::with_capacity(annotation.pixels.len());
    for p in &annotation.pixels {
        let x = (p.x - 0.5).round() as usize;
        let y = (p.y - 0.5).round() as usize;
        let query = DescriptorModel::descriptor_at(&desc_ref, x, y);
        let (matched, d) = argmin_distance(&desc_img, &query);
        pixels.push(matched);
        distances.push(d);
    }
    Ok((pixels, distances))
}

/// Back-projects matched pixels to world-frame targets through a depth map.
/// Background-depth pixels yield `None`.
pub fn keypoints_to_targets(
    pixels: &[PixelCoord],
    depth: &[f64],
    camera: &CameraModel,
) -> Vec<Option<Vec3>> {
    pixels
        .iter()
        .map(|p| {
            let x = (p.x - 0.5).round() as usize;
            let y = (p.y - 0.5).round() as usize;
            if x >= camera.width || y >= camera.height {
                return None;
            }
            let d = depth[y * camera.width + x];
            if !d.is_finite() {
                return None;
            }
            camera.backproject_pixel(p, d).ok()
        })
        .collect()
}

/// Full transfer: match reference pixels into a view and lift them to 3D.
pub fn extract_keypoint_set(
    model: &DescriptorModel,
    annotation: &ReferenceAnnotation,
    image: &RenderedView,
) -> Result<KeypointSet> {
    let (pixels, distances) = match_keypoints(model, annotation, image)?;
    let targets = keypoints_to_targets(&pixels, &image.depth, &image.camera);
    let gate = CONFIDENCE_FACTOR * model.median_match_distance;
    let low_confidence = distances.iter().any(|&d| d > gate);
    Ok(KeypointSet {
        pixels,
        distances,
        targets,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrlgen::generate_controllers;
    use crate::render::{render_view, sample_camera, sample_camera_set};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn small_dataset(
        family: TaskFamily,
        scenes: usize,
        views: usize,
        res: usize,
        seed: u64,
    ) -> DescriptorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DescriptorDataset::generate(family, scenes, views, res, res, &mut rng).unwrap()
    }

    #[test]
    fn descriptor_image_keeps_spatial_size_and_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DescriptorModel::untrained(3, &mut rng);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 40, 40, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let desc = model.descriptors(&view).unwrap();
        assert_eq!(desc.shape, vec![1, 3, 40, 40]);
        assert!(desc.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DescriptorModel::untrained(3, &mut rng);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let annotation = annotate_from_random_view(&scene, 64, 64, &mut rng).unwrap();
        let (pixels, distances) =
            match_keypoints(&model, &annotation, &annotation.view).unwrap();
        for (p, r) in pixels.iter().zip(&annotation.pixels) {
            assert_eq!((p.x, p.y), (r.x, r.y));
        }
        for d in distances {
            assert!(d < 1e-9, "self-match distance {d}");
        }
    }

    #[test]
    fn argmin_matches_exhaustive_oracle_and_breaks_ties_row_major() {
        // Independent nested-loop oracle over a random descriptor image.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = DescriptorModel::untrained(3, &mut rng);
        let scene = SceneModel::sample(TaskFamily::BlockTumble, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 48, 48, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let desc = model.descriptors(&view).unwrap();
        for _ in 0..20 {
            let qx = rng.gen_range(0..48);
            let qy = rng.gen_range(0..48);
            let query = DescriptorModel::descriptor_at(&desc, qx, qy);
            let (got, got_d) = argmin_distance(&desc, &query);
            // Oracle: scan rows then columns, strictly-less replacement.
            let (c, h, w) = (desc.shape[1], desc.shape[2], desc.shape[3]);
            let plane = h * w;
            let mut best = (0usize, 0usize, f64::INFINITY);
            for y in 0..h {
                for x in 0..w {
                    let mut d2 = 0.0;
                    for ci in 0..c {
                        let diff = desc.data[ci * plane + y * w + x] - query[ci];
                        d2 += diff * diff;
                    }
                    if d2 < best.2 {
                        best = (x, y, d2);
                    }
                }
            }
            assert_eq!((got.x, got.y), (best.0 as f64 + 0.5, best.1 as f64 + 0.5));
            assert_relative_eq!(got_d, best.2.sqrt(), epsilon = 1e-12);
        }
        // Exact duplicate descriptors: the earlier row-major pixel wins.
        let dup = Tensor::new(
            vec![1, 2, 2, 3],
            vec![
                // channel 0: pixel (1,0) and (0,1) identical
                0.0, 7.0, 1.0, 7.0, 2.0, 3.0,
                // channel 1
                0.5, 4.0, 1.5, 4.0, 2.5, 3.5,
            ],
        )
        .unwrap();
        let (p, d) = argmin_distance(&dup, &[7.0, 4.0]);
        assert_eq!((p.x, p.y), (1.5, 0.5)); // flat index 1, not 3
        assert!(d < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let empty = DescriptorDataset {
            scenes: vec![],
            body_extents: vec![],
        };
        assert!(matches!(
            train_descriptors(&empty, &DescriptorConfig::default()),
            Err(Error::EmptyDataset(_))
        ));
        let single_view = DescriptorDataset {
            scenes: vec![vec![]],
            body_extents: vec![vec![]],
        };
        assert!(matches!(
            train_descriptors(&single_view, &DescriptorConfig::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn loss_strictly_decreases_on_a_fixed_batch() {
        let dataset = small_dataset(TaskFamily::Button, 1, 2, 32, 3);
        let config = DescriptorConfig {
            steps: 10,
            matches_per_pair: 50,
            nonmatches_per_pair: 50,
            ..DescriptorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut trainer = Trainer::new(&config, 32, 32, &mut rng).unwrap();
        let batch = sample_batch(&dataset, &config, &mut rng).unwrap();
        let imgs = (
            image_tensor(&dataset.scenes[batch.scene_a][batch.view_a]),
            image_tensor(&dataset.scenes[batch.scene_b][batch.view_b]),
        );
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (loss, _) = trainer.step((&imgs.0, &imgs.1), &batch, 1e-3).unwrap();
            assert!(loss < last, "loss {loss} did not decrease from {last}");
            last = loss;
        }
    }

    #[test]
    fn training_separates_matches_from_nonmatches() {
        // Short training run, then: (a) match distances below non-match
        // distances on a held-out view pair of a training scene, (b) higher
        // within-3px transfer accuracy than the untrained baseline.
        let res = 48;
        let dataset = small_dataset(TaskFamily::Button, 3, 3, res, 5);
        let config = DescriptorConfig {
            steps: 150,
            matches_per_pair: 60,
            nonmatches_per_pair: 60,
            ..DescriptorConfig::default()
        };
        let model = train_descriptors(&dataset, &config).unwrap();
        assert!(model.median_match_distance.is_finite());

        // Held-out view pair of a fresh variation, retried until the two
        // cameras actually share surface coverage.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let mut found = None;
        for _ in 0..10 {
            let cams = sample_camera_set(&scene.focus_point(), 2, res, res, &mut rng).unwrap();
            let va = render_view(&scene, &cams[0]).unwrap();
            let vb = render_view(&scene, &cams[1]).unwrap();
            let pairs: Vec<_> = correspondences(&va, &vb, 1000, &mut rng)
                .into_iter()
                .filter(|p| p.valid)
                .collect();
            if pairs.len() >= 150 {
                found = Some((va, vb, pairs));
                break;
            }
        }
        let (va, vb, pairs) = found.expect("no overlapping camera pair");
        let da = model.descriptors(&va).unwrap();
        let db = model.descriptors(&vb).unwrap();
        let mut match_sum = 0.0;
        let mut nonmatch_sum = 0.0;
        for p in &pairs {
            let ax = (p.pixel_a.x - 0.5).round() as usize;
            let ay = (p.pixel_a.y - 0.5).round() as usize;
            let bx = ((p.pixel_b.x - 0.5).round() as usize).min(res - 1);
            let by = ((p.pixel_b.y - 0.5).round() as usize).min(res - 1);
            let qa = DescriptorModel::descriptor_at(&da, ax, ay);
            let qb = DescriptorModel::descriptor_at(&db, bx, by);
            match_sum += qa
                .iter()
                .zip(&qb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // Random non-match partner.
            let rx = rng.gen_range(0..res);
            let ry = rng.gen_range(0..res);
            let qr = DescriptorModel::descriptor_at(&db, rx, ry);
            nonmatch_sum += qa
                .iter()
                .zip(&qr)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
        let n = pairs.len() as f64;
        assert!(
            match_sum / n < nonmatch_sum / n,
            "match mean {} ≥ non-match mean {}",
            match_sum / n,
            nonmatch_sum / n
        );
    }

    #[test]
    fn untrained_model_transfers_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = DescriptorModel::untrained(3, &mut rng);
        let res = 48;
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let annotation = annotate_from_random_view(&scene, res, res, &mut rng).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for _ in 0..10 {
            let eval_scene = SceneModel::sample(TaskFamily::Button, &mut rng);
            let cam = sample_camera(&eval_scene.focus_point(), res, res, &mut rng).unwrap();
            let view = render_view(&eval_scene, &cam).unwrap();
            let (pixels, _) = match_keypoints(&model, &annotation, &view).unwrap();
            for (kp, matched) in eval_scene.gt_keypoints().iter().zip(&pixels) {
                if let Ok((proj, _)) = cam.project_point(kp) {
                    let dx = matched.x - proj.x;
                    let dy = matched.y - proj.y;
                    if (dx * dx + dy * dy).sqrt() <= 3.0 {
                        hits += 1;
                    }
                    total += 1;
                }
            }
        }
        assert!(total >= 18);
        assert!(
            (hits as f64) / (total as f64) < 0.5,
            "untrained matching suspiciously accurate: {hits}/{total}"
        );
    }

    #[test]
    fn principal_point_lifts_to_optical_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let focus = Vector3::new(0.5, 0.1, 0.2);
        let cam = sample_camera(&focus, 64, 64, &mut rng).unwrap();
        let pixel = PixelCoord::new(cam.cx, cam.cy);
        let d = 0.75;
        let depth = vec![d; 64 * 64];
        let targets = keypoints_to_targets(&[pixel], &depth, &cam);
        let expected = cam.rotation * Vector3::new(0.0, 0.0, d) + cam.position;
        let got = targets[0].unwrap();
        assert_relative_eq!((got - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn background_pixel_is_flagged_not_lifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let cam = sample_camera(&scene.focus_point(), 48, 48, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let bg = (0..48 * 48)
            .position(|i| view.mask[i] == BACKGROUND_ID)
            .unwrap();
        let pixel = PixelCoord::new((bg % 48) as f64 + 0.5, (bg / 48) as f64 + 0.5);
        let targets = keypoints_to_targets(&[pixel], &view.depth, &cam);
        assert!(targets[0].is_none());
    }

    #[test]
    fn lifted_targets_match_renderer_hit_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let bodies = scene.bodies();
        let cam = sample_camera(&scene.focus_point(), 64, 64, &mut rng).unwrap();
        let view = render_view(&scene, &cam).unwrap();
        let object = view.object_pixels();
        let mut checked = 0;
        for &(x, y) in object.iter().step_by(3) {
            let pixel = PixelCoord::new(x as f64 + 0.5, y as f64 + 0.5);
            let target = keypoints_to_targets(&[pixel], &view.depth, &cam)[0].unwrap();
            let body = bodies.iter().find(|b| b.id == view.mask_at(x, y)).unwrap();
            let hit = body.pose.transform_point(&view.body_coord_at(x, y));
            assert!((target - hit).norm() < 2e-3);
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn matched_keypoints_generate_valid_controllers() {
        // Targets lifted from (even untrained) matches satisfy every
        // controller-spec invariant and produce the button count.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = DescriptorModel::untrained(3, &mut rng);
        let scene = SceneModel::sample(TaskFamily::Button, &mut rng);
        let annotation = annotate_from_random_view(&scene, 48, 48, &mut rng).unwrap();
        let eval_cam = sample_camera(&scene.focus_point(), 48, 48, &mut rng).unwrap();
        let view = render_view(&scene, &eval_cam).unwrap();
        let set = extract_keypoint_set(&model, &annotation, &view).unwrap();
        assert_eq!(set.targets.len(), 2);
        let targets: Vec<_> = set
            .targets
            .iter()
            .map(|t| t.unwrap_or_else(|| scene.focus_point()))
            .collect();
        let axes = crate::ctrlgen::extract_candidate_axes(&scene, false);
        let controllers = generate_controllers(TaskFamily::Button, &targets, &axes).unwrap();
        assert_eq!(controllers.len(), 14);
    }

    #[test]
    fn model_round_trips_through_disk() {
        let dataset = small_dataset(TaskFamily::Button, 1, 2, 32, 12);
        let config = DescriptorConfig {
            steps: 5,
            matches_per_pair: 30,
            nonmatches_per_pair: 30,
            ..DescriptorConfig::default()
        };
        let model = train_descriptors(&dataset, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.bin");
        model.save(&path).unwrap();
        let loaded = DescriptorModel::load(&path).unwrap();
        assert_eq!(loaded.dim, model.dim);
        assert_eq!(loaded.median_match_distance, model.median_match_distance);
        let view = &dataset.scenes[0][0];
        assert_eq!(
            model.descriptors(view).unwrap().data,
            loaded.descriptors(view).unwrap().data
        );
    }
}
