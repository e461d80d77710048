//! The four training phases, inference from two source views, trajectory
//! rendering, ablation toggles and checkpoints.
//!
//! Every phase resets the optimizer, restricts the trainable set to its own
//! modules and draws all randomness from one generator seeded by the phase
//! config, so runs are bitwise reproducible.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::checkpoint::{self, CheckpointMeta};
use crate::autodiff::{AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::completion::{
    complete_geometry, geometry_loss, inpaint_texture, iou, level_bce, masked_l1, pad_features, texture_loss,
    GeometryNet, TextureInput, TextureNet, GEOMETRY_PREFIX, TEXTURE_PREFIX,
};
use crate::encoder::{EncoderInput, EncoderParams, DEFAULT_BLOCKS, EMBED_DIM, PREFIX as ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::geometry::{
    fuse_frames, pixel_ray, project, unproject, voxel_origin, CameraIntrinsics, FeatureImage, Image, PointCloud, Pose,
    RgbdFrame, Vec3,
};
use crate::metrics::psnr_from_mse;
use crate::refine::{
    bilinear_upsample, gan_losses, image_tensor, upsample, DiscriminatorNet, UpsamplerGeometry, UpsamplerNet,
    DISCRIMINATOR_PREFIX, UPSAMPLER_PREFIX,
};
use crate::render::{
    half_resolution_rays, render_plan, render_view, DecoderMLPs, RayPlan, RenderConfig, ALPHA_DIMS, HIDDEN,
    PREFIX as RENDER_PREFIX, VIEW_DIMS,
};
use crate::scenes::{
    capture, generate_scene_with, gt_occupancy, hide_wall_strip, random_poses, random_wall_strip, scene_origin,
    ProceduralScene, SceneParams, WallStrip,
};
use crate::sparse::{vertex_set, voxelize, Lattice, SparseFeatureGrid, SparseVoxelSet};

/// Which optional components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Learned point-cloud encoder instead of voxelized colors.
    pub use_encoder: bool,
    /// Separate density and color decoders instead of a shared trunk.
    pub disentangled: bool,
    /// Learned 2D upsampler instead of bilinear enlargement.
    pub refine: bool,
}

impl Ablation {
    pub const BASIC: Ablation = Ablation { use_encoder: false, disentangled: false, refine: false };
    pub const ENCODER: Ablation = Ablation { use_encoder: true, disentangled: false, refine: false };
    pub const DISENTANGLED: Ablation = Ablation { use_encoder: true, disentangled: true, refine: false };
    pub const FULL: Ablation = Ablation { use_encoder: true, disentangled: true, refine: true };
    /// Each configuration adds one component to the previous one.
    pub const LATTICE: [Ablation; 4] = [Self::BASIC, Self::ENCODER, Self::DISENTANGLED, Self::FULL];

    /// Lowest checkpoint phase that trained every enabled component.
    pub fn required_phase(&self) -> u32 {
        if self.refine {
            4
        } else {
            1
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("B")?;
        for (on, s) in [(self.use_encoder, "+E"), (self.disentangled, "+D"), (self.refine, "+R")] {
            if on {
                f.write_str(s)?;
            }
        }
        Ok(())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts the lattice letters `B`, `E`, `D`, `R` or the `B+E+D` form.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Self::BASIC),
            "E" | "B+E" => Ok(Self::ENCODER),
            "D" | "B+E+D" => Ok(Self::DISENTANGLED),
            "R" | "B+E+D+R" => Ok(Self::FULL),
            _ => Err(Error::InvalidInput(format!("unknown ablation `{s}` (expected B, E, D or R)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, depth: 0.1, gan: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: u32,
    pub steps: usize,
    /// Rays per step in phase 1.
    pub rays_per_step: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Phase 4 also updates the decoder MLPs.
    pub unfreeze_renderer: bool,
    /// Phase 1 holds out every pixel whose index is `holdout_every - 1`
    /// modulo `holdout_every`; 0 holds out nothing.
    pub holdout_every: usize,
}

impl PhaseConfig {
    pub fn new(phase: u32, ablation: Ablation) -> Self {
        PhaseConfig {
            phase,
            steps: 300,
            rays_per_step: 1024,
            lr: match phase {
                1 => 5e-3,
                2 => 2e-3,
                _ => 1e-3,
            },
            weights: LossWeights::default(),
            ablation,
            seed: 0,
            unfreeze_renderer: false,
            holdout_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.phase) {
            return Err(Error::InvalidInput(format!("phase {} (expected 1 to 4)", self.phase)));
        }
        if self.ablation.refine != (self.phase == 4) {
            return Err(Error::InvalidInput(format!(
                "ablation {} in phase {}: refinement is trained in phase 4 only, and phase 4 needs it",
                self.ablation, self.phase
            )));
        }
        if self.phase == 1 && self.rays_per_step == 0 {
            return Err(Error::InvalidInput("rays_per_step must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {}", self.lr)));
        }
        let w = self.weights;
        if ![w.rgb, w.depth, w.gan].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidInput(format!("loss weights {w:?}")));
        }
        Ok(())
    }

    /// Parameter-name prefixes updated by this phase.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        match self.phase {
            1 if self.ablation.use_encoder => vec![ENCODER_PREFIX, RENDER_PREFIX],
            1 => vec![RENDER_PREFIX],
            2 => vec![GEOMETRY_PREFIX],
            3 => vec![TEXTURE_PREFIX],
            _ if self.unfreeze_renderer => vec![UPSAMPLER_PREFIX, DISCRIMINATOR_PREFIX, RENDER_PREFIX],
            _ => vec![UPSAMPLER_PREFIX, DISCRIMINATOR_PREFIX],
        }
    }

    /// First eight bytes of the SHA-256 of the config's debug form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSettings {
    pub encoder_blocks: usize,
    pub view_dirs: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { encoder_blocks: DEFAULT_BLOCKS, view_dirs: true }
    }
}

/// Every learned component, registered in a fixed order in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoders: DecoderMLPs,
    pub geometry: GeometryNet,
    pub texture: TextureNet,
    pub upsampler: UpsamplerNet,
    pub discriminator: DiscriminatorNet,
    pub settings: ModelSettings,
}

impl Model {
    pub fn new(settings: ModelSettings, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, settings.encoder_blocks, &mut rng)?;
        let decoders = DecoderMLPs::register(&mut store, settings.view_dirs, &mut rng)?;
        let geometry = GeometryNet::register(&mut store, &mut rng)?;
        let texture = TextureNet::register(&mut store, &mut rng)?;
        let upsampler = UpsamplerNet::register(&mut store, &mut rng)?;
        let discriminator = DiscriminatorNet::register(&mut store, &mut rng)?;
        Ok(Model { store, encoder, decoders, geometry, texture, upsampler, discriminator, settings })
    }

    /// Architecture settings implied by a store's parameter names and shapes.
    pub fn settings_of(store: &ParamStore) -> Result<ModelSettings> {
        let encoder_blocks = (0..).take_while(|b| store.contains(&format!("enc.block{b}.conv0.w"))).count();
        let trunk_rgb = store.id("render.trunk_rgb.w")?;
        let view_dirs = match store.dims(trunk_rgb).first() {
            Some(&d) if d == HIDDEN + VIEW_DIMS => true,
            Some(&d) if d == HIDDEN => false,
            other => return Err(Error::Checkpoint(format!("render.trunk_rgb.w has input width {other:?}"))),
        };
        Ok(ModelSettings { encoder_blocks, view_dirs })
    }

    /// Rebuilds the model around stored values; every tensor must match.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut model = Model::new(Model::settings_of(store)?, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, the architecture has {}",
                store.len(),
                model.store.len()
            )));
        }
        if let Some(id) = model.store.ids().find(|&id| !store.contains(model.store.name(id))) {
            return Err(Error::Checkpoint(format!("missing tensor `{}`", model.store.name(id))));
        }
        model.store.load_values_from(store)?;
        model.store.set_step_count(store.step_count());
        Ok(model)
    }

    /// Vertex embeddings of an encoder input under `ablation`.
    pub fn embed(&self, input: &EncoderInput, ablation: Ablation) -> Result<Tensor> {
        if !ablation.use_encoder {
            return Ok(basic_embedding(input));
        }
        let mut t = Tape::new();
        let f = input.forward(&mut t, &self.store, &self.encoder)?;
        Ok(t.value(f).clone())
    }

    fn embed_var(&self, t: &mut Tape, input: &EncoderInput, fixed: Option<&Tensor>) -> Result<Var> {
        match fixed {
            Some(f) => Ok(t.constant(f.clone())),
            None => input.forward(t, &self.store, &self.encoder),
        }
    }

    fn begin_phase(&mut self, config: &PhaseConfig) -> Result<()> {
        config.validate()?;
        self.store.reset_optimizer();
        self.store.train_only(&config.trainable_prefixes());
        Ok(())
    }

    fn step(&mut self, t: &Tape, root: Var, config: &PhaseConfig) -> Result<()> {
        self.store.zero_grads();
        t.backward_into(root, &mut self.store)?;
        self.store.adam_step(&config.adam())
    }
}

/// Embedding without the encoder: occupancy in the first density channel
/// and the mean incident color in the first three color channels.
pub fn basic_embedding(input: &EncoderInput) -> Tensor {
    let mut f = Tensor::zeros(input.vertices.len(), EMBED_DIM);
    for r in 0..f.rows() {
        let row = f.row_slice_mut(r);
        row[0] = 1.0;
        row[ALPHA_DIMS..ALPHA_DIMS + 3].copy_from_slice(input.colors.row_slice(r));
    }
    f
}

/// Parameter snapshot plus the phase, step and config that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &PhaseConfig) -> Self {
        Checkpoint {
            meta: CheckpointMeta { phase: config.phase, step: model.store.step_count(), config_hash: config.hash() },
            store: model.store.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.store, &self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut store, meta) = checkpoint::decode(bytes)?;
        store.set_step_count(meta.step);
        Ok(Checkpoint { meta, store })
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_store(&self.store)
    }

    /// Fails unless this checkpoint trained everything `ablation` enables.
    pub fn check_supports(&self, ablation: Ablation) -> Result<()> {
        if self.meta.phase < ablation.required_phase() {
            return Err(Error::Precondition(format!(
                "ablation {ablation} needs a phase {} checkpoint, got phase {}",
                ablation.required_phase(),
                self.meta.phase
            )));
        }
        Ok(())
    }
}

/// Per-step loss terms of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub phase: u32,
    pub columns: Vec<&'static str>,
    /// `(step, values)` in column order; skipped steps are absent.
    pub rows: Vec<(usize, Vec<f64>)>,
    pub skipped: usize,
}

impl TrainLog {
    fn new(phase: u32, columns: &[&'static str]) -> Self {
        TrainLog { phase, columns: columns.to_vec(), rows: Vec::new(), skipped: 0 }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|&n| n == name)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    /// Header line, then `step, phase, terms...` per step, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tphase");
        for c in &self.columns {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for (step, values) in &self.rows {
            let _ = write!(s, "{step}\t{}", self.phase);
            for v in values {
                let _ = write!(s, "\t{v:.9e}");
            }
            s.push('\n');
        }
        s
    }
}

/// One fully observed scene: its fused cloud and the posed views it came
/// from, which supervise phase 1.
#[derive(Clone, Debug)]
pub struct ViewScene {
    pub cloud: PointCloud,
    pub views: Vec<RgbdFrame>,
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl ViewScene {
    pub fn capture(scene: &ProceduralScene, k: &CameraIntrinsics, poses: &[Pose], voxel_size: f64) -> Result<Self> {
        let views = capture(scene, k, poses)?;
        let cloud = fuse_frames(&views)?;
        Ok(ViewScene { cloud, views, voxel_size, origin: scene_origin(scene, voxel_size) })
    }
}

struct PreparedView {
    plan: RayPlan,
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    train: Vec<usize>,
    held_out: Vec<usize>,
}

struct PreparedScene {
    input: EncoderInput,
    fixed: Option<Tensor>,
    config: RenderConfig,
    views: Vec<PreparedView>,
}

fn prepare_scenes(model: &Model, scenes: &[ViewScene], config: &PhaseConfig) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            let input = EncoderInput::new(&s.cloud, s.voxel_size, s.origin)?;
            let rcfg = RenderConfig::for_voxel_size(s.voxel_size);
            let fixed = (!config.ablation.use_encoder).then(|| basic_embedding(&input));
            let views = s
                .views
                .iter()
                .map(|f| {
                    let (w, h) = (f.width(), f.height());
                    let mut rays = Vec::new();
                    let (mut rgb, mut depth, mut pixel) = (Vec::new(), Vec::new(), Vec::new());
                    for v in 0..h {
                        for u in 0..w {
                            let d = f.depth.at(u, v);
                            if d > 0.0 {
                                rays.push(pixel_ray(&f.intrinsics, &f.pose, u, v)?);
                                let c = f.rgb.pixel(u, v);
                                rgb.push([c[0], c[1], c[2]]);
                                depth.push(d);
                                pixel.push(v * w + u);
                            }
                        }
                    }
                    let plan = RayPlan::new(
                        &rays,
                        &input.voxels,
                        &input.vertices,
                        &rcfg,
                        model.decoders.view_dirs,
                        Some(f.pose.forward()),
                    )?;
                    let held = |i: usize| config.holdout_every > 0 && pixel[i] % config.holdout_every == config.holdout_every - 1;
                    let train = (0..rays.len()).filter(|&i| plan.hit[i] && !held(i)).collect();
                    let held_out = (0..rays.len()).filter(|&i| plan.hit[i] && held(i)).collect();
                    Ok(PreparedView { plan, rgb, depth, train, held_out })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedScene { input, fixed, config: rcfg, views })
        })
        .collect()
}

fn rgb_tensor(rows: &[usize], rgb: &[[f64; 3]]) -> Tensor {
    Tensor::from_vec(rows.len(), 3, rows.iter().flat_map(|&i| rgb[i]).collect()).expect("rgb rows")
}

/// Mean per-row squared color error and mean absolute depth error.
fn ray_losses(t: &mut Tape, rgb: Var, gt_rgb: Tensor, depth: Var, gt_depth: Tensor) -> Result<(Var, Var)> {
    let n = t.shape(rgb).0 as f64;
    let gt = t.constant(gt_rgb);
    let d = t.sub(rgb, gt)?;
    let d = t.square(d);
    let s = t.sum(d);
    let color = t.scale(s, 1.0 / n);
    let gz = t.constant(gt_depth);
    let e = t.sub(depth, gz)?;
    let e = t.abs(e);
    let depth = t.mean(e)?;
    Ok((color, depth))
}

/// Trains the encoder (unless ablated) and the decoders on rays of complete
/// scenes: `rgb * mean |c - c'|^2 + depth * mean |z - z'|` over rays with
/// valid depth that cross at least one voxel.
pub fn train_phase1(model: &mut Model, scenes: &[ViewScene], config: &PhaseConfig) -> Result<TrainLog> {
    if config.phase != 1 {
        return Err(Error::InvalidInput(format!("phase-1 training given a phase-{} config", config.phase)));
    }
    if scenes.is_empty() || scenes.iter().any(|s| s.views.is_empty()) {
        return Err(Error::Empty("phase 1 needs scenes with at least one view".into()));
    }
    model.begin_phase(config)?;
    let prepared = prepare_scenes(model, scenes, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::new(1, &["loss", "rgb", "depth"]);
    for step in 0..config.steps {
        let s = &prepared[rng.gen_range(0..prepared.len())];
        let view = &s.views[rng.gen_range(0..s.views.len())];
        if view.train.is_empty() {
            warn!("phase 1 step {step}: no training ray crosses a voxel; skipping");
            log.skipped += 1;
            continue;
        }
        let batch: Vec<usize> =
            (0..config.rays_per_step).map(|_| view.train[rng.gen_range(0..view.train.len())]).collect();
        let plan = view.plan.select(&batch);
        let mut t = Tape::new();
        let emb = model.embed_var(&mut t, &s.input, s.fixed.as_ref())?;
        let out = render_plan(&mut t, &model.store, &model.decoders, &plan, emb, &s.config, config.ablation.disentangled)?;
        let gt_depth = Tensor::column(batch.iter().map(|&i| view.depth[i]).collect());
        let (color, depth) = ray_losses(&mut t, out.rgb, rgb_tensor(&batch, &view.rgb), out.depth, gt_depth)?;
        let a = t.scale(color, config.weights.rgb);
        let b = t.scale(depth, config.weights.depth);
        let loss = t.add(a, b)?;
        log.rows.push((step, vec![t.scalar_value(loss), t.scalar_value(color), t.scalar_value(depth)]));
        model.step(&t, loss, config)?;
    }
    Ok(log)
}

/// Quality of the decoded held-out rays.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayEval {
    pub rays: usize,
    /// Over all channels of all held-out rays.
    pub psnr: f64,
    /// Fraction with `max(z/z', z'/z) < 1.25`, non-positive depths failing.
    pub delta: f64,
}

/// Renders the held-out rays of every view chosen by `config`'s holdout rule.
pub fn evaluate_phase1(model: &Model, scenes: &[ViewScene], config: &PhaseConfig) -> Result<RayEval> {
    let prepared = prepare_scenes(model, scenes, config)?;
    let (mut se, mut good, mut rays) = (0.0, 0usize, 0usize);
    for s in &prepared {
        let emb = match &s.fixed {
            Some(f) => f.clone(),
            None => model.embed(&s.input, config.ablation)?,
        };
        for view in &s.views {
            if view.held_out.is_empty() {
                continue;
            }
            let plan = view.plan.select(&view.held_out);
            let mut t = Tape::new();
            let e = t.constant(emb.clone());
            let out = render_plan(&mut t, &model.store, &model.decoders, &plan, e, &s.config, config.ablation.disentangled)?;
            for (r, &i) in view.held_out.iter().enumerate() {
                for c in 0..3 {
                    se += (t.value(out.rgb).get(r, c) - view.rgb[i][c]).powi(2);
                }
                let (z, g) = (t.value(out.depth).get(r, 0), view.depth[i]);
                if z > 0.0 && (z / g).max(g / z) < 1.25 {
                    good += 1;
                }
            }
            rays += view.held_out.len();
        }
    }
    if rays == 0 {
        return Err(Error::Empty("no held-out ray crosses a voxel".into()));
    }
    Ok(RayEval { rays, psnr: psnr_from_mse(se / (3 * rays) as f64), delta: good as f64 / rays as f64 })
}

/// Occupancy observed by the sources and the true occupancy of the scene.
#[derive(Clone, Debug)]
pub struct CompletionPair {
    pub observed: SparseVoxelSet,
    pub gt: SparseVoxelSet,
}

/// Trains the geometry network on the summed per-level BCE.
pub fn train_phase2(model: &mut Model, pairs: &[CompletionPair], config: &PhaseConfig) -> Result<TrainLog> {
    if config.phase != 2 {
        return Err(Error::InvalidInput(format!("phase-2 training given a phase-{} config", config.phase)));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("phase 2 needs at least one pair".into()));
    }
    model.begin_phase(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::new(2, &["loss", "finest_bce"]);
    for step in 0..config.steps {
        let p = &pairs[rng.gen_range(0..pairs.len())];
        let mut t = Tape::new();
        let fwd = model.geometry.forward(&mut t, &model.store, &p.observed.lattice, Some(&p.gt.lattice))?;
        let loss = geometry_loss(&mut t, &fwd.levels, &p.gt.lattice)?;
        let finest = level_bce(&mut t, fwd.levels.last().expect("at least one level"), &p.gt.lattice)?;
        log.rows.push((step, vec![t.scalar_value(loss), t.scalar_value(finest)]));
        model.step(&t, loss, config)?;
    }
    Ok(log)
}

/// Finest-level IoU of the predicted completion against the truth, per pair.
pub fn evaluate_completion(model: &Model, pairs: &[CompletionPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let out = complete_geometry(&p.observed, &model.geometry, &model.store)?;
            Ok(iou(&out.lattice, &p.gt.lattice))
        })
        .collect()
}

/// One inpainting problem: the padded source embeddings on the full
/// vertex set and the full-cloud embeddings as the target.
#[derive(Clone, Debug)]
pub struct TexturePair {
    pub input: TextureInput,
    pub target: Tensor,
}

impl TexturePair {
    /// `source` must be a subset of `full`; both are voxelized on the same
    /// lattice.
    pub fn build(
        model: &Model,
        ablation: Ablation,
        source: &PointCloud,
        full: &PointCloud,
        voxel_size: f64,
        origin: Vec3,
    ) -> Result<Self> {
        let src = EncoderInput::new(source, voxel_size, origin)?;
        let tgt = EncoderInput::new(full, voxel_size, origin)?;
        let observed = SparseFeatureGrid::new(src.vertices.clone(), model.embed(&src, ablation)?)?;
        let target = model.embed(&tgt, ablation)?;
        let (f0, mask) = pad_features(&observed, &tgt.vertices)?;
        Ok(TexturePair { input: TextureInput::new(tgt.vertices.clone(), f0, mask)?, target })
    }
}

/// Trains the texture network on the L1 error of the new vertices.
pub fn train_phase3(model: &mut Model, pairs: &[TexturePair], config: &PhaseConfig) -> Result<TrainLog> {
    if config.phase != 3 {
        return Err(Error::InvalidInput(format!("phase-3 training given a phase-{} config", config.phase)));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("phase 3 needs at least one pair".into()));
    }
    model.begin_phase(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::new(3, &["loss"]);
    for step in 0..config.steps {
        let p = &pairs[rng.gen_range(0..pairs.len())];
        let mut t = Tape::new();
        let pred = model.texture.forward(&mut t, &model.store, &p.input)?;
        let target = t.constant(p.target.clone());
        let loss = texture_loss(&mut t, pred, target, &p.input.mask)?;
        log.rows.push((step, vec![t.scalar_value(loss)]));
        if p.input.mask.new_count() == 0 {
            log.skipped += 1;
            continue;
        }
        model.step(&t, loss, config)?;
    }
    Ok(log)
}

/// Mean masked L1 of the inpainted rows and of an all-zero prediction, over
/// pairs with at least one new vertex.
pub fn evaluate_inpainting(model: &Model, pairs: &[TexturePair]) -> Result<(f64, f64)> {
    let (mut err, mut base, mut n) = (0.0, 0.0, 0);
    for p in pairs.iter().filter(|p| p.input.mask.new_count() > 0) {
        let mut t = Tape::new();
        let pred = model.texture.forward(&mut t, &model.store, &p.input)?;
        err += masked_l1(t.value(pred), &p.target, &p.input.mask);
        base += masked_l1(&Tensor::zeros(p.target.rows(), p.target.cols()), &p.target, &p.input.mask);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no pair has new vertices".into()));
    }
    Ok((err / n as f64, base / n as f64))
}

/// A procedural scene captured from random views with one wall strip
/// removed from the source cloud.
#[derive(Clone, Debug)]
pub struct StripSample {
    pub scene: ProceduralScene,
    pub strip: WallStrip,
    pub full: PointCloud,
    pub source: PointCloud,
    pub voxel_size: f64,
    pub origin: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripSampleParams {
    pub scene: SceneParams,
    pub image_size: usize,
    pub fov_deg: f64,
    pub views: usize,
    pub voxel_size: f64,
}

impl Default for StripSampleParams {
    fn default() -> Self {
        StripSampleParams { scene: SceneParams::default(), image_size: 64, fov_deg: 70.0, views: 12, voxel_size: 0.1 }
    }
}

impl StripSample {
    pub fn generate(seed: u64, params: &StripSampleParams) -> Result<Self> {
        let scene = generate_scene_with(seed, &params.scene);
        let k = CameraIntrinsics::from_fov(params.image_size, params.image_size, params.fov_deg)?;
        let frames = capture(&scene, &k, &random_poses(&scene, params.views, seed.wrapping_add(1)))?;
        StripSample::from_frames(scene, &frames, params.voxel_size)
    }

    /// Sample from existing captures of `scene`; the strip is drawn from the
    /// scene's seed.
    pub fn from_frames(scene: ProceduralScene, frames: &[RgbdFrame], voxel_size: f64) -> Result<Self> {
        let full = fuse_frames(frames)?;
        let strip = random_wall_strip(&scene, scene.seed.wrapping_add(2));
        let source = hide_wall_strip(&full, &strip);
        let origin = scene_origin(&scene, voxel_size);
        Ok(StripSample { scene, strip, full, source, voxel_size, origin })
    }

    /// Source voxelization against the scene's surface occupancy.
    pub fn completion_pair(&self) -> Result<CompletionPair> {
        let (observed, _) = voxelize(&self.source, self.voxel_size, self.origin)?;
        Ok(CompletionPair { observed, gt: gt_occupancy(&self.scene, self.voxel_size, self.origin)? })
    }

    pub fn texture_pair(&self, model: &Model, ablation: Ablation) -> Result<TexturePair> {
        TexturePair::build(model, ablation, &self.source, &self.full, self.voxel_size, self.origin)
    }
}

/// Two source views and a query view.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub s1: RgbdFrame,
    pub s2: RgbdFrame,
    pub q: RgbdFrame,
}

/// Completed scene representation built from source views: the shared
/// state every rendered frame reads from.
#[derive(Clone, Debug)]
pub struct Representation {
    pub observed: SparseVoxelSet,
    pub voxels: SparseVoxelSet,
    pub vertices: Arc<Lattice>,
    pub embeddings: Tensor,
    pub ablation: Ablation,
}

impl Representation {
    /// Encode (or voxelize colors), complete geometry, pad, inpaint.
    pub fn build(model: &Model, sources: &[&RgbdFrame], voxel_size: f64, ablation: Ablation) -> Result<Self> {
        let frames: Vec<RgbdFrame> = sources.iter().map(|&f| f.clone()).collect();
        let cloud = fuse_frames(&frames)?;
        if cloud.is_empty() {
            return Err(Error::Empty("the source views have no valid depth".into()));
        }
        let origin = voxel_origin(&cloud, voxel_size)?;
        let input = EncoderInput::new(&cloud, voxel_size, origin)?;
        let observed = SparseFeatureGrid::new(input.vertices.clone(), model.embed(&input, ablation)?)?;
        let voxels = complete_geometry(&input.voxels, &model.geometry, &model.store)?;
        let vertices = Arc::new(vertex_set(&voxels));
        let (f0, mask) = pad_features(&observed, &vertices)?;
        let grid = inpaint_texture(vertices.clone(), f0, mask, &model.texture, &model.store)?;
        Ok(Representation { observed: input.voxels, voxels, vertices, embeddings: grid.features, ablation })
    }

    /// Full-resolution color and the coarse render at `pose`.
    pub fn render(&self, model: &Model, k: &CameraIntrinsics, pose: &Pose) -> Result<(Image, FeatureImage)> {
        let config = RenderConfig::for_voxel_size(self.voxels.voxel_size);
        let coarse = render_view(
            &self.embeddings,
            &self.vertices,
            &self.voxels,
            pose,
            k,
            &model.decoders,
            &model.store,
            &config,
            self.ablation.disentangled,
        )?;
        let full = if self.ablation.refine {
            upsample(&coarse, &model.upsampler, &model.store)?
        } else {
            bilinear_upsample(&coarse.rgb)
        };
        Ok((full, coarse))
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub rgb: Image,
    pub coarse: FeatureImage,
    pub completed: SparseVoxelSet,
}

/// Novel view at `query` from two source views.
pub fn infer(
    model: &Model,
    sources: [&RgbdFrame; 2],
    query: &Pose,
    k: &CameraIntrinsics,
    voxel_size: f64,
    ablation: Ablation,
) -> Result<Inference> {
    let rep = Representation::build(model, &sources, voxel_size, ablation)?;
    let (rgb, coarse) = rep.render(model, k, query)?;
    Ok(Inference { rgb, coarse, completed: rep.voxels })
}

/// Frames along `poses`, all rendered from one representation.
pub fn render_trajectory(
    model: &Model,
    sources: [&RgbdFrame; 2],
    poses: &[Pose],
    k: &CameraIntrinsics,
    voxel_size: f64,
    ablation: Ablation,
) -> Result<Vec<(Image, FeatureImage)>> {
    if poses.len() < 2 {
        return Err(Error::Precondition(format!("a trajectory needs at least 2 poses, got {}", poses.len())));
    }
    let rep = Representation::build(model, &sources, voxel_size, ablation)?;
    poses.iter().map(|p| rep.render(model, k, p)).collect()
}

/// `n >= 2` poses from `a` to `b` inclusive.
pub fn interpolate_poses(a: &Pose, b: &Pose, n: usize) -> Vec<Pose> {
    match n {
        0 => Vec::new(),
        1 => vec![*a],
        _ => (0..n).map(|i| a.interpolate(b, i as f64 / (n - 1) as f64)).collect(),
    }
}

/// `n` poses from the first source through the query to the second source.
pub fn triplet_trajectory(s1: &Pose, q: &Pose, s2: &Pose, n: usize) -> Vec<Pose> {
    if n < 3 {
        return interpolate_poses(s1, s2, n);
    }
    let first = n.div_ceil(2);
    let mut poses = interpolate_poses(s1, q, first);
    poses.extend(interpolate_poses(q, s2, n - first + 1).into_iter().skip(1));
    poses
}

/// Median color difference between consecutive frames at pixels whose
/// rendered surface point reprojects depth-consistently into the next
/// frame; one value per consecutive pair (NaN without such pixels).
/// `depths` are z-depth maps at any integer fraction of the color size.
pub fn reprojection_differences(frames: &[Image], depths: &[Image], poses: &[Pose], k: &CameraIntrinsics) -> Result<Vec<f64>> {
    if frames.len() != depths.len() || frames.len() != poses.len() {
        return Err(Error::Shape(format!("{} frames, {} depths, {} poses", frames.len(), depths.len(), poses.len())));
    }
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for i in 1..frames.len() {
        let (a, b) = (&frames[i - 1], &frames[i]);
        let scale = a.width / depths[i - 1].width.max(1);
        let mut diffs = Vec::new();
        for v in 0..a.height {
            for u in 0..a.width {
                let z = depths[i - 1].at(u / scale, v / scale);
                if z <= 0.0 {
                    continue;
                }
                let p = unproject(k, &poses[i - 1], u, v, z);
                let Some((x, y, zb)) = project(k, &poses[i], &p) else { continue };
                if x < 0.0 || y < 0.0 || x >= b.width as f64 || y >= b.height as f64 {
                    continue;
                }
                let (ub, vb) = (x as usize, y as usize);
                let seen = depths[i].at(ub / scale, vb / scale);
                if seen <= 0.0 || (seen - zb).abs() > 0.1 {
                    continue;
                }
                let d: f64 = a.pixel(u, v).iter().zip(b.pixel(ub, vb)).map(|(p, q)| (p - q).abs()).sum::<f64>() / 3.0;
                diffs.push(d);
            }
        }
        out.push(median(&mut diffs));
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Image-space blend of the two sources, weighted by trajectory position:
/// the view-inconsistent 2D reference for [`reprojection_differences`].
pub fn cross_fade(s1: &Image, s2: &Image, n: usize) -> Result<Vec<Image>> {
    if !s1.same_dims(s2) {
        return Err(Error::Shape("cross-fade of images with different sizes".into()));
    }
    Ok((0..n)
        .map(|i| {
            let w = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let data = s1.data.iter().zip(&s2.data).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            Image { width: s1.width, height: s1.height, channels: s1.channels, data }
        })
        .collect())
}

/// 2x2 box-filtered color and nearest-valid depth (first valid pixel of
/// each 2x2 block in row-major order).
pub fn half_resolution_targets(frame: &RgbdFrame) -> (Image, Image) {
    let (w, h) = (frame.width() / 2, frame.height() / 2);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    for v in 0..h {
        for u in 0..w {
            let block = [(2 * u, 2 * v), (2 * u + 1, 2 * v), (2 * u, 2 * v + 1), (2 * u + 1, 2 * v + 1)];
            let px = rgb.pixel_mut(u, v);
            for &(x, y) in &block {
                px.iter_mut().zip(frame.rgb.pixel(x, y)).for_each(|(o, c)| *o += 0.25 * c);
            }
            depth.pixel_mut(u, v)[0] = block.iter().map(|&(x, y)| frame.depth.at(x, y)).find(|&d| d > 0.0).unwrap_or(0.0);
        }
    }
    (rgb, depth)
}

struct PreparedTriplet {
    embeddings: Tensor,
    plan: RayPlan,
    config: RenderConfig,
    half_rgb: Tensor,
    half_depth: Tensor,
    depth_rows: Arc<Vec<u32>>,
    full_rgb: Tensor,
    geometry: UpsamplerGeometry,
}

fn prepare_triplets(model: &Model, triplets: &[Triplet], voxel_size: f64, ablation: Ablation) -> Result<Vec<PreparedTriplet>> {
    let mut out = Vec::new();
    for (i, tr) in triplets.iter().enumerate() {
        let rep = Representation::build(model, &[&tr.s1, &tr.s2], voxel_size, ablation)?;
        let config = RenderConfig::for_voxel_size(voxel_size);
        let rays = half_resolution_rays(&tr.q.intrinsics, &tr.q.pose);
        let plan = RayPlan::new(&rays, &rep.voxels, &rep.vertices, &config, model.decoders.view_dirs, Some(tr.q.pose.forward()))?;
        if !plan.hit.iter().any(|&h| h) {
            warn!("triplet {i}: the query sees no completed voxel; skipping");
            continue;
        }
        let (rgb, depth) = half_resolution_targets(&tr.q);
        let depth_rows =
            (0..plan.n_rays).filter(|&r| plan.hit[r] && depth.data[r] > 0.0).map(|r| r as u32).collect::<Vec<_>>();
        out.push(PreparedTriplet {
            embeddings: rep.embeddings,
            plan,
            config,
            half_rgb: image_tensor(&rgb),
            half_depth: image_tensor(&depth),
            depth_rows: Arc::new(depth_rows),
            full_rgb: image_tensor(&tr.q.rgb),
            geometry: UpsamplerGeometry::new(rgb.width, rgb.height)?,
        });
    }
    Ok(out)
}

/// Loss terms of one phase-4 forward pass.
struct Phase4Terms {
    /// `rgb * color + depth * depth + gan * g`.
    generator: Var,
    color: Var,
    depth: Var,
    g: Var,
    d: Var,
}

fn phase4_forward(t: &mut Tape, model: &Model, p: &PreparedTriplet, config: &PhaseConfig) -> Result<Phase4Terms> {
    let w = config.weights;
    let emb = t.constant(p.embeddings.clone());
    let out = render_plan(t, &model.store, &model.decoders, &p.plan, emb, &p.config, config.ablation.disentangled)?;
    let n = p.plan.n_rays as f64;
    let gt = t.constant(p.half_rgb.clone());
    let e = t.sub(out.rgb, gt)?;
    let e = t.square(e);
    let e = t.sum(e);
    let color = t.scale(e, 1.0 / n);
    let depth = if p.depth_rows.is_empty() {
        t.constant(Tensor::scalar(0.0))
    } else {
        let gz = t.constant(p.half_depth.clone());
        let e = t.sub(out.depth, gz)?;
        let e = t.gather_rows(e, p.depth_rows.clone())?;
        let e = t.abs(e);
        t.mean(e)?
    };
    let coarse = t.concat_cols(&[out.rgb, out.feature])?;
    let fake = model.upsampler.forward(t, &model.store, coarse, &p.geometry)?;
    let real = t.constant(p.full_rgb.clone());
    let (fw, fh) = (2 * p.geometry.width, 2 * p.geometry.height);
    let gan = gan_losses(t, &model.store, &model.discriminator, real, fake, fw, fh)?;
    let a = t.scale(color, w.rgb);
    let b = t.scale(depth, w.depth);
    let c = t.scale(gan.g, w.gan);
    let recon = t.add(a, b)?;
    let generator = t.add(recon, c)?;
    Ok(Phase4Terms { generator, color, depth, g: gan.g, d: gan.d })
}

/// Trains the upsampler and discriminator (and optionally the decoders)
/// on triplets with every other module frozen. One backward pass of
/// `generator + gan * d` updates both players: the discriminator sees a
/// detached fake and the generator a frozen discriminator.
pub fn train_phase4(model: &mut Model, triplets: &[Triplet], voxel_size: f64, config: &PhaseConfig) -> Result<TrainLog> {
    if config.phase != 4 {
        return Err(Error::InvalidInput(format!("phase-4 training given a phase-{} config", config.phase)));
    }
    model.begin_phase(config)?;
    let prepared = prepare_triplets(model, triplets, voxel_size, config.ablation)?;
    if prepared.is_empty() {
        return Err(Error::Empty("no usable triplet".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::new(4, &["generator", "rgb", "depth", "g", "d"]);
    for step in 0..config.steps {
        let p = &prepared[rng.gen_range(0..prepared.len())];
        let mut t = Tape::new();
        let terms = phase4_forward(&mut t, model, p, config)?;
        let d = t.scale(terms.d, config.weights.gan);
        let root = t.add(terms.generator, d)?;
        log.rows.push((
            step,
            [terms.generator, terms.color, terms.depth, terms.g, terms.d].iter().map(|&v| t.scalar_value(v)).collect(),
        ));
        model.step(&t, root, config)?;
    }
    Ok(log)
}

/// Generator loss of every usable triplet under the current weights.
pub fn phase4_generator_losses(model: &Model, triplets: &[Triplet], voxel_size: f64, config: &PhaseConfig) -> Result<Vec<f64>> {
    prepare_triplets(model, triplets, voxel_size, config.ablation)?
        .iter()
        .map(|p| {
            let mut t = Tape::new();
            let terms = phase4_forward(&mut t, model, p, config)?;
            Ok(t.scalar_value(terms.generator))
        })
        .collect()
}
