//! Differentiable volume renderer over a sparse voxel grid with vertex
//! embeddings.
//!
//! Per ray: DDA traversal of the occupied cells, uniform midpoint samples in
//! each hit interval, trilinear interpolation of the corner embeddings,
//! density and color decoding, and front-to-back compositing of color,
//! depth, embedding and opacity.
//!
//! Everything that depends only on geometry (hits, samples, interpolation
//! weights, view encodings) is collected once into a [`RayPlan`]; the
//! weight-dependent part then runs on a [`Tape`].

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{softplus, Csr, ParamStore, Tape, Tensor, Var};
use crate::encoder::EMBED_DIM;
use crate::error::{Error, Result};
use crate::geometry::{pixel_ray_unchecked, Aabb, CameraIntrinsics, FeatureImage, Image, Pose, Ray, Vec3};
use crate::nn::{Activation, Linear, Mlp, Init};
use crate::sparse::{corner_offset, trilinear_weights, Lattice, SparseVoxelSet, VoxelCoord};

pub const ALPHA_DIMS: usize = 8;
pub const RGB_DIMS: usize = EMBED_DIM - ALPHA_DIMS;
pub const HIDDEN: usize = 64;
pub const VIEW_FREQUENCIES: usize = 4;
pub const VIEW_DIMS: usize = 3 * 2 * VIEW_FREQUENCIES;
pub const PREFIX: &str = "render.";

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub step_size: f64,
    pub max_samples: usize,
    /// Samples reached with transmittance below this are dropped.
    pub transmittance_eps: f64,
    pub background: [f64; 3],
    /// Multiplies the softplus density output, 1/meter.
    pub density_scale: f64,
    /// Replace decoded densities by this constant (geometry-only renders).
    pub forced_density: Option<f64>,
}

impl RenderConfig {
    pub fn for_voxel_size(voxel_size: f64) -> Self {
        RenderConfig {
            step_size: voxel_size / 4.0,
            max_samples: 256,
            transmittance_eps: 1e-3,
            background: [0.0; 3],
            density_scale: 10.0 / voxel_size,
            forced_density: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.max_samples == 0 {
            return Err(Error::InvalidInput(format!("step size {} / max samples {}", self.step_size, self.max_samples)));
        }
        if !(0.0..1.0).contains(&self.transmittance_eps) {
            return Err(Error::InvalidInput(format!("transmittance threshold {}", self.transmittance_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelHit {
    pub coord: VoxelCoord,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Ray parameter interval inside cell `c`, clipped to `t >= 0`, if it has
/// positive length.
#[inline]
pub fn cell_interval(ray: &Ray, voxels: &SparseVoxelSet, c: VoxelCoord) -> Option<(f64, f64)> {
    let (lo, hi) = voxels.cell_aabb(c);
    let (t0, t1) = Aabb::new(lo, hi).ray_interval(ray)?;
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Occupied cells pierced by the ray, in order of entry.
pub fn intersect_voxels(ray: &Ray, voxels: &SparseVoxelSet) -> Vec<VoxelHit> {
    let mut hits = Vec::new();
    let Some(bounds) = voxels.lattice.bounds() else {
        return hits;
    };
    let (wlo, whi) = (voxels.cell_aabb(bounds.lo).0, voxels.cell_aabb(bounds.hi).1);
    let Some((t0, t1)) = Aabb::new(wlo, whi).ray_interval(ray) else {
        return hits;
    };
    let t_start = t0.max(0.0);
    if t1 <= t_start {
        return hits;
    }
    let s = voxels.cell_size();
    let lo = [bounds.lo.i, bounds.lo.j, bounds.lo.k];
    let hi = [bounds.hi.i, bounds.hi.j, bounds.hi.k];
    let t_mid = 0.5 * (t_start + t1.min(t_start + s));
    let p = ray.at(t_start.max(t_mid.min(t_start + 1e-9 * s)));
    let mut cell = [0i32; 3];
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let q = ((p[a] - voxels.origin[a]) / s).floor() as i32;
        cell[a] = q.clamp(lo[a], hi[a]);
        let d = ray.direction[a];
        if d > 0.0 {
            step[a] = 1;
            let boundary = voxels.origin[a] + (cell[a] + 1) as f64 * s;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = s / d;
        } else if d < 0.0 {
            step[a] = -1;
            let boundary = voxels.origin[a] + cell[a] as f64 * s;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = -s / d;
        }
    }
    loop {
        let c = VoxelCoord::new(cell[0], cell[1], cell[2]);
        if voxels.contains(c) {
            if let Some((a, b)) = cell_interval(ray, voxels, c) {
                hits.push(VoxelHit { coord: c, t_enter: a, t_exit: b });
            }
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > t1 {
            break;
        }
        cell[a] += step[a];
        if cell[a] < lo[a] || cell[a] > hi[a] {
            break;
        }
        t_max[a] += t_delta[a];
    }
    hits.sort_by(|x, y| x.t_enter.total_cmp(&y.t_enter).then(x.coord.cmp(&y.coord)));
    hits
}

/// Samples of one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// Index into the hit list each sample came from.
    pub hit: Vec<usize>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn sample_impl(hits: &[VoxelHit], config: &RenderConfig, mut jitter: Option<&mut dyn FnMut() -> f64>) -> RaySamples {
    let mut out = RaySamples::default();
    let s = config.step_size;
    'outer: for (h, hit) in hits.iter().enumerate() {
        let len = hit.t_exit - hit.t_enter;
        let n = ((len / s) - 1e-9).ceil().max(1.0) as usize;
        for k in 0..n {
            if out.t.len() == config.max_samples {
                break 'outer;
            }
            let a = hit.t_enter + k as f64 * s;
            let b = if k + 1 == n { hit.t_exit } else { a + s };
            let u = jitter.as_mut().map_or(0.5, |f| f());
            out.t.push(a + u * (b - a));
            out.delta.push(b - a);
            out.hit.push(h);
        }
    }
    out
}

/// Midpoints of consecutive `step_size` segments of every hit interval (the
/// last segment of an interval may be shorter); `delta` is each segment's
/// length.
pub fn sample_ray(hits: &[VoxelHit], config: &RenderConfig) -> RaySamples {
    sample_impl(hits, config, None)
}

/// As [`sample_ray`] with each sample placed uniformly inside its segment.
pub fn sample_ray_jittered(hits: &[VoxelHit], config: &RenderConfig, rng: &mut impl Rng) -> RaySamples {
    let mut f = || rng.gen::<f64>();
    sample_impl(hits, config, Some(&mut f))
}

/// Sinusoidal encoding of a unit direction, `VIEW_DIMS` values.
pub fn encode_direction(d: &Vec3) -> [f64; VIEW_DIMS] {
    let mut out = [0.0; VIEW_DIMS];
    for f in 0..VIEW_FREQUENCIES {
        let w = (1 << f) as f64 * std::f64::consts::PI;
        for a in 0..3 {
            out[f * 6 + a] = (w * d[a]).sin();
            out[f * 6 + 3 + a] = (w * d[a]).cos();
        }
    }
    out
}

/// Density and color decoders. Both the disentangled pair and the shared
/// trunk are registered so the ablation can be toggled per call.
#[derive(Clone, Debug)]
pub struct DecoderMLPs {
    pub alpha: Mlp,
    pub rgb: Mlp,
    pub trunk: Mlp,
    pub trunk_alpha: Linear,
    pub trunk_rgb: Linear,
    pub view_dirs: bool,
}

impl DecoderMLPs {
    pub fn register(store: &mut ParamStore, view_dirs: bool, rng: &mut impl Rng) -> Result<Self> {
        let vd = if view_dirs { VIEW_DIMS } else { 0 };
        let relu = Activation::Relu;
        Ok(DecoderMLPs {
            alpha: Mlp::register(store, "render.alpha", &[ALPHA_DIMS, HIDDEN, HIDDEN, 1], relu, rng)?,
            rgb: Mlp::register(store, "render.rgb", &[RGB_DIMS + vd, HIDDEN, HIDDEN, 3], relu, rng)?,
            trunk: Mlp::register(store, "render.trunk", &[EMBED_DIM, HIDDEN, HIDDEN], relu, rng)?,
            trunk_alpha: Linear::register(store, "render.trunk_alpha", HIDDEN, 1, Init::Glorot, rng)?,
            trunk_rgb: Linear::register(store, "render.trunk_rgb", HIDDEN + vd, 3, Init::Glorot, rng)?,
            view_dirs,
        })
    }

    /// Raw (pre-softplus) density for every row of `e`, plus whatever the
    /// color stage reuses.
    fn density(&self, t: &mut Tape, store: &ParamStore, e: Var, disentangled: bool) -> Result<(Var, Option<Var>)> {
        if disentangled {
            let a = t.slice_cols(e, 0, ALPHA_DIMS)?;
            Ok((self.alpha.forward(t, store, a)?, None))
        } else {
            let h = self.trunk.forward(t, store, e)?;
            let h = t.relu(h);
            Ok((self.trunk_alpha.forward(t, store, h)?, Some(h)))
        }
    }

    /// Colors in `[0,1]` from embeddings (or trunk features) and view codes.
    fn color(&self, t: &mut Tape, store: &ParamStore, e: Var, trunk: Option<Var>, view: Option<Var>) -> Result<Var> {
        let raw = match trunk {
            None => {
                let c = t.slice_cols(e, ALPHA_DIMS, EMBED_DIM)?;
                let x = match view {
                    Some(v) => t.concat_cols(&[c, v])?,
                    None => c,
                };
                self.rgb.forward(t, store, x)?
            }
            Some(h) => {
                let x = match view {
                    Some(v) => t.concat_cols(&[h, v])?,
                    None => h,
                };
                self.trunk_rgb.forward(t, store, x)?
            }
        };
        Ok(t.sigmoid(raw))
    }
}

/// Decodes single embeddings: `(sigma >= 0, rgb in [0,1])`.
pub fn decode(
    embedding: &[f64],
    view_dir: &Vec3,
    mlps: &DecoderMLPs,
    store: &ParamStore,
    config: &RenderConfig,
    disentangled: bool,
) -> Result<(f64, [f64; 3])> {
    if embedding.len() != EMBED_DIM {
        return Err(Error::Shape(format!("embedding of length {} (expected {EMBED_DIM})", embedding.len())));
    }
    let mut t = Tape::new();
    let e = t.constant(Tensor::row(embedding.to_vec()));
    let (raw, trunk) = mlps.density(&mut t, store, e, disentangled)?;
    let view = mlps.view_dirs.then(|| t.constant(Tensor::row(encode_direction(view_dir).to_vec())));
    let rgb = mlps.color(&mut t, store, e, trunk, view)?;
    let sigma = config.forced_density.unwrap_or_else(|| softplus(t.scalar_value(raw)) * config.density_scale);
    let c = t.value(rgb).data();
    Ok((sigma, [c[0], c[1], c[2]]))
}

/// Plain-value compositing result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    /// Opacity-normalized expected ray parameter `t`.
    pub depth: f64,
    pub feature: Vec<f64>,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance left after the last used sample.
    pub t_final: f64,
    /// Samples used before early termination.
    pub used: usize,
}

/// Front-to-back compositing with `alpha_i = 1 - exp(-sigma_i delta_i)`,
/// stopping at the first sample whose incoming transmittance is below
/// `transmittance_eps`.
pub fn composite(
    samples: &RaySamples,
    sigma: &[f64],
    rgb: &[[f64; 3]],
    embeddings: &[Vec<f64>],
    config: &RenderConfig,
) -> Result<Composite> {
    let n = samples.len();
    if sigma.len() != n || rgb.len() != n || embeddings.len() != n {
        return Err(Error::Shape(format!(
            "{} samples with {} densities, {} colors, {} embeddings",
            n,
            sigma.len(),
            rgb.len(),
            embeddings.len()
        )));
    }
    let d = embeddings.first().map_or(0, |e| e.len());
    let mut out = Composite {
        rgb: [0.0; 3],
        depth: 0.0,
        feature: vec![0.0; d],
        opacity: 0.0,
        weights: Vec::with_capacity(n),
        t_final: 1.0,
        used: 0,
    };
    let mut acc = 0.0f64;
    let mut wt = 0.0;
    for i in 0..n {
        let trans = (-acc).exp();
        if trans < config.transmittance_eps {
            break;
        }
        let sd = sigma[i] * samples.delta[i];
        let w = trans * (1.0 - (-sd).exp());
        acc += sd;
        out.weights.push(w);
        out.opacity += w;
        wt += w * samples.t[i];
        for c in 0..3 {
            out.rgb[c] += w * rgb[i][c];
        }
        for (f, x) in out.feature.iter_mut().zip(&embeddings[i]) {
            *f += w * x;
        }
        out.used += 1;
    }
    out.t_final = (-acc).exp();
    for c in 0..3 {
        out.rgb[c] += out.t_final * config.background[c];
    }
    out.depth = wt / out.opacity.max(1e-8);
    Ok(out)
}

/// Geometry-only preparation of a batch of rays.
#[derive(Clone, Debug)]
pub struct RayPlan {
    pub n_rays: usize,
    /// Sample ranges per ray, `n_rays + 1` entries.
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// `samples x vertices` trilinear interpolation matrix.
    pub interp: Arc<Csr>,
    /// `samples x VIEW_DIMS`, present when the decoders use view directions.
    pub view: Option<Tensor>,
    /// Converts expected `t` into the reported depth for each ray.
    pub depth_scale: Vec<f64>,
    /// Rays with at least one sample.
    pub hit: Vec<bool>,
}

impl RayPlan {
    /// `depth_axis`: report depth along this unit axis (z-depth for a camera's
    /// forward vector) instead of along the ray.
    pub fn new(
        rays: &[Ray],
        voxels: &SparseVoxelSet,
        vertices: &Lattice,
        config: &RenderConfig,
        view_dirs: bool,
        depth_axis: Option<Vec3>,
    ) -> Result<Self> {
        config.validate()?;
        let cell = voxels.cell_size();
        let mut offsets = vec![0];
        let (mut t, mut delta) = (Vec::new(), Vec::new());
        let mut interp = Csr::new(vertices.len());
        let mut view = Vec::new();
        let mut depth_scale = Vec::with_capacity(rays.len());
        let mut hit = Vec::with_capacity(rays.len());
        for ray in rays {
            let hits = intersect_voxels(ray, voxels);
            let s = sample_ray(&hits, config);
            let code = if view_dirs { encode_direction(&ray.direction) } else { [0.0; VIEW_DIMS] };
            for i in 0..s.len() {
                let c = hits[s.hit[i]].coord;
                let (lo, _) = voxels.cell_aabb(c);
                let p = ray.at(s.t[i]);
                let f = [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).clamp(0.0, 1.0));
                let w = trilinear_weights(f);
                let entries: Vec<(usize, f64)> = (0..8)
                    .filter_map(|tap| {
                        let (dx, dy, dz) = corner_offset(tap);
                        vertices.get(c.offset(dx, dy, dz)).map(|r| (r, w[tap]))
                    })
                    .collect();
                interp.push_row(entries);
                if view_dirs {
                    view.extend_from_slice(&code);
                }
            }
            t.extend_from_slice(&s.t);
            delta.extend_from_slice(&s.delta);
            offsets.push(t.len());
            hit.push(!s.is_empty());
            depth_scale.push(depth_axis.map_or(1.0, |a| ray.direction.dot(&a)));
        }
        let n = t.len();
        Ok(RayPlan {
            n_rays: rays.len(),
            offsets,
            t,
            delta,
            interp: Arc::new(interp),
            view: view_dirs.then(|| Tensor::from_vec(n, VIEW_DIMS, view).expect("view codes")),
            depth_scale,
            hit,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.t.len()
    }

    /// Sub-plan over a subset of rays, in the given order.
    pub fn select(&self, rays: &[usize]) -> RayPlan {
        let mut offsets = vec![0];
        let (mut t, mut delta) = (Vec::new(), Vec::new());
        let mut interp = Csr::new(self.interp.cols());
        let mut view = Vec::new();
        for &r in rays {
            for s in self.offsets[r]..self.offsets[r + 1] {
                interp.push_row(self.interp.row(s));
                if let Some(v) = &self.view {
                    view.extend_from_slice(v.row_slice(s));
                }
            }
            t.extend_from_slice(&self.t[self.offsets[r]..self.offsets[r + 1]]);
            delta.extend_from_slice(&self.delta[self.offsets[r]..self.offsets[r + 1]]);
            offsets.push(t.len());
        }
        let n = t.len();
        RayPlan {
            n_rays: rays.len(),
            offsets,
            t,
            delta,
            interp: Arc::new(interp),
            view: self.view.as_ref().map(|_| Tensor::from_vec(n, VIEW_DIMS, view).expect("view codes")),
            depth_scale: rays.iter().map(|&r| self.depth_scale[r]).collect(),
            hit: rays.iter().map(|&r| self.hit[r]).collect(),
        }
    }
}

/// Per-ray outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `rays x 3`.
    pub rgb: Var,
    /// `rays x 1`, depth per the plan's depth scale.
    pub depth: Var,
    /// `rays x d`.
    pub feature: Var,
    /// `rays x 1`.
    pub opacity: Var,
}

fn ones_segments(offsets: &[usize], n: usize) -> Csr {
    let mut s = Csr::new(n);
    for w in offsets.windows(2) {
        s.push_row((w[0]..w[1]).map(|i| (i, 1.0)));
    }
    s
}

/// Renders a plan against embeddings `emb` (`vertices x d`).
pub fn render_plan(
    t: &mut Tape,
    store: &ParamStore,
    mlps: &DecoderMLPs,
    plan: &RayPlan,
    emb: Var,
    config: &RenderConfig,
    disentangled: bool,
) -> Result<RenderVars> {
    let e = t.spmm(plan.interp.clone(), emb)?;
    let n = plan.n_samples();
    let delta = t.constant(Tensor::column(plan.delta.clone()));
    let (sigma, trunk) = match config.forced_density {
        Some(s) => (t.constant(Tensor::filled(n, 1, s)), None),
        None => {
            let (raw, trunk) = mlps.density(t, store, e, disentangled)?;
            let sp = t.softplus(raw);
            (t.scale(sp, config.density_scale), trunk)
        }
    };
    let sd = t.mul(sigma, delta)?;

    // early termination: keep the prefix of each ray whose incoming
    // transmittance stays above the threshold
    let sdv = t.value(sd).data().to_vec();
    let mut keep = Vec::with_capacity(n);
    let mut offsets = vec![0];
    for r in 0..plan.n_rays {
        let mut acc = 0.0f64;
        for i in plan.offsets[r]..plan.offsets[r + 1] {
            if (-acc).exp() < config.transmittance_eps {
                break;
            }
            keep.push(i as u32);
            acc += sdv[i];
        }
        offsets.push(keep.len());
    }
    let all = keep.len() == n;
    let keep = Arc::new(keep);
    let pick = |t: &mut Tape, v: Var| -> Result<Var> { if all { Ok(v) } else { t.gather_rows(v, keep.clone()) } };
    let sd_k = pick(t, sd)?;
    let e_k = pick(t, e)?;
    let trunk_k = match trunk {
        Some(h) => Some(pick(t, h)?),
        None => None,
    };
    let view_k = match &plan.view {
        Some(v) if mlps.view_dirs => {
            let vc = t.constant(v.clone());
            Some(pick(t, vc)?)
        }
        _ => None,
    };
    let t_k: Vec<f64> = keep.iter().map(|&i| plan.t[i as usize]).collect();
    let nk = keep.len();

    let excl = t.segment_cumsum_exclusive(sd_k, Arc::new(offsets.clone()))?;
    let neg = t.neg(excl);
    let trans = t.exp(neg);
    let neg_sd = t.neg(sd_k);
    let survive = t.exp(neg_sd);
    let neg_survive = t.neg(survive);
    let alpha = t.add_scalar(neg_survive, 1.0);
    let w = t.mul(trans, alpha)?;

    // with forced density and the shared trunk there is no trunk output;
    // colors then come from the disentangled head
    let rgb_i = mlps.color(t, store, e_k, trunk_k, view_k)?;
    let seg = Arc::new(ones_segments(&offsets, nk));
    let wc = t.mul_col(rgb_i, w)?;
    let mut rgb = t.spmm(seg.clone(), wc)?;
    let we = t.mul_col(e_k, w)?;
    let feature = t.spmm(seg.clone(), we)?;
    let opacity = t.spmm(seg.clone(), w)?;
    if config.background.iter().any(|&b| b != 0.0) {
        let neg_op = t.neg(opacity);
        let t_final = t.add_scalar(neg_op, 1.0);
        let bg = t.constant(Tensor::row(config.background.to_vec()));
        let bgc = t.matmul(t_final, bg)?;
        rgb = t.add(rgb, bgc)?;
    }
    let tk = t.constant(Tensor::column(t_k));
    let wt = t.mul(w, tk)?;
    let wt = t.spmm(seg, wt)?;
    let denom = t.clamp(opacity, 1e-8, f64::INFINITY);
    let depth = t.div(wt, denom)?;
    let scale = t.constant(Tensor::column(plan.depth_scale.clone()));
    let depth = t.mul(depth, scale)?;
    Ok(RenderVars { rgb, depth, feature, opacity })
}

/// Plain per-ray render results.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub feature: Tensor,
    pub opacity: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    embeddings: &Tensor,
    vertices: &Lattice,
    voxels: &SparseVoxelSet,
    rays: &[Ray],
    depth_axis: Option<Vec3>,
    mlps: &DecoderMLPs,
    store: &ParamStore,
    config: &RenderConfig,
    disentangled: bool,
) -> Result<RayRender> {
    if embeddings.rows() != vertices.len() || embeddings.cols() != EMBED_DIM {
        return Err(Error::Shape(format!(
            "embeddings {:?} for {} vertices",
            embeddings.shape(),
            vertices.len()
        )));
    }
    let plan = RayPlan::new(rays, voxels, vertices, config, mlps.view_dirs, depth_axis)?;
    let mut t = Tape::new();
    let emb = t.constant(embeddings.clone());
    let out = render_plan(&mut t, store, mlps, &plan, emb, config, disentangled)?;
    Ok(RayRender {
        rgb: t.value(out.rgb).clone(),
        depth: t.value(out.depth).clone(),
        feature: t.value(out.feature).clone(),
        opacity: t.value(out.opacity).clone(),
    })
}

/// Rays through every pixel center of the half-resolution camera, row-major.
pub fn half_resolution_rays(k: &CameraIntrinsics, pose: &Pose) -> Vec<Ray> {
    let h = k.half();
    let mut rays = Vec::with_capacity(h.width * h.height);
    for v in 0..h.height {
        for u in 0..h.width {
            rays.push(pixel_ray_unchecked(&h, pose, u as f64 + 0.5, v as f64 + 0.5));
        }
    }
    rays
}

/// Half-resolution render of the query view.
#[allow(clippy::too_many_arguments)]
pub fn render_view(
    embeddings: &Tensor,
    vertices: &Lattice,
    voxels: &SparseVoxelSet,
    pose: &Pose,
    k: &CameraIntrinsics,
    mlps: &DecoderMLPs,
    store: &ParamStore,
    config: &RenderConfig,
    disentangled: bool,
) -> Result<FeatureImage> {
    k.validate()?;
    let h = k.half();
    let rays = half_resolution_rays(k, pose);
    let r = render_rays(embeddings, vertices, voxels, &rays, Some(pose.forward()), mlps, store, config, disentangled)?;
    Ok(to_feature_image(&r, h.width, h.height))
}

pub fn to_feature_image(r: &RayRender, width: usize, height: usize) -> FeatureImage {
    FeatureImage {
        rgb: Image { width, height, channels: 3, data: r.rgb.data().to_vec() },
        depth: Image { width, height, channels: 1, data: r.depth.data().to_vec() },
        opacity: Image { width, height, channels: 1, data: r.opacity.data().to_vec() },
        feature: Image { width, height, channels: r.feature.cols(), data: r.feature.data().to_vec() },
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::sparse::vertex_set;

    fn random_set(rng: &mut ChaCha8Rng, n: i32, density: f64) -> SparseVoxelSet {
        let mut c = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if rng.gen_bool(density) {
                        c.push(VoxelCoord::new(i, j, k));
                    }
                }
            }
        }
        SparseVoxelSet::new(c, 1, 0.1, Vec3::new(-0.3, 0.2, 0.1)).unwrap()
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let o = Vec3::new(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0));
        let target = Vec3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.2..1.2), rng.gen_range(0.1..1.1));
        Ray::new(o, target - o).unwrap()
    }

    /// Slab test against every occupied cell, then sort.
    fn brute_force_hits(ray: &Ray, voxels: &SparseVoxelSet) -> Vec<VoxelHit> {
        let mut out: Vec<VoxelHit> = voxels
            .coords()
            .iter()
            .filter_map(|&c| {
                let (lo, hi) = voxels.cell_aabb(c);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let (ta, tb) = ((lo[a] - ray.origin[a]) / ray.direction[a], (hi[a] - ray.origin[a]) / ray.direction[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                let t0 = t0.max(0.0);
                (t1 > t0).then_some(VoxelHit { coord: c, t_enter: t0, t_exit: t1 })
            })
            .collect();
        out.sort_by(|x, y| x.t_enter.total_cmp(&y.t_enter).then(x.coord.cmp(&y.coord)));
        out
    }

    #[test]
    fn traversal_matches_slab_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for density in [0.15, 0.5] {
            let set = random_set(&mut rng, 10, density);
            for _ in 0..1000 {
                let r = random_ray(&mut rng);
                let a = intersect_voxels(&r, &set);
                let b = brute_force_hits(&r, &set);
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(&b) {
                    assert_eq!(x.coord, y.coord);
                    assert!((x.t_enter - y.t_enter).abs() < 1e-12 && (x.t_exit - y.t_exit).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_voxel_slab_example() {
        let set = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0)], 1, 1.0, Vec3::zeros()).unwrap();
        let r = Ray::new(Vec3::new(-1.0, 0.05, 0.05), Vec3::x()).unwrap();
        let h = intersect_voxels(&r, &set);
        assert_eq!(h, vec![VoxelHit { coord: VoxelCoord::new(0, 0, 0), t_enter: 1.0, t_exit: 2.0 }]);
        let miss = Ray::new(Vec3::new(-1.0, 1.5, 0.05), Vec3::x()).unwrap();
        assert!(intersect_voxels(&miss, &set).is_empty());
        let empty = SparseVoxelSet::new([], 1, 1.0, Vec3::zeros()).unwrap();
        assert!(intersect_voxels(&r, &empty).is_empty());
    }

    #[test]
    fn sampling_conserves_length() {
        let cfg = RenderConfig::for_voxel_size(0.1);
        let one = [VoxelHit { coord: VoxelCoord::default(), t_enter: 1.0, t_exit: 1.0 + cfg.step_size }];
        let s = sample_ray(&one, &cfg);
        assert_eq!(s.len(), 1);
        assert!((s.t[0] - (1.0 + cfg.step_size / 2.0)).abs() < 1e-15);
        assert!((s.delta[0] - cfg.step_size).abs() < 1e-15);
        assert!(sample_ray(&[], &cfg).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let mut t = rng.gen_range(0.0..1.0);
            let hits: Vec<VoxelHit> = (0..rng.gen_range(1..6))
                .map(|_| {
                    let a = t + rng.gen_range(0.0..0.2);
                    let b = a + rng.gen_range(1e-4..0.17);
                    t = b;
                    VoxelHit { coord: VoxelCoord::default(), t_enter: a, t_exit: b }
                })
                .collect();
            let s = sample_ray(&hits, &cfg);
            let total: f64 = hits.iter().map(|h| h.t_exit - h.t_enter).sum();
            assert!((s.delta.iter().sum::<f64>() - total).abs() < 1e-9);
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            assert!(s.delta.iter().all(|&d| d > 0.0));
            let j = sample_ray_jittered(&hits, &cfg, &mut rng);
            assert_eq!(j.delta, s.delta);
        }
    }

    fn mlps(seed: u64, view_dirs: bool) -> (ParamStore, DecoderMLPs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let m = DecoderMLPs::register(&mut s, view_dirs, &mut rng).unwrap();
        (s, m)
    }

    #[test]
    fn zero_decoders_give_constants() {
        let (mut s, m) = mlps(1, true);
        for id in s.ids().collect::<Vec<_>>() {
            s.value_mut(id).fill(0.0);
        }
        let cfg = RenderConfig::for_voxel_size(0.1);
        for dis in [true, false] {
            let (sigma, rgb) = decode(&[0.3; EMBED_DIM], &Vec3::x(), &m, &s, &cfg, dis).unwrap();
            assert!((sigma - softplus(0.0) * cfg.density_scale).abs() < 1e-12);
            assert_eq!(rgb, [0.5; 3]);
        }
        assert!(decode(&[0.0; 3], &Vec3::x(), &m, &s, &cfg, true).is_err());
    }

    #[test]
    fn densities_are_non_negative_and_toggle_matters() {
        let (s, m) = mlps(2, true);
        let cfg = RenderConfig::for_voxel_size(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut differs = false;
        for _ in 0..10_000 {
            let e: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (sigma, rgb) = decode(&e, &Vec3::z(), &m, &s, &cfg, true).unwrap();
            assert!(sigma >= 0.0 && rgb.iter().all(|c| (0.0..=1.0).contains(c)));
            if differs {
                continue;
            }
            let (s2, r2) = decode(&e, &Vec3::z(), &m, &s, &cfg, false).unwrap();
            differs = s2 != sigma || r2 != rgb;
        }
        assert!(differs);
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> RaySamples {
        let mut t = 0.5;
        let mut s = RaySamples::default();
        for _ in 0..n {
            let d = rng.gen_range(0.001..0.05);
            s.t.push(t + d / 2.0);
            s.delta.push(d);
            s.hit.push(0);
            t += d;
        }
        s
    }

    #[test]
    fn composite_limits_and_conservation() {
        let cfg = RenderConfig::for_voxel_size(0.1);
        let one = RaySamples { t: vec![2.0], delta: vec![0.1], hit: vec![0] };
        let c = composite(&one, &[1e6], &[[0.2, 0.4, 0.6]], &[vec![1.0]], &cfg).unwrap();
        assert!((c.opacity - 1.0).abs() < 1e-12 && c.depth == 2.0);
        assert!((c.rgb[1] - 0.4).abs() < 1e-12);
        let mut bg = cfg.clone();
        bg.background = [0.1, 0.2, 0.3];
        let c = composite(&one, &[0.0], &[[0.9; 3]], &[vec![1.0]], &bg).unwrap();
        assert_eq!((c.rgb, c.opacity), ([0.1, 0.2, 0.3], 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.gen_range(1..60);
            let s = random_samples(&mut rng, n);
            let sigma: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..200.0) }).collect();
            let rgb = vec![[0.5; 3]; n];
            let e = vec![vec![0.0]; n];
            let c = composite(&s, &sigma, &rgb, &e, &cfg).unwrap();
            assert!(c.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!((c.weights.iter().sum::<f64>() + c.t_final - 1.0).abs() < 1e-9);
        }
    }

    fn two_voxel_scene() -> (SparseVoxelSet, Lattice) {
        let set = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)], 1, 0.1, Vec3::zeros()).unwrap();
        let v = vertex_set(&set);
        (set, v)
    }

    fn rays_into(set: &SparseVoxelSet, rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray> {
        let (lo, hi) = set.world_bounds().unwrap();
        (0..n)
            .map(|_| {
                let target = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
                let o = Vec3::new(rng.gen_range(-0.5..0.7), rng.gen_range(-0.5..0.6), -0.4);
                Ray::new(o, target - o).unwrap()
            })
            .collect()
    }

    #[test]
    fn tape_path_matches_plain_composite() {
        let (s, m) = mlps(5, true);
        let (set, verts) = two_voxel_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = Tensor::from_vec(verts.len(), EMBED_DIM, (0..verts.len() * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cfg = RenderConfig::for_voxel_size(0.1);
        let rays = rays_into(&set, &mut rng, 20);
        let grid = crate::sparse::SparseFeatureGrid::new(Arc::new(verts.clone()), emb.clone()).unwrap();
        for dis in [true, false] {
            let out = render_rays(&emb, &verts, &set, &rays, None, &m, &s, &cfg, dis).unwrap();
            for (r, ray) in rays.iter().enumerate() {
                let hits = intersect_voxels(ray, &set);
                let smp = sample_ray(&hits, &cfg);
                let mut sig = Vec::new();
                let mut rgb = Vec::new();
                let mut es = Vec::new();
                for &tt in &smp.t {
                    let e = crate::sparse::gather_corner_features(&grid, &set, &ray.at(tt)).unwrap().interpolate();
                    let (a, b) = decode(&e, &ray.direction, &m, &s, &cfg, dis).unwrap();
                    sig.push(a);
                    rgb.push(b);
                    es.push(e);
                }
                let c = composite(&smp, &sig, &rgb, &es, &cfg).unwrap();
                assert!((out.opacity.get(r, 0) - c.opacity).abs() < 1e-9);
                assert!((out.depth.get(r, 0) - c.depth).abs() < 1e-9);
                for ch in 0..3 {
                    assert!((out.rgb.get(r, ch) - c.rgb[ch]).abs() < 1e-9);
                }
                for ch in 0..EMBED_DIM {
                    assert!((out.feature.get(r, ch) - c.feature[ch]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn renderer_passes_grad_check() {
        let (mut s, m) = mlps(7, true);
        let (set, verts) = two_voxel_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb: Vec<f64> = (0..verts.len() * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.register("emb", &[verts.len(), EMBED_DIM], Tensor::from_vec(verts.len(), EMBED_DIM, emb).unwrap()).unwrap();
        let mut cfg = RenderConfig::for_voxel_size(0.1);
        // keep densities moderate so no sample crosses the early-stop
        // threshold under perturbation
        cfg.density_scale = 5.0;
        let rays = rays_into(&set, &mut rng, 6);
        let plan = RayPlan::new(&rays, &set, &verts, &cfg, true, None).unwrap();
        let target = Tensor::filled(rays.len(), 3, 0.3);
        for dis in [true, false] {
            let r = grad_check(&mut s, 1e-3, 400, 9, |t, st| {
                let e = t.param_by_name(st, "emb")?;
                let out = render_plan(t, st, &m, &plan, e, &cfg, dis)?;
                let tg = t.constant(target.clone());
                let d = t.sub(out.rgb, tg)?;
                let d = t.square(d);
                let l = t.mean(d)?;
                let dm = t.mean(out.depth)?;
                let fm = t.square(out.feature);
                let fm = t.mean(fm)?;
                let l = t.add(l, dm)?;
                t.add(l, fm)
            })
            .unwrap();
            assert!(r.checked > 200, "{r:?}");
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn view_render_dims_and_consistency() {
        let (s, m) = mlps(9, true);
        let (set, verts) = two_voxel_scene();
        let emb = Tensor::filled(verts.len(), EMBED_DIM, 0.2);
        let cfg = RenderConfig::for_voxel_size(0.1);
        let k = CameraIntrinsics::from_fov(16, 12, 60.0).unwrap();
        let pose = Pose::look_at(Vec3::new(0.1, 0.05, -0.6), Vec3::new(0.1, 0.05, 0.05), Vec3::y()).unwrap();
        let img = render_view(&emb, &verts, &set, &pose, &k, &m, &s, &cfg, true).unwrap();
        assert_eq!((img.width(), img.height(), img.rgb.channels, img.feature_dim()), (8, 6, 3, EMBED_DIM));
        assert!(img.opacity.data.iter().any(|&o| o > 0.5));
        assert!(img.opacity.data.iter().all(|&o| (0.0..=1.0 + 1e-12).contains(&o)));
        let rays = half_resolution_rays(&k, &pose);
        let r = render_rays(&emb, &verts, &set, &rays, Some(pose.forward()), &m, &s, &cfg, true).unwrap();
        assert_eq!(img, to_feature_image(&r, 8, 6));
        let dup = vec![rays[20]; 3];
        let r = render_rays(&emb, &verts, &set, &dup, None, &m, &s, &cfg, true).unwrap();
        assert_eq!(r.rgb.row_slice(0), r.rgb.row_slice(2));

        let empty = SparseVoxelSet::new([], 1, 0.1, Vec3::zeros()).unwrap();
        let img = render_view(&Tensor::zeros(0, EMBED_DIM), &Lattice::empty(1, crate::sparse::LatticeKind::Vertex), &empty, &pose, &k, &m, &s, &cfg, true)
            .unwrap();
        assert!(img.opacity.data.iter().all(|&o| o == 0.0));
        assert!(img.rgb.data.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn opaque_voxel_depth_matches_slab_entry() {
        let (s, m) = mlps(10, false);
        let set = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0)], 1, 1.0, Vec3::new(-0.5, -0.5, 2.0)).unwrap();
        let verts = vertex_set(&set);
        let emb = Tensor::zeros(verts.len(), EMBED_DIM);
        let mut cfg = RenderConfig::for_voxel_size(1.0);
        cfg.forced_density = Some(1e4);
        let k = CameraIntrinsics::from_fov(16, 16, 20.0).unwrap();
        let pose = Pose::identity();
        let img = render_view(&emb, &verts, &set, &pose, &k, &m, &s, &cfg, true).unwrap();
        for d in &img.depth.data {
            // every pixel hits the front face z = 2
            assert!((d - 2.0).abs() <= cfg.step_size, "{d}");
        }
    }

    #[test]
    fn interpolation_is_continuous_across_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 6, 0.6);
        let verts = vertex_set(&set);
        let emb = Tensor::from_vec(verts.len(), EMBED_DIM, (0..verts.len() * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grid = crate::sparse::SparseFeatureGrid::new(Arc::new(verts), emb).unwrap();
        let s = set.cell_size();
        let mut checked = 0;
        for &c in set.coords() {
            for (a, n) in [(0, c.offset(1, 0, 0)), (1, c.offset(0, 1, 0)), (2, c.offset(0, 0, 1))] {
                if !set.contains(n) {
                    continue;
                }
                let (lo, hi) = set.cell_aabb(c);
                let mut p = lo + (hi - lo).component_mul(&Vec3::new(rng.gen(), rng.gen(), rng.gen()));
                p[a] = hi[a];
                let (mut before, mut after) = (p, p);
                before[a] -= 1e-6 * s;
                after[a] += 1e-6 * s;
                let x = crate::sparse::gather_corner_features(&grid, &set, &before).unwrap().interpolate();
                let y = crate::sparse::gather_corner_features(&grid, &set, &after).unwrap().interpolate();
                let diff = x.iter().zip(&y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-5, "{diff}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn convex_opaque_depth_stays_in_first_interval() {
        let (s, m) = mlps(12, true);
        let coords: Vec<VoxelCoord> = (0..3).flat_map(|i| (0..3).flat_map(move |j| (0..2).map(move |k| VoxelCoord::new(i, j, k)))).collect();
        let set = SparseVoxelSet::new(coords, 1, 0.1, Vec3::zeros()).unwrap();
        let verts = vertex_set(&set);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let emb = Tensor::from_vec(verts.len(), EMBED_DIM, (0..verts.len() * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut cfg = RenderConfig::for_voxel_size(0.1);
        cfg.forced_density = Some(1e5);
        let rays = rays_into(&set, &mut rng, 300);
        let out = render_rays(&emb, &verts, &set, &rays, None, &m, &s, &cfg, true).unwrap();
        for (r, ray) in rays.iter().enumerate() {
            let hits = intersect_voxels(ray, &set);
            let (lo, hi) = set.world_bounds().unwrap();
            let (a, b) = Aabb::new(lo, hi).ray_interval(ray).unwrap();
            assert!(!hits.is_empty());
            let d = out.depth.get(r, 0);
            assert!(d >= a.max(0.0) - 1e-12 && d <= b + 1e-12, "{d} outside [{a}, {b}]");
            assert!(d >= hits[0].t_enter - 1e-12);
        }
    }
}
