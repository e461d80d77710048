//! Point-cloud encoder: colored points to per-vertex embeddings through a
//! residual stack of submanifold convolutions on the vertex lattice.

use std::sync::Arc;

use rand::Rng;
use rustc_hash::FxHashMap;

use crate::autodiff::{ParamStore, Rulebook, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{world_to_voxel, PointCloud, Vec3};
use crate::nn::{Conv, Init, Linear, LEAKY_SLOPE};
use crate::sparse::{corner_offset, neighbor_rulebook, vertex_set, Lattice, SparseFeatureGrid, SparseVoxelSet, VoxelCoord};

/// Embedding width `d`.
pub const EMBED_DIM: usize = 32;
pub const DEFAULT_BLOCKS: usize = 4;
pub const PREFIX: &str = "enc.";

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub lift: Linear,
    pub blocks: Vec<(Conv, Conv)>,
    pub out: Linear,
}

impl EncoderParams {
    pub fn register(store: &mut ParamStore, blocks: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = EMBED_DIM;
        let lift = Linear::register(store, "enc.lift", 3, d, Init::Glorot, rng)?;
        let blocks = (0..blocks)
            .map(|b| {
                Ok((
                    Conv::register(store, &format!("enc.block{b}.conv0"), 27, d, d, Init::Glorot, rng)?,
                    Conv::register(store, &format!("enc.block{b}.conv1"), 27, d, d, Init::Glorot, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::register(store, "enc.out", d, d, Init::Glorot, rng)?;
        Ok(EncoderParams { lift, blocks, out })
    }

    /// `colors` is `M x 3`, one row per vertex of `rb`'s lattice.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, colors: Var, rb: &Arc<Rulebook>) -> Result<Var> {
        let mut h = self.lift.forward(t, store, colors)?;
        for (c0, c1) in &self.blocks {
            let y = t.leaky_relu(h, LEAKY_SLOPE);
            let y = c0.forward(t, store, y, rb)?;
            let y = t.leaky_relu(y, LEAKY_SLOPE);
            let y = c1.forward(t, store, y, rb)?;
            h = t.add(h, y)?;
        }
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        self.out.forward(t, store, h)
    }
}

/// Everything about a cloud the encoder needs that does not depend on the
/// weights; build once, reuse every step.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub voxels: SparseVoxelSet,
    pub vertices: Arc<Lattice>,
    /// Mean color of the points in the voxels incident to each vertex.
    pub colors: Tensor,
    pub rulebook: Arc<Rulebook>,
}

impl EncoderInput {
    pub fn new(cloud: &PointCloud, voxel_size: f64, origin: Vec3) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Empty("cannot encode an empty point cloud".into()));
        }
        let mut per_voxel: FxHashMap<VoxelCoord, ([f64; 3], f64)> = FxHashMap::default();
        for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
            let e = per_voxel.entry(world_to_voxel(p, &origin, voxel_size)?).or_insert(([0.0; 3], 0.0));
            (0..3).for_each(|a| e.0[a] += c[a]);
            e.1 += 1.0;
        }
        let voxels = SparseVoxelSet::new(per_voxel.keys().copied(), 1, voxel_size, origin)?;
        let vertices = Arc::new(vertex_set(&voxels));
        let mut colors = Tensor::zeros(vertices.len(), 3);
        for (r, &v) in vertices.coords().iter().enumerate() {
            let (mut sum, mut n) = ([0.0; 3], 0.0);
            // voxel v - delta has v as its corner delta
            for tap in 0..8 {
                let (dx, dy, dz) = corner_offset(tap);
                if let Some((s, m)) = per_voxel.get(&v.offset(-dx, -dy, -dz)) {
                    (0..3).for_each(|a| sum[a] += s[a]);
                    n += m;
                }
            }
            if n > 0.0 {
                colors.row_slice_mut(r).iter_mut().zip(sum).for_each(|(o, s)| *o = s / n);
            }
        }
        let rulebook = Arc::new(neighbor_rulebook(&vertices, &vertices)?);
        Ok(EncoderInput { voxels, vertices, colors, rulebook })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, params: &EncoderParams) -> Result<Var> {
        let x = t.constant(self.colors.clone());
        params.forward(t, store, x, &self.rulebook)
    }
}

/// `(V, F)` for a cloud, plus the occupied voxels it was built on.
pub fn encode(
    cloud: &PointCloud,
    voxel_size: f64,
    origin: Vec3,
    params: &EncoderParams,
    store: &ParamStore,
) -> Result<(SparseVoxelSet, SparseFeatureGrid)> {
    let input = EncoderInput::new(cloud, voxel_size, origin)?;
    let mut t = Tape::new();
    let f = input.forward(&mut t, store, params)?;
    let grid = SparseFeatureGrid::new(input.vertices.clone(), t.value(f).clone())?;
    Ok((input.voxels, grid))
}
