//! Sparse lattices (voxel-centered and vertex), feature grids over them and
//! the rulebooks that drive sparse convolutions on the tape.
//!
//! A [`Lattice`] is a sorted, deduplicated coordinate list with a hash index.
//! Convolutions never touch coordinates directly: a builder turns an
//! (input lattice, output lattice) pair into a [`Rulebook`], and
//! [`Tape::conv`] does the arithmetic. Tap order for 3x3x3 kernels is
//! `(dx+1)*9 + (dy+1)*3 + (dz+1)`; for 2x2x2 kernels it is `dx*4 + dy*2 + dz`.

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::autodiff::{Rulebook, Tape, Tensor, NO_NEIGHBOR};
use crate::error::{Error, Result};
use crate::geometry::{world_to_voxel, PointCloud, Vec3};

/// Coordinates must stay within this distance of the lattice origin.
pub const COORD_LIMIT: i32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelCoord {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelCoord {
    #[inline]
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelCoord { i, j, k }
    }

    #[inline]
    pub fn offset(self, di: i32, dj: i32, dk: i32) -> Self {
        VoxelCoord::new(self.i + di, self.j + dj, self.k + dk)
    }

    /// Parent cell one level coarser (floor division by 2).
    #[inline]
    pub fn parent(self) -> Self {
        VoxelCoord::new(self.i.div_euclid(2), self.j.div_euclid(2), self.k.div_euclid(2))
    }

    /// Child `2c + delta` for `delta` in `{0,1}^3`, indexed `dx*4 + dy*2 + dz`.
    #[inline]
    pub fn child(self, tap: usize) -> Self {
        let (dx, dy, dz) = corner_offset(tap);
        VoxelCoord::new(2 * self.i + dx, 2 * self.j + dy, 2 * self.k + dz)
    }

    pub fn in_range(self) -> bool {
        [self.i, self.j, self.k].iter().all(|v| v.abs() <= COORD_LIMIT)
    }

    pub fn min(self, o: Self) -> Self {
        VoxelCoord::new(self.i.min(o.i), self.j.min(o.j), self.k.min(o.k))
    }

    pub fn max(self, o: Self) -> Self {
        VoxelCoord::new(self.i.max(o.i), self.j.max(o.j), self.k.max(o.k))
    }
}

/// `(dx, dy, dz)` in `{0,1}^3` of a 2x2x2 tap.
#[inline]
pub fn corner_offset(tap: usize) -> (i32, i32, i32) {
    ((tap >> 2) as i32 & 1, (tap >> 1) as i32 & 1, tap as i32 & 1)
}

/// `(dx, dy, dz)` in `{-1,0,1}^3` of a 3x3x3 tap.
#[inline]
pub fn neighbor_offset(tap: usize) -> (i32, i32, i32) {
    (tap as i32 / 9 - 1, (tap as i32 / 3) % 3 - 1, tap as i32 % 3 - 1)
}

pub const CENTER_TAP: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatticeKind {
    Voxel,
    Vertex,
}

/// Inclusive coordinate box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoordBox {
    pub lo: VoxelCoord,
    pub hi: VoxelCoord,
}

impl CoordBox {
    pub fn contains(&self, c: VoxelCoord) -> bool {
        (self.lo.i..=self.hi.i).contains(&c.i)
            && (self.lo.j..=self.hi.j).contains(&c.j)
            && (self.lo.k..=self.hi.k).contains(&c.k)
    }

    pub fn grow(&self, r: i32) -> CoordBox {
        CoordBox { lo: self.lo.offset(-r, -r, -r), hi: self.hi.offset(r, r, r) }
    }

    /// Box of the parent cells.
    pub fn coarsened(&self) -> CoordBox {
        CoordBox { lo: self.lo.parent(), hi: self.hi.parent() }
    }
}

#[derive(Clone, Debug)]
pub struct Lattice {
    coords: Vec<VoxelCoord>,
    index: FxHashMap<VoxelCoord, u32>,
    stride: u32,
    kind: LatticeKind,
}

impl PartialEq for Lattice {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords && self.stride == other.stride && self.kind == other.kind
    }
}

impl Lattice {
    /// Sorts and deduplicates `coords`.
    pub fn new(coords: impl IntoIterator<Item = VoxelCoord>, stride: u32, kind: LatticeKind) -> Result<Self> {
        if stride == 0 || !stride.is_power_of_two() {
            return Err(Error::InvalidInput(format!("stride {stride} is not a power of two")));
        }
        let mut coords: Vec<VoxelCoord> = coords.into_iter().collect();
        if let Some(c) = coords.iter().find(|c| !c.in_range()) {
            return Err(Error::InvalidInput(format!("coordinate {c:?} outside +-2^20")));
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self::from_sorted(coords, stride, kind))
    }

    fn from_sorted(coords: Vec<VoxelCoord>, stride: u32, kind: LatticeKind) -> Self {
        let mut index = FxHashMap::default();
        index.reserve(coords.len());
        for (n, &c) in coords.iter().enumerate() {
            index.insert(c, n as u32);
        }
        Lattice { coords, index, stride, kind }
    }

    pub fn empty(stride: u32, kind: LatticeKind) -> Self {
        Self::from_sorted(Vec::new(), stride, kind)
    }

    #[inline]
    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn stride(&self) -> u32 {
        self.stride
    }

    #[inline]
    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(&c).map(|&i| i as usize)
    }

    #[inline]
    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn bounds(&self) -> Option<CoordBox> {
        let first = *self.coords.first()?;
        let (lo, hi) = self.coords.iter().fold((first, first), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        Some(CoordBox { lo, hi })
    }

    pub fn is_subset_of(&self, other: &Lattice) -> bool {
        self.coords.iter().all(|&c| other.contains(c))
    }

    pub fn union(&self, other: &Lattice) -> Lattice {
        let mut c = self.coords.clone();
        c.extend_from_slice(&other.coords);
        c.sort_unstable();
        c.dedup();
        Self::from_sorted(c, self.stride, self.kind)
    }

    pub fn filter(&self, keep: impl Fn(VoxelCoord) -> bool) -> Lattice {
        Self::from_sorted(self.coords.iter().copied().filter(|&c| keep(c)).collect(), self.stride, self.kind)
    }

    /// Parent cells of every coordinate: a coarse cell is present iff at
    /// least one of its 8 children is.
    pub fn coarsened(&self) -> Lattice {
        let mut c: Vec<VoxelCoord> = self.coords.iter().map(|c| c.parent()).collect();
        c.sort_unstable();
        c.dedup();
        Self::from_sorted(c, self.stride * 2, self.kind)
    }

    /// All coordinates within Chebyshev distance 1, optionally clipped.
    pub fn dilated(&self, clip: Option<CoordBox>) -> Lattice {
        let mut c = Vec::with_capacity(self.coords.len() * 4);
        for &p in &self.coords {
            for t in 0..27 {
                let (dx, dy, dz) = neighbor_offset(t);
                let q = p.offset(dx, dy, dz);
                if clip.map_or(true, |b| b.contains(q)) {
                    c.push(q);
                }
            }
        }
        c.sort_unstable();
        c.dedup();
        Self::from_sorted(c, self.stride, self.kind)
    }

    /// Octree children `2c + {0,1}^3` of every coordinate.
    pub fn subdivided(&self) -> Result<Lattice> {
        if self.stride < 2 {
            return Err(Error::Precondition("cannot subdivide a stride-1 lattice".into()));
        }
        let mut c = Vec::with_capacity(self.coords.len() * 8);
        for &p in &self.coords {
            c.extend((0..8).map(|t| p.child(t)));
        }
        c.sort_unstable();
        Ok(Self::from_sorted(c, self.stride / 2, self.kind))
    }
}

/// 3x3x3 rulebook gathering, for each output coordinate `q`, the inputs at
/// `q + offset`. Both lattices must share a stride.
pub fn neighbor_rulebook(input: &Lattice, output: &Lattice) -> Result<Rulebook> {
    if input.stride != output.stride {
        return Err(Error::Precondition(format!(
            "stride-1 convolution between strides {} and {}",
            input.stride, output.stride
        )));
    }
    let mut nbr = vec![NO_NEIGHBOR; output.len() * 27];
    for (q, &c) in output.coords.iter().enumerate() {
        for t in 0..27 {
            let (dx, dy, dz) = neighbor_offset(t);
            if let Some(&i) = input.index.get(&c.offset(dx, dy, dz)) {
                nbr[q * 27 + t] = i;
            }
        }
    }
    Rulebook::new(input.len(), output.len(), 27, nbr)
}

/// Stride-2, 2x2x2 rulebook from `input` onto its coarsened lattice.
pub fn downsample_rulebook(input: &Lattice) -> Result<(Lattice, Rulebook)> {
    let out = input.coarsened();
    let mut nbr = vec![NO_NEIGHBOR; out.len() * 8];
    for (q, &c) in out.coords.iter().enumerate() {
        for t in 0..8 {
            if let Some(&i) = input.index.get(&c.child(t)) {
                nbr[q * 8 + t] = i;
            }
        }
    }
    let rb = Rulebook::new(input.len(), out.len(), 8, nbr)?;
    Ok((out, rb))
}

/// Transposed 2x2x2 rulebook: each output coordinate `c` reads its parent
/// through tap `c - 2*parent`. `output` must be one level finer than
/// `input`; outputs without a parent get no contribution.
pub fn upsample_rulebook(input: &Lattice, output: &Lattice) -> Result<Rulebook> {
    if input.stride != output.stride * 2 {
        return Err(Error::Precondition(format!(
            "transposed convolution from stride {} onto stride {}",
            input.stride, output.stride
        )));
    }
    let mut nbr = vec![NO_NEIGHBOR; output.len() * 8];
    for (q, &c) in output.coords.iter().enumerate() {
        let p = c.parent();
        if let Some(&i) = input.index.get(&p) {
            let t = ((c.i - 2 * p.i) * 4 + (c.j - 2 * p.j) * 2 + (c.k - 2 * p.k)) as usize;
            nbr[q * 8 + t] = i;
        }
    }
    Rulebook::new(input.len(), output.len(), 8, nbr)
}

/// Occupied cells on the voxel lattice, with their world placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelSet {
    pub lattice: Arc<Lattice>,
    /// Edge of a stride-1 cell, meters.
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl SparseVoxelSet {
    pub fn new(coords: impl IntoIterator<Item = VoxelCoord>, stride: u32, voxel_size: f64, origin: Vec3) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidInput(format!("voxel size {voxel_size}")));
        }
        Ok(SparseVoxelSet {
            lattice: Arc::new(Lattice::new(coords, stride, LatticeKind::Voxel)?),
            voxel_size,
            origin,
        })
    }

    pub fn with_lattice(&self, lattice: Lattice) -> Self {
        SparseVoxelSet { lattice: Arc::new(lattice), voxel_size: self.voxel_size, origin: self.origin }
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        self.lattice.coords()
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.lattice.contains(c)
    }

    /// Edge length of one cell at this set's stride.
    pub fn cell_size(&self) -> f64 {
        self.voxel_size * self.lattice.stride() as f64
    }

    /// World-space box of cell `c`.
    pub fn cell_aabb(&self, c: VoxelCoord) -> (Vec3, Vec3) {
        let s = self.cell_size();
        let lo = self.origin + Vec3::new(c.i as f64, c.j as f64, c.k as f64) * s;
        (lo, lo + Vec3::repeat(s))
    }

    /// World-space box of the whole set.
    pub fn world_bounds(&self) -> Option<(Vec3, Vec3)> {
        let b = self.lattice.bounds()?;
        Some((self.cell_aabb(b.lo).0, self.cell_aabb(b.hi).1))
    }

    /// Occupied cell whose closed box contains `p`; a point on a shared face
    /// prefers the upper cell.
    pub fn containing_cell(&self, p: &Vec3) -> Option<VoxelCoord> {
        let s = self.cell_size();
        let c = world_to_voxel(p, &self.origin, s).ok()?;
        if self.contains(c) {
            return Some(c);
        }
        let q = (p - self.origin) / s;
        let on_face = [q.x == c.i as f64, q.y == c.j as f64, q.z == c.k as f64];
        for t in 1..8 {
            let (dx, dy, dz) = corner_offset(t);
            let d = [dx, dy, dz];
            if (0..3).all(|a| d[a] == 0 || on_face[a]) {
                let n = c.offset(-dx, -dy, -dz);
                if self.contains(n) {
                    return Some(n);
                }
            }
        }
        None
    }
}

/// Per-coordinate feature rows over a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureGrid {
    pub lattice: Arc<Lattice>,
    pub features: Tensor,
}

impl SparseFeatureGrid {
    pub fn new(lattice: Arc<Lattice>, features: Tensor) -> Result<Self> {
        if features.rows() != lattice.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} coordinates",
                features.rows(),
                lattice.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("sparse feature grid".into()));
        }
        Ok(SparseFeatureGrid { lattice, features })
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn feature(&self, c: VoxelCoord) -> Option<&[f64]> {
        self.lattice.get(c).map(|i| self.features.row_slice(i))
    }
}

/// Vertex embeddings `(V, F)`.
pub type VertexEmbeddingGrid = SparseFeatureGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    /// Spatial extent per axis, 2 or 3.
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    /// `size^3 * cin` rows by `cout` columns, tap-major.
    pub weights: Tensor,
    /// `1 x cout`.
    pub bias: Tensor,
}

impl ConvKernel {
    pub fn new(size: usize, cin: usize, cout: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        if size != 2 && size != 3 {
            return Err(Error::InvalidInput(format!("kernel size {size}")));
        }
        let taps = size * size * size;
        if weights.shape() != (taps * cin, cout) || bias.shape() != (1, cout) {
            return Err(Error::Shape(format!(
                "kernel {size}^3 {cin}->{cout} with weights {:?} and bias {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("convolution kernel".into()));
        }
        Ok(ConvKernel { size, cin, cout, weights, bias })
    }

    pub fn zeros(size: usize, cin: usize, cout: usize) -> Self {
        let taps = size * size * size;
        ConvKernel { size, cin, cout, weights: Tensor::zeros(taps * cin, cout), bias: Tensor::zeros(1, cout) }
    }

    pub fn taps(&self) -> usize {
        self.size * self.size * self.size
    }
}

fn apply_kernel(grid: &SparseFeatureGrid, kernel: &ConvKernel, out: Lattice, rb: Rulebook) -> Result<SparseFeatureGrid> {
    if grid.channels() != kernel.cin {
        return Err(Error::Shape(format!(
            "grid has {} channels, kernel expects {}",
            grid.channels(),
            kernel.cin
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.features.clone());
    let w = t.constant(kernel.weights.clone());
    let b = t.constant(kernel.bias.clone());
    let y = t.conv(x, w, Arc::new(rb))?;
    let y = t.add_row(y, b)?;
    SparseFeatureGrid::new(Arc::new(out), t.value(y).clone())
}

/// Sparse convolution. Stride 1 takes a 3x3x3 kernel and keeps the input
/// coordinates (or their Chebyshev-1 dilation when `dilate`); stride 2
/// takes a 2x2x2 kernel and writes to the parent cells.
pub fn sparse_conv(grid: &SparseFeatureGrid, kernel: &ConvKernel, stride_out: u32, dilate: bool) -> Result<SparseFeatureGrid> {
    match (stride_out, kernel.size, dilate) {
        (1, 3, false) => {
            let rb = neighbor_rulebook(&grid.lattice, &grid.lattice)?;
            apply_kernel(grid, kernel, (*grid.lattice).clone(), rb)
        }
        (1, 3, true) => {
            let out = grid.lattice.dilated(None);
            let rb = neighbor_rulebook(&grid.lattice, &out)?;
            apply_kernel(grid, kernel, out, rb)
        }
        (2, 2, false) => {
            let (out, rb) = downsample_rulebook(&grid.lattice)?;
            apply_kernel(grid, kernel, out, rb)
        }
        _ => Err(Error::Precondition(format!(
            "unsupported convolution: stride {stride_out}, kernel {}, dilate {dilate}",
            kernel.size
        ))),
    }
}

/// Coordinate-generating 2x2x2 transposed convolution: every input cell
/// produces all 8 children at half the stride.
pub fn generative_transposed_conv(grid: &SparseFeatureGrid, kernel: &ConvKernel) -> Result<SparseFeatureGrid> {
    if kernel.size != 2 {
        return Err(Error::Precondition("transposed convolution needs a 2x2x2 kernel".into()));
    }
    let out = grid.lattice.subdivided()?;
    let rb = upsample_rulebook(&grid.lattice, &out)?;
    apply_kernel(grid, kernel, out, rb)
}

/// Keeps the coordinates with `sigmoid(logit) > tau`.
pub fn prune(
    grid: &SparseFeatureGrid,
    logits: impl Fn(VoxelCoord) -> Option<f64>,
    tau: f64,
) -> Result<SparseFeatureGrid> {
    let mut keep = Vec::new();
    for (n, &c) in grid.lattice.coords().iter().enumerate() {
        let l = logits(c).ok_or_else(|| Error::Precondition(format!("no logit for {c:?}")))?;
        if crate::autodiff::sigmoid(l) > tau {
            keep.push(n);
        }
    }
    let lattice =
        Lattice::from_sorted(keep.iter().map(|&n| grid.lattice.coords()[n]).collect(), grid.lattice.stride, grid.lattice.kind);
    let cols = grid.channels();
    let mut data = Vec::with_capacity(keep.len() * cols);
    for &n in &keep {
        data.extend_from_slice(grid.features.row_slice(n));
    }
    SparseFeatureGrid::new(Arc::new(lattice), Tensor::from_vec(keep.len(), cols, data)?)
}

/// Occupied cells of a cloud plus the mean point color per cell.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64, origin: Vec3) -> Result<(SparseVoxelSet, SparseFeatureGrid)> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot voxelize an empty point cloud".into()));
    }
    if cloud.colors.len() != cloud.positions.len() {
        return Err(Error::Shape(format!(
            "{} positions with {} colors",
            cloud.positions.len(),
            cloud.colors.len()
        )));
    }
    let mut acc: FxHashMap<VoxelCoord, ([f64; 3], usize)> = FxHashMap::default();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let v = world_to_voxel(p, &origin, voxel_size)?;
        let e = acc.entry(v).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += c[a];
        }
        e.1 += 1;
    }
    let set = SparseVoxelSet::new(acc.keys().copied(), 1, voxel_size, origin)?;
    let mut data = Vec::with_capacity(set.len() * 3);
    for c in set.coords() {
        let (sum, n) = acc[c];
        data.extend(sum.iter().map(|s| s / n as f64));
    }
    let grid = SparseFeatureGrid::new(set.lattice.clone(), Tensor::from_vec(set.len(), 3, data)?)?;
    Ok((set, grid))
}

/// Corner lattice points `c + {0,1}^3` of every occupied cell.
pub fn vertex_set(voxels: &SparseVoxelSet) -> Lattice {
    let mut c = Vec::with_capacity(voxels.len() * 8);
    for &v in voxels.coords() {
        c.extend((0..8).map(|t| {
            let (dx, dy, dz) = corner_offset(t);
            v.offset(dx, dy, dz)
        }));
    }
    c.sort_unstable();
    c.dedup();
    Lattice::from_sorted(c, voxels.lattice.stride(), LatticeKind::Vertex)
}

/// Trilinear weights of the 8 corners (tap order `dx*4 + dy*2 + dz`) at
/// fractional in-cell position `f`.
#[inline]
pub fn trilinear_weights(f: [f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (t, wt) in w.iter_mut().enumerate() {
        let (dx, dy, dz) = corner_offset(t);
        let ax = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let ay = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let az = if dz == 1 { f[2] } else { 1.0 - f[2] };
        *wt = ax * ay * az;
    }
    w
}

/// The 8 corner embeddings around a world point, with trilinear weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerSample {
    pub voxel: VoxelCoord,
    /// Row in the embedding grid, `None` where the vertex has no embedding.
    pub rows: [Option<usize>; 8],
    pub weights: [f64; 8],
    /// `8 x d`, zero rows for missing vertices.
    pub values: Vec<Vec<f64>>,
}

impl CornerSample {
    pub fn missing(&self) -> [bool; 8] {
        self.rows.map(|r| r.is_none())
    }

    pub fn interpolate(&self) -> Vec<f64> {
        let d = self.values.first().map_or(0, |v| v.len());
        let mut out = vec![0.0; d];
        for (w, v) in self.weights.iter().zip(&self.values) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        out
    }
}

pub fn gather_corner_features(
    embeddings: &SparseFeatureGrid,
    voxels: &SparseVoxelSet,
    p: &Vec3,
) -> Result<CornerSample> {
    if embeddings.lattice.kind() != LatticeKind::Vertex {
        return Err(Error::Precondition("embeddings must live on a vertex lattice".into()));
    }
    let voxel = voxels
        .containing_cell(p)
        .ok_or_else(|| Error::Precondition(format!("point {p:?} lies outside every occupied voxel")))?;
    let (lo, _) = voxels.cell_aabb(voxel);
    let q = (p - lo) / voxels.cell_size();
    let weights = trilinear_weights([q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0), q.z.clamp(0.0, 1.0)]);
    let d = embeddings.channels();
    let mut rows = [None; 8];
    let mut values = Vec::with_capacity(8);
    for (t, row) in rows.iter_mut().enumerate() {
        let (dx, dy, dz) = corner_offset(t);
        *row = embeddings.lattice.get(voxel.offset(dx, dy, dz));
        values.push(row.map_or_else(|| vec![0.0; d], |r| embeddings.features.row_slice(r).to_vec()));
    }
    Ok(CornerSample { voxel, rows, weights, values })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const N: i32 = 16;

    fn random_lattice(rng: &mut ChaCha8Rng, density: f64, stride: u32) -> Lattice {
        let mut c = Vec::new();
        for i in 0..N {
            for j in 0..N {
                for k in 0..N {
                    if rng.gen_bool(density) {
                        c.push(VoxelCoord::new(i, j, k));
                    }
                }
            }
        }
        Lattice::new(c, stride, LatticeKind::Voxel).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, cin: usize, stride: u32) -> SparseFeatureGrid {
        let density = rng.gen_range(0.02..0.2);
        let lat = random_lattice(rng, density, stride);
        let f = random_tensor(rng, lat.len(), cin);
        SparseFeatureGrid::new(Arc::new(lat), f).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, size: usize, cin: usize, cout: usize) -> ConvKernel {
        let taps = size * size * size;
        ConvKernel::new(size, cin, cout, random_tensor(rng, taps * cin, cout), random_tensor(rng, 1, cout)).unwrap()
    }

    /// Dense `(N+4)^3` array indexed from -2, zero where unoccupied.
    struct Dense {
        c: usize,
        data: Vec<f64>,
        occ: Vec<bool>,
    }

    const PAD: i32 = 2;
    const SIDE: i32 = N + 2 * PAD;

    impl Dense {
        fn from(g: &SparseFeatureGrid) -> Dense {
            let c = g.channels();
            let n = (SIDE * SIDE * SIDE) as usize;
            let mut d = Dense { c, data: vec![0.0; n * c], occ: vec![false; n] };
            for (r, &v) in g.lattice.coords().iter().enumerate() {
                let i = Self::idx(v).unwrap();
                d.occ[i] = true;
                d.data[i * c..(i + 1) * c].copy_from_slice(g.features.row_slice(r));
            }
            d
        }

        fn idx(v: VoxelCoord) -> Option<usize> {
            let (i, j, k) = (v.i + PAD, v.j + PAD, v.k + PAD);
            if [i, j, k].iter().all(|&x| (0..SIDE).contains(&x)) {
                Some(((i * SIDE + j) * SIDE + k) as usize)
            } else {
                None
            }
        }

        fn at(&self, v: VoxelCoord, ch: usize) -> f64 {
            Self::idx(v).map_or(0.0, |i| self.data[i * self.c + ch])
        }

        fn occupied(&self, v: VoxelCoord) -> bool {
            Self::idx(v).map_or(false, |i| self.occ[i])
        }
    }

    fn all_cells(lo: i32, hi: i32) -> impl Iterator<Item = VoxelCoord> {
        (lo..hi).flat_map(move |i| (lo..hi).flat_map(move |j| (lo..hi).map(move |k| VoxelCoord::new(i, j, k))))
    }

    /// Dense 3x3x3 convolution evaluated at `q`.
    fn dense_conv3(d: &Dense, k: &ConvKernel, q: VoxelCoord) -> Vec<f64> {
        let mut out = k.bias.data().to_vec();
        let mut tap = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let v = q.offset(dx, dy, dz);
                    for ci in 0..k.cin {
                        let x = d.at(v, ci);
                        for co in 0..k.cout {
                            out[co] += x * k.weights.get(tap * k.cin + ci, co);
                        }
                    }
                    tap += 1;
                }
            }
        }
        out
    }

    fn assert_rows_close(grid: &SparseFeatureGrid, expect: impl Fn(VoxelCoord) -> Vec<f64>) {
        for (r, &c) in grid.lattice.coords().iter().enumerate() {
            let e = expect(c);
            for (a, b) in grid.features.row_slice(r).iter().zip(&e) {
                assert!((a - b).abs() < 1e-9, "{c:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn submanifold_and_dilated_match_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let g = random_grid(&mut rng, 3, 1);
            let k = random_kernel(&mut rng, 3, 3, 4);
            let d = Dense::from(&g);
            let sub = sparse_conv(&g, &k, 1, false).unwrap();
            assert_eq!(sub.lattice.coords(), g.lattice.coords());
            assert_rows_close(&sub, |q| dense_conv3(&d, &k, q));

            let dil = sparse_conv(&g, &k, 1, true).unwrap();
            let oracle: Vec<VoxelCoord> = all_cells(-1, N + 1)
                .filter(|&q| all_cells(-1, 2).any(|o| d.occupied(q.offset(o.i, o.j, o.k))))
                .collect();
            assert_eq!(dil.lattice.coords(), &oracle[..], "trial {trial}");
            assert_rows_close(&dil, |q| dense_conv3(&d, &k, q));
        }
    }

    #[test]
    fn strided_conv_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let g = random_grid(&mut rng, 2, 1);
            let k = random_kernel(&mut rng, 2, 2, 3);
            let d = Dense::from(&g);
            let out = sparse_conv(&g, &k, 2, false).unwrap();
            assert_eq!(out.lattice.stride(), 2);
            let oracle: Vec<VoxelCoord> =
                all_cells(0, N / 2).filter(|q| (0..8).any(|t| d.occupied(q.child(t)))).collect();
            assert_eq!(out.lattice.coords(), &oracle[..]);
            assert_rows_close(&out, |q| {
                let mut o = k.bias.data().to_vec();
                for t in 0..8 {
                    for ci in 0..2 {
                        for co in 0..3 {
                            o[co] += d.at(q.child(t), ci) * k.weights.get(t * 2 + ci, co);
                        }
                    }
                }
                o
            });
        }
    }

    #[test]
    fn transposed_conv_matches_parent_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let g = random_grid(&mut rng, 3, 2);
            let k = random_kernel(&mut rng, 2, 3, 2);
            let out = generative_transposed_conv(&g, &k).unwrap();
            assert_eq!(out.lattice.stride() * 2, g.lattice.stride());
            assert_eq!(out.len(), 8 * g.len());
            let mut expect = FxHashMap::default();
            for (r, &p) in g.lattice.coords().iter().enumerate() {
                for t in 0..8 {
                    let mut o = k.bias.data().to_vec();
                    for ci in 0..3 {
                        for co in 0..2 {
                            o[co] += g.features.get(r, ci) * k.weights.get(t * 3 + ci, co);
                        }
                    }
                    expect.insert(p.child(t), o);
                }
            }
            assert_eq!(expect.len(), out.len());
            assert_rows_close(&out, |c| expect[&c].clone());
        }
    }

    #[test]
    fn trivial_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let g = random_grid(&mut rng, 3, 1);
        let z = sparse_conv(&g, &ConvKernel::zeros(3, 3, 5), 1, false).unwrap();
        assert_eq!(z.lattice, g.lattice);
        assert!(z.features.data().iter().all(|&v| v == 0.0));

        let mut id = ConvKernel::zeros(3, 3, 3);
        for c in 0..3 {
            id.weights.set(CENTER_TAP * 3 + c, c, 1.0);
        }
        assert_eq!(sparse_conv(&g, &id, 1, false).unwrap().features, g.features);
        assert!(sparse_conv(&g, &ConvKernel::zeros(3, 2, 3), 1, false).is_err());
        assert!(sparse_conv(&g, &ConvKernel::zeros(2, 3, 3), 1, false).is_err());

        let one = SparseFeatureGrid::new(
            Arc::new(Lattice::new([VoxelCoord::new(1, -2, 3)], 4, LatticeKind::Voxel).unwrap()),
            Tensor::row(vec![0.7]),
        )
        .unwrap();
        let mut k = ConvKernel::zeros(2, 1, 2);
        k.bias = Tensor::row(vec![0.5, -1.0]);
        let kids = generative_transposed_conv(&one, &k).unwrap();
        let expect: Vec<VoxelCoord> = (0..8).map(|t| VoxelCoord::new(1, -2, 3).child(t)).collect();
        let mut sorted = expect.clone();
        sorted.sort();
        assert_eq!(kids.lattice.coords(), &sorted[..]);
        assert!(kids.features.data().chunks(2).all(|r| r == [0.5, -1.0]));
        let flat = SparseFeatureGrid::new(Arc::new(Lattice::empty(1, LatticeKind::Voxel)), Tensor::zeros(0, 1)).unwrap();
        assert!(generative_transposed_conv(&flat, &k).is_err());
    }

    #[test]
    fn prune_filters_by_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let g = random_grid(&mut rng, 2, 1);
        assert_eq!(prune(&g, |_| Some(20.0), 0.5).unwrap(), g);
        assert!(prune(&g, |_| Some(-20.0), 0.5).unwrap().is_empty());
        assert!(prune(&g, |_| None, 0.5).is_err());
        let logit = |c: VoxelCoord| Some(((c.i * 7 + c.j * 3 - c.k) % 5) as f64 - 2.0);
        let kept = prune(&g, logit, 0.5).unwrap();
        let oracle: Vec<VoxelCoord> = g.lattice.coords().iter().copied().filter(|&c| logit(c).unwrap() > 0.0).collect();
        assert_eq!(kept.lattice.coords(), &oracle[..]);
        for &c in kept.lattice.coords() {
            assert_eq!(kept.feature(c), g.feature(c));
        }
    }

    fn cloud(points: &[([f64; 3], [f64; 3])]) -> PointCloud {
        PointCloud {
            positions: points.iter().map(|(p, _)| Vec3::new(p[0], p[1], p[2])).collect(),
            colors: points.iter().map(|(_, c)| *c).collect(),
        }
    }

    #[test]
    fn voxelize_small_cases() {
        let o = Vec3::zeros();
        assert!(voxelize(&PointCloud::default(), 0.1, o).is_err());
        let (s, g) = voxelize(&cloud(&[([0.05, 0.05, 0.05], [0.2, 0.4, 0.6])]), 0.1, o).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(g.features.data(), &[0.2, 0.4, 0.6]);
        let (s, g) = voxelize(&cloud(&[([0.01; 3], [0.0; 3]), ([0.02; 3], [1.0; 3])]), 0.1, o).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(g.features.data(), &[0.5; 3]);
    }

    #[test]
    fn voxelize_matches_brute_force_grouping() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let origin = Vec3::new(-0.3, 0.1, -1.0);
        let pts: Vec<([f64; 3], [f64; 3])> = (0..400)
            .map(|_| {
                (
                    [rng.gen_range(-0.5..0.5), rng.gen_range(0.2..0.6), rng.gen_range(-0.8..0.0)],
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        let c = cloud(&pts);
        let (set, grid) = voxelize(&c, 0.1, origin).unwrap();
        let cells: Vec<VoxelCoord> = c.positions.iter().map(|p| world_to_voxel(p, &origin, 0.1).unwrap()).collect();
        let mut distinct = cells.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(set.coords(), &distinct[..]);
        for &v in &distinct {
            let mut sum = [0.0; 3];
            let mut n = 0.0;
            for (cell, col) in cells.iter().zip(&c.colors) {
                if *cell == v {
                    (0..3).for_each(|a| sum[a] += col[a]);
                    n += 1.0;
                }
            }
            let f = grid.feature(v).unwrap();
            (0..3).for_each(|a| assert!((f[a] - sum[a] / n).abs() < 1e-12));
        }
        let verts = vertex_set(&set);
        for &v in &cells {
            assert!((0..8).all(|t| {
                let (dx, dy, dz) = corner_offset(t);
                verts.contains(v.offset(dx, dy, dz))
            }));
        }
    }

    #[test]
    fn vertex_counts() {
        let one = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0)], 1, 0.1, Vec3::zeros()).unwrap();
        assert_eq!(vertex_set(&one).len(), 8);
        let two = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)], 1, 0.1, Vec3::zeros()).unwrap();
        assert_eq!(vertex_set(&two).len(), 12);
        assert_eq!(vertex_set(&two).kind(), LatticeKind::Vertex);
    }

    #[test]
    fn vertex_set_equals_brute_force_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let lat = random_lattice(&mut rng, 0.05, 1);
        let set = SparseVoxelSet { lattice: Arc::new(lat), voxel_size: 0.1, origin: Vec3::zeros() };
        let verts = vertex_set(&set);
        let oracle: Vec<VoxelCoord> = all_cells(0, N + 1)
            .filter(|v| all_cells(-1, 1).any(|o| set.contains(v.offset(o.i, o.j, o.k))))
            .collect();
        assert_eq!(verts.coords(), &oracle[..]);
    }

    fn unit_grid() -> (SparseVoxelSet, SparseFeatureGrid) {
        let set = SparseVoxelSet::new([VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)], 1, 0.1, Vec3::zeros()).unwrap();
        let verts = Arc::new(vertex_set(&set));
        let feats: Vec<f64> = verts.coords().iter().flat_map(|c| [c.i as f64 + 2.0 * c.j as f64 - c.k as f64, 1.0]).collect();
        let n = verts.len();
        (set, SparseFeatureGrid::new(verts, Tensor::from_vec(n, 2, feats).unwrap()).unwrap())
    }

    #[test]
    fn corner_weights_degenerate_cases() {
        let (set, emb) = unit_grid();
        let s = gather_corner_features(&emb, &set, &Vec3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.weights[0], 1.0);
        assert!(s.weights[1..].iter().all(|&w| w == 0.0));
        let s = gather_corner_features(&emb, &set, &Vec3::new(0.05, 0.05, 0.05)).unwrap();
        assert!(s.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
        assert!(gather_corner_features(&emb, &set, &Vec3::new(0.05, 0.25, 0.05)).is_err());
        // the far face of the last voxel is still inside its closed box
        assert_eq!(gather_corner_features(&emb, &set, &Vec3::new(0.2, 0.1, 0.1)).unwrap().voxel, VoxelCoord::new(1, 0, 0));
    }

    #[test]
    fn random_points_interpolate_the_linear_field() {
        let (set, emb) = unit_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for _ in 0..500 {
            let p = Vec3::new(rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1));
            let s = gather_corner_features(&emb, &set, &p).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.missing().iter().all(|m| !m));
            // the vertex field is linear, so trilinear interpolation is exact
            let v = s.interpolate();
            let expect = (p.x + 2.0 * p.y - p.z) / 0.1;
            assert!((v[0] - expect).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_corners_are_flagged() {
        let (set, emb) = unit_grid();
        let partial = SparseFeatureGrid::new(
            Arc::new(emb.lattice.filter(|c| c.i <= 1)),
            Tensor::filled(8, 2, 1.0),
        )
        .unwrap();
        let s = gather_corner_features(&partial, &set, &Vec3::new(0.15, 0.05, 0.05)).unwrap();
        assert_eq!(s.missing().iter().filter(|&&m| m).count(), 4);
        assert!(s.values.iter().zip(s.missing()).all(|(v, m)| !m || v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn coarsening_is_any_child_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let lat = random_lattice(&mut rng, 0.03, 1);
        let coarse = lat.coarsened();
        for c in all_cells(0, N / 2) {
            assert_eq!(coarse.contains(c), (0..8).any(|t| lat.contains(c.child(t))));
        }
    }

    proptest! {
        #[test]
        fn dilation_contains_input_and_stays_local(
            pts in proptest::collection::vec((-6i32..6, -6i32..6, -6i32..6), 1..40)
        ) {
            let lat = Lattice::new(pts.iter().map(|&(i, j, k)| VoxelCoord::new(i, j, k)), 1, LatticeKind::Voxel).unwrap();
            let d = lat.dilated(None);
            prop_assert!(lat.is_subset_of(&d));
            for &q in d.coords() {
                prop_assert!(lat.coords().iter().any(|p| (p.i - q.i).abs() <= 1 && (p.j - q.j).abs() <= 1 && (p.k - q.k).abs() <= 1));
            }
        }

        #[test]
        fn parent_child_round_trip(i in -1000i32..1000, j in -1000i32..1000, k in -1000i32..1000) {
            let c = VoxelCoord::new(i, j, k);
            for t in 0..8 {
                prop_assert_eq!(c.child(t).parent(), c);
            }
        }
    }
}
