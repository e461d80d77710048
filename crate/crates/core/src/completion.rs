//! Scene completion: a generative sparse U-Net that grows occupied voxels
//! into unobserved space, and a vertex-lattice U-Net that fills in the
//! embeddings of newly created vertices.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Csr, ParamStore, Rulebook, Tape, Tensor, Var};
use crate::encoder::EMBED_DIM;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Linear, LEAKY_SLOPE};
use crate::sparse::{
    downsample_rulebook, neighbor_rulebook, upsample_rulebook, CoordBox, Lattice, SparseFeatureGrid, SparseVoxelSet,
    VertexEmbeddingGrid,
};

pub const GEOMETRY_PREFIX: &str = "geo.";
pub const TEXTURE_PREFIX: &str = "tex.";
/// Downsampling steps of the geometry network; it predicts occupancy at
/// strides `2^(LEVELS-1)` down to 1.
pub const LEVELS: usize = 3;
const GEO_CHANNELS: [usize; LEVELS + 1] = [8, 16, 32, 32];
const TEX_CHANNELS: usize = 32;
pub const PRUNE_THRESHOLD: f64 = 0.5;

/// Selection matrix copying row `src.get(c)` into row `n` for every
/// `c = dst[n]` present in `src`.
fn match_rows(src: &Lattice, dst: &Lattice) -> Csr {
    let mut m = Csr::new(src.len());
    for &c in dst.coords() {
        m.push_row(src.get(c).map(|i| (i, 1.0)));
    }
    m
}

fn coarsen_times(l: &Lattice, n: usize) -> Lattice {
    (0..n).fold(l.clone(), |acc, _| acc.coarsened())
}

fn coarsen_box(b: CoordBox, n: usize) -> CoordBox {
    (0..n).fold(b, |acc, _| acc.coarsened())
}

#[derive(Clone, Debug)]
pub struct GeometryNet {
    input: Conv,
    down: Vec<Conv>,
    enc: Vec<Conv>,
    dilate: Vec<Conv>,
    up: Vec<Conv>,
    dec: Vec<Conv>,
    head: Vec<Linear>,
    /// Candidates stay within the observed bounds grown by this many cells.
    pub pad: i32,
}

/// Candidates and their occupancy logits at one decoder level.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    /// Level `l` predicts at stride `2^l`.
    pub level: usize,
    pub candidates: Lattice,
    /// `candidates x 1`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct GeometryForward {
    /// Coarsest first.
    pub levels: Vec<LevelPrediction>,
    pub completed: Lattice,
}

impl GeometryNet {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = GEO_CHANNELS;
        let g = Init::Glorot;
        let mut net = GeometryNet {
            input: Conv::register(store, "geo.in", 27, 1, c[0], g, rng)?,
            down: Vec::new(),
            enc: Vec::new(),
            dilate: Vec::new(),
            up: Vec::new(),
            dec: Vec::new(),
            head: Vec::new(),
            pad: 2,
        };
        for l in 0..LEVELS {
            net.down.push(Conv::register(store, &format!("geo.down{l}"), 8, c[l], c[l + 1], g, rng)?);
            net.enc.push(Conv::register(store, &format!("geo.enc{l}"), 27, c[l + 1], c[l + 1], g, rng)?);
            net.dilate.push(Conv::register(store, &format!("geo.dilate{l}"), 27, c[l + 1], c[l + 1], g, rng)?);
            net.up.push(Conv::register(store, &format!("geo.up{l}"), 8, c[l + 1], c[l], g, rng)?);
            net.dec.push(Conv::register(store, &format!("geo.dec{l}"), 27, c[l], c[l], g, rng)?);
            net.head.push(Linear::register(store, &format!("geo.head{l}"), c[l], 1, g, rng)?);
        }
        Ok(net)
    }

    pub fn heads(&self) -> &[Linear] {
        &self.head
    }

    /// Runs the network on an observed stride-1 voxel lattice. With `gt`
    /// (training) the ground-truth cells among the candidates are kept
    /// alongside the predicted ones, so deeper levels see the true
    /// structure. Observed cells (and their ancestors) are always kept.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, observed: &Lattice, gt: Option<&Lattice>) -> Result<GeometryForward> {
        let Some(bounds) = observed.bounds() else {
            return Err(Error::Empty("geometry completion needs at least one observed voxel".into()));
        };
        if observed.stride() != 1 || gt.is_some_and(|g| g.stride() != 1) {
            return Err(Error::Precondition("geometry completion works on stride-1 lattices".into()));
        }
        let clip = bounds.grow(self.pad);

        let mut lattices = vec![observed.clone()];
        let x = t.constant(Tensor::filled(observed.len(), 1, 1.0));
        let rb = Arc::new(neighbor_rulebook(observed, observed)?);
        let h = self.input.forward(t, store, x, &rb)?;
        let mut feats = vec![t.leaky_relu(h, LEAKY_SLOPE)];
        for l in 0..LEVELS {
            let (coarse, rb) = downsample_rulebook(&lattices[l])?;
            let h = self.down[l].forward(t, store, feats[l], &Arc::new(rb))?;
            let h = t.leaky_relu(h, LEAKY_SLOPE);
            let rb = Arc::new(neighbor_rulebook(&coarse, &coarse)?);
            let h = self.enc[l].forward(t, store, h, &rb)?;
            feats.push(t.leaky_relu(h, LEAKY_SLOPE));
            lattices.push(coarse);
        }

        let mut kept = lattices[LEVELS].clone();
        let mut g = feats[LEVELS];
        let mut levels = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            let grown = kept.dilated(Some(coarsen_box(clip, l + 1)));
            let rb = Arc::new(neighbor_rulebook(&kept, &grown)?);
            g = self.dilate[l].forward(t, store, g, &rb)?;
            g = t.leaky_relu(g, LEAKY_SLOPE);
            let fine_box = coarsen_box(clip, l);
            let candidates = grown.subdivided()?.filter(|c| fine_box.contains(c));
            let rb = Arc::new(upsample_rulebook(&grown, &candidates)?);
            g = self.up[l].forward(t, store, g, &rb)?;
            let skip = t.spmm(Arc::new(match_rows(&lattices[l], &candidates)), feats[l])?;
            g = t.add(g, skip)?;
            g = t.leaky_relu(g, LEAKY_SLOPE);
            let rb = Arc::new(neighbor_rulebook(&candidates, &candidates)?);
            g = self.dec[l].forward(t, store, g, &rb)?;
            g = t.leaky_relu(g, LEAKY_SLOPE);
            let logits = self.head[l].forward(t, store, g)?;

            let gt_l = gt.map(|x| coarsen_times(x, l));
            let lv = t.value(logits).data().to_vec();
            let keep: Vec<u32> = candidates
                .coords()
                .iter()
                .enumerate()
                .filter(|&(n, &c)| {
                    crate::autodiff::sigmoid(lv[n]) > PRUNE_THRESHOLD
                        || lattices[l].contains(c)
                        || gt_l.as_ref().is_some_and(|x| x.contains(c))
                })
                .map(|(n, _)| n as u32)
                .collect();
            kept = Lattice::new(keep.iter().map(|&n| candidates.coords()[n as usize]), candidates.stride(), candidates.kind())?;
            g = t.gather_rows(g, Arc::new(keep))?;
            levels.push(LevelPrediction { level: l, candidates, logits });
        }
        Ok(GeometryForward { levels, completed: kept })
    }
}

/// Completed occupancy for an observed voxel set.
pub fn complete_geometry(observed: &SparseVoxelSet, net: &GeometryNet, store: &ParamStore) -> Result<SparseVoxelSet> {
    let mut t = Tape::new();
    let out = net.forward(&mut t, store, &observed.lattice, None)?;
    debug_assert!(observed.lattice.is_subset_of(&out.completed));
    Ok(observed.with_lattice(out.completed))
}

/// 0/1 occupancy targets of a level's candidates.
pub fn level_targets(level: &LevelPrediction, gt: &Lattice) -> Vec<f64> {
    let g = coarsen_times(gt, level.level);
    level.candidates.coords().iter().map(|&c| if g.contains(c) { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy of one level's logits.
pub fn level_bce(t: &mut Tape, level: &LevelPrediction, gt: &Lattice) -> Result<Var> {
    if level.candidates.is_empty() {
        return Err(Error::Empty(format!("no candidates at level {}", level.level)));
    }
    let y = t.constant(Tensor::column(level_targets(level, gt)));
    // log(1 + e^x) - y x
    let sp = t.softplus(level.logits);
    let yx = t.mul(level.logits, y)?;
    let d = t.sub(sp, yx)?;
    t.mean(d)
}

/// Per-level mean BCE, summed over levels with equal weight.
pub fn geometry_loss(t: &mut Tape, levels: &[LevelPrediction], gt: &Lattice) -> Result<Var> {
    let mut total: Option<Var> = None;
    for lv in levels {
        let l = level_bce(t, lv, gt)?;
        total = Some(match total {
            Some(s) => t.add(s, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Empty("no prediction levels".into()))
}

/// Per-vertex inpainting flags: `true` where the vertex is new.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InpaintMask {
    pub new: Vec<bool>,
}

impl InpaintMask {
    pub fn len(&self) -> usize {
        self.new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new.is_empty()
    }

    pub fn new_count(&self) -> usize {
        self.new.iter().filter(|&&b| b).count()
    }

    pub fn new_rows(&self) -> Vec<u32> {
        self.new.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i as u32).collect()
    }
}

/// Observed embeddings scattered onto the completed vertex set, zeros
/// elsewhere, plus the mask of new vertices.
pub fn pad_features(observed: &VertexEmbeddingGrid, completed: &Lattice) -> Result<(Tensor, InpaintMask)> {
    if observed.is_empty() {
        return Err(Error::Empty("inpainting needs at least one observed vertex".into()));
    }
    let d = observed.channels();
    let mut f0 = Tensor::zeros(completed.len(), d);
    let mut new = vec![true; completed.len()];
    for (r, &c) in observed.lattice.coords().iter().enumerate() {
        let n = completed
            .get(c)
            .ok_or_else(|| Error::Precondition(format!("observed vertex {c:?} missing from the completed set")))?;
        f0.row_slice_mut(n).copy_from_slice(observed.features.row_slice(r));
        new[n] = false;
    }
    Ok((f0, InpaintMask { new }))
}

#[derive(Clone, Debug)]
pub struct TextureNet {
    input: Linear,
    enc: Vec<Conv>,
    down: Vec<Conv>,
    up: Vec<Conv>,
    dec: Vec<Conv>,
    output: Linear,
}

/// Weight-independent structure of one inpainting problem.
#[derive(Clone, Debug)]
pub struct TextureInput {
    pub vertices: Arc<Lattice>,
    /// `F0 ⊕ mask`, `vertices x (d + 1)`.
    pub input: Tensor,
    pub f0: Tensor,
    pub mask: InpaintMask,
    same: Vec<Arc<Rulebook>>,
    down: Vec<Arc<Rulebook>>,
    up: Vec<Arc<Rulebook>>,
}

impl TextureInput {
    pub fn new(vertices: Arc<Lattice>, f0: Tensor, mask: InpaintMask) -> Result<Self> {
        if f0.rows() != vertices.len() || mask.len() != vertices.len() || f0.cols() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "{} vertices with features {:?} and {} mask bits",
                vertices.len(),
                f0.shape(),
                mask.len()
            )));
        }
        let mut lattices = vec![(*vertices).clone()];
        let (mut same, mut down, mut up) = (Vec::new(), Vec::new(), Vec::new());
        for l in 0..3 {
            same.push(Arc::new(neighbor_rulebook(&lattices[l], &lattices[l])?));
            if l < 2 {
                let (coarse, rb) = downsample_rulebook(&lattices[l])?;
                down.push(Arc::new(rb));
                up.push(Arc::new(upsample_rulebook(&coarse, &lattices[l])?));
                lattices.push(coarse);
            }
        }
        let mut data = Vec::with_capacity(f0.rows() * (EMBED_DIM + 1));
        for r in 0..f0.rows() {
            data.extend_from_slice(f0.row_slice(r));
            data.push(if mask.new[r] { 1.0 } else { 0.0 });
        }
        let input = Tensor::from_vec(f0.rows(), EMBED_DIM + 1, data)?;
        Ok(TextureInput { vertices, input, f0, mask, same, down, up })
    }
}

impl TextureNet {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = TEX_CHANNELS;
        let g = Init::Glorot;
        let mut net = TextureNet {
            input: Linear::register(store, "tex.in", EMBED_DIM + 1, c, g, rng)?,
            enc: Vec::new(),
            down: Vec::new(),
            up: Vec::new(),
            dec: Vec::new(),
            output: Linear::register(store, "tex.out", c, EMBED_DIM, g, rng)?,
        };
        for l in 0..3 {
            net.enc.push(Conv::register(store, &format!("tex.enc{l}"), 27, c, c, g, rng)?);
        }
        for l in 0..2 {
            net.down.push(Conv::register(store, &format!("tex.down{l}"), 8, c, c, g, rng)?);
            net.up.push(Conv::register(store, &format!("tex.up{l}"), 8, c, c, g, rng)?);
            net.dec.push(Conv::register(store, &format!("tex.dec{l}"), 27, c, c, g, rng)?);
        }
        Ok(net)
    }

    /// Completed embeddings on the input's vertex set; observed rows are
    /// copied from `F0`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: &TextureInput) -> Result<Var> {
        let lrelu = |t: &mut Tape, v: Var| t.leaky_relu(v, LEAKY_SLOPE);
        let inp = t.constant(x.input.clone());
        let h = self.input.forward(t, store, inp)?;
        let h = lrelu(t, h);
        let h0 = self.enc[0].forward(t, store, h, &x.same[0])?;
        let h0 = lrelu(t, h0);
        let h = self.down[0].forward(t, store, h0, &x.down[0])?;
        let h = lrelu(t, h);
        let h1 = self.enc[1].forward(t, store, h, &x.same[1])?;
        let h1 = lrelu(t, h1);
        let h = self.down[1].forward(t, store, h1, &x.down[1])?;
        let h = lrelu(t, h);
        let h2 = self.enc[2].forward(t, store, h, &x.same[2])?;
        let h2 = lrelu(t, h2);

        let u = self.up[1].forward(t, store, h2, &x.up[1])?;
        let u = t.add(u, h1)?;
        let u = lrelu(t, u);
        let u = self.dec[1].forward(t, store, u, &x.same[1])?;
        let u = lrelu(t, u);
        let u = self.up[0].forward(t, store, u, &x.up[0])?;
        let u = t.add(u, h0)?;
        let u = lrelu(t, u);
        let u = self.dec[0].forward(t, store, u, &x.same[0])?;
        let u = lrelu(t, u);
        let out = self.output.forward(t, store, u)?;
        let observed = Arc::new(x.mask.new.iter().map(|&b| !b).collect::<Vec<_>>());
        let f0 = t.constant(x.f0.clone());
        t.select_rows(observed, f0, out)
    }
}

/// Completed embedding grid `F̃` from padded features.
pub fn inpaint_texture(
    completed: Arc<Lattice>,
    f0: Tensor,
    mask: InpaintMask,
    net: &TextureNet,
    store: &ParamStore,
) -> Result<VertexEmbeddingGrid> {
    let x = TextureInput::new(completed.clone(), f0, mask)?;
    let mut t = Tape::new();
    let y = net.forward(&mut t, store, &x)?;
    SparseFeatureGrid::new(completed, t.value(y).clone())
}

/// Mean over new rows of the L1 distance to the target (0 without new
/// rows).
pub fn texture_loss(t: &mut Tape, pred: Var, target: Var, mask: &InpaintMask) -> Result<Var> {
    let rows = mask.new_rows();
    if rows.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let m = rows.len() as f64;
    let d = t.sub(pred, target)?;
    let d = t.gather_rows(d, Arc::new(rows))?;
    let d = t.abs(d);
    let s = t.sum(d);
    Ok(t.scale(s, 1.0 / m))
}

/// Plain-value [`texture_loss`].
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &InpaintMask) -> f64 {
    let rows = mask.new_rows();
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|&r| pred.row_slice(r as usize).iter().zip(target.row_slice(r as usize)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    total / rows.len() as f64
}

/// Intersection over union of two lattices.
pub fn iou(a: &Lattice, b: &Lattice) -> f64 {
    let inter = a.coords().iter().filter(|&&c| b.contains(c)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
