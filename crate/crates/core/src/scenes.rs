//! Procedural ground truth: axis-aligned rooms with boxes, an exact
//! raycaster producing RGB-D frames, shell occupancy, and overlap-based
//! triplet mining.
//!
//! Room and box extents are snapped to a 0.1 m grid and every surface sits
//! `SURFACE_INSET` inside the cell it bounds. No surface then lies on a cell
//! face of a 0.1 m or 0.05 m lattice anchored at whole meters, and every
//! visible surface sits just behind the near face of its voxel.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{back_project, pixel_ray_unchecked, project, Aabb, CameraIntrinsics, Image, PointCloud, Pose, Ray, RgbdFrame, Vec3};
use crate::sparse::{SparseVoxelSet, VoxelCoord};

pub const SNAP: f64 = 0.1;
pub const SURFACE_INSET: f64 = 1e-3;
/// Depth agreement for a pixel to count as seen by another view, meters.
pub const OVERLAP_DEPTH_TOLERANCE: f64 = 0.10;

pub const PALETTE: [[f64; 3]; 10] = [
    [0.85, 0.82, 0.75],
    [0.55, 0.60, 0.68],
    [0.72, 0.45, 0.35],
    [0.35, 0.50, 0.38],
    [0.90, 0.75, 0.40],
    [0.40, 0.35, 0.55],
    [0.25, 0.30, 0.35],
    [0.80, 0.55, 0.60],
    [0.50, 0.70, 0.75],
    [0.65, 0.62, 0.55],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Solid([f64; 3]),
    /// 3D checkerboard with cells of `period` meters.
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
}

impl Texture {
    pub fn color_at(&self, p: &Vec3) -> [f64; 3] {
        match *self {
            Texture::Solid(c) => c,
            Texture::Checker { a, b, period } => {
                let s: i64 = (0..3).map(|i| (p[i] / period).floor() as i64).sum();
                if s.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBox {
    pub aabb: Aabb,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralScene {
    /// Interior of the room; walls are its faces.
    pub room: Aabb,
    /// Wall textures in face order -x, +x, -y, +y, -z (floor), +z (ceiling).
    pub walls: [Texture; 6],
    pub boxes: Vec<SceneBox>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Side lengths (x, y, z) are drawn from these ranges, meters.
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub box_min: f64,
    pub box_max: f64,
    /// Allow checkerboard textures.
    pub checker: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            room_min: [3.0, 3.0, 3.0],
            room_max: [5.0, 5.0, 3.5],
            min_boxes: 2,
            max_boxes: 6,
            box_min: 0.3,
            box_max: 1.2,
            checker: true,
        }
    }
}

/// Height band that is always free space: above every box, below the ceiling.
pub const CAMERA_Z: (f64, f64) = (1.3, 1.8);

fn snapped(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo / SNAP).ceil() as i64, (hi / SNAP).floor() as i64);
    rng.gen_range(a..=b.max(a)) as f64 * SNAP
}

fn pick_texture(rng: &mut ChaCha8Rng, checker: bool) -> Texture {
    let a = PALETTE[rng.gen_range(0..PALETTE.len())];
    if checker && rng.gen_bool(0.4) {
        let mut b = PALETTE[rng.gen_range(0..PALETTE.len())];
        if b == a {
            b = a.map(|v| 1.0 - v);
        }
        Texture::Checker { a, b, period: [0.4, 0.6, 0.8][rng.gen_range(0..3)] }
    } else {
        Texture::Solid(a)
    }
}

pub fn generate_scene(seed: u64) -> ProceduralScene {
    generate_scene_with(seed, &SceneParams::default())
}

pub fn generate_scene_with(seed: u64, params: &SceneParams) -> ProceduralScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side: Vec<f64> = (0..3).map(|a| snapped(&mut rng, params.room_min[a], params.room_max[a])).collect();
    let room = Aabb::new(Vec3::repeat(-SURFACE_INSET), Vec3::new(side[0], side[1], side[2]) + Vec3::repeat(SURFACE_INSET));
    let walls = std::array::from_fn(|_| pick_texture(&mut rng, params.checker));

    let count = rng.gen_range(params.min_boxes..=params.max_boxes);
    let mut boxes: Vec<SceneBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 500 {
        attempts += 1;
        let size: Vec<f64> = (0..3).map(|_| snapped(&mut rng, params.box_min, params.box_max)).collect();
        let x0 = snapped(&mut rng, 0.0, side[0] - size[0]);
        let y0 = snapped(&mut rng, 0.0, side[1] - size[1]);
        let lo = Vec3::new(x0, y0, 0.0);
        let hi = lo + Vec3::new(size[0], size[1], size[2]);
        // keep a one-cell gap so no voxel holds two boxes
        let clash = boxes.iter().any(|b| {
            (0..3).all(|a| lo[a] < b.aabb.max[a] + SNAP + SURFACE_INSET && b.aabb.min[a] - SURFACE_INSET - SNAP < hi[a])
        });
        if clash {
            continue;
        }
        boxes.push(SceneBox {
            aabb: Aabb::new(lo + Vec3::repeat(SURFACE_INSET), hi - Vec3::repeat(SURFACE_INSET)),
            texture: pick_texture(&mut rng, params.checker),
        });
    }
    ProceduralScene { room, walls, boxes, seed }
}

/// Nearest surface along a ray from inside the room.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub point: Vec3,
    pub color: [f64; 3],
}

impl ProceduralScene {
    /// Free space: strictly inside the room and outside every box.
    pub fn is_free(&self, p: &Vec3) -> bool {
        self.room.contains_strictly(p) && !self.boxes.iter().any(|b| b.aabb.contains(p))
    }

    pub fn trace(&self, ray: &Ray) -> Option<SurfaceHit> {
        let (_, t_exit) = self.room.ray_interval(ray)?;
        let mut best_t = t_exit;
        let mut best_tex = None;
        for b in &self.boxes {
            if let Some((t0, _)) = b.aabb.ray_interval(ray) {
                if t0 > 0.0 && t0 < best_t {
                    best_t = t0;
                    best_tex = Some(b.texture);
                }
            }
        }
        if !(best_t > 0.0) {
            return None;
        }
        let point = ray.at(best_t);
        let texture = best_tex.unwrap_or_else(|| self.walls[self.wall_face(&point)]);
        Some(SurfaceHit { t: best_t, point, color: texture.color_at(&point) })
    }

    fn wall_face(&self, p: &Vec3) -> usize {
        let mut best = (f64::INFINITY, 0);
        for a in 0..3 {
            let dlo = (p[a] - self.room.min[a]).abs();
            let dhi = (p[a] - self.room.max[a]).abs();
            if dlo < best.0 {
                best = (dlo, 2 * a);
            }
            if dhi < best.0 {
                best = (dhi, 2 * a + 1);
            }
        }
        best.1
    }

    /// Every planar face: room walls then the 6 faces of each box.
    fn faces(&self) -> Vec<Face> {
        let mut out = Vec::new();
        let mut push_box = |bx: &Aabb| {
            for a in 0..3 {
                for &v in &[bx.min[a], bx.max[a]] {
                    out.push(Face { axis: a, value: v, lo: bx.min, hi: bx.max });
                }
            }
        };
        push_box(&self.room);
        for b in &self.boxes {
            push_box(&b.aabb);
        }
        out
    }
}

struct Face {
    axis: usize,
    value: f64,
    lo: Vec3,
    hi: Vec3,
}

/// Ground-truth RGB-D frame seen from `pose`.
pub fn raycast_gt(scene: &ProceduralScene, k: &CameraIntrinsics, pose: &Pose) -> Result<RgbdFrame> {
    k.validate()?;
    pose.validate()?;
    if !scene.is_free(&pose.translation) {
        return Err(Error::Precondition(format!("camera at {:?} is not in free space", pose.translation)));
    }
    let fwd = pose.forward();
    let mut rgb = Image::new(k.width, k.height, 3);
    let mut depth = Image::new(k.width, k.height, 1);
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = pixel_ray_unchecked(k, pose, u as f64 + 0.5, v as f64 + 0.5);
            if let Some(hit) = scene.trace(&ray) {
                depth.pixel_mut(u, v)[0] = hit.t * ray.direction.dot(&fwd);
                rgb.pixel_mut(u, v).copy_from_slice(&hit.color);
            }
        }
    }
    RgbdFrame::new(rgb, depth, *k, *pose)
}

fn cell_range(lo: f64, hi: f64, origin: f64, s: f64) -> (i32, i32) {
    let a = ((lo - origin) / s).floor() as i32;
    let b = ((hi - origin) / s).ceil() as i32 - 1;
    (a, b.max(a))
}

/// Cells whose box meets a scene surface (a watertight shell for each box
/// and the room).
pub fn gt_occupancy(scene: &ProceduralScene, voxel_size: f64, origin: Vec3) -> Result<SparseVoxelSet> {
    let mut cells = Vec::new();
    for f in scene.faces() {
        let q = (f.value - origin[f.axis]) / voxel_size;
        let mut planes = vec![q.floor() as i32];
        if q.fract() == 0.0 {
            planes.push(q as i32 - 1);
        }
        let (b, c) = ((f.axis + 1) % 3, (f.axis + 2) % 3);
        let (b0, b1) = cell_range(f.lo[b], f.hi[b], origin[b], voxel_size);
        let (c0, c1) = cell_range(f.lo[c], f.hi[c], origin[c], voxel_size);
        for &p in &planes {
            for i in b0..=b1 {
                for j in c0..=c1 {
                    let mut idx = [0i32; 3];
                    idx[f.axis] = p;
                    idx[b] = i;
                    idx[c] = j;
                    cells.push(VoxelCoord::new(idx[0], idx[1], idx[2]));
                }
            }
        }
    }
    SparseVoxelSet::new(cells, 1, voxel_size, origin)
}

/// Lattice origin for a scene: whole-meter floor of the room corner, minus
/// one voxel.
pub fn scene_origin(scene: &ProceduralScene, voxel_size: f64) -> Vec3 {
    scene.room.min.map(f64::floor) - Vec3::repeat(voxel_size)
}

/// Per query pixel: valid depth, and the world point lands inside `source`
/// where the source depth agrees with its projected depth.
pub fn overlap_mask(query: &RgbdFrame, source: &RgbdFrame) -> Vec<bool> {
    let kq = &query.intrinsics;
    let ks = &source.intrinsics;
    let mut out = vec![false; kq.width * kq.height];
    for v in 0..kq.height {
        for u in 0..kq.width {
            let d = query.depth.at(u, v);
            if d <= 0.0 {
                continue;
            }
            let p = crate::geometry::unproject(kq, &query.pose, u, v, d);
            if let Some((x, y, z)) = project(ks, &source.pose, &p) {
                if x >= 0.0 && y >= 0.0 && x < ks.width as f64 && y < ks.height as f64 {
                    let ds = source.depth.at(x as usize, y as usize);
                    out[v * kq.width + u] = ds > 0.0 && (ds - z).abs() <= OVERLAP_DEPTH_TOLERANCE;
                }
            }
        }
    }
    out
}

fn valid_count(frame: &RgbdFrame) -> Result<usize> {
    let n = frame.valid_depth_count();
    if n == 0 {
        return Err(Error::Precondition("query frame has no valid depth".into()));
    }
    Ok(n)
}

/// Fraction of the query's valid-depth pixels also seen by `source`.
pub fn view_overlap(query: &RgbdFrame, source: &RgbdFrame) -> Result<f64> {
    let n = valid_count(query)?;
    Ok(overlap_mask(query, source).iter().filter(|&&b| b).count() as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletBounds {
    /// Rule 1: source/source overlap at most this, both directions.
    pub max_pair: f64,
    /// Rule 2: each source covers strictly less than this of the query.
    pub max_single: f64,
    /// Rule 3: the two sources together cover this range of the query.
    pub min_union: f64,
    pub max_union: f64,
}

impl Default for TripletBounds {
    fn default() -> Self {
        TripletBounds { max_pair: 0.01, max_single: 0.50, min_union: 0.65, max_union: 0.70 }
    }
}

/// Indices into the candidate frame list plus the query's unobserved mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletIndices {
    pub s1: usize,
    pub s2: usize,
    pub q: usize,
    pub union_overlap: f64,
    /// Query pixels seen by neither source, row-major.
    pub unobserved: Vec<bool>,
}

/// Pixel masks and fractions for every ordered frame pair.
pub struct OverlapTable {
    n: usize,
    masks: Vec<Vec<bool>>,
    valid: Vec<usize>,
}

impl OverlapTable {
    pub fn new(frames: &[RgbdFrame]) -> Self {
        let n = frames.len();
        let mut masks = Vec::with_capacity(n * n);
        for q in frames {
            for s in frames {
                masks.push(overlap_mask(q, s));
            }
        }
        OverlapTable { n, masks, valid: frames.iter().map(|f| f.valid_depth_count()).collect() }
    }

    pub fn mask(&self, q: usize, s: usize) -> &[bool] {
        &self.masks[q * self.n + s]
    }

    pub fn overlap(&self, q: usize, s: usize) -> f64 {
        if self.valid[q] == 0 {
            return 0.0;
        }
        self.mask(q, s).iter().filter(|&&b| b).count() as f64 / self.valid[q] as f64
    }

    pub fn union_overlap(&self, q: usize, s1: usize, s2: usize) -> f64 {
        if self.valid[q] == 0 {
            return 0.0;
        }
        let n = self.mask(q, s1).iter().zip(self.mask(q, s2)).filter(|(a, b)| **a || **b).count();
        n as f64 / self.valid[q] as f64
    }
}

/// All `(s1 < s2, q)` triplets satisfying the three overlap rules, ordered
/// by query then sources.
pub fn select_triplets(frames: &[RgbdFrame], bounds: &TripletBounds) -> Result<Vec<TripletIndices>> {
    if frames.len() < 3 {
        return Err(Error::Precondition(format!("need at least 3 frames, got {}", frames.len())));
    }
    let n = frames.len();
    let table = OverlapTable::new(frames);
    let mut out = Vec::new();
    for q in 0..n {
        if table.valid[q] == 0 {
            continue;
        }
        for s1 in 0..n {
            if s1 == q || table.overlap(q, s1) >= bounds.max_single {
                continue;
            }
            for s2 in s1 + 1..n {
                if s2 == q || table.overlap(q, s2) >= bounds.max_single {
                    continue;
                }
                if table.overlap(s1, s2) > bounds.max_pair || table.overlap(s2, s1) > bounds.max_pair {
                    continue;
                }
                let u = table.union_overlap(q, s1, s2);
                if u < bounds.min_union || u > bounds.max_union {
                    continue;
                }
                let unobserved = table.mask(q, s1).iter().zip(table.mask(q, s2)).map(|(a, b)| !(*a || *b)).collect();
                out.push(TripletIndices { s1, s2, q, union_overlap: u, unobserved });
            }
        }
    }
    Ok(out)
}

/// Random free-space camera poses looking roughly horizontally.
pub fn random_poses(scene: &ProceduralScene, n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.3;
    let mut poses = Vec::with_capacity(n);
    while poses.len() < n {
        let eye = Vec3::new(
            rng.gen_range(scene.room.min.x + margin..scene.room.max.x - margin),
            rng.gen_range(scene.room.min.y + margin..scene.room.max.y - margin),
            rng.gen_range(CAMERA_Z.0..CAMERA_Z.1),
        );
        if !scene.is_free(&eye) {
            continue;
        }
        let yaw: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let pitch: f64 = rng.gen_range(-35f64..-5.0).to_radians();
        let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        if let Ok(p) = Pose::look_at(eye, eye + dir, Vec3::z()) {
            poses.push(p);
        }
    }
    poses
}

/// Poses along a loop around the room center, all looking outward.
pub fn orbit_poses(scene: &ProceduralScene, n: usize, radius: f64, height: f64, pitch_deg: f64) -> Vec<Pose> {
    let c = (scene.room.min + scene.room.max) * 0.5;
    (0..n)
        .map(|i| {
            let yaw = i as f64 / n as f64 * std::f64::consts::TAU;
            let eye = Vec3::new(c.x + radius * yaw.cos(), c.y + radius * yaw.sin(), height);
            let pitch = pitch_deg.to_radians();
            let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
            Pose::look_at(eye, eye + dir, Vec3::z()).expect("orbit pose")
        })
        .collect()
}

pub fn capture(scene: &ProceduralScene, k: &CameraIntrinsics, poses: &[Pose]) -> Result<Vec<RgbdFrame>> {
    poses.iter().map(|p| raycast_gt(scene, k, p)).collect()
}

/// Vertical band of one wall hidden from the source views: points within
/// `depth` of the wall plane whose coordinate along the wall lies in
/// `[along.0, along.1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallStrip {
    /// 0: a wall normal to x, 1: a wall normal to y.
    pub axis: usize,
    /// Position of the wall plane.
    pub plane: f64,
    pub along: (f64, f64),
    pub depth: f64,
}

impl WallStrip {
    pub fn contains(&self, p: &Vec3) -> bool {
        let other = 1 - self.axis;
        (p[self.axis] - self.plane).abs() < self.depth && (self.along.0..=self.along.1).contains(&p[other])
    }
}

/// A strip 0.8 to 1.2 m wide on a random wall.
pub fn random_wall_strip(scene: &ProceduralScene, seed: u64) -> WallStrip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = rng.gen_range(0..2);
    let plane = if rng.gen_bool(0.5) { scene.room.min[axis] } else { scene.room.max[axis] };
    let other = 1 - axis;
    let width = snapped(&mut rng, 0.8, 1.2);
    let len = scene.room.max[other] - scene.room.min[other];
    let start = scene.room.min[other] + snapped(&mut rng, 0.0, len - width);
    WallStrip { axis, plane, along: (start, start + width), depth: 0.15 }
}

/// The cloud without the points inside `strip`.
pub fn hide_wall_strip(cloud: &PointCloud, strip: &WallStrip) -> PointCloud {
    let mut out = PointCloud::default();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        if !strip.contains(p) {
            out.positions.push(*p);
            out.colors.push(*c);
        }
    }
    out
}

/// Shuffled copy used by order-invariance checks.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<usize>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (order.iter().map(|&i| items[i].clone()).collect(), order)
}

/// World points of a frame must lie on some scene face.
pub fn distance_to_surfaces(scene: &ProceduralScene, p: &Vec3) -> f64 {
    scene
        .faces()
        .iter()
        .map(|f| {
            let mut d2 = (p[f.axis] - f.value).powi(2);
            for a in 0..3 {
                if a != f.axis {
                    let out = (f.lo[a] - p[a]).max(p[a] - f.hi[a]).max(0.0);
                    d2 += out * out;
                }
            }
            d2.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Back-projected points of `frame` with their distance to the nearest face.
pub fn frame_surface_error(scene: &ProceduralScene, frame: &RgbdFrame) -> f64 {
    back_project(frame).positions.iter().map(|p| distance_to_surfaces(scene, p)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fuse_frames;
    use crate::sparse::voxelize;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(32, 24, 80.0).unwrap()
    }

    #[test]
    fn scenes_are_deterministic_and_well_formed() {
        assert_eq!(generate_scene(5), generate_scene(5));
        let boxes: Vec<_> = (0..8).map(|s| generate_scene(s).boxes).collect();
        assert!(boxes.windows(2).any(|w| w[0] != w[1]));
        for s in 0..30 {
            let sc = generate_scene(s);
            let e = sc.room.extent();
            assert!((0..3).all(|a| (3.0..=5.0 + 0.01).contains(&e[a])));
            assert!((2..=6).contains(&sc.boxes.len()), "{}", sc.boxes.len());
            for b in &sc.boxes {
                assert!(sc.room.contains_strictly(&b.aabb.min) && sc.room.contains_strictly(&b.aabb.max));
                let size = b.aabb.extent();
                assert!((0..3).all(|a| size[a] > 0.29 && size[a] < 1.21));
            }
        }
    }

    fn wall_scene() -> ProceduralScene {
        ProceduralScene {
            room: Aabb::new(Vec3::zeros(), Vec3::new(4.0, 4.0, 3.0)),
            walls: [Texture::Solid([0.5; 3]); 6],
            boxes: vec![],
            seed: 0,
        }
    }

    #[test]
    fn facing_wall_depth_is_exact() {
        let sc = wall_scene();
        let pose = Pose::look_at(Vec3::new(2.0, 2.0, 1.5), Vec3::new(4.0, 2.0, 1.5), Vec3::z()).unwrap();
        // principal point sits on a pixel center for an odd-centered camera
        let k = CameraIntrinsics::new(20.0, 20.0, 2.5, 2.5, 6, 6).unwrap();
        let f = raycast_gt(&sc, &k, &pose).unwrap();
        assert_eq!(f.depth.at(2, 2), 2.0);
        assert_eq!(f.valid_depth_count(), 36);
        let outside = Pose::look_at(Vec3::new(5.0, 2.0, 1.5), Vec3::new(4.0, 2.0, 1.5), Vec3::z()).unwrap();
        assert!(raycast_gt(&sc, &k, &outside).is_err());
    }

    #[test]
    fn camera_inside_a_box_is_rejected() {
        let mut sc = wall_scene();
        sc.boxes.push(SceneBox { aabb: Aabb::new(Vec3::new(1.0, 1.0, 0.0), Vec3::new(2.0, 2.0, 1.0)), texture: Texture::Solid([1.0; 3]) });
        let p = Pose::look_at(Vec3::new(1.5, 1.5, 0.5), Vec3::new(3.0, 1.5, 0.5), Vec3::z()).unwrap();
        assert!(raycast_gt(&sc, &cam(), &p).is_err());
    }

    #[test]
    fn back_projected_points_lie_on_surfaces() {
        for seed in 0..4 {
            let sc = generate_scene(seed);
            for pose in random_poses(&sc, 3, seed) {
                let f = raycast_gt(&sc, &cam(), &pose).unwrap();
                assert_eq!(f.valid_depth_count(), 32 * 24, "closed rooms hit everywhere");
                assert!(frame_surface_error(&sc, &f) < 1e-6);
            }
        }
    }

    #[test]
    fn box_shell_count_is_closed_form() {
        let sc = ProceduralScene {
            room: Aabb::new(Vec3::repeat(-SURFACE_INSET), Vec3::new(3.0, 3.0, 3.0) + Vec3::repeat(SURFACE_INSET)),
            walls: [Texture::Solid([0.5; 3]); 6],
            boxes: vec![SceneBox {
                aabb: Aabb::new(Vec3::new(1.0, 1.0, 0.0).add_scalar(SURFACE_INSET), Vec3::new(1.5, 1.8, 0.6).add_scalar(-SURFACE_INSET)),
                texture: Texture::Solid([1.0; 3]),
            }],
            seed: 0,
        };
        let origin = scene_origin(&sc, 0.1);
        let occ = gt_occupancy(&sc, 0.1, origin).unwrap();
        let (nx, ny, nz) = (5i64, 8, 6);
        let box_shell = nx * ny * nz - (nx - 2) * (ny - 2) * (nz - 2);
        // room shell: 32 cells per side, one cell thick
        let room_shell = 32i64.pow(3) - 30i64.pow(3);
        assert_eq!(occ.len() as i64, box_shell + room_shell);
        let fine = gt_occupancy(&sc, 0.05, origin).unwrap();
        let ratio = fine.len() as f64 / occ.len() as f64;
        assert!((2.0..8.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn observed_voxels_are_in_the_shell() {
        for seed in 0..3 {
            let sc = generate_scene(seed);
            let frames = capture(&sc, &cam(), &random_poses(&sc, 4, seed + 10)).unwrap();
            let cloud = fuse_frames(&frames).unwrap();
            let origin = scene_origin(&sc, 0.1);
            let occ = gt_occupancy(&sc, 0.1, origin).unwrap();
            let (obs, _) = voxelize(&cloud, 0.1, origin).unwrap();
            assert!(obs.lattice.is_subset_of(&occ.lattice));
            let fine = gt_occupancy(&sc, 0.05, origin).unwrap();
            let (obs, _) = voxelize(&cloud, 0.05, origin).unwrap();
            assert!(obs.lattice.is_subset_of(&fine.lattice));
        }
    }

    /// Independent per-pixel overlap: re-derive the world point from the ray
    /// and the z-depth instead of `unproject`.
    fn overlap_oracle(q: &RgbdFrame, s: &RgbdFrame) -> f64 {
        let (mut hit, mut valid) = (0usize, 0usize);
        for v in 0..q.height() {
            for u in 0..q.width() {
                let d = q.depth.at(u, v);
                if d <= 0.0 {
                    continue;
                }
                valid += 1;
                let ray = pixel_ray_unchecked(&q.intrinsics, &q.pose, u as f64 + 0.5, v as f64 + 0.5);
                let p = ray.at(d / ray.direction.dot(&q.pose.forward()));
                let c = s.pose.rotation.transpose() * (p - s.pose.translation);
                if c.z <= 0.0 {
                    continue;
                }
                let x = s.intrinsics.fx * c.x / c.z + s.intrinsics.cx;
                let y = s.intrinsics.fy * c.y / c.z + s.intrinsics.cy;
                if x < 0.0 || y < 0.0 || x >= s.width() as f64 || y >= s.height() as f64 {
                    continue;
                }
                let ds = s.depth.at(x.floor() as usize, y.floor() as usize);
                if ds > 0.0 && (ds - c.z).abs() <= OVERLAP_DEPTH_TOLERANCE {
                    hit += 1;
                }
            }
        }
        hit as f64 / valid as f64
    }

    #[test]
    fn overlap_matches_oracle_and_bounds() {
        let sc = generate_scene(3);
        let frames = capture(&sc, &cam(), &random_poses(&sc, 6, 4)).unwrap();
        for q in &frames {
            assert_eq!(view_overlap(q, q).unwrap(), 1.0);
            for s in &frames {
                let o = view_overlap(q, s).unwrap();
                assert!((0.0..=1.0).contains(&o));
                assert!((o - overlap_oracle(q, s)).abs() < 1e-12);
            }
        }
        let mut empty = frames[0].clone();
        empty.depth.data.iter_mut().for_each(|d| *d = 0.0);
        assert!(view_overlap(&empty, &frames[1]).is_err());
    }

    #[test]
    fn opposite_cameras_do_not_overlap() {
        let sc = wall_scene();
        let a = Pose::look_at(Vec3::new(0.5, 2.0, 1.5), Vec3::new(-1.0, 2.0, 1.5), Vec3::z()).unwrap();
        let b = Pose::look_at(Vec3::new(3.5, 2.0, 1.5), Vec3::new(5.0, 2.0, 1.5), Vec3::z()).unwrap();
        let fa = raycast_gt(&sc, &cam(), &a).unwrap();
        let fb = raycast_gt(&sc, &cam(), &b).unwrap();
        assert_eq!(view_overlap(&fa, &fb).unwrap(), 0.0);
    }

    #[test]
    fn identical_sources_fail_rule_one() {
        let sc = generate_scene(1);
        let mut poses = random_poses(&sc, 3, 1);
        poses[1] = poses[0];
        let frames = capture(&sc, &cam(), &poses).unwrap();
        let t = select_triplets(&frames, &TripletBounds { max_pair: 0.01, max_single: 1.1, min_union: 0.0, max_union: 1.0 }).unwrap();
        assert!(t.iter().all(|t| !(t.s1 == 0 && t.s2 == 1)));
        assert!(select_triplets(&frames[..2], &TripletBounds::default()).is_err());
    }
}
