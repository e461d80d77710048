//! Cameras, poses, rays, images and point clouds, plus the world/voxel
//! coordinate conventions shared by every other module.
//!
//! Conventions: pinhole camera looking down its +z axis with +x right and
//! +y down; pixel `(u, v)` is sampled at its center `(u + 0.5, v + 0.5)`;
//! depth is z-depth along the optical axis, 0 marks an invalid pixel.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::sparse::VoxelCoord;

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!("focal lengths must be positive, got {self:?}")));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput(format!("principal point outside the image: {self:?}")));
        }
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "image size {}x{} must be non-zero and even",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera of the half-resolution render.
    pub fn half(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: self.cx / 2.0,
            cy: self.cy / 2.0,
            width: self.width / 2,
            height: self.height / 2,
        }
    }
}

/// Rigid world-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let p = Pose { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite entries".into()));
        }
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal with determinant +1 (|RtR-I|={orth:.3e}, det={det:.6})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image -y).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at target equals eye".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at up is parallel to the view direction".into()))?;
        let y = z.cross(&x);
        Pose::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn transform_point(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn inverse_transform_point(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// World direction of the optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidInput("pose matrix bottom row must be [0 0 0 1]".into()));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Linear translation and spherical-linear rotation between two poses.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        if t == 0.0 {
            return *self;
        }
        if t == 1.0 {
            return *other;
        }
        let qa = UnitQuaternion::from_matrix(&self.rotation);
        let qb = UnitQuaternion::from_matrix(&other.rotation);
        let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation * (1.0 - t) + other.translation * t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let direction = direction
            .try_normalize(1e-300)
            .ok_or_else(|| Error::InvalidInput("ray direction has zero length".into()))?;
        if !origin.iter().all(|v| v.is_finite()) || !direction.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ray".into()));
        }
        Ok(Ray { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: &Vec3) -> bool {
        (0..3).all(|a| self.min[a] < p[a] && p[a] < self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Slab test: the parameter interval `[t_enter, t_exit]` over which the
    /// infinite line `origin + t * direction` lies inside the box.
    #[inline]
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let (o, d) = (ray.origin[a], ray.direction[a]);
            if d == 0.0 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut lo, mut hi) = ((self.min[a] - o) * inv, (self.max[a] - o) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Dense `height x width x channels` image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Posed color + depth observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub rgb: Image,
    pub depth: Image,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl RgbdFrame {
    pub fn new(rgb: Image, depth: Image, intrinsics: CameraIntrinsics, pose: Pose) -> Result<Self> {
        let f = RgbdFrame { rgb, depth, intrinsics, pose };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if self.rgb.channels != 3 || self.depth.channels != 1 {
            return Err(Error::Shape("frame needs 3 color channels and 1 depth channel".into()));
        }
        if (self.rgb.width, self.rgb.height) != (w, h) || (self.depth.width, self.depth.height) != (w, h) {
            return Err(Error::Shape(format!(
                "frame images {}x{} / {}x{} do not match intrinsics {w}x{h}",
                self.rgb.width, self.rgb.height, self.depth.width, self.depth.height
            )));
        }
        if !self.rgb.data.iter().all(|v| v.is_finite()) || !self.depth.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frame images".into()));
        }
        if self.depth.data.iter().any(|&d| d < 0.0) {
            return Err(Error::InvalidInput("negative depth".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data.iter().filter(|&&d| d > 0.0).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
    }

    pub fn min_corner(&self) -> Option<Vec3> {
        let mut it = self.positions.iter();
        let first = *it.next()?;
        Some(it.fold(first, |m, p| m.inf(p)))
    }

    pub fn max_corner(&self) -> Option<Vec3> {
        let mut it = self.positions.iter();
        let first = *it.next()?;
        Some(it.fold(first, |m, p| m.sup(p)))
    }
}

/// Half-resolution render: color, z-depth, opacity and the composited
/// embedding of every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
    pub feature: Image,
}

impl FeatureImage {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.channels
    }
}

/// World-space ray through the center of pixel `(u, v)`.
pub fn pixel_ray(k: &CameraIntrinsics, pose: &Pose, u: usize, v: usize) -> Result<Ray> {
    if u >= k.width || v >= k.height {
        return Err(Error::Precondition(format!("pixel ({u}, {v}) outside {}x{}", k.width, k.height)));
    }
    Ok(pixel_ray_unchecked(k, pose, u as f64 + 0.5, v as f64 + 0.5))
}

/// Ray through continuous image coordinates `(x, y)`.
pub fn pixel_ray_unchecked(k: &CameraIntrinsics, pose: &Pose, x: f64, y: f64) -> Ray {
    let d_cam = Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
    Ray { origin: pose.translation, direction: (pose.rotation * d_cam).normalize() }
}

/// Continuous pixel coordinates and z-depth of a world point, if it lies in
/// front of the camera.
pub fn project(k: &CameraIntrinsics, pose: &Pose, p: &Vec3) -> Option<(f64, f64, f64)> {
    let c = pose.inverse_transform_point(p);
    if c.z <= 0.0 {
        return None;
    }
    Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
}

/// World point seen at pixel `(u, v)` with z-depth `depth`.
pub fn unproject(k: &CameraIntrinsics, pose: &Pose, u: usize, v: usize, depth: f64) -> Vec3 {
    let x = (u as f64 + 0.5 - k.cx) / k.fx;
    let y = (v as f64 + 0.5 - k.cy) / k.fy;
    pose.transform_point(&Vec3::new(x * depth, y * depth, depth))
}

/// One colored point per valid-depth pixel, in world coordinates.
pub fn back_project(frame: &RgbdFrame) -> PointCloud {
    let k = &frame.intrinsics;
    let mut cloud = PointCloud::default();
    for v in 0..k.height {
        for u in 0..k.width {
            let d = frame.depth.at(u, v);
            if d > 0.0 {
                cloud.positions.push(unproject(k, &frame.pose, u, v, d));
                let c = frame.rgb.pixel(u, v);
                cloud.colors.push([c[0], c[1], c[2]]);
            }
        }
    }
    cloud
}

pub fn fuse_frames(frames: &[RgbdFrame]) -> Result<PointCloud> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to fuse".into()));
    }
    let mut cloud = PointCloud::default();
    for f in frames {
        cloud.extend(&back_project(f));
    }
    Ok(cloud)
}

pub fn world_to_voxel(p: &Vec3, origin: &Vec3, voxel_size: f64) -> Result<VoxelCoord> {
    if !(voxel_size > 0.0) {
        return Err(Error::Precondition(format!("voxel size {voxel_size} must be positive")));
    }
    if !p.iter().chain(origin.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("world_to_voxel input".into()));
    }
    let q = (p - origin) / voxel_size;
    let f = |x: f64| -> Result<i32> {
        let c = x.floor();
        if c.abs() > crate::sparse::COORD_LIMIT as f64 {
            return Err(Error::InvalidInput(format!("point {p:?} is too far from the voxel origin")));
        }
        Ok(c as i32)
    };
    Ok(VoxelCoord::new(f(q.x)?, f(q.y)?, f(q.z)?))
}

/// Lattice origin for a cloud: the componentwise floor (in whole meters) of
/// its min corner, minus one voxel of padding.
pub fn voxel_origin(cloud: &PointCloud, voxel_size: f64) -> Result<Vec3> {
    let m = cloud.min_corner().ok_or_else(|| Error::Empty("point cloud".into()))?;
    Ok(m.map(f64::floor) - Vec3::repeat(voxel_size))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let k = CameraIntrinsics::new(50.0, 50.0, 2.5, 2.5, 6, 6).unwrap();
        // pixel (2,2) has its center at (2.5, 2.5)
        let r = pixel_ray(&k, &Pose::identity(), 2, 2).unwrap();
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
        let flip = Pose::new(*nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), std::f64::consts::PI).matrix(), Vec3::zeros())
            .unwrap();
        let r = pixel_ray(&k, &flip, 2, 2).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn pinhole_direction_by_hand() {
        let r = pixel_ray(&k100(), &Pose::identity(), 99, 49).unwrap();
        // center (99.5, 49.5): ((99.5-50)/100, (49.5-50)/100, 1)
        let expect = Vec3::new(0.495, -0.005, 1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-12);
        assert!(pixel_ray(&k100(), &Pose::identity(), 100, 0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 3, 2).is_err());
    }

    #[test]
    fn single_pixel_back_projection() {
        let k = CameraIntrinsics { fx: 10.0, fy: 10.0, cx: 0.5, cy: 0.5, width: 1, height: 1 };
        let f = RgbdFrame {
            rgb: Image::from_data(1, 1, 3, vec![0.1, 0.2, 0.3]).unwrap(),
            depth: Image::from_data(1, 1, 1, vec![2.0]).unwrap(),
            intrinsics: k,
            pose: Pose::identity(),
        };
        let c = back_project(&f);
        assert_eq!(c.positions, vec![Vec3::new(0.0, 0.0, 2.0)]);
        assert_eq!(c.colors, vec![[0.1, 0.2, 0.3]]);
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> RgbdFrame {
        let k = CameraIntrinsics::from_fov(16, 12, 70.0).unwrap();
        let eye = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let target = eye + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
        let pose = Pose::look_at(eye, target, Vec3::new(0.0, -1.0, 0.0)).unwrap();
        let depth = (0..16 * 12).map(|_| if rng.gen_bool(0.8) { rng.gen_range(0.3..5.0) } else { 0.0 }).collect();
        let rgb = (0..16 * 12 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        RgbdFrame::new(Image::from_data(16, 12, 3, rgb).unwrap(), Image::from_data(16, 12, 1, depth).unwrap(), k, pose)
            .unwrap()
    }

    #[test]
    fn back_projection_round_trips_through_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let f = random_frame(&mut rng);
            let cloud = back_project(&f);
            assert_eq!(cloud.len(), f.valid_depth_count());
            let mut i = 0;
            for v in 0..12 {
                for u in 0..16 {
                    let d = f.depth.at(u, v);
                    if d > 0.0 {
                        let (x, y, z) = project(&f.intrinsics, &f.pose, &cloud.positions[i]).unwrap();
                        assert!((x - (u as f64 + 0.5)).abs() < 1e-5 && (y - (v as f64 + 0.5)).abs() < 1e-5);
                        assert!((z - d).abs() < 1e-5);
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_ray_reprojects_to_its_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random_frame(&mut rng);
            let (u, v) = (rng.gen_range(0..16), rng.gen_range(0..12));
            let r = pixel_ray(&f.intrinsics, &f.pose, u, v).unwrap();
            let (x, y, _) = project(&f.intrinsics, &f.pose, &r.at(rng.gen_range(0.1..10.0))).unwrap();
            assert!((x - u as f64 - 0.5).abs() < 1e-5 && (y - v as f64 - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn fuse_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(fuse_frames(&[]).is_err());
        let a = random_frame(&mut rng);
        let b = random_frame(&mut rng);
        assert_eq!(fuse_frames(&[a.clone()]).unwrap(), back_project(&a));
        assert_eq!(fuse_frames(&[a.clone(), b.clone()]).unwrap().len(), a.valid_depth_count() + b.valid_depth_count());
        let mut empty = a.clone();
        empty.depth.data.iter_mut().for_each(|d| *d = 0.0);
        assert!(back_project(&empty).is_empty());
    }

    #[test]
    fn world_to_voxel_floor_rules() {
        let o = Vec3::zeros();
        assert_eq!(world_to_voxel(&o, &o, 0.1).unwrap(), VoxelCoord::new(0, 0, 0));
        assert_eq!(world_to_voxel(&Vec3::new(0.25, -0.05, 0.10), &o, 0.10).unwrap(), VoxelCoord::new(2, -1, 1));
        assert!(world_to_voxel(&Vec3::new(f64::NAN, 0.0, 0.0), &o, 0.1).is_err());
        assert!(world_to_voxel(&o, &o, 0.0).is_err());
    }

    #[test]
    fn world_to_voxel_membership_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let o = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let s = rng.gen_range(0.05..0.5);
            let c = world_to_voxel(&p, &o, s).unwrap();
            for (axis, ci) in [c.i, c.j, c.k].into_iter().enumerate() {
                let lo = o[axis] + ci as f64 * s;
                assert!(lo <= p[axis] + 1e-12 && p[axis] < lo + s + 1e-12);
            }
            let shift = Vec3::new(0.5, -1.5, 2.0);
            assert_eq!(world_to_voxel(&(p + shift), &(o + shift), s).unwrap(), c);
        }
    }

    #[test]
    fn pose_row_major_and_slerp_endpoints() {
        let a = Pose::look_at(Vec3::new(1.0, 2.0, 0.5), Vec3::new(3.0, 2.0, 1.0), Vec3::z()).unwrap();
        let b = Pose::look_at(Vec3::new(0.0, 0.0, 1.5), Vec3::new(-1.0, 2.0, 1.0), Vec3::z()).unwrap();
        let back = Pose::from_row_major(&a.to_row_major()).unwrap();
        assert_eq!(back, a);
        assert_eq!(a.interpolate(&b, 0.0), a);
        assert_eq!(a.interpolate(&b, 1.0), b);
        let mid = a.interpolate(&b, 0.5);
        mid.validate().unwrap();
        let mut bad = a.to_row_major();
        bad[0] += 0.01;
        assert!(Pose::from_row_major(&bad).is_err());
    }
}
