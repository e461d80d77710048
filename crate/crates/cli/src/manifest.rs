//! Scene manifests and triplet lists on disk.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use voxnvs_core::geometry::{CameraIntrinsics, Pose, RgbdFrame};
use voxnvs_core::scenes::{generate_scene_with, ProceduralScene, SceneParams};

use crate::imageio;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIPLETS_FILE: &str = "triplets.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Relative to the manifest's directory.
    pub rgb: String,
    /// 16-bit PNG, millimeters, 0 = invalid.
    pub depth: String,
    pub intrinsics: IntrinsicsRecord,
    /// World-from-camera, row-major 4x4, meters.
    pub pose: [f64; 16],
}

/// How a procedural scene was generated, so its ground truth can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub seed: u64,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub checker: bool,
}

impl GeneratorRecord {
    pub fn new(seed: u64, p: &SceneParams) -> Self {
        GeneratorRecord {
            seed,
            room_min: p.room_min,
            room_max: p.room_max,
            min_boxes: p.min_boxes,
            max_boxes: p.max_boxes,
            box_min: p.box_min,
            box_max: p.box_max,
            checker: p.checker,
        }
    }

    pub fn scene(&self) -> ProceduralScene {
        let params = SceneParams {
            room_min: self.room_min,
            room_max: self.room_max,
            min_boxes: self.min_boxes,
            max_boxes: self.max_boxes,
            box_min: self.box_min,
            box_max: self.box_max,
            checker: self.checker,
        };
        generate_scene_with(self.seed, &params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    /// Meters.
    pub voxel_size: f64,
    /// World position of the lattice origin, meters.
    pub origin: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorRecord>,
    pub frames: Vec<FrameRecord>,
}

impl SceneManifest {
    /// Semantic checks; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            bail!("voxel_size: must be positive, got {}", self.voxel_size);
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            bail!("origin: non-finite value");
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.camera().map_err(|e| anyhow!("frames[{i}].intrinsics: {e}"))?;
            f.world_from_camera().map_err(|e| anyhow!("frames[{i}].pose: {e}"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: SceneManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(m)
    }
}

impl FrameRecord {
    pub fn camera(&self) -> voxnvs_core::Result<CameraIntrinsics> {
        let k = &self.intrinsics;
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }

    pub fn world_from_camera(&self) -> voxnvs_core::Result<Pose> {
        Pose::from_row_major(&self.pose)
    }

    pub fn from_frame(rgb: String, depth: String, f: &RgbdFrame) -> Self {
        let k = &f.intrinsics;
        FrameRecord {
            rgb,
            depth,
            intrinsics: IntrinsicsRecord { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height },
            pose: f.pose.to_row_major(),
        }
    }
}

/// A validated manifest and its decoded frames.
pub fn load_manifest(path: &Path) -> Result<(SceneManifest, Vec<RgbdFrame>)> {
    let m = SceneManifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let frames = m
        .frames
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rgb = imageio::read_rgb(&dir.join(&r.rgb)).with_context(|| format!("frames[{i}].rgb"))?;
            let depth = imageio::read_depth(&dir.join(&r.depth)).with_context(|| format!("frames[{i}].depth"))?;
            let frame = RgbdFrame::new(rgb, depth, r.camera()?, r.world_from_camera()?)
                .map_err(|e| anyhow!("frames[{i}]: {e}"))?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, frames))
}

/// Writes the frames as PNGs next to a new manifest in `dir`.
pub fn write_scene(
    dir: &Path,
    scene_id: &str,
    frames: &[RgbdFrame],
    voxel_size: f64,
    origin: [f64; 3],
    generator: Option<GeneratorRecord>,
) -> Result<SceneManifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let (rgb, depth) = (format!("frame_{i:03}_rgb.png"), format!("frame_{i:03}_depth.png"));
        imageio::write_rgb(&dir.join(&rgb), &f.rgb)?;
        imageio::write_depth(&dir.join(&depth), &f.depth)?;
        records.push(FrameRecord::from_frame(rgb, depth, f));
    }
    let m = SceneManifest { scene_id: scene_id.to_string(), voxel_size, origin, generator, frames: records };
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// A manifest file, a scene directory, or a directory of scene directories
/// (sorted by name).
pub fn find_manifests(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![path.join(MANIFEST_FILE)]);
    }
    let entries = fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join(MANIFEST_FILE)))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        bail!("no {MANIFEST_FILE} under {}", path.display());
    }
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    /// Absolute path of the scene manifest.
    pub manifest: String,
    pub s1: usize,
    pub s2: usize,
    pub q: usize,
    pub union_overlap: f64,
    /// Query pixels seen by neither source; PNG relative to the list file.
    pub unobserved: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletList {
    pub max_pair: f64,
    pub max_single: f64,
    pub min_union: f64,
    pub max_union: f64,
    pub triplets: Vec<TripletRecord>,
}

impl TripletList {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(TRIPLETS_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
