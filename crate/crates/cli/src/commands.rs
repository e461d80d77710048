use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxnvs_core::geometry::{fuse_frames, CameraIntrinsics, Image, RgbdFrame, Vec3};
use voxnvs_core::metrics::{masked_eval, EvalReport, EvalView};
use voxnvs_core::pipeline::{
    evaluate_completion, evaluate_inpainting, evaluate_phase1, infer, render_trajectory, train_phase1, train_phase2,
    train_phase3, train_phase4, triplet_trajectory, Ablation, Checkpoint, Model, ModelSettings, PhaseConfig,
    StripSample, Triplet, ViewScene,
};
use voxnvs_core::scenes::{capture, generate_scene_with, random_poses, scene_origin, select_triplets, SceneParams, TripletBounds};

use crate::manifest::{find_manifests, load_manifest, write_scene, GeneratorRecord, TripletList, TripletRecord, TRIPLETS_FILE};
use crate::{imageio, EvalArgs, GenScenesArgs, MakeTripletsArgs, RenderArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_scenes(a: &GenScenesArgs) -> Result<()> {
    ensure!(a.count > 0, "--count must be positive");
    ensure!(a.views > 0, "--views must be positive");
    let k = CameraIntrinsics::from_fov(a.size, a.size, a.fov)?;
    let params = SceneParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    create_dir(&a.out)?;
    for i in 0..a.count {
        let (scene_seed, pose_seed): (u64, u64) = (rng.gen(), rng.gen());
        let scene = generate_scene_with(scene_seed, &params);
        let frames = capture(&scene, &k, &random_poses(&scene, a.views, pose_seed))?;
        let id = format!("scene_{i:03}");
        let origin = scene_origin(&scene, a.voxel_size);
        let generator = GeneratorRecord::new(scene_seed, &params);
        write_scene(&a.out.join(&id), &id, &frames, a.voxel_size, origin.into(), Some(generator))?;
        info!("{id}: {} boxes, {} views", scene.boxes.len(), frames.len());
    }
    Ok(())
}

pub fn make_triplets(a: &MakeTripletsArgs) -> Result<()> {
    let bounds =
        TripletBounds { max_pair: a.max_pair, max_single: a.max_single, min_union: a.min_union, max_union: a.max_union };
    ensure!(bounds.min_union <= bounds.max_union, "--min-union exceeds --max-union");
    create_dir(&a.out)?;
    let mut list = TripletList {
        max_pair: bounds.max_pair,
        max_single: bounds.max_single,
        min_union: bounds.min_union,
        max_union: bounds.max_union,
        triplets: Vec::new(),
    };
    for path in find_manifests(&a.scenes)? {
        let (_, frames) = load_manifest(&path)?;
        let found = select_triplets(&frames, &bounds)?;
        info!("{}: {} triplets from {} views", path.display(), found.len(), frames.len());
        let abs = fs::canonicalize(&path).with_context(|| format!("resolving {}", path.display()))?;
        for t in found {
            let name = format!("triplet_{:04}_unobserved.png", list.triplets.len());
            let q = &frames[t.q];
            imageio::write_mask(&a.out.join(&name), q.width(), q.height(), &t.unobserved)?;
            list.triplets.push(TripletRecord {
                manifest: abs.to_string_lossy().into_owned(),
                s1: t.s1,
                s2: t.s2,
                q: t.q,
                union_overlap: t.union_overlap,
                unobserved: name,
            });
        }
    }
    list.save(&a.out.join(TRIPLETS_FILE))
}

/// The triplet's frames and its scene's voxel size.
fn load_triplet(r: &TripletRecord) -> Result<(Triplet, f64)> {
    let (m, frames) = load_manifest(Path::new(&r.manifest))?;
    let get = |i: usize, field: &str| -> Result<RgbdFrame> {
        frames.get(i).cloned().with_context(|| format!("{field} = {i} but the scene has {} frames", frames.len()))
    };
    Ok((Triplet { s1: get(r.s1, "s1")?, s2: get(r.s2, "s2")?, q: get(r.q, "q")? }, m.voxel_size))
}

fn strip_sample(path: &Path) -> Result<StripSample> {
    let (m, frames) = load_manifest(path)?;
    let gen = m.generator.as_ref().with_context(|| {
        format!("{}: phases 2 and 3 need the scene generator record for ground truth", path.display())
    })?;
    Ok(StripSample::from_frames(gen.scene(), &frames, m.voxel_size)?)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ablation: Ablation = match &a.ablation {
        Some(s) => s.parse()?,
        None if a.phase == 4 => Ablation::FULL,
        None => Ablation::DISENTANGLED,
    };
    let mut config = PhaseConfig::new(a.phase, ablation);
    config.seed = a.seed;
    config.unfreeze_renderer = a.unfreeze_renderer;
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(lr) = a.lr {
        config.lr = lr;
    }
    if let Some(r) = a.rays {
        config.rays_per_step = r;
    }
    config.validate()?;
    let mut model = match &a.ckpt_in {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", p.display()))?;
            info!("resuming from phase-{} checkpoint {}", ck.meta.phase, p.display());
            ck.model()?
        }
        None => Model::new(ModelSettings::default(), a.seed)?,
    };

    let log = match a.phase {
        1 => {
            let scenes = find_manifests(&a.data)?
                .iter()
                .map(|p| {
                    let (m, frames) = load_manifest(p)?;
                    Ok(ViewScene {
                        cloud: fuse_frames(&frames)?,
                        views: frames,
                        voxel_size: m.voxel_size,
                        origin: Vec3::from(m.origin),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let log = train_phase1(&mut model, &scenes, &config)?;
            let ev = evaluate_phase1(&model, &scenes, &config)?;
            info!("held-out rays {}: psnr {:.2} dB, delta {:.3}", ev.rays, ev.psnr, ev.delta);
            log
        }
        2 => {
            let pairs = find_manifests(&a.data)?
                .iter()
                .map(|p| strip_sample(p)?.completion_pair().map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            let log = train_phase2(&mut model, &pairs, &config)?;
            let scores = evaluate_completion(&model, &pairs)?;
            info!("mean completion IoU {:.3}", scores.iter().sum::<f64>() / scores.len() as f64);
            log
        }
        3 => {
            let pairs = find_manifests(&a.data)?
                .iter()
                .map(|p| strip_sample(p)?.texture_pair(&model, ablation).map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            let log = train_phase3(&mut model, &pairs, &config)?;
            if let Ok((err, base)) = evaluate_inpainting(&model, &pairs) {
                info!("masked L1 {err:.4} (zero prediction {base:.4})");
            }
            log
        }
        _ => {
            let list = TripletList::load(&a.data)?;
            let mut triplets = Vec::new();
            let mut voxel_size = None;
            for r in &list.triplets {
                let (t, vs) = load_triplet(r)?;
                if voxel_size.is_some_and(|v| v != vs) {
                    bail!("{}: triplets mix voxel sizes", a.data.display());
                }
                voxel_size = Some(vs);
                triplets.push(t);
            }
            let vs = voxel_size.with_context(|| format!("{}: empty triplet list", a.data.display()))?;
            train_phase4(&mut model, &triplets, vs, &config)?
        }
    };
    let ck = Checkpoint::capture(&model, &config);
    fs::write(&a.ckpt_out, ck.to_bytes()).with_context(|| format!("writing {}", a.ckpt_out.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.ckpt_out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    fs::write(&log_path, log.to_tsv()).with_context(|| format!("writing {}", log_path.display()))?;
    if log.skipped > 0 {
        info!("{} steps skipped", log.skipped);
    }
    info!("wrote {} after {} steps", a.ckpt_out.display(), ck.meta.step);
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let ablation: Ablation = a.ablation.parse()?;
    let bytes = fs::read(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", a.ckpt.display()))?;
    ck.check_supports(ablation)?;
    let model = ck.model()?;
    let list = TripletList::load(&a.triplet)?;
    let record = list
        .triplets
        .get(a.index)
        .with_context(|| format!("--index {} but the list has {} triplets", a.index, list.triplets.len()))?;
    let (t, vs) = load_triplet(record)?;
    create_dir(&a.out)?;
    let k = t.q.intrinsics;
    match a.trajectory {
        Some(n) => {
            ensure!(n >= 2, "--trajectory needs at least 2 frames");
            let poses = triplet_trajectory(&t.s1.pose, &t.q.pose, &t.s2.pose, n);
            let frames = render_trajectory(&model, [&t.s1, &t.s2], &poses, &k, vs, ablation)?;
            for (i, (rgb, coarse)) in frames.iter().enumerate() {
                imageio::write_rgb(&a.out.join(format!("frame_{i:03}.png")), rgb)?;
                imageio::write_depth(&a.out.join(format!("frame_{i:03}_depth.png")), &coarse.depth)?;
            }
            info!("rendered {} frames into {}", frames.len(), a.out.display());
        }
        None => {
            let out = infer(&model, [&t.s1, &t.s2], &t.q.pose, &k, vs, ablation)?;
            imageio::write_rgb(&a.out.join("query.png"), &out.rgb)?;
            imageio::write_rgb(&a.out.join("query_coarse.png"), &out.coarse.rgb)?;
            imageio::write_depth(&a.out.join("query_coarse_depth.png"), &out.coarse.depth)?;
            info!("completed {} voxels; wrote {}", out.completed.len(), a.out.display());
        }
    }
    Ok(())
}

/// One image to score: color, optional depth and optional mask paths.
struct EvalItem {
    name: String,
    pred: PathBuf,
    gt: PathBuf,
    pred_depth: Option<PathBuf>,
    gt_depth: Option<PathBuf>,
    mask: Option<PathBuf>,
}

fn eval_items(a: &EvalArgs) -> Result<Vec<EvalItem>> {
    if !a.gt.is_dir() {
        let name = a.gt.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![EvalItem {
            name,
            pred: a.pred.clone(),
            gt: a.gt.clone(),
            pred_depth: a.pred_depth.clone(),
            gt_depth: a.gt_depth.clone(),
            mask: a.mask.clone(),
        }]);
    }
    let mut names: Vec<String> = fs::read_dir(&a.gt)
        .with_context(|| format!("reading {}", a.gt.display()))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".png") && !n.ends_with("_depth.png"))
        .map(|n| n.trim_end_matches(".png").to_string())
        .collect();
    names.sort();
    ensure!(!names.is_empty(), "no PNG images in {}", a.gt.display());
    Ok(names
        .into_iter()
        .map(|n| {
            let depth = format!("{n}_depth.png");
            let gt_depth = a.gt.join(&depth);
            EvalItem {
                pred: a.pred.join(format!("{n}.png")),
                gt: a.gt.join(format!("{n}.png")),
                pred_depth: gt_depth.is_file().then(|| a.pred.join(&depth)),
                gt_depth: gt_depth.is_file().then_some(gt_depth),
                mask: a.mask.as_ref().map(|m| m.join(format!("{n}.png"))),
                name: n,
            }
        })
        .collect())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    ensure!(a.pred_depth.is_some() == a.gt_depth.is_some(), "--pred-depth and --gt-depth go together");
    let mut report = EvalReport::default();
    for item in eval_items(a)? {
        let pred = imageio::read_rgb(&item.pred)?;
        let gt = imageio::read_rgb(&item.gt)?;
        let depths: Option<(Image, Image)> = match (&item.pred_depth, &item.gt_depth) {
            (Some(p), Some(g)) => Some((imageio::read_depth(p)?, imageio::read_depth(g)?)),
            _ => None,
        };
        let mask = match &item.mask {
            Some(m) => {
                let (w, h, bits) = imageio::read_mask(m)?;
                ensure!((w, h) == (gt.width, gt.height), "{}: mask is {w}x{h}, image is {}x{}", m.display(), gt.width, gt.height);
                bits
            }
            None => vec![false; gt.pixel_count()],
        };
        let pv = EvalView { rgb: &pred, depth: depths.as_ref().map(|d| &d.0) };
        let gv = EvalView { rgb: &gt, depth: depths.as_ref().map(|d| &d.1) };
        report.images.push(masked_eval(&item.name, &pv, &gv, &mask).with_context(|| format!("scoring {}", item.name))?);
    }
    fs::write(&a.report, report.to_tsv()).with_context(|| format!("writing {}", a.report.display()))?;
    eprint!("{}", report.summary_table());
    Ok(())
}
