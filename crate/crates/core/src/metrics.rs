//! Image and depth quality metrics, over the full frame and over the
//! unobserved region.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Image;

/// Reported for an exact match.
pub const PSNR_SENTINEL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const DELTA_THRESHOLD: f64 = 1.25;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

fn check_mask(img: &Image, mask: &[bool]) -> Result<()> {
    if mask.len() != img.pixel_count() {
        return Err(Error::Shape(format!("mask of {} pixels for a {}x{} image", mask.len(), img.width, img.height)));
    }
    Ok(())
}

/// PSNR from a mean squared error on a unit dynamic range.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR over the pixels where `mask` is set; `None` for an empty mask.
pub fn masked_psnr(pred: &Image, gt: &Image, mask: &[bool]) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    check_mask(pred, mask)?;
    let c = pred.channels;
    let (mut se, mut n) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..c {
            let d = pred.data[p * c + k] - gt.data[p * c + k];
            se += d * d;
        }
        n += c;
    }
    Ok((n > 0).then(|| psnr_from_mse(se / n as f64)))
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(masked_psnr(pred, gt, &vec![true; pred.pixel_count()])?.expect("non-empty image"))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g1[y] * g1[x] / (s * s);
        }
    }
    w
}

/// Windowed SSIM restricted to `mask`: windows are centered on masked
/// pixels (clamped so the window fits in the image) and their statistics
/// use Gaussian weights times the mask. Channels are averaged.
pub fn masked_ssim(pred: &Image, gt: &Image, mask: &[bool]) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    check_mask(pred, mask)?;
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Precondition(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let r = SSIM_WINDOW / 2;
    let mut centers: Vec<(usize, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(p, _)| ((p % w).clamp(r, w - 1 - r), (p / w).clamp(r, h - 1 - r)))
        .collect();
    if centers.is_empty() {
        return Ok(None);
    }
    centers.sort_unstable_by_key(|&(x, y)| (y, x));
    centers.dedup();
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for &(cx, cy) in &centers {
            let (mut sw, mut mx, mut my) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let (x, y) = (cx + dx - r, cy + dy - r);
                    if !mask[y * w + x] {
                        continue;
                    }
                    let wt = g[dy * SSIM_WINDOW + dx];
                    sw += wt;
                    mx += wt * pred.data[(y * w + x) * ch + c];
                    my += wt * gt.data[(y * w + x) * ch + c];
                }
            }
            mx /= sw;
            my /= sw;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let (x, y) = (cx + dx - r, cy + dy - r);
                    if !mask[y * w + x] {
                        continue;
                    }
                    let wt = g[dy * SSIM_WINDOW + dx] / sw;
                    let a = pred.data[(y * w + x) * ch + c] - mx;
                    let b = gt.data[(y * w + x) * ch + c] - my;
                    vx += wt * a * a;
                    vy += wt * b * b;
                    cxy += wt * a * b;
                }
            }
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / centers.len() as f64;
    }
    Ok(Some(total / ch as f64))
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(masked_ssim(pred, gt, &vec![true; pred.pixel_count()])?.expect("non-empty image"))
}

/// `(RMSE, δ1.25)` over the masked pixels. A pixel counts toward δ when
/// both depths are positive and their ratio either way is below 1.25.
pub fn depth_metrics(pred: &Image, gt: &Image, mask: &[bool]) -> Result<(f64, f64)> {
    check_dims(pred, gt)?;
    check_mask(pred, mask)?;
    if pred.channels != 1 {
        return Err(Error::Shape(format!("depth images have one channel, got {}", pred.channels)));
    }
    let (mut se, mut good, mut n) = (0.0, 0usize, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (a, b) = (pred.data[p], gt.data[p]);
        se += (a - b) * (a - b);
        if a > 0.0 && b > 0.0 && (a / b).max(b / a) < DELTA_THRESHOLD {
            good += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("depth metrics over an empty mask".into()));
    }
    Ok(((se / n as f64).sqrt(), good as f64 / n as f64))
}

/// Metrics of one region of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Present when the region has pixels with valid ground-truth depth.
    pub depth_rmse: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub name: String,
    pub full: RegionMetrics,
    /// Absent when the unobserved mask is empty.
    pub unobserved: Option<RegionMetrics>,
}

/// Color plus optional depth of one view.
#[derive(Clone, Copy, Debug)]
pub struct EvalView<'a> {
    pub rgb: &'a Image,
    pub depth: Option<&'a Image>,
}

fn region(pred: &EvalView, gt: &EvalView, mask: &[bool]) -> Result<Option<RegionMetrics>> {
    let Some(psnr) = masked_psnr(pred.rgb, gt.rgb, mask)? else {
        return Ok(None);
    };
    let ssim = masked_ssim(pred.rgb, gt.rgb, mask)?.expect("mask is non-empty");
    let (depth_rmse, delta) = match (pred.depth, gt.depth) {
        (Some(pd), Some(gd)) => {
            check_mask(gd, mask)?;
            let valid: Vec<bool> = mask.iter().zip(&gd.data).map(|(&m, &d)| m && d > 0.0).collect();
            if valid.iter().any(|&v| v) {
                let (r, d) = depth_metrics(pd, gd, &valid)?;
                (Some(r), Some(d))
            } else {
                (None, None)
            }
        }
        _ => (None, None),
    };
    Ok(Some(RegionMetrics { psnr, ssim, depth_rmse, delta }))
}

/// Every metric over the full frame and over the `unobserved` pixels.
pub fn masked_eval(name: &str, pred: &EvalView, gt: &EvalView, unobserved: &[bool]) -> Result<ImageEval> {
    check_mask(gt.rgb, unobserved)?;
    let all = vec![true; gt.rgb.pixel_count()];
    let full = region(pred, gt, &all)?.expect("full frame is non-empty");
    Ok(ImageEval { name: name.to_string(), full, unobserved: region(pred, gt, unobserved)? })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
}

/// Means over the images where each value is present.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub depth_rmse: Option<f64>,
    pub delta: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn aggregate(&self, unobserved: bool) -> Aggregate {
        let regions: Vec<Option<&RegionMetrics>> =
            self.images.iter().map(|e| if unobserved { e.unobserved.as_ref() } else { Some(&e.full) }).collect();
        Aggregate {
            psnr: mean(regions.iter().map(|r| r.map(|r| r.psnr))),
            ssim: mean(regions.iter().map(|r| r.map(|r| r.ssim))),
            depth_rmse: mean(regions.iter().map(|r| r.and_then(|r| r.depth_rmse))),
            delta: mean(regions.iter().map(|r| r.and_then(|r| r.delta))),
        }
    }

    /// One line per image and region plus the two aggregate lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tregion\tpsnr\tssim\tdepth_rmse\tdelta_1.25\n");
        let mut row = |name: &str, region: &str, m: Option<(f64, f64, Option<f64>, Option<f64>)>| {
            let (p, q, r, d) = match m {
                Some((p, q, r, d)) => (Some(p), Some(q), r, d),
                None => (None, None, None, None),
            };
            let _ = writeln!(s, "{name}\t{region}\t{}\t{}\t{}\t{}", fmt(p), fmt(q), fmt(r), fmt(d));
        };
        for e in &self.images {
            row(&e.name, "full", Some((e.full.psnr, e.full.ssim, e.full.depth_rmse, e.full.delta)));
            row(&e.name, "unobserved", e.unobserved.as_ref().map(|u| (u.psnr, u.ssim, u.depth_rmse, u.delta)));
        }
        for (region, unobs) in [("full", false), ("unobserved", true)] {
            let a = self.aggregate(unobs);
            let _ = writeln!(s, "mean\t{region}\t{}\t{}\t{}\t{}", fmt(a.psnr), fmt(a.ssim), fmt(a.depth_rmse), fmt(a.delta));
        }
        s
    }

    /// Aggregate table with full-frame / unobserved columns side by side.
    pub fn summary_table(&self) -> String {
        let (f, u) = (self.aggregate(false), self.aggregate(true));
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>12} {:>12}", "metric", "full", "unobserved");
        for (name, a, b) in [
            ("PSNR", f.psnr, u.psnr),
            ("SSIM", f.ssim, u.ssim),
            ("RMSE", f.depth_rmse, u.depth_rmse),
            ("delta<1.25", f.delta, u.delta),
        ] {
            let _ = writeln!(s, "{name:<12} {:>12} {:>12}", fmt(a), fmt(b));
        }
        s
    }
}
