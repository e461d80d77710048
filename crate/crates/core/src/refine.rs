//! 2D refinement: an upsampler that doubles the coarse render's resolution
//! and a patch discriminator for adversarial training.
//!
//! Images on the tape are `pixels x channels` matrices with pixels in
//! row-major order, so 2D convolutions reuse the rulebook convolution.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Csr, ParamStore, Rulebook, Tape, Tensor, Var, NO_NEIGHBOR};
use crate::encoder::EMBED_DIM;
use crate::error::{Error, Result};
use crate::geometry::{FeatureImage, Image};
use crate::nn::{Conv, Init, LEAKY_SLOPE};

pub const UPSAMPLER_PREFIX: &str = "up.";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";
pub const COARSE_CHANNELS: usize = 3 + EMBED_DIM;
const UP_WIDTH: usize = 32;

/// Output size and rulebook of a `kernel x kernel` convolution with the
/// given stride and zero padding. Taps are ordered `ky * kernel + kx`.
pub fn conv2d_rulebook(width: usize, height: usize, kernel: usize, stride: usize, pad: usize) -> Result<(usize, usize, Rulebook)> {
    let out = |n: usize| (n + 2 * pad).checked_sub(kernel).map(|r| r / stride + 1);
    let (Some(ow), Some(oh)) = (out(width), out(height)) else {
        return Err(Error::Shape(format!("{width}x{height} image too small for a {kernel}x{kernel} kernel with padding {pad}")));
    };
    let taps = kernel * kernel;
    let mut nbr = vec![NO_NEIGHBOR; ow * oh * taps];
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let x = (ox * stride + kx) as isize - pad as isize;
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if (0..width as isize).contains(&x) && (0..height as isize).contains(&y) {
                        nbr[(oy * ow + ox) * taps + ky * kernel + kx] = (y as usize * width + x as usize) as u32;
                    }
                }
            }
        }
    }
    Ok((ow, oh, Rulebook::new(width * height, ow * oh, taps, nbr)?))
}

/// Source pixel of every pixel of the 2x nearest-neighbor enlargement.
pub fn nearest_upsample_index(width: usize, height: usize) -> Vec<u32> {
    let w2 = 2 * width;
    (0..4 * width * height).map(|i| ((i / w2 / 2) * width + (i % w2) / 2) as u32).collect()
}

/// Half-pixel-centered bilinear 2x enlargement as a sparse matrix
/// (`4wh x wh`); edges clamp.
pub fn bilinear_upsample_matrix(width: usize, height: usize) -> Csr {
    let axis = |x: usize, n: usize| -> [(usize, f64); 2] {
        let s = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = s - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    let mut m = Csr::new(width * height);
    for y in 0..2 * height {
        let ay = axis(y, height);
        for x in 0..2 * width {
            let ax = axis(x, width);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(yi, wy) in &ay {
                for &(xi, wx) in &ax {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let c = yi * width + xi;
                    match row.iter_mut().find(|e| e.0 == c) {
                        Some(e) => e.1 += w,
                        None => row.push((c, w)),
                    }
                }
            }
            m.push_row(row);
        }
    }
    m
}

/// Bilinear 2x enlargement of a plain image.
pub fn bilinear_upsample(img: &Image) -> Image {
    let m = bilinear_upsample_matrix(img.width, img.height);
    let mut out = Image::new(2 * img.width, 2 * img.height, img.channels);
    for (r, px) in out.data.chunks_mut(img.channels).enumerate() {
        for (i, w) in m.row(r) {
            for (o, x) in px.iter_mut().zip(img.pixel(i % img.width, i / img.width)) {
                *o += w * x;
            }
        }
    }
    out
}

/// Precomputed geometry of the upsampler for one coarse size.
#[derive(Clone, Debug)]
pub struct UpsamplerGeometry {
    pub width: usize,
    pub height: usize,
    low: Arc<Rulebook>,
    high: Arc<Rulebook>,
    nearest: Arc<Vec<u32>>,
    bilinear: Arc<Csr>,
}

impl UpsamplerGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("empty coarse image".into()));
        }
        Ok(UpsamplerGeometry {
            width,
            height,
            low: Arc::new(conv2d_rulebook(width, height, 3, 1, 1)?.2),
            high: Arc::new(conv2d_rulebook(2 * width, 2 * height, 3, 1, 1)?.2),
            nearest: Arc::new(nearest_upsample_index(width, height)),
            bilinear: Arc::new(bilinear_upsample_matrix(width, height)),
        })
    }
}

/// Three 3x3 convolutions at coarse resolution, nearest 2x, two more 3x3
/// convolutions, producing a residual over the bilinear enlargement of the
/// coarse color. The last layer starts at zero.
#[derive(Clone, Debug)]
pub struct UpsamplerNet {
    pub low: Vec<Conv>,
    pub high: Vec<Conv>,
}

impl UpsamplerNet {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = UP_WIDTH;
        let low = vec![
            Conv::register(store, "up.low0", 9, COARSE_CHANNELS, c, Init::Glorot, rng)?,
            Conv::register(store, "up.low1", 9, c, c, Init::Glorot, rng)?,
            Conv::register(store, "up.low2", 9, c, c, Init::Glorot, rng)?,
        ];
        let high = vec![
            Conv::register(store, "up.high0", 9, c, c, Init::Glorot, rng)?,
            Conv::register(store, "up.high1", 9, c, 3, Init::Zeros, rng)?,
        ];
        Ok(UpsamplerNet { low, high })
    }

    /// `coarse` is `(w*h) x COARSE_CHANNELS` with color in the first three
    /// columns; returns `(4wh) x 3` in `[0, 1]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, coarse: Var, geo: &UpsamplerGeometry) -> Result<Var> {
        let (rows, cols) = t.shape(coarse);
        if rows != geo.width * geo.height || cols != COARSE_CHANNELS {
            return Err(Error::Shape(format!(
                "coarse input {rows}x{cols} for a {}x{} image with {COARSE_CHANNELS} channels",
                geo.width, geo.height
            )));
        }
        let mut h = coarse;
        for c in &self.low {
            h = c.forward(t, store, h, &geo.low)?;
            h = t.leaky_relu(h, LEAKY_SLOPE);
        }
        h = t.gather_rows(h, geo.nearest.clone())?;
        h = self.high[0].forward(t, store, h, &geo.high)?;
        h = t.leaky_relu(h, LEAKY_SLOPE);
        let residual = self.high[1].forward(t, store, h, &geo.high)?;
        let rgb = t.slice_cols(coarse, 0, 3)?;
        let base = t.spmm(geo.bilinear.clone(), rgb)?;
        let out = t.add(base, residual)?;
        Ok(t.clamp(out, 0.0, 1.0))
    }
}

/// Coarse render as the upsampler's input matrix: color then embedding.
pub fn coarse_input(coarse: &FeatureImage) -> Result<Tensor> {
    if coarse.feature.channels != EMBED_DIM || coarse.rgb.channels != 3 {
        return Err(Error::Shape(format!(
            "coarse render with {} color and {} feature channels (expected 3 + {EMBED_DIM})",
            coarse.rgb.channels, coarse.feature.channels
        )));
    }
    let n = coarse.rgb.pixel_count();
    let mut data = Vec::with_capacity(n * COARSE_CHANNELS);
    for i in 0..n {
        data.extend_from_slice(&coarse.rgb.data[i * 3..i * 3 + 3]);
        data.extend_from_slice(&coarse.feature.data[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
    }
    Tensor::from_vec(n, COARSE_CHANNELS, data)
}

/// Full-resolution color from a coarse render.
pub fn upsample(coarse: &FeatureImage, net: &UpsamplerNet, store: &ParamStore) -> Result<Image> {
    let x = coarse_input(coarse)?;
    let geo = UpsamplerGeometry::new(coarse.width(), coarse.height())?;
    let mut t = Tape::new();
    let xv = t.constant(x);
    let y = net.forward(&mut t, store, xv, &geo)?;
    Image::from_data(2 * geo.width, 2 * geo.height, 3, t.value(y).data().to_vec())
}

/// PatchGAN-style discriminator: three stride-2 and two stride-1 4x4
/// convolutions producing a map of patch logits.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub layers: Vec<Conv>,
}

const DISC_LAYERS: [(usize, usize, usize, usize); 5] = [
    // (cin, cout, stride, pad)
    (3, 16, 2, 1),
    (16, 32, 2, 1),
    (32, 32, 2, 1),
    (32, 32, 1, 2),
    (32, 1, 1, 2),
];

impl DiscriminatorNet {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let layers = DISC_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, _, _))| Conv::register(store, &format!("disc.c{i}"), 16, cin, cout, Init::Glorot, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscriminatorNet { layers })
    }

    /// Patch logits (`patches x 1`) of a `(w*h) x 3` image. With `frozen`
    /// the weights enter as constants, so no gradient reaches them.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, img: Var, width: usize, height: usize, frozen: bool) -> Result<Var> {
        let (mut w, mut h) = (width, height);
        let mut x = img;
        let last = self.layers.len() - 1;
        for (i, (c, &(_, _, stride, pad))) in self.layers.iter().zip(&DISC_LAYERS).enumerate() {
            let (ow, oh, rb) = conv2d_rulebook(w, h, 4, stride, pad)?;
            let (wv, bv) = if frozen {
                (t.constant(store.value(c.w).clone()), t.constant(store.value(c.b).clone()))
            } else {
                (t.param(store, c.w), t.param(store, c.b))
            };
            x = t.conv(x, wv, Arc::new(rb))?;
            x = t.add_row(x, bv)?;
            if i < last {
                x = t.leaky_relu(x, LEAKY_SLOPE);
            }
            (w, h) = (ow, oh);
        }
        Ok(x)
    }
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(t: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let nr = t.neg(real_logits);
    let a = t.add_scalar(nr, 1.0);
    let a = t.relu(a);
    let a = t.mean(a)?;
    let b = t.add_scalar(fake_logits, 1.0);
    let b = t.relu(b);
    let b = t.mean(b)?;
    t.add(a, b)
}

/// `-mean(fake)`.
pub fn hinge_g_loss(t: &mut Tape, fake_logits: Var) -> Result<Var> {
    let m = t.mean(fake_logits)?;
    Ok(t.neg(m))
}

#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    /// Gradients reach only the discriminator.
    pub d: Var,
    /// Gradients reach only the generator (through `fake`).
    pub g: Var,
}

/// Hinge losses for `(w*h) x 3` real and generated images.
pub fn gan_losses(
    t: &mut Tape,
    store: &ParamStore,
    disc: &DiscriminatorNet,
    real: Var,
    fake: Var,
    width: usize,
    height: usize,
) -> Result<GanLosses> {
    if t.shape(real) != t.shape(fake) {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", t.shape(real), t.shape(fake))));
    }
    let detached = t.constant(t.value(fake).clone());
    let real_logits = disc.forward(t, store, real, width, height, false)?;
    let fake_logits = disc.forward(t, store, detached, width, height, false)?;
    let d = hinge_d_loss(t, real_logits, fake_logits)?;
    let g_logits = disc.forward(t, store, fake, width, height, true)?;
    let g = hinge_g_loss(t, g_logits)?;
    Ok(GanLosses { d, g })
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(img.pixel_count(), img.channels, img.data.clone()).expect("image layout")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_coarse(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FeatureImage {
        FeatureImage {
            rgb: random_image(rng, w, h, 3),
            depth: random_image(rng, w, h, 1),
            opacity: random_image(rng, w, h, 1),
            feature: random_image(rng, w, h, EMBED_DIM),
        }
    }

    fn nets(seed: u64) -> (ParamStore, UpsamplerNet, DiscriminatorNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let u = UpsamplerNet::register(&mut s, &mut rng).unwrap();
        let d = DiscriminatorNet::register(&mut s, &mut rng).unwrap();
        (s, u, d)
    }

    /// Direct dense 2D convolution with zero padding.
    fn dense_conv(x: &Tensor, w: usize, h: usize, weights: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
        let cin = x.cols();
        let cout = weights.cols();
        let ow = (w + 2 * pad - k) / stride + 1;
        let oh = (h + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(ow * oh, cout);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let (xx, yy) = ((ox * stride + kx) as isize - pad as isize, (oy * stride + ky) as isize - pad as isize);
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            for co in 0..cout {
                                let v = out.get(oy * ow + ox, co)
                                    + x.get(yy as usize * w + xx as usize, ci) * weights.get((ky * k + kx) * cin + ci, co);
                                out.set(oy * ow + ox, co, v);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_rulebook_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(w, h, k, s, p) in &[(7, 5, 3, 1, 1), (8, 8, 4, 2, 1), (6, 9, 4, 1, 2), (5, 5, 3, 2, 0)] {
            let x = Tensor::from_vec(w * h, 2, (0..w * h * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let wt = Tensor::from_vec(k * k * 2, 3, (0..k * k * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (ow, oh, rb) = conv2d_rulebook(w, h, k, s, p).unwrap();
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(wt.clone());
            let y = t.conv(xv, wv, Arc::new(rb)).unwrap();
            let oracle = dense_conv(&x, w, h, &wt, k, s, p);
            assert_eq!(t.shape(y), (ow * oh, 3));
            for (a, b) in t.value(y).data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(conv2d_rulebook(2, 2, 4, 1, 0).is_err());
    }

    #[test]
    fn bilinear_matches_formula_and_keeps_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 5, 4, 2);
        let up = bilinear_upsample(&img);
        assert_eq!((up.width, up.height), (10, 8));
        for y in 0..8 {
            for x in 0..10 {
                let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 4.0);
                let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(4), (y0 + 1).min(3));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for c in 0..2 {
                    let v = (1.0 - fy) * ((1.0 - fx) * img.pixel(x0, y0)[c] + fx * img.pixel(x1, y0)[c])
                        + fy * ((1.0 - fx) * img.pixel(x0, y1)[c] + fx * img.pixel(x1, y1)[c]);
                    assert!((up.pixel(x, y)[c] - v).abs() < 1e-12);
                }
            }
        }
        let flat = bilinear_upsample(&Image::filled(3, 3, 3, 0.37));
        assert!(flat.data.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn zero_residual_gives_bilinear_color() {
        let (s, u, _) = nets(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_coarse(&mut rng, 6, 5);
        let out = upsample(&c, &u, &s).unwrap();
        assert_eq!(out, bilinear_upsample(&c.rgb));

        let mut flat = c.clone();
        flat.rgb = Image::filled(6, 5, 3, 0.6);
        let out = upsample(&flat, &u, &s).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));

        let mut bad = c;
        bad.feature = Image::new(6, 5, 4);
        assert!(upsample(&bad, &u, &s).is_err());
    }

    fn randomize(s: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng, scale: f64) {
        for id in s.ids().collect::<Vec<_>>() {
            if s.name(id).starts_with(prefix) {
                s.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
            }
        }
    }

    #[test]
    fn trained_shape_output_is_finite_and_local() {
        let (mut s, u, _) = nets(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        randomize(&mut s, UPSAMPLER_PREFIX, &mut rng, 0.05);
        let c = random_coarse(&mut rng, 16, 12);
        let a = upsample(&c, &u, &s).unwrap();
        assert_eq!((a.width, a.height, a.channels), (32, 24, 3));
        assert!(a.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let (pu, pv) = (7, 5);
        let mut c2 = c.clone();
        c2.feature.pixel_mut(pu, pv).iter_mut().for_each(|v| *v += 3.0);
        c2.rgb.pixel_mut(pu, pv)[0] = 1.0 - c2.rgb.pixel(pu, pv)[0];
        let b = upsample(&c2, &u, &s).unwrap();
        let mut changed = 0;
        for y in 0..24 {
            for x in 0..32 {
                if a.pixel(x, y) != b.pixel(x, y) {
                    changed += 1;
                    let d = (x as isize - 2 * pu as isize).abs().max((y as isize - 2 * pv as isize).abs());
                    assert!(d <= 10, "pixel ({x}, {y}) changed");
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn hinge_losses_limits_and_oracle() {
        let mut t = Tape::new();
        let r = t.constant(Tensor::filled(5, 1, 2.0));
        let f = t.constant(Tensor::filled(5, 1, -2.0));
        let d = hinge_d_loss(&mut t, r, f).unwrap();
        assert_eq!(t.scalar_value(d), 0.0);
        let z = t.constant(Tensor::zeros(5, 1));
        let d = hinge_d_loss(&mut t, z, z).unwrap();
        let g = hinge_g_loss(&mut t, z).unwrap();
        assert_eq!((t.scalar_value(d), t.scalar_value(g)), (2.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rl: Vec<f64> = (0..13).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fl: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let want_d = rl.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / 13.0 + fl.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / 9.0;
        let want_g = -fl.iter().sum::<f64>() / 9.0;
        let r = t.constant(Tensor::column(rl));
        let f = t.constant(Tensor::column(fl));
        let d = hinge_d_loss(&mut t, r, f).unwrap();
        let g = hinge_g_loss(&mut t, f).unwrap();
        assert!((t.scalar_value(d) - want_d).abs() < 1e-12);
        assert!((t.scalar_value(g) - want_g).abs() < 1e-12);
    }

    #[test]
    fn gan_gradients_reach_only_their_side() {
        let (mut s, u, d) = nets(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize(&mut s, UPSAMPLER_PREFIX, &mut rng, 0.1);
        let c = random_coarse(&mut rng, 8, 8);
        let real = random_image(&mut rng, 16, 16, 3);
        let geo = UpsamplerGeometry::new(8, 8).unwrap();
        let grad_norms = |s: &ParamStore, prefix: &str| -> f64 {
            s.ids().filter(|&id| s.name(id).starts_with(prefix)).map(|id| s.grad(id).max_abs()).fold(0.0, f64::max)
        };
        for use_d in [true, false] {
            let mut t = Tape::new();
            let x = t.constant(coarse_input(&c).unwrap());
            let fake = u.forward(&mut t, &s, x, &geo).unwrap();
            let r = t.constant(image_tensor(&real));
            let l = gan_losses(&mut t, &s, &d, r, fake, 16, 16).unwrap();
            s.zero_grads();
            t.backward_into(if use_d { l.d } else { l.g }, &mut s).unwrap();
            let (gu, gd) = (grad_norms(&s, UPSAMPLER_PREFIX), grad_norms(&s, DISCRIMINATOR_PREFIX));
            if use_d {
                assert!(gu == 0.0 && gd > 0.0);
            } else {
                assert!(gu > 0.0 && gd == 0.0);
            }
        }
    }

    #[test]
    fn refinement_passes_grad_check() {
        let (mut s, u, d) = nets(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // small weights keep the output inside the clamp range
        randomize(&mut s, "up.high1", &mut rng, 0.02);
        let coarse = coarse_input(&random_coarse(&mut rng, 4, 4)).unwrap();
        let coarse = coarse.map(|v| 0.3 + 0.4 * v);
        let real = image_tensor(&random_image(&mut rng, 8, 8, 3));
        let geo = UpsamplerGeometry::new(4, 4).unwrap();
        // each loss is checked against the side its gradient is meant for
        for (prefix, use_d) in [(UPSAMPLER_PREFIX, false), (DISCRIMINATOR_PREFIX, true)] {
            s.train_only(&[prefix]);
            let r = grad_check(&mut s, 1e-3, 400, 12, |t, st| {
                let x = t.constant(coarse.clone());
                let fake = u.forward(t, st, x, &geo)?;
                let r = t.constant(real.clone());
                let l = gan_losses(t, st, &d, r, fake, 8, 8)?;
                if use_d {
                    return Ok(l.d);
                }
                let d2 = t.square(fake);
                let rec = t.mean(d2)?;
                t.add(l.g, rec)
            })
            .unwrap();
            assert!(r.checked > 200, "{prefix}: {r:?}");
            assert!(r.max_rel_error < 1e-4, "{prefix}: {r:?}");
        }
    }
}
