//! PNG encoding of colors (8-bit), depth (16-bit millimeters) and masks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use png::{BitDepth, ColorType};
use voxnvs_core::geometry::Image;

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().with_context(|| format!("writing {}", path.display()))?;
    w.write_image_data(data).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = png::Decoder::new(file).read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut data = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut data).with_context(|| format!("decoding {}", path.display()))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        bail!("{}: expected a 3-channel image, got {}", path.display(), img.channels);
    }
    let data: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path, img.width, img.height, ColorType::Rgb, BitDepth::Eight, &data)
}

/// 8-bit RGB or RGBA (alpha dropped) as values in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let d = read_png(path)?;
    let stride = match (d.color, d.depth) {
        (ColorType::Rgb, BitDepth::Eight) => 3,
        (ColorType::Rgba, BitDepth::Eight) => 4,
        other => bail!("{}: unsupported color format {other:?} (expected 8-bit RGB)", path.display()),
    };
    let data = d.data.chunks_exact(stride).flat_map(|p| p[..3].iter().map(|&b| b as f64 / 255.0)).collect();
    Ok(Image::from_data(d.width, d.height, 3, data)?)
}

/// Meters to 16-bit millimeters, saturating; 0 stays invalid.
pub fn write_depth(path: &Path, depth: &Image) -> Result<()> {
    if depth.channels != 1 {
        bail!("{}: expected a 1-channel depth map, got {}", path.display(), depth.channels);
    }
    let mut data = Vec::with_capacity(depth.data.len() * 2);
    for &m in &depth.data {
        let mm = if m.is_finite() && m > 0.0 { (m * 1000.0).round().min(65535.0) as u16 } else { 0 };
        data.extend_from_slice(&mm.to_be_bytes());
    }
    write_png(path, depth.width, depth.height, ColorType::Grayscale, BitDepth::Sixteen, &data)
}

pub fn read_depth(path: &Path) -> Result<Image> {
    let d = read_png(path)?;
    if (d.color, d.depth) != (ColorType::Grayscale, BitDepth::Sixteen) {
        bail!("{}: depth must be 16-bit grayscale, got {:?} {:?}", path.display(), d.color, d.depth);
    }
    let data = d.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 1000.0).collect();
    Ok(Image::from_data(d.width, d.height, 1, data)?)
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, width, height, ColorType::Grayscale, BitDepth::Eight, &data)
}

/// 8-bit grayscale; values above 127 are set.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let d = read_png(path)?;
    if (d.color, d.depth) != (ColorType::Grayscale, BitDepth::Eight) {
        bail!("{}: mask must be 8-bit grayscale, got {:?} {:?}", path.display(), d.color, d.depth);
    }
    Ok((d.width, d.height, d.data.iter().map(|&b| b > 127).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_is_stored_in_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = Image::from_data(2, 1, 1, vec![2.5, 0.0]).unwrap();
        write_depth(&p, &d).unwrap();
        let raw = read_png(&p).unwrap();
        assert_eq!(u16::from_be_bytes([raw.data[0], raw.data[1]]), 2500);
        assert_eq!(read_depth(&p).unwrap().data, vec![2.5, 0.0]);
    }

    #[test]
    fn colors_quantize_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = Image::from_data(1, 1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap().data, vec![0.0, 1.0, 128.0 / 255.0]);
    }

    #[test]
    fn masks_round_trip_and_formats_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask(&p, 3, 1, &[true, false, true]).unwrap();
        assert_eq!(read_mask(&p).unwrap(), (3, 1, vec![true, false, true]));
        assert!(read_depth(&p).is_err());
        assert!(read_rgb(&p).is_err());
    }
}
