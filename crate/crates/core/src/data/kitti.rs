//! 16-bit PNG disparity maps (`value = raw / 256`, raw 0 = no measurement)
//! and 8-bit RGB image IO.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DISPARITY_SCALE: f64 = 256.0;

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode()?)
}

/// Decode raw 16-bit samples into a disparity map and its validity mask.
pub fn decode_disparity(raw: &[u16], h: usize, w: usize) -> (Tensor, Vec<bool>) {
    let values = raw.iter().map(|&r| r as f64 / DISPARITY_SCALE).collect();
    let mask = raw.iter().map(|&r| r != 0).collect();
    (Tensor::from_vec(&[h, w], values).expect("raw length matches"), mask)
}

/// Quantize to raw samples; non-finite or non-positive values become 0.
pub fn encode_disparity(map: &Tensor) -> Vec<u16> {
    map.data()
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d * DISPARITY_SCALE).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect()
}

pub fn read_kitti_disparity(path: &Path) -> Result<(Tensor, Vec<bool>)> {
    match open(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(decode_disparity(img.as_raw(), h as usize, w as usize))
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{}: expected a 16-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_kitti_disparity(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "disparity maps are [H, W], got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.dim(0) as u32, map.dim(1) as u32);
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, encode_disparity(map)).expect("buffer size matches");
    img.save(path)?;
    Ok(())
}

/// `[3, H, W]` image in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::Shape(format!(
            "RGB images are [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = |c: usize| (image.get(&[c, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v(0), v(1), v(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Colour-coded disparity (blue = far, red = near) scaled to `max_disparity`.
pub fn write_disparity_visualization(path: &Path, map: &Tensor, max_disparity: f64) -> Result<()> {
    let (h, w) = (map.dim(0), map.dim(1));
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let t = (map.get(&[y as usize, x as usize]) / max_disparity).clamp(0.0, 1.0);
        let ramp = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0) as u8;
        Rgb([ramp(3.0), ramp(2.0), ramp(1.0)])
    });
    img.save(path)?;
    Ok(())
}
