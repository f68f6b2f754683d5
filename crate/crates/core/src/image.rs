//! RGB images in `[0, 1]`, PNG/JPEG I/O, MSE/PSNR, and seeded synthetic
//! images for tests and demos.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Channel-major `(3, height, width)` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch { expected: vec![3, height, width], actual: vec![data.len()] });
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image { height, width, data: vec![value; Self::CHANNELS * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Ok(Image { height: h, width: w, data })
    }

    /// 8-bit quantization as written to PNG.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height, self.width);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = self.data[c * h * w + y as usize * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    /// The image after a PNG round trip.
    pub fn quantized_8bit(&self) -> Self {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image { height: self.height, width: self.width, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?)
    }

    /// From a `(3, h, w)` tensor of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch { expected: vec![3, h, w], actual: vec![c, h, w] });
        }
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(Image { height: h, width: w, data })
    }
}

/// Stacks equally sized images into `(N, 3, h, w)`.
pub fn stack(images: &[Image], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("no images to stack"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch { expected: first.shape().to_vec(), actual: img.shape().to_vec() });
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, first.height, first.width), device)?)
}

/// Splits `(N, 3, h, w)` into images.
pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.dim(0)?).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / mse)` for unit peak; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR as text, with `inf` for identical images.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

/// Seeded smooth test images: a two-colour gradient background with a few
/// soft-edged discs and bars. Distinct seeds give visually distinct images.
pub fn synthetic_images(count: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(&mut rng, side)).collect()
}

fn synthetic_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (color(), color());
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = side as f32;
    let mut img = Image::filled(side, side, 0.0);
    let plane = side * side;
    for y in 0..side {
        for x in 0..side {
            let u = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img.data[c * plane + y * side + x] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.15 * s..0.35 * s);
        let bar = rng.random_bool(0.4);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let d = if bar { px.abs().max(py.abs() * 3.0) } else { (px * px + py * py).sqrt() };
                let cover = (r - d + 1.0).clamp(0.0, 1.0);
                for c in 0..3 {
                    let v = &mut img.data[c * plane + y * side + x];
                    *v = *v * (1.0 - cover) + col[c] * cover;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let z = Image::filled(4, 4, 0.0);
        let o = Image::filled(4, 4, 1.0);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert!(psnr(&z, &z).unwrap().is_infinite());
        assert_eq!(format_psnr(psnr(&z, &z).unwrap()), "inf");
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        let a = Image::filled(4, 4, 0.5);
        let b = Image::new(4, 4, a.data.iter().map(|v| (*v as f64 + 0.1) as f32).collect()).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-8);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(mse(&z, &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = synthetic_images(1, 16, 4).remove(0);
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized_8bit());
    }

    #[test]
    fn synthetic_images_are_seeded_and_distinct() {
        let a = synthetic_images(8, 32, 1);
        assert_eq!(a, synthetic_images(8, 32, 1));
        for i in 0..8 {
            assert!(a[i].data.iter().all(|v| (0.0..=1.0).contains(v)));
            for j in i + 1..8 {
                assert!(mse(&a[i], &a[j]).unwrap() > 1e-3);
            }
        }
    }

    #[test]
    fn stack_round_trip() {
        let imgs = synthetic_images(3, 8, 2);
        let t = stack(&imgs, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 3, 8, 8]);
        assert_eq!(unstack(&t).unwrap(), imgs);
    }
}
