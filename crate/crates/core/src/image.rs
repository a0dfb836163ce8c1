//! Image container and the deterministic preprocessing ops.
//!
//! Pixels are `f32` in `[0, 1]`, row-major, interleaved channels (HWC).
//! Operations whose arithmetic can leave the unit interval (blur edges,
//! resize interpolation, watermark deltas, fingerprint transforms) clip on
//! write; pure rearrangements (crops) copy values untouched. PNG I/O accepts
//! exactly 8-bit grayscale and RGB files — palette, alpha and 16-bit inputs
//! are format errors, not silent conversions.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use crate::dct::Plane;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if !matches!(channels, 1 | 3) {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "pixel buffer length {} does not match {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(ImageBuffer { height, width, channels, pixels })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageBuffer { height, width, channels, pixels: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        ImageBuffer { height, width, channels, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn clip_in_place(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luma as a single plane.
    pub fn luma(&self) -> Plane {
        let mut data = Vec::with_capacity(self.height * self.width);
        match self.channels {
            1 => data.extend_from_slice(&self.pixels),
            _ => {
                for px in self.pixels.chunks_exact(3) {
                    data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
                }
            }
        }
        Plane::new(self.height, self.width, data)
    }

    /// Add a per-pixel delta (e.g. a luma adjustment) to every channel,
    /// clipping to `[0, 1]`.
    pub fn add_to_all_channels(&mut self, delta: &Plane) -> Result<()> {
        if delta.height != self.height || delta.width != self.width {
            return Err(Error::Shape("delta plane does not match image dimensions".into()));
        }
        for (i, d) in delta.data.iter().enumerate() {
            for c in 0..self.channels {
                let v = &mut self.pixels[i * self.channels + c];
                *v = (*v + d).clamp(0.0, 1.0);
            }
        }
        Ok(())
    }
}

/// Load an 8-bit grayscale or RGB PNG.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    {
        let info = reader.info();
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::ImageFormat {
                path: path.into(),
                reason: format!("unsupported bit depth {:?}", info.bit_depth),
            });
        }
        match info.color_type {
            png::ColorType::Grayscale | png::ColorType::Rgb => {}
            other => {
                return Err(Error::ImageFormat {
                    path: path.into(),
                    reason: format!("unsupported color type {other:?}"),
                })
            }
        }
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::ImageFormat {
                path: path.into(),
                reason: format!("unsupported color type {other:?}"),
            })
        }
    };
    let (w, h) = (frame.width as usize, frame.height as usize);
    let pixels = buf[..frame.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::new(h, w, channels, pixels)
}

/// Save as 8-bit PNG (grayscale or RGB matching the buffer's channel count).
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder =
        png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    let bytes: Vec<u8> =
        img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    Ok(())
}

/// Crop a centered `size x size` window; offsets round down when the margin
/// is odd.
pub fn center_crop(img: &ImageBuffer, size: usize) -> Result<ImageBuffer> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::Shape(format!(
            "center_crop size {size} outside image {}x{}",
            img.height, img.width
        )));
    }
    let top = (img.height - size) / 2;
    let left = (img.width - size) / 2;
    Ok(crop(img, top, left, size))
}

/// Crop a uniformly random `size x size` window (row offset drawn first).
pub fn random_crop(img: &ImageBuffer, size: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::Shape(format!(
            "random_crop size {size} outside image {}x{}",
            img.height, img.width
        )));
    }
    let top = rng.gen_range(0..=img.height - size);
    let left = rng.gen_range(0..=img.width - size);
    Ok(crop(img, top, left, size))
}

fn crop(img: &ImageBuffer, top: usize, left: usize, size: usize) -> ImageBuffer {
    let mut pixels = Vec::with_capacity(size * size * img.channels);
    for y in 0..size {
        let row = ((top + y) * img.width + left) * img.channels;
        pixels.extend_from_slice(&img.pixels[row..row + size * img.channels]);
    }
    ImageBuffer { height: size, width: size, channels: img.channels, pixels }
}

/// Remove `rows` rows from the bottom of the image.
pub fn crop_bottom(img: &ImageBuffer, rows: usize) -> Result<ImageBuffer> {
    if rows >= img.height {
        return Err(Error::Shape(format!(
            "crop_bottom of {rows} rows leaves no pixels in a height-{} image",
            img.height
        )));
    }
    let keep = img.height - rows;
    Ok(ImageBuffer {
        height: keep,
        width: img.width,
        channels: img.channels,
        pixels: img.pixels[..keep * img.width * img.channels].to_vec(),
    })
}

/// Bilinear resize so the short side equals `target`; the long side scales
/// proportionally (rounded to nearest, at least 1).
pub fn resize_short_side(img: &ImageBuffer, target: usize) -> Result<ImageBuffer> {
    if target == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let (h, w) = (img.height, img.width);
    let (oh, ow) = if h <= w {
        let scale = target as f64 / h as f64;
        (target, ((w as f64 * scale).round() as usize).max(1))
    } else {
        let scale = target as f64 / w as f64;
        (((h as f64 * scale).round() as usize).max(1), target)
    };
    Ok(resize_bilinear(img, oh, ow))
}

fn resize_bilinear(img: &ImageBuffer, oh: usize, ow: usize) -> ImageBuffer {
    let c = img.channels;
    let mut out = Vec::with_capacity(oh * ow * c);
    let sy_scale = img.height as f64 / oh as f64;
    let sx_scale = img.width as f64 / ow as f64;
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = (sy - y0 as f64) as f32;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - wx) + img.get(y0, x1, ch) * wx;
                let bot = img.get(y1, x0, ch) * (1.0 - wx) + img.get(y1, x1, ch) * wx;
                out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer { height: oh, width: ow, channels: c, pixels: out }
}

/// Separable Gaussian blur with kernel radius `ceil(3*sigma)`, normalized
/// over the truncated support, edges clamped (replicated).
pub fn gaussian_blur(img: &ImageBuffer, sigma: f32) -> Result<ImageBuffer> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma as f64, radius);

    let (h, w, c) = (img.height, img.width, img.channels);
    // Horizontal pass.
    let mut tmp = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, &kw) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += img.get(y, sx as usize, ch) as f64 * kw;
                }
                tmp[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, &kw) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += tmp[(sy as usize * w + x) * c + ch] as f64 * kw;
                }
                out[(y * w + x) * c + ch] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageBuffer { height: h, width: w, channels: c, pixels: out })
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Rec. 601 grayscale conversion, luma replicated across the original
/// channel count.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    let luma = img.luma();
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for &l in &luma.data {
        for _ in 0..img.channels {
            pixels.push(l.clamp(0.0, 1.0));
        }
    }
    ImageBuffer { height: img.height, width: img.width, channels: img.channels, pixels }
}

/// Peak signal-to-noise ratio in dB between same-shaped images (unit peak).
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(Error::Shape("psnr operands differ in shape".into()));
    }
    let mse: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn test_image(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |y, x, c| {
            ((y * 31 + x * 17 + c * 57) % 256) as f32 / 255.0
        })
    }

    #[test]
    fn png_roundtrip_preserves_quantized_pixels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = test_image(19, 23);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (19, 23, 3));
        for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grayscale_png_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = ImageBuffer::from_fn(8, 8, 1, |y, x, _| ((y * 8 + x) as f32) / 63.0);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
    }

    #[test]
    fn palette_png_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("palette.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 4, 4);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(vec![0, 0, 0, 255, 255, 255]);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0]).unwrap();
        }
        let err = load_png(&path).unwrap_err();
        assert!(err.to_string().contains("color type"), "{err}");
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("deep.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 0, 128, 0, 255, 255, 64, 0]).unwrap();
        }
        let err = load_png(&path).unwrap_err();
        assert!(err.to_string().contains("bit depth"), "{err}");
    }

    #[test]
    fn center_crop_uses_floor_offsets() {
        // 5x5 -> 2x2: margin 3, offset floor(3/2) = 1.
        let img = ImageBuffer::from_fn(5, 5, 1, |y, x, _| (y * 5 + x) as f32 / 24.0);
        let crop = center_crop(&img, 2).unwrap();
        assert_eq!(crop.get(0, 0, 0), img.get(1, 1, 0));
        assert_eq!(crop.get(1, 1, 0), img.get(2, 2, 0));
    }

    #[test]
    fn center_crop_larger_than_image_is_rejected() {
        let img = test_image(8, 8);
        assert!(center_crop(&img, 9).is_err());
    }

    #[test]
    fn random_crop_is_deterministic_given_rng() {
        let img = test_image(16, 16);
        let a = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_bottom_removes_rows() {
        let img = test_image(10, 6);
        let cropped = crop_bottom(&img, 4).unwrap();
        assert_eq!(cropped.height(), 6);
        assert_eq!(cropped.get(5, 3, 1), img.get(5, 3, 1));
        assert!(crop_bottom(&img, 10).is_err());
    }

    #[test]
    fn resize_short_side_scales_proportionally() {
        let img = test_image(20, 40);
        let small = resize_short_side(&img, 10).unwrap();
        assert_eq!((small.height(), small.width()), (10, 20));
        let tall = resize_short_side(&test_image(40, 20), 10).unwrap();
        assert_eq!((tall.height(), tall.width()), (20, 10));
        assert!(resize_short_side(&img, 0).is_err());
    }

    #[test]
    fn resize_preserves_constant_images_exactly() {
        let img = ImageBuffer::constant(12, 30, 3, 0.42);
        let out = resize_short_side(&img, 7).unwrap();
        for &v in out.pixels() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_mean_and_reduces_variance() {
        let img = test_image(32, 32);
        let blurred = gaussian_blur(&img, 1.5).unwrap();
        assert!((img.mean() - blurred.mean()).abs() < 1e-3);
        let var = |im: &ImageBuffer| {
            let m = im.mean();
            im.pixels().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
                / im.pixels().len() as f64
        };
        assert!(var(&blurred) < var(&img));
    }

    #[test]
    fn blur_impulse_center_weight_matches_truncated_kernel() {
        // sigma = 1: center weight is (g(0)/sum)^2 of the radius-3 kernel.
        let mut img = ImageBuffer::constant(15, 15, 1, 0.0);
        img.set(7, 7, 0, 1.0);
        let blurred = gaussian_blur(&img, 1.0).unwrap();
        let k = gaussian_kernel(1.0, 3);
        let expected = (k[3] * k[3]) as f32;
        assert!(
            (blurred.get(7, 7, 0) - expected).abs() < 1e-6,
            "{} vs {expected}",
            blurred.get(7, 7, 0)
        );
        // And that value is ~0.159 for sigma 1.
        assert!((expected - 0.159).abs() < 5e-4);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = test_image(8, 8);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn grayscale_uses_rec601_weights() {
        let mut img = ImageBuffer::constant(1, 1, 3, 0.0);
        img.set(0, 0, 0, 1.0); // pure red
        let gray = to_grayscale(&img);
        for c in 0..3 {
            assert!((gray.get(0, 0, c) - 0.299).abs() < 1e-6);
        }
        // Grayscale images pass through unchanged.
        let g = ImageBuffer::from_fn(4, 4, 1, |y, x, _| (y + x) as f32 / 6.0);
        assert_eq!(to_grayscale(&g), g);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = test_image(8, 8);
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }
}
