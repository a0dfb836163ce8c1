//! Training-time augmentation chain and the invisible watermark.
//!
//! The pipeline order is fixed: random crop, then Gaussian blur (probability
//! `p_blur`, sigma uniform in [0.5, 2.0]), then grayscale (`p_gray`), then
//! watermark (`p_watermark`). Changing the order is an API change, never a
//! silent behavioral one. Evaluation uses a center crop and nothing else.
//! Both classes are augmented with the same probabilities — in particular the
//! watermark fires on real and generated images alike, so it carries no label
//! information.
//!
//! The watermark is quantization-index modulation on one mid-frequency DCT
//! coefficient per 8x8 luma block: coefficient (2,1) is snapped to the
//! nearest even multiple of the step δ for a 0 bit, odd for a 1 bit. The
//! 32-bit payload tiles cyclically over blocks in row-major order. Decoding
//! reads each block's residue `r = (c/δ) mod 2` and folds it into a soft
//! score in [0,1] (0 = surely even, 1 = surely odd); per-bit confidence is
//! the mean score over that bit's blocks, and the decoded bit is
//! `confidence >= 0.5`. Unwatermarked content yields scores near 0.5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dct::{dct8_block, idct8_block, Plane, BLOCK};
use crate::error::{Error, Result};
use crate::image::{self, ImageBuffer};

/// Coefficient position (row 2, col 1) within each 8x8 block.
const COEFF_INDEX: usize = 2 * BLOCK + 1;
pub const PAYLOAD_BITS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Square crop side for both training and evaluation.
    pub crop_size: usize,
    pub p_blur: f64,
    pub p_gray: f64,
    pub p_watermark: f64,
    pub watermark_payload: WatermarkPayload,
    /// QIM quantization step δ.
    pub watermark_strength: f32,
}

impl Default for AugmentConfig {
    /// Desk-scale defaults (64-pixel crops; 256 is the full-scale setting).
    fn default() -> Self {
        AugmentConfig {
            crop_size: 64,
            p_blur: 0.01,
            p_gray: 0.05,
            p_watermark: 0.2,
            watermark_payload: WatermarkPayload(0xA5C3_96F0),
            watermark_strength: 8.0 / 255.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 16 {
            return Err(Error::Config(format!("crop_size {} below minimum 16", self.crop_size)));
        }
        for (name, p) in [("p_blur", self.p_blur), ("p_gray", self.p_gray), ("p_watermark", self.p_watermark)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.watermark_strength > 0.0) {
            return Err(Error::Config("watermark_strength must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed-length 32-bit watermark payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WatermarkPayload(pub u32);

impl WatermarkPayload {
    pub fn bit(&self, index: usize) -> bool {
        debug_assert!(index < PAYLOAD_BITS);
        (self.0 >> index) & 1 == 1
    }
}

/// Result of [`decode_watermark`]: best-guess payload plus a per-bit score in
/// [0,1] — near 0 means a confident zero, near 1 a confident one, and 0.5 no
/// information.
#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub payload: WatermarkPayload,
    pub confidence: [f64; PAYLOAD_BITS],
}

fn check_watermark_dims(img: &ImageBuffer) -> Result<(usize, usize)> {
    if img.height() < 32 || img.width() < 32 {
        return Err(Error::Shape(format!(
            "watermark requires at least 32x32, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok((img.height() / BLOCK, img.width() / BLOCK))
}

/// Embed `payload` by QIM on coefficient (2,1) of each full 8x8 luma block.
/// The luma delta is added to every channel; trailing rows/columns that do
/// not fill a block are left untouched.
pub fn embed_watermark(
    img: &ImageBuffer,
    payload: WatermarkPayload,
    strength: f32,
) -> Result<ImageBuffer> {
    if !(strength > 0.0) {
        return Err(Error::Config("watermark strength must be positive".into()));
    }
    let (by, bx) = check_watermark_dims(img)?;
    let luma = img.luma();
    let delta_step = strength as f64;
    let mut delta = Plane::zeros(img.height(), img.width());
    for b in 0..by * bx {
        let (row, col) = (b / bx, b % bx);
        let mut block = [0.0f64; BLOCK * BLOCK];
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                block[y * BLOCK + x] =
                    luma.get(row * BLOCK + y, col * BLOCK + x) as f64;
            }
        }
        dct8_block(&mut block);
        let c = block[COEFF_INDEX];
        let bit = payload.bit(b % PAYLOAD_BITS) as i64;
        // Nearest integer multiple of δ with the required parity.
        let q = 2.0 * ((c / delta_step - bit as f64) / 2.0).round() + bit as f64;
        let c_new = q * delta_step;
        if c_new == c {
            continue;
        }
        // Pixel-domain delta of changing one coefficient: inverse-transform a
        // block holding only the coefficient difference.
        let mut diff = [0.0f64; BLOCK * BLOCK];
        diff[COEFF_INDEX] = c_new - c;
        idct8_block(&mut diff);
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                delta.data[(row * BLOCK + y) * img.width() + col * BLOCK + x] =
                    diff[y * BLOCK + x] as f32;
            }
        }
    }
    let mut out = img.clone();
    out.add_to_all_channels(&delta)?;
    Ok(out)
}

/// Decode the tiled payload; see the module docs for the score convention.
pub fn decode_watermark(img: &ImageBuffer, strength: f32) -> Result<DecodeResult> {
    if !(strength > 0.0) {
        return Err(Error::Config("watermark strength must be positive".into()));
    }
    let (by, bx) = check_watermark_dims(img)?;
    let luma = img.luma();
    let mut score_sum = [0.0f64; PAYLOAD_BITS];
    let mut score_count = [0usize; PAYLOAD_BITS];
    for b in 0..by * bx {
        let (row, col) = (b / bx, b % bx);
        let mut block = [0.0f64; BLOCK * BLOCK];
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                block[y * BLOCK + x] =
                    luma.get(row * BLOCK + y, col * BLOCK + x) as f64;
            }
        }
        dct8_block(&mut block);
        let r = (block[COEFF_INDEX] / strength as f64).rem_euclid(2.0);
        // r near 0 or 2 -> even (score 0); near 1 -> odd (score 1).
        let score = if r <= 1.0 { r } else { 2.0 - r };
        score_sum[b % PAYLOAD_BITS] += score;
        score_count[b % PAYLOAD_BITS] += 1;
    }
    let mut confidence = [0.5f64; PAYLOAD_BITS];
    let mut payload = 0u32;
    for i in 0..PAYLOAD_BITS {
        if score_count[i] > 0 {
            confidence[i] = score_sum[i] / score_count[i] as f64;
        }
        if confidence[i] >= 0.5 {
            payload |= 1 << i;
        }
    }
    Ok(DecodeResult { payload: WatermarkPayload(payload), confidence })
}

/// The stochastic choices of one training augmentation, split from their
/// application so sampling statistics can be tested cheaply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub crop_top: usize,
    pub crop_left: usize,
    pub blur_sigma: Option<f32>,
    pub grayscale: bool,
    pub watermark: bool,
}

/// Draw one augmentation plan. Draw order is fixed: crop row, crop col, blur
/// coin (+ sigma when it fires), grayscale coin, watermark coin.
pub fn plan_augment(
    height: usize,
    width: usize,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentPlan> {
    config.validate()?;
    let size = config.crop_size;
    if height < size || width < size {
        return Err(Error::Shape(format!(
            "image {height}x{width} smaller than crop_size {size}"
        )));
    }
    let crop_top = rng.gen_range(0..=height - size);
    let crop_left = rng.gen_range(0..=width - size);
    let blur_sigma = if rng.gen_bool(config.p_blur) {
        Some(rng.gen_range(0.5f32..2.0))
    } else {
        None
    };
    let grayscale = rng.gen_bool(config.p_gray);
    let watermark = rng.gen_bool(config.p_watermark);
    Ok(AugmentPlan { crop_top, crop_left, blur_sigma, grayscale, watermark })
}

/// Apply a fixed plan (crop → blur → grayscale → watermark).
pub fn apply_plan(
    img: &ImageBuffer,
    config: &AugmentConfig,
    plan: &AugmentPlan,
) -> Result<ImageBuffer> {
    let size = config.crop_size;
    let mut out = ImageBuffer::from_fn(size, size, img.channels(), |y, x, c| {
        img.get(plan.crop_top + y, plan.crop_left + x, c)
    });
    if let Some(sigma) = plan.blur_sigma {
        out = image::gaussian_blur(&out, sigma)?;
    }
    if plan.grayscale {
        out = image::to_grayscale(&out);
    }
    if plan.watermark {
        out = embed_watermark(&out, config.watermark_payload, config.watermark_strength)?;
    }
    Ok(out)
}

/// Draw and apply one training augmentation.
pub fn apply_train_augment(
    img: &ImageBuffer,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ImageBuffer> {
    let plan = plan_augment(img.height(), img.width(), config, rng)?;
    apply_plan(img, config, &plan)
}

/// Deterministic evaluation transform: center crop only.
pub fn apply_eval_transform(img: &ImageBuffer, config: &AugmentConfig) -> Result<ImageBuffer> {
    config.validate()?;
    image::center_crop(img, config.crop_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn watermark_roundtrips_on_random_images() {
        let cfg = AugmentConfig::default();
        for seed in 0..25 {
            let img = random_image(seed, 64, 64);
            let marked =
                embed_watermark(&img, cfg.watermark_payload, cfg.watermark_strength).unwrap();
            let decoded = decode_watermark(&marked, cfg.watermark_strength).unwrap();
            assert_eq!(decoded.payload, cfg.watermark_payload, "seed {seed}");
        }
    }

    #[test]
    fn watermark_is_subtle() {
        let cfg = AugmentConfig::default();
        let img = random_image(17, 64, 64);
        let marked = embed_watermark(&img, cfg.watermark_payload, cfg.watermark_strength).unwrap();
        let mean_abs: f64 = img
            .pixels()
            .iter()
            .zip(marked.pixels().iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / img.pixels().len() as f64;
        assert!(mean_abs <= 2.0 * cfg.watermark_strength as f64, "mean abs change {mean_abs}");
        let psnr = image::psnr(&img, &marked).unwrap();
        assert!(psnr >= 40.0, "psnr {psnr}");
    }

    #[test]
    fn double_embedding_is_idempotent_within_one_level() {
        let cfg = AugmentConfig::default();
        let img = random_image(3, 64, 64);
        let once = embed_watermark(&img, cfg.watermark_payload, cfg.watermark_strength).unwrap();
        let twice = embed_watermark(&once, cfg.watermark_payload, cfg.watermark_strength).unwrap();
        for (a, b) in once.pixels().iter().zip(twice.pixels().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn unwatermarked_images_have_uninformative_scores() {
        let cfg = AugmentConfig::default();
        let mut total = 0.0;
        for seed in 100..120 {
            let img = random_image(seed, 64, 64);
            let decoded = decode_watermark(&img, cfg.watermark_strength).unwrap();
            total += decoded.confidence.iter().sum::<f64>() / PAYLOAD_BITS as f64;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() < 0.08, "mean confidence {mean}");
    }

    #[test]
    fn too_small_images_are_rejected() {
        let img = random_image(1, 16, 64);
        assert!(embed_watermark(&img, WatermarkPayload(0), 0.03).is_err());
        assert!(decode_watermark(&img, 0.03).is_err());
    }

    #[test]
    fn zero_probability_augment_is_pure_crop() {
        let cfg = AugmentConfig {
            p_blur: 0.0,
            p_gray: 0.0,
            p_watermark: 0.0,
            ..AugmentConfig::default()
        };
        let img = random_image(9, 96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_train_augment(&img, &cfg, &mut rng).unwrap();
        // Must equal some 64x64 window of the input verbatim.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_augment(96, 96, &cfg, &mut rng).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), img.get(plan.crop_top + y, plan.crop_left + x, c));
                }
            }
        }
    }

    #[test]
    fn augment_is_deterministic_given_seed() {
        let cfg = AugmentConfig { p_blur: 0.5, p_gray: 0.5, p_watermark: 0.5, ..Default::default() };
        let img = random_image(11, 80, 80);
        let a = apply_train_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = apply_train_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fire_rates_match_configured_probabilities() {
        // Binomial check on plan draws (3 sigma, n = 20_000 per coin).
        let cfg = AugmentConfig::default();
        let n = 20_000usize;
        let (mut blur, mut gray, mut mark) = (0usize, 0usize, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..n {
            let plan = plan_augment(64, 64, &cfg, &mut rng).unwrap();
            blur += plan.blur_sigma.is_some() as usize;
            gray += plan.grayscale as usize;
            mark += plan.watermark as usize;
        }
        for (count, p) in [(blur, cfg.p_blur), (gray, cfg.p_gray), (mark, cfg.p_watermark)] {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (count as f64 - n as f64 * p).abs();
            assert!(diff <= 3.0 * sigma, "count {count}, expected {}", n as f64 * p);
        }
    }

    #[test]
    fn eval_transform_is_exactly_center_crop() {
        let cfg = AugmentConfig::default();
        let img = random_image(13, 100, 90);
        let a = apply_eval_transform(&img, &cfg).unwrap();
        let b = image::center_crop(&img, cfg.crop_size).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let cfg = AugmentConfig { p_blur: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig { crop_size: 8, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
