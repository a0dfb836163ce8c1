//! Pixel-level detection data: stroke masks, simulated inpainting fills with
//! copy-back compositing, CutMix label synthesis, and the Dice-loss training
//! loop for the fully-convolutional head.
//!
//! Composites use a hard binary blend — unmasked pixels are bit-equal to the
//! original image, so the only trace of manipulation inside the frame is the
//! generator fingerprint itself, never a blending seam. The simulated
//! inpainter starts from a blurred copy of the original (context-aware fill),
//! so a detector cannot win by spotting out-of-context content; it has to
//! find the fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, FingerprintSpec, Manifest, SplitCounts, SPLITS};
use crate::dct::Plane;
use crate::detector::{
    build_pixel_net, images_to_tensor, masks_to_tensor, predict_mask, weighted_dice_loss,
    ConfusionCounts, DetectorModel, PixelMetrics,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::{self, ImageBuffer};
use crate::rng::derive_rng;
use crate::tensor::{backward, AdamConfig, OptimizerState};

// ---------------------------------------------------------------------------
// Stroke masks
// ---------------------------------------------------------------------------

/// Relative weights for the three mask element shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeMix {
    pub polyline: f64,
    pub ellipse: f64,
    pub rectangle: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        ShapeMix { polyline: 0.5, ellipse: 0.25, rectangle: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    /// Target coverage fraction range (lo, hi).
    pub coverage: (f64, f64),
    /// Number of initial elements per mask.
    pub stroke_count: (usize, usize),
    /// Stroke width as a fraction of the shorter image side.
    pub stroke_width: (f64, f64),
    pub shapes: ShapeMix,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            coverage: (0.15, 0.35),
            stroke_count: (3, 8),
            stroke_width: (0.03, 0.12),
            shapes: ShapeMix::default(),
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "coverage range ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        if self.stroke_count.0 < 1 || self.stroke_count.0 > self.stroke_count.1 {
            return Err(Error::Config(format!(
                "stroke_count range {:?} must be ordered and at least 1",
                self.stroke_count
            )));
        }
        let (wlo, whi) = self.stroke_width;
        if !(0.0 < wlo && wlo <= whi && whi < 1.0) {
            return Err(Error::Config(format!(
                "stroke_width range ({wlo}, {whi}) must sit strictly inside (0, 1)"
            )));
        }
        let mix = self.shapes;
        if mix.polyline < 0.0 || mix.ellipse < 0.0 || mix.rectangle < 0.0 {
            return Err(Error::Config("shape weights must be nonnegative".into()));
        }
        if mix.polyline + mix.ellipse + mix.rectangle <= 0.0 {
            return Err(Error::Config("shape weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Binary mask plane plus its measured coverage.
#[derive(Clone, Debug)]
pub struct StrokeMask {
    pub plane: Plane,
    pub coverage: f64,
}

impl StrokeMask {
    /// Wrap an existing binary plane, measuring its coverage.
    pub fn from_plane(plane: Plane) -> Self {
        let coverage = mask_coverage(&plane);
        StrokeMask { plane, coverage }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        debug_assert!(value == 0.0 || value == 1.0);
        StrokeMask::from_plane(Plane::new(height, width, vec![value; height * width]))
    }
}

fn mask_coverage(plane: &Plane) -> f64 {
    plane.data.iter().map(|&v| v as f64).sum::<f64>() / plane.data.len() as f64
}

fn dist_to_segment(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { ((px - a.0) * dx + (py - a.1) * dy) / len2 } else { 0.0 };
    let t = t.clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn rasterize_capsule(plane: &mut Plane, a: (f32, f32), b: (f32, f32), radius: f32) {
    let (h, w) = (plane.height, plane.width);
    let y_min = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let y_max = ((a.1.max(b.1) + radius).ceil() as usize).min(h.saturating_sub(1));
    let x_min = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let x_max = ((a.0.max(b.0) + radius).ceil() as usize).min(w.saturating_sub(1));
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            if dist_to_segment(x as f32, y as f32, a, b) <= radius {
                plane.data[y * w + x] = 1.0;
            }
        }
    }
}

/// Add one random element to the mask. Draw order is fixed: shape kind, then
/// the shape's own parameters. Stroke widths follow the spec range; ellipse
/// and rectangle extents reuse that range doubled (compact shapes need more
/// girth than an elongated stroke to contribute comparable area).
fn draw_element(plane: &mut Plane, spec: &MaskSpec, rng: &mut impl Rng) {
    let (h, w) = (plane.height as f32, plane.width as f32);
    let min_dim = h.min(w);
    let mix = spec.shapes;
    let total = mix.polyline + mix.ellipse + mix.rectangle;
    let pick = rng.gen_range(0.0..total);
    if pick < mix.polyline {
        let n_pts = rng.gen_range(3..=6);
        let mut x = rng.gen_range(0.0..w);
        let mut y = rng.gen_range(0.0..h);
        let radius =
            rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) as f32 * min_dim / 2.0;
        let hop = 0.25 * min_dim;
        let mut prev = (x, y);
        for _ in 1..n_pts {
            x = (x + rng.gen_range(-hop..hop)).clamp(0.0, w - 1.0);
            y = (y + rng.gen_range(-hop..hop)).clamp(0.0, h - 1.0);
            rasterize_capsule(plane, prev, (x, y), radius);
            prev = (x, y);
        }
    } else if pick < mix.polyline + mix.ellipse {
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let a = rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) as f32 * min_dim;
        let b = rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) as f32 * min_dim;
        for y in 0..plane.height {
            for x in 0..plane.width {
                let ex = (x as f32 - cx) / a;
                let ey = (y as f32 - cy) / b;
                if ex * ex + ey * ey <= 1.0 {
                    plane.data[y * plane.width + x] = 1.0;
                }
            }
        }
    } else {
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let hw = rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) as f32 * min_dim;
        let hh = rng.gen_range(spec.stroke_width.0..=spec.stroke_width.1) as f32 * min_dim;
        for y in 0..plane.height {
            for x in 0..plane.width {
                if (x as f32 - cx).abs() <= hw && (y as f32 - cy).abs() <= hh {
                    plane.data[y * plane.width + x] = 1.0;
                }
            }
        }
    }
}

const MAX_ADDITIONS: usize = 200;
const MAX_ATTEMPTS: usize = 20;

fn mask_attempt(h: usize, w: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Option<Plane> {
    // Stopping the add-loop at the range floor would pile coverage mass just
    // above `lo`; aiming each attempt at a uniform point inside the range
    // keeps the accepted distribution spread over all of it.
    let target = rng.gen_range(spec.coverage.0..=spec.coverage.1);
    let mut plane = Plane::zeros(h, w);
    let n = rng.gen_range(spec.stroke_count.0..=spec.stroke_count.1);
    for _ in 0..n {
        draw_element(&mut plane, spec, rng);
    }
    let mut additions = 0;
    loop {
        let cov = mask_coverage(&plane);
        if cov > spec.coverage.1 {
            // Overshoot: resample entirely rather than eroding, which would
            // bias mask morphology.
            return None;
        }
        if cov >= target {
            return Some(plane);
        }
        if additions >= MAX_ADDITIONS {
            return None;
        }
        draw_element(&mut plane, spec, rng);
        additions += 1;
    }
}

/// Draw a random stroke-and-shape mask whose coverage lands inside the spec
/// range: undershoot adds more elements, overshoot resamples from scratch,
/// and 20 failed attempts indicate an infeasible spec.
pub fn generate_stroke_mask(
    height: usize,
    width: usize,
    spec: &MaskSpec,
    rng: &mut impl Rng,
) -> Result<StrokeMask> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Shape("mask dimensions must be positive".into()));
    }
    for _ in 0..MAX_ATTEMPTS {
        if let Some(plane) = mask_attempt(height, width, spec, rng) {
            return Ok(StrokeMask::from_plane(plane));
        }
    }
    Err(Error::MaskGeneration(format!(
        "no mask with coverage in [{}, {}] found on a {height}x{width} frame after {MAX_ATTEMPTS} attempts",
        spec.coverage.0, spec.coverage.1
    )))
}

// ---------------------------------------------------------------------------
// Pixel samples
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceKind {
    SimulatedInpaint,
    CutMix,
    WholeImage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    /// Generator source the synthetic pixels came from (empty when unknown).
    pub source_id: String,
}

/// One pixel-labeled training sample: mask value 1 marks generated pixels.
#[derive(Clone, Debug)]
pub struct PixelSample {
    pub image: ImageBuffer,
    pub mask: StrokeMask,
    pub provenance: Provenance,
}

impl PixelSample {
    pub fn new(image: ImageBuffer, mask: StrokeMask, provenance: Provenance) -> Result<Self> {
        if (image.height(), image.width()) != (mask.plane.height, mask.plane.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                mask.plane.height,
                mask.plane.width,
                image.height(),
                image.width()
            )));
        }
        Ok(PixelSample { image, mask, provenance })
    }
}

/// A whole real (mask all zero) or whole synthetic (mask all one) image as a
/// degenerate pixel sample.
pub fn whole_image_sample(image: ImageBuffer, synthetic: bool, source_id: &str) -> PixelSample {
    let mask = StrokeMask::constant(image.height(), image.width(), if synthetic { 1.0 } else { 0.0 });
    PixelSample {
        image,
        mask,
        provenance: Provenance { kind: ProvenanceKind::WholeImage, source_id: source_id.into() },
    }
}

/// Simulated inpainter output with explicit blur/noise settings: a blurred
/// copy of the original, perturbed by value noise, then stamped with the
/// generator fingerprint. Returned full-frame; compositing is separate.
pub fn simulate_inpaint_fill_with(
    original: &ImageBuffer,
    mask: &StrokeMask,
    fp: &FingerprintSpec,
    blur_sigma: f32,
    noise_amp: f32,
    rng: &mut impl Rng,
) -> Result<ImageBuffer> {
    if (original.height(), original.width()) != (mask.plane.height, mask.plane.width) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.plane.height,
            mask.plane.width,
            original.height(),
            original.width()
        )));
    }
    let mut fill = image::gaussian_blur(original, blur_sigma)?;
    if noise_amp > 0.0 {
        let side = original.height().max(original.width());
        let noises: Vec<Vec<f32>> =
            (0..original.channels()).map(|_| corpus::value_noise(side, 8, rng)).collect();
        let w = original.width();
        for y in 0..original.height() {
            for x in 0..w {
                for c in 0..original.channels() {
                    let n = noises[c][y * side + x];
                    let v = fill.get(y, x, c) + noise_amp * (2.0 * n - 1.0);
                    fill.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    corpus::apply_fingerprint(&fill, fp, rng)
}

pub const FILL_BLUR_SIGMA: f32 = 4.0;
pub const FILL_NOISE_AMP: f32 = 0.15;

/// [`simulate_inpaint_fill_with`] at the default blur and noise settings.
pub fn simulate_inpaint_fill(
    original: &ImageBuffer,
    mask: &StrokeMask,
    fp: &FingerprintSpec,
    rng: &mut impl Rng,
) -> Result<ImageBuffer> {
    simulate_inpaint_fill_with(original, mask, fp, FILL_BLUR_SIGMA, FILL_NOISE_AMP, rng)
}

/// Copy the original back over the unmasked region: out = mask * fill +
/// (1 - mask) * original as a hard binary blend, ground truth = mask.
pub fn composite_inpaint(
    original: &ImageBuffer,
    fill: &ImageBuffer,
    mask: &StrokeMask,
) -> Result<PixelSample> {
    if (original.height(), original.width(), original.channels())
        != (fill.height(), fill.width(), fill.channels())
    {
        return Err(Error::Shape(format!(
            "fill {}x{}x{} does not match original {}x{}x{}",
            fill.height(),
            fill.width(),
            fill.channels(),
            original.height(),
            original.width(),
            original.channels()
        )));
    }
    let composite = ImageBuffer::from_fn(
        original.height(),
        original.width(),
        original.channels(),
        |y, x, c| {
            if mask.plane.get(y, x) >= 0.5 {
                fill.get(y, x, c)
            } else {
                original.get(y, x, c)
            }
        },
    );
    PixelSample::new(
        composite,
        mask.clone(),
        Provenance { kind: ProvenanceKind::SimulatedInpaint, source_id: String::new() },
    )
}

// ---------------------------------------------------------------------------
// CutMix
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutMixSpec {
    /// Number of pasted blocks (lo, hi), at least one.
    pub blocks: (usize, usize),
    /// Block side as a fraction of the image side (lo, hi).
    pub side_frac: (f64, f64),
    /// Probability of swapping roles (synthetic canvas, real blocks).
    pub swap_prob: f64,
}

impl Default for CutMixSpec {
    fn default() -> Self {
        CutMixSpec { blocks: (1, 3), side_frac: (0.10, 0.40), swap_prob: 0.5 }
    }
}

impl CutMixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.0 < 1 || self.blocks.0 > self.blocks.1 {
            return Err(Error::Config(format!(
                "block count range {:?} must be ordered and at least 1",
                self.blocks
            )));
        }
        let (lo, hi) = self.side_frac;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "side fraction range ({lo}, {hi}) must sit strictly inside (0, 1)"
            )));
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return Err(Error::Config(format!("swap_prob {} outside [0, 1]", self.swap_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// The stochastic choices behind one CutMix sample, exposed so labels can be
/// verified against an independent rasterization.
#[derive(Clone, Debug)]
pub struct CutMixDraw {
    pub swapped: bool,
    pub blocks: Vec<Block>,
}

/// CutMix with an explicit spec, returning the draw record. Blocks are cut
/// from the synthetic image into the real one (ground truth = union of the
/// pasted rectangles); with `swap_prob` the roles flip and the label
/// inverts.
pub fn cutmix_sample_with(
    real: &ImageBuffer,
    fake: &ImageBuffer,
    spec: &CutMixSpec,
    rng: &mut impl Rng,
) -> Result<(PixelSample, CutMixDraw)> {
    spec.validate()?;
    if (real.height(), real.width(), real.channels())
        != (fake.height(), fake.width(), fake.channels())
    {
        return Err(Error::Shape(format!(
            "cutmix inputs differ: {}x{}x{} vs {}x{}x{}",
            real.height(),
            real.width(),
            real.channels(),
            fake.height(),
            fake.width(),
            fake.channels()
        )));
    }
    let (h, w) = (real.height(), real.width());
    let swapped = rng.gen_bool(spec.swap_prob);
    let (canvas, patch) = if swapped { (fake, real) } else { (real, fake) };
    let mut image = canvas.clone();
    let mut union = Plane::zeros(h, w);
    let n = rng.gen_range(spec.blocks.0..=spec.blocks.1);
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let bh = ((rng.gen_range(spec.side_frac.0..=spec.side_frac.1) * h as f64).round()
            as usize)
            .clamp(1, h);
        let bw = ((rng.gen_range(spec.side_frac.0..=spec.side_frac.1) * w as f64).round()
            as usize)
            .clamp(1, w);
        let y0 = rng.gen_range(0..=h - bh);
        let x0 = rng.gen_range(0..=w - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for c in 0..image.channels() {
                    image.set(y, x, c, patch.get(y, x, c));
                }
                union.data[y * w + x] = 1.0;
            }
        }
        blocks.push(Block { y0, x0, height: bh, width: bw });
    }
    let label = if swapped {
        Plane::new(h, w, union.data.iter().map(|&v| 1.0 - v).collect())
    } else {
        union
    };
    let sample = PixelSample::new(
        image,
        StrokeMask::from_plane(label),
        Provenance { kind: ProvenanceKind::CutMix, source_id: String::new() },
    )?;
    Ok((sample, CutMixDraw { swapped, blocks }))
}

/// CutMix at the default spec.
pub fn cutmix_sample(
    real: &ImageBuffer,
    fake: &ImageBuffer,
    rng: &mut impl Rng,
) -> Result<PixelSample> {
    cutmix_sample_with(real, fake, &CutMixSpec::default(), rng).map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// Dataset materialization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelDatasetConfig {
    pub mask: MaskSpec,
    pub cutmix: CutMixSpec,
    /// Samples per generated source, per provenance kind.
    pub counts: SplitCounts,
    pub blur_sigma: f32,
    pub noise_amp: f32,
}

impl Default for PixelDatasetConfig {
    fn default() -> Self {
        PixelDatasetConfig {
            mask: MaskSpec::default(),
            cutmix: CutMixSpec::default(),
            counts: SplitCounts { train: 200, val: 25, test: 50 },
            blur_sigma: FILL_BLUR_SIGMA,
            noise_amp: FILL_NOISE_AMP,
        }
    }
}

impl PixelDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.cutmix.validate()?;
        if self.counts.train == 0 {
            return Err(Error::Config("pixel dataset needs at least one training sample".into()));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::Config("blur_sigma must be positive".into()));
        }
        if self.noise_amp < 0.0 {
            return Err(Error::Config("noise_amp must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelSourceEntry {
    /// Directory name, `<kind>_<base_source>`.
    pub name: String,
    pub kind: ProvenanceKind,
    pub base_source: String,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelManifest {
    pub seed: u64,
    pub image_size: usize,
    pub sources: Vec<PixelSourceEntry>,
}

pub fn pixel_source_name(kind: ProvenanceKind, base_source: &str) -> String {
    let prefix = match kind {
        ProvenanceKind::SimulatedInpaint => "inpaint",
        ProvenanceKind::CutMix => "cutmix",
        ProvenanceKind::WholeImage => "whole",
    };
    format!("{prefix}_{base_source}")
}

fn mask_to_image(plane: &Plane) -> ImageBuffer {
    ImageBuffer::from_fn(plane.height, plane.width, 1, |y, x, _| plane.get(y, x))
}

fn image_to_mask(img: &ImageBuffer, path: &Path) -> Result<Plane> {
    if img.channels() != 1 {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            reason: format!("mask PNG must be single-channel, got {} channels", img.channels()),
        });
    }
    let mut data = Vec::with_capacity(img.height() * img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.get(y, x, 0);
            if v != 0.0 && v != 1.0 {
                return Err(Error::ImageFormat {
                    path: path.to_path_buf(),
                    reason: format!("mask pixel ({y}, {x}) = {v} is not binary"),
                });
            }
            data.push(v);
        }
    }
    Ok(Plane::new(img.height(), img.width(), data))
}

/// Synthesize one pixel sample from scratch (the unit of dataset
/// determinism). The base image, mask, fill, and CutMix partner all derive
/// from the manifest seed and the sample's structural label.
pub fn synth_pixel_sample(
    manifest: &Manifest,
    config: &PixelDatasetConfig,
    kind: ProvenanceKind,
    base_source: &str,
    fp: &FingerprintSpec,
    split: &str,
    index: usize,
) -> Result<PixelSample> {
    let label = match kind {
        ProvenanceKind::SimulatedInpaint => format!("pixel/inpaint/{base_source}/{split}/{index}"),
        ProvenanceKind::CutMix => format!("pixel/cutmix/{base_source}/{split}/{index}"),
        ProvenanceKind::WholeImage => {
            return Err(Error::Config("whole-image samples are assembled, not synthesized".into()))
        }
    };
    let mut rng = derive_rng(manifest.seed, &label);
    let size = manifest.image_size;
    match kind {
        ProvenanceKind::SimulatedInpaint => {
            let original = corpus::synth_real_image(&mut rng, size)?;
            let mask = generate_stroke_mask(size, size, &config.mask, &mut rng)?;
            let fill = simulate_inpaint_fill_with(
                &original,
                &mask,
                fp,
                config.blur_sigma,
                config.noise_amp,
                &mut rng,
            )?;
            let mut sample = composite_inpaint(&original, &fill, &mask)?;
            sample.provenance.source_id = base_source.to_string();
            Ok(sample)
        }
        ProvenanceKind::CutMix => {
            let real = corpus::synth_real_image(&mut rng, size)?;
            let fake = corpus::synth_generated_image(&mut rng, size, fp)?;
            let (mut sample, _) = cutmix_sample_with(&real, &fake, &config.cutmix, &mut rng)?;
            sample.provenance.source_id = base_source.to_string();
            Ok(sample)
        }
        ProvenanceKind::WholeImage => unreachable!("rejected above"),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PixelDatasetSummary {
    pub out_dir: PathBuf,
    pub sources: Vec<PixelSourceEntry>,
}

/// Materialize inpaint and CutMix pixel datasets for every fingerprinted
/// source in the manifest, under
/// `<out_dir>/<kind>_<source>/<split>/{images,masks}/NNNNNN.png` with
/// single-channel 0/255 mask PNGs and a `pixel_manifest.json` index.
/// `out_dir` must not already contain files; partial output is removed on
/// failure.
pub fn build_pixel_dataset(
    manifest: &Manifest,
    config: &PixelDatasetConfig,
    out_dir: &Path,
) -> Result<PixelDatasetSummary> {
    manifest.validate()?;
    config.validate()?;
    if out_dir.exists() {
        let occupied = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if occupied {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let result = (|| -> Result<Vec<PixelSourceEntry>> {
        let mut entries = Vec::new();
        for source in &manifest.sources {
            let Some(fp) = &source.fingerprint else { continue };
            for kind in [ProvenanceKind::SimulatedInpaint, ProvenanceKind::CutMix] {
                let name = pixel_source_name(kind, &source.id);
                for split in SPLITS {
                    let count = config.counts.get(split);
                    let images_dir = out_dir.join(&name).join(split).join("images");
                    let masks_dir = out_dir.join(&name).join(split).join("masks");
                    fs::create_dir_all(&images_dir)
                        .map_err(|e| Error::io(images_dir.as_path(), e))?;
                    fs::create_dir_all(&masks_dir)
                        .map_err(|e| Error::io(masks_dir.as_path(), e))?;
                    exec::try_batch_map(count, |i| {
                        let sample =
                            synth_pixel_sample(manifest, config, kind, &source.id, fp, split, i)?;
                        image::save_png(
                            &sample.image,
                            &images_dir.join(format!("{i:06}.png")),
                        )?;
                        image::save_png(
                            &mask_to_image(&sample.mask.plane),
                            &masks_dir.join(format!("{i:06}.png")),
                        )
                    })?;
                }
                entries.push(PixelSourceEntry {
                    name,
                    kind,
                    base_source: source.id.clone(),
                    counts: config.counts,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Config(
                "manifest has no fingerprinted sources to build pixel data from".into(),
            ));
        }
        let pixel_manifest = PixelManifest {
            seed: manifest.seed,
            image_size: manifest.image_size,
            sources: entries.clone(),
        };
        let json = serde_json::to_string_pretty(&pixel_manifest).expect("manifest serializes");
        let path = out_dir.join("pixel_manifest.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(path.as_path(), e))?;
        Ok(entries)
    })();

    match result {
        Ok(sources) => Ok(PixelDatasetSummary { out_dir: out_dir.to_path_buf(), sources }),
        Err(e) => {
            let _ = fs::remove_dir_all(out_dir);
            Err(e)
        }
    }
}

pub fn load_pixel_manifest(dataset_dir: &Path) -> Result<PixelManifest> {
    let path = dataset_dir.join("pixel_manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.as_path(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("unreadable pixel manifest: {e}")))
}

/// Load one split of a materialized pixel dataset.
pub fn load_pixel_split(
    dataset_dir: &Path,
    source_name: &str,
    split: &str,
) -> Result<Vec<PixelSample>> {
    let manifest = load_pixel_manifest(dataset_dir)?;
    let entry = manifest
        .sources
        .iter()
        .find(|s| s.name == source_name)
        .ok_or_else(|| {
            Error::MissingData(format!("pixel source {source_name:?} not in dataset manifest"))
        })?;
    let count = entry.counts.get(split);
    if count == 0 {
        return Err(Error::MissingData(format!(
            "pixel source {source_name:?} has no {split} samples"
        )));
    }
    let base = dataset_dir.join(source_name).join(split);
    exec::try_batch_map(count, |i| {
        let image = image::load_png(&base.join("images").join(format!("{i:06}.png")))?;
        let mask_path = base.join("masks").join(format!("{i:06}.png"));
        let mask_img = image::load_png(&mask_path)?;
        let plane = image_to_mask(&mask_img, &mask_path)?;
        PixelSample::new(
            image,
            StrokeMask::from_plane(plane),
            Provenance { kind: entry.kind, source_id: entry.base_source.clone() },
        )
    })
}

// ---------------------------------------------------------------------------
// Pixel training and evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub master_seed: u64,
}

impl Default for PixelTrainConfig {
    fn default() -> Self {
        PixelTrainConfig {
            epochs: 3,
            batch_size: 16,
            optimizer: AdamConfig::with_learning_rate(1e-3),
            master_seed: 29,
        }
    }
}

impl PixelTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_pixel_samples(samples: &[PixelSample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("pixel training needs at least one sample".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    if h != w {
        return Err(Error::Shape(format!("pixel samples must be square, got {h}x{w}")));
    }
    if h % 8 != 0 {
        return Err(Error::Shape(format!(
            "pixel sample side {h} must be divisible by 8 (encoder stride)"
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "sample {i} is {}x{}, expected {h}x{w}",
                s.image.height(),
                s.image.width()
            )));
        }
    }
    Ok((h, w))
}

/// Train the fully-convolutional pixel head on a mixed sample stream with
/// the weighted Dice loss. Returns the model and per-epoch mean loss.
pub fn train_pixel_detector(
    samples: &[PixelSample],
    config: &PixelTrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    config.validate()?;
    let (size, _) = check_pixel_samples(samples)?;
    let mut model = build_pixel_net(size, &mut derive_rng(config.master_seed, "pixel/init"))?;
    let mut optimizer = OptimizerState::new(config.optimizer, &model.params)?;
    let mut history = Vec::with_capacity(config.epochs as usize);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derive_rng(config.master_seed, &format!("pixel/epoch_{epoch}/shuffle")));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<ImageBuffer> =
                chunk.iter().map(|&i| samples[i].image.clone()).collect();
            let masks: Vec<Plane> =
                chunk.iter().map(|&i| samples[i].mask.plane.clone()).collect();
            let input = images_to_tensor(&images)?;
            let target = masks_to_tensor(&masks)?;
            let (pred, trace) = model.forward(&input)?;
            let (loss, grad) = weighted_dice_loss(&pred, &target)?;
            backward(&trace, &mut model.params, &grad)?;
            optimizer.step(&mut model.params)?;
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok((model, history))
}

/// Micro-pooled pixel metrics: one confusion matrix over every pixel of
/// every sample.
pub fn eval_pixel_detector(
    model: &DetectorModel,
    samples: &[PixelSample],
    threshold: f32,
) -> Result<PixelMetrics> {
    check_pixel_samples(samples)?;
    let preds = exec::try_batch_map(samples.len(), |i| predict_mask(model, &samples[i].image))?;
    let mut counts = ConfusionCounts::default();
    for (pred, sample) in preds.iter().zip(samples.iter()) {
        counts.add_plane(pred, &sample.mask.plane, threshold)?;
    }
    Ok(counts.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_manifest;
    use crate::spectrum::peak_over_local_median;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_spec_validation() {
        let mut s = MaskSpec::default();
        s.coverage = (0.4, 0.2);
        assert!(s.validate().is_err());
        let mut s = MaskSpec::default();
        s.coverage = (0.0, 0.3);
        assert!(s.validate().is_err());
        let mut s = MaskSpec::default();
        s.stroke_count = (0, 4);
        assert!(s.validate().is_err());
        let mut s = MaskSpec::default();
        s.shapes = ShapeMix { polyline: 0.0, ellipse: 0.0, rectangle: 0.0 };
        assert!(s.validate().is_err());
        assert!(MaskSpec::default().validate().is_ok());
    }

    #[test]
    fn thousand_masks_land_in_coverage_range() {
        let spec = MaskSpec::default();
        let mut r = rng(60);
        let mut sum = 0.0;
        for i in 0..1000 {
            let mask = generate_stroke_mask(64, 64, &spec, &mut r)
                .unwrap_or_else(|e| panic!("mask {i} failed: {e:?}"));
            assert!(
                mask.coverage >= 0.15 && mask.coverage <= 0.35,
                "mask {i} coverage {} escapes [0.15, 0.35]",
                mask.coverage
            );
            // Coverage is literally the plane mean, and the plane is binary.
            assert_eq!(mask.coverage, mask_coverage(&mask.plane));
            assert!(mask.plane.data.iter().all(|&v| v == 0.0 || v == 1.0));
            sum += mask.coverage;
        }
        let mean = sum / 1000.0;
        assert!(
            (0.20..0.30).contains(&mean),
            "empirical mean coverage {mean} outside (0.20, 0.30)"
        );
    }

    #[test]
    fn infeasible_spec_errors_after_bounded_attempts() {
        let mut spec = MaskSpec::default();
        spec.coverage = (0.999, 0.9999);
        match generate_stroke_mask(8, 8, &spec, &mut rng(61)) {
            Err(Error::MaskGeneration(msg)) => assert!(msg.contains("attempts")),
            other => panic!("expected MaskGeneration, got {other:?}"),
        }
    }

    #[test]
    fn mask_generation_is_deterministic() {
        let spec = MaskSpec::default();
        let a = generate_stroke_mask(64, 64, &spec, &mut rng(62)).unwrap();
        let b = generate_stroke_mask(64, 64, &spec, &mut rng(62)).unwrap();
        assert_eq!(a.plane.data, b.plane.data);
        assert_eq!(a.coverage, b.coverage);
    }

    fn test_image(seed: u64, size: usize) -> ImageBuffer {
        corpus::synth_real_image(&mut rng(seed), size).unwrap()
    }

    #[test]
    fn zero_noise_identity_fill_is_exactly_the_blur() {
        let img = test_image(63, 64);
        let mask = StrokeMask::constant(64, 64, 1.0);
        let fp = FingerprintSpec::identity("none");
        let fill =
            simulate_inpaint_fill_with(&img, &mask, &fp, 4.0, 0.0, &mut rng(64)).unwrap();
        let blur = image::gaussian_blur(&img, 4.0).unwrap();
        assert_eq!(fill.pixels(), blur.pixels());
    }

    #[test]
    fn fill_is_deterministic_per_seed() {
        let img = test_image(65, 64);
        let mask = StrokeMask::constant(64, 64, 1.0);
        let manifest = default_manifest();
        let fp = manifest.sources[0].fingerprint.as_ref().unwrap();
        let a = simulate_inpaint_fill(&img, &mask, fp, &mut rng(66)).unwrap();
        let b = simulate_inpaint_fill(&img, &mask, fp, &mut rng(66)).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn fill_spike_is_measurable_inside_the_masked_crop() {
        // Rectangular mask covering [16, 48) squared; the fingerprint's
        // spectral spike must stand out in an FFT of just that crop.
        let manifest = default_manifest();
        let source = &manifest.sources[0]; // carries a pure spectral spike
        let fp = source.fingerprint.as_ref().unwrap();
        let spike = fp.spectral_spike.unwrap();
        let mut plane = Plane::zeros(64, 64);
        for y in 16..48 {
            for x in 16..48 {
                plane.data[y * 64 + x] = 1.0;
            }
        }
        let mask = StrokeMask::from_plane(plane);
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let original = test_image(70 + seed, 64);
            let fill = simulate_inpaint_fill(&original, &mask, fp, &mut rng(80 + seed)).unwrap();
            let sample = composite_inpaint(&original, &fill, &mask).unwrap();
            let crop = ImageBuffer::from_fn(32, 32, 3, |y, x, c| {
                sample.image.get(16 + y, 16 + x, c)
            });
            // Crop is half the frame, so per-image frequencies halve too.
            let ratio =
                peak_over_local_median(&crop, spike.fx as f64 / 2.0, spike.fy as f64 / 2.0);
            ratios.push(ratio);
        }
        let hits = ratios.iter().filter(|&&r| r >= 5.0).count();
        assert!(hits >= 4, "spike visible in only {hits}/5 masked crops: {ratios:?}");
    }

    #[test]
    fn composite_blend_is_hard_and_exact() {
        let original = test_image(90, 64);
        let fill = test_image(91, 64);

        let zero = StrokeMask::constant(64, 64, 0.0);
        let sample = composite_inpaint(&original, &fill, &zero).unwrap();
        assert_eq!(sample.image.pixels(), original.pixels());
        assert_eq!(sample.mask.coverage, 0.0);

        let one = StrokeMask::constant(64, 64, 1.0);
        let sample = composite_inpaint(&original, &fill, &one).unwrap();
        assert_eq!(sample.image.pixels(), fill.pixels());

        let mask = generate_stroke_mask(64, 64, &MaskSpec::default(), &mut rng(92)).unwrap();
        let sample = composite_inpaint(&original, &fill, &mask).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if mask.plane.get(y, x) == 1.0 { &fill } else { &original };
                for c in 0..3 {
                    assert_eq!(sample.image.get(y, x, c).to_bits(), expect.get(y, x, c).to_bits());
                }
            }
        }

        let small = test_image(93, 32);
        assert!(matches!(
            composite_inpaint(&original, &small, &mask),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cutmix_blocks_are_verbatim_and_label_matches_union() {
        let real = test_image(94, 64);
        let fake = test_image(95, 64);
        let spec = CutMixSpec::default();
        let mut seen_swapped = false;
        let mut seen_unswapped = false;
        for seed in 0..20 {
            let (sample, draw) =
                cutmix_sample_with(&real, &fake, &spec, &mut rng(100 + seed)).unwrap();
            seen_swapped |= draw.swapped;
            seen_unswapped |= !draw.swapped;
            // Independent rasterization of the recorded blocks.
            let mut union = vec![0.0f32; 64 * 64];
            for b in &draw.blocks {
                assert!(b.height >= 6 && b.height <= 26, "block height {}", b.height);
                assert!(b.width >= 6 && b.width <= 26, "block width {}", b.width);
                for y in b.y0..b.y0 + b.height {
                    for x in b.x0..b.x0 + b.width {
                        union[y * 64 + x] = 1.0;
                    }
                }
            }
            let (canvas, patch) = if draw.swapped { (&fake, &real) } else { (&real, &fake) };
            for y in 0..64 {
                for x in 0..64 {
                    let in_union = union[y * 64 + x] == 1.0;
                    let expected_label = if draw.swapped { !in_union } else { in_union };
                    assert_eq!(sample.mask.plane.get(y, x) == 1.0, expected_label);
                    let src = if in_union { patch } else { canvas };
                    for c in 0..3 {
                        assert_eq!(
                            sample.image.get(y, x, c).to_bits(),
                            src.get(y, x, c).to_bits()
                        );
                    }
                }
            }
        }
        assert!(seen_swapped && seen_unswapped, "both role assignments should occur in 20 draws");
    }

    #[test]
    fn degenerate_cutmix_spec_is_rejected() {
        let real = test_image(96, 32);
        let fake = test_image(97, 32);
        let mut spec = CutMixSpec::default();
        spec.blocks = (0, 0);
        assert!(matches!(
            cutmix_sample_with(&real, &fake, &spec, &mut rng(98)),
            Err(Error::Config(_))
        ));
        let small = test_image(99, 64);
        assert!(matches!(cutmix_sample(&real, &small, &mut rng(99)), Err(Error::Shape(_))));
    }

    /// Toy pixel samples: dark canvas, bright "generated" region.
    fn toy_pixel_samples(n: usize, size: usize) -> Vec<PixelSample> {
        (0..n)
            .map(|i| {
                let mut r = rng(200 + i as u64);
                let y0 = r.gen_range(0..size / 2);
                let x0 = r.gen_range(0..size / 2);
                let mut plane = Plane::zeros(size, size);
                for y in y0..y0 + size / 2 {
                    for x in x0..x0 + size / 2 {
                        plane.data[y * size + x] = 1.0;
                    }
                }
                let image = ImageBuffer::from_fn(size, size, 3, |y, x, _| {
                    let base = if plane.get(y, x) == 1.0 { 0.8 } else { 0.2 };
                    base + r.gen_range(-0.05..0.05)
                });
                PixelSample::new(
                    image,
                    StrokeMask::from_plane(plane),
                    Provenance { kind: ProvenanceKind::CutMix, source_id: "toy".into() },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn pixel_training_reduces_dice_loss_deterministically() {
        let samples = toy_pixel_samples(8, 32);
        let config = PixelTrainConfig {
            epochs: 4,
            batch_size: 4,
            optimizer: AdamConfig::with_learning_rate(3e-3),
            master_seed: 31,
        };
        let (model, history) = train_pixel_detector(&samples, &config).unwrap();
        assert_eq!(history.len(), 4);
        assert!(
            history[0] > *history.last().unwrap(),
            "dice loss did not decrease: {history:?}"
        );
        let (model2, history2) = train_pixel_detector(&samples, &config).unwrap();
        assert_eq!(history, history2);
        let bits = |m: &DetectorModel| -> Vec<u32> {
            m.params.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&model), bits(&model2));
    }

    #[test]
    fn pixel_training_rejects_bad_shapes() {
        assert!(train_pixel_detector(&[], &PixelTrainConfig::default()).is_err());
        let samples = toy_pixel_samples(2, 36); // 36 not divisible by 8
        assert!(matches!(
            train_pixel_detector(&samples, &PixelTrainConfig::default()),
            Err(Error::Shape(_))
        ));
        let mut mixed = toy_pixel_samples(2, 32);
        mixed.extend(toy_pixel_samples(1, 64));
        assert!(matches!(
            train_pixel_detector(&mixed, &PixelTrainConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fresh_model_eval_matches_coverage_oracle() {
        // A fresh pixel net predicts exactly 0.5 everywhere; at threshold 0.5
        // nothing is flagged, so accuracy is the zero-pixel fraction and
        // precision/recall are zero.
        let samples = toy_pixel_samples(4, 32);
        let model = build_pixel_net(32, &mut rng(33)).unwrap();
        let metrics = eval_pixel_detector(&model, &samples, 0.5).unwrap();
        let zero_fraction = 1.0
            - samples.iter().map(|s| s.mask.coverage).sum::<f64>() / samples.len() as f64;
        assert!((metrics.accuracy - zero_fraction).abs() < 1e-9);
        assert_eq!(metrics.precision, 0.0);
        assert_eq!(metrics.recall, 0.0);
        assert_eq!(metrics.f1, 0.0);
    }

    #[test]
    fn dataset_round_trips_and_reproduces() {
        let mut manifest = default_manifest();
        manifest.sources.truncate(1);
        let config = PixelDatasetConfig {
            counts: SplitCounts { train: 2, val: 1, test: 1 },
            ..PixelDatasetConfig::default()
        };
        let dir = tempdir().unwrap();
        let out = dir.path().join("pixel");
        let summary = build_pixel_dataset(&manifest, &config, &out).unwrap();
        assert_eq!(summary.sources.len(), 2);

        let sid = &manifest.sources[0].id;
        let inpaint_name = pixel_source_name(ProvenanceKind::SimulatedInpaint, sid);
        let cutmix_name = pixel_source_name(ProvenanceKind::CutMix, sid);
        for name in [&inpaint_name, &cutmix_name] {
            for split in SPLITS {
                assert!(out.join(name).join(split).join("images").join("000000.png").is_file());
                assert!(out.join(name).join(split).join("masks").join("000000.png").is_file());
            }
        }

        let samples = load_pixel_split(&out, &inpaint_name, "train").unwrap();
        assert_eq!(samples.len(), 2);
        for s in &samples {
            assert_eq!(s.provenance.kind, ProvenanceKind::SimulatedInpaint);
            assert_eq!(&s.provenance.source_id, sid);
            assert!(s.mask.plane.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.mask.coverage >= 0.15 && s.mask.coverage <= 0.35);
        }
        // Masks survive the PNG round trip bit-exactly.
        let direct = synth_pixel_sample(
            &manifest,
            &config,
            ProvenanceKind::SimulatedInpaint,
            sid,
            manifest.sources[0].fingerprint.as_ref().unwrap(),
            "train",
            0,
        )
        .unwrap();
        assert_eq!(samples[0].mask.plane.data, direct.mask.plane.data);

        // Rebuild into a second directory: byte-identical files.
        let out2 = dir.path().join("pixel2");
        build_pixel_dataset(&manifest, &config, &out2).unwrap();
        let rel = [&inpaint_name, "train", "images", "000001.png"]
            .iter()
            .collect::<PathBuf>();
        assert_eq!(fs::read(out.join(&rel)).unwrap(), fs::read(out2.join(&rel)).unwrap());

        // Occupied output directory is refused.
        assert!(matches!(
            build_pixel_dataset(&manifest, &config, &out),
            Err(Error::Config(_))
        ));

        // Unknown source and empty split are diagnosed.
        assert!(matches!(
            load_pixel_split(&out, "nope", "train"),
            Err(Error::MissingData(_))
        ));
    }
}
