//! Procedural corpus: "real" images and fingerprinted "generated" sources on
//! a release-date timeline.
//!
//! Real images are octave value-noise mapped through a random two-color
//! palette with a few soft elliptical shapes on top. Generated sources start
//! from the same distribution and then stamp a parametric fingerprint, in a
//! fixed order: channel mix → DCT quantization → resampling artifact →
//! spectral spike. Sources come in families (same transform set, perturbed
//! parameters), so "related generators look related" is a measurable corpus
//! property, not an accident.
//!
//! The bundled default manifest has one real source plus six generated
//! sources — three families, two versions each, ~20% parameter drift between
//! versions — at 64x64 with 400/50/100 train/val/test splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dct::{block_dct8, block_idct8, Plane};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::{self, ImageBuffer};
use crate::rng::derive_rng;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleArtifact {
    /// Down/up factor (image size must be divisible by it).
    pub factor: usize,
    /// Blend weight of the resampled image, 0 = off, 1 = fully resampled.
    pub blend: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSpike {
    /// Horizontal frequency in cycles per image.
    pub fx: f32,
    /// Vertical frequency in cycles per image.
    pub fy: f32,
    pub amplitude: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DctQuantization {
    /// Scale on the frequency-ramp quantization table.
    pub table_scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSpec {
    /// Family id shared by related sources.
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_mix: Option<[[f32; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dct_quantization: Option<DctQuantization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsample_artifact: Option<UpsampleArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_spike: Option<SpectralSpike>,
}

impl FingerprintSpec {
    /// Identity fingerprint (no transforms) for a family.
    pub fn identity(family: &str) -> Self {
        FingerprintSpec {
            family: family.into(),
            channel_mix: None,
            dct_quantization: None,
            upsample_artifact: None,
            spectral_spike: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.is_empty() {
            return Err(Error::Config("fingerprint family must be non-empty".into()));
        }
        if let Some(mix) = &self.channel_mix {
            for (i, row) in mix.iter().enumerate() {
                let sum: f32 = row.iter().sum();
                if (sum - 1.0).abs() > 0.2 {
                    return Err(Error::Config(format!(
                        "channel_mix row {i} sums to {sum}, outside 1±0.2"
                    )));
                }
            }
        }
        if let Some(q) = &self.dct_quantization {
            if !(q.table_scale > 0.0 && q.table_scale <= 8.0) {
                return Err(Error::Config(format!(
                    "dct_quantization table_scale {} outside (0, 8]",
                    q.table_scale
                )));
            }
        }
        if let Some(u) = &self.upsample_artifact {
            if !(2..=8).contains(&u.factor) {
                return Err(Error::Config(format!(
                    "upsample_artifact factor {} outside 2..=8",
                    u.factor
                )));
            }
            if !(0.0..=1.0).contains(&u.blend) {
                return Err(Error::Config(format!(
                    "upsample_artifact blend {} outside [0, 1]",
                    u.blend
                )));
            }
        }
        if let Some(s) = &self.spectral_spike {
            if !(s.amplitude >= 0.0 && s.amplitude <= 0.1) {
                return Err(Error::Config(format!(
                    "spectral_spike amplitude {} outside [0, 0.1]",
                    s.amplitude
                )));
            }
            if !(s.fx.is_finite() && s.fy.is_finite()) {
                return Err(Error::NonFinite("spectral_spike frequency".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifest / timeline
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReleaseDate {
    pub year: u16,
    pub month: u8,
}

impl TryFrom<String> for ReleaseDate {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        let (y, m) = s.split_once('-').ok_or_else(|| format!("bad release date {s:?}"))?;
        let year: u16 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u8 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month {month} out of range in {s:?}"));
        }
        Ok(ReleaseDate { year, month })
    }
}

impl From<ReleaseDate> for String {
    fn from(d: ReleaseDate) -> String {
        format!("{:04}-{:02}", d.year, d.month)
    }
}

impl std::fmt::Display for ReleaseDate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Real,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSource {
    pub id: String,
    pub name: String,
    pub release_date: ReleaseDate,
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<FingerprintSpec>,
    /// Directory backing for pre-rendered sources (layout `<dir>/<split>/NNNNNN.png`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub counts: SplitCounts,
    /// Position on the release timeline (1-based); assigned by
    /// [`build_timeline`] and recorded in resolved manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<u32>,
}

impl GeneratorSource {
    fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self.id.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "source id {:?} must be non-empty [a-z0-9_-]",
                self.id
            )));
        }
        match self.kind {
            SourceKind::Generated => {
                match (&self.fingerprint, &self.dir) {
                    (Some(fp), None) => fp.validate()?,
                    (None, Some(_)) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "source {:?} must have exactly one of fingerprint/dir",
                            self.id
                        )))
                    }
                }
            }
            SourceKind::Real => {
                if self.fingerprint.is_some() {
                    return Err(Error::Config(format!(
                        "real source {:?} cannot carry a fingerprint",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub real: GeneratorSource,
    pub sources: Vec<GeneratorSource>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} below minimum 32", self.image_size)));
        }
        if self.real.kind != SourceKind::Real {
            return Err(Error::Config("manifest `real` entry must have kind real".into()));
        }
        self.real.validate()?;
        let mut ids = BTreeSet::new();
        ids.insert(self.real.id.clone());
        for src in &self.sources {
            if src.kind != SourceKind::Generated {
                return Err(Error::Config(format!(
                    "source {:?} in `sources` must have kind generated",
                    src.id
                )));
            }
            src.validate()?;
            if let Some(fp) = &src.fingerprint {
                if let Some(u) = &fp.upsample_artifact {
                    if self.image_size % u.factor != 0 {
                        return Err(Error::Config(format!(
                            "source {:?}: image_size {} not divisible by upsample factor {}",
                            src.id, self.image_size, u.factor
                        )));
                    }
                }
            }
            if !ids.insert(src.id.clone()) {
                return Err(Error::Config(format!("duplicate source id {:?}", src.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Manifest> {
        let manifest: Manifest = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("manifest parse error: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_json(&text)
    }
}

/// The bundled desk-scale manifest: 3 fingerprint families x 2 versions.
pub fn default_manifest() -> Manifest {
    Manifest::from_json(include_str!("default_manifest.json"))
        .expect("bundled manifest is valid")
}

/// Release-date-ordered view of a manifest.
#[derive(Clone, Debug)]
pub struct Timeline {
    pub real: GeneratorSource,
    /// Generated sources sorted by release date, `order` set to 1..N.
    pub generated: Vec<GeneratorSource>,
}

impl Timeline {
    pub fn stage_count(&self) -> usize {
        self.generated.len()
    }

    pub fn source_by_id(&self, id: &str) -> Option<&GeneratorSource> {
        self.generated.iter().find(|s| s.id == id)
    }
}

/// Sort sources chronologically and assign 1-based order indices. Ties keep
/// manifest position (documented tie-break) and log a warning.
pub fn build_timeline(manifest: &Manifest) -> Result<Timeline> {
    manifest.validate()?;
    if manifest.sources.is_empty() {
        return Err(Error::Config("manifest has no generated sources".into()));
    }
    let mut generated = manifest.sources.clone();
    // Stable sort preserves manifest order on equal dates.
    generated.sort_by_key(|s| s.release_date);
    for window in generated.windows(2) {
        if window[0].release_date == window[1].release_date {
            log::warn!(
                "sources {} and {} share release date {}; keeping manifest order",
                window[0].id,
                window[1].id,
                window[0].release_date
            );
        }
    }
    for (i, src) in generated.iter_mut().enumerate() {
        src.order = Some(i as u32 + 1);
    }
    let mut real = manifest.real.clone();
    real.order = Some(0);
    Ok(Timeline { real, generated })
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Smoothstep-interpolated value noise in [0,1].
pub(crate) fn value_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let y0 = (fy as usize).min(cells - 1);
        let ty = smoothstep(fy - y0 as f32);
        for x in 0..size {
            let fx = x as f32 * scale;
            let x0 = (fx as usize).min(cells - 1);
            let tx = smoothstep(fx - x0 as f32);
            let l = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural "real" image: 4-octave value noise (persistence 0.5) through a
/// random two-color palette, plus 1-4 soft elliptical shapes.
pub fn synth_real_image(rng: &mut impl Rng, size: usize) -> Result<ImageBuffer> {
    if size < 32 {
        return Err(Error::Config(format!("image size {size} below minimum 32")));
    }
    // Octave noise, base 4 cells, doubling per octave, amplitudes 1, .5, .25, .125.
    let mut field = vec![0.0f32; size * size];
    let mut amp = 1.0f32;
    let mut total_amp = 0.0f32;
    for octave in 0..4 {
        let cells = 4usize << octave;
        let layer = value_noise(size, cells, rng);
        for (f, l) in field.iter_mut().zip(layer.iter()) {
            *f += amp * l;
        }
        total_amp += amp;
        amp *= 0.5;
    }
    for f in &mut field {
        *f /= total_amp;
    }

    // Palette: per-channel ramp between a dark and a bright endpoint, with
    // random polarity per channel.
    let mut lo = [0.0f32; 3];
    let mut hi = [0.0f32; 3];
    for c in 0..3 {
        lo[c] = rng.gen_range(0.05..0.45);
        hi[c] = rng.gen_range(0.55..0.95);
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut lo[c], &mut hi[c]);
        }
    }
    let mut img = ImageBuffer::from_fn(size, size, 3, |y, x, c| {
        let t = field[y * size + x];
        lo[c] + t * (hi[c] - lo[c])
    });

    // Soft shapes: gaussian-profile ellipses alpha-blended on top.
    let n_shapes = rng.gen_range(1..=4);
    for _ in 0..n_shapes {
        let cy = rng.gen_range(0.0..size as f32);
        let cx = rng.gen_range(0.0..size as f32);
        let ry = rng.gen_range(0.08..0.3) * size as f32;
        let rx = rng.gen_range(0.08..0.3) * size as f32;
        let color = [rng.gen_range(0.0f32..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha = rng.gen_range(0.2f32..0.6);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                let w = alpha * (-0.5 * (dy * dy + dx * dx)).exp();
                if w > 1e-3 {
                    for c in 0..3 {
                        let v = img.get(y, x, c);
                        img.set(y, x, c, (v + w * (color[c] - v)).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }

    // Sensor-style grain, per-image level. Capture noise is what generator
    // post-processing (quantization, resampling) visibly disturbs, so real
    // content must carry fine detail or those artifacts have nothing to act on.
    let grain = rng.gen_range(0.012f32..0.03);
    for v in img.pixels_mut() {
        *v = (*v + rng.gen_range(-grain..=grain)).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Apply a fingerprint's transforms in the fixed order channel mix → DCT
/// quantization → resampling artifact → spectral spike, clipping after each.
pub fn apply_fingerprint(
    img: &ImageBuffer,
    fp: &FingerprintSpec,
    rng: &mut impl Rng,
) -> Result<ImageBuffer> {
    fp.validate()?;
    let mut out = img.clone();

    if let Some(mix) = &fp.channel_mix {
        if out.channels() == 3 {
            let size = out.height() * out.width();
            let px = out.pixels_mut();
            for i in 0..size {
                let p = [px[i * 3], px[i * 3 + 1], px[i * 3 + 2]];
                for c in 0..3 {
                    px[i * 3 + c] = (mix[c][0] * p[0] + mix[c][1] * p[1] + mix[c][2] * p[2])
                        .clamp(0.0, 1.0);
                }
            }
        }
    }

    if let Some(q) = &fp.dct_quantization {
        out = dct_quantize(&out, q.table_scale);
    }

    if let Some(u) = &fp.upsample_artifact {
        if out.height() % u.factor != 0 || out.width() % u.factor != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by resample factor {}",
                out.height(),
                out.width(),
                u.factor
            )));
        }
        let down = box_downsample(&out, u.factor);
        let up = image::resize_short_side(&down, out.height().min(out.width()))?;
        let a = u.blend;
        for (o, &r) in out.pixels_mut().iter_mut().zip(up.pixels().iter()) {
            *o = ((1.0 - a) * *o + a * r).clamp(0.0, 1.0);
        }
    }

    if let Some(s) = &fp.spectral_spike {
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let (h, w) = (out.height(), out.width());
        let channels = out.channels();
        let px = out.pixels_mut();
        for y in 0..h {
            for x in 0..w {
                let arg = std::f32::consts::TAU
                    * (s.fx * x as f32 / w as f32 + s.fy * y as f32 / h as f32)
                    + phase;
                let add = s.amplitude * arg.sin();
                for c in 0..channels {
                    let v = &mut px[(y * w + x) * channels + c];
                    *v = (*v + add).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// JPEG-style coefficient quantization: per channel, 8x8 block DCT with a
/// frequency-ramp table `(1 + u + v) * scale / 255`.
fn dct_quantize(img: &ImageBuffer, scale: f32) -> ImageBuffer {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for ch in 0..c {
        let plane = Plane::new(
            h,
            w,
            (0..h * w).map(|i| img.pixels()[i * c + ch]).collect(),
        );
        let mut coeffs = block_dct8(&plane);
        let pw = coeffs.width;
        for (i, v) in coeffs.data.iter_mut().enumerate() {
            let (u, vfreq) = ((i / pw) % 8, (i % pw) % 8);
            let q = scale * (1.0 + u as f32 + vfreq as f32) / 255.0;
            *v = (*v / q).round() * q;
        }
        let back = block_idct8(&coeffs, h, w);
        for i in 0..h * w {
            out.pixels_mut()[i * c + ch] = back.data[i].clamp(0.0, 1.0);
        }
    }
    out
}

fn box_downsample(img: &ImageBuffer, factor: usize) -> ImageBuffer {
    let (h, w, c) = (img.height() / factor, img.width() / factor, img.channels());
    let norm = (factor * factor) as f32;
    ImageBuffer::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img.get(y * factor + dy, x * factor + dx, ch);
            }
        }
        acc / norm
    })
}

/// Synthesize one generated image: a base "real" image with the source
/// fingerprint stamped on top.
pub fn synth_generated_image(
    rng: &mut impl Rng,
    size: usize,
    fp: &FingerprintSpec,
) -> Result<ImageBuffer> {
    let base = synth_real_image(rng, size)?;
    apply_fingerprint(&base, fp, rng)
}

// ---------------------------------------------------------------------------
// Materialization and loading
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SourceSummary {
    pub id: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub generated_files: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusSummary {
    pub out_dir: PathBuf,
    pub sources: Vec<SourceSummary>,
}

/// Render every procedural source to `out_dir/<id>/<split>/NNNNNN.png`,
/// validate directory-backed sources, and write the resolved manifest
/// (timeline order indices included) to `out_dir/manifest.json`.
///
/// `out_dir` must not already contain files; partial output is removed when
/// any step fails.
pub fn materialize_corpus(manifest: &Manifest, out_dir: &Path) -> Result<CorpusSummary> {
    let timeline = build_timeline(manifest)?;
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

    let result = (|| -> Result<Vec<SourceSummary>> {
        let mut summaries = Vec::new();
        let mut all: Vec<&GeneratorSource> = vec![&timeline.real];
        all.extend(timeline.generated.iter());
        for source in all {
            summaries.push(materialize_source(manifest, source, out_dir)?);
        }
        // Resolved manifest: original records with timeline order indices.
        let mut resolved = manifest.clone();
        resolved.real = timeline.real.clone();
        resolved.sources = timeline.generated.clone();
        let json = serde_json::to_string_pretty(&resolved).expect("manifest serializes");
        let path = out_dir.join("manifest.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(path.as_path(), e))?;
        Ok(summaries)
    })();

    match result {
        Ok(sources) => Ok(CorpusSummary { out_dir: out_dir.to_path_buf(), sources }),
        Err(e) => {
            let _ = fs::remove_dir_all(out_dir);
            Err(e)
        }
    }
}

fn materialize_source(
    manifest: &Manifest,
    source: &GeneratorSource,
    out_dir: &Path,
) -> Result<SourceSummary> {
    if let Some(dir) = &source.dir {
        // Pre-rendered: validate the expected files exist, generate nothing.
        for split in SPLITS {
            let count = source.counts.get(split);
            for i in 0..count {
                let path = dir.join(split).join(format!("{i:06}.png"));
                if !path.is_file() {
                    return Err(Error::MissingData(format!(
                        "source {:?}: expected file {} is missing",
                        source.id,
                        path.display()
                    )));
                }
            }
        }
        return Ok(SourceSummary {
            id: source.id.clone(),
            train: source.counts.train,
            val: source.counts.val,
            test: source.counts.test,
            generated_files: false,
        });
    }

    for split in SPLITS {
        let count = source.counts.get(split);
        let split_dir = out_dir.join(&source.id).join(split);
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(split_dir.as_path(), e))?;
        exec::try_batch_map(count, |i| {
            let img = synth_sample(manifest, source, split, i)?;
            image::save_png(&img, &split_dir.join(format!("{i:06}.png")))
        })?;
    }
    Ok(SourceSummary {
        id: source.id.clone(),
        train: source.counts.train,
        val: source.counts.val,
        test: source.counts.test,
        generated_files: true,
    })
}

/// Regenerate one procedural sample (the unit of corpus determinism).
pub fn synth_sample(
    manifest: &Manifest,
    source: &GeneratorSource,
    split: &str,
    index: usize,
) -> Result<ImageBuffer> {
    let mut rng = derive_rng(manifest.seed, &format!("corpus/{}/{split}/{index}", source.id));
    match (&source.kind, &source.fingerprint) {
        (SourceKind::Real, _) => synth_real_image(&mut rng, manifest.image_size),
        (SourceKind::Generated, Some(fp)) => {
            synth_generated_image(&mut rng, manifest.image_size, fp)
        }
        (SourceKind::Generated, None) => Err(Error::Config(format!(
            "source {:?} has no fingerprint to synthesize from",
            source.id
        ))),
    }
}

/// Load one split of a materialized corpus source into memory.
pub fn load_split(
    corpus_dir: &Path,
    source: &GeneratorSource,
    split: &str,
) -> Result<Vec<ImageBuffer>> {
    let count = source.counts.get(split);
    if count == 0 {
        return Err(Error::MissingData(format!(
            "source {:?} has no {split} images",
            source.id
        )));
    }
    let base = match &source.dir {
        Some(dir) => dir.join(split),
        None => corpus_dir.join(&source.id).join(split),
    };
    exec::try_batch_map(count, |i| {
        let path = base.join(format!("{i:06}.png"));
        if !path.is_file() {
            return Err(Error::MissingData(format!(
                "source {:?}: {} not found (split {split})",
                source.id,
                path.display()
            )));
        }
        image::load_png(&path)
    })
}

// ---------------------------------------------------------------------------
// Linear probe: corpus learnability without any CNN
// ---------------------------------------------------------------------------

pub mod probe {
    //! Two pixel statistics and a Fisher linear discriminant: enough to
    //! verify each fingerprint is detectable before any training runs.

    use super::*;
    use crate::spectrum;

    /// Feature vector: log variance-of-Laplacian, log spectral peak ratio.
    pub fn features(img: &ImageBuffer) -> [f64; 2] {
        [
            (spectrum::variance_of_laplacian(img) + 1e-12).ln(),
            (spectrum::spectral_peak_ratio(img) + 1e-12).ln(),
        ]
    }

    /// Fisher LDA direction for positives vs negatives (2D closed form with
    /// a small ridge).
    pub fn fisher_direction(pos: &[[f64; 2]], neg: &[[f64; 2]]) -> [f64; 2] {
        let mean = |v: &[[f64; 2]]| {
            let n = v.len() as f64;
            [v.iter().map(|x| x[0]).sum::<f64>() / n, v.iter().map(|x| x[1]).sum::<f64>() / n]
        };
        let mp = mean(pos);
        let mn = mean(neg);
        // Pooled covariance.
        let mut cov = [[0.0f64; 2]; 2];
        for (set, m) in [(pos, mp), (neg, mn)] {
            for x in set {
                let d = [x[0] - m[0], x[1] - m[1]];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
        }
        let n = (pos.len() + neg.len()) as f64;
        let ridge = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] /= n;
            }
            cov[i][i] += ridge;
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [
            [cov[1][1] / det, -cov[0][1] / det],
            [-cov[1][0] / det, cov[0][0] / det],
        ];
        let diff = [mp[0] - mn[0], mp[1] - mn[1]];
        [
            inv[0][0] * diff[0] + inv[0][1] * diff[1],
            inv[1][0] * diff[0] + inv[1][1] * diff[1],
        ]
    }

    pub fn project(w: &[f64; 2], x: &[f64; 2]) -> f64 {
        w[0] * x[0] + w[1] * x[1]
    }

    /// Train the probe on one split and score another; returns
    /// (real scores, fake scores) ready for an AuC computation.
    pub fn probe_scores(
        train_real: &[ImageBuffer],
        train_fake: &[ImageBuffer],
        test_real: &[ImageBuffer],
        test_fake: &[ImageBuffer],
    ) -> (Vec<f64>, Vec<f64>) {
        let feats = |imgs: &[ImageBuffer]| -> Vec<[f64; 2]> {
            exec::batch_map(imgs.len(), |i| features(&imgs[i]))
        };
        let w = fisher_direction(&feats(train_fake), &feats(train_real));
        let score = |imgs: &[ImageBuffer]| -> Vec<f64> {
            feats(imgs).iter().map(|f| project(&w, f)).collect()
        };
        (score(test_real), score(test_fake))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn default_manifest_is_valid_and_sized_as_documented() {
        let m = default_manifest();
        assert_eq!(m.image_size, 64);
        assert_eq!(m.sources.len(), 6);
        let families: BTreeSet<&str> = m
            .sources
            .iter()
            .map(|s| s.fingerprint.as_ref().unwrap().family.as_str())
            .collect();
        assert_eq!(families.len(), 3, "three families");
        for src in &m.sources {
            assert_eq!(src.counts.train, 400);
            assert_eq!(src.counts.val, 50);
            assert_eq!(src.counts.test, 100);
        }
    }

    #[test]
    fn timeline_orders_by_release_date() {
        let m = default_manifest();
        let t = build_timeline(&m).unwrap();
        let dates: Vec<ReleaseDate> = t.generated.iter().map(|s| s.release_date).collect();
        for w in dates.windows(2) {
            assert!(w[0] <= w[1]);
        }
        let orders: Vec<u32> = t.generated.iter().map(|s| s.order.unwrap()).collect();
        assert_eq!(orders, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn timeline_example_ordering_jun20_may21_dec21() {
        let mut m = default_manifest();
        m.sources.truncate(3);
        m.sources[0].release_date = ReleaseDate { year: 2021, month: 5 };
        m.sources[0].id = "b".into();
        m.sources[1].release_date = ReleaseDate { year: 2020, month: 6 };
        m.sources[1].id = "a".into();
        m.sources[2].release_date = ReleaseDate { year: 2021, month: 12 };
        m.sources[2].id = "c".into();
        let t = build_timeline(&m).unwrap();
        let ids: Vec<&str> = t.generated.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut m = default_manifest();
        let dup = m.sources[0].clone();
        m.sources.push(dup);
        assert!(build_timeline(&m).is_err());
    }

    #[test]
    fn tied_dates_keep_manifest_order() {
        let mut m = default_manifest();
        m.sources.truncate(2);
        m.sources[0].release_date = ReleaseDate { year: 2021, month: 1 };
        m.sources[1].release_date = ReleaseDate { year: 2021, month: 1 };
        let first = m.sources[0].id.clone();
        let t = build_timeline(&m).unwrap();
        assert_eq!(t.generated[0].id, first);
    }

    #[test]
    fn real_image_statistics_are_sane() {
        let mut in_range = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = synth_real_image(&mut rng, 64).unwrap();
            let m = img.mean();
            if m > 0.2 && m < 0.8 {
                in_range += 1;
            }
        }
        assert!(in_range >= 198, "only {in_range}/200 means in (0.2, 0.8)");
    }

    #[test]
    fn distinct_seeds_produce_distinct_images() {
        let a = synth_real_image(&mut ChaCha8Rng::seed_from_u64(1), 64).unwrap();
        let b = synth_real_image(&mut ChaCha8Rng::seed_from_u64(2), 64).unwrap();
        let differing = a
            .pixels()
            .iter()
            .zip(b.pixels().iter())
            .filter(|(x, y)| (**x - **y).abs() > 1.0 / 255.0)
            .count();
        assert!(differing * 2 >= a.pixels().len(), "{differing} differing");
    }

    #[test]
    fn identity_fingerprint_is_a_noop() {
        let base = synth_real_image(&mut ChaCha8Rng::seed_from_u64(3), 64).unwrap();
        let fp = FingerprintSpec::identity("none");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = apply_fingerprint(&base, &fp, &mut rng).unwrap();
        assert_eq!(base, out);
    }

    #[test]
    fn spectral_spike_is_visible_in_the_spectrum() {
        let fp = FingerprintSpec {
            spectral_spike: Some(SpectralSpike { fx: 21.0, fy: 13.0, amplitude: 0.05 }),
            ..FingerprintSpec::identity("spike")
        };
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let img = synth_generated_image(&mut rng, 64, &fp).unwrap();
            if crate::spectrum::peak_over_local_median(&img, 21.0, 13.0) >= 10.0 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "spike visible in only {hits}/10 images");
    }

    #[test]
    fn within_family_spectra_are_closer_than_across() {
        // 100 images per source; every family's v1→v2 distance must be
        // smaller than its v1's distance to any other family's v1.
        let m = default_manifest();
        let profile = |id: &str, salt: u64| -> Vec<f64> {
            let fp = m.sources.iter().find(|s| s.id == id).unwrap().fingerprint.clone().unwrap();
            let imgs: Vec<ImageBuffer> = (0..100)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(salt * 1000 + i);
                    synth_generated_image(&mut rng, 64, &fp).unwrap()
                })
                .collect();
            crate::spectrum::mean_radial_log_spectrum(&imgs)
        };
        let families = ["specnoise", "quantnoise", "resample"];
        let v1: Vec<Vec<f64>> =
            (0..3).map(|f| profile(&format!("{}-v1", families[f]), f as u64 * 2 + 1)).collect();
        let v2: Vec<Vec<f64>> =
            (0..3).map(|f| profile(&format!("{}-v2", families[f]), f as u64 * 2 + 2)).collect();
        for f in 0..3 {
            let within = crate::spectrum::profile_distance(&v1[f], &v2[f]);
            for g in 0..3 {
                if g == f {
                    continue;
                }
                let across = crate::spectrum::profile_distance(&v1[f], &v1[g]);
                assert!(
                    within < across,
                    "family {}: within {within:.3} not below across-to-{} {across:.3}",
                    families[f],
                    families[g]
                );
            }
        }
    }

    #[test]
    fn invalid_fingerprints_are_rejected() {
        let mut fp = FingerprintSpec::identity("f");
        fp.spectral_spike = Some(SpectralSpike { fx: 5.0, fy: 5.0, amplitude: 0.5 });
        assert!(fp.validate().is_err());
        let mut fp = FingerprintSpec::identity("f");
        fp.channel_mix = Some([[1.5, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(fp.validate().is_err());
        let mut fp = FingerprintSpec::identity("f");
        fp.upsample_artifact = Some(UpsampleArtifact { factor: 2, blend: 1.5 });
        assert!(fp.validate().is_err());
    }

    #[test]
    fn materialize_small_corpus_and_reload() {
        let mut m = default_manifest();
        m.sources.truncate(1);
        let small = SplitCounts { train: 3, val: 1, test: 2 };
        m.real.counts = small;
        m.sources[0].counts = small;
        let dir = tempdir().unwrap();
        let out = dir.path().join("corpus");
        let summary = materialize_corpus(&m, &out).unwrap();
        assert_eq!(summary.sources.len(), 2);
        assert!(out.join("manifest.json").is_file());
        assert!(out.join(&m.sources[0].id).join("train").join("000002.png").is_file());

        let resolved = Manifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(resolved.sources[0].order, Some(1));
        let imgs = load_split(&out, &resolved.sources[0], "train").unwrap();
        assert_eq!(imgs.len(), 3);
        // Loaded pixels equal the regenerated sample after 8-bit quantization.
        let regen = synth_sample(&m, &m.sources[0], "train", 0).unwrap();
        for (a, b) in imgs[0].pixels().iter().zip(regen.pixels().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rematerializing_is_bit_identical() {
        let mut m = default_manifest();
        m.sources.truncate(1);
        let small = SplitCounts { train: 2, val: 1, test: 1 };
        m.real.counts = small;
        m.sources[0].counts = small;
        let dir = tempdir().unwrap();
        let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
        materialize_corpus(&m, &out_a).unwrap();
        materialize_corpus(&m, &out_b).unwrap();
        let file = |root: &Path| root.join("real").join("train").join("000001.png");
        let a = fs::read(file(&out_a)).unwrap();
        let b = fs::read(file(&out_b)).unwrap();
        assert!(!a.is_empty() && a == b);
    }

    #[test]
    fn occupied_output_directory_is_rejected() {
        let m = default_manifest();
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("occupied.txt"), "x").unwrap();
        assert!(matches!(
            materialize_corpus(&m, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_directory_backing_fails_and_cleans_up() {
        let mut m = default_manifest();
        m.sources.truncate(1);
        let small = SplitCounts { train: 1, val: 1, test: 1 };
        m.real.counts = small;
        m.sources[0].counts = small;
        m.sources[0].fingerprint = None;
        m.sources[0].dir = Some(PathBuf::from("/nonexistent/backing"));
        let dir = tempdir().unwrap();
        let out = dir.path().join("corpus");
        assert!(matches!(materialize_corpus(&m, &out), Err(Error::MissingData(_))));
        assert!(!out.exists(), "partial output must be removed");
    }

    #[test]
    fn probe_separates_a_fingerprinted_source() {
        // Cheap version of the corpus learnability check: one source, small n.
        let m = default_manifest();
        let fp = m.sources[0].fingerprint.clone().unwrap();
        let gen_real = |salt: u64, n: usize| -> Vec<ImageBuffer> {
            (0..n)
                .map(|i| {
                    synth_real_image(&mut ChaCha8Rng::seed_from_u64(salt * 10_000 + i as u64), 64)
                        .unwrap()
                })
                .collect()
        };
        let gen_fake = |salt: u64, n: usize| -> Vec<ImageBuffer> {
            (0..n)
                .map(|i| {
                    synth_generated_image(
                        &mut ChaCha8Rng::seed_from_u64(salt * 10_000 + i as u64),
                        64,
                        &fp,
                    )
                    .unwrap()
                })
                .collect()
        };
        let (real_scores, fake_scores) = probe::probe_scores(
            &gen_real(1, 40),
            &gen_fake(2, 40),
            &gen_real(3, 30),
            &gen_fake(4, 30),
        );
        // Rank statistic by hand (metrics module has the real one).
        let mut better = 0usize;
        let mut ties = 0usize;
        for f in &fake_scores {
            for r in &real_scores {
                if f > r {
                    better += 2;
                } else if f == r {
                    ties += 1;
                }
            }
        }
        let auc = (better + ties) as f64 / (2 * fake_scores.len() * real_scores.len()) as f64;
        assert!(auc >= 0.9, "probe AuC {auc}");
    }
}
