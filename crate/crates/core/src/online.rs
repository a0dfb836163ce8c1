//! Progressive ("online") training: release-ordered stages, each continuing
//! from the previous stage's weights and training on all history seen so
//! far, with class-balanced batches of half real / half synthetic samples.
//!
//! Determinism contract: every random choice derives from the master seed
//! and a structural label (stage, epoch, sample), so a full run, a resumed
//! run, and a rerun produce bit-identical checkpoints. To keep that true,
//! optimizer state is rebuilt fresh at every stage boundary — checkpoints
//! persist weights only, so a resumed stage must not depend on in-memory
//! optimizer moments from earlier stages.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_train_augment, AugmentConfig};
use crate::corpus::{self, Timeline};
use crate::detector::{
    build_whole_image_net, cross_entropy, images_to_tensor, load_checkpoint, save_checkpoint,
    DetectorModel, HeadKind,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::ImageBuffer;
use crate::rng::{derive_rng, stable_hash64};
use crate::tensor::{backward, AdamConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_stage: u32,
    /// Even, split half real / half synthetic.
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_stage: 3,
            batch_size: 32,
            augment: AugmentConfig::default(),
            optimizer: AdamConfig::with_learning_rate(1e-3),
            master_seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_stage < 1 {
            return Err(Error::Config("epochs_per_stage must be at least 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be even and at least 2 (balanced halves)",
                self.batch_size
            )));
        }
        self.augment.validate()?;
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest of the full configuration, recorded in run manifests so
    /// a run directory cannot silently mix settings.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash64(json.as_bytes()))
    }
}

/// One training sample with enough provenance to derive its augmentation rng.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageBuffer,
    pub source_id: String,
    pub index: usize,
}

/// Cumulative training pool for one stage.
#[derive(Clone, Debug, Default)]
pub struct TrainPool {
    pub real: Vec<Sample>,
    pub fake: Vec<Sample>,
}

impl TrainPool {
    pub fn validate(&self) -> Result<()> {
        if self.real.is_empty() || self.fake.is_empty() {
            return Err(Error::Config(
                "training pool needs at least one real and one synthetic sample".into(),
            ));
        }
        Ok(())
    }
}

/// Index pairs for one class-balanced batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub real: Vec<usize>,
    pub fake: Vec<usize>,
}

/// Draw one epoch of class-balanced batches: each batch is exactly half
/// real and half synthetic, both halves i.i.d. uniform over their class (so
/// synthetic sources are weighted by sample count), and the epoch holds
/// enough batches to cover the larger class once in expectation.
pub fn class_balanced_batches(
    pool: &TrainPool,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    pool.validate()?;
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size {batch_size} must be even and >= 2")));
    }
    let half = batch_size / 2;
    let larger = pool.real.len().max(pool.fake.len());
    let num_batches = larger.div_ceil(half);
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let real = (0..half).map(|_| rng.gen_range(0..pool.real.len())).collect();
        let fake = (0..half).map(|_| rng.gen_range(0..pool.fake.len())).collect();
        batches.push(Batch { real, fake });
    }
    Ok(batches)
}

fn augment_label(sample: &Sample, stage: u32, epoch: u32) -> String {
    format!("augment/{}/train/{}/stage_{stage}/epoch_{epoch}", sample.source_id, sample.index)
}

/// Assemble one batch tensor: augmented real samples first (label 0), then
/// augmented synthetic samples (label 1). Augmentations use per-sample
/// derived rng, so preparation order and threading cannot change the result.
fn prepare_batch(
    pool: &TrainPool,
    batch: &Batch,
    config: &TrainConfig,
    stage: u32,
    epoch: u32,
) -> Result<(crate::tensor::Tensor, Vec<u8>)> {
    let picks: Vec<(&Sample, u8)> = batch
        .real
        .iter()
        .map(|&i| (&pool.real[i], 0u8))
        .chain(batch.fake.iter().map(|&i| (&pool.fake[i], 1u8)))
        .collect();
    let images = exec::try_batch_map(picks.len(), |slot| {
        let (sample, _) = picks[slot];
        let mut rng = derive_rng(config.master_seed, &augment_label(sample, stage, epoch));
        apply_train_augment(&sample.image, &config.augment, &mut rng)
    })?;
    let labels = picks.iter().map(|&(_, l)| l).collect();
    Ok((images_to_tensor(&images)?, labels))
}

/// Train `model` for one stage on the cumulative pool, continuing from its
/// current weights. Returns the per-epoch mean cross-entropy. The model must
/// arrive with `stage_index == stage - 1`; it leaves with `stage_index ==
/// stage`.
pub fn train_stage(
    model: &mut DetectorModel,
    pool: &TrainPool,
    stage: u32,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    pool.validate()?;
    if model.head != HeadKind::WholeImage {
        return Err(Error::Config("online training requires a whole-image head".into()));
    }
    if model.stage_index != stage - 1 {
        return Err(Error::Config(format!(
            "model is at stage {}, cannot train stage {stage} (history would be skipped)",
            model.stage_index
        )));
    }

    let mut optimizer = OptimizerState::new(config.optimizer, &model.params)?;
    let mut history = Vec::with_capacity(config.epochs_per_stage as usize);
    for epoch in 1..=config.epochs_per_stage {
        let mut rng = derive_rng(
            config.master_seed,
            &format!("online/stage_{stage}/epoch_{epoch}/sampler"),
        );
        let batches = class_balanced_batches(pool, config.batch_size, &mut rng)?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (input, labels) = prepare_batch(pool, batch, config, stage, epoch)?;
            let (logits, trace) = model.forward(&input)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            backward(&trace, &mut model.params, &grad)?;
            optimizer.step(&mut model.params)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    model.stage_index = stage;
    Ok(history)
}

/// One completed stage: the snapshot plus its position in the timeline.
#[derive(Clone, Debug)]
pub struct StageCheckpoint {
    pub stage: u32,
    pub source_added: String,
    /// Real source first, then the first `stage` generated sources in
    /// release order.
    pub cumulative_sources: Vec<String>,
    pub model: DetectorModel,
}

fn cumulative_sources(timeline: &Timeline, stage: u32) -> Vec<String> {
    let mut ids = vec![timeline.real.id.clone()];
    ids.extend(timeline.generated[..stage as usize].iter().map(|s| s.id.clone()));
    ids
}

/// Persist one stage snapshot in the detector checkpoint format.
pub fn save_stage_checkpoint(ckpt: &StageCheckpoint, path: &Path) -> Result<()> {
    if ckpt.model.stage_index != ckpt.stage {
        return Err(Error::Config(format!(
            "checkpoint stage {} disagrees with model stage {}",
            ckpt.stage, ckpt.model.stage_index
        )));
    }
    save_checkpoint(&ckpt.model, path)
}

/// Load one stage snapshot, reconstructing timeline metadata from the stored
/// stage index.
pub fn load_stage_checkpoint(path: &Path, timeline: &Timeline) -> Result<StageCheckpoint> {
    let model = load_checkpoint(path)?;
    let stage = model.stage_index;
    if stage == 0 || stage as usize > timeline.generated.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "stage index {stage} outside timeline of {} stages",
                timeline.generated.len()
            ),
        });
    }
    Ok(StageCheckpoint {
        stage,
        source_added: timeline.generated[stage as usize - 1].id.clone(),
        cumulative_sources: cumulative_sources(timeline, stage),
        model,
    })
}

pub fn stage_checkpoint_path(run_dir: &Path, stage: u32, source_id: &str) -> PathBuf {
    run_dir.join(format!("stage_{stage}_{source_id}.ckpt"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    master_seed: u64,
    config_digest: String,
    completed_stages: Vec<CompletedStage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CompletedStage {
    stage: u32,
    source_id: String,
    file: String,
}

/// Everything a finished (or resumed) run reports.
#[derive(Debug)]
pub struct RunOutcome {
    pub checkpoints: Vec<StageCheckpoint>,
    /// Stages actually trained in this invocation (others were loaded).
    pub retrained: Vec<u32>,
    /// Per-epoch mean cross-entropy for each retrained stage, keyed by stage.
    pub history: Vec<(u32, Vec<f64>)>,
    pub run_dir: PathBuf,
}

fn load_samples(
    corpus_dir: &Path,
    source: &corpus::GeneratorSource,
) -> Result<Vec<Sample>> {
    let images = corpus::load_split(corpus_dir, source, "train")?;
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(index, image)| Sample { image, source_id: source.id.clone(), index })
        .collect())
}

fn write_run_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let path = run_dir.join("run_manifest.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(path.as_path(), e))
}

/// Run (or resume) the full progressive sequence. Stage 1 starts from a
/// fresh initialization derived from the master seed; stage k continues from
/// stage k-1's final weights. Each stage's checkpoint is persisted before
/// the next begins, and stages whose checkpoint file already exists are
/// loaded instead of retrained — deleting one file retrains exactly that
/// stage. A fixed seed reproduces every checkpoint byte for byte.
pub fn run_online(
    timeline: &Timeline,
    corpus_dir: &Path,
    config: &TrainConfig,
    runs_dir: &Path,
    run_id: &str,
) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = runs_dir.join(run_id);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.as_path(), e))?;

    let manifest_path = run_dir.join("run_manifest.json");
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.as_path(), e))?;
        let existing: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("unreadable run manifest: {e}")))?;
        if existing.config_digest != config.digest() || existing.master_seed != config.master_seed
        {
            return Err(Error::Config(format!(
                "run directory {} was created with different settings; use a new run id",
                run_dir.display()
            )));
        }
    }
    let mut manifest = RunManifest {
        run_id: run_id.to_string(),
        master_seed: config.master_seed,
        config_digest: config.digest(),
        completed_stages: Vec::new(),
    };
    write_run_manifest(&run_dir, &manifest)?;

    let mut pool = TrainPool {
        real: load_samples(corpus_dir, &timeline.real)?,
        fake: Vec::new(),
    };
    let mut model = build_whole_image_net(
        config.augment.crop_size,
        &mut derive_rng(config.master_seed, "online/init"),
    )?;

    let mut outcome = RunOutcome {
        checkpoints: Vec::new(),
        retrained: Vec::new(),
        history: Vec::new(),
        run_dir: run_dir.clone(),
    };
    for (idx, source) in timeline.generated.iter().enumerate() {
        let stage = idx as u32 + 1;
        pool.fake.extend(load_samples(corpus_dir, source)?);
        let path = stage_checkpoint_path(&run_dir, stage, &source.id);
        let ckpt = if path.is_file() {
            let loaded = load_stage_checkpoint(&path, timeline)?;
            if loaded.stage != stage {
                return Err(Error::Checkpoint {
                    path,
                    reason: format!("holds stage {}, expected {stage}", loaded.stage),
                });
            }
            model = loaded.model.clone();
            loaded
        } else {
            let history = train_stage(&mut model, &pool, stage, config)?;
            let ckpt = StageCheckpoint {
                stage,
                source_added: source.id.clone(),
                cumulative_sources: cumulative_sources(timeline, stage),
                model: model.clone(),
            };
            save_stage_checkpoint(&ckpt, &path)?;
            outcome.retrained.push(stage);
            outcome.history.push((stage, history));
            ckpt
        };
        manifest.completed_stages.push(CompletedStage {
            stage,
            source_id: source.id.clone(),
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
        });
        write_run_manifest(&run_dir, &manifest)?;
        outcome.checkpoints.push(ckpt);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_manifest, materialize_corpus, SplitCounts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn toy_sample(seed: u64, source_id: &str, index: usize, base: f32) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageBuffer::from_fn(32, 32, 3, |_, _, _| base + rng.gen_range(-0.05..0.05));
        Sample { image, source_id: source_id.into(), index }
    }

    fn toy_pool(n_real: usize, n_fake: usize) -> TrainPool {
        TrainPool {
            real: (0..n_real).map(|i| toy_sample(100 + i as u64, "real", i, 0.75)).collect(),
            fake: (0..n_fake).map(|i| toy_sample(500 + i as u64, "fake", i, 0.25)).collect(),
        }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs_per_stage: 3,
            batch_size: 4,
            augment: AugmentConfig {
                crop_size: 32,
                p_blur: 0.0,
                p_gray: 0.0,
                p_watermark: 0.0,
                ..AugmentConfig::default()
            },
            optimizer: AdamConfig::with_learning_rate(3e-3),
            master_seed: 7,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut c = TrainConfig::default();
        c.epochs_per_stage = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.batch_size = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn batches_are_exactly_half_real_half_fake() {
        let pool = toy_pool(10, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = class_balanced_batches(&pool, 10, &mut rng).unwrap();
        // Epoch covers the larger class once in expectation: ceil(90/5).
        assert_eq!(batches.len(), 18);
        for b in &batches {
            assert_eq!(b.real.len(), 5);
            assert_eq!(b.fake.len(), 5);
            assert!(b.real.iter().all(|&i| i < 10));
            assert!(b.fake.iter().all(|&i| i < 90));
        }
    }

    #[test]
    fn single_class_pool_is_rejected() {
        let pool = TrainPool { real: vec![toy_sample(1, "real", 0, 0.5)], fake: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            class_balanced_batches(&pool, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fake_draws_weight_sources_by_sample_count() {
        // Three synthetic sources of sizes 10/20/70; over one epoch the drawn
        // proportions must sit within 4 sigma of 0.1/0.2/0.7.
        let mut pool = toy_pool(100, 0);
        for (sid, count) in [("a", 10), ("b", 20), ("c", 70)] {
            for i in 0..count {
                pool.fake.push(toy_sample(i as u64, sid, i, 0.25));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = class_balanced_batches(&pool, 10, &mut rng).unwrap();
        let draws: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.fake.iter().map(|&i| pool.fake[i].source_id.as_str()))
            .collect();
        let n = draws.len() as f64;
        assert_eq!(n, 100.0);
        for (sid, p) in [("a", 0.1), ("b", 0.2), ("c", 0.7)] {
            let observed = draws.iter().filter(|&&s| s == sid).count() as f64 / n;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!(
                (observed - p).abs() <= 4.0 * sigma,
                "source {sid}: observed {observed}, expected {p} +- {}",
                4.0 * sigma
            );
        }
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let pool = toy_pool(4, 4);
        let config = toy_config();
        let mut model = build_whole_image_net(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        // Fresh model is at stage 0; asking for stage 2 would skip history.
        match train_stage(&mut model, &pool, 2, &config) {
            Err(Error::Config(msg)) => assert!(msg.contains("stage")),
            other => panic!("expected stage mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn training_decreases_epoch_mean_cross_entropy_deterministically() {
        let pool = toy_pool(16, 16);
        let config = toy_config();
        let mut model = build_whole_image_net(32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let before: Vec<f32> =
            model.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let history = train_stage(&mut model, &pool, 1, &config).unwrap();
        assert_eq!(model.stage_index, 1);
        assert_eq!(history.len(), 3);
        assert!(
            history[0] > *history.last().unwrap(),
            "cross-entropy did not decrease: {history:?}"
        );
        let after: Vec<f32> =
            model.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        assert_ne!(before, after, "training did not move the parameters");

        // Same seed, same pool: bit-identical final parameters.
        let mut rerun = build_whole_image_net(32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let history2 = train_stage(&mut rerun, &pool, 1, &config).unwrap();
        assert_eq!(history, history2);
        let after2: Vec<f32> =
            rerun.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    fn tiny_manifest() -> crate::corpus::Manifest {
        let mut manifest = default_manifest();
        manifest.sources.truncate(2);
        let counts = SplitCounts { train: 6, val: 1, test: 2 };
        manifest.real.counts = counts;
        for s in &mut manifest.sources {
            s.counts = counts;
        }
        manifest
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs_per_stage: 1,
            batch_size: 4,
            augment: AugmentConfig { crop_size: 64, ..AugmentConfig::default() },
            optimizer: AdamConfig::with_learning_rate(1e-3),
            master_seed: 23,
        }
    }

    #[test]
    fn run_online_trains_resumes_and_reproduces() {
        let dir = tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let manifest = tiny_manifest();
        materialize_corpus(&manifest, &corpus_dir).unwrap();
        let timeline = crate::corpus::build_timeline(&manifest).unwrap();
        let config = tiny_config();
        let runs = dir.path().join("runs");

        let first = run_online(&timeline, &corpus_dir, &config, &runs, "run-a").unwrap();
        assert_eq!(first.checkpoints.len(), 2);
        assert_eq!(first.retrained, vec![1, 2]);
        let real_id = &timeline.real.id;
        assert_eq!(
            first.checkpoints[0].cumulative_sources,
            vec![real_id.clone(), timeline.generated[0].id.clone()]
        );
        assert_eq!(
            first.checkpoints[1].cumulative_sources,
            vec![
                real_id.clone(),
                timeline.generated[0].id.clone(),
                timeline.generated[1].id.clone()
            ]
        );
        // History monotonicity: each cumulative set strictly extends the last
        // and always contains the real source.
        for ckpt in &first.checkpoints {
            assert!(ckpt.cumulative_sources.contains(real_id));
        }
        assert!(first.checkpoints[1]
            .cumulative_sources
            .starts_with(&first.checkpoints[0].cumulative_sources));
        assert!(
            first.checkpoints[1].cumulative_sources.len()
                > first.checkpoints[0].cumulative_sources.len()
        );

        // Training happened: stage parameters differ.
        let blob = |m: &DetectorModel| -> Vec<u32> {
            m.params.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_ne!(blob(&first.checkpoints[0].model), blob(&first.checkpoints[1].model));

        let p1 = stage_checkpoint_path(&first.run_dir, 1, &timeline.generated[0].id);
        let p2 = stage_checkpoint_path(&first.run_dir, 2, &timeline.generated[1].id);
        let bytes1 = fs::read(&p1).unwrap();
        let bytes2 = fs::read(&p2).unwrap();
        assert!(first.run_dir.join("run_manifest.json").is_file());

        // Resume with everything present: nothing retrains, files untouched.
        let resumed = run_online(&timeline, &corpus_dir, &config, &runs, "run-a").unwrap();
        assert!(resumed.retrained.is_empty());
        assert_eq!(fs::read(&p1).unwrap(), bytes1);
        assert_eq!(fs::read(&p2).unwrap(), bytes2);

        // Delete stage 2: exactly stage 2 retrains, and lands byte-identical
        // because stage 1's checkpoint round-trips bit-exactly.
        fs::remove_file(&p2).unwrap();
        let partial = run_online(&timeline, &corpus_dir, &config, &runs, "run-a").unwrap();
        assert_eq!(partial.retrained, vec![2]);
        assert_eq!(fs::read(&p1).unwrap(), bytes1);
        assert_eq!(fs::read(&p2).unwrap(), bytes2);

        // A fresh run directory reproduces the whole sequence byte for byte.
        let second = run_online(&timeline, &corpus_dir, &config, &runs, "run-b").unwrap();
        assert_eq!(
            fs::read(stage_checkpoint_path(&second.run_dir, 1, &timeline.generated[0].id))
                .unwrap(),
            bytes1
        );
        assert_eq!(
            fs::read(stage_checkpoint_path(&second.run_dir, 2, &timeline.generated[1].id))
                .unwrap(),
            bytes2
        );

        // Same run id with different settings is refused.
        let mut other = config.clone();
        other.master_seed = 99;
        match run_online(&timeline, &corpus_dir, &other, &runs, "run-a") {
            Err(Error::Config(msg)) => assert!(msg.contains("different settings")),
            other => panic!("expected config mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn stage_checkpoint_round_trip_preserves_metadata() {
        let manifest = tiny_manifest();
        let timeline = crate::corpus::build_timeline(&manifest).unwrap();
        let mut model = build_whole_image_net(64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        model.stage_index = 2;
        let ckpt = StageCheckpoint {
            stage: 2,
            source_added: timeline.generated[1].id.clone(),
            cumulative_sources: cumulative_sources(&timeline, 2),
            model,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("stage.ckpt");
        save_stage_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_stage_checkpoint(&path, &timeline).unwrap();
        assert_eq!(loaded.stage, 2);
        assert_eq!(loaded.source_added, ckpt.source_added);
        assert_eq!(loaded.cumulative_sources, ckpt.cumulative_sources);

        // Stage index beyond the timeline is refused.
        let mut stray = load_checkpoint(&path).unwrap();
        stray.stage_index = 9;
        let stray_path = dir.path().join("stray.ckpt");
        save_checkpoint(&stray, &stray_path).unwrap();
        match load_stage_checkpoint(&stray_path, &timeline) {
            Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("stage index 9")),
            other => panic!("expected stage range error, got {other:?}"),
        }
    }
}
