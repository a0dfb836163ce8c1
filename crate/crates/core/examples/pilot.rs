//! Scratch pilot for threshold calibration. Not part of the test suite.

use std::path::Path;
use std::time::Instant;

use oaid_core::corpus::{self, FingerprintSpec, SourceKind};
use oaid_core::detector::{build_whole_image_net, predict_scores};
use oaid_core::metrics::{self, ScoreSet};
use oaid_core::online::{self, Sample, TrainConfig, TrainPool};
use oaid_core::rng::derive_rng;

fn score_images(
    model: &oaid_core::detector::DetectorModel,
    images: &[oaid_core::image::ImageBuffer],
) -> Vec<f64> {
    predict_scores(model, images, 32).unwrap()
}

fn to_samples(images: Vec<oaid_core::image::ImageBuffer>, source_id: &str) -> Vec<Sample> {
    images
        .into_iter()
        .enumerate()
        .map(|(index, image)| Sample { image, source_id: source_id.to_string(), index })
        .collect()
}

fn main() {
    let manifest = corpus::default_manifest();
    let timeline = corpus::build_timeline(&manifest).unwrap();
    let corpus_dir = Path::new("/tmp/pilot/corpus");
    if !corpus_dir.join("manifest.json").is_file() {
        let t = Instant::now();
        corpus::materialize_corpus(&manifest, corpus_dir).unwrap();
        println!("corpus gen: {:.1}s", t.elapsed().as_secs_f64());
    }

    // --- C1/C2: full online run with the default config ---
    let config = TrainConfig { epochs_per_stage: 4, ..TrainConfig::default() };
    let t = Instant::now();
    let outcome =
        online::run_online(&timeline, corpus_dir, &config, Path::new("/tmp/pilot/runs"), "a")
            .unwrap();
    println!("online run: {:.1}s (retrained {:?})", t.elapsed().as_secs_f64(), outcome.retrained);
    for (stage, losses) in &outcome.history {
        println!("  stage {stage} losses {losses:?}");
    }
    let t = Instant::now();
    let models: Vec<_> = outcome.checkpoints.iter().map(|c| c.model.clone()).collect();
    let matrix = metrics::build_matrix(&models, &timeline, corpus_dir).unwrap();
    println!("matrix: {:.1}s", t.elapsed().as_secs_f64());
    println!("real acc per stage: {:?}", matrix.real_accuracy);
    for (row, source) in matrix.source_ids.iter().enumerate() {
        let line: Vec<String> = matrix.cells[row]
            .iter()
            .map(|c| format!("{:.3}/{:.2}", c.auc, c.synthetic_accuracy))
            .collect();
        println!("{source:<14} {}", line.join("  "));
    }

    // --- C3: stage-1-only training, family generalization ---
    let real_train = to_samples(
        corpus::load_split(corpus_dir, &timeline.real, "train").unwrap(),
        &timeline.real.id,
    );
    let spec1 = timeline.source_by_id("specnoise-v1").unwrap();
    let fake_train =
        to_samples(corpus::load_split(corpus_dir, spec1, "train").unwrap(), &spec1.id);
    let real_test = corpus::load_split(corpus_dir, &timeline.real, "test").unwrap();
    let mut tests = Vec::new();
    for id in ["specnoise-v2", "quantnoise-v1", "resample-v1"] {
        let src = timeline.source_by_id(id).unwrap();
        tests.push((id, corpus::load_split(corpus_dir, src, "test").unwrap()));
    }
    let pool = TrainPool { real: real_train, fake: fake_train };
    let mut stage1 = None;
    for seed in [101u64, 102, 103] {
        let cfg = TrainConfig { master_seed: seed, ..TrainConfig::default() };
        let mut model =
            build_whole_image_net(64, &mut derive_rng(seed, "pilot/init")).unwrap();
        let t = Instant::now();
        online::train_stage(&mut model, &pool, 1, &cfg).unwrap();
        let real_scores = score_images(&model, &real_test);
        print!("seed {seed} ({:.0}s):", t.elapsed().as_secs_f64());
        for (id, imgs) in &tests {
            let set = ScoreSet {
                real_scores: real_scores.clone(),
                fake_scores: score_images(&model, imgs),
                source_id: id.to_string(),
                stage: 1,
            };
            print!("  {id} auc {:.4}", metrics::auc(&set).unwrap());
        }
        println!();
        stage1 = Some(model);
    }

    // --- C4: weakened-fingerprint amplitude scan ---
    let model = stage1.unwrap();
    let base_fp = spec1.fingerprint.clone().unwrap();
    let real_scores = score_images(&model, &real_test);
    for scale in [1.0f32, 0.5, 0.35, 0.25, 0.15, 0.10, 0.05] {
        let mut fp = base_fp.clone();
        if let Some(spike) = fp.spectral_spike.as_mut() {
            spike.amplitude *= scale;
        }
        let imgs: Vec<_> = (0..100)
            .map(|i| {
                let mut rng = derive_rng(777, &format!("pilot/weak/{i}"));
                corpus::synth_generated_image(&mut rng, 64, &fp).unwrap()
            })
            .collect();
        let fake_scores = score_images(&model, &imgs);
        let set = ScoreSet {
            real_scores: real_scores.clone(),
            fake_scores: fake_scores.clone(),
            source_id: format!("weak-{scale}"),
            stage: 1,
        };
        println!(
            "scale {scale:<5} auc {:.4} synth_acc {:.3} mean_fake {:.3}",
            metrics::auc(&set).unwrap(),
            metrics::synthetic_accuracy(&fake_scores, 0.5),
            fake_scores.iter().sum::<f64>() / fake_scores.len() as f64
        );
    }
    let _ = (SourceKind::Real, FingerprintSpec::identity("x"));
}
