//! Stage-3 replay: resample artifact strength vs diagonal convergence.

use std::path::Path;
use std::time::Instant;

use oaid_core::corpus;
use oaid_core::detector::predict_scores;
use oaid_core::image::ImageBuffer;
use oaid_core::metrics::{self, ScoreSet};
use oaid_core::online::{self, Sample, TrainConfig, TrainPool};
use oaid_core::rng::derive_rng;

fn to_samples(images: Vec<ImageBuffer>, source_id: &str) -> Vec<Sample> {
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
    let stage2 = online::load_stage_checkpoint(
        Path::new("/tmp/pilot/runs/a/stage_2_quantnoise-v1.ckpt"),
        &timeline,
    )
    .unwrap();

    let spec1 = timeline.source_by_id("specnoise-v1").unwrap();
    let quant1 = timeline.source_by_id("quantnoise-v1").unwrap();
    let resample1 = timeline.source_by_id("resample-v1").unwrap();
    let real_test = corpus::load_split(corpus_dir, &timeline.real, "test").unwrap();
    let spec1_test = corpus::load_split(corpus_dir, spec1, "test").unwrap();
    let quant1_test = corpus::load_split(corpus_dir, quant1, "test").unwrap();

    for (name, factor, blend, epochs) in [
        ("f2 b0.85 e3", 2usize, 0.85f32, 3u32),
        ("f4 b0.85 e3", 4, 0.85, 3),
        ("f2 b0.95 e3", 2, 0.95, 3),
        ("f4 b0.85 e4", 4, 0.85, 4),
    ] {
        let mut fp = resample1.fingerprint.clone().unwrap();
        {
            let art = fp.upsample_artifact.as_mut().unwrap();
            art.factor = factor;
            art.blend = blend;
        }
        let synth = |label: &str, count: usize| -> Vec<ImageBuffer> {
            (0..count)
                .map(|i| {
                    let mut rng = derive_rng(manifest.seed, &format!("p8/{name}/{label}/{i}"));
                    corpus::synth_generated_image(&mut rng, 64, &fp).unwrap()
                })
                .collect()
        };
        let real_train = to_samples(
            corpus::load_split(corpus_dir, &timeline.real, "train").unwrap(),
            &timeline.real.id,
        );
        let mut fake =
            to_samples(corpus::load_split(corpus_dir, spec1, "train").unwrap(), &spec1.id);
        fake.extend(to_samples(
            corpus::load_split(corpus_dir, quant1, "train").unwrap(),
            &quant1.id,
        ));
        fake.extend(to_samples(synth("train", 400), &resample1.id));
        let pool = TrainPool { real: real_train, fake };
        let r_test = synth("test", 100);

        let cfg = TrainConfig { epochs_per_stage: epochs, ..TrainConfig::default() };
        let mut model = stage2.model.clone();
        let t = Instant::now();
        let losses = online::train_stage(&mut model, &pool, 3, &cfg).unwrap();
        let rs = predict_scores(&model, &real_test, 32).unwrap();
        let scores = predict_scores(&model, &r_test, 32).unwrap();
        let set = |fake_scores: Vec<f64>, id: &str| ScoreSet {
            real_scores: rs.clone(),
            fake_scores,
            source_id: id.into(),
            stage: 3,
        };
        println!(
            "{name} ({:>3.0?}): resample auc {:.4} acc {:.2} | real {:.2} spec {:.4} quant {:.4} | loss {:.3}->{:.3}",
            t.elapsed(),
            metrics::auc(&set(scores.clone(), "r")).unwrap(),
            metrics::synthetic_accuracy(&scores, 0.5),
            metrics::real_accuracy(&rs, 0.5),
            metrics::auc(&set(predict_scores(&model, &spec1_test, 32).unwrap(), "s")).unwrap(),
            metrics::auc(&set(predict_scores(&model, &quant1_test, 32).unwrap(), "q")).unwrap(),
            losses.first().unwrap(),
            losses.last().unwrap()
        );
    }
}
