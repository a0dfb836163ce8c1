//! Stage-2 replay + family-generalization check at reduced spike amplitudes.

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
    let ckpt_path = Path::new("/tmp/pilot/runs/a/stage_1_specnoise-v1.ckpt");
    let stage1 = online::load_stage_checkpoint(ckpt_path, &timeline).unwrap();

    let spec1 = timeline.source_by_id("specnoise-v1").unwrap();
    let quant1 = timeline.source_by_id("quantnoise-v1").unwrap();
    let resample1 = timeline.source_by_id("resample-v1").unwrap();
    let real_test = corpus::load_split(corpus_dir, &timeline.real, "test").unwrap();
    let rs_stage1 = predict_scores(&stage1.model, &real_test, 32).unwrap();

    for amp in [0.02f32, 0.025, 0.03] {
        let synth = |fp: &corpus::FingerprintSpec, label: &str, count: usize| -> Vec<ImageBuffer> {
            (0..count)
                .map(|i| {
                    let mut rng = derive_rng(manifest.seed, &format!("p7/{amp}/{label}/{i}"));
                    corpus::synth_generated_image(&mut rng, 64, fp).unwrap()
                })
                .collect()
        };
        let mut qfp = quant1.fingerprint.clone().unwrap();
        qfp.spectral_spike.as_mut().unwrap().amplitude = amp;
        let mut rfp = resample1.fingerprint.clone().unwrap();
        rfp.spectral_spike.as_mut().unwrap().amplitude = amp;

        // (1) Does the stage-1 model fire on the other families at this amp?
        let q_test = synth(&qfp, "q-test", 100);
        let r_test = synth(&rfp, "r-test", 100);
        let set = |fake_scores: Vec<f64>, id: &str| ScoreSet {
            real_scores: rs_stage1.clone(),
            fake_scores,
            source_id: id.into(),
            stage: 1,
        };
        let q_auc = metrics::auc(&set(
            predict_scores(&stage1.model, &q_test, 32).unwrap(),
            "q",
        ))
        .unwrap();
        let r_auc = metrics::auc(&set(
            predict_scores(&stage1.model, &r_test, 32).unwrap(),
            "r",
        ))
        .unwrap();

        // (2) Stage-2 replay: does quant at this amp still train fast?
        let real_train = to_samples(
            corpus::load_split(corpus_dir, &timeline.real, "train").unwrap(),
            &timeline.real.id,
        );
        let mut fake =
            to_samples(corpus::load_split(corpus_dir, spec1, "train").unwrap(), &spec1.id);
        fake.extend(to_samples(synth(&qfp, "q-train", 400), &quant1.id));
        let pool = TrainPool { real: real_train, fake };
        let cfg = TrainConfig::default();
        let mut model = stage1.model.clone();
        let t = Instant::now();
        let losses = online::train_stage(&mut model, &pool, 2, &cfg).unwrap();
        let rs2 = predict_scores(&model, &real_test, 32).unwrap();
        let qs2 = predict_scores(&model, &q_test, 32).unwrap();
        let set2 = ScoreSet {
            real_scores: rs2.clone(),
            fake_scores: qs2.clone(),
            source_id: "q".into(),
            stage: 2,
        };
        println!(
            "amp {amp:<5}  stage1: q_auc {q_auc:.4} r_auc {r_auc:.4}  |  stage2 ({:>3.0?}): q_auc {:.4} q_acc {:.2} real_acc {:.2} loss {:.3}->{:.3}",
            t.elapsed(),
            metrics::auc(&set2).unwrap(),
            metrics::synthetic_accuracy(&qs2, 0.5),
            metrics::real_accuracy(&rs2, 0.5),
            losses.first().unwrap(),
            losses.last().unwrap()
        );
    }
}
