//! Single-stage learnability grid for the quantization / resampling
//! fingerprints. Scratch only.

use std::time::Instant;

use oaid_core::augment::AugmentConfig;
use oaid_core::corpus::{self, FingerprintSpec};
use oaid_core::detector::{build_whole_image_net, predict_scores};
use oaid_core::image::ImageBuffer;
use oaid_core::metrics::{self, ScoreSet};
use oaid_core::online::{train_stage, Sample, TrainConfig, TrainPool};
use oaid_core::rng::derive_rng;
use oaid_core::tensor::AdamConfig;

fn synth_fake(fp: &FingerprintSpec, label: &str, count: usize) -> Vec<ImageBuffer> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(400, &format!("p4/{label}/{i}"));
            corpus::synth_generated_image(&mut rng, 64, fp).unwrap()
        })
        .collect()
}

fn synth_real(label: &str, count: usize) -> Vec<ImageBuffer> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(401, &format!("p4/{label}/{i}"));
            corpus::synth_real_image(&mut rng, 64).unwrap()
        })
        .collect()
}

fn to_samples(images: &[ImageBuffer], source_id: &str) -> Vec<Sample> {
    images
        .iter()
        .enumerate()
        .map(|(index, image)| Sample {
            image: image.clone(),
            source_id: source_id.to_string(),
            index,
        })
        .collect()
}

fn main() {
    let manifest = corpus::default_manifest();
    let real_train = synth_real("train", 400);
    let real_test = synth_real("test", 100);
    let real_samples = to_samples(&real_train, "real");

    let quant_fp = manifest.sources[1].fingerprint.clone().unwrap();
    let resample_fp = manifest.sources[2].fingerprint.clone().unwrap();
    println!("quant fp: {quant_fp:?}");
    println!("resample fp: {resample_fp:?}");

    let mut cases: Vec<(String, FingerprintSpec)> = Vec::new();
    for scale in [1.6f32, 2.5, 3.5] {
        let mut fp = quant_fp.clone();
        fp.dct_quantization.as_mut().unwrap().table_scale = scale;
        cases.push((format!("quant-{scale}"), fp));
    }
    for blend in [0.0f32, 0.35, 0.6] {
        let mut fp = resample_fp.clone();
        if blend > 0.0 {
            fp.upsample_artifact.as_mut().unwrap().blend = blend;
        }
        cases.push((
            format!(
                "resample-{}",
                if blend > 0.0 { blend } else { fp.upsample_artifact.unwrap().blend }
            ),
            fp,
        ));
    }

    let quiet = AugmentConfig { p_blur: 0.0, p_gray: 0.0, p_watermark: 0.0, ..Default::default() };
    let configs: Vec<(&str, TrainConfig)> = vec![
        ("e3 lr1e-3", TrainConfig::default()),
        (
            "e6 lr2e-3",
            TrainConfig {
                epochs_per_stage: 6,
                optimizer: AdamConfig::with_learning_rate(2e-3),
                ..TrainConfig::default()
            },
        ),
        (
            "e3 lr1e-3 noaug",
            TrainConfig { augment: quiet.clone(), ..TrainConfig::default() },
        ),
    ];

    for (name, fp) in &cases {
        let fakes = synth_fake(fp, &format!("{name}/train"), 400);
        let fake_test = synth_fake(fp, &format!("{name}/test"), 100);
        let pool = TrainPool { real: real_samples.clone(), fake: to_samples(&fakes, name) };
        for (cname, cfg) in &configs {
            let mut model = build_whole_image_net(64, &mut derive_rng(7, "p4/init")).unwrap();
            let t = Instant::now();
            let hist = train_stage(&mut model, &pool, 1, cfg).unwrap();
            let real_scores = predict_scores(&model, &real_test, 32).unwrap();
            let fake_scores = predict_scores(&model, &fake_test, 32).unwrap();
            let set = ScoreSet {
                real_scores: real_scores.clone(),
                fake_scores: fake_scores.clone(),
                source_id: name.clone(),
                stage: 1,
            };
            println!(
                "{name:<14} {cname:<16} ({:>3.0}s) auc {:.4} synth {:.2} real {:.2} loss {:.3}->{:.3}",
                t.elapsed().as_secs_f64(),
                metrics::auc(&set).unwrap(),
                metrics::synthetic_accuracy(&fake_scores, 0.5),
                metrics::real_accuracy(&real_scores, 0.5),
                hist.first().unwrap(),
                hist.last().unwrap()
            );
        }
    }
}
