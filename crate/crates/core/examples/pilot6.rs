//! Optimization diagnostics: why does the net plateau on probe-separable sources?

use oaid_core::corpus::{self, FingerprintSpec, GeneratorSource};
use oaid_core::detector::{self, build_whole_image_net, cross_entropy, images_to_tensor};
use oaid_core::image::ImageBuffer;
use oaid_core::metrics::{auc, ScoreSet};
use oaid_core::rng::derive_rng;
use oaid_core::tensor::{backward, forward, AdamConfig, OptimizerState};
use rand::seq::SliceRandom;
use std::time::Instant;

fn variant(id: &str, fp: FingerprintSpec) -> GeneratorSource {
    let mut s = corpus::default_manifest().sources[0].clone();
    s.id = id.to_string();
    s.fingerprint = Some(fp);
    s
}

struct Pools {
    train_real: Vec<ImageBuffer>,
    train_fake: Vec<ImageBuffer>,
    test_real: Vec<ImageBuffer>,
    test_fake: Vec<ImageBuffer>,
}

fn make_pools(seed: u64, size: usize, source: &GeneratorSource, n_train: usize, n_test: usize) -> Pools {
    let gen = |label: &str, count: usize, fake: bool| -> Vec<ImageBuffer> {
        (0..count)
            .map(|i| {
                let mut rng = derive_rng(seed, &format!("p6/{label}/{i}"));
                if fake {
                    corpus::synth_generated_image(&mut rng, size, source.fingerprint.as_ref().unwrap()).unwrap()
                } else {
                    corpus::synth_real_image(&mut rng, size).unwrap()
                }
            })
            .collect()
    };
    Pools {
        train_real: gen("tr-real", n_train, false),
        train_fake: gen(&format!("tr-{}", source.id), n_train, true),
        test_real: gen("te-real", n_test, false),
        test_fake: gen(&format!("te-{}", source.id), n_test, true),
    }
}

fn run_case(pools: &Pools, source_id: &str, lr: f64, epochs: u32, center: bool, seed: u64) {
    let t0 = Instant::now();
    let mut rng = derive_rng(seed, "p6/init");
    let mut model = build_whole_image_net(64, &mut rng).unwrap();
    let cfg = AdamConfig::with_learning_rate(lr);
    let mut opt = OptimizerState::new(cfg, &model.params).unwrap();

    let half = 16usize;
    let n = pools.train_real.len().min(pools.train_fake.len());
    let steps_per_epoch = n / half;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_report = String::new();
    for epoch in 0..epochs {
        let mut shuf = derive_rng(seed, &format!("p6/shuffle/{epoch}"));
        order.shuffle(&mut shuf);
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let idx = &order[..];
            let mut images: Vec<ImageBuffer> = Vec::with_capacity(half * 2);
            let mut labels: Vec<u8> = Vec::with_capacity(half * 2);
            for b in 0..half {
                let i = idx[(step * half + b) % n];
                images.push(pools.train_real[i].clone());
                labels.push(0);
                images.push(pools.train_fake[i].clone());
                labels.push(1);
            }
            let mut input = images_to_tensor(&images).unwrap();
            if center {
                for v in input.data_mut() {
                    *v -= 0.5;
                }
            }
            let (logits, trace) = forward(&model.layers, &model.params, &input).unwrap();
            let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
            loss_sum += loss;
            backward(&trace, &mut model.params, &grad).unwrap();
            opt.step(&mut model.params).unwrap();
        }
        let score = |imgs: &[ImageBuffer]| -> Vec<f64> {
            if center {
                imgs.chunks(32)
                    .flat_map(|chunk| {
                        let mut input = images_to_tensor(chunk).unwrap();
                        for v in input.data_mut() {
                            *v -= 0.5;
                        }
                        let (out, _) = forward(&model.layers, &model.params, &input).unwrap();
                        let d = out.data();
                        (0..chunk.len())
                            .map(|i| {
                                let (a, b) = (d[i * 2] as f64, d[i * 2 + 1] as f64);
                                let m = a.max(b);
                                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                                eb / (ea + eb)
                            })
                            .collect::<Vec<f64>>()
                    })
                    .collect()
            } else {
                detector::predict_scores(&model, imgs, 32).unwrap()
            }
        };
        let set = ScoreSet {
            real_scores: score(&pools.test_real),
            fake_scores: score(&pools.test_fake),
            source_id: source_id.to_string(),
            stage: 0,
        };
        epoch_report.push_str(&format!(
            " e{}: loss {:.3} auc {:.4}",
            epoch + 1,
            loss_sum / steps_per_epoch as f64,
            auc(&set).unwrap()
        ));
    }
    println!(
        "{:<14} lr {:<6} center {:<5} ({:>4.0?}) {}",
        source_id,
        lr,
        center,
        t0.elapsed(),
        epoch_report
    );
}

fn main() {
    let manifest = corpus::default_manifest();
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("quant-3.5");

    let source = match which {
        "quant-2" | "quant-2.5" | "quant-3.5" | "quant-5" => {
            let scale: f32 = which.strip_prefix("quant-").unwrap().parse().unwrap();
            let mut fp = manifest.sources[1].fingerprint.clone().unwrap();
            fp.dct_quantization.as_mut().unwrap().table_scale = scale;
            variant(which, fp)
        }
        "resample-0.85" | "resample-0.6" => {
            let blend: f32 = which.strip_prefix("resample-").unwrap().parse().unwrap();
            let mut fp = manifest.sources[2].fingerprint.clone().unwrap();
            fp.upsample_artifact.as_mut().unwrap().blend = blend;
            variant(which, fp)
        }
        other => panic!("unknown case {other}"),
    };

    println!("== {which} ==");
    let pools = make_pools(manifest.seed, 64, &source, 400, 100);
    for (lr, center) in [(1e-3, false)] {
        run_case(&pools, &source.id, lr, 6, center, 42);
    }
}
