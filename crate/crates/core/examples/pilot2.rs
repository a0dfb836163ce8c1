//! Scratch pilot for pixel-training threshold calibration. Not in the suite.

use std::time::Instant;

use oaid_core::corpus::{self, synth_sample};
use oaid_core::inpaint::{
    eval_pixel_detector, synth_pixel_sample, train_pixel_detector, whole_image_sample,
    PixelDatasetConfig, PixelSample, PixelTrainConfig, ProvenanceKind,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let size: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);

    let mut manifest = corpus::default_manifest();
    manifest.image_size = size;
    let data_cfg = PixelDatasetConfig::default();
    let spec1 = &manifest.sources[0];
    let quant1 = &manifest.sources[1];
    let fp1 = spec1.fingerprint.as_ref().unwrap();
    let fp2 = quant1.fingerprint.as_ref().unwrap();

    let synth_set = |kind: ProvenanceKind, id: &str, fp, split: &str, count: usize| {
        (0..count)
            .map(|i| synth_pixel_sample(&manifest, &data_cfg, kind, id, fp, split, i).unwrap())
            .collect::<Vec<PixelSample>>()
    };
    let t = Instant::now();
    let inpaint1 = synth_set(ProvenanceKind::SimulatedInpaint, &spec1.id, fp1, "train", n);
    let inpaint2 = synth_set(ProvenanceKind::SimulatedInpaint, &quant1.id, fp2, "train", n);
    let cutmix1 = synth_set(ProvenanceKind::CutMix, &spec1.id, fp1, "train", n);
    let whole: Vec<PixelSample> = (0..n / 2)
        .flat_map(|i| {
            let real = synth_sample(&manifest, &manifest.real, "train", i).unwrap();
            let fake = synth_sample(&manifest, spec1, "train", i).unwrap();
            [
                whole_image_sample(real, false, &manifest.real.id),
                whole_image_sample(fake, true, &spec1.id),
            ]
        })
        .collect();
    let test1 = synth_set(ProvenanceKind::SimulatedInpaint, &spec1.id, fp1, "test", 100);
    println!("synthesis: {:.1}s", t.elapsed().as_secs_f64());

    let combined: Vec<PixelSample> =
        inpaint1.iter().cloned().chain(inpaint2.iter().cloned()).collect();
    let arms: [(&str, &[PixelSample]); 4] = [
        ("whole", &whole),
        ("cutmix", &cutmix1),
        ("inpaint", &inpaint1),
        ("inpaint+2nd", &combined),
    ];
    for (name, samples) in arms {
        let mut f1s = Vec::new();
        for seed in [201u64, 202, 203] {
            let cfg = PixelTrainConfig {
                epochs,
                master_seed: seed,
                optimizer: oaid_core::tensor::AdamConfig::with_learning_rate(lr),
                ..PixelTrainConfig::default()
            };
            let t = Instant::now();
            let (model, history) = train_pixel_detector(samples, &cfg).unwrap();
            let m = eval_pixel_detector(&model, &test1, 0.5).unwrap();
            println!(
                "{name:<12} seed {seed} ({:>4.0}s): f1 {:.4} acc {:.4} p {:.4} r {:.4} (loss {:.3}->{:.3})",
                t.elapsed().as_secs_f64(),
                m.f1,
                m.accuracy,
                m.precision,
                m.recall,
                history.first().unwrap(),
                history.last().unwrap()
            );
            f1s.push(m.f1);
        }
        println!("{name:<12} mean f1 {:.4}", f1s.iter().sum::<f64>() / f1s.len() as f64);
    }
}
