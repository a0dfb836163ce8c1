//! Probe-separability scan: is the fingerprint signal present at all?

use oaid_core::corpus::{self, FingerprintSpec, GeneratorSource, Manifest};
use oaid_core::metrics::{auc, ScoreSet};
use oaid_core::rng::derive_rng;

fn variant(id: &str, fp: FingerprintSpec) -> GeneratorSource {
    let mut s = corpus::default_manifest().sources[0].clone();
    s.id = id.to_string();
    s.fingerprint = Some(fp);
    s
}

fn probe_auc(manifest: &Manifest, source: &GeneratorSource) -> (f64, [f64; 2], [f64; 2]) {
    let n_train = 200usize;
    let n_test = 100usize;
    let size = manifest.image_size;
    let gen = |label: &str, count: usize, fake: bool| -> Vec<oaid_core::image::ImageBuffer> {
        (0..count)
            .map(|i| {
                let mut rng = derive_rng(manifest.seed, &format!("p5/{label}/{i}"));
                if fake {
                    corpus::synth_generated_image(
                        &mut rng,
                        size,
                        source.fingerprint.as_ref().unwrap(),
                    )
                    .unwrap()
                } else {
                    corpus::synth_real_image(&mut rng, size).unwrap()
                }
            })
            .collect()
    };
    let train_real = gen("tr-real", n_train, false);
    let train_fake = gen(&format!("tr-{}", source.id), n_train, true);
    let test_real = gen("te-real", n_test, false);
    let test_fake = gen(&format!("te-{}", source.id), n_test, true);

    let mean_feat = |imgs: &[oaid_core::image::ImageBuffer]| -> [f64; 2] {
        let mut acc = [0.0f64; 2];
        for img in imgs {
            let f = corpus::probe::features(img);
            acc[0] += f[0];
            acc[1] += f[1];
        }
        [acc[0] / imgs.len() as f64, acc[1] / imgs.len() as f64]
    };
    let mr = mean_feat(&test_real);
    let mf = mean_feat(&test_fake);

    let (real_scores, fake_scores) =
        corpus::probe::probe_scores(&train_real, &train_fake, &test_real, &test_fake);
    let set = ScoreSet {
        real_scores,
        fake_scores,
        source_id: source.id.clone(),
        stage: 0,
    };
    (auc(&set).unwrap(), mr, mf)
}

fn main() {
    let manifest = corpus::default_manifest();
    let mut cases: Vec<GeneratorSource> = Vec::new();

    for scale in [1.6f32, 2.5, 3.5, 5.0, 7.0] {
        let mut fp = manifest.sources[1].fingerprint.clone().unwrap();
        fp.dct_quantization.as_mut().unwrap().table_scale = scale;
        cases.push(variant(&format!("quant-{scale}"), fp));
    }
    for blend in [0.85f32, 0.6, 0.35] {
        let mut fp = manifest.sources[2].fingerprint.clone().unwrap();
        fp.upsample_artifact.as_mut().unwrap().blend = blend;
        cases.push(variant(&format!("resample-{blend}"), fp));
    }
    cases.push(manifest.sources[0].clone()); // specnoise-v1 as baseline

    for source in &cases {
        let (a, mr, mf) = probe_auc(&manifest, source);
        println!(
            "{:<16} probe_auc {:.4}   real feats [{:+.3} {:+.3}]   fake feats [{:+.3} {:+.3}]",
            source.id, a, mr[0], mr[1], mf[0], mf[1]
        );
    }
}
