//! Stride-8 representational ceiling for default stroke masks. Scratch only.
//!
//! Upper-bounds what a stride-8 + bilinear-x8 mask head can express: per
//! 8x8 cell emit the best constant in a small candidate set, upsample,
//! threshold, and score F1 against the true mask.

use oaid_core::dct::Plane;
use oaid_core::inpaint::{generate_stroke_mask, MaskSpec};
use oaid_core::rng::derive_rng;

fn bilinear_up(cells: &Plane, factor: usize) -> Plane {
    let (ch, cw) = (cells.height, cells.width);
    let (h, w) = (ch * factor, cw * factor);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            // align_corners=false convention
            let sy = ((y as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, ch as f32 - 1.0);
            let sx = ((x as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, cw as f32 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            let v = cells.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + cells.get(y0, x1) * (1.0 - fy) * fx
                + cells.get(y1, x0) * fy * (1.0 - fx)
                + cells.get(y1, x1) * fy * fx;
            out.data[y * w + x] = v;
        }
    }
    out
}

fn f1(pred: &Plane, truth: &Plane) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, t) in pred.data.iter().zip(truth.data.iter()) {
        match (*p >= 0.5, *t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

fn run(size: usize) {
    let spec = MaskSpec::default();
    let mut mean_best = 0.0;
    let candidates: Vec<f32> = (0..=10).map(|i| i as f32 / 10.0).collect();
    for i in 0..60 {
        let mut rng = derive_rng(99, &format!("ceil/{i}"));
        let mask = generate_stroke_mask(size, size, &spec, &mut rng).unwrap();
        // Coordinate ascent from block means over per-cell candidate values.
        let c = size / 8; let mut cells = Plane::zeros(c, c);
        for cy in 0..c {
            for cx in 0..c {
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        s += mask.plane.get(cy * 8 + y, cx * 8 + x);
                    }
                }
                cells.data[cy * c + cx] = s / 64.0;
            }
        }
        let mut best = f1(&bilinear_up(&cells, 8), &mask.plane);
        for _pass in 0..3 {
            for idx in 0..c * c {
                let orig = cells.data[idx];
                let mut local_best = (best, orig);
                for &c in &candidates {
                    cells.data[idx] = c;
                    let score = f1(&bilinear_up(&cells, 8), &mask.plane);
                    if score > local_best.0 {
                        local_best = (score, c);
                    }
                }
                cells.data[idx] = local_best.1;
                best = local_best.0;
            }
        }
        mean_best += best;
        if i < 3 {
            println!("mask {i}: coverage {:.3} best f1 {:.4}", mask.coverage, best);
        }
    }
    println!("size {size}: mean best f1 over 60 masks: {:.4}", mean_best / 60.0);
}

fn main() {
    for size in [64, 96, 128] {
        run(size);
    }
}
