//! Frequency-domain measurements used by the corpus linear probe and the
//! fingerprint self-tests.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dct::Plane;
use crate::image::ImageBuffer;

/// 2D power spectrum (squared magnitude of the unnormalized DFT) of a plane,
/// laid out like the plane itself: bin (v, u) holds vertical frequency v and
/// horizontal frequency u in cycles per image, DC at (0, 0).
///
/// The plane mean is removed and a periodic Hann window applied first, so
/// off-bin sinusoids stay confined to a few-bin mainlobe instead of leaking
/// across the whole spectrum.
pub fn power_spectrum(plane: &Plane) -> Plane {
    let (h, w) = (plane.height, plane.width);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mean =
        plane.data.iter().map(|&v| v as f64).sum::<f64>() / (h * w).max(1) as f64;
    let hann = |n: usize, len: usize| -> f64 {
        0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / len as f64).cos())
    };
    let wy: Vec<f64> = (0..h).map(|y| hann(y, h)).collect();
    let wx: Vec<f64> = (0..w).map(|x| hann(x, w)).collect();
    let mut grid: Vec<Complex64> = plane
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex64::new((v as f64 - mean) * wy[i / w] * wx[i % w], 0.0))
        .collect();
    for row in grid.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    // Transform columns via transpose-process-transpose.
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    Plane::new(h, w, grid.iter().map(|c| c.norm_sqr() as f32).collect())
}

/// Ratio of the strongest non-DC spectral bin to the median non-DC power —
/// large when the image carries a planted sinusoidal component. DC and its
/// immediate neighbors are excluded so image brightness and smooth gradients
/// do not register.
pub fn spectral_peak_ratio(img: &ImageBuffer) -> f64 {
    let spec = power_spectrum(&img.luma());
    let (h, w) = (spec.height, spec.width);
    let mut values = Vec::with_capacity(h * w);
    let mut peak = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            // Skip the 3x3 region around DC (wrapping).
            let near_dc = (y <= 1 || y >= h - 1) && (x <= 1 || x >= w - 1);
            if near_dc {
                continue;
            }
            let p = spec.get(y, x) as f64;
            values.push(p);
            peak = peak.max(p);
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite powers"));
    let median = values[values.len() / 2].max(1e-12);
    peak / median
}

/// Power at the spectral bin nearest (fx, fy) cycles/image (max over a 3x3
/// neighborhood to absorb leakage), relative to the median power in the
/// surrounding 11x11 ring.
pub fn peak_over_local_median(img: &ImageBuffer, fx: f64, fy: f64) -> f64 {
    let spec = power_spectrum(&img.luma());
    let (h, w) = (spec.height as isize, spec.width as isize);
    let cy = fy.round() as isize;
    let cx = fx.round() as isize;
    let wrap = |v: isize, n: isize| ((v % n) + n) % n;
    let mut peak = 0.0f64;
    let mut ring = Vec::new();
    for dy in -5isize..=5 {
        for dx in -5isize..=5 {
            let p = spec.get(wrap(cy + dy, h) as usize, wrap(cx + dx, w) as usize) as f64;
            if dy.abs() <= 1 && dx.abs() <= 1 {
                peak = peak.max(p);
            } else {
                ring.push(p);
            }
        }
    }
    ring.sort_by(|a, b| a.partial_cmp(b).expect("finite powers"));
    peak / ring[ring.len() / 2].max(1e-12)
}

/// Variance of the 4-neighbor Laplacian of the luma plane: a cheap sharpness
/// / high-frequency-content statistic.
pub fn variance_of_laplacian(img: &ImageBuffer) -> f64 {
    let luma = img.luma();
    let (h, w) = (luma.height, luma.width);
    let mut values = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = 4.0 * luma.get(y, x)
                - luma.get(y - 1, x)
                - luma.get(y + 1, x)
                - luma.get(y, x - 1)
                - luma.get(y, x + 1);
            values.push(lap as f64);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Radially averaged mean log power spectrum over a set of images (all equal
/// dims): mean of `ln(power)` per integer-radius shell, DC excluded. This is
/// the fingerprint "signature" used to compare source families — radial
/// averaging keeps it stable under small frequency drift and rotation.
pub fn mean_radial_log_spectrum(images: &[ImageBuffer]) -> Vec<f64> {
    assert!(!images.is_empty(), "need at least one image");
    let (h, w) = (images[0].height(), images[0].width());
    let bins = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as f64).sqrt().floor() as usize + 1;
    let mut acc = vec![0.0f64; bins];
    let mut count = vec![0usize; bins];
    for img in images {
        let spec = power_spectrum(&img.luma());
        for y in 0..h {
            for x in 0..w {
                if y == 0 && x == 0 {
                    continue;
                }
                let v = y.min(h - y) as f64;
                let u = x.min(w - x) as f64;
                let r = (u * u + v * v).sqrt().round() as usize;
                if r < bins {
                    acc[r] += (spec.data[y * w + x] as f64 + 1e-12).ln();
                    count[r] += 1;
                }
            }
        }
    }
    acc.iter()
        .zip(count.iter())
        .map(|(&a, &c)| if c > 0 { a / c as f64 } else { 0.0 })
        .collect()
}

/// Euclidean distance between two radial spectral signatures.
pub fn profile_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "profiles must have equal length");
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_sinusoid_shows_up_at_its_bin() {
        let img = ImageBuffer::from_fn(64, 64, 1, |y, x, _| {
            0.5 + 0.2
                * (2.0 * std::f32::consts::PI * (13.0 * x as f32 + 9.0 * y as f32) / 64.0).sin()
        });
        let ratio = peak_over_local_median(&img, 13.0, 9.0);
        assert!(ratio > 100.0, "ratio {ratio}");
        // A flat-noise bin far from the spike sees nothing.
        let off = peak_over_local_median(&img, 25.0, 25.0);
        assert!(off < ratio / 10.0);
    }

    #[test]
    fn constant_image_has_no_offdc_energy() {
        // Mean removal zeroes a constant image entirely, DC included.
        let img = ImageBuffer::constant(32, 32, 1, 0.7);
        let spec = power_spectrum(&img.luma());
        let total: f32 = spec.data.iter().sum();
        assert!(total < 1e-6, "residual power {total}");
    }

    #[test]
    fn laplacian_variance_ranks_sharpness() {
        let noisy = ImageBuffer::from_fn(32, 32, 1, |y, x, _| ((y * 7 + x * 13) % 5) as f32 / 4.0);
        let smooth = ImageBuffer::from_fn(32, 32, 1, |y, x, _| (y + x) as f32 / 64.0);
        assert!(variance_of_laplacian(&noisy) > 10.0 * variance_of_laplacian(&smooth));
    }
}
