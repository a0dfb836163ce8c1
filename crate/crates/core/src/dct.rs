//! Orthonormal 8x8 block DCT-II.
//!
//! Shared by the invisible watermark (coefficient quantization in the luma
//! channel) and the JPEG-style generator fingerprint. The transform is
//! orthonormal — `idct(dct(x)) == x` and energy is preserved — so quantizing
//! one coefficient perturbs pixels by exactly the coefficient delta spread
//! over the block.

pub const BLOCK: usize = 8;

/// Single-channel float plane, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "plane data matches dimensions");
        Plane { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Orthonormal DCT-II basis: `basis[k][n] = s(k) * cos(pi*(2n+1)*k/16)` with
/// `s(0) = sqrt(1/8)`, `s(k>0) = sqrt(2/8)`. Rows are orthonormal.
fn basis() -> [[f64; BLOCK]; BLOCK] {
    let mut b = [[0.0; BLOCK]; BLOCK];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64
                    / (2.0 * BLOCK as f64))
                    .cos();
        }
    }
    b
}

/// Forward 2D DCT of one 8x8 block (row-major, in place): `C = B · X · Bᵀ`.
pub fn dct8_block(block: &mut [f64; BLOCK * BLOCK]) {
    transform(block, false);
}

/// Inverse 2D DCT of one 8x8 block: `X = Bᵀ · C · B`.
pub fn idct8_block(block: &mut [f64; BLOCK * BLOCK]) {
    transform(block, true);
}

fn transform(block: &mut [f64; BLOCK * BLOCK], inverse: bool) {
    let b = basis();
    let mut tmp = [0.0; BLOCK * BLOCK];
    // rows: tmp = M · Bᵀ  (forward)  or  M · B (inverse)
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            let mut acc = 0.0;
            for n in 0..BLOCK {
                let w = if inverse { b[n][k] } else { b[k][n] };
                acc += block[y * BLOCK + n] * w;
            }
            tmp[y * BLOCK + k] = acc;
        }
    }
    // cols
    for x in 0..BLOCK {
        for k in 0..BLOCK {
            let mut acc = 0.0;
            for n in 0..BLOCK {
                let w = if inverse { b[n][k] } else { b[k][n] };
                acc += tmp[n * BLOCK + x] * w;
            }
            block[k * BLOCK + x] = acc;
        }
    }
}

/// Pad a plane to multiples of 8 by edge reflection (abcb-style, no repeated
/// edge sample when possible), then return per-block DCT coefficients laid
/// out in the same geometry as the padded plane.
pub fn block_dct8(plane: &Plane) -> Plane {
    let ph = pad_len(plane.height);
    let pw = pad_len(plane.width);
    let mut out = Plane::zeros(ph, pw);
    for by in 0..ph / BLOCK {
        for bx in 0..pw / BLOCK {
            let mut block = [0.0f64; BLOCK * BLOCK];
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    let sy = reflect(by * BLOCK + y, plane.height);
                    let sx = reflect(bx * BLOCK + x, plane.width);
                    block[y * BLOCK + x] = plane.get(sy, sx) as f64;
                }
            }
            dct8_block(&mut block);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    out.data[(by * BLOCK + y) * pw + bx * BLOCK + x] = block[y * BLOCK + x] as f32;
                }
            }
        }
    }
    out
}

/// Inverse of [`block_dct8`]: reconstruct a plane of the given original size
/// from a padded coefficient plane.
pub fn block_idct8(coeffs: &Plane, height: usize, width: usize) -> Plane {
    assert_eq!(coeffs.height, pad_len(height), "coefficient plane matches padded height");
    assert_eq!(coeffs.width, pad_len(width), "coefficient plane matches padded width");
    let mut out = Plane::zeros(height, width);
    for by in 0..coeffs.height / BLOCK {
        for bx in 0..coeffs.width / BLOCK {
            let mut block = [0.0f64; BLOCK * BLOCK];
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    block[y * BLOCK + x] =
                        coeffs.get(by * BLOCK + y, bx * BLOCK + x) as f64;
                }
            }
            idct8_block(&mut block);
            for y in 0..BLOCK {
                let oy = by * BLOCK + y;
                if oy >= height {
                    continue;
                }
                for x in 0..BLOCK {
                    let ox = bx * BLOCK + x;
                    if ox < width {
                        out.data[oy * width + ox] = block[y * BLOCK + x] as f32;
                    }
                }
            }
        }
    }
    out
}

fn pad_len(n: usize) -> usize {
    n.div_ceil(BLOCK) * BLOCK
}

fn reflect(idx: usize, len: usize) -> usize {
    if idx < len {
        return idx;
    }
    // Reflect across the last sample: len, len+1, ... -> len-2, len-3, ...
    let over = idx - len;
    if len == 1 {
        return 0;
    }
    len - 2 - over.min(len - 2)
}
