//! Finite-difference gradient checking. Test-support code: production
//! training never calls into this module.
//!
//! Checks run on the `f64` instantiation of the engine so the comparison is
//! limited by truncation error of the central difference, not by `f32`
//! rounding. The relative error uses a scale floor: near-zero gradients are
//! compared absolutely at `rel_tol * scale_floor`, everything else
//! relatively. ReLU and max-pool are only piecewise smooth, so callers should
//! combine [`kink_margin`] with resampling: if some unit sits within `step`
//! of a kink, draw a fresh input instead of checking a point where the
//! two-sided difference straddles different linear pieces.

use super::{backward, forward, LayerSpec, ParamSetOf, TensorOf};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FdCheck {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum allowed `|analytic - fd| / max(|analytic|, |fd|, scale_floor)`.
    pub rel_tol: f64,
    /// Scale floor for the relative-error denominator.
    pub scale_floor: f64,
    /// Upper bound on components checked per tensor (evenly strided).
    pub max_per_tensor: usize,
}

impl Default for FdCheck {
    fn default() -> Self {
        FdCheck { step: 1e-3, rel_tol: 1e-4, scale_floor: 1e-2, max_per_tensor: 256 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_gap: f64,
    pub checked: usize,
}

/// Loss head for a check: maps the network output to a scalar and the
/// gradient of that scalar with respect to the output.
pub type LossFn<'a> = &'a dyn Fn(&TensorOf<f64>) -> Result<(f64, TensorOf<f64>)>;

impl FdCheck {
    /// Compare analytic parameter and input gradients of
    /// `loss(forward(layers, params, input))` against central differences.
    /// Returns the error report; fails if any component exceeds `rel_tol`.
    pub fn check(
        &self,
        layers: &[LayerSpec],
        params: &ParamSetOf<f64>,
        input: &TensorOf<f64>,
        loss: LossFn,
    ) -> Result<FdReport> {
        let mut params = params.clone();
        params.zero_grads();
        let (out, trace) = forward(layers, &params, input)?;
        let (_, out_grad) = loss(&out)?;
        let input_grad = backward(&trace, &mut params, &out_grad)?;

        let mut report = FdReport::default();
        let eval = |params: &ParamSetOf<f64>, input: &TensorOf<f64>| -> Result<f64> {
            let (out, _) = forward(layers, params, input)?;
            Ok(loss(&out)?.0)
        };

        // Parameter gradients, tensor by tensor.
        let n_tensors = params.tensors().len();
        for t_idx in 0..n_tensors {
            let analytic = params.tensors()[t_idx]
                .grad()
                .ok_or_else(|| Error::Config(format!("tensor {t_idx} missing gradient")))?
                .to_vec();
            let mut probe = params.clone();
            probe.zero_grads();
            for i in strided_indices(analytic.len(), self.max_per_tensor) {
                let orig = probe.tensors()[t_idx].data()[i];
                probe.tensors_mut()[t_idx].data_mut()[i] = orig + self.step;
                let plus = eval(&probe, input)?;
                probe.tensors_mut()[t_idx].data_mut()[i] = orig - self.step;
                let minus = eval(&probe, input)?;
                probe.tensors_mut()[t_idx].data_mut()[i] = orig;
                self.record(&mut report, analytic[i], (plus - minus) / (2.0 * self.step));
            }
        }

        // Input gradient.
        let mut probe_in = input.clone();
        for i in strided_indices(input.numel(), self.max_per_tensor) {
            let orig = probe_in.data()[i];
            probe_in.data_mut()[i] = orig + self.step;
            let plus = eval(&params, &probe_in)?;
            probe_in.data_mut()[i] = orig - self.step;
            let minus = eval(&params, &probe_in)?;
            probe_in.data_mut()[i] = orig;
            self.record(&mut report, input_grad.data()[i], (plus - minus) / (2.0 * self.step));
        }

        if report.max_rel_err > self.rel_tol {
            return Err(Error::NonFinite(format!(
                "gradient check failed: max relative error {:.3e} > {:.1e} over {} components",
                report.max_rel_err, self.rel_tol, report.checked
            )));
        }
        Ok(report)
    }

    fn record(&self, report: &mut FdReport, analytic: f64, fd: f64) {
        let gap = (analytic - fd).abs();
        let scale = analytic.abs().max(fd.abs()).max(self.scale_floor);
        report.max_rel_err = report.max_rel_err.max(gap / scale);
        report.max_abs_gap = report.max_abs_gap.max(gap);
        report.checked += 1;
    }
}

fn strided_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len.div_ceil(max);
    (0..len).step_by(stride).collect()
}

/// Distance from the nearest ReLU or max-pool decision boundary anywhere in
/// the stack: the minimum over ReLU pre-activation magnitudes and max-pool
/// top-two gaps. A margin comfortably above the FD step guarantees both
/// one-sided evaluations stay on the same linear piece.
pub fn kink_margin(
    layers: &[LayerSpec],
    params: &ParamSetOf<f64>,
    input: &TensorOf<f64>,
) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let mut x = input.clone();
    for (idx, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Relu => {
                for &v in x.data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2 => {
                let s = x.shape();
                let (h, w) = (s[2], s[3]);
                for pc in 0..s[0] * s[1] {
                    let plane = &x.data()[pc * h * w..(pc + 1) * h * w];
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let base = oy * 2 * w + ox * 2;
                            let mut vals =
                                [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                            vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
            _ => {}
        }
        // Advance one layer: run the single-layer stack on x.
        let sub = &layers[idx..idx + 1];
        let sub_params = ParamSetOf::from_tensors(
            sub,
            params.layer_params(idx).to_vec(),
        )?;
        let (y, _) = forward(sub, &sub_params, &x)?;
        x = y;
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weighted_sum_loss(seed: u64) -> impl Fn(&TensorOf<f64>) -> Result<(f64, TensorOf<f64>)> {
        move |out: &TensorOf<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = out.data().iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            Ok((loss, TensorOf::new(out.shape().to_vec(), w)?))
        }
    }

    #[test]
    fn smooth_stack_passes_at_default_tolerance() {
        let layers = vec![
            LayerSpec::conv3(2, 3),
            LayerSpec::Sigmoid,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: 3, out_features: 2 },
            LayerSpec::Softmax,
        ];
        let params = ParamSet::init(&layers, &mut ChaCha8Rng::seed_from_u64(3)).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = TensorOf::<f64>::new(
            vec![2, 2, 6, 6],
            (0..2 * 2 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report =
            FdCheck::default().check(&layers, &params, &input, &weighted_sum_loss(9)).unwrap();
        assert!(report.max_rel_err <= 1e-4, "max rel err {}", report.max_rel_err);
        assert!(report.checked > 50);
    }

    #[test]
    fn kink_margin_flags_near_boundary_inputs() {
        let layers = vec![LayerSpec::Relu];
        let params = ParamSetOf::<f64>::from_tensors(&layers, vec![]).unwrap();
        let near = TensorOf::<f64>::new(vec![1, 1, 2, 2], vec![1e-6, 0.5, -0.5, 1.0]).unwrap();
        let margin = kink_margin(&layers, &params, &near).unwrap();
        assert!(margin < 1e-5);
        let far = TensorOf::<f64>::new(vec![1, 1, 2, 2], vec![0.3, 0.5, -0.5, 1.0]).unwrap();
        assert!(kink_margin(&layers, &params, &far).unwrap() > 0.29);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // A loss head that reports a slightly wrong output gradient must trip
        // the checker: guards against the harness silently passing anything.
        let layers = vec![LayerSpec::GlobalAvgPool];
        let params = ParamSetOf::<f64>::from_tensors(&layers, vec![]).unwrap();
        let input = TensorOf::<f64>::new(vec![1, 2, 2, 2], vec![0.1; 8]).unwrap();
        let broken = |out: &TensorOf<f64>| {
            let loss: f64 = out.data().iter().sum();
            let grad = vec![1.05; out.numel()]; // true gradient is 1.0
            Ok((loss, TensorOf::new(out.shape().to_vec(), grad)?))
        };
        assert!(FdCheck::default().check(&layers, &params, &input, &broken).is_err());
    }
}
