//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! The layer set is fixed to exactly what the two detector architectures
//! need: `conv2d` (3x3 / 1x1), `relu`, `maxpool2`, `global_avg_pool`,
//! `linear`, `bilinear_upsample`, `sigmoid` and `softmax`. A forward pass
//! returns the output together with a [`Trace`] holding whatever each layer
//! needs for its adjoint; [`backward`] consumes the trace and accumulates
//! parameter gradients in place.
//!
//! Kernels are generic over [`Real`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks instantiate the identical code at `f64` so
//! finite-difference comparisons are not drowned by single-precision noise.
//! Batch members are processed independently with results written to disjoint
//! slices and cross-batch reductions summed in index order, so outputs are
//! bit-identical whether batches run parallel or sequential.

pub mod adam;
pub mod fdcheck;
pub mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
pub use adam::{AdamConfig, OptimizerState};
pub use kernels::Real;
use kernels::{conv_out_len, sigmoid_scalar};

/// Dense row-major tensor over `F` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

/// The public single-precision tensor used by models and training.
pub type Tensor = TensorOf<f32>;

impl<F: Real> TensorOf<F> {
    /// Build a tensor, validating that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data, grad: None })
    }

    /// Internal constructor for values produced by the engine itself.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); numel], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Convert element type (used to lift `f32` parameters into the `f64`
    /// gradient-check instantiation).
    pub fn cast<G: Real>(&self) -> TensorOf<G> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64_(v.to_f64_())).collect(),
            grad: None,
        }
    }
}

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BilinearUpsample {
        factor: usize,
    },
    Sigmoid,
    Softmax,
}

impl LayerSpec {
    /// 3x3 convolution with padding 1 (shape preserving).
    pub fn conv3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel: 3, stride: 1, padding: 1 }
    }

    /// 1x1 pointwise convolution.
    pub fn conv1(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel: 1, stride: 1, padding: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(Error::Config("conv2d channels must be positive".into()));
                }
                if !matches!(kernel, 1 | 3) {
                    return Err(Error::Config(format!(
                        "conv2d kernel {kernel} unsupported (1 or 3)"
                    )));
                }
                if stride == 0 {
                    return Err(Error::Config("conv2d stride must be positive".into()));
                }
                if padding >= kernel {
                    return Err(Error::Config(format!(
                        "conv2d padding {padding} must be smaller than kernel {kernel}"
                    )));
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err(Error::Config("linear features must be positive".into()));
                }
            }
            LayerSpec::BilinearUpsample { factor } => {
                if !(2..=16).contains(&factor) {
                    return Err(Error::Config(format!(
                        "bilinear_upsample factor {factor} outside 2..=16"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Linear { in_features, out_features } => {
                vec![vec![out_features, in_features], vec![out_features]]
            }
            _ => vec![],
        }
    }

    /// Output shape for `input` (leading batch dimension), or a shape error
    /// naming the problem.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::Shape(msg));
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [n, c, h, w] = rank4(input, "conv2d")?;
                if c != in_channels {
                    return err(format!("conv2d expects {in_channels} channels, got {c}"));
                }
                let oh = conv_out_len(h, kernel, stride, padding);
                let ow = conv_out_len(w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![n, out_channels, oh, ow]),
                    _ => err(format!("conv2d input {h}x{w} too small for kernel {kernel}")),
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                let [n, c, h, w] = rank4(input, "maxpool2")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return err(format!("maxpool2 input {h}x{w} is not even"));
                }
                Ok(vec![n, c, h / 2, w / 2])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, h, w] = rank4(input, "global_avg_pool")?;
                if h == 0 || w == 0 {
                    return err("global_avg_pool input has empty plane".into());
                }
                Ok(vec![n, c])
            }
            LayerSpec::Linear { in_features, out_features } => {
                if input.len() != 2 {
                    return err(format!("linear expects rank-2 input, got {input:?}"));
                }
                if input[1] != in_features {
                    return err(format!("linear expects {in_features} features, got {}", input[1]));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::BilinearUpsample { factor } => {
                let [n, c, h, w] = rank4(input, "bilinear_upsample")?;
                Ok(vec![n, c, h * factor, w * factor])
            }
            LayerSpec::Softmax => {
                if input.len() != 2 {
                    return err(format!("softmax expects rank-2 input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn rank4(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("{op} expects rank-4 input, got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Validate a layer stack against an input shape; returns every intermediate
/// shape (input first). Errors name the offending layer index.
pub fn validate_stack(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (idx, layer) in layers.iter().enumerate() {
        layer.validate().map_err(|e| Error::Config(format!("layer {idx}: {e}")))?;
        let next = layer
            .output_shape(shapes.last().expect("non-empty"))
            .map_err(|e| Error::Shape(format!("layer {idx}: {e}")))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Flat list of parameter tensors for a layer stack, in layer order
/// (weight before bias within a layer).
#[derive(Clone, Debug)]
pub struct ParamSetOf<F> {
    tensors: Vec<TensorOf<F>>,
    /// Range of `tensors` owned by each layer.
    layer_ranges: Vec<std::ops::Range<usize>>,
}

pub type ParamSet = ParamSetOf<f32>;

impl ParamSet {
    /// He-uniform initialization: weights drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero. Draw order is fixed
    /// (layer order, storage order) so a given RNG yields one parameter set.
    pub fn init(layers: &[LayerSpec], rng: &mut impl Rng) -> ParamSet {
        let mut tensors = Vec::new();
        let mut layer_ranges = Vec::with_capacity(layers.len());
        for layer in layers {
            let start = tensors.len();
            match *layer {
                LayerSpec::Conv2d { in_channels, kernel, .. } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    tensors.push(he_uniform(&layer.param_shapes()[0], fan_in, rng));
                    tensors.push(Tensor::zeros(&layer.param_shapes()[1]));
                }
                LayerSpec::Linear { in_features, .. } => {
                    tensors.push(he_uniform(&layer.param_shapes()[0], in_features as f64, rng));
                    tensors.push(Tensor::zeros(&layer.param_shapes()[1]));
                }
                _ => {}
            }
            layer_ranges.push(start..tensors.len());
        }
        ParamSet { tensors, layer_ranges }
    }
}

fn he_uniform(shape: &[usize], fan_in: f64, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / fan_in).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl<F: Real> ParamSetOf<F> {
    /// Wrap existing tensors, checking them against the layer stack.
    pub fn from_tensors(layers: &[LayerSpec], tensors: Vec<TensorOf<F>>) -> Result<Self> {
        let mut layer_ranges = Vec::with_capacity(layers.len());
        let mut cursor = 0;
        for (idx, layer) in layers.iter().enumerate() {
            let shapes = layer.param_shapes();
            let start = cursor;
            for expect in &shapes {
                let got = tensors.get(cursor).ok_or_else(|| {
                    Error::Shape(format!("layer {idx}: missing parameter tensor"))
                })?;
                if got.shape() != expect.as_slice() {
                    return Err(Error::Shape(format!(
                        "layer {idx}: parameter shape {:?} != expected {:?}",
                        got.shape(),
                        expect
                    )));
                }
                cursor += 1;
            }
            layer_ranges.push(start..cursor);
        }
        if cursor != tensors.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors provided, {cursor} expected",
                tensors.len()
            )));
        }
        Ok(Self { tensors, layer_ranges })
    }

    pub fn tensors(&self) -> &[TensorOf<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TensorOf<F>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSetOf<G> {
        ParamSetOf {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            layer_ranges: self.layer_ranges.clone(),
        }
    }

    fn layer_params(&self, layer_idx: usize) -> &[TensorOf<F>] {
        &self.tensors[self.layer_ranges[layer_idx].clone()]
    }

    /// Mutable access to one layer's parameter tensors (weight, then bias).
    pub fn layer_tensors_mut(&mut self, layer_idx: usize) -> &mut [TensorOf<F>] {
        &mut self.tensors[self.layer_ranges[layer_idx].clone()]
    }
}

/// Per-layer state captured by the forward pass for use by [`backward`].
enum Rec<F> {
    Conv { x_shape: [usize; 4], cols: Vec<F> },
    Relu { x: Vec<F> },
    MaxPool { x_shape: [usize; 4], argmax: Vec<usize> },
    Gap { x_shape: [usize; 4] },
    Linear { x: Vec<F>, rows: usize },
    Upsample { x_shape: [usize; 4] },
    Sigmoid { y: Vec<F> },
    Softmax { y: Vec<F>, rows: usize, cols: usize },
}

/// Everything [`backward`] needs from a completed forward pass.
pub struct Trace<F> {
    layers: Vec<LayerSpec>,
    recs: Vec<Rec<F>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl<F: Real> Trace<F> {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Run the stack on `input`, returning the output and a backward trace.
pub fn forward<F: Real>(
    layers: &[LayerSpec],
    params: &ParamSetOf<F>,
    input: &TensorOf<F>,
) -> Result<(TensorOf<F>, Trace<F>)> {
    let shapes = validate_stack(layers, input.shape())?;
    if params.layer_ranges.len() != layers.len() {
        return Err(Error::Shape("parameter set does not match layer stack".into()));
    }
    let mut recs = Vec::with_capacity(layers.len());
    let mut x = input.data.clone();
    for (idx, layer) in layers.iter().enumerate() {
        let in_shape = &shapes[idx];
        let out_shape = &shapes[idx + 1];
        let mut y = vec![F::zero(); out_shape.iter().product()];
        match *layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [n, _, h, w] = rank4(in_shape, "conv2d")?;
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let ckk = in_channels * kernel * kernel;
                let sample_cols = ckk * oh * ow;
                let mut cols = vec![F::zero(); n * sample_cols];
                let sample_in = in_channels * h * w;
                {
                    let x_ref = &x;
                    exec::for_each_chunk_mut(&mut cols, sample_cols, |s, chunk| {
                        kernels::im2col(
                            &x_ref[s * sample_in..(s + 1) * sample_in],
                            in_channels,
                            h,
                            w,
                            kernel,
                            stride,
                            padding,
                            chunk,
                        );
                    });
                }
                let wmat = &params.layer_params(idx)[0];
                let bias = &params.layer_params(idx)[1];
                let sample_out = out_channels * oh * ow;
                {
                    let cols_ref = &cols;
                    exec::for_each_chunk_mut(&mut y, sample_out, |s, chunk| {
                        kernels::gemm_nn(
                            out_channels,
                            ckk,
                            oh * ow,
                            wmat.data(),
                            &cols_ref[s * sample_cols..(s + 1) * sample_cols],
                            chunk,
                        );
                        for oc in 0..out_channels {
                            let b = bias.data()[oc];
                            for v in &mut chunk[oc * oh * ow..(oc + 1) * oh * ow] {
                                *v += b;
                            }
                        }
                    });
                }
                recs.push(Rec::Conv { x_shape: [n, in_channels, h, w], cols });
            }
            LayerSpec::Relu => {
                for (o, &v) in y.iter_mut().zip(x.iter()) {
                    *o = v.max(F::zero());
                }
                recs.push(Rec::Relu { x: std::mem::take(&mut x) });
            }
            LayerSpec::MaxPool2 => {
                let [n, c, h, w] = rank4(in_shape, "maxpool2")?;
                let plane_out = (h / 2) * (w / 2);
                let mut argmax = vec![0usize; n * c * plane_out];
                let x_ref = &x;
                let mut pairs: Vec<(Vec<F>, Vec<usize>)> = exec::batch_map(n * c, |pc| {
                    let mut out = vec![F::zero(); plane_out];
                    let mut arg = vec![0usize; plane_out];
                    kernels::maxpool2_plane(
                        &x_ref[pc * h * w..(pc + 1) * h * w],
                        h,
                        w,
                        &mut out,
                        &mut arg,
                    );
                    // Lift plane-local indices to tensor-flat indices.
                    for a in &mut arg {
                        *a += pc * h * w;
                    }
                    (out, arg)
                });
                for (pc, (out, arg)) in pairs.drain(..).enumerate() {
                    y[pc * plane_out..(pc + 1) * plane_out].copy_from_slice(&out);
                    argmax[pc * plane_out..(pc + 1) * plane_out].copy_from_slice(&arg);
                }
                recs.push(Rec::MaxPool { x_shape: [n, c, h, w], argmax });
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, h, w] = rank4(in_shape, "global_avg_pool")?;
                let inv = F::one() / F::from_usize_(h * w);
                for s in 0..n {
                    for ch in 0..c {
                        let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                        let mut acc = F::zero();
                        for &v in plane {
                            acc += v;
                        }
                        y[s * c + ch] = acc * inv;
                    }
                }
                recs.push(Rec::Gap { x_shape: [n, c, h, w] });
            }
            LayerSpec::Linear { in_features, out_features } => {
                let rows = in_shape[0];
                let wmat = &params.layer_params(idx)[0];
                let bias = &params.layer_params(idx)[1];
                kernels::gemm_nt(rows, in_features, out_features, &x, wmat.data(), &mut y);
                for r in 0..rows {
                    for (o, &b) in
                        y[r * out_features..(r + 1) * out_features].iter_mut().zip(bias.data())
                    {
                        *o += b;
                    }
                }
                recs.push(Rec::Linear { x: std::mem::take(&mut x), rows });
            }
            LayerSpec::BilinearUpsample { factor } => {
                let [n, c, h, w] = rank4(in_shape, "bilinear_upsample")?;
                let plane_out = h * factor * w * factor;
                let x_ref = &x;
                exec::for_each_chunk_mut(&mut y, plane_out, |pc, chunk| {
                    kernels::upsample_plane(&x_ref[pc * h * w..(pc + 1) * h * w], h, w, factor, chunk);
                });
                recs.push(Rec::Upsample { x_shape: [n, c, h, w] });
            }
            LayerSpec::Sigmoid => {
                for (o, &v) in y.iter_mut().zip(x.iter()) {
                    *o = sigmoid_scalar(v);
                }
                recs.push(Rec::Sigmoid { y: y.clone() });
            }
            LayerSpec::Softmax => {
                let (rows, cols) = (in_shape[0], in_shape[1]);
                y.copy_from_slice(&x);
                kernels::softmax_rows(&mut y, rows, cols);
                recs.push(Rec::Softmax { y: y.clone(), rows, cols });
            }
        }
        x = y;
    }
    let output = TensorOf::from_parts(shapes.last().expect("non-empty").clone(), x);
    Ok((
        output.clone(),
        Trace {
            layers: layers.to_vec(),
            recs,
            input_shape: input.shape().to_vec(),
            output_shape: output.shape().to_vec(),
        },
    ))
}

/// Reverse pass. Accumulates parameter gradients into `params` (use
/// [`ParamSetOf::zero_grads`] between steps) and returns the input gradient.
pub fn backward<F: Real>(
    trace: &Trace<F>,
    params: &mut ParamSetOf<F>,
    output_grad: &TensorOf<F>,
) -> Result<TensorOf<F>> {
    if output_grad.shape() != trace.output_shape {
        return Err(Error::Shape(format!(
            "output gradient shape {:?} != forward output {:?}",
            output_grad.shape(),
            trace.output_shape
        )));
    }
    let mut dy = output_grad.data.clone();
    for (idx, layer) in trace.layers.iter().enumerate().rev() {
        let rec = &trace.recs[idx];
        match (layer, rec) {
            (
                &LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding },
                Rec::Conv { x_shape, cols },
            ) => {
                let [n, _, h, w] = *x_shape;
                let oh = conv_out_len(h, kernel, stride, padding).expect("traced shape");
                let ow = conv_out_len(w, kernel, stride, padding).expect("traced shape");
                let ckk = in_channels * kernel * kernel;
                let (sample_cols, sample_out, sample_in) =
                    (ckk * oh * ow, out_channels * oh * ow, in_channels * h * w);

                // Per-sample weight/bias partials, reduced in index order so
                // the result is independent of scheduling.
                let wmat = params.layer_params(idx)[0].data().to_vec();
                let dy_ref = &dy;
                let partials: Vec<(Vec<F>, Vec<F>, Vec<F>)> = exec::batch_map(n, |s| {
                    let dy_s = &dy_ref[s * sample_out..(s + 1) * sample_out];
                    let cols_s = &cols[s * sample_cols..(s + 1) * sample_cols];
                    let mut dw = vec![F::zero(); out_channels * ckk];
                    kernels::gemm_nt(out_channels, oh * ow, ckk, dy_s, cols_s, &mut dw);
                    let mut db = vec![F::zero(); out_channels];
                    for oc in 0..out_channels {
                        let mut acc = F::zero();
                        for &g in &dy_s[oc * oh * ow..(oc + 1) * oh * ow] {
                            acc += g;
                        }
                        db[oc] = acc;
                    }
                    let mut dcols = vec![F::zero(); sample_cols];
                    kernels::gemm_tn(ckk, out_channels, oh * ow, &wmat, dy_s, &mut dcols);
                    let mut dx = vec![F::zero(); sample_in];
                    kernels::col2im(&dcols, in_channels, h, w, kernel, stride, padding, &mut dx);
                    (dw, db, dx)
                });

                let mut dw_total = vec![F::zero(); out_channels * ckk];
                let mut db_total = vec![F::zero(); out_channels];
                let mut dx = vec![F::zero(); n * sample_in];
                for (s, (dw, db, dx_s)) in partials.iter().enumerate() {
                    for (acc, v) in dw_total.iter_mut().zip(dw.iter()) {
                        *acc += *v;
                    }
                    for (acc, v) in db_total.iter_mut().zip(db.iter()) {
                        *acc += *v;
                    }
                    dx[s * sample_in..(s + 1) * sample_in].copy_from_slice(dx_s);
                }
                let range = params.layer_ranges[idx].clone();
                params.tensors[range.start].accumulate_grad(&dw_total);
                params.tensors[range.start + 1].accumulate_grad(&db_total);
                dy = dx;
            }
            (LayerSpec::Relu, Rec::Relu { x }) => {
                for (g, &v) in dy.iter_mut().zip(x.iter()) {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                }
            }
            (LayerSpec::MaxPool2, Rec::MaxPool { x_shape, argmax }) => {
                let [n, c, h, w] = *x_shape;
                let mut dx = vec![F::zero(); n * c * h * w];
                for (&src, &g) in argmax.iter().zip(dy.iter()) {
                    dx[src] += g;
                }
                dy = dx;
            }
            (LayerSpec::GlobalAvgPool, Rec::Gap { x_shape }) => {
                let [n, c, h, w] = *x_shape;
                let inv = F::one() / F::from_usize_(h * w);
                let mut dx = vec![F::zero(); n * c * h * w];
                for pc in 0..n * c {
                    let g = dy[pc] * inv;
                    for v in &mut dx[pc * h * w..(pc + 1) * h * w] {
                        *v = g;
                    }
                }
                dy = dx;
            }
            (&LayerSpec::Linear { in_features, out_features }, Rec::Linear { x, rows }) => {
                let rows = *rows;
                let mut dw = vec![F::zero(); out_features * in_features];
                kernels::gemm_tn(out_features, rows, in_features, &dy, x, &mut dw);
                let mut db = vec![F::zero(); out_features];
                for r in 0..rows {
                    for (acc, &g) in db.iter_mut().zip(&dy[r * out_features..(r + 1) * out_features])
                    {
                        *acc += g;
                    }
                }
                let wmat = params.layer_params(idx)[0].data().to_vec();
                let mut dx = vec![F::zero(); rows * in_features];
                kernels::gemm_nn(rows, out_features, in_features, &dy, &wmat, &mut dx);
                let range = params.layer_ranges[idx].clone();
                params.tensors[range.start].accumulate_grad(&dw);
                params.tensors[range.start + 1].accumulate_grad(&db);
                dy = dx;
            }
            (&LayerSpec::BilinearUpsample { factor }, Rec::Upsample { x_shape }) => {
                let [n, c, h, w] = *x_shape;
                let plane_out = h * factor * w * factor;
                let dy_ref = &dy;
                let mut dx = vec![F::zero(); n * c * h * w];
                exec::for_each_chunk_mut(&mut dx, h * w, |pc, chunk| {
                    kernels::upsample_plane_backward(
                        &dy_ref[pc * plane_out..(pc + 1) * plane_out],
                        h,
                        w,
                        factor,
                        chunk,
                    );
                });
                dy = dx;
            }
            (LayerSpec::Sigmoid, Rec::Sigmoid { y }) => {
                for (g, &v) in dy.iter_mut().zip(y.iter()) {
                    *g = *g * v * (F::one() - v);
                }
            }
            (LayerSpec::Softmax, Rec::Softmax { y, rows, cols }) => {
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &mut dy[r * cols..(r + 1) * cols];
                    let mut dot = F::zero();
                    for (&g, &v) in gr.iter().zip(yr.iter()) {
                        dot += g * v;
                    }
                    for (g, &v) in gr.iter_mut().zip(yr.iter()) {
                        *g = v * (*g - dot);
                    }
                }
            }
            _ => unreachable!("trace records always match layer kinds"),
        }
    }
    Ok(TensorOf::from_parts(trace.input_shape.clone(), dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stack() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv3(2, 4),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: 4, out_features: 2 },
            LayerSpec::Softmax,
        ]
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0f64..1.0) as f32).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }


    #[test]
    fn forward_shapes_flow_through_the_stack() {
        let layers = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ParamSet::init(&layers, &mut rng);
        let input = random_tensor(&[3, 2, 8, 8], 2);
        let (out, trace) = forward(&layers, &params, &input).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(trace.output_shape(), &[3, 2]);
        // Softmax rows sum to one.
        for r in 0..3 {
            let s: f32 = out.data()[r * 2..(r + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_reported_with_layer_index() {
        let layers = vec![LayerSpec::conv3(3, 4), LayerSpec::conv3(8, 4)];
        let err = validate_stack(&layers, &[1, 3, 8, 8]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1"), "{msg}");
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn odd_input_to_maxpool_is_rejected() {
        let layers = vec![LayerSpec::MaxPool2];
        let err = validate_stack(&layers, &[1, 1, 7, 8]).unwrap_err();
        assert!(err.to_string().contains("not even"), "{err}");
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let layers = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::init(&layers, &mut rng);
        let input = random_tensor(&[2, 2, 8, 8], 3);
        let (_, trace) = forward(&layers, &params, &input).unwrap();
        let bad = Tensor::zeros(&[2, 3]);
        assert!(backward(&trace, &mut params, &bad).is_err());
    }

    #[test]
    fn init_is_deterministic_and_he_bounded() {
        let layers = tiny_stack();
        let a = ParamSet::init(&layers, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ParamSet::init(&layers, &mut ChaCha8Rng::seed_from_u64(9));
        for (x, y) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(x.data(), y.data());
        }
        // Conv weight bound: sqrt(6 / (2*3*3)).
        let limit = (6.0f32 / 18.0).sqrt();
        assert!(a.tensors()[0].data().iter().all(|v| v.abs() <= limit));
        // Biases are zero.
        assert!(a.tensors()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parallel_and_sequential_forward_are_bit_identical() {
        let layers = tiny_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ParamSet::init(&layers, &mut rng);
        let input = random_tensor(&[4, 2, 8, 8], 7);
        let (a, _) = forward(&layers, &params, &input).unwrap();
        let (b, _) = crate::exec::scoped_sequential(|| forward(&layers, &params, &input).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gap_then_linear_matches_hand_computation() {
        let layers =
            vec![LayerSpec::GlobalAvgPool, LayerSpec::Linear { in_features: 2, out_features: 1 }];
        let mut params = ParamSet::init(&layers, &mut ChaCha8Rng::seed_from_u64(1));
        // Overwrite with known weights: y = 2*mean(c0) - 1*mean(c1) + 0.5
        params.tensors_mut()[0] = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        params.tensors_mut()[1] = Tensor::new(vec![1], vec![0.5]).unwrap();
        let input = Tensor::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let (out, _) = forward(&layers, &params, &input).unwrap();
        assert!((out.data()[0] - (2.0 * 2.5 - 25.0 + 0.5)).abs() < 1e-6);
    }
}
