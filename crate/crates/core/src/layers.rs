//! Differentiable layers with hand-written backward passes.
//!
//! Every activation is a rank-4 tensor laid out as (batch, channels, height,
//! width). Fully connected layers flatten their input and emit
//! (batch, features, 1, 1), so chains of mixed conv/linear layers compose
//! without explicit reshape layers.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation tensor, (batch, channels, height, width).
pub type Tensor = Array4<f64>;

/// Per-sample shape of an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn of(t: &Tensor) -> Self {
        let (_, c, h, w) = t.dim();
        Self::new(c, h, w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Relu,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    /// Number of weights (without biases) and biases.
    fn param_sizes(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels * in_channels * kernel * kernel, out_channels)),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some((out_features * in_features, out_features)),
            LayerSpec::MaxPool2d { .. } | LayerSpec::Relu => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().map_or(0, |(w, b)| w + b)
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.channels != in_channels {
                    return Err(Error::shape(
                        "conv2d input channels",
                        &[in_channels],
                        &[input.channels],
                    ));
                }
                if stride == 0 || kernel == 0 {
                    return Err(Error::Config("conv2d kernel and stride must be positive".into()));
                }
                let ph = input.height + 2 * padding;
                let pw = input.width + 2 * padding;
                if ph < kernel || pw < kernel {
                    return Err(Error::shape(
                        "conv2d input smaller than kernel",
                        &[kernel, kernel],
                        &[ph, pw],
                    ));
                }
                Ok(Shape3::new(
                    out_channels,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.numel() != in_features {
                    return Err(Error::shape(
                        "linear input features",
                        &[in_features],
                        &[input.numel()],
                    ));
                }
                Ok(Shape3::new(out_features, 1, 1))
            }
            LayerSpec::MaxPool2d { size } => {
                if size == 0 || input.height < size || input.width < size {
                    return Err(Error::shape(
                        "max-pool input smaller than window",
                        &[size, size],
                        &[input.height, input.width],
                    ));
                }
                Ok(Shape3::new(
                    input.channels,
                    input.height / size,
                    input.width / size,
                ))
            }
            LayerSpec::Relu => Ok(input),
        }
    }
}

/// Saved activations needed by the backward pass of one layer.
#[derive(Debug)]
pub enum LayerCache {
    Conv { cols: Array2<f64>, input: Shape3 },
    Linear { input: Array2<f64>, shape: Shape3 },
    Pool { argmax: Vec<usize>, input: Shape3 },
    Relu { output: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let (nw, nb) = spec.param_sizes().unwrap_or((0, 0));
        let bound = match spec.fan_in() {
            0 => 0.0,
            f => 1.0 / (f as f64).sqrt(),
        };
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = draw(nw);
        let bias = draw(nb);
        Self { spec, weight, bias }
    }

    pub fn from_parts(spec: LayerSpec, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let (nw, nb) = spec.param_sizes().unwrap_or((0, 0));
        if weight.len() != nw || bias.len() != nb {
            return Err(Error::shape(
                format!("parameters for {spec:?}"),
                &[nw, nb],
                &[weight.len(), bias.len()],
            ));
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Parameter tensors in (weight, bias) order; empty for stateless layers.
    pub fn params(&self) -> Vec<&[f64]> {
        if self.spec.param_sizes().is_some() {
            vec![&self.weight, &self.bias]
        } else {
            Vec::new()
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        if self.spec.param_sizes().is_some() {
            vec![&mut self.weight, &mut self.bias]
        } else {
            Vec::new()
        }
    }

    fn weight_matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.weight).expect("weight length checked at construction")
    }

    /// Forward pass. When `keep` is set the returned cache holds what
    /// [`Layer::backward`] needs.
    pub fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<LayerCache>)> {
        let in_shape = Shape3::of(x);
        let out_shape = self.spec.output_shape(in_shape)?;
        let batch = x.dim().0;
        match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let cols = im2col(x, kernel, stride, padding, out_shape);
                let w = self.weight_matrix(out_channels, in_channels * kernel * kernel);
                let out_mat = w.dot(&cols);
                let hw = out_shape.height * out_shape.width;
                let mut out = Tensor::zeros((batch, out_channels, out_shape.height, out_shape.width));
                {
                    let dst = out.as_slice_mut().expect("fresh tensor is contiguous");
                    for o in 0..out_channels {
                        let row = out_mat.row(o);
                        let row = row.as_slice().expect("gemm output is row-major");
                        let b_o = self.bias[o];
                        for b in 0..batch {
                            let d = &mut dst[(b * out_channels + o) * hw..][..hw];
                            for (d, s) in d.iter_mut().zip(&row[b * hw..(b + 1) * hw]) {
                                *d = s + b_o;
                            }
                        }
                    }
                }
                let cache = keep.then_some(LayerCache::Conv {
                    cols,
                    input: in_shape,
                });
                Ok((out, cache))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let flat = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((batch, in_features))
                    .expect("feature count checked by output_shape");
                let w = self.weight_matrix(out_features, in_features);
                let mut y = flat.dot(&w.t());
                for mut row in y.rows_mut() {
                    for (v, b) in row.iter_mut().zip(&self.bias) {
                        *v += b;
                    }
                }
                let out = y
                    .into_shape_with_order((batch, out_features, 1, 1))
                    .expect("same element count");
                let cache = keep.then_some(LayerCache::Linear {
                    input: flat,
                    shape: in_shape,
                });
                Ok((out, cache))
            }
            LayerSpec::MaxPool2d { size } => {
                let (out, argmax) = max_pool(x, size, out_shape);
                let cache = keep.then_some(LayerCache::Pool {
                    argmax,
                    input: in_shape,
                });
                Ok((out, cache))
            }
            LayerSpec::Relu => {
                let out = x.mapv(|v| v.max(0.0));
                let cache = keep.then(|| LayerCache::Relu {
                    output: out.clone(),
                });
                Ok((out, cache))
            }
        }
    }

    /// Backward pass for one layer.
    ///
    /// Returns the gradient with respect to the input (when `want_input`)
    /// and the parameter gradients in [`Layer::params`] order (when
    /// `want_params`).
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        let batch = grad_out.dim().0;
        match (&self.spec, cache) {
            (
                &LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerCache::Conv { cols, input },
            ) => {
                let (_, _, ho, wo) = grad_out.dim();
                let hw = ho * wo;
                let g = grad_out.as_standard_layout();
                let gs = g.as_slice().expect("standard layout");
                let mut gmat = Array2::<f64>::zeros((out_channels, batch * hw));
                {
                    let dst = gmat.as_slice_mut().expect("fresh array is contiguous");
                    for o in 0..out_channels {
                        for b in 0..batch {
                            dst[o * batch * hw + b * hw..][..hw]
                                .copy_from_slice(&gs[(b * out_channels + o) * hw..][..hw]);
                        }
                    }
                }
                let mut grads = Vec::new();
                if want_params {
                    let dw = gmat.dot(&cols.t());
                    let db = gmat.sum_axis(Axis(1));
                    grads.push(dw.into_raw_vec_and_offset().0);
                    grads.push(db.to_vec());
                }
                let dx = if want_input {
                    let w = self.weight_matrix(out_channels, in_channels * kernel * kernel);
                    let dcols = w.t().dot(&gmat);
                    Some(col2im(&dcols, batch, *input, kernel, stride, padding, ho, wo))
                } else {
                    None
                };
                Ok((dx, grads))
            }
            (
                &LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                LayerCache::Linear { input, shape },
            ) => {
                let g = grad_out
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((batch, out_features))
                    .map_err(|_| {
                        Error::shape("linear grad", &[batch, out_features], grad_out.shape())
                    })?;
                let mut grads = Vec::new();
                if want_params {
                    let dw = g.t().dot(input);
                    let db = g.sum_axis(Axis(0));
                    grads.push(dw.as_standard_layout().iter().copied().collect());
                    grads.push(db.to_vec());
                }
                let dx = if want_input {
                    let w = self.weight_matrix(out_features, in_features);
                    let dx = g.dot(&w);
                    Some(
                        dx.into_shape_with_order((batch, shape.channels, shape.height, shape.width))
                            .expect("same element count"),
                    )
                } else {
                    None
                };
                Ok((dx, grads))
            }
            (LayerSpec::MaxPool2d { .. }, LayerCache::Pool { argmax, input }) => {
                let dx = want_input.then(|| {
                    let mut dx = Tensor::zeros((batch, input.channels, input.height, input.width));
                    let d = dx.as_slice_mut().expect("fresh tensor");
                    let g = grad_out.as_standard_layout();
                    for (&i, &v) in argmax.iter().zip(g.iter()) {
                        d[i] += v;
                    }
                    dx
                });
                Ok((dx, Vec::new()))
            }
            (LayerSpec::Relu, LayerCache::Relu { output }) => {
                let dx = want_input.then(|| {
                    let mut dx = grad_out.clone();
                    dx.zip_mut_with(output, |g, &y| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    dx
                });
                Ok((dx, Vec::new()))
            }
            _ => Err(Error::Invalid(format!(
                "cache does not belong to layer {:?}",
                self.spec
            ))),
        }
    }
}

/// Unfolds convolution patches into a (C*k*k, B*Ho*Wo) matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, out: Shape3) -> Array2<f64> {
    let (batch, c, h, w) = x.dim();
    let (ho, wo) = (out.height, out.width);
    let ncol = batch * ho * wo;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = vec![0.0; c * k * k * ncol];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..batch {
                    let src = &xs[(b * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..][..w];
                        let drow = &mut dst[(b * ho + oy) * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncol), cols).expect("sized above")
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    batch: usize,
    input: Shape3,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (c, h, w) = (input.channels, input.height, input.width);
    let ncol = batch * ho * wo;
    let dc = dcols.as_standard_layout();
    let dc = dc.as_slice().expect("standard layout");
    let mut dx = Tensor::zeros((batch, c, h, w));
    let d = dx.as_slice_mut().expect("fresh tensor");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dc[row * ncol..(row + 1) * ncol];
                for b in 0..batch {
                    let dst = &mut d[(b * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(b * ho + oy) * wo..][..wo];
                        let drow = &mut dst[iy as usize * w..][..w];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_pool(x: &Tensor, size: usize, out: Shape3) -> (Tensor, Vec<usize>) {
    let (batch, c, h, w) = x.dim();
    let (ho, wo) = (out.height, out.width);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut y = Tensor::zeros((batch, c, ho, wo));
    let mut argmax = Vec::with_capacity(batch * c * ho * wo);
    let ys = y.as_slice_mut().expect("fresh tensor");
    let mut n = 0;
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                }
                ys[n] = xs[best];
                argmax.push(best);
                n += 1;
            }
        }
    }
    (y, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as a reference.
    fn conv_reference(layer: &Layer, x: &Tensor) -> Tensor {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = *layer.spec()
        else {
            unreachable!()
        };
        let out = layer.spec().output_shape(Shape3::of(x)).unwrap();
        let (b, _, h, w) = x.dim();
        Tensor::from_shape_fn((b, out_channels, out.height, out.width), |(n, o, oy, ox)| {
            let mut acc = layer.bias()[o];
            for c in 0..in_channels {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let wi = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                            acc += layer.weight()[wi] * x[[n, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (spec, dims) in [
            (LayerSpec::conv(2, 3, 3, 1), (2, 2, 5, 6)),
            (LayerSpec::conv(1, 4, 5, 2), (1, 1, 7, 7)),
            (
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                },
                (3, 3, 7, 9),
            ),
        ] {
            let layer = Layer::init(spec, &mut rng);
            let x = random_tensor(&mut rng, dims);
            let (y, _) = layer.forward(&x, false).unwrap();
            let r = conv_reference(&layer, &x);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn scalar_loss(y: &Tensor, probe: &Tensor) -> f64 {
        (y * probe).sum()
    }

    /// Checks input and parameter gradients of `layer` against central differences.
    fn check_gradients(mut layer: Layer, dims: (usize, usize, usize, usize), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, dims);
        let (y, cache) = layer.forward(&x, true).unwrap();
        let probe = random_tensor(&mut rng, y.dim());
        let (dx, dparams) = layer
            .backward(cache.as_ref().unwrap(), &probe, true, true)
            .unwrap();
        let dx = dx.unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fp = scalar_loss(&layer.forward(&xp, false).unwrap().0, &probe);
            let fm = scalar_loss(&layer.forward(&xm, false).unwrap().0, &probe);
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[i]).abs() < 1e-6, "input grad {i}");
        }
        for p in 0..dparams.len() {
            for i in 0..dparams[p].len() {
                let orig = layer.params()[p][i];
                layer.params_mut()[p][i] = orig + eps;
                let fp = scalar_loss(&layer.forward(&x, false).unwrap().0, &probe);
                layer.params_mut()[p][i] = orig - eps;
                let fm = scalar_loss(&layer.forward(&x, false).unwrap().0, &probe);
                layer.params_mut()[p][i] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - dparams[p][i]).abs() < 1e-6, "param {p}[{i}]");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check_gradients(Layer::init(LayerSpec::conv(2, 3, 3, 1), &mut rng), (2, 2, 5, 4), 1);
        check_gradients(
            Layer::init(
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
                &mut rng,
            ),
            (2, 1, 6, 6),
            2,
        );
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        check_gradients(Layer::init(LayerSpec::linear(12, 5), &mut rng), (3, 3, 2, 2), 4);
    }

    #[test]
    fn pool_and_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        check_gradients(Layer::init(LayerSpec::MaxPool2d { size: 2 }, &mut rng), (2, 2, 4, 5), 5);
        check_gradients(Layer::init(LayerSpec::Relu, &mut rng), (2, 2, 3, 3), 6);
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let spec = LayerSpec::MaxPool2d { size: 2 };
        assert_eq!(
            spec.output_shape(Shape3::new(3, 5, 7)).unwrap(),
            Shape3::new(3, 2, 3)
        );
    }

    #[test]
    fn shape_errors_are_reported() {
        let err = LayerSpec::conv(3, 6, 5, 0)
            .output_shape(Shape3::new(1, 28, 28))
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(LayerSpec::linear(10, 2)
            .output_shape(Shape3::new(2, 2, 2))
            .is_err());
    }

    #[test]
    fn conv_param_count() {
        assert_eq!(LayerSpec::conv(1, 6, 5, 0).param_count(), 5 * 5 * 6 + 6);
        assert_eq!(LayerSpec::Relu.param_count(), 0);
    }
}
