//! Layer kinds with hand-written forward and backward passes.
//!
//! Backward passes take the gradient of the *summed* per-sample loss with
//! respect to the layer output and return the same quantity for the layer
//! input. Parameter gradients are divided by the batch size, so they are
//! gradients of the *mean* loss.

use crate::error::{Result, SflError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "Dense",
            LayerKind::Conv2d => "Conv2D",
            LayerKind::Relu => "ReLU",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
        }
    }
}

/// One network layer. Convolutions are 3x3, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight` is `(out, in)`, `bias` is `(out)`.
    Dense { weight: Tensor, bias: Tensor },
    /// `weight` is `(out_ch, in_ch, 3, 3)`, `bias` is `(out_ch)`.
    Conv2d { weight: Tensor, bias: Tensor },
    Relu,
    GlobalAvgPool,
}

pub(crate) struct LayerGrad {
    pub input: Option<Tensor>,
    pub params: Option<(Vec<f64>, Vec<f64>)>,
}

impl Layer {
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(SflError::InvalidArgument(format!(
                "dense layer needs weight (out, in) and bias (out), got {:?} and {:?}",
                ws,
                bias.shape()
            )));
        }
        Ok(Layer::Dense { weight, bias })
    }

    pub fn conv2d(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || bias.shape() != [ws[0]] {
            return Err(SflError::InvalidArgument(format!(
                "conv layer needs weight (out, in, 3, 3) and bias (out), got {:?} and {:?}",
                ws,
                bias.shape()
            )));
        }
        Ok(Layer::Conv2d { weight, bias })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                Some((weight.data_mut(), bias.data_mut()))
            }
            _ => None,
        }
    }

    pub(crate) fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                Some((weight.data(), bias.data()))
            }
            _ => None,
        }
    }

    /// Output shape for a batched input shape, or a mismatch error.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: String| SflError::ShapeMismatch {
            layer: index,
            kind: self.kind().name(),
            expected,
            actual: format!("{input:?}"),
        };
        match self {
            Layer::Dense { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input.len() != 2 || input[1] != inp {
                    return Err(mismatch(format!("(batch, {inp})")));
                }
                Ok(vec![input[0], out])
            }
            Layer::Conv2d { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input.len() != 4 || input[1] != inp {
                    return Err(mismatch(format!("(batch, {inp}, h, w)")));
                }
                Ok(vec![input[0], out, input[2], input[3]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::GlobalAvgPool => {
                if input.len() != 4 {
                    return Err(mismatch("(batch, c, h, w)".to_string()));
                }
                Ok(vec![input[0], input[1]])
            }
        }
    }

    pub(crate) fn forward(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(index, x.shape())?;
        let out = match self {
            Layer::Dense { weight, bias } => dense_forward(weight, bias, x, out_shape),
            Layer::Conv2d { weight, bias } => conv_forward(weight, bias, x, out_shape),
            Layer::Relu => Tensor::from_parts(
                out_shape,
                x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            ),
            Layer::GlobalAvgPool => {
                let plane = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / plane as f64;
                let data = x
                    .data()
                    .chunks_exact(plane)
                    .map(|p| p.iter().sum::<f64>() * inv)
                    .collect();
                Tensor::from_parts(out_shape, data)
            }
        };
        Ok(out)
    }

    /// `x` is the input seen in the forward pass, `grad` the gradient
    /// w.r.t. this layer's output.
    pub(crate) fn backward(&self, x: &Tensor, grad: &Tensor, need_input: bool) -> LayerGrad {
        match self {
            Layer::Dense { weight, .. } => dense_backward(weight, x, grad, need_input),
            Layer::Conv2d { weight, .. } => conv_backward(weight, x, grad, need_input),
            Layer::Relu => LayerGrad {
                input: need_input.then(|| {
                    Tensor::from_parts(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                            .collect(),
                    )
                }),
                params: None,
            },
            Layer::GlobalAvgPool => LayerGrad {
                input: need_input.then(|| {
                    let plane = x.shape()[2] * x.shape()[3];
                    let inv = 1.0 / plane as f64;
                    let mut data = Vec::with_capacity(x.len());
                    for &g in grad.data() {
                        data.extend(std::iter::repeat(g * inv).take(plane));
                    }
                    Tensor::from_parts(x.shape().to_vec(), data)
                }),
                params: None,
            },
        }
    }
}

fn dense_forward(weight: &Tensor, bias: &Tensor, x: &Tensor, out_shape: Vec<usize>) -> Tensor {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let b = bias.data();
    let mut y = Vec::with_capacity(x.batch() * out);
    for row in x.data().chunks_exact(inp) {
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let dot: f64 = wr.iter().zip(row).map(|(a, c)| a * c).sum();
            y.push(b[o] + dot);
        }
    }
    Tensor::from_parts(out_shape, y)
}

fn dense_backward(weight: &Tensor, x: &Tensor, grad: &Tensor, need_input: bool) -> LayerGrad {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let batch = x.batch();
    let w = weight.data();
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    let mut gx = if need_input {
        vec![0.0; batch * inp]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let xr = x.sample(n);
        let gr = grad.sample(n);
        for o in 0..out {
            let g = gr[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let gwr = &mut gw[o * inp..(o + 1) * inp];
            for (acc, &xv) in gwr.iter_mut().zip(xr) {
                *acc += g * xv;
            }
            if need_input {
                let gxr = &mut gx[n * inp..(n + 1) * inp];
                for (acc, &wv) in gxr.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *acc += g * wv;
                }
            }
        }
    }
    let inv = 1.0 / batch as f64;
    gw.iter_mut().for_each(|v| *v *= inv);
    gb.iter_mut().for_each(|v| *v *= inv);
    LayerGrad {
        input: need_input.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        params: Some((gw, gb)),
    }
}

/// Valid output range along one axis for kernel offset `k` in {0,1,2}
/// with padding 1: output index `o` reads input index `o + k - 1`.
#[inline]
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi)
}

fn conv_forward(weight: &Tensor, bias: &Tensor, x: &Tensor, out_shape: Vec<usize>) -> Tensor {
    let (oc_n, ic_n) = (weight.shape()[0], weight.shape()[1]);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let wt = weight.data();
    let b = bias.data();
    let batch = x.batch();
    let mut y = vec![0.0; batch * oc_n * plane];
    for n in 0..batch {
        let xs = x.sample(n);
        for oc in 0..oc_n {
            let yp = &mut y[(n * oc_n + oc) * plane..(n * oc_n + oc + 1) * plane];
            yp.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..ic_n {
                let xp = &xs[ic * plane..(ic + 1) * plane];
                let kbase = (oc * ic_n + ic) * 9;
                for kh in 0..3 {
                    let (r0, r1) = valid_range(kh, h);
                    for kw in 0..3 {
                        let k = wt[kbase + kh * 3 + kw];
                        let (c0, c1) = valid_range(kw, w);
                        for r in r0..r1 {
                            let ir = r + kh - 1;
                            let yrow = &mut yp[r * w + c0..r * w + c1];
                            let xrow = &xp[ir * w + c0 + kw - 1..ir * w + c1 + kw - 1];
                            for (acc, &xv) in yrow.iter_mut().zip(xrow) {
                                *acc += k * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(out_shape, y)
}

fn conv_backward(weight: &Tensor, x: &Tensor, grad: &Tensor, need_input: bool) -> LayerGrad {
    let (oc_n, ic_n) = (weight.shape()[0], weight.shape()[1]);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let batch = x.batch();
    let wt = weight.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; oc_n];
    let mut gx = if need_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let xs = x.sample(n);
        let gs = grad.sample(n);
        for oc in 0..oc_n {
            let gp = &gs[oc * plane..(oc + 1) * plane];
            gb[oc] += gp.iter().sum::<f64>();
            for ic in 0..ic_n {
                let xp = &xs[ic * plane..(ic + 1) * plane];
                let kbase = (oc * ic_n + ic) * 9;
                for kh in 0..3 {
                    let (r0, r1) = valid_range(kh, h);
                    for kw in 0..3 {
                        let (c0, c1) = valid_range(kw, w);
                        let mut acc_w = 0.0;
                        for r in r0..r1 {
                            let ir = r + kh - 1;
                            let grow = &gp[r * w + c0..r * w + c1];
                            let xrow = &xp[ir * w + c0 + kw - 1..ir * w + c1 + kw - 1];
                            acc_w += grow.iter().zip(xrow).map(|(g, v)| g * v).sum::<f64>();
                        }
                        gw[kbase + kh * 3 + kw] += acc_w;
                        if need_input {
                            let k = wt[kbase + kh * 3 + kw];
                            let gxp = &mut gx[(n * ic_n + ic) * plane..(n * ic_n + ic + 1) * plane];
                            for r in r0..r1 {
                                let ir = r + kh - 1;
                                let grow = &gp[r * w + c0..r * w + c1];
                                let gxrow =
                                    &mut gxp[ir * w + c0 + kw - 1..ir * w + c1 + kw - 1];
                                for (acc, &g) in gxrow.iter_mut().zip(grow) {
                                    *acc += k * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch as f64;
    gw.iter_mut().for_each(|v| *v *= inv);
    gb.iter_mut().for_each(|v| *v *= inv);
    LayerGrad {
        input: need_input.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        params: Some((gw, gb)),
    }
}
