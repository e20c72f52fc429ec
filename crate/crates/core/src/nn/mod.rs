//! A small from-scratch network stack with manual backpropagation.
//!
//! Sub-models are plain layer slices, so the bottom and top halves of a
//! [`SplitModel`] run through the same code as the unsplit network.

mod layer;
mod model;

pub use layer::{Layer, LayerKind};
pub use model::{Model, ModelKind, SplitModel, SplitPosition};

use crate::error::{Result, SflError};
use crate::tensor::{ParamVector, Tensor};

/// Inputs seen by each layer during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    output_shape: Vec<usize>,
}

impl ForwardCache {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Runs `x` through `layers`. An empty slice is the identity.
pub fn forward(layers: &[Layer], x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let next = layer.forward(i, &cur)?;
        inputs.push(cur);
        cur = next;
    }
    let output_shape = cur.shape().to_vec();
    Ok((
        cur,
        ForwardCache {
            inputs,
            output_shape,
        },
    ))
}

/// Forward pass without keeping intermediate activations.
pub fn predict(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        cur = layer.forward(i, &cur)?;
    }
    Ok(cur)
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// Gradient w.r.t. the input (summed-loss convention), if requested.
    pub input: Option<Tensor>,
    /// Mean-loss parameter gradients in canonical layout.
    pub params: ParamVector,
}

/// Backpropagates `grad_out` (gradient of the summed per-sample loss w.r.t.
/// the forward output) through `layers`.
pub fn backward(
    layers: &[Layer],
    cache: &ForwardCache,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<Backward> {
    if grad_out.shape() != cache.output_shape.as_slice() {
        return Err(SflError::ShapeMismatch {
            layer: layers.len().saturating_sub(1),
            kind: layers.last().map(|l| l.kind().name()).unwrap_or("identity"),
            expected: format!("{:?}", cache.output_shape),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let mut per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; layers.len()];
    let mut grad = grad_out.clone();
    for i in (0..layers.len()).rev() {
        let want_input = need_input || i > 0;
        let lg = layers[i].backward(&cache.inputs[i], &grad, want_input);
        per_layer[i] = lg.params;
        if let Some(g) = lg.input {
            grad = g;
        }
    }
    let mut flat = Vec::with_capacity(param_count(layers));
    for (w, b) in per_layer.into_iter().flatten() {
        flat.extend(w);
        flat.extend(b);
    }
    Ok(Backward {
        input: need_input.then_some(grad),
        params: ParamVector(flat),
    })
}

pub fn param_count(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

/// Canonical flattening: layers in order, weights then biases, row-major.
pub fn flatten(layers: &[Layer]) -> ParamVector {
    let mut out = Vec::with_capacity(param_count(layers));
    for (w, b) in layers.iter().filter_map(Layer::params) {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    ParamVector(out)
}

/// Inverse of [`flatten`].
pub fn load_params(layers: &mut [Layer], params: &ParamVector) -> Result<()> {
    let expected = param_count(layers);
    if params.len() != expected {
        return Err(SflError::LengthMismatch {
            expected,
            actual: params.len(),
        });
    }
    let mut offset = 0;
    for (w, b) in layers.iter_mut().filter_map(Layer::params_mut) {
        w.copy_from_slice(&params.0[offset..offset + w.len()]);
        offset += w.len();
        b.copy_from_slice(&params.0[offset..offset + b.len()]);
        offset += b.len();
    }
    Ok(())
}

/// A copy of `layers` carrying `params`.
pub fn with_params(layers: &[Layer], params: &ParamVector) -> Result<Vec<Layer>> {
    let mut out = layers.to_vec();
    load_params(&mut out, params)?;
    Ok(out)
}

/// Output shape of `layers` for a batched input shape.
pub fn output_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(i, &shape)?;
    }
    Ok(shape)
}

/// Mean softmax cross-entropy over the batch and the per-sample logit
/// gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(SflError::InvalidArgument(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(SflError::LabelOutOfRange { label, classes });
    }
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() + max - row[y];
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            grad.push(if c == y { p - 1.0 } else { p });
        }
    }
    Ok((
        total / labels.len() as f64,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

/// Everything the main server derives from one client's smashed batch.
#[derive(Debug, Clone)]
pub struct TopGrads {
    pub loss: f64,
    /// Gradient of the summed per-sample loss w.r.t. the smashed data; this is
    /// what travels back to the client.
    pub smashed: Tensor,
    /// Mean-loss gradient of the top parameters.
    pub params: ParamVector,
}

pub fn loss_and_grads_top(top: &[Layer], smashed: &Tensor, labels: &[usize]) -> Result<TopGrads> {
    if smashed.batch() != labels.len() {
        return Err(SflError::InvalidArgument(format!(
            "{} smashed samples but {} labels",
            smashed.batch(),
            labels.len()
        )));
    }
    let (logits, cache) = forward(top, smashed)?;
    let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
    let back = backward(top, &cache, &grad_logits, true)?;
    Ok(TopGrads {
        loss,
        smashed: back.input.expect("input gradient requested"),
        params: back.params,
    })
}

/// Bottom-model parameter gradient given the server's smashed-data gradient.
pub fn grads_bottom(bottom: &[Layer], batch: &Tensor, grad_from_server: &Tensor) -> Result<ParamVector> {
    let (_, cache) = forward(bottom, batch)?;
    grads_bottom_cached(bottom, &cache, grad_from_server)
}

/// Same as [`grads_bottom`] reusing a forward cache.
pub fn grads_bottom_cached(
    bottom: &[Layer],
    cache: &ForwardCache,
    grad_from_server: &Tensor,
) -> Result<ParamVector> {
    Ok(backward(bottom, cache, grad_from_server, false)?.params)
}

/// Top-1 predictions from a logit matrix. Ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v.total_cmp(&row[best]).is_gt() {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn empty_part_is_identity() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let (y, _) = forward(&[], &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = t(&[2, 5], &[0.7; 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = t(&[1, 3], &[0.0; 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(SflError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn zero_top_weights_give_zero_smashed_grad() {
        let top = vec![
            Layer::dense(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4])).unwrap(),
            Layer::Relu,
            Layer::dense(Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])).unwrap(),
        ];
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let g = loss_and_grads_top(&top, &x, &[0, 1]).unwrap();
        assert!(g.smashed.data().iter().all(|&v| v == 0.0));
        assert!((g.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_bottom_grads() {
        let bottom = vec![
            Layer::dense(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), t(&[2], &[0.5, 0.5])).unwrap(),
            Layer::Relu,
        ];
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = grads_bottom(&bottom, &x, &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(g, ParamVector::zeros(6));
        assert!(grads_bottom(&bottom, &x, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn flatten_load_round_trip() {
        let mut layers = vec![
            Layer::dense(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), t(&[2], &[5.0, 6.0])).unwrap(),
            Layer::Relu,
            Layer::dense(t(&[1, 2], &[7.0, 8.0]), t(&[1], &[9.0])).unwrap(),
        ];
        let p = flatten(&layers);
        assert_eq!(p.0, (1..=9).map(f64::from).collect::<Vec<_>>());
        let q = ParamVector((10..19).map(f64::from).collect());
        load_params(&mut layers, &q).unwrap();
        assert_eq!(flatten(&layers), q);
        assert!(load_params(&mut layers, &ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let logits = t(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}
