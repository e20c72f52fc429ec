use std::fmt;
use std::str::FromStr;

use super::{flatten, output_shape, Layer, LayerKind};
use crate::error::{Result, SflError};
use crate::rng::CounterRng;
use crate::tensor::{ParamVector, Tensor};

/// Names of the built-in desk-scale architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `input -> 64 -> 32 -> C`, ReLU between dense layers.
    Mlp,
    /// Conv 8, Conv 16, Conv 16, Conv 32 (each + ReLU), GAP, Dense to C.
    CnnMini,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::CnnMini => "cnn-mini",
        }
    }

    /// How many split labels the built model offers.
    pub fn split_positions(self) -> usize {
        match self {
            ModelKind::Mlp => 2,
            ModelKind::CnnMini => 4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "cnn-mini" | "cnn_mini" | "cnn" => Ok(ModelKind::CnnMini),
            other => Err(SflError::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

/// Split label `V_i`: cut after the i-th convolution block (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SplitPosition(pub usize);

impl fmt::Display for SplitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

impl FromStr for SplitPosition {
    type Err = SflError;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches(['V', 'v']);
        match digits.parse::<usize>() {
            Ok(i) if i >= 1 => Ok(SplitPosition(i)),
            _ => Err(SflError::InvalidArgument(format!("bad split position `{s}`"))),
        }
    }
}

/// A full network with a known per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

fn he_uniform(rng: &mut CounterRng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn dense_layer(rng: &mut CounterRng, out: usize, inp: usize) -> Layer {
    Layer::Dense {
        weight: he_uniform(rng, &[out, inp], inp),
        bias: Tensor::zeros(&[out]),
    }
}

fn conv_layer(rng: &mut CounterRng, out: usize, inp: usize) -> Layer {
    Layer::Conv2d {
        weight: he_uniform(rng, &[out, inp, 3, 3], inp * 9),
        bias: Tensor::zeros(&[out]),
    }
}

impl Model {
    /// Wraps explicit layers after checking that their shapes compose.
    pub fn from_layers(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut batched = vec![1];
        batched.extend_from_slice(&input_shape);
        output_shape(&layers, &batched)?;
        Ok(Self {
            layers,
            input_shape,
        })
    }

    /// He-uniform weights, zero biases, drawn from `rng` in layer order.
    pub fn build(
        kind: ModelKind,
        input_shape: &[usize],
        classes: usize,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let layers = match kind {
            ModelKind::Mlp => {
                let d: usize = input_shape.iter().product();
                if input_shape.len() != 1 {
                    return Err(SflError::InvalidArgument(format!(
                        "mlp expects flat inputs, got sample shape {input_shape:?}"
                    )));
                }
                vec![
                    dense_layer(rng, 64, d),
                    Layer::Relu,
                    dense_layer(rng, 32, 64),
                    Layer::Relu,
                    dense_layer(rng, classes, 32),
                ]
            }
            ModelKind::CnnMini => {
                if input_shape.len() != 3 {
                    return Err(SflError::InvalidArgument(format!(
                        "cnn-mini expects (channels, h, w) inputs, got {input_shape:?}"
                    )));
                }
                let mut layers = Vec::new();
                let mut in_ch = input_shape[0];
                for out_ch in [8, 16, 16, 32] {
                    layers.push(conv_layer(rng, out_ch, in_ch));
                    layers.push(Layer::Relu);
                    in_ch = out_ch;
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(dense_layer(rng, classes, in_ch));
                layers
            }
        };
        Self::from_layers(layers, input_shape.to_vec())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> ParamVector {
        flatten(&self.layers)
    }

    /// Layer indices that a split label can refer to: every convolution, or
    /// for convolution-free models every dense layer except the output one.
    fn split_anchors(&self) -> Vec<usize> {
        let convs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == LayerKind::Conv2d)
            .map(|(i, _)| i)
            .collect();
        if !convs.is_empty() {
            return convs;
        }
        let mut dense: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == LayerKind::Dense)
            .map(|(i, _)| i)
            .collect();
        dense.pop();
        dense
    }

    pub fn split_positions(&self) -> usize {
        self.split_anchors().len()
    }

    /// Cuts after the i-th anchor layer and its trailing ReLU, if any.
    pub fn split_at(&self, position: SplitPosition) -> Result<SplitModel> {
        let anchors = self.split_anchors();
        let i = position.0;
        if i == 0 || i > anchors.len() {
            return Err(SflError::InvalidSplit {
                position: i,
                available: anchors.len(),
            });
        }
        let mut cut = anchors[i - 1] + 1;
        if self.layers.get(cut).map(Layer::kind) == Some(LayerKind::Relu) {
            cut += 1;
        }
        SplitModel::new(self.layers.clone(), cut, self.input_shape.clone())
    }
}

/// Ordered layers plus a cut index: `bottom = layers[..cut]`, `top = layers[cut..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    layers: Vec<Layer>,
    cut: usize,
    input_shape: Vec<usize>,
}

impl SplitModel {
    pub fn new(layers: Vec<Layer>, cut: usize, input_shape: Vec<usize>) -> Result<Self> {
        if cut < 1 || cut >= layers.len() {
            return Err(SflError::InvalidArgument(format!(
                "cut {cut} outside [1, {}]",
                layers.len().saturating_sub(1)
            )));
        }
        let mut batched = vec![1];
        batched.extend_from_slice(&input_shape);
        output_shape(&layers, &batched)?;
        Ok(Self {
            layers,
            cut,
            input_shape,
        })
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn bottom(&self) -> &[Layer] {
        &self.layers[..self.cut]
    }

    pub fn top(&self) -> &[Layer] {
        &self.layers[self.cut..]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample shape of the smashed data.
    pub fn smashed_shape(&self) -> Vec<usize> {
        let mut batched = vec![1];
        batched.extend_from_slice(&self.input_shape);
        let mut shape = output_shape(self.bottom(), &batched).expect("validated at construction");
        shape.remove(0);
        shape
    }

    pub fn bottom_params(&self) -> ParamVector {
        flatten(self.bottom())
    }

    pub fn top_params(&self) -> ParamVector {
        flatten(self.top())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, predict};

    fn cnn() -> Model {
        let mut rng = CounterRng::new(1, 0);
        Model::build(ModelKind::CnnMini, &[1, 8, 8], 10, &mut rng).unwrap()
    }

    #[test]
    fn v3_cuts_after_third_conv_block() {
        let model = cnn();
        let split = model.split_at(SplitPosition(3)).unwrap();
        let kinds: Vec<LayerKind> = split.bottom().iter().map(Layer::kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == LayerKind::Conv2d).count(), 3);
        assert_eq!(split.bottom().last().unwrap().kind(), LayerKind::Relu);
        assert_eq!(split.top()[0].kind(), LayerKind::Conv2d);
        assert_eq!(split.smashed_shape(), vec![16, 8, 8]);
    }

    #[test]
    fn split_beyond_conv_count_rejected() {
        assert!(matches!(
            cnn().split_at(SplitPosition(5)),
            Err(SflError::InvalidSplit { position: 5, available: 4 })
        ));
    }

    #[test]
    fn every_split_composes_bitwise() {
        let model = cnn();
        let mut rng = CounterRng::new(9, 9);
        let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|_| rng.normal()).collect()).unwrap();
        let full = predict(model.layers(), &x).unwrap();
        for i in 1..=4 {
            let split = model.split_at(SplitPosition(i)).unwrap();
            let (mid, _) = forward(split.bottom(), &x).unwrap();
            let out = predict(split.top(), &mid).unwrap();
            assert_eq!(out, full, "V{i}");
        }
    }

    #[test]
    fn mlp_split_anchors_skip_output_layer() {
        let mut rng = CounterRng::new(1, 0);
        let model = Model::build(ModelKind::Mlp, &[64], 10, &mut rng).unwrap();
        assert_eq!(model.split_positions(), 2);
        assert_eq!(model.split_at(SplitPosition(1)).unwrap().cut(), 2);
        assert!(model.split_at(SplitPosition(3)).is_err());
    }

    #[test]
    fn parses_labels() {
        assert_eq!("V3".parse::<SplitPosition>().unwrap(), SplitPosition(3));
        assert_eq!("2".parse::<SplitPosition>().unwrap(), SplitPosition(2));
        assert!("V0".parse::<SplitPosition>().is_err());
        assert_eq!("cnn-mini".parse::<ModelKind>().unwrap(), ModelKind::CnnMini);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = cnn();
        let b = cnn();
        assert_eq!(a, b);
        for layer in a.layers() {
            if let Some((_, bias)) = layer.params() {
                assert!(bias.iter().all(|&v| v == 0.0));
            }
        }
    }
}
