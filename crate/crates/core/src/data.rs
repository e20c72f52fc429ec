//! Datasets and Dirichlet non-IID partitioning. Image sets use the `SFLD` format.

use std::path::Path;

use crate::error::{Result, SflError};
use crate::rng::{domain, CounterRng};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFLD";
const HEADER_LEN: usize = 24;

/// Labelled samples. `features` has the sample index as leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// Checks that labels match the sample count, fall in `[0, classes)`, and
    /// that every class appears at least once.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.batch() != labels.len() {
            return Err(SflError::InvalidDataset(format!(
                "{} samples but {} labels",
                features.batch(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(SflError::LabelOutOfRange { label, classes });
        }
        let counts = class_counts(&labels, classes);
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(SflError::InvalidDataset(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Reinterprets every sample with a new per-sample shape.
    pub fn reshape_samples(self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Self {
            features: self.features.reshape(shape)?,
            ..self
        })
    }

    /// Features and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn subset_unchecked(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.gather(indices);
        Self {
            features,
            labels,
            classes: self.classes,
        }
    }
}

pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &y in labels {
        if y < classes {
            counts[y] += 1;
        }
    }
    counts
}

/// Gaussian blobs around random class means of norm `sqrt(d)`, so every
/// coordinate is O(1) regardless of the dimension.
///
/// Labels cycle `0, 1, .., C-1, 0, ..` so classes are balanced. Each
/// coordinate of a sample is `mean[label][j] + spread * N(0, 1)`.
pub fn synth_blobs(seed: u64, n: usize, d: usize, classes: usize, spread: f64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(SflError::InvalidArgument(format!(
            "need at least one sample per class: n={n}, C={classes}"
        )));
    }
    if d == 0 {
        return Err(SflError::InvalidArgument("feature dimension must be >= 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(SflError::InvalidArgument(format!("bad spread {spread}")));
    }
    let mut rng = CounterRng::for_domain(seed, domain::DATA, 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let scale = (d as f64).sqrt() / norm;
            v.into_iter().map(|x| x * scale).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for &m in &means[y] {
            data.push(m + spread * rng.normal());
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes)
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| SflError::Parse {
            offset,
            message: format!(
                "truncated header reading `{field}`: expected {} bytes, got {}",
                HEADER_LEN,
                bytes.len()
            ),
        })
}

/// Decodes the `SFLD` format: magic `SFLD`, big-endian u32 `n, channels,
/// height, width, classes`, then `n*c*h*w` pixel bytes and `n` label bytes.
/// Pixels are scaled to `[0, 1]`.
pub fn parse_image_set(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(SflError::Parse {
            offset: 0,
            message: "missing `SFLD` magic".into(),
        });
    }
    let names = ["n", "channels", "height", "width", "classes"];
    let mut fields = [0usize; 5];
    for (i, name) in names.iter().enumerate() {
        let offset = 4 + 4 * i;
        let v = read_u32(bytes, offset, name)? as usize;
        if v == 0 {
            return Err(SflError::Parse {
                offset,
                message: format!("`{name}` must be positive"),
            });
        }
        fields[i] = v;
    }
    let [n, c, h, w, classes] = fields;
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| SflError::Parse {
            offset: 4,
            message: "dimension product overflows".into(),
        })?;
    let expected = HEADER_LEN + pixels + n;
    if bytes.len() != expected {
        return Err(SflError::Parse {
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes, got {}", bytes.len()),
        });
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + pixels]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let label_start = HEADER_LEN + pixels;
    let labels: Vec<usize> = bytes[label_start..].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&y| y >= classes) {
        return Err(SflError::Parse {
            offset: label_start + pos,
            message: format!("label {} out of range for {classes} classes", labels[pos]),
        });
    }
    let features = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(features, labels, classes)
}

pub fn load_image_set(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_image_set(&std::fs::read(path)?)
}

/// Encodes raw pixels and labels in the `SFLD` layout.
pub fn encode_image_set(
    dims: [u32; 4],
    classes: u32,
    pixels: &[u8],
    labels: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + pixels.len() + labels.len());
    out.extend_from_slice(MAGIC);
    for v in dims.iter().chain(std::iter::once(&classes)) {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out.extend_from_slice(labels);
    out
}

/// Global train/test split.
#[derive(Debug, Clone)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// Stratified hold-out: per class, `round(test_fraction * n_c)` shuffled
/// samples go to the test set, always leaving one in training.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<TrainTest> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SflError::InvalidArgument(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut rng = CounterRng::for_domain(seed, domain::SPLIT, 0);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..data.classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let take = ((test_fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
        test_idx.extend_from_slice(&idx[..take]);
        train_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if test_idx.is_empty() {
        return Err(SflError::InvalidDataset("test split is empty".into()));
    }
    Ok(TrainTest {
        train: data.subset_unchecked(&train_idx),
        test: data.subset_unchecked(&test_idx),
    })
}

/// Client id -> sample indices. Index lists are disjoint, ascending, and
/// non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<Vec<usize>>,
}

impl Partition {
    /// A hand-made partition. Index lists are sorted; they must be disjoint.
    pub fn from_assignment(mut assignment: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for list in &mut assignment {
            list.sort_unstable();
            if let Some(&dup) = list.iter().find(|&&i| !seen.insert(i)) {
                return Err(SflError::InvalidArgument(format!("sample {dup} assigned twice")));
            }
        }
        Ok(Self { assignment })
    }

    pub fn clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn indices(&self, client: usize) -> &[usize] {
        &self.assignment[client]
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn histogram(&self, client: usize, labels: &[usize], classes: usize) -> Vec<usize> {
        let ys: Vec<usize> = self.assignment[client].iter().map(|&i| labels[i]).collect();
        class_counts(&ys, classes)
    }
}

/// Per class, draws `p ~ Dir(alpha * 1_K)` and splits that class's shuffled
/// indices at `round(cumsum(p) * n_c)`. Clients left empty receive one
/// sample from the currently largest client (lowest id on ties).
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(SflError::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SflError::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if clients > labels.len() {
        return Err(SflError::InvalidArgument(format!(
            "{clients} clients but only {} samples",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = CounterRng::for_domain(seed, domain::PARTITION, 0);
    let mut assignment = vec![Vec::new(); clients];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let p = rng.dirichlet(alpha, clients);
        let n_c = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, pk) in p.iter().enumerate() {
            cum += pk;
            let end = if k + 1 == clients {
                n_c
            } else {
                ((cum * n_c as f64).round() as usize).clamp(start, n_c)
            };
            assignment[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("clients >= 1");
        let moved = assignment[largest].pop().expect("largest client is non-empty");
        assignment[empty].push(moved);
    }
    for list in &mut assignment {
        list.sort_unstable();
    }
    Ok(Partition { assignment })
}

/// Total-variation distance between two histograms after normalization.
pub fn total_variation(p: &[usize], q: &[f64]) -> f64 {
    let total: usize = p.iter().sum();
    let qs: f64 = q.iter().sum();
    if total == 0 || qs == 0.0 {
        return 1.0;
    }
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a as f64 / total as f64 - b / qs).abs())
        .sum::<f64>()
}
