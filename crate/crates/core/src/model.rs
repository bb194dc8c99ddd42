//! Small differentiable classifiers with exact per-sample gradients, plus the
//! synthetic blob generator and CSV ingestion used in place of image data.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Global,
    /// 1-based hospital index.
    Hospital(usize),
}

/// An immutable, non-empty collection of samples with a fixed feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    id: DatasetId,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize, id: DatasetId) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("dataset must contain at least one sample");
        };
        if num_classes < 2 {
            return invalid(format!("need at least 2 classes, got {num_classes}"));
        }
        let num_features = first.features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != num_features {
                return invalid(format!(
                    "sample {i} has {} features, expected {num_features}",
                    s.features.len()
                ));
            }
            if s.label >= num_classes {
                return invalid(format!("sample {i} has label {} ≥ {num_classes}", s.label));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return invalid(format!("sample {i} has a non-finite feature"));
            }
        }
        Ok(Self {
            samples,
            id,
            num_features,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn id(&self) -> DatasetId {
        self.id
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Splits into `k` contiguous shards whose sizes differ by at most one
    /// (the first `len % k` shards get the extra sample). Shard `i` is tagged
    /// as hospital `i + 1`.
    pub fn partition(&self, k: usize) -> Result<Vec<Dataset>> {
        if k == 0 || k > self.len() {
            return invalid(format!(
                "cannot split {} samples into {k} shards",
                self.len()
            ));
        }
        let base = self.len() / k;
        let extra = self.len() % k;
        let mut out = Vec::with_capacity(k);
        let mut start = 0;
        for i in 0..k {
            let size = base + usize::from(i < extra);
            out.push(Dataset {
                samples: self.samples[start..start + size].to_vec(),
                id: DatasetId::Hospital(i + 1),
                num_features: self.num_features,
                num_classes: self.num_classes,
            });
            start += size;
        }
        Ok(out)
    }

    /// First `n` samples and the rest, both tagged global.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return invalid(format!("split point {n} leaves an empty side"));
        }
        let make = |s: &[LabeledSample]| Dataset {
            samples: s.to_vec(),
            id: DatasetId::Global,
            num_features: self.num_features,
            num_classes: self.num_classes,
        };
        Ok((make(&self.samples[..n]), make(&self.samples[n..])))
    }

    /// Header row, then one sample per line: float features followed by an
    /// integer label in the last column. `num_classes` defaults to
    /// `max label + 1` (at least 2).
    pub fn from_csv<R: Read>(reader: R, num_classes: Option<usize>, id: DatasetId) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut samples = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::InvalidArgument(format!("line {line}: {e}")))?;
            if record.len() < 2 {
                return invalid(format!(
                    "line {line}: need at least one feature and a label"
                ));
            }
            let parse_err = |col: usize, e: &dyn std::fmt::Display| {
                Error::InvalidArgument(format!("line {line}, column {}: {e}", col + 1))
            };
            let label_col = record.len() - 1;
            let label = record[label_col]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(label_col, &e))?;
            let features = (0..label_col)
                .map(|c| {
                    record[c]
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(c, &e))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(LabeledSample { features, label });
        }
        let classes = num_classes.unwrap_or_else(|| {
            samples
                .iter()
                .map(|s| s.label + 1)
                .max()
                .unwrap_or(0)
                .max(2)
        });
        Dataset::new(samples, classes, id)
    }
}

/// Gaussian class blobs with unit covariance. Class centers sit at
/// `separation/√2 · e_c` when there are at least as many features as classes
/// (pairwise center distance = `separation`), otherwise on random directions
/// of the same norm. Labels are balanced and shuffled.
pub fn synth_dataset(
    num_samples: usize,
    num_features: usize,
    num_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_samples == 0 || num_features == 0 {
        return invalid("synthetic dataset needs at least one sample and one feature");
    }
    if num_classes < 2 {
        return invalid(format!("need at least 2 classes, got {num_classes}"));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return invalid(format!(
            "separation {separation} must be finite and non-negative"
        ));
    }
    let mut rng = stream(seed, Stream::Dataset);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if num_classes <= num_features {
                let mut v = vec![0.0; num_features];
                v[c] = radius;
                v
            } else {
                let dir: Vec<f64> = (0..num_features)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = dir
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                dir.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut samples: Vec<LabeledSample> = (0..num_samples)
        .map(|i| {
            let label = i % num_classes;
            let features = centers[label]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            LabeledSample { features, label }
        })
        .collect();
    samples.shuffle(&mut rng);
    Dataset::new(samples, num_classes, DatasetId::Global)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Flat weights plus the ordered layer layout they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    shape: Vec<LayerShape>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, shape: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shape.iter().map(LayerShape::numel).sum();
        if values.len() != expected {
            return invalid(format!(
                "{} values do not match a shape holding {expected}",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("weight {i} is not finite"));
        }
        Ok(Self { values, shape })
    }

    pub fn zeros(shape: Vec<LayerShape>) -> Self {
        let n = shape.iter().map(LayerShape::numel).sum();
        Self {
            values: vec![0.0; n],
            shape,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[LayerShape] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values (checked).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.shape.clone())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// SHA-256 over the layout and the little-endian bit patterns of the weights.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.shape {
            h.update((layer.name.len() as u64).to_le_bytes());
            h.update(layer.name.as_bytes());
            for d in &layer.dims {
                h.update((*d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Gradient of one sample's loss, laid out like the model it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGradient(pub Vec<f64>);

impl PerSampleGradient {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Supported model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Multinomial logistic regression.
    Logistic { features: usize, classes: usize },
    /// One tanh hidden layer followed by a softmax output layer.
    Mlp {
        features: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn shape(&self) -> Vec<LayerShape> {
        match *self {
            Architecture::Logistic { features, classes } => vec![
                LayerShape::new("weight", &[classes, features]),
                LayerShape::new("bias", &[classes]),
            ],
            Architecture::Mlp {
                features,
                hidden,
                classes,
            } => vec![
                LayerShape::new("hidden.weight", &[hidden, features]),
                LayerShape::new("hidden.bias", &[hidden]),
                LayerShape::new("output.weight", &[classes, hidden]),
                LayerShape::new("output.bias", &[classes]),
            ],
        }
    }

    pub fn num_features(&self) -> usize {
        match *self {
            Architecture::Logistic { features, .. } | Architecture::Mlp { features, .. } => {
                features
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    /// Recovers the architecture from a parameter layout.
    pub fn of(model: &ModelParams) -> Result<Self> {
        let s = model.shape();
        let names: Vec<&str> = s.iter().map(|l| l.name.as_str()).collect();
        let arch = match names.as_slice() {
            ["weight", "bias"] if s[0].dims.len() == 2 => Architecture::Logistic {
                classes: s[0].dims[0],
                features: s[0].dims[1],
            },
            ["hidden.weight", "hidden.bias", "output.weight", "output.bias"]
                if s[0].dims.len() == 2 && s[2].dims.len() == 2 =>
            {
                Architecture::Mlp {
                    hidden: s[0].dims[0],
                    features: s[0].dims[1],
                    classes: s[2].dims[0],
                }
            }
            _ => return invalid("unrecognized model layout"),
        };
        if arch.shape() != s {
            return invalid("inconsistent layer dimensions");
        }
        Ok(arch)
    }

    /// Gaussian initialization with std `1/√fan_in` for weights and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let shape = self.shape();
        let mut values = Vec::with_capacity(shape.iter().map(LayerShape::numel).sum());
        for layer in &shape {
            if layer.dims.len() == 2 {
                let std = 1.0 / (layer.dims[1] as f64).sqrt();
                for _ in 0..layer.numel() {
                    let z: f64 = StandardNormal.sample(rng);
                    values.push(z * std);
                }
            } else {
                values.extend(std::iter::repeat(0.0).take(layer.numel()));
            }
        }
        ModelParams { values, shape }
    }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

/// `out = W x + b` with `W` row-major `[rows, cols]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Architecture {
    fn logits(&self, w: &[f64], x: &[f64], hidden_out: Option<&mut Vec<f64>>) -> Vec<f64> {
        match *self {
            Architecture::Logistic { features, classes } => {
                let (wm, b) = w.split_at(classes * features);
                let mut z = vec![0.0; classes];
                affine(wm, b, x, &mut z);
                z
            }
            Architecture::Mlp {
                features,
                hidden,
                classes,
            } => {
                let (w1, rest) = w.split_at(hidden * features);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let mut h = vec![0.0; hidden];
                affine(w1, b1, x, &mut h);
                h.iter_mut().for_each(|v| *v = v.tanh());
                let mut z = vec![0.0; classes];
                affine(w2, b2, &h, &mut z);
                if let Some(out) = hidden_out {
                    *out = h;
                }
                z
            }
        }
    }

    /// Cross-entropy loss and its exact gradient for one sample.
    fn sample_loss_grad(&self, w: &[f64], s: &LabeledSample) -> (f64, Vec<f64>) {
        let mut h = Vec::new();
        let mut logp = self.logits(w, &s.features, Some(&mut h));
        log_softmax_in_place(&mut logp);
        let loss = -logp[s.label];
        // dL/dz = softmax(z) - onehot(y)
        let mut dz: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        dz[s.label] -= 1.0;
        let x = &s.features;
        let mut grad = Vec::with_capacity(w.len());
        match *self {
            Architecture::Logistic { .. } => {
                for &g in &dz {
                    grad.extend(x.iter().map(|xi| g * xi));
                }
                grad.extend_from_slice(&dz);
            }
            Architecture::Mlp {
                features,
                hidden,
                classes,
            } => {
                let w2 =
                    &w[hidden * features + hidden..hidden * features + hidden + classes * hidden];
                let dh_pre: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let dh: f64 = (0..classes).map(|c| w2[c * hidden + j] * dz[c]).sum();
                        dh * (1.0 - h[j] * h[j])
                    })
                    .collect();
                for &g in &dh_pre {
                    grad.extend(x.iter().map(|xi| g * xi));
                }
                grad.extend_from_slice(&dh_pre);
                for &g in &dz {
                    grad.extend(h.iter().map(|hj| g * hj));
                }
                grad.extend_from_slice(&dz);
            }
        }
        (loss, grad)
    }
}

fn check_batch(arch: &Architecture, batch: &[LabeledSample]) -> Result<()> {
    for (i, s) in batch.iter().enumerate() {
        if s.features.len() != arch.num_features() {
            return invalid(format!(
                "sample {i} has {} features, model expects {}",
                s.features.len(),
                arch.num_features()
            ));
        }
        if s.label >= arch.num_classes() {
            return invalid(format!("sample {i} label {} out of range", s.label));
        }
    }
    Ok(())
}

/// Mean cross-entropy over `batch` and one exact gradient per sample.
pub fn loss_and_per_sample_grads(
    model: &ModelParams,
    batch: &[LabeledSample],
) -> Result<(f64, Vec<PerSampleGradient>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = Architecture::of(model)?;
    check_batch(&arch, batch)?;
    let mut total = 0.0;
    let grads = batch
        .iter()
        .map(|s| {
            let (loss, g) = arch.sample_loss_grad(model.values(), s);
            total += loss;
            PerSampleGradient(g)
        })
        .collect();
    Ok((total / batch.len() as f64, grads))
}

/// Mean cross-entropy only.
pub fn mean_loss(model: &ModelParams, batch: &[LabeledSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = Architecture::of(model)?;
    check_batch(&arch, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| {
            let mut z = arch.logits(model.values(), &s.features, None);
            log_softmax_in_place(&mut z);
            -z[s.label]
        })
        .sum();
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy (ties go to the lowest class index) and mean loss.
pub fn evaluate(model: &ModelParams, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let arch = Architecture::of(model)?;
    check_batch(&arch, data.samples())?;
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for s in data.samples() {
        let mut z = arch.logits(model.values(), &s.features, None);
        if argmax(&z) == s.label {
            correct += 1;
        }
        log_softmax_in_place(&mut z);
        total_loss -= z[s.label];
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: total_loss / n,
    })
}
