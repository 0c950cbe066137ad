//! Small feed-forward softmax classifiers.

use statrs::distribution::{Binomial, DiscreteCDF};

use super::DiagnosticsError;
use crate::dataio::checkpoint::Checkpoint;
use crate::model::{mlp, BoundLinear, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::training::adam_update;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    PooledEmbedding,
    Image,
}

/// Standardizes inputs, then fc+relu layers and a softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub kind: InputKind,
    pub classes: usize,
    pub input_mean: Vec<f32>,
    pub input_scale: Vec<f32>,
    pub layers: Vec<Linear<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOptions {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standardize each input feature with training-set statistics.
    pub standardize: bool,
}

impl ClassifierOptions {
    /// 784 → 256 → 128 → 10 on raw intensities.
    pub fn digits() -> Self {
        ClassifierOptions {
            hidden: [256, 128],
            epochs: 6,
            batch_size: 64,
            lr: 1e-3,
            standardize: false,
        }
    }

    pub fn sizes() -> Self {
        ClassifierOptions {
            hidden: [128, 64],
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            standardize: true,
        }
    }
}

impl Classifier {
    fn standardized(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.input_mean[j]) * self.input_scale[j];
        }
        out
    }

    /// Class probabilities for each row of `x`, `[n, classes]`.
    pub fn probabilities(&self, x: &Tensor<f32>) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let layers: Vec<BoundLinear> = self.layers.iter().map(|l| l.bind(&mut g)).collect();
        let input = g.constant(self.standardized(x));
        let logits = mlp(&mut g, &layers, input).expect("classifier shapes");
        let lv = g.value(logits);
        (0..lv.rows())
            .map(|r| {
                let row: Vec<f64> = lv.row(r).iter().map(|&v| v as f64).collect();
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Vec<usize> {
        self.probabilities(x).iter().map(|p| argmax(p)).collect()
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> f64 {
        let hits = self.predict(x).iter().zip(labels).filter(|(a, b)| a == b).count();
        hits as f64 / labels.len().max(1) as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let kind = match self.kind {
            InputKind::PooledEmbedding => "pooled",
            InputKind::Image => "image",
        };
        let mut c = Checkpoint::new(format!("kind = {kind}\nclasses = {}\n", self.classes));
        c.push("input.mean", &Tensor::vector(self.input_mean.clone()));
        c.push("input.scale", &Tensor::vector(self.input_scale.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            c.push(format!("layer.{i}.weight"), &l.weight);
            c.push(format!("layer.{i}.bias"), &l.bias);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, DiagnosticsError> {
        let bad = |m: &str| DiagnosticsError::BadClassifier(m.to_string());
        let field = |key: &str| {
            c.metadata
                .lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
        };
        let kind = match field("kind").as_deref() {
            Some("pooled") => InputKind::PooledEmbedding,
            Some("image") => InputKind::Image,
            _ => return Err(bad("missing kind")),
        };
        let classes = field("classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing class count"))?;
        let get = |name: &str| c.get(name).map(|t| t.cast::<f32>()).ok_or_else(|| bad(name));
        let mut layers = Vec::new();
        while let Some(w) = c.get(&format!("layer.{}.weight", layers.len())) {
            let weight = w.cast::<f32>();
            let bias = get(&format!("layer.{}.bias", layers.len()))?;
            layers.push(Linear { weight, bias });
        }
        if layers.is_empty() {
            return Err(bad("no layers"));
        }
        Ok(Classifier {
            kind,
            classes,
            input_mean: get("input.mean")?.into_data(),
            input_scale: get("input.scale")?.into_data(),
            layers,
        })
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Trains on rows of `x` with labels in `0..classes`.
pub fn train_classifier(
    x: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    kind: InputKind,
    options: ClassifierOptions,
    rng: &mut Rng,
) -> Result<Classifier, DiagnosticsError> {
    let (n, d) = (x.rows(), x.cols());
    if n != labels.len() || n == 0 {
        return Err(DiagnosticsError::BadInput(format!("{n} rows, {} labels", labels.len())));
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(DiagnosticsError::BadInput(format!("label {l} outside 0..{classes}")));
        }
        seen[l] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(DiagnosticsError::SingleClass);
    }

    let (mut input_mean, mut input_scale) = (vec![0.0f32; d], vec![1.0f32; d]);
    if options.standardize {
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|r| x.row(r)[j] as f64).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            input_mean[j] = m as f32;
            input_scale[j] = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        }
    }
    let widths = [d, options.hidden[0], options.hidden[1], classes];
    let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
    let mut clf = Classifier {
        kind,
        classes,
        input_mean,
        input_scale,
        layers,
    };
    let xs = clf.standardized(x);
    let zeros = |c: &Classifier| -> Vec<Tensor<f32>> {
        c.layers
            .iter()
            .flat_map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
            .collect()
    };
    let (mut m, mut v) = (zeros(&clf), zeros(&clf));
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..options.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(options.batch_size) {
            let mut g = Graph::new();
            let bound: Vec<BoundLinear> = clf.layers.iter().map(|l| l.bind(&mut g)).collect();
            let input = g.constant(xs.gather_rows(chunk));
            let logits = mlp(&mut g, &bound, input)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.softmax_cross_entropy(logits, &batch_labels)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor<f32>> = bound
                .iter()
                .zip(&clf.layers)
                .flat_map(|(b, l)| {
                    let lg = b.gradients(&grads, l);
                    [lg.weight, lg.bias]
                })
                .collect();
            let params: Vec<&mut Tensor<f32>> = clf
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            step += 1;
            adam_update(
                params,
                m.iter_mut().collect(),
                v.iter_mut().collect(),
                &gs.iter().collect::<Vec<_>>(),
                step,
                (0.9, 0.999, 1e-8),
                options.lr,
            )
            .map_err(|e| DiagnosticsError::BadInput(e.to_string()))?;
        }
    }
    Ok(clf)
}

/// Held-out evaluation of a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub test_count: usize,
    /// Accuracy of always predicting the most common test class, floored
    /// at uniform chance.
    pub chance: f64,
    /// One-sided binomial p-value of the accuracy against `chance`.
    pub p_value: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassifierReport {
    /// Fraction of errors that land in a neighbouring class.
    pub fn adjacent_error_share(&self) -> f64 {
        let mut errors = 0;
        let mut adjacent = 0;
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if p != t {
                    errors += c;
                    if p.abs_diff(t) == 1 {
                        adjacent += c;
                    }
                }
            }
        }
        if errors == 0 {
            1.0
        } else {
            adjacent as f64 / errors as f64
        }
    }
}

/// `P(X ≥ hits)` for `X ~ Binomial(trials, p)`.
pub fn binomial_upper_tail(hits: usize, trials: usize, p: f64) -> f64 {
    if hits == 0 {
        return 1.0;
    }
    let b = Binomial::new(p, trials as u64).expect("valid binomial");
    b.sf(hits as u64 - 1)
}

pub fn evaluate(clf: &Classifier, x: &Tensor<f32>, labels: &[usize]) -> ClassifierReport {
    let preds = clf.predict(x);
    let mut confusion = vec![vec![0usize; clf.classes]; clf.classes];
    let mut counts = vec![0usize; clf.classes];
    let mut hits = 0;
    for (&p, &t) in preds.iter().zip(labels) {
        confusion[t][p] += 1;
        counts[t] += 1;
        hits += usize::from(p == t);
    }
    let n = labels.len();
    let majority = *counts.iter().max().unwrap_or(&0) as f64 / n.max(1) as f64;
    let chance = majority.max(1.0 / clf.classes as f64);
    ClassifierReport {
        accuracy: hits as f64 / n.max(1) as f64,
        test_count: n,
        chance,
        p_value: binomial_upper_tail(hits, n, chance),
        confusion,
    }
}
