//! Posterior-contraction and calibration analyses on a trained model.

pub mod classifier;

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataio::ImageDataset;
use crate::distributions::{DiagGaussian, DistributionError};
use crate::model::{pool_rows, GridSpec, Head, ModelError, NeuralProcess, PointSet};
use crate::rng::Rng;
use crate::tensor::{Element, PoolMode, Tensor, TensorError};

pub use classifier::{
    binomial_upper_tail, evaluate, train_classifier, Classifier, ClassifierOptions, ClassifierReport, InputKind,
};

/// Number of `ψ` draws averaged for semi-implicit posterior entropies.
pub const SIVI_ENTROPY_DRAWS: usize = 16;

/// Context-size buckets for the size classifier, inclusive bounds.
pub const SIZE_BUCKETS: [(usize, usize); 7] =
    [(1, 10), (11, 25), (26, 50), (51, 100), (101, 200), (201, 400), (401, 784)];

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    BadInput(String),
    #[error("all training labels belong to one class")]
    SingleClass,
    #[error("embedding statistics need max pooling")]
    PoolingNotMax,
    #[error("malformed classifier: {0}")]
    BadClassifier(String),
    #[error("dataset has no labels")]
    Unlabeled,
}

fn bad(msg: impl Into<String>) -> DiagnosticsError {
    DiagnosticsError::BadInput(msg.into())
}

/// Embeddings of every pixel of `image`, `[pixels, d_s]`.
pub fn image_embeddings<T: Element>(
    model: &NeuralProcess<T>,
    grid: GridSpec,
    image: &[f32],
) -> Result<Tensor<T>, DiagnosticsError> {
    let all: Vec<usize> = (0..grid.pixels()).collect();
    Ok(model.point_embeddings(&PointSet::from_pixels(grid, image, &all)?)?)
}

/// Evaluates the posterior for a batch of pooled embeddings. The plain head
/// yields one Gaussian per row; the semi-implicit head yields one
/// conditional per row of `noise`.
pub struct PosteriorBatch {
    pub rows: Vec<Vec<DiagGaussian>>,
}

impl PosteriorBatch {
    pub fn entropies(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|qs| qs.iter().map(DiagGaussian::entropy).sum::<f64>() / qs.len() as f64)
            .collect()
    }

    /// Mean of `KL(reference_j ‖ q_j)` over matched conditionals.
    pub fn kl_from(&self, reference: &[DiagGaussian]) -> Result<Vec<f64>, DiagnosticsError> {
        self.rows
            .iter()
            .map(|qs| {
                let mut acc = 0.0;
                for (q, r) in qs.iter().zip(reference) {
                    acc += r.kl(q)?;
                }
                Ok(acc / qs.len() as f64)
            })
            .collect()
    }
}

pub fn posteriors<T: Element>(
    model: &NeuralProcess<T>,
    pooled: &[Vec<T>],
    noise: &Tensor<T>,
) -> Result<PosteriorBatch, DiagnosticsError> {
    let d = model.config.d_s;
    let flat: Vec<T> = pooled.iter().flatten().copied().collect();
    let batch = Tensor::matrix(pooled.len(), d, flat).map_err(ModelError::from)?;
    let rows = match model.config.head {
        Head::Plain => model.plain_posteriors(&batch)?.into_iter().map(|q| vec![q]).collect(),
        Head::Sivi => model.sivi_posteriors(&batch, noise)?,
    };
    Ok(PosteriorBatch { rows })
}

fn entropy_noise<T: Element>(model: &NeuralProcess<T>, rng: &mut Rng) -> Tensor<T> {
    match model.config.head {
        Head::Plain => Tensor::zeros(&[0, model.config.d_eps]),
        Head::Sivi => rng.normals(&[SIVI_ENTROPY_DRAWS, model.config.d_eps]),
    }
}

/// Posterior entropy as a function of context size.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyCurve {
    pub sizes: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Sizes never seen during training.
    pub outside: Vec<bool>,
}

impl EntropyCurve {
    pub fn tsv(&self) -> String {
        let mut out = String::from("size\tmean\tstd\toutside_training\n");
        for i in 0..self.sizes.len() {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{}",
                self.sizes[i],
                self.mean[i],
                self.std[i],
                u8::from(self.outside[i])
            );
        }
        out
    }

    pub fn at(&self, size: usize) -> Option<f64> {
        self.sizes.iter().position(|&s| s == size).map(|i| self.mean[i])
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// For every image and size, `reps` uniformly random context sets. Sizes
/// above `train_max` are flagged as outside the training range.
pub fn entropy_curve<T: Element>(
    model: &NeuralProcess<T>,
    dataset: &ImageDataset,
    images: &[usize],
    sizes: &[usize],
    reps: usize,
    train_max: usize,
    rng: &mut Rng,
) -> Result<EntropyCurve, DiagnosticsError> {
    let grid = dataset.grid();
    if reps == 0 || images.is_empty() {
        return Err(bad("need at least one image and one repetition"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("sizes must be strictly increasing"));
    }
    if sizes.first() == Some(&0) || sizes.last().is_some_and(|&s| s > grid.pixels()) {
        return Err(bad(format!("sizes must lie in 1..={}", grid.pixels())));
    }
    let noise = entropy_noise(model, rng);
    let mut values = vec![Vec::with_capacity(images.len() * reps); sizes.len()];
    for &img in images {
        let emb = image_embeddings(model, grid, dataset.image(img))?;
        for (si, &n) in sizes.iter().enumerate() {
            let pooled = (0..reps)
                .map(|_| pool_rows(&emb, &rng.choose_distinct(grid.pixels(), n), model.config.pooling))
                .collect::<Result<Vec<_>, _>>()?;
            values[si].extend(posteriors(model, &pooled, &noise)?.entropies());
        }
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for v in &values {
        let (m, s) = mean_std(v);
        mean.push(m);
        std.push(s);
    }
    Ok(EntropyCurve {
        sizes: sizes.to_vec(),
        mean,
        std,
        outside: sizes.iter().map(|&s| s > train_max).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// `KL(q(z | full image) ‖ q(z | C))`.
    KlToFull,
    Entropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedySelection {
    pub chosen: Vec<usize>,
    /// Criterion value after each step.
    pub trace: Vec<f64>,
    /// Posterior entropy after each step.
    pub entropy: Vec<f64>,
}

/// Grows a context one pixel at a time, each time adding the candidate that
/// minimizes `criterion`. Ties go to the lowest pixel index. With
/// `candidate_cap`, each step scores a uniform subsample of that many
/// unobserved pixels.
pub fn greedy_select<T: Element>(
    model: &NeuralProcess<T>,
    image: &[f32],
    grid: GridSpec,
    budget: usize,
    criterion: Criterion,
    candidate_cap: Option<usize>,
    rng: &mut Rng,
) -> Result<GreedySelection, DiagnosticsError> {
    let pixels = grid.pixels();
    if budget > pixels {
        return Err(bad(format!("budget {budget} exceeds {pixels} pixels")));
    }
    let mut out = GreedySelection {
        chosen: Vec::with_capacity(budget),
        trace: Vec::with_capacity(budget),
        entropy: Vec::with_capacity(budget),
    };
    if budget == 0 {
        return Ok(out);
    }
    let mode = model.config.pooling;
    let emb = image_embeddings(model, grid, image)?;
    let noise = entropy_noise(model, rng);
    let all: Vec<usize> = (0..pixels).collect();
    let full = posteriors(model, &[pool_rows(&emb, &all, mode)?], &noise)?.rows.remove(0);

    let mut used = vec![false; pixels];
    // Running max, or running sum for mean pooling.
    let mut state: Option<Vec<T>> = None;
    for step in 0..budget {
        let mut candidates: Vec<usize> = (0..pixels).filter(|&p| !used[p]).collect();
        if let Some(cap) = candidate_cap {
            if cap < candidates.len() {
                let pick = rng.choose_distinct(candidates.len(), cap);
                let mut sub: Vec<usize> = pick.into_iter().map(|i| candidates[i]).collect();
                sub.sort_unstable();
                candidates = sub;
            }
        }
        let count = T::from_f64((step + 1) as f64);
        let pooled: Vec<Vec<T>> = candidates
            .iter()
            .map(|&c| {
                let row = emb.row(c);
                match (&state, mode) {
                    (None, _) => row.to_vec(),
                    (Some(s), PoolMode::Max) => s.iter().zip(row).map(|(&a, &b)| if b > a { b } else { a }).collect(),
                    (Some(s), PoolMode::Mean) => s.iter().zip(row).map(|(&a, &b)| a + b).collect(),
                }
            })
            .collect();
        let scored: Vec<Vec<T>> = match mode {
            PoolMode::Max => pooled.clone(),
            PoolMode::Mean => pooled.iter().map(|s| s.iter().map(|&v| v / count).collect()).collect(),
        };
        let batch = posteriors(model, &scored, &noise)?;
        let entropies = batch.entropies();
        let scores = match criterion {
            Criterion::Entropy => entropies.clone(),
            Criterion::KlToFull => batch.kl_from(&full)?,
        };
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] < scores[best] {
                best = i;
            }
        }
        let pick = candidates[best];
        used[pick] = true;
        out.chosen.push(pick);
        out.trace.push(scores[best]);
        out.entropy.push(entropies[best]);
        state = Some(pooled[best].clone());
    }
    Ok(out)
}

/// Pooled-embedding norms and entropies along a nested context sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStats {
    pub sizes: Vec<usize>,
    /// L1 norm of `s_C` after shifting each dimension so its minimum over
    /// the sequence is zero.
    pub shifted_l1: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl EmbeddingStats {
    pub fn tsv(&self) -> String {
        let mut out = String::from("size\tshifted_l1\tentropy\n");
        for i in 0..self.sizes.len() {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}", self.sizes[i], self.shifted_l1[i], self.entropy[i]);
        }
        out
    }
}

/// Uses the prefixes of `ordering` of length `sizes[i]` as contexts.
pub fn embedding_stats<T: Element>(
    model: &NeuralProcess<T>,
    image: &[f32],
    grid: GridSpec,
    ordering: &[usize],
    sizes: &[usize],
    rng: &mut Rng,
) -> Result<EmbeddingStats, DiagnosticsError> {
    if model.config.pooling != PoolMode::Max {
        return Err(DiagnosticsError::PoolingNotMax);
    }
    if sizes.is_empty() || sizes.iter().any(|&n| n == 0 || n > ordering.len()) {
        return Err(bad("prefix sizes must lie in 1..=ordering length"));
    }
    let emb = image_embeddings(model, grid, image)?;
    let pooled = sizes
        .iter()
        .map(|&n| pool_rows(&emb, &ordering[..n], PoolMode::Max))
        .collect::<Result<Vec<_>, _>>()?;
    let d = model.config.d_s;
    let floor: Vec<f64> = (0..d)
        .map(|j| pooled.iter().map(|s| s[j].as_f64()).fold(f64::INFINITY, f64::min))
        .collect();
    let shifted_l1 = pooled
        .iter()
        .map(|s| s.iter().zip(&floor).map(|(v, f)| v.as_f64() - f).sum())
        .collect();
    let noise = entropy_noise(model, rng);
    Ok(EmbeddingStats {
        sizes: sizes.to_vec(),
        shifted_l1,
        entropy: posteriors(model, &pooled, &noise)?.entropies(),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `NaN` when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn size_bucket(n: usize) -> Option<usize> {
    SIZE_BUCKETS.iter().position(|&(lo, hi)| (lo..=hi).contains(&n))
}

/// Pooled embeddings of random contexts, labelled by size bucket. Each
/// sample picks a bucket uniformly, then a size uniformly within it.
pub fn size_classification_data<T: Element>(
    model: &NeuralProcess<T>,
    dataset: &ImageDataset,
    images: &[usize],
    per_image: usize,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<usize>), DiagnosticsError> {
    let grid = dataset.grid();
    let buckets: Vec<(usize, usize)> = SIZE_BUCKETS
        .iter()
        .copied()
        .filter(|&(lo, _)| lo <= grid.pixels())
        .map(|(lo, hi)| (lo, hi.min(grid.pixels())))
        .collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for &img in images {
        let emb = image_embeddings(model, grid, dataset.image(img))?;
        for _ in 0..per_image {
            let b = rng.below(buckets.len());
            let (lo, hi) = buckets[b];
            let n = rng.range(lo, hi + 1);
            let s = pool_rows(&emb, &rng.choose_distinct(grid.pixels(), n), model.config.pooling)?;
            features.extend(s.iter().map(|v| v.as_f64() as f32));
            labels.push(b);
        }
    }
    let x = Tensor::matrix(labels.len(), model.config.d_s, features).map_err(ModelError::from)?;
    Ok((x, labels))
}

/// Trains on one set of embeddings and reports on another.
pub fn train_size_classifier(
    train: (&Tensor<f32>, &[usize]),
    test: (&Tensor<f32>, &[usize]),
    options: ClassifierOptions,
    rng: &mut Rng,
) -> Result<(Classifier, ClassifierReport), DiagnosticsError> {
    let clf = train_classifier(
        train.0,
        train.1,
        SIZE_BUCKETS.len(),
        InputKind::PooledEmbedding,
        options,
        rng,
    )?;
    let report = evaluate(&clf, test.0, test.1);
    Ok((clf, report))
}

/// Rows of `indices` images as a `[n, pixels]` matrix.
pub fn image_matrix(dataset: &ImageDataset, indices: &[usize]) -> Tensor<f32> {
    let n = dataset.image_size();
    let data: Vec<f32> = indices.iter().flat_map(|&i| dataset.image(i).iter().copied()).collect();
    Tensor::matrix(indices.len(), n, data).expect("image sizes agree")
}

pub fn digit_labels(dataset: &ImageDataset) -> Result<Vec<usize>, DiagnosticsError> {
    Ok(dataset
        .labels()
        .ok_or(DiagnosticsError::Unlabeled)?
        .iter()
        .map(|&l| l as usize)
        .collect())
}

pub fn train_digit_classifier(
    dataset: &ImageDataset,
    options: ClassifierOptions,
    rng: &mut Rng,
) -> Result<Classifier, DiagnosticsError> {
    let labels = digit_labels(dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    train_classifier(&image_matrix(dataset, &all), &labels, 10, InputKind::Image, options, rng)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` with `p(y)` the mean of the rows.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let first = probs.first().ok_or_else(|| bad("no samples"))?;
    let c = first.len();
    if probs.iter().any(|p| p.len() != c) {
        return Err(bad("class counts differ"));
    }
    let marginal: Vec<f64> = (0..c)
        .map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / probs.len() as f64)
        .collect();
    let mean_kl = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pj, _)| pj > 0.0)
                .map(|(&pj, &mj)| pj * (pj / mj).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    Ok(mean_kl.max(0.0).exp())
}

fn clamp_images(images: &[Vec<f64>]) -> Tensor<f32> {
    let n = images[0].len();
    let data = images.iter().flatten().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::matrix(images.len(), n, data).expect("equal image sizes")
}

/// Class posteriors of `k` completions given `context`.
pub fn completion_probabilities<T: Element>(
    model: &NeuralProcess<T>,
    context: &PointSet<T>,
    grid: GridSpec,
    classifier: &Classifier,
    k: usize,
    copy_context: bool,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let completion = model.sample_completion(context, grid, k, copy_context, rng)?;
    Ok(classifier.probabilities(&clamp_images(&completion.means)))
}

/// Normalized counts of the classifier's argmax over `k` completions.
pub fn prediction_histogram<T: Element>(
    model: &NeuralProcess<T>,
    context: &PointSet<T>,
    grid: GridSpec,
    classifier: &Classifier,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, DiagnosticsError> {
    let probs = completion_probabilities(model, context, grid, classifier, k, false, rng)?;
    let mut hist = vec![0.0; classifier.classes];
    for p in &probs {
        hist[classifier::argmax(p)] += 1.0;
    }
    hist.iter_mut().for_each(|h| *h /= probs.len() as f64);
    Ok(hist)
}

/// Inception score per context size, each averaged over `sets` random
/// context sets drawn from random images of `dataset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCurve {
    pub sizes: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScoreCurve {
    pub fn tsv(&self) -> String {
        let mut out = String::from("size\tinception_mean\tinception_std\n");
        for i in 0..self.sizes.len() {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}", self.sizes[i], self.mean[i], self.std[i]);
        }
        out
    }
}

pub fn inception_curve<T: Element>(
    model: &NeuralProcess<T>,
    dataset: &ImageDataset,
    classifier: &Classifier,
    sizes: &[usize],
    sets: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<ScoreCurve, DiagnosticsError> {
    let grid = dataset.grid();
    if sets == 0 || dataset.is_empty() {
        return Err(bad("need at least one context set and image"));
    }
    let mut curve = ScoreCurve {
        sizes: sizes.to_vec(),
        mean: Vec::new(),
        std: Vec::new(),
    };
    for &n in sizes {
        if n == 0 || n > grid.pixels() {
            return Err(bad(format!("size {n} outside 1..={}", grid.pixels())));
        }
        let mut scores = Vec::with_capacity(sets);
        for _ in 0..sets {
            let img = rng.below(dataset.len());
            let pixels = rng.choose_distinct(grid.pixels(), n);
            let ctx = PointSet::from_pixels(grid, dataset.image(img), &pixels)?;
            let probs = completion_probabilities(model, &ctx, grid, classifier, k, false, rng)?;
            scores.push(inception_score(&probs)?);
        }
        let (m, s) = mean_std(&scores);
        curve.mean.push(m);
        curve.std.push(s);
    }
    Ok(curve)
}

/// Per-pixel mean intensity of each digit class.
pub fn class_means(dataset: &ImageDataset) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let labels = digit_labels(dataset)?;
    let n = dataset.image_size();
    let mut sums = vec![vec![0.0; n]; 10];
    let mut counts = [0usize; 10];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 10 {
            return Err(bad(format!("label {l} is not a digit")));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(dataset.image(i)) {
            *s += v as f64;
        }
    }
    if let Some(d) = counts.iter().position(|&c| c == 0) {
        return Err(bad(format!("no examples of digit {d}")));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

pub const ELIMINATION_STEP: usize = 10;

/// Nested pixel sets: the top-left pixel, then for each digit `d` in
/// order the `ELIMINATION_STEP` unchosen pixels where the mean images of
/// `target` and `d` differ most. Ties go to the lower index.
pub fn elimination_sequence(means: &[Vec<f64>], target: usize) -> Result<Vec<Vec<usize>>, DiagnosticsError> {
    let base = means.get(target).ok_or_else(|| bad(format!("no mean image for {target}")))?;
    let mut used = vec![false; base.len()];
    let mut current = vec![0];
    used[0] = true;
    let mut out = vec![current.clone()];
    for other in means {
        let mut candidates: Vec<usize> = (0..base.len()).filter(|&p| !used[p]).collect();
        let score = |p: usize| (base[p] - other[p]).abs();
        candidates.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        for &p in candidates.iter().take(ELIMINATION_STEP) {
            used[p] = true;
            current.push(p);
        }
        out.push(current.clone());
    }
    Ok(out)
}
