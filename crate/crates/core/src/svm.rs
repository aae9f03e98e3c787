//! One-vs-rest linear SVM trained with the Pegasos stochastic subgradient
//! schedule.

use rand::seq::SliceRandom;

use crate::dataset::LabelSpec;
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::optics::StokesImage;
use crate::pca::PcaModel;
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// `C × d`, row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
    dim: usize,
    label_spec: Option<LabelSpec>,
    params: SvmParams,
}

/// Per-epoch training record, evaluated on the averaged iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmEpoch {
    pub epoch: usize,
    /// Sum over the binary problems of `(λ/2)‖w‖² + mean hinge`, where `w`
    /// includes the bias coordinate.
    pub objective: f64,
    pub train_accuracy: f64,
}

impl SvmModel {
    pub fn from_parts(
        weights: Vec<f64>,
        biases: Vec<f64>,
        dim: usize,
        label_spec: Option<LabelSpec>,
        params: SvmParams,
    ) -> Result<Self> {
        let c = biases.len();
        if c < 2 {
            return Err(Error::domain("an SVM needs at least two classes"));
        }
        if weights.len() != c * dim {
            return Err(Error::shape(c * dim, weights.len()));
        }
        if let Some(spec) = &label_spec {
            if spec.class_count() != c {
                return Err(Error::shape(
                    format!("{} classes from the label spec", spec.class_count()),
                    c,
                ));
            }
        }
        if !weights.iter().chain(&biases).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite SVM parameter".into()));
        }
        Ok(Self {
            weights,
            biases,
            dim,
            label_spec,
            params,
        })
    }

    pub fn class_count(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn class_weights(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn label_spec(&self) -> Option<&LabelSpec> {
        self.label_spec.as_ref()
    }

    pub fn with_label_spec(mut self, spec: LabelSpec) -> Result<Self> {
        if spec.class_count() != self.class_count() {
            return Err(Error::shape(self.class_count(), spec.class_count()));
        }
        self.label_spec = Some(spec);
        Ok(self)
    }

    pub fn params(&self) -> SvmParams {
        self.params
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        Ok((0..self.class_count())
            .map(|c| dot(self.class_weights(c), x) + self.biases[c])
            .collect())
    }

    /// Highest-scoring class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

/// PCA projection followed by an SVM on the reduced coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaSvm {
    pub pca: PcaModel,
    pub svm: SvmModel,
}

impl PcaSvm {
    pub fn new(pca: PcaModel, svm: SvmModel) -> Result<Self> {
        if pca.n_components() != svm.dim() {
            return Err(Error::shape(
                format!("{} reduced dimensions", pca.n_components()),
                svm.dim(),
            ));
        }
        Ok(Self { pca, svm })
    }
}

impl Classifier for PcaSvm {
    fn class_count(&self) -> usize {
        self.svm.class_count()
    }

    fn classify(&self, img: &StokesImage) -> Result<usize> {
        self.svm.predict(&self.pca.transform(img)?)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate().skip(1) {
        if s > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains `class_count` one-vs-rest separators.
///
/// Samples are visited in a seeded permutation each epoch; the step at
/// global iteration `t` is `1/(λt)`. The bias is an extra coordinate whose
/// feature value is the RMS norm of the training vectors, so it moves on
/// the same scale as the weights; it is shrunk with them, since an
/// unshrunk bias keeps the huge early steps forever. The returned model is
/// the average of the iterates after the first epoch (all iterates when
/// only one epoch is run): the first steps are of order `1/λ` and would
/// dominate a plain average.
pub fn svm_train(
    xs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    params: SvmParams,
) -> Result<(SvmModel, Vec<SvmEpoch>)> {
    if xs.len() != labels.len() {
        return Err(Error::shape(xs.len(), labels.len()));
    }
    if xs.is_empty() {
        return Err(Error::domain("no training vectors"));
    }
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(Error::domain(format!("λ must be positive, got {}", params.lambda)));
    }
    if params.epochs == 0 {
        return Err(Error::domain("epochs must be at least 1"));
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::shape(dim, bad.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::domain(format!(
            "label {bad} outside 0..{class_count}"
        )));
    }
    let mut present = vec![false; class_count];
    for &l in labels {
        present[l] = true;
    }
    if class_count < 2 || present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::domain("training data must contain at least two classes"));
    }

    let n = xs.len();
    let bias_feature =
        (xs.iter().map(|x| dot(x, x)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let stride = dim + 1;
    let lambda = params.lambda;
    let mut w = vec![0.0; class_count * stride];
    let mut avg = vec![0.0; class_count * stride];
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(params.epochs);
    let mut t = 0usize;
    let mut averaged = 0usize;
    let burn_in = if params.epochs > 1 { n } else { 0 };
    for epoch in 0..params.epochs {
        let mut rng = stream(params.seed, epoch as u64, Stage::Shuffle);
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let shrink = 1.0 - eta * lambda;
            let x = &xs[i];
            for c in 0..class_count {
                let wc = &mut w[c * stride..(c + 1) * stride];
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let margin = y * (dot(&wc[..dim], x) + wc[dim] * bias_feature);
                for v in wc.iter_mut() {
                    *v *= shrink;
                }
                if margin < 1.0 {
                    for (v, xj) in wc[..dim].iter_mut().zip(x) {
                        *v += eta * y * xj;
                    }
                    wc[dim] += eta * y * bias_feature;
                }
            }
            if t <= burn_in {
                continue;
            }
            averaged += 1;
            let k = 1.0 / averaged as f64;
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += (v - *a) * k;
            }
        }
        let current = if averaged == 0 { &w } else { &avg };
        let (objective, acc) = evaluate(current, xs, labels, class_count, dim, bias_feature, lambda);
        trace.push(SvmEpoch {
            epoch: epoch + 1,
            objective,
            train_accuracy: acc,
        });
    }

    let mut weights = Vec::with_capacity(class_count * dim);
    let mut biases = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let wc = &avg[c * stride..(c + 1) * stride];
        weights.extend_from_slice(&wc[..dim]);
        biases.push(wc[dim] * bias_feature);
    }
    let model = SvmModel::from_parts(weights, biases, dim, None, params)?;
    Ok((model, trace))
}

fn evaluate(
    w: &[f64],
    xs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    dim: usize,
    bias_feature: f64,
    lambda: f64,
) -> (f64, f64) {
    let stride = dim + 1;
    let mut objective = 0.0;
    for c in 0..class_count {
        let wc = &w[c * stride..(c + 1) * stride];
        objective += 0.5 * lambda * dot(wc, wc);
    }
    let mut hinge = 0.0;
    let mut correct = 0usize;
    let mut scores = vec![0.0; class_count];
    for (x, &l) in xs.iter().zip(labels) {
        for (c, s) in scores.iter_mut().enumerate() {
            let wc = &w[c * stride..(c + 1) * stride];
            *s = dot(&wc[..dim], x) + wc[dim] * bias_feature;
            let y = if l == c { 1.0 } else { -1.0 };
            hinge += (1.0 - y * *s).max(0.0);
        }
        if argmax(&scores) == l {
            correct += 1;
        }
    }
    let n = xs.len() as f64;
    (objective + hinge / n, correct as f64 / n)
}

/// Fraction of vectors whose prediction matches the label.
pub fn accuracy(model: &SvmModel, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(Error::shape(xs.len(), labels.len()));
    }
    let pred = model.predict_batch(xs)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / xs.len() as f64)
}
