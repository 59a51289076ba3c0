//! Dense classifiers: multinomial logistic regression and a two-layer
//! fully connected ReLU network, both trained with softmax cross-entropy.
//!
//! Parameters live in one flat [`Params`] vector. Layouts (row-major):
//!
//! * logistic regression: `W (K x f)`, then `b (K)`
//! * two-layer network: `W1 (h x f)`, `b1 (h)`, `W2 (K x h)`, `b2 (K)`

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RandomStream};
use crate::scalar::Scalar;

/// Flat model parameter vector. Length is fixed at construction and every
/// entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    values: Vec<T>,
}

impl<T: Scalar> Params<T> {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Params::new"));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn norm_sq(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    /// `self += alpha * dir`, failing if any coordinate stops being finite.
    pub fn add_scaled(&mut self, alpha: T, dir: &Self) -> Result<()> {
        if dir.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "add_scaled",
                expected: self.len(),
                actual: dir.len(),
            });
        }
        for (v, &d) in self.values.iter_mut().zip(&dir.values) {
            *v = *v + alpha * d;
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("add_scaled"));
        }
        Ok(())
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: T) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| v * factor).collect())
    }
}

impl<T> AsRef<[T]> for Params<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

/// A labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub features: Vec<T>,
    pub label: usize,
}

impl<T> Sample<T> {
    pub fn new(features: Vec<T>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    TwoLayerFc,
}

/// Architecture description. The parameter count is a function of it alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden width; ignored for logistic regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn two_layer(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::TwoLayerFc,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("model needs input_dim >= 1 and num_classes >= 1"));
        }
        if self.kind == ModelKind::TwoLayerFc && self.hidden_dim == 0 {
            return Err(Error::config("two-layer model needs hidden_dim >= 1"));
        }
        Ok(())
    }

    /// Parameter count `d`.
    pub fn num_params(&self) -> usize {
        let (f, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::LogisticRegression => (f + 1) * k,
            ModelKind::TwoLayerFc => (f + 1) * h + (h + 1) * k,
        }
    }

    /// Index ranges of the bias blocks inside the flat parameter vector.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (f, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::LogisticRegression => vec![k * f..k * f + k],
            ModelKind::TwoLayerFc => {
                let b1 = h * f;
                let b2 = b1 + h + k * h;
                vec![b1..b1 + h, b2..b2 + k]
            }
        }
    }

    /// `(fan_in, fan_out)` for each weight layer, in layout order.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::LogisticRegression => vec![(self.input_dim, self.num_classes)],
            ModelKind::TwoLayerFc => vec![(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)],
        }
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Params<T> {
    let mut rng = RandomStream::derive(seed, Purpose::Init, &[]);
    let mut values = Vec::with_capacity(spec.num_params());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(T::of(rng.uniform_range(-limit, limit)));
        }
        values.extend(std::iter::repeat_n(T::zero(), fan_out));
    }
    debug_assert_eq!(values.len(), spec.num_params());
    Params { values }
}

fn check_params<T>(params: &Params<T>, spec: &ModelSpec) -> Result<()> {
    if params.values.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: spec.num_params(),
            actual: params.values.len(),
        });
    }
    Ok(())
}

fn check_sample<T>(sample: &Sample<T>, spec: &ModelSpec) -> Result<()> {
    if sample.features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "sample features",
            expected: spec.input_dim,
            actual: sample.features.len(),
        });
    }
    if sample.label >= spec.num_classes {
        return Err(Error::InvalidLabel {
            label: sample.label,
            classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Scratch buffers for one forward pass.
struct Forward<T> {
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Forward<T> {
    fn new(spec: &ModelSpec) -> Self {
        let h = if spec.kind == ModelKind::TwoLayerFc {
            spec.hidden_dim
        } else {
            0
        };
        Self {
            hidden_pre: vec![T::zero(); h],
            hidden: vec![T::zero(); h],
            logits: vec![T::zero(); spec.num_classes],
        }
    }

    fn run(&mut self, spec: &ModelSpec, p: &[T], x: &[T]) {
        let (f, h, k) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
        match spec.kind {
            ModelKind::LogisticRegression => {
                affine(&p[..k * f], &p[k * f..k * f + k], x, &mut self.logits);
            }
            ModelKind::TwoLayerFc => {
                let (w1, rest) = p.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                affine(w1, b1, x, &mut self.hidden_pre);
                for (a, &z) in self.hidden.iter_mut().zip(&self.hidden_pre) {
                    *a = if z > T::zero() { z } else { T::zero() };
                }
                affine(w2, b2, &self.hidden, &mut self.logits);
            }
        }
    }
}

/// `out = W x + b` with `W` row-major, `out.len()` rows.
fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi);
    }
}

/// Overwrites `logits` with softmax probabilities; returns `log-sum-exp`.
fn softmax_in_place<T: Scalar>(logits: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total = total + *z;
    }
    for z in logits.iter_mut() {
        *z = *z / total;
    }
    max + total.ln()
}

/// Mean softmax cross-entropy over `batch`.
pub fn loss<T: Scalar, S: Borrow<Sample<T>>>(params: &Params<T>, spec: &ModelSpec, batch: &[S]) -> Result<T> {
    check_params(params, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut fwd = Forward::new(spec);
    let mut total = T::zero();
    for s in batch {
        let s = s.borrow();
        check_sample(s, spec)?;
        fwd.run(spec, &params.values, &s.features);
        let true_logit = fwd.logits[s.label];
        let lse = softmax_in_place(&mut fwd.logits);
        total = total + (lse - true_logit);
    }
    let mean = total / T::of_usize(batch.len());
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    // log-sum-exp minus the true logit is never negative; clamp rounding.
    Ok(mean.max(T::zero()))
}

/// Gradient of [`loss`] with respect to the parameters, by backpropagation.
pub fn minibatch_gradient<T: Scalar, S: Borrow<Sample<T>>>(
    params: &Params<T>,
    spec: &ModelSpec,
    batch: &[S],
) -> Result<Params<T>> {
    check_params(params, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (f, h, k) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let p = &params.values;
    let mut grad = vec![T::zero(); p.len()];
    let mut fwd = Forward::new(spec);
    let mut hidden_delta = vec![T::zero(); fwd.hidden.len()];

    for s in batch {
        let s = s.borrow();
        check_sample(s, spec)?;
        let x = &s.features;
        fwd.run(spec, p, x);
        softmax_in_place(&mut fwd.logits);
        // dL/dz = softmax - onehot
        let delta = &mut fwd.logits;
        delta[s.label] = delta[s.label] - T::one();

        match spec.kind {
            ModelKind::LogisticRegression => {
                let (gw, gb) = grad.split_at_mut(k * f);
                outer_accumulate(gw, delta, x);
                for (g, &d) in gb.iter_mut().zip(delta.iter()) {
                    *g = *g + d;
                }
            }
            ModelKind::TwoLayerFc => {
                let w2 = &p[h * f + h..h * f + h + k * h];
                let (gw1, rest) = grad.split_at_mut(h * f);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);

                outer_accumulate(gw2, delta, &fwd.hidden);
                for (g, &d) in gb2.iter_mut().zip(delta.iter()) {
                    *g = *g + d;
                }
                for (j, hd) in hidden_delta.iter_mut().enumerate() {
                    // ReLU subgradient at 0 is 0.
                    *hd = if fwd.hidden_pre[j] > T::zero() {
                        (0..k).fold(T::zero(), |acc, c| acc + w2[c * h + j] * delta[c])
                    } else {
                        T::zero()
                    };
                }
                outer_accumulate(gw1, &hidden_delta, x);
                for (g, &d) in gb1.iter_mut().zip(&hidden_delta) {
                    *g = *g + d;
                }
            }
        }
    }

    let inv = T::one() / T::of_usize(batch.len());
    for g in grad.iter_mut() {
        *g = *g * inv;
    }
    Params::new(grad).map_err(|_| Error::NonFinite("minibatch_gradient"))
}

/// `g += a b^T` for row-major `g` of shape `a.len() x b.len()`.
fn outer_accumulate<T: Scalar>(g: &mut [T], a: &[T], b: &[T]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == T::zero() {
            continue;
        }
        for (gi, &bi) in g[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *gi = *gi + ar * bi;
        }
    }
}

/// Class with the highest score; ties go to the smallest index.
pub fn predict<T: Scalar>(params: &Params<T>, spec: &ModelSpec, features: &[T]) -> Result<usize> {
    check_params(params, spec)?;
    if features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "sample features",
            expected: spec.input_dim,
            actual: features.len(),
        });
    }
    let mut fwd = Forward::new(spec);
    fwd.run(spec, &params.values, features);
    Ok(argmax(&fwd.logits))
}

fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `dataset` classified correctly. An empty dataset scores 0.
pub fn accuracy<T: Scalar, S: Borrow<Sample<T>>>(params: &Params<T>, spec: &ModelSpec, dataset: &[S]) -> Result<f64> {
    check_params(params, spec)?;
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut fwd = Forward::new(spec);
    let mut correct = 0usize;
    for s in dataset {
        let s = s.borrow();
        check_sample(s, spec)?;
        fwd.run(spec, &params.values, &s.features);
        if argmax(&fwd.logits) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr22() -> ModelSpec {
        ModelSpec::logistic(2, 2)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::two_layer(4, 3, 2).num_params(), 23);
        assert_eq!(ModelSpec::logistic(20, 10).num_params(), 210);
        assert_eq!(init_params::<f64>(&ModelSpec::two_layer(4, 3, 2), 1).len(), 23);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = lr22();
        let a = init_params::<f64>(&spec, 7);
        let b = init_params::<f64>(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f64>(&spec, 8));
        for spec in [lr22(), ModelSpec::two_layer(5, 4, 3)] {
            let p = init_params::<f64>(&spec, 3);
            for r in spec.bias_ranges() {
                assert!(p.as_slice()[r].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_respects_glorot_limit() {
        let spec = ModelSpec::two_layer(6, 10, 4);
        let p = init_params::<f64>(&spec, 11);
        let l1 = (6.0f64 / 16.0).sqrt();
        let l2 = (6.0f64 / 14.0).sqrt();
        assert!(p.as_slice()[..60].iter().all(|v| v.abs() <= l1));
        assert!(p.as_slice()[70..110].iter().all(|v| v.abs() <= l2));
    }

    #[test]
    fn zero_params_give_log_k() {
        let spec = ModelSpec::logistic(3, 5);
        let p = Params::<f64>::zeros(spec.num_params());
        let batch = vec![
            Sample::new(vec![1.0, -2.0, 0.5], 0),
            Sample::new(vec![0.0, 4.0, 1.5], 3),
        ];
        assert_eq!(loss(&p, &spec, &batch).unwrap(), 5f64.ln());
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let spec = lr22();
        // class 1 logit = 40 * x0, class 0 logit = 0
        let p = Params::new(vec![0.0, 0.0, 40.0, 0.0, 0.0, 0.0]).unwrap();
        let batch = [Sample::new(vec![1.0, 0.0], 1)];
        assert!(loss(&p, &spec, &batch).unwrap() < 1e-6);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        // W = [[1, -1], [0.5, 2]], b = [0.1, -0.2]
        let spec = lr22();
        let p = Params::new(vec![1.0, -1.0, 0.5, 2.0, 0.1, -0.2]).unwrap();
        let batch = [Sample::new(vec![1.0, 0.0], 0), Sample::new(vec![0.0, 1.0], 1)];
        // sample 1: z = [1.1, 0.3], true 0 -> ln(1 + e^{-0.8})
        // sample 2: z = [-0.9, 1.8], true 1 -> ln(1 + e^{-2.7})
        let expected = ((1.0 + (-0.8f64).exp()).ln() + (1.0 + (-2.7f64).exp()).ln()) / 2.0;
        let got = loss(&p, &spec, &batch).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        // 0.3711007 and 0.0650436 by desk calculator
        assert!((got - 0.2180721).abs() < 1e-7);
    }

    #[test]
    fn dimension_errors() {
        let spec = lr22();
        let p = Params::<f64>::zeros(5);
        let batch = [Sample::new(vec![1.0, 0.0], 0)];
        assert!(matches!(loss(&p, &spec, &batch), Err(Error::DimensionMismatch { .. })));
        let p = Params::<f64>::zeros(6);
        let bad = [Sample::new(vec![1.0], 0)];
        assert!(matches!(loss(&p, &spec, &bad), Err(Error::DimensionMismatch { .. })));
        let bad = [Sample::new(vec![1.0, 2.0], 2)];
        assert!(matches!(
            minibatch_gradient(&p, &spec, &bad),
            Err(Error::InvalidLabel { .. })
        ));
        let empty: [Sample<f64>; 0] = [];
        assert!(matches!(loss(&p, &spec, &empty), Err(Error::EmptyBatch)));
    }

    #[test]
    fn non_finite_params_rejected() {
        assert!(Params::new(vec![1.0, f64::NAN]).is_err());
        assert!(Params::new(vec![f64::INFINITY]).is_err());
        let mut p = Params::new(vec![f64::MAX]).unwrap();
        let d = Params::new(vec![f64::MAX]).unwrap();
        assert!(matches!(p.add_scaled(1.0, &d), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let spec = ModelSpec::two_layer(3, 4, 3);
        let p = init_params::<f64>(&spec, 5);
        let batch = vec![
            Sample::new(vec![0.3, -1.0, 2.0], 2),
            Sample::new(vec![1.3, 0.2, -0.4], 0),
        ];
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let g1 = minibatch_gradient(&p, &spec, &batch).unwrap();
        let g2 = minibatch_gradient(&p, &spec, &doubled).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn accuracy_tie_goes_to_class_zero() {
        let spec = lr22();
        let p = Params::<f64>::zeros(6);
        let data = vec![
            Sample::new(vec![1.0, 0.0], 0),
            Sample::new(vec![1.0, 1.0], 1),
            Sample::new(vec![0.0, 1.0], 1),
            Sample::new(vec![2.0, 1.0], 0),
        ];
        assert_eq!(accuracy(&p, &spec, &data).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_perfect_and_scale_invariant() {
        let spec = lr22();
        // class 0 scores x0, class 1 scores x1
        let p = Params::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let data = vec![
            Sample::new(vec![2.0, 1.0], 0),
            Sample::new(vec![0.0, 1.0], 1),
            Sample::new(vec![-1.0, -3.0], 0),
        ];
        assert_eq!(accuracy(&p, &spec, &data).unwrap(), 1.0);
        let q = p.scaled(17.5).unwrap();
        assert_eq!(accuracy(&q, &spec, &data).unwrap(), 1.0);
    }

    #[test]
    fn works_in_single_precision() {
        let spec = ModelSpec::logistic(2, 3);
        let p = Params::<f32>::zeros(spec.num_params());
        let batch = [Sample::new(vec![1.0f32, 2.0], 1)];
        assert!((loss(&p, &spec, &batch).unwrap() - 3f32.ln()).abs() < 1e-6);
        assert_eq!(minibatch_gradient(&p, &spec, &batch).unwrap().len(), 9);
    }
}
