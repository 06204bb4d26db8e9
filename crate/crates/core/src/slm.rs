//! The downstream small model: a one-hidden-layer softmax network over
//! precomputed input embeddings. Exposes per-sample losses, probabilities
//! and hidden representations; all gradients are hand-derived and covered
//! by finite-difference tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallModel {
    pub d_in: usize,
    pub d_h: usize,
    pub num_classes: usize,
    /// Row-major d_h x d_in.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major num_classes x d_h.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SmallModel {
    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn new(d_in: usize, d_h: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_h as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-s..s)).collect()
        };
        Self {
            d_in,
            d_h,
            num_classes,
            w1: draw(d_h * d_in, s1),
            b1: draw(d_h, s1),
            w2: draw(num_classes * d_h, s2),
            b2: draw(num_classes, s2),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize, num_classes: usize) -> Self {
        Self {
            d_in,
            d_h,
            num_classes,
            w1: vec![0.0; d_h * d_in],
            b1: vec![0.0; d_h],
            w2: vec![0.0; num_classes * d_h],
            b2: vec![0.0; num_classes],
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(EngineError::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let mut pre = self.b1.clone();
        for j in 0..self.d_h {
            let row = &self.w1[j * self.d_in..(j + 1) * self.d_in];
            pre[j] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        pre
    }

    /// Rectified hidden-layer output; the model's own embedding of a sample.
    pub fn hidden_repr(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.hidden_pre(x).into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.b2.clone();
        for k in 0..self.num_classes {
            let row = &self.w2[k * self.d_h..(k + 1) * self.d_h];
            z[k] += row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>();
        }
        z
    }

    pub fn proba_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.logits_from_hidden(h))
    }

    /// Softmax output over the C classes.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.proba_from_hidden(&self.hidden_repr(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(x)?;
        Ok(argmax(&p))
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for v in [&self.w1, &self.b1, &self.w2, &self.b2] {
            if i < v.len() {
                return v[i];
            }
            i -= v.len();
        }
        panic!("param index {idx} out of range");
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if i < v.len() {
                return &mut v[i];
            }
            i -= v.len();
        }
        panic!("param index {idx} out of range");
    }

    /// model -= lr * grads
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (w, g) in self.w1.iter_mut().zip(&grads.w1) {
            *w -= lr * g;
        }
        for (w, g) in self.b1.iter_mut().zip(&grads.b1) {
            *w -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            *w -= lr * g;
        }
        for (w, g) in self.b2.iter_mut().zip(&grads.b2) {
            *w -= lr * g;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[class] = 1.0;
    v
}

/// Accumulator matching the model's parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &SmallModel) -> Self {
        Self {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }
}

/// Backprop of the output layer and (optionally) one relu branch.
/// `dz` is dL/dlogits already scaled; `h` the hidden activation used for
/// the forward pass; `branch` the (input, pre-activation, weight) triples
/// that fed `h` and should receive gradient.
fn backprop(
    model: &SmallModel,
    dz: &[f64],
    h: &[f64],
    branches: &[(&[f64], &[f64], f64)],
    grads: &mut Gradients,
) {
    for k in 0..model.num_classes {
        for j in 0..model.d_h {
            grads.w2[k * model.d_h + j] += dz[k] * h[j];
        }
        grads.b2[k] += dz[k];
    }
    let mut dh = vec![0.0; model.d_h];
    for j in 0..model.d_h {
        for k in 0..model.num_classes {
            dh[j] += model.w2[k * model.d_h + j] * dz[k];
        }
    }
    for (x, pre, weight) in branches {
        for j in 0..model.d_h {
            if pre[j] > 0.0 {
                let dpre = dh[j] * weight;
                for i in 0..model.d_in {
                    grads.w1[j * model.d_in + i] += dpre * x[i];
                }
                grads.b1[j] += dpre;
            }
        }
    }
}

/// Cross entropy against a (possibly soft) target distribution; adds
/// `scale * dL/dtheta` into `grads` and returns `scale * L`.
pub fn accumulate_ce(
    model: &SmallModel,
    x: &[f64],
    target: &[f64],
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    model.check_dim(x)?;
    let pre = model.hidden_pre(x);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let p = model.proba_from_hidden(&h);
    let loss: f64 = -target
        .iter()
        .zip(&p)
        .map(|(t, pi)| t * pi.max(PROB_FLOOR).ln())
        .sum::<f64>();
    let dz: Vec<f64> = p
        .iter()
        .zip(target)
        .map(|(pi, t)| scale * (pi - t))
        .collect();
    backprop(model, &dz, &h, &[(x, &pre, 1.0)], grads);
    Ok(scale * loss)
}

/// Mixup cross entropy: the forward pass enters at the hidden layer with
/// `sigma * h(x_i) + (1 - sigma) * h(x_j)`, against the mixed label.
pub fn accumulate_mixup_ce(
    model: &SmallModel,
    x_i: &[f64],
    x_j: &[f64],
    sigma: f64,
    target: &[f64],
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    model.check_dim(x_i)?;
    model.check_dim(x_j)?;
    let pre_i = model.hidden_pre(x_i);
    let pre_j = model.hidden_pre(x_j);
    let h_i: Vec<f64> = pre_i.iter().map(|v| v.max(0.0)).collect();
    let h_j: Vec<f64> = pre_j.iter().map(|v| v.max(0.0)).collect();
    let h_m: Vec<f64> = h_i
        .iter()
        .zip(&h_j)
        .map(|(a, b)| sigma * a + (1.0 - sigma) * b)
        .collect();
    let p = model.proba_from_hidden(&h_m);
    let loss: f64 = -target
        .iter()
        .zip(&p)
        .map(|(t, pi)| t * pi.max(PROB_FLOOR).ln())
        .sum::<f64>();
    let dz: Vec<f64> = p
        .iter()
        .zip(target)
        .map(|(pi, t)| scale * (pi - t))
        .collect();
    backprop(
        model,
        &dz,
        &h_m,
        &[(x_i, &pre_i, sigma), (x_j, &pre_j, 1.0 - sigma)],
        grads,
    );
    Ok(scale * loss)
}

/// KL(S(x_aug) || S(x)) with the original-input distribution treated as a
/// constant target: gradient flows only through the augmented branch.
pub fn accumulate_kl_consistency(
    model: &SmallModel,
    x_aug: &[f64],
    x_orig: &[f64],
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let p_orig = model.predict_proba(x_orig)?;
    accumulate_kl_to_target(model, x_aug, &p_orig, scale, grads)
}

/// KL against an explicit constant target distribution. Split out so the
/// stop-gradient semantics can be checked numerically.
pub fn accumulate_kl_to_target(
    model: &SmallModel,
    x_aug: &[f64],
    p_orig: &[f64],
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    model.check_dim(x_aug)?;
    let pre = model.hidden_pre(x_aug);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let q = model.proba_from_hidden(&h);
    let loss: f64 = q
        .iter()
        .zip(p_orig)
        .map(|(qi, pi)| qi * (qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()))
        .sum();
    // dL/dq_k = ln q_k + 1 - ln p_k; through softmax: dz_k = q_k (g_k - sum_j q_j g_j)
    let g: Vec<f64> = q
        .iter()
        .zip(p_orig)
        .map(|(qi, pi)| qi.max(PROB_FLOOR).ln() + 1.0 - pi.max(PROB_FLOOR).ln())
        .collect();
    let dot: f64 = q.iter().zip(&g).map(|(qi, gi)| qi * gi).sum();
    let dz: Vec<f64> = q
        .iter()
        .zip(&g)
        .map(|(qi, gi)| scale * qi * (gi - dot))
        .collect();
    backprop(model, &dz, &h, &[(x_aug, &pre, 1.0)], grads);
    Ok(scale * loss)
}

/// -log p(label) for each labeled sample.
pub fn per_sample_losses(model: &SmallModel, data: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    data.iter()
        .map(|(x, label)| {
            let p = model.predict_proba(x)?;
            Ok(-p[*label].max(PROB_FLOOR).ln())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub losses: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Plain cross-entropy mini-batch gradient descent with seed-shuffled
/// batching. Used for warm-up and as the no-robustness baseline.
pub fn train_epochs(
    model: &mut SmallModel,
    data: &[(Vec<f64>, usize)],
    opts: &TrainOptions,
) -> Result<TrainSnapshot> {
    if data.is_empty() {
        return Err(EngineError::Data("train_epochs: empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for epoch in 0..opts.epochs {
        sgd_epoch_plain(model, data, opts.learning_rate, opts.batch_size, &mut rng, epoch)?;
    }
    snapshot(model, data, opts.epochs)
}

pub fn sgd_epoch_plain(
    model: &mut SmallModel,
    data: &[(Vec<f64>, usize)],
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng);
    for batch in order.chunks(batch_size) {
        let mut grads = Gradients::zeros(model);
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &i in batch {
            let (x, label) = &data[i];
            let target = one_hot(*label, model.num_classes);
            total += accumulate_ce(model, x, &target, scale, &mut grads)?;
        }
        if !total.is_finite() {
            return Err(EngineError::NonFiniteLoss {
                epoch,
                detail: format!("plain CE batch loss = {total}"),
            });
        }
        model.apply_gradients(&grads, lr);
    }
    Ok(())
}

pub fn snapshot(
    model: &SmallModel,
    data: &[(Vec<f64>, usize)],
    epoch: usize,
) -> Result<TrainSnapshot> {
    let losses = per_sample_losses(model, data)?;
    let hidden = data
        .iter()
        .map(|(x, _)| model.hidden_repr(x))
        .collect::<Result<_>>()?;
    Ok(TrainSnapshot { losses, hidden, epoch })
}

/// Fisher-Yates with our own RNG so the batch order is stable across
/// rand versions.
pub fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_model_predicts_uniform() {
        let m = SmallModel::zeros(3, 4, 2);
        let p = m.predict_proba(&[0.5, -0.2, 0.1]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equal_logits_give_half_half() {
        // Any bias-only model with equal output biases is symmetric.
        let mut m = SmallModel::zeros(2, 2, 2);
        m.b2 = vec![3.7, 3.7];
        let p = m.predict_proba(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_arithmetic() {
        // logits (ln 3, 0) -> (0.75, 0.25)
        let p = softmax(&[3.0f64.ln(), 0.0]);
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = SmallModel::zeros(3, 4, 2);
        assert!(m.predict_proba(&[1.0, 2.0]).is_err());
        assert!(m.hidden_repr(&[1.0]).is_err());
    }

    #[test]
    fn hidden_zero_weights() {
        let m = SmallModel::zeros(2, 3, 2);
        assert_eq!(m.hidden_repr(&[1.0, -1.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hidden_identity_like_weights() {
        let mut m = SmallModel::zeros(2, 2, 2);
        m.w1 = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(m.hidden_repr(&[0.7, -0.3]).unwrap(), vec![0.7, 0.0]);
    }

    #[test]
    fn hidden_matches_naive_matmul_oracle() {
        let m = SmallModel::new(4, 5, 3, 99);
        let x = [0.3, -1.2, 0.8, 0.05];
        let got = m.hidden_repr(&x).unwrap();
        // Independent oracle: explicit index loops.
        for j in 0..5 {
            let mut acc = m.b1[j];
            for i in 0..4 {
                acc += m.w1[j * 4 + i] * x[i];
            }
            let expect = if acc > 0.0 { acc } else { 0.0 };
            assert_abs_diff_eq!(got[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn probabilities_on_simplex() {
        let m = SmallModel::new(3, 8, 4, 7);
        let p = m.predict_proba(&[0.2, -0.9, 2.0]).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn loss_of_uniform_model_is_ln2() {
        let m = SmallModel::zeros(2, 3, 2);
        let losses = per_sample_losses(&m, &[(vec![1.0, 0.0], 0)]).unwrap();
        assert_abs_diff_eq!(losses[0], 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_matches_neg_log_prob() {
        // p(correct) = 0.1 -> loss = -ln 0.1
        let mut m = SmallModel::zeros(1, 1, 2);
        m.w1 = vec![1.0];
        m.w2 = vec![0.0, 0.0];
        m.b2 = vec![(1.0f64 / 9.0).ln(), 0.0]; // softmax -> (0.1, 0.9)
        let losses = per_sample_losses(&m, &[(vec![0.0], 0)]).unwrap();
        assert_abs_diff_eq!(losses[0], -(0.1f64.ln()), epsilon = 1e-9);
    }

    fn blob_data(n_per: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for i in 0..n_per * 2 {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            let x = vec![
                center + rng.random_range(-0.5..0.5),
                -center + rng.random_range(-0.5..0.5),
            ];
            data.push((x, class));
        }
        data
    }

    #[test]
    fn separable_blobs_fit_to_high_accuracy() {
        let data = blob_data(40, 3);
        let mut m = SmallModel::new(2, 16, 2, 3);
        train_epochs(
            &mut m,
            &data,
            &TrainOptions {
                epochs: 50,
                learning_rate: 0.2,
                batch_size: 16,
                seed: 3,
            },
        )
        .unwrap();
        let correct = data
            .iter()
            .filter(|(x, y)| m.predict(x).unwrap() == *y)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = blob_data(10, 4);
        let mut m = SmallModel::new(2, 4, 2, 11);
        let before = m.clone();
        train_epochs(
            &mut m,
            &data,
            &TrainOptions {
                epochs: 5,
                learning_rate: 0.0,
                batch_size: 8,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blob_data(20, 5);
        let opts = TrainOptions {
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 5,
        };
        let mut m1 = SmallModel::new(2, 8, 2, 5);
        let mut m2 = SmallModel::new(2, 8, 2, 5);
        train_epochs(&mut m1, &data, &opts).unwrap();
        train_epochs(&mut m2, &data, &opts).unwrap();
        assert_eq!(m1, m2);
    }

    /// Central finite differences over every parameter.
    pub(crate) fn finite_diff_check<F>(model: &SmallModel, loss: F, tol: f64)
    where
        F: Fn(&SmallModel) -> (f64, Gradients),
    {
        let (_, analytic) = loss(model);
        let flat_analytic: Vec<f64> = analytic
            .w1
            .iter()
            .chain(&analytic.b1)
            .chain(&analytic.w2)
            .chain(&analytic.b2)
            .copied()
            .collect();
        let h = 1e-5;
        for idx in 0..model.num_params() {
            let mut plus = model.clone();
            *plus.param_mut(idx) += h;
            let mut minus = model.clone();
            *minus.param_mut(idx) -= h;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let a = flat_analytic[idx];
            let denom = (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                ((a - numeric).abs() / denom) <= tol,
                "param {idx}: analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let model = SmallModel::new(3, 4, 3, 21);
        let x = [0.4, -0.7, 1.1];
        let target = one_hot(2, 3);
        finite_diff_check(
            &model,
            |m| {
                let mut g = Gradients::zeros(m);
                let l = accumulate_ce(m, &x, &target, 1.0, &mut g).unwrap();
                (l, g)
            },
            1e-4,
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let model = SmallModel::new(3, 4, 3, 22);
        let x = [0.4, -0.7, 1.1];
        let x_aug = [0.5, -0.6, 1.0];
        // Stop-gradient: the target distribution is frozen at the base model.
        let p_fixed = model.predict_proba(&x).unwrap();
        finite_diff_check(
            &model,
            |m| {
                let mut g = Gradients::zeros(m);
                let l = accumulate_kl_to_target(m, &x_aug, &p_fixed, 1.0, &mut g).unwrap();
                (l, g)
            },
            1e-4,
        );
    }

    #[test]
    fn mixup_gradient_matches_finite_differences() {
        let model = SmallModel::new(3, 4, 2, 23);
        let x_i = [0.4, -0.7, 1.1];
        let x_j = [-0.3, 0.9, 0.2];
        let sigma = 0.3;
        let target = vec![0.3, 0.7];
        finite_diff_check(
            &model,
            |m| {
                let mut g = Gradients::zeros(m);
                let l = accumulate_mixup_ce(m, &x_i, &x_j, sigma, &target, 1.0, &mut g).unwrap();
                (l, g)
            },
            1e-4,
        );
    }
}
