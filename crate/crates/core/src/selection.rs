//! Clean/noisy partitioning: a two-component 1-D Gaussian mixture fit to
//! per-sample losses by EM, thresholded clean probabilities, and class-wise
//! small-loss subsets.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

const VARIANCE_FLOOR: f64 = 1e-6;
const DEGENERATE_SPREAD: f64 = 1e-9;

/// Parameters of the fitted mixture plus per-sample clean probabilities.
/// `clean_prob[i]` is the posterior of the lower-mean component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub clean_prob: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    /// Set when the losses had no usable spread; all samples count as clean.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanNoisySplit {
    /// Indices into the loss vector with clean_prob >= tau.
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

fn gauss_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// EM for a two-component 1-D GMM over losses. Deterministic initialization:
/// components at the 25th/75th loss percentiles, equal weights, pooled
/// variance. Stops when |delta log-likelihood| < tol or after `max_iters`.
pub fn fit_gmm_1d(losses: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    if losses.len() < 4 {
        return Err(EngineError::Data(format!(
            "fit_gmm_1d needs at least 4 losses, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(EngineError::Data(
            "fit_gmm_1d: losses must be finite and non-negative".into(),
        ));
    }
    let n = losses.len();
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let spread = sorted[n - 1] - sorted[0];
    if spread < DEGENERATE_SPREAD {
        return Ok(GmmFit {
            means: [sorted[0], sorted[n - 1]],
            variances: [VARIANCE_FLOOR; 2],
            weights: [0.5, 0.5],
            clean_prob: vec![1.0; n],
            log_likelihood: vec![],
            degenerate: true,
        });
    }

    let mean_all = losses.iter().sum::<f64>() / n as f64;
    let pooled_var = (losses.iter().map(|l| (l - mean_all).powi(2)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);
    let mut means = [percentile(&sorted, 25.0), percentile(&sorted, 75.0)];
    if means[0] == means[1] {
        means = [sorted[0], sorted[n - 1]];
    }
    let mut variances = [pooled_var; 2];
    let mut weights: [f64; 2] = [0.5; 2];
    let mut resp = vec![[0.5; 2]; n];
    let mut trace = Vec::new();

    for _ in 0..max_iters {
        // E-step
        let mut log_lik = 0.0;
        for (i, &l) in losses.iter().enumerate() {
            let lp0 = weights[0].ln() + gauss_log_pdf(l, means[0], variances[0]);
            let lp1 = weights[1].ln() + gauss_log_pdf(l, means[1], variances[1]);
            let max = lp0.max(lp1);
            let e0 = (lp0 - max).exp();
            let e1 = (lp1 - max).exp();
            let sum = e0 + e1;
            resp[i] = [e0 / sum, e1 / sum];
            log_lik += max + sum.ln();
        }
        let converged = trace
            .last()
            .map(|prev: &f64| (log_lik - prev).abs() < tol)
            .unwrap_or(false);
        trace.push(log_lik);
        if converged {
            break;
        }
        // M-step
        for c in 0..2 {
            let nc: f64 = resp.iter().map(|r| r[c]).sum();
            if nc < 1e-12 {
                continue;
            }
            weights[c] = nc / n as f64;
            means[c] = resp
                .iter()
                .zip(losses)
                .map(|(r, l)| r[c] * l)
                .sum::<f64>()
                / nc;
            variances[c] = (resp
                .iter()
                .zip(losses)
                .map(|(r, l)| r[c] * (l - means[c]).powi(2))
                .sum::<f64>()
                / nc)
                .max(VARIANCE_FLOOR);
        }
    }

    // Keep the lower-mean component first.
    let low = if means[0] <= means[1] { 0 } else { 1 };
    let high = 1 - low;
    let clean_prob = resp.iter().map(|r| r[low]).collect();
    Ok(GmmFit {
        means: [means[low], means[high]],
        variances: [variances[low], variances[high]],
        weights: [weights[low], weights[high]],
        clean_prob,
        log_likelihood: trace,
        degenerate: false,
    })
}

/// D_l = {i : w_i >= tau}; boundary inclusive. Degenerate fits mark
/// everything clean regardless of tau.
pub fn partition(fit: &GmmFit, tau: f64) -> CleanNoisySplit {
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (i, w) in fit.clean_prob.iter().enumerate() {
        if fit.degenerate || *w >= tau {
            clean.push(i);
        } else {
            noisy.push(i);
        }
    }
    CleanNoisySplit { clean, noisy }
}

/// The ceil(R/100 * n) smallest-loss members of one class, ties broken by
/// ascending id. `members` pairs sample ids with their losses.
pub fn small_loss_class_subset(members: &[(String, f64)], r_percent: f64) -> Result<Vec<String>> {
    if !(r_percent > 0.0 && r_percent <= 100.0) {
        return Err(EngineError::Config(format!(
            "r_percent must be in (0,100], got {r_percent}"
        )));
    }
    if members.is_empty() {
        return Ok(Vec::new());
    }
    let keep = ((r_percent / 100.0) * members.len() as f64).ceil() as usize;
    let mut sorted: Vec<&(String, f64)> = members.iter().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(sorted.into_iter().take(keep).map(|(id, _)| id.clone()).collect())
}
