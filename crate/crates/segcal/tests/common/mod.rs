//! Shared test oracles: central finite differences, naive brute-force
//! metric recomputations, and an exhaustive monotone-fit search. These
//! deliberately avoid the library's own code paths wherever they are used
//! to check one.

use segcal::losses::{combined_objective_with_mask, misclassified_set, ObjectiveSpec};
use segcal::model::{backward, forward, ModelParams};
use segcal::tensor::{softmax_channels, LabelMap, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Guarded relative error between an analytic and a finite-difference
/// value: small absolute disagreements on near-zero gradients are scaled
/// by the guard instead of blowing up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Central finite differences of `f` w.r.t. every element of `x`.
pub fn finite_diff(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec()).unwrap();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Objective value as a function of the logits with the misclassified set
/// frozen at the unperturbed point.
pub fn frozen_objective_value(
    spec: &ObjectiveSpec,
    base_logits: &Tensor,
    labels: &LabelMap,
) -> impl Fn(&Tensor) -> f64 {
    let probs = softmax_channels(base_logits).unwrap();
    let mask = misclassified_set(&probs, labels).unwrap();
    let spec = *spec;
    let labels = labels.clone();
    move |logits: &Tensor| {
        combined_objective_with_mask(&spec, logits, &labels, &mask)
            .unwrap()
            .value
    }
}

/// Worst relative error between analytic grad_logits and central
/// differences for one objective on one instance.
pub fn max_grad_logits_error(
    spec: &ObjectiveSpec,
    logits: &Tensor,
    labels: &LabelMap,
) -> f64 {
    let probs = softmax_channels(logits).unwrap();
    let mask = misclassified_set(&probs, labels).unwrap();
    let analytic = combined_objective_with_mask(spec, logits, labels, &mask)
        .unwrap()
        .grad_logits;
    let f = frozen_objective_value(spec, logits, labels);
    let numeric = finite_diff(&f, logits, FD_STEP);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Worst relative error between backpropagated parameter gradients and
/// central differences of the end-to-end loss, over a deterministic sample
/// of parameter coordinates. The misclassified set is frozen at the
/// unperturbed parameters.
pub fn max_param_grad_error(
    spec: &ObjectiveSpec,
    params: &ModelParams,
    images: &Tensor,
    labels: &LabelMap,
    sample_per_layer: usize,
) -> f64 {
    let (logits, cache) = forward(params, images).unwrap();
    let probs = softmax_channels(&logits).unwrap();
    let mask = misclassified_set(&probs, labels).unwrap();
    let loss = combined_objective_with_mask(spec, &logits, labels, &mask).unwrap();
    let grads = backward(params, &cache, &loss.grad_logits).unwrap();

    let eval = |p: &ModelParams| -> f64 {
        let (logits, _) = forward(p, images).unwrap();
        combined_objective_with_mask(spec, &logits, labels, &mask)
            .unwrap()
            .value
    };

    let mut worst = 0.0f64;
    for l in 0..params.layers.len() {
        let w_len = params.layers[l].weight.len();
        // deterministic stride so the sample spreads over the kernel
        let stride = (w_len / sample_per_layer).max(1);
        for i in (0..w_len).step_by(stride) {
            let mut plus = params.clone();
            plus.layers[l].weight.data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.layers[l].weight.data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let analytic = grads.layers[l].weight.data()[i];
            worst = worst.max(rel_err(analytic, numeric));
        }
        // always check one bias coordinate per layer
        let mut plus = params.clone();
        plus.layers[l].bias.data_mut()[0] += FD_STEP;
        let mut minus = params.clone();
        minus.layers[l].bias.data_mut()[0] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.layers[l].bias.data()[0], numeric));
    }
    worst
}

/// Naive multi-pass ECE recomputation: one full scan per bin, nothing
/// shared with the accumulator implementation.
pub fn naive_ece(confidences: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = confidences.len();
    let mut ece = 0.0;
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let mut count = 0usize;
        let mut conf_sum = 0.0;
        let mut acc_sum = 0.0;
        for i in 0..n {
            let c = confidences[i];
            let inside = if m == 0 { c <= hi } else { c > lo && c <= hi };
            if inside {
                count += 1;
                conf_sum += c;
                acc_sum += correct[i] as usize as f64;
            }
        }
        if count > 0 {
            let conf = conf_sum / count as f64;
            let acc = acc_sum / count as f64;
            ece += count as f64 / n as f64 * (acc - conf).abs();
        }
    }
    ece
}

/// Exact least-squares monotone fit of binary labels by dynamic
/// programming over a fine value grid. The grid step 1/840 represents
/// every block mean p/q with q <= 8 exactly, so for n <= 8 this is an
/// exact independent minimizer.
pub fn grid_monotone_fit(labels: &[u8]) -> Vec<f64> {
    const G: usize = 840;
    let n = labels.len();
    let values: Vec<f64> = (0..=G).map(|v| v as f64 / G as f64).collect();
    // cost[i][v]: best SSE of fitting labels[0..=i] with last value v
    let mut cost = vec![vec![0.0f64; G + 1]; n];
    let mut choice = vec![vec![0usize; G + 1]; n];
    for (v, &val) in values.iter().enumerate() {
        let d = labels[0] as f64 - val;
        cost[0][v] = d * d;
        choice[0][v] = v;
    }
    for i in 1..n {
        // prefix minima of the previous row let each v see min over v' <= v
        let mut best_v = 0usize;
        for v in 0..=G {
            if cost[i - 1][v] < cost[i - 1][best_v] {
                best_v = v;
            }
            let d = labels[i] as f64 - values[v];
            cost[i][v] = cost[i - 1][best_v] + d * d;
            choice[i][v] = best_v;
        }
    }
    let mut v = (0..=G)
        .min_by(|&a, &b| cost[n - 1][a].total_cmp(&cost[n - 1][b]))
        .unwrap();
    let mut fitted = vec![0.0; n];
    for i in (0..n).rev() {
        fitted[i] = values[v];
        v = choice[i][v];
    }
    fitted
}
