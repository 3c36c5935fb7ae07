//! Post-hoc calibration: Platt scaling and isotonic regression.
//!
//! Both are fitted on held-out validation pixels and applied to frozen
//! model outputs. Platt works on the foreground logit margin
//! `ln p_fg - ln p_bg`; isotonic regression works on the raw foreground
//! probability. Fitting is single-threaded and deterministic; apply is
//! pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ln_floored, ClassLayout, ProbMap, Tensor};

/// Upper bound on the number of validation pixels used for fitting; larger
/// pools are subsampled with a fixed seed.
pub const MAX_FIT_PIXELS: usize = 200_000;

/// Logistic remap `sigmoid(a * s + b)` of a score `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

/// Outcome of a Platt fit. `converged == false` reports non-convergence
/// explicitly while still carrying the last iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattFit {
    pub params: PlattParams,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

const PLATT_MAX_ITERS: usize = 100;
const PLATT_GRAD_TOL: f64 = 1e-8;
/// L2 penalty on (a, b); keeps the optimum finite on separable data.
const PLATT_L2: f64 = 1e-6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fit `(a, b)` by Newton iterations on the penalized mean negative
/// log-likelihood of `sigmoid(a * s + b)`.
///
/// Scores are the foreground logit margins; labels are binary. Errors when
/// only one class is present.
pub fn platt_fit(scores: &[f64], labels: &[u8]) -> Result<PlattFit> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument {
            what: "platt_fit",
            reason: format!(
                "need equal non-zero lengths, got {} scores and {} labels",
                scores.len(),
                labels.len()
            ),
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidArgument {
            what: "platt_fit",
            reason: "labels contain a single class; the fit is unidentifiable".into(),
        });
    }
    let n = scores.len() as f64;
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    let mut grad_norm = f64::INFINITY;
    for it in 0..PLATT_MAX_ITERS {
        let mut g_a = 2.0 * PLATT_L2 * a;
        let mut g_b = 2.0 * PLATT_L2 * b;
        let mut h_aa = 2.0 * PLATT_L2;
        let mut h_ab = 0.0;
        let mut h_bb = 2.0 * PLATT_L2;
        for (&s, &y) in scores.iter().zip(labels) {
            let p = sigmoid(a * s + b);
            let r = p - y as f64;
            g_a += r * s / n;
            g_b += r / n;
            let w = (p * (1.0 - p)).max(1e-12);
            h_aa += w * s * s / n;
            h_ab += w * s / n;
            h_bb += w / n;
        }
        grad_norm = (g_a * g_a + g_b * g_b).sqrt();
        if grad_norm <= PLATT_GRAD_TOL {
            return Ok(PlattFit {
                params: PlattParams { a, b },
                converged: true,
                iterations: it,
                grad_norm,
            });
        }
        let det = h_aa * h_bb - h_ab * h_ab;
        if det.abs() < 1e-300 || !det.is_finite() {
            break;
        }
        a -= (h_bb * g_a - h_ab * g_b) / det;
        b -= (h_aa * g_b - h_ab * g_a) / det;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite {
                context: "platt newton iterate".into(),
            });
        }
    }
    Ok(PlattFit {
        params: PlattParams { a, b },
        converged: false,
        iterations: PLATT_MAX_ITERS,
        grad_norm,
    })
}

/// Foreground logit margin `ln p_fg - ln p_bg` per pixel (K = 2).
pub fn logit_margins(probs: &ProbMap) -> Result<Vec<f64>> {
    let layout = binary_layout(probs)?;
    let p = probs.data();
    let mut out = Vec::with_capacity(layout.total_pixels());
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let fg = p[layout.at(b, 1, px)];
            let bg = p[layout.at(b, 0, px)];
            out.push(ln_floored(fg) - ln_floored(bg));
        }
    }
    Ok(out)
}

/// Remap binary probabilities through the fitted logistic:
/// `p'_fg = sigmoid(a * margin + b)`, background `1 - p'_fg`.
pub fn platt_apply(params: &PlattParams, probs: &ProbMap) -> Result<ProbMap> {
    let layout = binary_layout(probs)?;
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let fg = p[layout.at(b, 1, px)];
            let bg = p[layout.at(b, 0, px)];
            let margin = ln_floored(fg) - ln_floored(bg);
            let q = sigmoid(params.a * margin + params.b);
            out[layout.at(b, 1, px)] = q;
            out[layout.at(b, 0, px)] = 1.0 - q;
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

fn binary_layout(probs: &ProbMap) -> Result<ClassLayout> {
    let layout = ClassLayout::of(probs)?;
    if layout.classes != 2 {
        return Err(Error::Unsupported(format!(
            "post-hoc calibration needs K = 2, got K = {}",
            layout.classes
        )));
    }
    Ok(layout)
}

/// Piecewise-constant non-decreasing score-to-probability map fitted by
/// pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicModel {
    /// Strictly increasing score thresholds.
    pub thresholds: Vec<f64>,
    /// Fitted values, non-decreasing, in [0, 1]; same length as
    /// `thresholds`.
    pub values: Vec<f64>,
}

impl IsotonicModel {
    /// Parse from JSON and check the structural invariants.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let model: IsotonicModel =
            serde_json::from_slice(bytes).map_err(|e| Error::json("isotonic model", e))?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() != self.values.len() {
            return Err(Error::Config(
                "isotonic model needs equal, non-zero threshold/value lengths".into(),
            ));
        }
        for w in self.thresholds.windows(2) {
            // NaN thresholds are rejected by the finite check below
            if w[0].total_cmp(&w[1]) != std::cmp::Ordering::Less {
                return Err(Error::Config(format!(
                    "isotonic thresholds must be strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "isotonic value {v} at {i} is outside [0, 1]"
                )));
            }
            if i > 0 && v < self.values[i - 1] {
                return Err(Error::Config(format!(
                    "isotonic values must be non-decreasing: {} then {v}",
                    self.values[i - 1]
                )));
            }
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("isotonic thresholds must be finite".into()));
        }
        Ok(())
    }

    /// Right-continuous lookup: the fitted value of the largest threshold
    /// `<= score`; below the first threshold the first value, above the
    /// last the last value.
    pub fn lookup(&self, score: f64) -> f64 {
        match self
            .thresholds
            .binary_search_by(|t| t.total_cmp(&score))
        {
            Ok(i) => self.values[i],
            Err(0) => self.values[0],
            Err(i) => self.values[i - 1],
        }
    }
}

/// Least-squares isotonic fit of binary labels against scores via
/// pool-adjacent-violators. Ties in score are pre-averaged into a single
/// block, so thresholds come out strictly increasing.
pub fn isotonic_fit(scores: &[f64], labels: &[u8]) -> Result<IsotonicModel> {
    if scores.len() != labels.len() || scores.len() < 2 {
        return Err(Error::InvalidArgument {
            what: "isotonic_fit",
            reason: format!(
                "need equal lengths of at least 2, got {} scores and {} labels",
                scores.len(),
                labels.len()
            ),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "isotonic fit scores".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // Collapse score ties into weighted points.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for &i in &order {
        let s = scores[i];
        let y = labels[i] as f64;
        if let Some(&last) = xs.last() {
            if last == s {
                let k = xs.len() - 1;
                ys[k] = (ys[k] * ws[k] + y) / (ws[k] + 1.0);
                ws[k] += 1.0;
                continue;
            }
        }
        xs.push(s);
        ys.push(y);
        ws.push(1.0);
    }

    // Pool adjacent violators over the weighted points.
    let mut block_val: Vec<f64> = Vec::with_capacity(ys.len());
    let mut block_w: Vec<f64> = Vec::with_capacity(ys.len());
    let mut block_len: Vec<usize> = Vec::with_capacity(ys.len());
    for (&y, &w) in ys.iter().zip(&ws) {
        block_val.push(y);
        block_w.push(w);
        block_len.push(1);
        while block_val.len() > 1 {
            let j = block_val.len() - 1;
            if block_val[j - 1] <= block_val[j] {
                break;
            }
            let w_new = block_w[j - 1] + block_w[j];
            block_val[j - 1] = (block_val[j - 1] * block_w[j - 1] + block_val[j] * block_w[j]) / w_new;
            block_w[j - 1] = w_new;
            block_len[j - 1] += block_len[j];
            block_val.pop();
            block_w.pop();
            block_len.pop();
        }
    }

    let mut values = Vec::with_capacity(xs.len());
    for (v, l) in block_val.iter().zip(&block_len) {
        for _ in 0..*l {
            values.push(v.clamp(0.0, 1.0));
        }
    }
    let model = IsotonicModel {
        thresholds: xs,
        values,
    };
    model.validate()?;
    Ok(model)
}

/// Remap binary probabilities through the isotonic lookup on `p_fg`.
pub fn isotonic_apply(model: &IsotonicModel, probs: &ProbMap) -> Result<ProbMap> {
    let layout = binary_layout(probs)?;
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let q = model.lookup(p[layout.at(b, 1, px)]);
            out[layout.at(b, 1, px)] = q;
            out[layout.at(b, 0, px)] = 1.0 - q;
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

/// Deterministically subsample (score, label) pairs down to
/// [`MAX_FIT_PIXELS`]; identity when the pool already fits.
pub fn subsample_pairs(
    scores: &[f64],
    labels: &[u8],
    seed: u64,
) -> (Vec<f64>, Vec<u8>) {
    if scores.len() <= MAX_FIT_PIXELS {
        return (scores.to_vec(), labels.to_vec());
    }
    let mut rng = Rng::new(seed);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // partial Fisher-Yates: the first MAX_FIT_PIXELS entries are a uniform
    // sample without replacement
    for i in 0..MAX_FIT_PIXELS {
        let j = i + rng.next_below(idx.len() - i);
        idx.swap(i, j);
    }
    idx.truncate(MAX_FIT_PIXELS);
    idx.sort_unstable();
    (
        idx.iter().map(|&i| scores[i]).collect(),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn binary_probs(fg: &[f64]) -> ProbMap {
        let n = fg.len();
        let mut data = vec![0.0; 2 * n];
        for (i, &p) in fg.iter().enumerate() {
            data[i] = 1.0 - p;
            data[n + i] = p;
        }
        Tensor::new(vec![1, 2, n], data).unwrap()
    }

    #[test]
    fn platt_recovers_generating_slope() {
        // labels ~ Bernoulli(sigmoid(2 s)) over 10k seeded scores
        let mut rng = Rng::new(2024);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| (rng.next_f64() < sigmoid(2.0 * s)) as u8)
            .collect();
        let fit = platt_fit(&scores, &labels).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!(
            (1.8..=2.2).contains(&fit.params.a),
            "a = {}",
            fit.params.a
        );
        assert!(
            (-0.1..=0.1).contains(&fit.params.b),
            "b = {}",
            fit.params.b
        );
    }

    #[test]
    fn platt_identity_on_calibrated_scores() {
        // labels ~ sigmoid(s): the optimum is near (1, 0)
        let mut rng = Rng::new(77);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| 1.5 * rng.next_normal()).collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| (rng.next_f64() < sigmoid(s)) as u8)
            .collect();
        let fit = platt_fit(&scores, &labels).unwrap();
        assert!(fit.converged);
        assert!((0.9..=1.1).contains(&fit.params.a), "a = {}", fit.params.a);
        assert!((-0.1..=0.1).contains(&fit.params.b), "b = {}", fit.params.b);
    }

    #[test]
    fn platt_noise_labels_give_zero_slope_and_base_rate() {
        // labels independent of scores: a ~ 0, sigmoid(b) ~ label mean
        let mut rng = Rng::new(3030);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.5) as u8).collect();
        let mean = labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
        let fit = platt_fit(&scores, &labels).unwrap();
        assert!(fit.converged);
        assert!(fit.params.a.abs() < 0.05, "a = {}", fit.params.a);
        assert_close(sigmoid(fit.params.b), mean, 0.02);
    }

    #[test]
    fn platt_rejects_single_class() {
        let scores = vec![0.0, 1.0, 2.0];
        let labels = vec![1u8, 1, 1];
        assert!(platt_fit(&scores, &labels).is_err());
    }

    #[test]
    fn platt_apply_identity_and_constant() {
        let fg = [0.1, 0.35, 0.5, 0.82, 0.99];
        let probs = binary_probs(&fg);
        // a = 1, b = 0 reproduces the input
        let out = platt_apply(&PlattParams { a: 1.0, b: 0.0 }, &probs).unwrap();
        for (x, y) in probs.data().iter().zip(out.data()) {
            assert_close(*x, *y, 1e-12);
        }
        // a = 0, b = 0 collapses everything to 0.5
        let out = platt_apply(&PlattParams { a: 0.0, b: 0.0 }, &probs).unwrap();
        let n = fg.len();
        for i in 0..n {
            assert_close(out.data()[n + i], 0.5, 0.0);
        }
    }

    #[test]
    fn platt_apply_preserves_ranking() {
        let mut rng = Rng::new(55);
        let fg: Vec<f64> = (0..200).map(|_| rng.next_f64()).collect();
        let probs = binary_probs(&fg);
        let out = platt_apply(&PlattParams { a: 2.5, b: -0.7 }, &probs).unwrap();
        let n = fg.len();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            idx
        };
        let before: Vec<f64> = (0..n).map(|i| probs.data()[n + i]).collect();
        let after: Vec<f64> = (0..n).map(|i| out.data()[n + i]).collect();
        assert_eq!(rank(&before), rank(&after));
    }

    #[test]
    fn isotonic_two_point_cases() {
        // already monotone
        let m = isotonic_fit(&[0.1, 0.9], &[0, 1]).unwrap();
        assert_eq!(m.values, vec![0.0, 1.0]);
        // violating pair pools to the average
        let m = isotonic_fit(&[0.1, 0.9], &[1, 0]).unwrap();
        assert_eq!(m.values, vec![0.5, 0.5]);
    }

    #[test]
    fn isotonic_alternating_labels() {
        // [1, 0, 1, 0, 1] by sorted score: least-squares monotone fit
        let scores = [0.1, 0.3, 0.5, 0.7, 0.9];
        let labels = [1u8, 0, 1, 0, 1];
        let m = isotonic_fit(&scores, &labels).unwrap();
        let expected = [0.5, 0.5, 0.5, 0.5, 1.0];
        assert_eq!(m.values.len(), 5);
        for (v, e) in m.values.iter().zip(expected) {
            assert_close(*v, e, 1e-12);
        }
    }

    #[test]
    fn isotonic_mass_conservation() {
        // weighted mean of fitted values equals the label mean
        let mut rng = Rng::new(808);
        for _ in 0..50 {
            let n = 2 + rng.next_below(40);
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.4) as u8).collect();
            let m = isotonic_fit(&scores, &labels).unwrap();
            // look up every fitting score; ties collapse so weight by count
            let fitted_sum: f64 = scores.iter().map(|&s| m.lookup(s)).sum();
            let label_sum: f64 = labels.iter().map(|&y| y as f64).sum();
            assert_close(fitted_sum, label_sum, 1e-9);
        }
    }

    #[test]
    fn isotonic_tie_handling() {
        // equal scores must merge before pooling
        let m = isotonic_fit(&[0.5, 0.5, 0.2], &[1, 0, 0]).unwrap();
        assert_eq!(m.thresholds, vec![0.2, 0.5]);
        assert_eq!(m.values, vec![0.0, 0.5]);
        m.validate().unwrap();
    }

    #[test]
    fn isotonic_lookup_is_right_continuous_step() {
        let m = IsotonicModel {
            thresholds: vec![0.2, 0.6],
            values: vec![0.3, 0.8],
        };
        assert_close(m.lookup(0.0), 0.3, 0.0); // below first
        assert_close(m.lookup(0.2), 0.3, 0.0); // at threshold
        assert_close(m.lookup(0.4), 0.3, 0.0); // between
        assert_close(m.lookup(0.6), 0.8, 0.0);
        assert_close(m.lookup(0.9), 0.8, 0.0); // above last
    }

    #[test]
    fn isotonic_apply_reproduces_fitted_values_on_fitting_scores() {
        let scores = [0.15, 0.4, 0.62, 0.8];
        let labels = [0u8, 1, 0, 1];
        let m = isotonic_fit(&scores, &labels).unwrap();
        let probs = binary_probs(&scores);
        let out = isotonic_apply(&m, &probs).unwrap();
        let n = scores.len();
        for (i, &s) in scores.iter().enumerate() {
            assert_close(out.data()[n + i], m.lookup(s), 0.0);
        }
    }

    #[test]
    fn isotonic_single_block_applies_constant() {
        let m = isotonic_fit(&[0.9, 0.1], &[0, 1]).unwrap();
        // fully violating: one pooled value 0.5
        let probs = binary_probs(&[0.05, 0.3, 0.99]);
        let out = isotonic_apply(&m, &probs).unwrap();
        for i in 0..3 {
            assert_close(out.data()[3 + i], 0.5, 0.0);
        }
    }

    #[test]
    fn isotonic_json_roundtrip_and_validation() {
        let m = isotonic_fit(&[0.1, 0.5, 0.9], &[0, 1, 1]).unwrap();
        let json = serde_json::to_vec(&m).unwrap();
        let back = IsotonicModel::from_json_bytes(&json).unwrap();
        assert_eq!(m, back);

        let bad = r#"{"thresholds":[0.5,0.1],"values":[0.2,0.8]}"#;
        assert!(IsotonicModel::from_json_bytes(bad.as_bytes()).is_err());
        let bad = r#"{"thresholds":[0.1,0.5],"values":[0.9,0.2]}"#;
        assert!(IsotonicModel::from_json_bytes(bad.as_bytes()).is_err());
        let bad = r#"{"thresholds":[0.1],"values":[1.5]}"#;
        assert!(IsotonicModel::from_json_bytes(bad.as_bytes()).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_bounded() {
        let scores: Vec<f64> = (0..300_000).map(|i| i as f64).collect();
        let labels: Vec<u8> = (0..300_000).map(|i| (i % 2) as u8).collect();
        let (s1, l1) = subsample_pairs(&scores, &labels, 42);
        let (s2, _) = subsample_pairs(&scores, &labels, 42);
        assert_eq!(s1.len(), MAX_FIT_PIXELS);
        assert_eq!(l1.len(), MAX_FIT_PIXELS);
        assert_eq!(s1, s2);

        let (s3, l3) = subsample_pairs(&scores[..100], &labels[..100], 42);
        assert_eq!(s3.len(), 100);
        assert_eq!(l3.len(), 100);
    }
}
