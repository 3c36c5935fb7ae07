//! Segmentation quality (Dice score, Hausdorff distance) and calibration
//! quality (Brier, stratified Brier, ECE, reliability bins, probability
//! histograms).
//!
//! Bin convention for both reliability bins and histograms over `[0, 1]`
//! with `M` bins: bin 0 covers `[0, 1/M]`, bin m covers `(m/M, (m+1)/M]`.
//! Confidence is the max-class probability; correctness compares argmax
//! (ties toward the lowest class index) with the label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_channels, ClassLayout, LabelMap, ProbMap};

/// Bin index for a value in [0, 1]: `[0, 1/M]` then `(m/M, (m+1)/M]`.
#[inline]
pub fn bin_index(value: f64, bins: usize) -> usize {
    debug_assert!(bins >= 1);
    if value <= 0.0 {
        return 0;
    }
    let scaled = (value * bins as f64).ceil() as usize;
    scaled.saturating_sub(1).min(bins - 1)
}

/// Reliability bins: per-bin sample count, mean confidence, and empirical
/// accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl ReliabilityBins {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    /// ECE from the bins: `sum_m (count_m / N) * |acc_m - conf_m|` over
    /// non-empty bins.
    pub fn ece(&self) -> f64 {
        let n = self.total_count();
        if n == 0 {
            return 0.0;
        }
        let mut ece = 0.0;
        for m in 0..self.counts.len() {
            if self.counts[m] > 0 {
                ece += (self.counts[m] as f64 / n as f64)
                    * (self.accuracy[m] - self.mean_confidence[m]).abs();
            }
        }
        ece
    }
}

/// Streaming accumulator for pooled calibration metrics over many images.
/// Accumulation order is the caller's push order, so pooled results are
/// reproducible.
#[derive(Debug, Clone)]
pub struct CalibrationAccumulator {
    bins: usize,
    conf_sum: Vec<f64>,
    correct: Vec<usize>,
    counts: Vec<usize>,
    hist_counts: Vec<usize>,
    brier_sum: f64,
    brier_plus_sum: f64,
    fg_count: usize,
    total: usize,
}

impl CalibrationAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument {
                what: "ece bins",
                reason: "need at least 1 bin".into(),
            });
        }
        Ok(CalibrationAccumulator {
            bins,
            conf_sum: vec![0.0; bins],
            correct: vec![0; bins],
            counts: vec![0; bins],
            hist_counts: vec![0; bins],
            brier_sum: 0.0,
            brier_plus_sum: 0.0,
            fg_count: 0,
            total: 0,
        })
    }

    /// Add every pixel of one binary prediction to the pool.
    pub fn push(&mut self, probs: &ProbMap, labels: &LabelMap) -> Result<()> {
        let layout = check_binary(probs, labels)?;
        let p = probs.data();
        for b in 0..layout.batch {
            for px in 0..layout.pixels {
                let p_bg = p[layout.at(b, 0, px)];
                let p_fg = p[layout.at(b, 1, px)];
                let y = labels.data()[b * layout.pixels + px];
                // confidence/correctness with ties toward class 0
                let (pred, conf) = if p_fg > p_bg { (1u8, p_fg) } else { (0u8, p_bg) };
                let bin = bin_index(conf, self.bins);
                self.conf_sum[bin] += conf;
                self.correct[bin] += (pred == y) as usize;
                self.counts[bin] += 1;
                self.hist_counts[bin_index(p_fg, self.bins)] += 1;
                let yf = y as f64;
                self.brier_sum += (p_fg - yf) * (p_fg - yf);
                if y == 1 {
                    self.brier_plus_sum += (p_fg - 1.0) * (p_fg - 1.0);
                    self.fg_count += 1;
                }
                self.total += 1;
            }
        }
        Ok(())
    }

    pub fn total_pixels(&self) -> usize {
        self.total
    }

    pub fn finish(&self) -> Result<CalibrationReport> {
        if self.total == 0 {
            return Err(Error::EmptySet {
                what: "calibration pool",
                reason: "no pixels were scored".into(),
            });
        }
        if self.fg_count == 0 {
            return Err(Error::EmptySet {
                what: "positive stratum",
                reason: "no foreground pixels in the pool".into(),
            });
        }
        let mut mean_confidence = vec![0.0; self.bins];
        let mut accuracy = vec![0.0; self.bins];
        for m in 0..self.bins {
            if self.counts[m] > 0 {
                mean_confidence[m] = self.conf_sum[m] / self.counts[m] as f64;
                accuracy[m] = self.correct[m] as f64 / self.counts[m] as f64;
            }
        }
        let bins = ReliabilityBins {
            counts: self.counts.clone(),
            mean_confidence,
            accuracy,
        };
        Ok(CalibrationReport {
            brier: self.brier_sum / self.total as f64,
            brier_plus: self.brier_plus_sum / self.fg_count as f64,
            ece: bins.ece(),
            bins,
            prob_histogram: self.hist_counts.clone(),
        })
    }
}

/// Calibration metrics for one model/dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub brier: f64,
    pub brier_plus: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub prob_histogram: Vec<usize>,
}

fn check_binary(probs: &ProbMap, labels: &LabelMap) -> Result<ClassLayout> {
    let layout = ClassLayout::of(probs)?;
    if layout.classes != 2 {
        return Err(Error::Unsupported(format!(
            "binary calibration metrics need K = 2, got K = {}",
            layout.classes
        )));
    }
    if labels.len() != layout.total_pixels() {
        return Err(Error::ShapeMismatch {
            left: probs.shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    labels.check_range(2)?;
    Ok(layout)
}

/// Hard-label Dice overlap `2|P n G| / (|P| + |G|)` for one class.
/// Returns 1.0 when both sets are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let mut inter = 0usize;
    let mut p_size = 0usize;
    let mut g_size = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pi = p == class_id;
        let gi = g == class_id;
        inter += (pi && gi) as usize;
        p_size += pi as usize;
        g_size += gi as usize;
    }
    if p_size + g_size == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_size + g_size) as f64)
}

/// Boundary pixels of a 2-D mask: foreground pixels with at least one of
/// their 4 neighbors background or lying on the image edge.
fn boundary_pixels(mask: &LabelMap, class_id: u8) -> Result<Vec<(usize, usize)>> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "hausdorff needs a 2-D label map".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let at = |y: usize, x: usize| mask.data()[y * w + x] == class_id;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let on_edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let has_bg_neighbor = (y > 0 && !at(y - 1, x))
                || (y + 1 < h && !at(y + 1, x))
                || (x > 0 && !at(y, x - 1))
                || (x + 1 < w && !at(y, x + 1));
            if on_edge || has_bg_neighbor {
                out.push((y, x));
            }
        }
    }
    Ok(out)
}

/// Symmetric Hausdorff distance between the boundary pixel sets of the two
/// masks, Euclidean metric, exact brute-force pairwise scan. Errors when
/// either mask is empty for `class_id`.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let a = boundary_pixels(pred, class_id)?;
    let b = boundary_pixels(gt, class_id)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet {
            what: "hausdorff mask",
            reason: format!(
                "class {class_id} is empty in {} mask",
                if a.is_empty() { "the first" } else { "the second" }
            ),
        });
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut worst = 0.0f64;
        for &(y1, x1) in from {
            let mut best = f64::INFINITY;
            for &(y2, x2) in to {
                let dy = y1 as f64 - y2 as f64;
                let dx = x1 as f64 - x2 as f64;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            worst = worst.max(best);
        }
        worst.sqrt()
    };
    Ok(directed(&a, &b).max(directed(&b, &a)))
}

/// Mean over all pixels of `(p_fg - y)^2`. Binary tasks only.
pub fn brier(probs: &ProbMap, gt: &LabelMap) -> Result<f64> {
    let layout = check_binary(probs, gt)?;
    let p = probs.data();
    let mut sum = 0.0;
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let p_fg = p[layout.at(b, 1, px)];
            let y = gt.data()[b * layout.pixels + px] as f64;
            sum += (p_fg - y) * (p_fg - y);
        }
    }
    Ok(sum / layout.total_pixels() as f64)
}

/// Brier score restricted to the positive stratum: mean of `(p_fg - 1)^2`
/// over pixels with label 1. Errors when the stratum is empty.
pub fn brier_plus(probs: &ProbMap, gt: &LabelMap) -> Result<f64> {
    let layout = check_binary(probs, gt)?;
    let p = probs.data();
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            if gt.data()[b * layout.pixels + px] == 1 {
                let p_fg = p[layout.at(b, 1, px)];
                sum += (p_fg - 1.0) * (p_fg - 1.0);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptySet {
            what: "positive stratum",
            reason: "ground truth has no foreground pixels".into(),
        });
    }
    Ok(sum / n as f64)
}

/// Expected calibration error with `M` bins, plus the bins themselves.
/// Works for any K; confidence is the max-class probability.
pub fn ece(probs: &ProbMap, gt: &LabelMap, bins: usize) -> Result<(f64, ReliabilityBins)> {
    if bins == 0 {
        return Err(Error::InvalidArgument {
            what: "ece bins",
            reason: "need at least 1 bin".into(),
        });
    }
    let layout = ClassLayout::of(probs)?;
    if gt.len() != layout.total_pixels() {
        return Err(Error::ShapeMismatch {
            left: probs.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    gt.check_range(layout.classes)?;
    let pred = argmax_channels(probs)?;
    let p = probs.data();
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            let k_hat = pred.data()[b * layout.pixels + px] as usize;
            let conf = p[layout.at(b, k_hat, px)];
            let bin = bin_index(conf, bins);
            conf_sum[bin] += conf;
            correct[bin] += (pred.data()[b * layout.pixels + px]
                == gt.data()[b * layout.pixels + px]) as usize;
            counts[bin] += 1;
        }
    }
    let mut mean_confidence = vec![0.0; bins];
    let mut accuracy = vec![0.0; bins];
    for m in 0..bins {
        if counts[m] > 0 {
            mean_confidence[m] = conf_sum[m] / counts[m] as f64;
            accuracy[m] = correct[m] as f64 / counts[m] as f64;
        }
    }
    let rb = ReliabilityBins {
        counts,
        mean_confidence,
        accuracy,
    };
    Ok((rb.ece(), rb))
}

/// Histogram of foreground probability over `M` equal-width bins of
/// `[0, 1]`, same edge convention as the reliability bins.
pub fn prob_histogram(probs: &ProbMap, bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::InvalidArgument {
            what: "histogram bins",
            reason: "need at least 2 bins".into(),
        });
    }
    let layout = ClassLayout::of(probs)?;
    if layout.classes != 2 {
        return Err(Error::Unsupported(format!(
            "probability histogram needs K = 2, got K = {}",
            layout.classes
        )));
    }
    let p = probs.data();
    let mut counts = vec![0usize; bins];
    for b in 0..layout.batch {
        for px in 0..layout.pixels {
            counts[bin_index(p[layout.at(b, 1, px)], bins)] += 1;
        }
    }
    Ok(counts)
}
