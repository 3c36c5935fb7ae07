//! Dense row-major f64 tensors.
//!
//! All loss and metric arithmetic in this crate runs in 64-bit floats so
//! finite-difference gradient checks stay meaningful at 1e-6 tolerances.
//! Tensors are immutable values once built (mutation happens through
//! explicit `data_mut` access by the code that owns them); every operation
//! here is a pure function and safe to call concurrently.

use crate::error::{Error, Result};

/// Probability floor applied inside every logarithm. Keeps entropy terms
/// finite when a class probability saturates to 0.
pub const PROB_FLOOR: f64 = 1e-12;

/// ln with the global probability floor: callers clamp, `ln` never sees a
/// value below [`PROB_FLOOR`].
#[inline]
pub fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Dense N-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Per-pixel class scores before softmax. Shape convention `[B, K, ...]`
/// with the class axis at position 1.
pub type LogitMap = Tensor;

/// Simplex-valued per-pixel class probabilities, same layout as [`LogitMap`].
pub type ProbMap = Tensor;

/// Per-pixel integer class annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_elements(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("declares {n} elements, data holds {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_elements(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = checked_elements(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn from_scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    /// Natural log with the global probability floor.
    pub fn ln(&self) -> Tensor {
        self.map(ln_floored)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }
}

fn checked_elements(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "extents must be at least 1".into(),
            });
        }
        n = n.checked_mul(e).ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })?;
    }
    Ok(n)
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let n = checked_elements(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("declares {n} elements, data holds {}", data.len()),
            });
        }
        Ok(LabelMap { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = checked_elements(&shape)?;
        Ok(LabelMap {
            shape,
            data: vec![0; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Largest class index present plus one (0 for an all-background map is
    /// still 1; callers compare against their own K).
    pub fn max_class(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn check_range(&self, classes: usize) -> Result<()> {
        for &l in &self.data {
            if (l as usize) >= classes {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    classes,
                });
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut data = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            if !v.is_finite() || !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::InvalidArgument {
                    what: "label tensor",
                    reason: format!("value {v} at index {i} is not an 8-bit class id"),
                });
            }
            data.push(v as u8);
        }
        LabelMap::new(t.shape().to_vec(), data)
    }
}

/// Geometry of a `[B, K, ...]` tensor: batch, class count, and the product
/// of the remaining (spatial) extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLayout {
    pub batch: usize,
    pub classes: usize,
    pub pixels: usize,
}

impl ClassLayout {
    /// Interpret `t` as `[B, K, spatial...]` with the class axis at
    /// position 1.
    pub fn of(t: &Tensor) -> Result<ClassLayout> {
        if t.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "need rank >= 2 with a class axis at position 1".into(),
            });
        }
        let classes = t.shape()[1];
        if classes < 2 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "class axis must have extent >= 2".into(),
            });
        }
        Ok(ClassLayout {
            batch: t.shape()[0],
            classes,
            pixels: t.shape()[2..].iter().product(),
        })
    }

    pub fn total_pixels(&self) -> usize {
        self.batch * self.pixels
    }

    /// Flat offset of (batch, class, pixel).
    #[inline]
    pub fn at(&self, b: usize, k: usize, p: usize) -> usize {
        (b * self.classes + k) * self.pixels + p
    }
}

/// Per-pixel softmax over the class axis (position 1) with max-subtraction
/// stabilization. Errors on non-finite input.
pub fn softmax_channels(logits: &LogitMap) -> Result<ProbMap> {
    let layout = ClassLayout::of(logits)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            context: "softmax input logits".into(),
        });
    }
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..layout.batch {
        for p in 0..layout.pixels {
            let mut m = f64::NEG_INFINITY;
            for k in 0..layout.classes {
                m = m.max(src[layout.at(b, k, p)]);
            }
            let mut z = 0.0;
            for k in 0..layout.classes {
                let e = (src[layout.at(b, k, p)] - m).exp();
                out[layout.at(b, k, p)] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for k in 0..layout.classes {
                out[layout.at(b, k, p)] *= inv;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Per-pixel argmax over the class axis, ties broken toward the lowest
/// class index. Output shape is the input shape with axis 1 removed.
pub fn argmax_channels(probs: &ProbMap) -> Result<LabelMap> {
    let layout = ClassLayout::of(probs)?;
    let src = probs.data();
    let mut out = Vec::with_capacity(layout.total_pixels());
    for b in 0..layout.batch {
        for p in 0..layout.pixels {
            let mut best_k = 0usize;
            let mut best = src[layout.at(b, 0, p)];
            for k in 1..layout.classes {
                let v = src[layout.at(b, k, p)];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            out.push(best_k as u8);
        }
    }
    let mut shape = vec![probs.shape()[0]];
    shape.extend_from_slice(&probs.shape()[2..]);
    LabelMap::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn sum_and_mean() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_close(t.sum(), 6.0, 0.0);
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_close(m.mean(), 2.5, 0.0);
    }

    #[test]
    fn exp_ln_inverse_pair() {
        for x in [0.1, 1.0, 7.5] {
            let t = Tensor::from_scalar(x);
            let back = t.ln().exp();
            assert_close(back.data()[0], x, 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![3, 2]).unwrap();
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn rejects_zero_extent_and_zero_rank() {
        assert!(Tensor::zeros(vec![]).is_err());
        assert!(Tensor::zeros(vec![2, 0]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        // (0, 0) -> (0.5, 0.5)
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert_close(p.data()[0], 0.5, 1e-15);
        assert_close(p.data()[1], 0.5, 1e-15);

        // (ln 2, 0) -> (2/3, 1/3)
        let t = Tensor::new(vec![1, 2], vec![2.0f64.ln(), 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert_close(p.data()[0], 2.0 / 3.0, 1e-12);
        assert_close(p.data()[1], 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn softmax_saturated_logits_stay_finite() {
        let t = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!(p.is_finite());
        assert_close(p.data()[0], 1.0, 1e-12);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_channels(&t).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let b = 1 + rng.next_below(3);
            let k = 2 + rng.next_below(3);
            let hw = 1 + rng.next_below(17);
            let n = b * k * hw;
            let data: Vec<f64> = (0..n).map(|_| rng.next_range(-8.0, 8.0)).collect();
            let t = Tensor::new(vec![b, k, hw], data.clone()).unwrap();
            let p = softmax_channels(&t).unwrap();
            let layout = ClassLayout::of(&p).unwrap();
            for bi in 0..b {
                for pi in 0..hw {
                    let s: f64 = (0..k).map(|ki| p.data()[layout.at(bi, ki, pi)]).sum();
                    assert_close(s, 1.0, 1e-9);
                    for ki in 0..k {
                        let v = p.data()[layout.at(bi, ki, pi)];
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
            // shift every class logit of each pixel by the same constant
            let c = rng.next_range(-50.0, 50.0);
            let shifted = t.map(|v| v + c);
            let p2 = softmax_channels(&shifted).unwrap();
            for (a, b) in p.data().iter().zip(p2.data()) {
                assert_close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_class() {
        let t = Tensor::new(vec![1, 2, 1], vec![0.5, 0.5]).unwrap();
        let l = argmax_channels(&t).unwrap();
        assert_eq!(l.data(), &[0]);
    }

    #[test]
    fn label_map_range_check() {
        let l = LabelMap::new(vec![3], vec![0, 1, 2]).unwrap();
        assert!(l.check_range(3).is_ok());
        assert!(l.check_range(2).is_err());
    }
}
