//! Seeded synthetic 2-D segmentation task with irreducible label noise and
//! a known Bayes posterior.
//!
//! Each image holds 1-3 smooth blobs (sums of axis-aligned Gaussian bumps)
//! on a negative baseline. The latent field `f` defines the true posterior
//! `P(y=1 | f) = sigmoid(f / tau)`; labels are Bernoulli draws from that
//! posterior and images are `f` plus Gaussian intensity noise. Because the
//! posterior is stored alongside every sample, any predicted probability
//! map can be compared against the genuine calibration floor of the task.
//!
//! Blob centers keep a clearance ring around the image center, so the
//! center pixel is foreground only through the sigmoid tail. That keeps
//! the center-biased batch sampler's foreground rate close to its nominal
//! probability while leaving enough center-foreground samples for it to
//! draw from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CalibrationAccumulator, CalibrationReport};
use crate::rng::Rng;
use crate::sgt1;
use crate::tensor::{LabelMap, Tensor};

/// Generator parameters. Defaults give 64x64 images with ~6-30% foreground
/// and a soft uncertainty band several pixels wide around every blob, wide
/// enough that trained models leave a measurable calibration gap above the
/// Bayes floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_num_train")]
    pub num_train: usize,
    #[serde(default = "default_num_val")]
    pub num_val: usize,
    #[serde(default = "default_num_test")]
    pub num_test: usize,
    /// Intensity noise scale added to the observed image.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Boundary softness temperature of the posterior sigmoid.
    #[serde(default = "default_ambiguity_tau")]
    pub ambiguity_tau: f64,
    pub seed: u64,
}

fn default_height() -> usize {
    64
}
fn default_width() -> usize {
    64
}
fn default_num_train() -> usize {
    200
}
fn default_num_val() -> usize {
    24
}
fn default_num_test() -> usize {
    60
}
fn default_noise_sigma() -> f64 {
    0.5
}
fn default_ambiguity_tau() -> f64 {
    0.35
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            height: default_height(),
            width: default_width(),
            num_train: default_num_train(),
            num_val: default_num_val(),
            num_test: default_num_test(),
            noise_sigma: default_noise_sigma(),
            ambiguity_tau: default_ambiguity_tau(),
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "task extents must be at least 16, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !self.ambiguity_tau.is_finite() || self.ambiguity_tau <= 0.0 {
            return Err(Error::Config(format!(
                "ambiguity_tau must be finite and > 0, got {}",
                self.ambiguity_tau
            )));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return Err(Error::Config(
                "train and test splits must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

// Blob geometry, in units of the 64x64 reference frame and scaled with the
// configured extents.
const BUMPS_MIN: usize = 1;
const BUMPS_MAX: usize = 3;
const SIGMA_MIN_FRAC: f64 = 6.0 / 64.0;
const SIGMA_MAX_FRAC: f64 = 9.0 / 64.0;
const AMPLITUDE_MIN: f64 = 3.0;
const AMPLITUDE_MAX: f64 = 4.0;
const BASELINE: f64 = 1.0;
const CENTER_MARGIN_FRAC: f64 = 7.0 / 64.0;
const CENTER_CLEARANCE_FRAC: f64 = 18.0 / 64.0;

/// One generated sample: the observed image, the drawn label map, and the
/// true posterior the label was drawn from.
#[derive(Debug, Clone)]
pub struct SynthSample {
    /// Observed image `[1, H, W]`.
    pub image: Tensor,
    /// Drawn label map `[H, W]`.
    pub label: LabelMap,
    /// True `P(y = 1 | f)` per pixel, `[H, W]`.
    pub bayes_posterior: Tensor,
}

impl SynthSample {
    /// Center pixel label (integer-division center).
    pub fn center_is_foreground(&self) -> bool {
        let h = self.label.shape()[0];
        let w = self.label.shape()[1];
        self.label.data()[(h / 2) * w + w / 2] == 1
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.label.data().iter().filter(|&&y| y == 1).count();
        fg as f64 / self.label.len() as f64
    }
}

/// Train/val/test splits, disjoint by construction (distinct sub-seed
/// streams per split).
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    pub config: TaskConfig,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VAL: u64 = 2;
const SPLIT_TEST: u64 = 3;

/// Generate all three splits deterministically from the config seed. Each
/// image owns an independent substream, so generation order cannot leak
/// between images.
pub fn generate(config: &TaskConfig) -> Result<DatasetSplits> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let gen_split = |tag: u64, n: usize| -> Vec<SynthSample> {
        (0..n)
            .map(|i| generate_one(config, root.derive(tag << 32 | i as u64)))
            .collect()
    };
    Ok(DatasetSplits {
        train: gen_split(SPLIT_TRAIN, config.num_train),
        val: gen_split(SPLIT_VAL, config.num_val),
        test: gen_split(SPLIT_TEST, config.num_test),
        config: config.clone(),
    })
}

fn generate_one(config: &TaskConfig, mut rng: Rng) -> SynthSample {
    let h = config.height;
    let w = config.width;
    let hw = h * w;
    let scale = ((h * w) as f64).sqrt();
    let margin = CENTER_MARGIN_FRAC * scale;
    let clearance = CENTER_CLEARANCE_FRAC * scale;
    let cy0 = h as f64 / 2.0;
    let cx0 = w as f64 / 2.0;

    let n_bumps = BUMPS_MIN + rng.next_below(BUMPS_MAX - BUMPS_MIN + 1);
    let mut field = vec![-BASELINE; hw];
    for _ in 0..n_bumps {
        // centers stay off the image edges and outside the central
        // clearance ring
        let (cy, cx) = loop {
            let cy = rng.next_range(margin, h as f64 - margin);
            let cx = rng.next_range(margin, w as f64 - margin);
            let d2 = (cy - cy0) * (cy - cy0) + (cx - cx0) * (cx - cx0);
            if d2 >= clearance * clearance {
                break (cy, cx);
            }
        };
        let sy = rng.next_range(SIGMA_MIN_FRAC * scale, SIGMA_MAX_FRAC * scale);
        let sx = rng.next_range(SIGMA_MIN_FRAC * scale, SIGMA_MAX_FRAC * scale);
        let amp = rng.next_range(AMPLITUDE_MIN, AMPLITUDE_MAX);
        let inv_2sy2 = 1.0 / (2.0 * sy * sy);
        let inv_2sx2 = 1.0 / (2.0 * sx * sx);
        for y in 0..h {
            let dy = y as f64 - cy;
            let ey = (-dy * dy * inv_2sy2).exp();
            for x in 0..w {
                let dx = x as f64 - cx;
                field[y * w + x] += amp * ey * (-dx * dx * inv_2sx2).exp();
            }
        }
    }

    let mut posterior = vec![0.0; hw];
    let mut labels = vec![0u8; hw];
    let inv_tau = 1.0 / config.ambiguity_tau;
    for i in 0..hw {
        let p = 1.0 / (1.0 + (-field[i] * inv_tau).exp());
        posterior[i] = p;
        labels[i] = (rng.next_f64() < p) as u8;
    }
    let mut image = vec![0.0; hw];
    for i in 0..hw {
        image[i] = field[i] + config.noise_sigma * rng.next_normal();
    }

    SynthSample {
        image: Tensor::new(vec![1, h, w], image).expect("image shape"),
        label: LabelMap::new(vec![h, w], labels).expect("label shape"),
        bayes_posterior: Tensor::new(vec![h, w], posterior).expect("posterior shape"),
    }
}

/// Draw `batch` sample indices: with probability `fg_prob` uniformly from
/// the samples whose center pixel is foreground, otherwise uniformly from
/// the whole split. Errors when `fg_prob > 0` but no sample has a
/// foreground center.
pub fn biased_batch_sampler(
    split: &[SynthSample],
    batch: usize,
    fg_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if split.is_empty() {
        return Err(Error::EmptySet {
            what: "sampler split",
            reason: "cannot sample from an empty split".into(),
        });
    }
    if !(0.0..=1.0).contains(&fg_prob) {
        return Err(Error::InvalidArgument {
            what: "fg_prob",
            reason: format!("must be in [0, 1], got {fg_prob}"),
        });
    }
    let fg_indices: Vec<usize> = split
        .iter()
        .enumerate()
        .filter(|(_, s)| s.center_is_foreground())
        .map(|(i, _)| i)
        .collect();
    if fg_prob > 0.0 && fg_indices.is_empty() {
        return Err(Error::EmptySet {
            what: "foreground-centered samples",
            reason: "no sample in the split has a foreground center pixel".into(),
        });
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let use_fg = rng.next_f64() < fg_prob;
        if use_fg {
            out.push(fg_indices[rng.next_below(fg_indices.len())]);
        } else {
            out.push(rng.next_below(split.len()));
        }
    }
    Ok(out)
}

/// Binary `[B, 2, H, W]` probability map from a posterior `[H, W]`.
pub fn posterior_to_probs(sample: &SynthSample) -> Result<Tensor> {
    let h = sample.bayes_posterior.shape()[0];
    let w = sample.bayes_posterior.shape()[1];
    let hw = h * w;
    let mut data = vec![0.0; 2 * hw];
    for (i, &p) in sample.bayes_posterior.data().iter().enumerate() {
        data[i] = 1.0 - p;
        data[hw + i] = p;
    }
    Tensor::new(vec![1, 2, h, w], data)
}

/// Calibration report of the true posterior evaluated as if it were a
/// model's probability map. Its ECE estimates the floor attainable on this
/// task.
pub fn bayes_reference_report(split: &[SynthSample], ece_bins: usize) -> Result<CalibrationReport> {
    if split.is_empty() {
        return Err(Error::EmptySet {
            what: "split",
            reason: "cannot evaluate an empty split".into(),
        });
    }
    let mut acc = CalibrationAccumulator::new(ece_bins)?;
    for sample in split {
        let probs = posterior_to_probs(sample)?;
        let mut labels = sample.label.clone();
        let mut shape = vec![1usize];
        shape.extend_from_slice(sample.label.shape());
        labels = LabelMap::new(shape, labels.data().to_vec())?;
        acc.push(&probs, &labels)?;
    }
    acc.finish()
}

// ---- persistence ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: TaskConfig,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
}

impl DatasetManifest {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::json("dataset manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let names: Vec<&str> = self.splits.iter().map(|s| s.name.as_str()).collect();
        if names != ["train", "val", "test"] {
            return Err(Error::Config(format!(
                "manifest must list splits train/val/test in order, got {names:?}"
            )));
        }
        for s in &self.splits {
            if s.count > 1_000_000 {
                return Err(Error::Config(format!(
                    "split {} count {} is implausibly large",
                    s.name, s.count
                )));
            }
        }
        Ok(())
    }
}

/// Persist all splits: per sample an image (f64), label (u8), and
/// posterior (f64) SGT1 file, plus `manifest.json`.
pub fn save_dataset(splits: &DatasetSplits, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (name, split) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let split_dir = dir.join(name);
        std::fs::create_dir_all(&split_dir)
            .map_err(|e| Error::io(split_dir.display().to_string(), e))?;
        for (i, sample) in split.iter().enumerate() {
            sgt1::save_tensor(&sample.image, split_dir.join(format!("img_{i:04}.sgt1")))?;
            sgt1::save_tensor_as(
                &sample.label.to_tensor(),
                split_dir.join(format!("lab_{i:04}.sgt1")),
                sgt1::Dtype::U8,
            )?;
            sgt1::save_tensor(
                &sample.bayes_posterior,
                split_dir.join(format!("pos_{i:04}.sgt1")),
            )?;
        }
    }
    let manifest = DatasetManifest {
        config: splits.config.clone(),
        splits: vec![
            SplitEntry { name: "train".into(), count: splits.train.len() },
            SplitEntry { name: "val".into(), count: splits.val.len() },
            SplitEntry { name: "test".into(), count: splits.test.len() },
        ],
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("dataset manifest", e))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplits> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest = DatasetManifest::from_json_bytes(&bytes)?;
    let load_split = |name: &str, count: usize| -> Result<Vec<SynthSample>> {
        let split_dir = dir.join(name);
        (0..count)
            .map(|i| {
                let image = sgt1::load_tensor(split_dir.join(format!("img_{i:04}.sgt1")))?;
                let label_t = sgt1::load_tensor(split_dir.join(format!("lab_{i:04}.sgt1")))?;
                let posterior = sgt1::load_tensor(split_dir.join(format!("pos_{i:04}.sgt1")))?;
                Ok(SynthSample {
                    image,
                    label: LabelMap::from_tensor(&label_t)?,
                    bayes_posterior: posterior,
                })
            })
            .collect()
    };
    Ok(DatasetSplits {
        train: load_split("train", manifest.splits[0].count)?,
        val: load_split("val", manifest.splits[1].count)?,
        test: load_split("test", manifest.splits[2].count)?,
        config: manifest.config,
    })
}
