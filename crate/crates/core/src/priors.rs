//! Class-prior estimation from training labels.
//!
//! Priors come in two forms: a pixel-wise stack (the frequency of each
//! class at each pixel position across the corpus) and a global scalar
//! per class (the overall pixel share). Before a pixel-wise stack is used
//! by the maximum-likelihood rule it is smoothed with a truncated,
//! separable Gaussian and floored at a cutoff so that every prior is
//! strictly positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{GlobalPriors, LabelMap, PriorStack, TensorError};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("label corpus is empty")]
    EmptyCorpus,
    #[error("label map {index} has shape {got_h}x{got_w}, expected {want_h}x{want_w}")]
    ShapeMismatch {
        index: usize,
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("label map {index} holds class {value} >= num_classes {num_classes}")]
    ClassOutOfRange {
        index: usize,
        value: u8,
        num_classes: usize,
    },
    #[error("class {class} does not occur in the corpus; global priors must be positive")]
    ClassAbsent { class: usize },
    #[error("prior stack is already smoothed")]
    AlreadySmoothed,
    #[error("invalid prior config: {0}")]
    BadConfig(String),
    #[error("class {class} out of range for {num_classes} classes")]
    BadClass { class: usize, num_classes: usize },
    #[error("prior stack is {stack_n}-class but global priors hold {global_n}")]
    ClassCountMismatch { stack_n: usize, global_n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters of the smoothing step.
///
/// `sigma` is the Gaussian standard deviation in pixels, `cutoff` the
/// lower floor applied after filtering, and `kernel_radius_sigmas` the
/// truncation radius of the kernel in units of sigma.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_kernel_radius_sigmas")]
    pub kernel_radius_sigmas: f64,
}

fn default_sigma() -> f64 {
    80.0
}

fn default_cutoff() -> f64 {
    1e-5
}

fn default_kernel_radius_sigmas() -> f64 {
    3.0
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            cutoff: default_cutoff(),
            kernel_radius_sigmas: default_kernel_radius_sigmas(),
        }
    }
}

impl PriorConfig {
    /// Checks the config against a stack of `num_classes` channels; the
    /// cutoff must stay below the uniform prior 1/N.
    pub fn validate(&self, num_classes: usize) -> Result<(), PriorError> {
        if !(self.sigma >= 0.0) {
            return Err(PriorError::BadConfig(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.cutoff > 0.0) || self.cutoff >= 1.0 / num_classes as f64 {
            return Err(PriorError::BadConfig(format!(
                "cutoff must lie in (0, 1/{num_classes}), got {}",
                self.cutoff
            )));
        }
        if !(self.kernel_radius_sigmas >= 1.0) {
            return Err(PriorError::BadConfig(format!(
                "kernel_radius_sigmas must be >= 1, got {}",
                self.kernel_radius_sigmas
            )));
        }
        Ok(())
    }
}

/// Pixel regions where the global prior is at most / exceeds the local
/// prior of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorComparisonSets {
    pub class_id: u8,
    pub height: usize,
    pub width: usize,
    /// True where `global <= local`.
    pub mask_leq: Vec<bool>,
    /// True where `global > local`; elementwise complement of `mask_leq`.
    pub mask_gt: Vec<bool>,
}

fn check_corpus(
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<(usize, usize), PriorError> {
    let first = labels.first().ok_or(PriorError::EmptyCorpus)?;
    let (h, w) = (first.height(), first.width());
    for (index, map) in labels.iter().enumerate() {
        if map.height() != h || map.width() != w {
            return Err(PriorError::ShapeMismatch {
                index,
                want_h: h,
                want_w: w,
                got_h: map.height(),
                got_w: map.width(),
            });
        }
        if map.num_classes() > num_classes {
            // The map may still be fine; only actual values matter.
            if let Some(&v) = map.data().iter().find(|&&v| usize::from(v) >= num_classes) {
                return Err(PriorError::ClassOutOfRange {
                    index,
                    value: v,
                    num_classes,
                });
            }
        }
    }
    Ok((h, w))
}

/// Estimates pixel-wise priors: at each position, the fraction of corpus
/// maps labeled with each class.
pub fn compute_pixel_priors(
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<PriorStack, PriorError> {
    let (h, w) = check_corpus(labels, num_classes)?;
    let mut counts = vec![0u32; h * w * num_classes];
    counts
        .par_chunks_mut(w * num_classes)
        .enumerate()
        .for_each(|(row, row_counts)| {
            for map in labels {
                let row_labels = &map.data()[row * w..(row + 1) * w];
                for (col, &k) in row_labels.iter().enumerate() {
                    row_counts[col * num_classes + usize::from(k)] += 1;
                }
            }
        });
    let total = labels.len() as f64;
    let data: Vec<f32> = counts
        .iter()
        .map(|&c| (f64::from(c) / total) as f32)
        .collect();
    Ok(PriorStack::new_raw(h, w, num_classes, data)?)
}

/// Estimates global priors: each class's share of all corpus pixels.
///
/// Every class must occur at least once; a zero prior would make the
/// maximum-likelihood ratio undefined.
pub fn compute_global_priors(
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<GlobalPriors, PriorError> {
    check_corpus(labels, num_classes)?;
    let mut counts = vec![0u64; num_classes];
    for map in labels {
        for &k in map.data() {
            counts[usize::from(k)] += 1;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(PriorError::ClassAbsent { class });
    }
    let total: u64 = counts.iter().sum();
    let values = counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect::<Vec<_>>();
    Ok(GlobalPriors::new(values)?)
}

/// Normalized Gaussian kernel truncated at `radius_sigmas * sigma`.
/// Returns the half kernel including the center weight; full length is
/// `2 * (len - 1) + 1` by symmetry.
fn gaussian_kernel(sigma: f64, radius_sigmas: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (radius_sigmas * sigma).ceil() as usize;
    let mut weights = Vec::with_capacity(2 * radius + 1);
    for t in -(radius as i64)..=radius as i64 {
        let z = t as f64 / sigma;
        weights.push((-0.5 * z * z).exp());
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// Half-sample symmetric reflection: ... d c b a | a b c d | d c b a ...
/// Valid for any out-of-range index, including kernels larger than the
/// axis.
fn reflect(index: i64, len: usize) -> usize {
    let n = len as i64;
    let period = 2 * n;
    let mut m = index % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable 2-D Gaussian filter with reflect boundary handling, in f64.
pub(crate) fn gaussian_smooth_2d(
    data: &[f64],
    height: usize,
    width: usize,
    sigma: f64,
    radius_sigmas: f64,
) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma, radius_sigmas);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let radius = (kernel.len() - 1) / 2;

    // Horizontal pass.
    let mut tmp = vec![0.0f64; data.len()];
    for row in 0..height {
        let src = &data[row * width..(row + 1) * width];
        let dst = &mut tmp[row * width..(row + 1) * width];
        for col in 0..width {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let j = col as i64 + t as i64 - radius as i64;
                acc += w * src[reflect(j, width)];
            }
            dst[col] = acc;
        }
    }

    // Vertical pass.
    let mut out = vec![0.0f64; data.len()];
    for col in 0..width {
        for row in 0..height {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let i = row as i64 + t as i64 - radius as i64;
                acc += w * tmp[reflect(i, height) * width + col];
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// Smooths each channel of a raw stack with the configured Gaussian and
/// floors the result at the cutoff. Channels are never renormalized
/// against each other.
pub fn smooth_priors(raw: &PriorStack, config: &PriorConfig) -> Result<PriorStack, PriorError> {
    if raw.smoothed() {
        return Err(PriorError::AlreadySmoothed);
    }
    let n = raw.num_classes();
    config.validate(n)?;
    let (h, w) = (raw.height(), raw.width());
    let cutoff = config.cutoff as f32;

    let channels: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let channel: Vec<f64> = raw.data()[k..]
                .iter()
                .step_by(n)
                .map(|&v| f64::from(v))
                .collect();
            let smoothed =
                gaussian_smooth_2d(&channel, h, w, config.sigma, config.kernel_radius_sigmas);
            smoothed
                .iter()
                .map(|&v| {
                    let v = (v as f32).min(1.0);
                    if v < cutoff {
                        cutoff
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    let mut data = vec![0.0f32; h * w * n];
    for (k, channel) in channels.iter().enumerate() {
        for (pixel, &v) in channel.iter().enumerate() {
            data[pixel * n + k] = v;
        }
    }
    Ok(PriorStack::new_smoothed(h, w, n, data, cutoff)?)
}

/// Splits the image into the region where the global prior is at most the
/// local prior of `class_id` and its complement.
pub fn prior_comparison_sets(
    local: &PriorStack,
    global: &GlobalPriors,
    class_id: u8,
) -> Result<PriorComparisonSets, PriorError> {
    let n = local.num_classes();
    if global.num_classes() != n {
        return Err(PriorError::ClassCountMismatch {
            stack_n: n,
            global_n: global.num_classes(),
        });
    }
    let class = usize::from(class_id);
    if class >= n {
        return Err(PriorError::BadClass {
            class,
            num_classes: n,
        });
    }
    let g = global.get(class);
    let mask_leq: Vec<bool> = local.data()[class..]
        .iter()
        .step_by(n)
        .map(|&local_v| g <= f64::from(local_v))
        .collect();
    let mask_gt = mask_leq.iter().map(|&b| !b).collect();
    Ok(PriorComparisonSets {
        class_id,
        height: local.height(),
        width: local.width(),
        mask_leq,
        mask_gt,
    })
}
