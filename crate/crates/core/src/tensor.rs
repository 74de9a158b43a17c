//! Dense array containers shared by every stage of the pipeline.
//!
//! All tensors are validated on construction and immutable afterwards, so
//! a value of one of these types always satisfies its invariants and can
//! be shared freely across threads.
//!
//! Layout is row-major and channel-last: a 3-D tensor of shape `[H, W, N]`
//! stores the `N` per-class values of pixel `(i, j)` contiguously at
//! `(i * W + j) * N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported class count; class ids are stored as `u8`.
pub const MAX_CLASSES: usize = 256;

/// Tolerance on per-pixel channel sums of a [`ProbabilityMap`].
pub const PROBABILITY_SUM_TOL: f32 = 1e-4;

/// Tolerance on per-pixel channel sums of a raw [`PriorStack`] and on the
/// total of [`GlobalPriors`].
pub const PRIOR_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dimensions {height}x{width} are empty or exceed supported size")]
    BadDimensions { height: usize, width: usize },
    #[error("num_classes {0} outside 1..={MAX_CLASSES}")]
    BadClassCount(usize),
    #[error("data length {got} does not match expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label {value} at pixel ({row}, {col}) >= num_classes {num_classes}")]
    LabelOutOfRange {
        row: usize,
        col: usize,
        value: u8,
        num_classes: usize,
    },
    #[error("negative or non-finite value {value} at pixel ({row}, {col}) channel {channel}")]
    NegativeValue {
        row: usize,
        col: usize,
        channel: usize,
        value: f32,
    },
    #[error("channel sum {sum} at pixel ({row}, {col}) outside [{lo}, {hi}]")]
    BadChannelSum {
        row: usize,
        col: usize,
        sum: f64,
        lo: f64,
        hi: f64,
    },
    #[error("value {value} at pixel ({row}, {col}) channel {channel} outside [{lo}, {hi}]")]
    ValueOutOfRange {
        row: usize,
        col: usize,
        channel: usize,
        value: f32,
        lo: f32,
        hi: f32,
    },
    #[error("global prior for class {class} is {value}; priors must be strictly positive")]
    NonpositiveGlobalPrior { class: usize, value: f64 },
    #[error("global priors sum to {sum}, expected 1 +/- {PRIOR_SUM_TOL}")]
    BadGlobalPriorSum { sum: f64 },
    #[error("non-finite feature value at pixel ({row}, {col})")]
    NonFiniteFeature { row: usize, col: usize },
}

fn check_dims(height: usize, width: usize) -> Result<(), TensorError> {
    // 1 GiB of f32 payload is far beyond anything this toolkit targets.
    let ok = height >= 1
        && width >= 1
        && height
            .checked_mul(width)
            .is_some_and(|p| p <= (1usize << 28));
    if ok {
        Ok(())
    } else {
        Err(TensorError::BadDimensions { height, width })
    }
}

fn check_classes(num_classes: usize) -> Result<(), TensorError> {
    if (1..=MAX_CLASSES).contains(&num_classes) {
        Ok(())
    } else {
        Err(TensorError::BadClassCount(num_classes))
    }
}

/// H x W image of class ids (ground truth or decision-rule output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// Builds a label map, checking that every value is `< num_classes`.
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<u8>,
    ) -> Result<Self, TensorError> {
        check_dims(height, width)?;
        check_classes(num_classes)?;
        let expected = height * width;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if num_classes < MAX_CLASSES {
            for (idx, &v) in data.iter().enumerate() {
                if usize::from(v) >= num_classes {
                    return Err(TensorError::LabelOutOfRange {
                        row: idx / width,
                        col: idx % width,
                        value: v,
                        num_classes,
                    });
                }
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    /// Constant map filled with `value`.
    pub fn filled(
        height: usize,
        width: usize,
        num_classes: usize,
        value: u8,
    ) -> Result<Self, TensorError> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }
}

/// H x W x N per-pixel posterior tensor, typically a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// Builds a probability map, checking non-negativity and that every
    /// pixel's channel sum lies within [`PROBABILITY_SUM_TOL`] of 1.
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        check_dims(height, width)?;
        check_classes(num_classes)?;
        let expected = height * width * num_classes;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        let lo = 1.0 - f64::from(PROBABILITY_SUM_TOL);
        let hi = 1.0 + f64::from(PROBABILITY_SUM_TOL);
        for pixel in 0..height * width {
            let base = pixel * num_classes;
            let mut sum = 0.0f64;
            for (channel, &v) in data[base..base + num_classes].iter().enumerate() {
                // Written so NaN fails the check too.
                if !(v >= 0.0) {
                    return Err(TensorError::NegativeValue {
                        row: pixel / width,
                        col: pixel % width,
                        channel,
                        value: v,
                    });
                }
                sum += f64::from(v);
            }
            if !(lo..=hi).contains(&sum) {
                return Err(TensorError::BadChannelSum {
                    row: pixel / width,
                    col: pixel % width,
                    sum,
                    lo,
                    hi,
                });
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `N` posteriors of pixel `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }
}

/// H x W x N stack of pixel-wise class priors.
///
/// A raw stack (as counted from training labels) has per-pixel channel
/// sums of 1. A smoothed stack has been Gaussian-filtered and floored at
/// `cutoff`; its channel sums may deviate from 1 because neither the
/// cutoff nor the smoothing renormalizes across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStack {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
    smoothed: bool,
    cutoff: f32,
}

impl PriorStack {
    /// Builds a raw stack: all values in [0, 1], per-pixel sums 1 within
    /// [`PRIOR_SUM_TOL`].
    pub fn new_raw(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        check_dims(height, width)?;
        check_classes(num_classes)?;
        let expected = height * width * num_classes;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        for pixel in 0..height * width {
            let base = pixel * num_classes;
            let mut sum = 0.0f64;
            for (channel, &v) in data[base..base + num_classes].iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TensorError::ValueOutOfRange {
                        row: pixel / width,
                        col: pixel % width,
                        channel,
                        value: v,
                        lo: 0.0,
                        hi: 1.0,
                    });
                }
                sum += f64::from(v);
            }
            if (sum - 1.0).abs() > PRIOR_SUM_TOL {
                return Err(TensorError::BadChannelSum {
                    row: pixel / width,
                    col: pixel % width,
                    sum,
                    lo: 1.0 - PRIOR_SUM_TOL,
                    hi: 1.0 + PRIOR_SUM_TOL,
                });
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
            smoothed: false,
            cutoff: 0.0,
        })
    }

    /// Builds a smoothed stack: all values in [cutoff, 1].
    pub fn new_smoothed(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f32>,
        cutoff: f32,
    ) -> Result<Self, TensorError> {
        check_dims(height, width)?;
        check_classes(num_classes)?;
        let expected = height * width * num_classes;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        for (idx, &v) in data.iter().enumerate() {
            if !(cutoff..=1.0).contains(&v) {
                let pixel = idx / num_classes;
                return Err(TensorError::ValueOutOfRange {
                    row: pixel / width,
                    col: pixel % width,
                    channel: idx % num_classes,
                    value: v,
                    lo: cutoff,
                    hi: 1.0,
                });
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
            smoothed: true,
            cutoff,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn smoothed(&self) -> bool {
        self.smoothed
    }

    pub fn cutoff(&self) -> f32 {
        self.cutoff
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> f32 {
        self.data[(row * self.width + col) * self.num_classes + class]
    }

    /// The `N` priors of pixel `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }
}

/// One scalar prior per class; strictly positive, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GlobalPriorsRepr", into = "GlobalPriorsRepr")]
pub struct GlobalPriors {
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GlobalPriorsRepr {
    values: Vec<f64>,
}

impl TryFrom<GlobalPriorsRepr> for GlobalPriors {
    type Error = TensorError;

    fn try_from(repr: GlobalPriorsRepr) -> Result<Self, TensorError> {
        GlobalPriors::new(repr.values)
    }
}

impl From<GlobalPriors> for GlobalPriorsRepr {
    fn from(p: GlobalPriors) -> Self {
        GlobalPriorsRepr { values: p.values }
    }
}

impl GlobalPriors {
    pub fn new(values: Vec<f64>) -> Result<Self, TensorError> {
        check_classes(values.len())?;
        for (class, &v) in values.iter().enumerate() {
            if !(v > 0.0) {
                return Err(TensorError::NonpositiveGlobalPrior { class, value: v });
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(TensorError::BadGlobalPriorSum { sum });
        }
        Ok(Self { values })
    }

    /// Uniform priors 1/N.
    pub fn uniform(num_classes: usize) -> Result<Self, TensorError> {
        Self::new(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, class: usize) -> f64 {
        self.values[class]
    }
}

/// H x W scalar feature image produced by the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        check_dims(height, width)?;
        let expected = height * width;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteFeature {
                row: idx / width,
                col: idx % width,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}
