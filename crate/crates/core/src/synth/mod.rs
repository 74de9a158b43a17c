//! Synthetic scenes with a known generative model.
//!
//! A scene is a label map plus a scalar feature image. Per class,
//! Poisson-many rectangular or elliptical objects are placed with centers
//! drawn from a class-specific 2-D Gaussian over image coordinates, so
//! classes concentrate in different image regions the way real street
//! classes do. Later objects overwrite earlier ones. Features are drawn
//! per pixel from the Gaussian of the pixel's final class, optionally
//! with spatial correlation (which leaves the per-pixel marginal exactly
//! class-Gaussian but makes decision errors blob-shaped instead of
//! salt-and-pepper).
//!
//! Because the generative model is known in closed form, the exact
//! per-pixel posterior under any prior field is available as an oracle,
//! which is what makes desk-scale verification of the decision-rule
//! claims possible.
//!
//! Everything is deterministic given a seed; see [`rng`] for the fixed
//! generator and sampling methods. Draw order within a scene: for each
//! class in ascending id order, the object count, then per object the
//! center (pairs of normals until the rounded center lands inside the
//! image), the shape bit (only when the class allows both shapes), the
//! area, the aspect ratio; after all painting, one normal per pixel in
//! row-major order for the feature field.

pub mod rng;

mod experiment;

pub use experiment::{
    global_vs_local_scenario, run_experiment, write_experiment_artifacts, AnalysisParams,
    CorpusParams, CostVerdict, DominanceVerdict, ExperimentConfig, ExperimentReport, PairedCost,
    PerRule, ScenarioParams, ScenarioReport, Verdicts, DOMINANCE_TOLERANCE,
    NONDETECTION_MAX_RATIO,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{DecisionError, Priors};
use crate::priors::PriorError;
use crate::tensor::{FeatureMap, LabelMap, ProbabilityMap, TensorError};

use rng::Rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error("placement rejection for class {class} did not land inside the image")]
    PlacementFailed { class: usize },
    #[error("scenario region is empty: no pixel satisfies the prior conflict")]
    ScenarioInfeasible,
    #[error("features are {got_h}x{got_w}, priors are {want_h}x{want_w}")]
    ShapeMismatch {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("config has {config_n} classes, priors hold {prior_n}")]
    ClassCountMismatch { config_n: usize, prior_n: usize },
    #[error("prior for class {class} at pixel ({row}, {col}) is {value}; must be > 0")]
    NonpositivePrior {
        row: usize,
        col: usize,
        class: usize,
        value: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
}

/// Object shapes a class may produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    #[default]
    Mixed,
}

/// Generative model of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Poisson mean of the object count per scene; 0 for the background.
    pub count_mean: f64,
    /// Inclusive object area range in pixels.
    pub size_range: (u32, u32),
    /// Center distribution over (row, col).
    pub placement_mean: (f64, f64),
    pub placement_std: (f64, f64),
    /// Scalar feature model.
    pub feature_mean: f64,
    pub feature_std: f64,
    #[serde(default)]
    pub shape: ShapeKind,
}

/// Full scene model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub background_class: u8,
    /// Gaussian correlation length of the feature noise field, in
    /// pixels; 0 means i.i.d. noise.
    #[serde(default)]
    pub noise_correlation_sigma: f64,
    pub classes: Vec<ClassSpec>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.height < 1 || self.width < 1 {
            return bad("image dimensions must be positive".into());
        }
        if self.classes.len() != self.num_classes {
            return bad(format!(
                "{} class specs for {} classes",
                self.classes.len(),
                self.num_classes
            ));
        }
        if usize::from(self.background_class) >= self.num_classes {
            return bad(format!(
                "background class {} out of range",
                self.background_class
            ));
        }
        if self.classes[usize::from(self.background_class)].count_mean != 0.0 {
            return bad("background class must have count_mean 0".into());
        }
        for (k, spec) in self.classes.iter().enumerate() {
            if !(spec.count_mean >= 0.0) || !spec.count_mean.is_finite() {
                return bad(format!("class {k}: count_mean must be finite and >= 0"));
            }
            if !(spec.feature_std > 0.0) {
                return bad(format!("class {k}: feature_std must be > 0"));
            }
            if spec.count_mean > 0.0 {
                let (lo, hi) = spec.size_range;
                if lo < 1 || lo > hi || hi as usize > self.height * self.width {
                    return bad(format!(
                        "class {k}: unsatisfiable size range {lo}..{hi}"
                    ));
                }
                let (mr, mc) = spec.placement_mean;
                if !(0.0..self.height as f64).contains(&mr)
                    || !(0.0..self.width as f64).contains(&mc)
                {
                    return bad(format!("class {k}: placement mean outside the image"));
                }
                if !(spec.placement_std.0 >= 0.0) || !(spec.placement_std.1 >= 0.0) {
                    return bad(format!("class {k}: placement std must be >= 0"));
                }
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.classes[a].feature_mean == self.classes[b].feature_mean {
                    return bad(format!(
                        "classes {a} and {b} share feature mean {}",
                        self.classes[a].feature_mean
                    ));
                }
            }
        }
        if !(self.noise_correlation_sigma >= 0.0) {
            return bad("noise_correlation_sigma must be >= 0".into());
        }
        if self.noise_correlation_sigma > 0.0 {
            let radius = (3.0 * self.noise_correlation_sigma).ceil() as usize;
            if 2 * radius + 1 > self.height.min(self.width) {
                return bad(format!(
                    "noise correlation kernel ({} px) exceeds the image",
                    2 * radius + 1
                ));
            }
        }
        Ok(())
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt: LabelMap,
    pub features: FeatureMap,
    pub seed: u64,
}

fn paint_rectangle(
    labels: &mut [u8],
    height: usize,
    width: usize,
    center: (usize, usize),
    area: u64,
    aspect: f64,
    class: u8,
) {
    let cols = (((area as f64) * aspect).sqrt().round() as i64).max(1);
    let rows = ((area as f64 / cols as f64).round() as i64).max(1);
    let r0 = center.0 as i64 - (rows - 1) / 2;
    let c0 = center.1 as i64 - (cols - 1) / 2;
    for r in r0.max(0)..(r0 + rows).min(height as i64) {
        for c in c0.max(0)..(c0 + cols).min(width as i64) {
            labels[r as usize * width + c as usize] = class;
        }
    }
}

fn paint_ellipse(
    labels: &mut [u8],
    height: usize,
    width: usize,
    center: (usize, usize),
    area: u64,
    aspect: f64,
    class: u8,
) {
    use std::f64::consts::PI;
    let semi_col = ((area as f64) * aspect / PI).sqrt().max(0.5);
    let semi_row = (area as f64 / (PI * semi_col)).max(0.5);
    let (cr, cc) = (center.0 as i64, center.1 as i64);
    let r_lo = (cr - semi_row.ceil() as i64).max(0);
    let r_hi = (cr + semi_row.ceil() as i64).min(height as i64 - 1);
    for r in r_lo..=r_hi {
        let dr = (r - cr) as f64 / semi_row;
        let c_lo = (cc - semi_col.ceil() as i64).max(0);
        let c_hi = (cc + semi_col.ceil() as i64).min(width as i64 - 1);
        for c in c_lo..=c_hi {
            let dc = (c - cc) as f64 / semi_col;
            if dr * dr + dc * dc <= 1.0 {
                labels[r as usize * width + c as usize] = class;
            }
        }
    }
}

/// Periodic separable Gaussian smoothing used only for the noise field.
/// With a kernel no wider than the image, every output pixel is a
/// weighted sum of distinct inputs, so dividing by the sum of squared
/// weights restores an exactly unit marginal variance.
fn correlate_noise(z: &mut [f64], height: usize, width: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for t in -(radius as i64)..=radius as i64 {
        let u = t as f64 / sigma;
        kernel.push((-0.5 * u * u).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= norm;
    }
    let sq_sum: f64 = kernel.iter().map(|w| w * w).sum();

    let mut tmp = vec![0.0f64; z.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let j = (col + width + t - radius) % width;
                acc += w * z[row * width + j];
            }
            tmp[row * width + col] = acc;
        }
    }
    for col in 0..width {
        for row in 0..height {
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let i = (row + height + t - radius) % height;
                acc += w * tmp[i * width + col];
            }
            z[row * width + col] = acc / sq_sum;
        }
    }
}

/// Draws the feature image for final labels: one standard normal per
/// pixel in row-major order, optionally spatially correlated, scaled and
/// shifted by the class feature model.
fn sample_features(
    labels: &[u8],
    config: &SynthConfig,
    rng: &mut Rng,
) -> Result<FeatureMap, SynthError> {
    let (h, w) = (config.height, config.width);
    let mut noise: Vec<f64> = (0..h * w).map(|_| rng.next_gaussian()).collect();
    if config.noise_correlation_sigma > 0.0 {
        correlate_noise(&mut noise, h, w, config.noise_correlation_sigma);
    }
    let features: Vec<f32> = labels
        .iter()
        .zip(&noise)
        .map(|(&k, &z)| {
            let spec = &config.classes[usize::from(k)];
            (spec.feature_mean + spec.feature_std * z) as f32
        })
        .collect();
    Ok(FeatureMap::new(h, w, features)?)
}

/// Generates one scene; bit-identical output for equal (config, seed).
pub fn generate_scene(config: &SynthConfig, seed: u64) -> Result<Scene, SynthError> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = Rng::new(seed);
    let mut labels = vec![config.background_class; h * w];

    for (class, spec) in config.classes.iter().enumerate() {
        if spec.count_mean == 0.0 {
            continue;
        }
        let count = rng.next_poisson(spec.count_mean);
        for _ in 0..count {
            let mut center = None;
            for _ in 0..10_000 {
                let r = spec.placement_mean.0 + spec.placement_std.0 * rng.next_gaussian();
                let c = spec.placement_mean.1 + spec.placement_std.1 * rng.next_gaussian();
                let (ri, ci) = (r.round() as i64, c.round() as i64);
                if ri >= 0 && ci >= 0 && (ri as usize) < h && (ci as usize) < w {
                    center = Some((ri as usize, ci as usize));
                    break;
                }
            }
            let center = center.ok_or(SynthError::PlacementFailed { class })?;
            let rectangular = match spec.shape {
                ShapeKind::Rectangle => true,
                ShapeKind::Ellipse => false,
                ShapeKind::Mixed => rng.next_u64() & 1 == 0,
            };
            let area = rng.next_range(
                u64::from(spec.size_range.0),
                u64::from(spec.size_range.1),
            );
            let aspect = 0.5 + 1.5 * rng.next_open01();
            if rectangular {
                paint_rectangle(&mut labels, h, w, center, area, aspect, class as u8);
            } else {
                paint_ellipse(&mut labels, h, w, center, area, aspect, class as u8);
            }
        }
    }

    let features = sample_features(&labels, config, &mut rng)?;
    Ok(Scene {
        gt: LabelMap::new(h, w, config.num_classes, labels)?,
        features,
        seed,
    })
}

/// Exact per-pixel posterior of the generative model under the given
/// prior field: the product of the class-conditional Gaussian density
/// and the prior at that pixel, normalized over classes.
pub fn oracle_posteriors(
    features: &FeatureMap,
    config: &SynthConfig,
    priors: Priors,
) -> Result<ProbabilityMap, SynthError> {
    let (h, w) = (features.height(), features.width());
    let n = config.num_classes;
    if priors.num_classes() != n {
        return Err(SynthError::ClassCountMismatch {
            config_n: n,
            prior_n: priors.num_classes(),
        });
    }
    if let Priors::Local(stack) = priors {
        if stack.height() != h || stack.width() != w {
            return Err(SynthError::ShapeMismatch {
                want_h: stack.height(),
                want_w: stack.width(),
                got_h: h,
                got_w: w,
            });
        }
    }

    let log_stds: Vec<f64> = config
        .classes
        .iter()
        .map(|c| c.feature_std.ln())
        .collect();
    let mut data = vec![0.0f32; h * w * n];
    let mut scores = vec![0.0f64; n];
    for pixel in 0..h * w {
        let x = f64::from(features.data()[pixel]);
        for k in 0..n {
            let prior = match priors {
                Priors::Local(stack) => f64::from(stack.data()[pixel * n + k]),
                Priors::Global(global) => global.get(k),
            };
            if !(prior > 0.0) {
                return Err(SynthError::NonpositivePrior {
                    row: pixel / w,
                    col: pixel % w,
                    class: k,
                    value: prior,
                });
            }
            let spec = &config.classes[k];
            let z = (x - spec.feature_mean) / spec.feature_std;
            scores[k] = -0.5 * z * z - log_stds[k] + prior.ln();
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0f64;
        for k in 0..n {
            scores[k] = (scores[k] - max).exp();
            norm += scores[k];
        }
        for k in 0..n {
            data[pixel * n + k] = (scores[k] / norm) as f32;
        }
    }
    Ok(ProbabilityMap::new(h, w, n, data)?)
}

/// Derives the seed of scene `index` from the master seed: the master is
/// scrambled once before the index is folded in, so nearby master seeds
/// do not share scene-seed sets.
pub fn scene_seed(master_seed: u64, index: u64) -> u64 {
    rng::mix64(rng::mix64(master_seed) ^ index)
}

#[cfg(test)]
pub(crate) fn sample_features_for_test(
    labels: &[u8],
    config: &SynthConfig,
    rng: &mut Rng,
) -> FeatureMap {
    sample_features(labels, config, rng).unwrap()
}
