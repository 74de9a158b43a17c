//! The Bayes and maximum-likelihood decision rules.
//!
//! Both rules map a probability map to a label map pixel by pixel. The
//! Bayes rule takes the class with the largest posterior. The
//! maximum-likelihood rule divides each posterior by the class prior
//! first, which removes the prior belief and decides purely by how
//! typical the observed pattern is for each class. With uniform priors
//! the two rules coincide.
//!
//! Ratio comparisons run in f64; ties break toward the smallest class id.

use thiserror::Error;

use crate::metrics::ConfusionMatrix;
use crate::tensor::{GlobalPriors, LabelMap, PriorStack, ProbabilityMap};

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("probability map is {got_h}x{got_w}x{got_n}, priors are {want_h}x{want_w}x{want_n}")]
    ShapeMismatch {
        want_h: usize,
        want_w: usize,
        want_n: usize,
        got_h: usize,
        got_w: usize,
        got_n: usize,
    },
    #[error("probability map holds {map_n} classes, priors hold {prior_n}")]
    ClassCountMismatch { map_n: usize, prior_n: usize },
    #[error("prior for class {class} at pixel ({row}, {col}) is {value}; must be > 0")]
    NonpositivePrior {
        row: usize,
        col: usize,
        class: usize,
        value: f64,
    },
    #[error("no probability maps given")]
    EmptyInput,
    #[error("probability map {index} does not match the shape of map 0")]
    AverageShapeMismatch { index: usize },
    #[error("confusion matrix is empty; expected cost is undefined")]
    ZeroTotalCount,
    #[error("cost constant must be > 0, got {0}")]
    BadCostConstant(f64),
    #[error("confusion matrix has {matrix_n} classes, priors hold {prior_n}")]
    CostClassMismatch { matrix_n: usize, prior_n: usize },
}

/// Prior source for the maximum-likelihood rule: one prior per pixel and
/// class, or one scalar per class.
#[derive(Debug, Clone, Copy)]
pub enum Priors<'a> {
    Local(&'a PriorStack),
    Global(&'a GlobalPriors),
}

impl Priors<'_> {
    pub fn num_classes(&self) -> usize {
        match self {
            Priors::Local(stack) => stack.num_classes(),
            Priors::Global(global) => global.num_classes(),
        }
    }
}

/// A decision rule ready to apply to probability maps.
#[derive(Debug, Clone, Copy)]
pub enum DecisionRule<'a> {
    Bayes,
    MaximumLikelihood(Priors<'a>),
}

impl DecisionRule<'_> {
    pub fn apply(&self, probs: &ProbabilityMap) -> Result<LabelMap, DecisionError> {
        match self {
            DecisionRule::Bayes => Ok(decide_bayes(probs)),
            DecisionRule::MaximumLikelihood(priors) => decide_ml(probs, *priors),
        }
    }
}

/// Cost of a single misclassification, used by [`expected_cost`].
///
/// `Symmetric` charges a flat `cost` for any confusion.
/// `InverseProportional` charges `cost / p(k)` for misclassifying an
/// object whose true class is `k`, so mistakes on rare classes weigh
/// heavier.
#[derive(Debug, Clone)]
pub enum CostModel {
    Symmetric { cost: f64 },
    InverseProportional { cost: f64, priors: GlobalPriors },
}

/// Argmax over one pixel's channel slice; ties go to the smallest id.
#[inline]
fn argmax_f64(values: impl Iterator<Item = f64>) -> u8 {
    let mut best = f64::NEG_INFINITY;
    let mut best_k = 0u8;
    for (k, v) in values.enumerate() {
        if v > best {
            best = v;
            best_k = k as u8;
        }
    }
    best_k
}

/// Bayes rule: per-pixel argmax of the posterior.
pub fn decide_bayes(probs: &ProbabilityMap) -> LabelMap {
    let n = probs.num_classes();
    let data: Vec<u8> = probs
        .data()
        .chunks_exact(n)
        .map(|pixel| argmax_f64(pixel.iter().map(|&v| f64::from(v))))
        .collect();
    LabelMap::new(probs.height(), probs.width(), n, data)
        .expect("argmax of a valid probability map is a valid label map")
}

fn check_local_priors(
    probs: &ProbabilityMap,
    stack: &PriorStack,
) -> Result<(), DecisionError> {
    if stack.height() != probs.height()
        || stack.width() != probs.width()
        || stack.num_classes() != probs.num_classes()
    {
        return Err(DecisionError::ShapeMismatch {
            want_h: stack.height(),
            want_w: stack.width(),
            want_n: stack.num_classes(),
            got_h: probs.height(),
            got_w: probs.width(),
            got_n: probs.num_classes(),
        });
    }
    let n = stack.num_classes();
    let w = stack.width();
    if let Some((idx, &v)) = stack
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0))
    {
        let pixel = idx / n;
        return Err(DecisionError::NonpositivePrior {
            row: pixel / w,
            col: pixel % w,
            class: idx % n,
            value: f64::from(v),
        });
    }
    Ok(())
}

/// Maximum-likelihood rule: per-pixel argmax of posterior / prior.
pub fn decide_ml(probs: &ProbabilityMap, priors: Priors) -> Result<LabelMap, DecisionError> {
    let n = probs.num_classes();
    let data: Vec<u8> = match priors {
        Priors::Local(stack) => {
            check_local_priors(probs, stack)?;
            probs
                .data()
                .chunks_exact(n)
                .zip(stack.data().chunks_exact(n))
                .map(|(posteriors, pixel_priors)| {
                    argmax_f64(
                        posteriors
                            .iter()
                            .zip(pixel_priors)
                            .map(|(&p, &q)| f64::from(p) / f64::from(q)),
                    )
                })
                .collect()
        }
        Priors::Global(global) => {
            if global.num_classes() != n {
                return Err(DecisionError::ClassCountMismatch {
                    map_n: n,
                    prior_n: global.num_classes(),
                });
            }
            // GlobalPriors values are strictly positive by construction.
            let q = global.values();
            probs
                .data()
                .chunks_exact(n)
                .map(|posteriors| {
                    argmax_f64(
                        posteriors
                            .iter()
                            .zip(q)
                            .map(|(&p, &prior)| f64::from(p) / prior),
                    )
                })
                .collect()
        }
    };
    Ok(LabelMap::new(probs.height(), probs.width(), n, data)
        .expect("argmax of a valid probability map is a valid label map"))
}

/// Elementwise arithmetic mean of several probability maps, e.g. of
/// stochastic forward passes under dropout.
pub fn average_probability_maps(
    maps: &[ProbabilityMap],
) -> Result<ProbabilityMap, DecisionError> {
    let first = maps.first().ok_or(DecisionError::EmptyInput)?;
    for (index, map) in maps.iter().enumerate().skip(1) {
        if !map.same_shape(first) {
            return Err(DecisionError::AverageShapeMismatch { index });
        }
    }
    let count = maps.len() as f64;
    let mut acc = vec![0.0f64; first.data().len()];
    for map in maps {
        for (a, &v) in acc.iter_mut().zip(map.data()) {
            *a += f64::from(v);
        }
    }
    let data: Vec<f32> = acc.iter().map(|&v| (v / count) as f32).collect();
    Ok(
        ProbabilityMap::new(first.height(), first.width(), first.num_classes(), data)
            .expect("mean of valid probability maps is valid"),
    )
}

/// Empirical mean cost per decision for a confusion matrix under a cost
/// model.
pub fn expected_cost(confusion: &ConfusionMatrix, model: &CostModel) -> Result<f64, DecisionError> {
    let total = confusion.total();
    if total == 0 {
        return Err(DecisionError::ZeroTotalCount);
    }
    let n = confusion.num_classes();
    match model {
        CostModel::Symmetric { cost } => {
            if !(*cost > 0.0) {
                return Err(DecisionError::BadCostConstant(*cost));
            }
            let mut wrong = 0u64;
            for true_k in 0..n {
                for pred_k in 0..n {
                    if true_k != pred_k {
                        wrong += confusion.get(true_k, pred_k);
                    }
                }
            }
            Ok(cost * wrong as f64 / total as f64)
        }
        CostModel::InverseProportional { cost, priors } => {
            if !(*cost > 0.0) {
                return Err(DecisionError::BadCostConstant(*cost));
            }
            if priors.num_classes() != n {
                return Err(DecisionError::CostClassMismatch {
                    matrix_n: n,
                    prior_n: priors.num_classes(),
                });
            }
            let mut acc = 0.0f64;
            for true_k in 0..n {
                for pred_k in 0..n {
                    if true_k != pred_k {
                        acc += confusion.get(true_k, pred_k) as f64 * cost / priors.get(true_k);
                    }
                }
            }
            Ok(acc / total as f64)
        }
    }
}
