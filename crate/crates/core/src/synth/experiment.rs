//! End-to-end experiment driver: estimate priors on a training split,
//! produce oracle posteriors on a test split, apply both decision rules,
//! post-process, evaluate at pixel and segment level, and run the
//! corpus-level analysis. The report carries a verdict block for every
//! checked property and is byte-deterministic given the master seed.
//!
//! The module also scripts the global-vs-local prior scenario: a rare
//! object is deliberately planted where its local prior is below the
//! global prior while a confusable class dominates locally, and the two
//! maximum-likelihood variants (global prior vs pixel-wise priors) are
//! compared on detecting it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    default_size_bin_edges, detection_histograms, dominates_first_order, empirical_cdf,
    nondetection_heatmaps, write_cdf_csv, write_heatmap_pgm, write_histogram_csv,
    DetectionHistograms, DominanceCheck, Heatmap,
};
use crate::components::{postprocess, PostprocessParams};
use crate::decision::{
    decide_bayes, decide_ml, expected_cost, CostModel, Priors,
};
use crate::metrics::{
    class_scores, confusion_matrix, match_segments, mean_iou, segment_score_summary,
    ClassScores, ConfusionMatrix, MatchResult, MeanIouPolicy, SegmentSummary,
};
use crate::priors::{
    compute_global_priors, compute_pixel_priors, prior_comparison_sets, smooth_priors,
    PriorConfig,
};
use crate::tensor::{GlobalPriors, LabelMap, PriorStack};

use super::{
    generate_scene, oracle_posteriors, sample_features, scene_seed, SynthConfig, SynthError,
};
use super::rng::Rng;

/// Tolerance on stochastic-dominance violations in the verdicts.
pub const DOMINANCE_TOLERANCE: f64 = 0.02;

/// The maximum-likelihood rule must cut non-detections to at most this
/// fraction of the Bayes count.
pub const NONDETECTION_MAX_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub train_scenes: usize,
    pub test_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisParams {
    /// Class whose detection behavior the analysis focuses on.
    pub rare_class: u8,
    #[serde(default = "default_size_bin_edges")]
    pub size_bin_edges: Vec<u64>,
    #[serde(default = "default_cost_constant")]
    pub cost_constant: f64,
}

fn default_cost_constant() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub synth: SynthConfig,
    pub rare_class: u8,
    pub confusable_class: u8,
    /// Area of the planted object in pixels.
    pub planted_size: u32,
    pub train_scenes: usize,
    pub priors: PriorConfig,
    pub postprocess: PostprocessParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub corpus: CorpusParams,
    pub priors: PriorConfig,
    pub postprocess: PostprocessParams,
    pub analysis: AnalysisParams,
    /// Diagnostic switch: wire uniform priors into both rules, which must
    /// make the Bayes and ML branches identical.
    #[serde(default)]
    pub force_uniform_priors: bool,
    #[serde(default)]
    pub scenario: Option<ScenarioParams>,
}

/// Anything reported once per decision rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerRule<T> {
    pub bayes: T,
    pub ml: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageRecord {
    pub index: usize,
    pub seed: u64,
    pub miou_bayes: Option<f64>,
    pub miou_ml: Option<f64>,
    pub cost_symmetric_bayes: f64,
    pub cost_symmetric_ml: f64,
    pub cost_inverse_bayes: f64,
    pub cost_inverse_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelAggregate {
    pub confusion: Vec<Vec<u64>>,
    pub class_scores: ClassScores,
    pub miou_pooled_skip: Option<f64>,
    pub miou_pooled_zero: f64,
    pub miou_image_mean_skip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RareClassAnalysis {
    pub class_id: u8,
    /// Sorted per-segment recall samples over ground-truth segments.
    pub recall_samples: PerRule<Vec<f64>>,
    /// Sorted per-segment precision samples over predicted segments.
    pub precision_samples: PerRule<Vec<f64>>,
    /// Check of recall CDFs: Bayes dominated by ML.
    pub recall_dominance: DominanceCheck,
    /// Check of precision CDFs: ML dominated by Bayes.
    pub precision_dominance: DominanceCheck,
    pub histograms: DetectionHistograms,
    pub non_detections: PerRule<u64>,
    pub false_detections: PerRule<u64>,
    pub predicted_components: PerRule<u64>,
    pub gt_components: u64,
}

/// Means and the paired difference (bayes - ml) of per-image costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedCost {
    pub bayes_mean: f64,
    pub ml_mean: f64,
    pub diff_mean: f64,
    pub diff_se: f64,
}

fn paired_cost(bayes: &[f64], ml: &[f64]) -> PairedCost {
    let n = bayes.len() as f64;
    let bayes_mean = bayes.iter().sum::<f64>() / n;
    let ml_mean = ml.iter().sum::<f64>() / n;
    let diff_mean = bayes_mean - ml_mean;
    let diff_se = if bayes.len() > 1 {
        let var = bayes
            .iter()
            .zip(ml)
            .map(|(&b, &m)| {
                let d = b - m - diff_mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    PairedCost {
        bayes_mean,
        ml_mean,
        diff_mean,
        diff_se,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBlock {
    pub symmetric: PairedCost,
    pub inverse: PairedCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostVerdict {
    pub pass: bool,
    pub bayes_mean: f64,
    pub ml_mean: f64,
    pub diff_mean: f64,
    pub diff_se: f64,
    pub required_margin_ses: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceVerdict {
    pub pass: bool,
    pub dominated: bool,
    pub max_violation: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NondetectionVerdict {
    pub pass: bool,
    pub bayes: u64,
    pub ml: u64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComponentCountVerdict {
    pub pass: bool,
    pub bayes: u64,
    pub ml: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelTradeoffVerdict {
    pub pass: bool,
    pub recall_bayes: Option<f64>,
    pub recall_ml: Option<f64>,
    pub precision_bayes: Option<f64>,
    pub precision_ml: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioVerdict {
    pub pass: bool,
    pub recall_with_global_prior: f64,
    pub recall_with_local_priors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdicts {
    pub symmetric_cost_bayes_optimal: CostVerdict,
    pub inverse_cost_ml_optimal: CostVerdict,
    pub recall_cdf_dominance: DominanceVerdict,
    pub precision_cdf_dominance: DominanceVerdict,
    pub nondetection_reduction: NondetectionVerdict,
    pub predicted_component_count: ComponentCountVerdict,
    pub pixel_tradeoff: PixelTradeoffVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioVerdict>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub rare_class: u8,
    pub confusable_class: u8,
    /// Pixels where the rare class's local prior is below the global one
    /// while the confusable class's local prior is at or above its
    /// global one.
    pub region_pixels: usize,
    pub planted_center: (usize, usize),
    pub requested_size: u32,
    pub painted_size: usize,
    pub recall_with_global_prior: f64,
    pub recall_with_local_priors: f64,
    pub detected_with_global: bool,
    pub detected_with_local: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedHeatmap {
    pub name: String,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub global_priors: Vec<f64>,
    pub images: Vec<ImageRecord>,
    pub pixel: PerRule<PixelAggregate>,
    pub segments: PerRule<SegmentSummary>,
    pub rare: RareClassAnalysis,
    pub costs: CostBlock,
    pub verdicts: Verdicts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioReport>,
    /// Written as PGM files by the artifact writer, not serialized.
    #[serde(skip)]
    pub heatmaps: Vec<NamedHeatmap>,
}

struct SceneEval {
    seed: u64,
    gt_set: crate::components::ComponentSet,
    pred_bayes: LabelMap,
    pred_ml: LabelMap,
    cm_bayes: ConfusionMatrix,
    cm_ml: ConfusionMatrix,
    match_bayes: MatchResult,
    match_ml: MatchResult,
}

fn uniform_stack(
    height: usize,
    width: usize,
    num_classes: usize,
    cutoff: f64,
) -> Result<PriorStack, SynthError> {
    let value = (1.0 / num_classes as f64) as f32;
    Ok(PriorStack::new_smoothed(
        height,
        width,
        num_classes,
        vec![value; height * width * num_classes],
        cutoff as f32,
    )?)
}

fn pixel_aggregate(pooled: &ConfusionMatrix, per_image_miou: &[Option<f64>]) -> PixelAggregate {
    let scores = class_scores(pooled);
    let defined: Vec<f64> = per_image_miou.iter().flatten().copied().collect();
    PixelAggregate {
        confusion: pooled.rows(),
        class_scores: scores.clone(),
        miou_pooled_skip: mean_iou(&scores, MeanIouPolicy::SkipUndefined).ok(),
        miou_pooled_zero: mean_iou(&scores, MeanIouPolicy::CountUndefinedAsZero)
            .unwrap_or(0.0),
        miou_image_mean_skip: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
    }
}

/// Runs the full pipeline on freshly generated corpora.
pub fn run_experiment(
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<ExperimentReport, SynthError> {
    config.synth.validate()?;
    let n = config.synth.num_classes;
    if config.corpus.train_scenes == 0 {
        return Err(SynthError::BadConfig("training corpus is empty".into()));
    }
    if config.corpus.test_scenes == 0 {
        return Err(SynthError::BadConfig("test corpus is empty".into()));
    }
    if usize::from(config.analysis.rare_class) >= n {
        return Err(SynthError::BadConfig(format!(
            "rare_class {} out of range",
            config.analysis.rare_class
        )));
    }
    if !(config.analysis.cost_constant > 0.0) {
        return Err(SynthError::BadConfig("cost_constant must be > 0".into()));
    }
    config.priors.validate(n)?;

    // Training split: estimate priors the same way the evaluated system
    // would, from labels alone.
    let train_labels = (0..config.corpus.train_scenes)
        .into_par_iter()
        .map(|i| generate_scene(&config.synth, scene_seed(master_seed, i as u64)).map(|s| s.gt))
        .collect::<Result<Vec<_>, _>>()?;
    let raw = compute_pixel_priors(&train_labels, n)?;
    let (local, global) = if config.force_uniform_priors {
        (
            uniform_stack(
                config.synth.height,
                config.synth.width,
                n,
                config.priors.cutoff,
            )?,
            GlobalPriors::uniform(n)?,
        )
    } else {
        (
            smooth_priors(&raw, &config.priors)?,
            compute_global_priors(&train_labels, n)?,
        )
    };

    // Test split.
    let train_count = config.corpus.train_scenes as u64;
    let evals = (0..config.corpus.test_scenes)
        .into_par_iter()
        .map(|j| -> Result<SceneEval, SynthError> {
            let seed = scene_seed(master_seed, train_count + j as u64);
            let scene = generate_scene(&config.synth, seed)?;
            let probs = oracle_posteriors(&scene.features, &config.synth, Priors::Local(&local))?;
            let pred_bayes = decide_bayes(&probs);
            let pred_ml = decide_ml(&probs, Priors::Local(&local))?;
            let gt_set = postprocess(&scene.gt, &config.postprocess)
                .with_image_id(format!("scene_{j:04}"));
            let set_bayes = postprocess(&pred_bayes, &config.postprocess)
                .with_image_id(format!("scene_{j:04}"));
            let set_ml = postprocess(&pred_ml, &config.postprocess)
                .with_image_id(format!("scene_{j:04}"));
            let cm_bayes = confusion_matrix(&pred_bayes, &scene.gt)?;
            let cm_ml = confusion_matrix(&pred_ml, &scene.gt)?;
            let match_bayes = match_segments(&set_bayes, &gt_set)?;
            let match_ml = match_segments(&set_ml, &gt_set)?;
            Ok(SceneEval {
                seed,
                gt_set,
                pred_bayes,
                pred_ml,
                cm_bayes,
                cm_ml,
                match_bayes,
                match_ml,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let symmetric = CostModel::Symmetric {
        cost: config.analysis.cost_constant,
    };
    let inverse = CostModel::InverseProportional {
        cost: config.analysis.cost_constant,
        priors: global.clone(),
    };

    let mut images = Vec::with_capacity(evals.len());
    let mut pooled_bayes = ConfusionMatrix::zeros(n);
    let mut pooled_ml = ConfusionMatrix::zeros(n);
    let mut miou_bayes_list = Vec::new();
    let mut miou_ml_list = Vec::new();
    let (mut sym_b, mut sym_m, mut inv_b, mut inv_m) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (index, eval) in evals.iter().enumerate() {
        pooled_bayes.merge(&eval.cm_bayes);
        pooled_ml.merge(&eval.cm_ml);
        let miou_bayes = mean_iou(&class_scores(&eval.cm_bayes), MeanIouPolicy::SkipUndefined).ok();
        let miou_ml = mean_iou(&class_scores(&eval.cm_ml), MeanIouPolicy::SkipUndefined).ok();
        miou_bayes_list.push(miou_bayes);
        miou_ml_list.push(miou_ml);
        let record = ImageRecord {
            index,
            seed: eval.seed,
            miou_bayes,
            miou_ml,
            cost_symmetric_bayes: expected_cost(&eval.cm_bayes, &symmetric)?,
            cost_symmetric_ml: expected_cost(&eval.cm_ml, &symmetric)?,
            cost_inverse_bayes: expected_cost(&eval.cm_bayes, &inverse)?,
            cost_inverse_ml: expected_cost(&eval.cm_ml, &inverse)?,
        };
        sym_b.push(record.cost_symmetric_bayes);
        sym_m.push(record.cost_symmetric_ml);
        inv_b.push(record.cost_inverse_bayes);
        inv_m.push(record.cost_inverse_ml);
        images.push(record);
    }

    // Pooled segment results per rule.
    let pooled_match = |pick: fn(&SceneEval) -> &MatchResult| -> MatchResult {
        let mut all = MatchResult {
            pred: Vec::new(),
            gt: Vec::new(),
        };
        for eval in &evals {
            let m = pick(eval);
            all.pred.extend(m.pred.iter().cloned());
            all.gt.extend(m.gt.iter().cloned());
        }
        all
    };
    let all_bayes = pooled_match(|e| &e.match_bayes);
    let all_ml = pooled_match(|e| &e.match_ml);
    let summary_bayes = segment_score_summary(&all_bayes)?;
    let summary_ml = segment_score_summary(&all_ml)?;

    // Rare-class detection behavior.
    let rare = config.analysis.rare_class;
    let rare_pred_bayes: Vec<_> = all_bayes
        .pred
        .iter()
        .filter(|s| s.class_id == rare)
        .cloned()
        .collect();
    let rare_pred_ml: Vec<_> = all_ml
        .pred
        .iter()
        .filter(|s| s.class_id == rare)
        .cloned()
        .collect();
    let rare_gt_bayes: Vec<_> = all_bayes
        .gt
        .iter()
        .filter(|s| s.class_id == rare)
        .cloned()
        .collect();
    let rare_gt_ml: Vec<_> = all_ml
        .gt
        .iter()
        .filter(|s| s.class_id == rare)
        .cloned()
        .collect();

    let recall_samples_bayes: Vec<f64> =
        rare_gt_bayes.iter().filter_map(|s| s.recall).collect();
    let recall_samples_ml: Vec<f64> = rare_gt_ml.iter().filter_map(|s| s.recall).collect();
    let precision_samples_bayes: Vec<f64> =
        rare_pred_bayes.iter().filter_map(|s| s.precision).collect();
    let precision_samples_ml: Vec<f64> =
        rare_pred_ml.iter().filter_map(|s| s.precision).collect();

    let cdf_recall_bayes = empirical_cdf(&recall_samples_bayes)?;
    let cdf_recall_ml = empirical_cdf(&recall_samples_ml)?;
    let cdf_precision_bayes = empirical_cdf(&precision_samples_bayes)?;
    let cdf_precision_ml = empirical_cdf(&precision_samples_ml)?;

    let recall_dominance = dominates_first_order(&cdf_recall_bayes, &cdf_recall_ml);
    let precision_dominance = dominates_first_order(&cdf_precision_ml, &cdf_precision_bayes);

    let histograms = detection_histograms(
        &rare_pred_bayes,
        &rare_pred_ml,
        &rare_gt_bayes,
        &rare_gt_ml,
        &config.analysis.size_bin_edges,
    )?;

    let non_detections = PerRule {
        bayes: rare_gt_bayes.iter().filter(|s| !s.matched).count() as u64,
        ml: rare_gt_ml.iter().filter(|s| !s.matched).count() as u64,
    };
    let false_detections = PerRule {
        bayes: rare_pred_bayes.iter().filter(|s| !s.matched).count() as u64,
        ml: rare_pred_ml.iter().filter(|s| !s.matched).count() as u64,
    };
    let predicted_components = PerRule {
        bayes: rare_pred_bayes.len() as u64,
        ml: rare_pred_ml.len() as u64,
    };

    // Non-detection heatmaps over the corpus.
    let gt_sets: Vec<_> = evals.iter().map(|e| e.gt_set.clone()).collect();
    let preds_bayes: Vec<_> = evals.iter().map(|e| e.pred_bayes.clone()).collect();
    let preds_ml: Vec<_> = evals.iter().map(|e| e.pred_ml.clone()).collect();
    let (hm_pixel_bayes, hm_object_bayes) = nondetection_heatmaps(&gt_sets, &preds_bayes, rare)?;
    let (hm_pixel_ml, hm_object_ml) = nondetection_heatmaps(&gt_sets, &preds_ml, rare)?;

    let costs = CostBlock {
        symmetric: paired_cost(&sym_b, &sym_m),
        inverse: paired_cost(&inv_b, &inv_m),
    };

    let scenario = config
        .scenario
        .as_ref()
        .map(global_vs_local_scenario)
        .transpose()?;

    let pixel_bayes = pixel_aggregate(&pooled_bayes, &miou_bayes_list);
    let pixel_ml = pixel_aggregate(&pooled_ml, &miou_ml_list);
    let rare_idx = usize::from(rare);
    let pixel_tradeoff = PixelTradeoffVerdict {
        recall_bayes: pixel_bayes.class_scores.per_class[rare_idx].recall,
        recall_ml: pixel_ml.class_scores.per_class[rare_idx].recall,
        precision_bayes: pixel_bayes.class_scores.per_class[rare_idx].precision,
        precision_ml: pixel_ml.class_scores.per_class[rare_idx].precision,
        pass: match (
            pixel_bayes.class_scores.per_class[rare_idx].recall,
            pixel_ml.class_scores.per_class[rare_idx].recall,
            pixel_bayes.class_scores.per_class[rare_idx].precision,
            pixel_ml.class_scores.per_class[rare_idx].precision,
        ) {
            (Some(rb), Some(rm), Some(pb), Some(pm)) => rm > rb && pb > pm,
            _ => false,
        },
    };

    let symmetric_verdict = CostVerdict {
        pass: costs.symmetric.diff_mean + 2.0 * costs.symmetric.diff_se <= 0.0,
        bayes_mean: costs.symmetric.bayes_mean,
        ml_mean: costs.symmetric.ml_mean,
        diff_mean: costs.symmetric.diff_mean,
        diff_se: costs.symmetric.diff_se,
        required_margin_ses: 2.0,
    };
    let inverse_verdict = CostVerdict {
        pass: costs.inverse.diff_mean - 2.0 * costs.inverse.diff_se >= 0.0,
        bayes_mean: costs.inverse.bayes_mean,
        ml_mean: costs.inverse.ml_mean,
        diff_mean: costs.inverse.diff_mean,
        diff_se: costs.inverse.diff_se,
        required_margin_ses: 2.0,
    };
    let recall_verdict = DominanceVerdict {
        pass: recall_dominance.max_violation <= DOMINANCE_TOLERANCE,
        dominated: recall_dominance.dominated,
        max_violation: recall_dominance.max_violation,
        tolerance: DOMINANCE_TOLERANCE,
    };
    let precision_verdict = DominanceVerdict {
        pass: precision_dominance.max_violation <= DOMINANCE_TOLERANCE,
        dominated: precision_dominance.dominated,
        max_violation: precision_dominance.max_violation,
        tolerance: DOMINANCE_TOLERANCE,
    };
    let nondetection_verdict = NondetectionVerdict {
        pass: (non_detections.ml as f64) <= NONDETECTION_MAX_RATIO * non_detections.bayes as f64,
        bayes: non_detections.bayes,
        ml: non_detections.ml,
        max_ratio: NONDETECTION_MAX_RATIO,
    };
    let component_verdict = ComponentCountVerdict {
        pass: predicted_components.ml >= predicted_components.bayes,
        bayes: predicted_components.bayes,
        ml: predicted_components.ml,
    };
    let scenario_verdict = scenario.as_ref().map(|s| ScenarioVerdict {
        pass: s.pass,
        recall_with_global_prior: s.recall_with_global_prior,
        recall_with_local_priors: s.recall_with_local_priors,
    });
    let all_pass = symmetric_verdict.pass
        && inverse_verdict.pass
        && recall_verdict.pass
        && precision_verdict.pass
        && nondetection_verdict.pass
        && component_verdict.pass
        && pixel_tradeoff.pass
        && scenario_verdict.is_none_or(|s| s.pass);

    Ok(ExperimentReport {
        master_seed,
        config: config.clone(),
        global_priors: global.values().to_vec(),
        images,
        pixel: PerRule {
            bayes: pixel_bayes,
            ml: pixel_ml,
        },
        segments: PerRule {
            bayes: summary_bayes,
            ml: summary_ml,
        },
        rare: RareClassAnalysis {
            class_id: rare,
            recall_samples: PerRule {
                bayes: cdf_recall_bayes.samples().to_vec(),
                ml: cdf_recall_ml.samples().to_vec(),
            },
            precision_samples: PerRule {
                bayes: cdf_precision_bayes.samples().to_vec(),
                ml: cdf_precision_ml.samples().to_vec(),
            },
            recall_dominance,
            precision_dominance,
            histograms,
            non_detections,
            false_detections,
            predicted_components,
            gt_components: rare_gt_bayes.len() as u64,
        },
        costs,
        verdicts: Verdicts {
            symmetric_cost_bayes_optimal: symmetric_verdict,
            inverse_cost_ml_optimal: inverse_verdict,
            recall_cdf_dominance: recall_verdict,
            precision_cdf_dominance: precision_verdict,
            nondetection_reduction: nondetection_verdict,
            predicted_component_count: component_verdict,
            pixel_tradeoff,
            scenario: scenario_verdict,
            all_pass,
        },
        scenario,
        heatmaps: vec![
            NamedHeatmap {
                name: "nondetection_pixel_bayes".into(),
                heatmap: hm_pixel_bayes,
            },
            NamedHeatmap {
                name: "nondetection_object_bayes".into(),
                heatmap: hm_object_bayes,
            },
            NamedHeatmap {
                name: "nondetection_pixel_ml".into(),
                heatmap: hm_pixel_ml,
            },
            NamedHeatmap {
                name: "nondetection_object_ml".into(),
                heatmap: hm_object_ml,
            },
        ],
    })
}

/// Plants one rare-class object where its local prior falls below the
/// global prior while a confusable class dominates locally, then compares
/// maximum likelihood under the global prior against pixel-wise priors.
pub fn global_vs_local_scenario(params: &ScenarioParams) -> Result<ScenarioReport, SynthError> {
    params.synth.validate()?;
    let n = params.synth.num_classes;
    let rare = params.rare_class;
    let confusable = params.confusable_class;
    if usize::from(rare) >= n || usize::from(confusable) >= n || rare == confusable {
        return Err(SynthError::BadConfig(
            "scenario classes out of range or equal".into(),
        ));
    }
    if params.train_scenes == 0 {
        return Err(SynthError::BadConfig("scenario training corpus is empty".into()));
    }
    if (params.planted_size as usize) < params.postprocess.min_size {
        return Err(SynthError::BadConfig(format!(
            "planted object ({} px) would not survive the {}-px size filter",
            params.planted_size, params.postprocess.min_size
        )));
    }
    params.priors.validate(n)?;

    let train_labels = (0..params.train_scenes)
        .into_par_iter()
        .map(|i| generate_scene(&params.synth, scene_seed(params.seed, i as u64)).map(|s| s.gt))
        .collect::<Result<Vec<_>, _>>()?;
    let raw = compute_pixel_priors(&train_labels, n)?;
    let local = smooth_priors(&raw, &params.priors)?;
    let global = compute_global_priors(&train_labels, n)?;

    let rare_sets = prior_comparison_sets(&local, &global, rare)?;
    let conf_sets = prior_comparison_sets(&local, &global, confusable)?;
    let (h, w) = (params.synth.height, params.synth.width);
    let region: Vec<usize> = (0..h * w)
        .filter(|&idx| rare_sets.mask_gt[idx] && conf_sets.mask_leq[idx])
        .collect();
    if region.is_empty() {
        return Err(SynthError::ScenarioInfeasible);
    }

    // Keep the planted square fully inside the image.
    let side = (f64::from(params.planted_size).sqrt().round() as usize).max(1);
    let margin = (side - 1) / 2 + 1;
    let mut best: Option<(usize, f32)> = None;
    for &idx in &region {
        let (row, col) = (idx / w, idx % w);
        if row < margin || col < margin || row + margin >= h || col + margin >= w {
            continue;
        }
        let conf_prior = local.get(row, col, usize::from(confusable));
        if best.is_none_or(|(_, p)| conf_prior > p) {
            best = Some((idx, conf_prior));
        }
    }
    let (plant_idx, _) = best.ok_or(SynthError::ScenarioInfeasible)?;
    let center = (plant_idx / w, plant_idx % w);

    let mut labels = vec![params.synth.background_class; h * w];
    super::paint_rectangle(
        &mut labels,
        h,
        w,
        center,
        u64::from(params.planted_size),
        1.0,
        rare,
    );
    let painted_size = labels.iter().filter(|&&k| k == rare).count();
    let mut rng = Rng::new(scene_seed(params.seed, params.train_scenes as u64));
    let features = sample_features(&labels, &params.synth, &mut rng)?;
    let gt = LabelMap::new(h, w, n, labels)?;

    let probs = oracle_posteriors(&features, &params.synth, Priors::Local(&local))?;
    let pred_global = decide_ml(&probs, Priors::Global(&global))?;
    let pred_local = decide_ml(&probs, Priors::Local(&local))?;

    let gt_set = postprocess(&gt, &params.postprocess);
    let rare_recall = |pred: &LabelMap| -> Result<f64, SynthError> {
        let set = postprocess(pred, &params.postprocess);
        let matched = match_segments(&set, &gt_set)?;
        Ok(matched
            .gt
            .iter()
            .find(|s| s.class_id == rare)
            .and_then(|s| s.recall)
            .unwrap_or(0.0))
    };
    let recall_with_global_prior = rare_recall(&pred_global)?;
    let recall_with_local_priors = rare_recall(&pred_local)?;

    Ok(ScenarioReport {
        seed: params.seed,
        rare_class: rare,
        confusable_class: confusable,
        region_pixels: region.len(),
        planted_center: center,
        requested_size: params.planted_size,
        painted_size,
        recall_with_global_prior,
        recall_with_local_priors,
        detected_with_global: recall_with_global_prior > 0.0,
        detected_with_local: recall_with_local_priors > 0.0,
        pass: recall_with_global_prior == 0.0 && recall_with_local_priors > 0.5,
    })
}

/// Writes the report plus its CSV and PGM companions into `out_dir`.
/// Every file is deterministic; nothing here carries a timestamp.
pub fn write_experiment_artifacts(
    report: &ExperimentReport,
    out_dir: impl AsRef<std::path::Path>,
) -> Result<(), SynthError> {
    use crate::analysis::AnalysisError;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(AnalysisError::Io)?;

    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| AnalysisError::Io(std::io::Error::other(e)))?;
    std::fs::write(dir.join("report.json"), &json).map_err(AnalysisError::Io)?;

    let recall_bayes = empirical_cdf(&report.rare.recall_samples.bayes)?;
    let recall_ml = empirical_cdf(&report.rare.recall_samples.ml)?;
    write_cdf_csv(dir.join("cdf_recall.csv"), &recall_bayes, &recall_ml)?;
    let precision_bayes = empirical_cdf(&report.rare.precision_samples.bayes)?;
    let precision_ml = empirical_cdf(&report.rare.precision_samples.ml)?;
    write_cdf_csv(dir.join("cdf_precision.csv"), &precision_bayes, &precision_ml)?;

    write_histogram_csv(
        dir.join("hist_false_detection.csv"),
        &report.rare.histograms.false_detection,
    )?;
    write_histogram_csv(
        dir.join("hist_non_detection.csv"),
        &report.rare.histograms.non_detection,
    )?;

    for named in &report.heatmaps {
        write_heatmap_pgm(dir.join(format!("{}.pgm", named.name)), &named.heatmap)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ClassSpec, ShapeKind};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            synth: SynthConfig {
                height: 32,
                width: 32,
                num_classes: 3,
                background_class: 0,
                noise_correlation_sigma: 1.5,
                classes: vec![
                    ClassSpec {
                        count_mean: 0.0,
                        size_range: (1, 1),
                        placement_mean: (16.0, 16.0),
                        placement_std: (1.0, 1.0),
                        feature_mean: 0.0,
                        feature_std: 1.0,
                        shape: ShapeKind::Mixed,
                    },
                    ClassSpec {
                        count_mean: 0.8,
                        size_range: (12, 30),
                        placement_mean: (22.0, 16.0),
                        placement_std: (4.0, 6.0),
                        feature_mean: 2.2,
                        feature_std: 1.0,
                        shape: ShapeKind::Mixed,
                    },
                    ClassSpec {
                        count_mean: 2.0,
                        size_range: (30, 90),
                        placement_mean: (10.0, 16.0),
                        placement_std: (5.0, 8.0),
                        feature_mean: 4.4,
                        feature_std: 1.0,
                        shape: ShapeKind::Mixed,
                    },
                ],
            },
            corpus: CorpusParams {
                train_scenes: 40,
                test_scenes: 30,
            },
            priors: PriorConfig {
                sigma: 4.0,
                cutoff: 1e-5,
                kernel_radius_sigmas: 3.0,
            },
            postprocess: PostprocessParams::default(),
            analysis: AnalysisParams {
                rare_class: 1,
                size_bin_edges: default_size_bin_edges(),
                cost_constant: 1.0,
            },
            force_uniform_priors: false,
            scenario: None,
        }
    }

    #[test]
    fn empty_test_corpus_is_a_stage_error() {
        let mut config = small_config();
        config.corpus.test_scenes = 0;
        assert!(matches!(
            run_experiment(&config, 7),
            Err(SynthError::BadConfig(_))
        ));
    }

    #[test]
    fn uniform_priors_collapse_both_rules() {
        let mut config = small_config();
        config.force_uniform_priors = true;
        let report = run_experiment(&config, 11).unwrap();
        for image in &report.images {
            assert_eq!(image.miou_bayes, image.miou_ml);
            assert_eq!(image.cost_symmetric_bayes, image.cost_symmetric_ml);
            assert_eq!(image.cost_inverse_bayes, image.cost_inverse_ml);
        }
        assert_eq!(report.pixel.bayes, report.pixel.ml);
        assert_eq!(report.segments.bayes, report.segments.ml);
        assert_eq!(
            report.rare.recall_samples.bayes,
            report.rare.recall_samples.ml
        );
        assert_eq!(report.rare.non_detections.bayes, report.rare.non_detections.ml);
    }

    #[test]
    fn report_is_deterministic() {
        let config = small_config();
        let a = run_experiment(&config, 3).unwrap();
        let b = run_experiment(&config, 3).unwrap();
        assert_eq!(
            serde_json::to_vec_pretty(&a).unwrap(),
            serde_json::to_vec_pretty(&b).unwrap()
        );
        let c = run_experiment(&config, 4).unwrap();
        assert_ne!(
            serde_json::to_vec_pretty(&a).unwrap(),
            serde_json::to_vec_pretty(&c).unwrap()
        );
    }

    #[test]
    fn planted_object_in_its_home_region_is_found_by_both_prior_modes() {
        use crate::components::postprocess;
        use crate::decision::{decide_ml, Priors};
        use crate::metrics::match_segments;
        use crate::priors::{compute_global_priors, compute_pixel_priors, smooth_priors};
        use crate::synth::{generate_scene, oracle_posteriors, sample_features_for_test};

        // Two classes only: background and a rare class living in the
        // bottom half. Planting the object at its own placement mean puts
        // it where the local prior exceeds the global one, and with no
        // confusable class nearby both maximum-likelihood variants must
        // find it.
        let config = SynthConfig {
            height: 40,
            width: 40,
            num_classes: 2,
            background_class: 0,
            noise_correlation_sigma: 0.0,
            classes: vec![
                ClassSpec {
                    count_mean: 0.0,
                    size_range: (1, 1),
                    placement_mean: (20.0, 20.0),
                    placement_std: (1.0, 1.0),
                    feature_mean: 0.0,
                    feature_std: 1.0,
                    shape: ShapeKind::Mixed,
                },
                ClassSpec {
                    count_mean: 1.0,
                    size_range: (30, 60),
                    placement_mean: (30.0, 20.0),
                    placement_std: (3.0, 5.0),
                    feature_mean: 4.0,
                    feature_std: 1.0,
                    shape: ShapeKind::Mixed,
                },
            ],
        };
        let train: Vec<_> = (0..80)
            .map(|i| generate_scene(&config, super::scene_seed(5, i)).unwrap().gt)
            .collect();
        let raw = compute_pixel_priors(&train, 2).unwrap();
        let prior_config = PriorConfig {
            sigma: 3.0,
            cutoff: 1e-5,
            kernel_radius_sigmas: 3.0,
        };
        let local = smooth_priors(&raw, &prior_config).unwrap();
        let global = compute_global_priors(&train, 2).unwrap();
        // The plant location lies where the local prior beats the global.
        assert!(f64::from(local.get(30, 20, 1)) >= global.get(1));

        let mut labels = vec![0u8; 40 * 40];
        crate::synth::paint_rectangle(&mut labels, 40, 40, (30, 20), 49, 1.0, 1);
        let mut rng = Rng::new(99);
        let features = sample_features_for_test(&labels, &config, &mut rng);
        let gt = crate::tensor::LabelMap::new(40, 40, 2, labels).unwrap();
        let probs = oracle_posteriors(&features, &config, Priors::Local(&local)).unwrap();

        let params = PostprocessParams::default();
        let gt_set = postprocess(&gt, &params);
        for pred in [
            decide_ml(&probs, Priors::Global(&global)).unwrap(),
            decide_ml(&probs, Priors::Local(&local)).unwrap(),
        ] {
            let set = postprocess(&pred, &params);
            let matched = match_segments(&set, &gt_set).unwrap();
            let recall = matched
                .gt
                .iter()
                .find(|s| s.class_id == 1)
                .and_then(|s| s.recall)
                .unwrap_or(0.0);
            assert!(recall > 0.5, "recall {recall}");
        }
    }

    #[test]
    fn local_priors_equal_to_global_make_rules_agree() {
        use crate::decision::{decide_ml, Priors};
        use crate::tensor::{GlobalPriors, PriorStack, ProbabilityMap};
        let global = GlobalPriors::new(vec![0.7, 0.1, 0.2]).unwrap();
        let (h, w) = (6usize, 5usize);
        let mut stack_data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            stack_data.extend_from_slice(&[0.7f32, 0.1, 0.2]);
        }
        let stack = PriorStack::new_smoothed(h, w, 3, stack_data, 0.05).unwrap();
        let mut state = 8u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut data = vec![0.0f32; h * w * 3];
        for pixel in 0..h * w {
            let raw: Vec<f64> = (0..3).map(|_| next() + 1e-6).collect();
            let sum: f64 = raw.iter().sum();
            for k in 0..3 {
                data[pixel * 3 + k] = (raw[k] / sum) as f32;
            }
        }
        let probs = ProbabilityMap::new(h, w, 3, data).unwrap();
        let with_global = decide_ml(&probs, Priors::Global(&global)).unwrap();
        let with_local = decide_ml(&probs, Priors::Local(&stack)).unwrap();
        assert_eq!(with_global, with_local);
    }
}
