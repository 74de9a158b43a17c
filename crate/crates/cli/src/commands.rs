//! Subcommand implementations. Machine outputs go to files only; stderr
//! carries diagnostics. All outputs are deterministic for identical
//! inputs; the single timestamp lives in `experiment`'s `run_meta.json`
//! sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use segdecide_core::analysis::{
    default_size_bin_edges, detection_histograms, dominates_first_order, empirical_cdf,
    nondetection_heatmaps, write_cdf_csv, write_heatmap_pgm, write_histogram_csv,
};
use segdecide_core::components::{postprocess, Connectivity, PostprocessParams};
use segdecide_core::decision::{
    average_probability_maps, decide_bayes, decide_ml, Priors,
};
use segdecide_core::io::{
    read_tensor, write_feature_map, write_label_map, write_prior_stack,
};
use segdecide_core::metrics::{
    class_scores, confusion_matrix, match_segments, mean_iou, segment_score_summary,
    ClassScores, MatchResult, MeanIouPolicy, SegmentScore, SegmentSummary,
};
use segdecide_core::priors::{
    compute_global_priors, compute_pixel_priors, smooth_priors, PriorConfig,
};
use segdecide_core::synth::{
    generate_scene, run_experiment, scene_seed, write_experiment_artifacts, ExperimentConfig,
    SynthConfig,
};
use segdecide_core::tensor::{GlobalPriors, LabelMap};

use crate::{
    usage, AnalyzeArgs, CliError, CliResult, DecideArgs, EvalArgs, ExperimentArgs, PriorsArgs,
    SynthArgs,
};

/// *.sgt files of a directory in filename order, or the path itself when
/// it is a file.
fn sgt_paths(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading directory {}", path.display()))?
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("reading directory {}", path.display()))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "sgt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!(
            "{} holds no .sgt files",
            path.display()
        )));
    }
    Ok(paths)
}

fn read_label_maps(paths: &[PathBuf], num_classes: usize) -> Result<Vec<LabelMap>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(read_tensor(p)
                .with_context(|| format!("reading {}", p.display()))?
                .into_label_map(num_classes)
                .with_context(|| format!("validating {}", p.display()))?)
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).context("serializing JSON")?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn priors(args: PriorsArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PriorConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => PriorConfig::default(),
    };
    if let Some(sigma) = args.sigma {
        config.sigma = sigma;
    }
    if let Some(cutoff) = args.cutoff {
        config.cutoff = cutoff;
    }
    if let Some(krs) = args.kernel_radius_sigmas {
        config.kernel_radius_sigmas = krs;
    }

    let paths = sgt_paths(&args.labels)?;
    let labels = read_label_maps(&paths, args.num_classes)?;
    let raw = compute_pixel_priors(&labels, args.num_classes)?;
    let smoothed = smooth_priors(&raw, &config)?;
    write_prior_stack(&args.out, &smoothed)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(raw_out) = &args.raw_out {
        write_prior_stack(raw_out, &raw)
            .with_context(|| format!("writing {}", raw_out.display()))?;
    }
    if let Some(global_out) = &args.global_out {
        let global = compute_global_priors(&labels, args.num_classes)?;
        write_json(global_out, &global)?;
    }
    eprintln!(
        "priors: {} maps -> {} ({}x{}x{}, sigma {}, cutoff {})",
        labels.len(),
        args.out.display(),
        smoothed.height(),
        smoothed.width(),
        smoothed.num_classes(),
        config.sigma,
        config.cutoff
    );
    Ok(())
}

pub fn decide(args: DecideArgs) -> CliResult {
    let maps = args
        .probs
        .iter()
        .map(|p| {
            Ok(read_tensor(p)
                .with_context(|| format!("reading {}", p.display()))?
                .into_probability_map()
                .with_context(|| format!("validating {}", p.display()))?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let probs = average_probability_maps(&maps)?;

    let prediction = match args.rule.as_str() {
        "bayes" => {
            if args.priors.is_some() || args.global_priors.is_some() {
                return Err(usage("--priors/--global-priors only apply to --rule ml"));
            }
            decide_bayes(&probs)
        }
        "ml" => match (&args.priors, &args.global_priors) {
            (Some(stack_path), None) => {
                let stack = read_tensor(stack_path)
                    .with_context(|| format!("reading {}", stack_path.display()))?
                    .into_prior_stack_auto()
                    .with_context(|| format!("validating {}", stack_path.display()))?;
                decide_ml(&probs, Priors::Local(&stack))?
            }
            (None, Some(global_path)) => {
                let text = fs::read_to_string(global_path)
                    .with_context(|| format!("reading {}", global_path.display()))?;
                let global: GlobalPriors = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", global_path.display()))?;
                decide_ml(&probs, Priors::Global(&global))?
            }
            (None, None) => {
                return Err(usage("--rule ml needs --priors or --global-priors"));
            }
            (Some(_), Some(_)) => {
                return Err(usage("give either --priors or --global-priors, not both"));
            }
        },
        other => return Err(usage(format!("unknown rule '{other}', expected bayes or ml"))),
    };
    write_label_map(&args.out, &prediction)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "decide: {} map(s), rule {} -> {}",
        maps.len(),
        args.rule,
        args.out.display()
    );
    Ok(())
}

fn connectivity_from(flag: u8) -> Result<Connectivity, CliError> {
    Connectivity::try_from(flag).map_err(usage)
}

#[derive(Serialize)]
struct EvalImageReport {
    id: String,
    confusion: Vec<Vec<u64>>,
    class_scores: ClassScores,
    miou_skip: Option<f64>,
    miou_zero: f64,
    pred_segments: Vec<SegmentScore>,
    gt_segments: Vec<SegmentScore>,
}

#[derive(Serialize)]
struct EvalAggregate {
    confusion: Vec<Vec<u64>>,
    class_scores: ClassScores,
    miou_skip_pooled: Option<f64>,
    miou_zero_pooled: f64,
    miou_skip_image_mean: Option<f64>,
    segment_summary: SegmentSummary,
}

#[derive(Serialize)]
struct EvalReport {
    num_classes: usize,
    postprocess: PostprocessParams,
    images: Vec<EvalImageReport>,
    aggregate: EvalAggregate,
}

pub fn eval(args: EvalArgs) -> CliResult {
    let params = PostprocessParams {
        connectivity: connectivity_from(args.connectivity)?,
        min_size: args.min_size,
        max_gap: args.max_gap,
    };
    let pred_paths = sgt_paths(&args.pred)?;
    let gt_paths = sgt_paths(&args.gt)?;
    if pred_paths.len() != gt_paths.len() {
        return Err(usage(format!(
            "{} predictions vs {} ground-truth maps",
            pred_paths.len(),
            gt_paths.len()
        )));
    }
    let preds = read_label_maps(&pred_paths, args.num_classes)?;
    let gts = read_label_maps(&gt_paths, args.num_classes)?;

    let mut images = Vec::with_capacity(preds.len());
    let mut pooled = segdecide_core::metrics::ConfusionMatrix::zeros(args.num_classes);
    let mut pooled_match = MatchResult {
        pred: Vec::new(),
        gt: Vec::new(),
    };
    let mut image_mious = Vec::new();
    for ((pred, gt), path) in preds.iter().zip(&gts).zip(&pred_paths) {
        let cm = confusion_matrix(pred, gt)?;
        let scores = class_scores(&cm);
        let miou_skip = mean_iou(&scores, MeanIouPolicy::SkipUndefined).ok();
        let miou_zero = mean_iou(&scores, MeanIouPolicy::CountUndefinedAsZero).unwrap_or(0.0);
        image_mious.push(miou_skip);
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pred_set = postprocess(pred, &params).with_image_id(id.clone());
        let gt_set = postprocess(gt, &params).with_image_id(id.clone());
        let matched = match_segments(&pred_set, &gt_set)?;
        pooled.merge(&cm);
        pooled_match.pred.extend(matched.pred.iter().cloned());
        pooled_match.gt.extend(matched.gt.iter().cloned());
        images.push(EvalImageReport {
            id,
            confusion: cm.rows(),
            class_scores: scores,
            miou_skip,
            miou_zero,
            pred_segments: matched.pred,
            gt_segments: matched.gt,
        });
    }

    let pooled_scores = class_scores(&pooled);
    let defined: Vec<f64> = image_mious.iter().flatten().copied().collect();
    let report = EvalReport {
        num_classes: args.num_classes,
        postprocess: params,
        aggregate: EvalAggregate {
            confusion: pooled.rows(),
            class_scores: pooled_scores.clone(),
            miou_skip_pooled: mean_iou(&pooled_scores, MeanIouPolicy::SkipUndefined).ok(),
            miou_zero_pooled: mean_iou(&pooled_scores, MeanIouPolicy::CountUndefinedAsZero)
                .unwrap_or(0.0),
            miou_skip_image_mean: (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            segment_summary: segment_score_summary(&pooled_match)?,
        },
        images,
    };
    write_json(&args.out, &report)?;
    eprintln!(
        "eval: {} image(s) -> {}",
        report.images.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSummary {
    class_id: u8,
    images: usize,
    gt_components: u64,
    predicted_components_bayes: u64,
    predicted_components_ml: u64,
    non_detections_bayes: u64,
    non_detections_ml: u64,
    false_detections_bayes: u64,
    false_detections_ml: u64,
    recall_dominance_bayes_by_ml: segdecide_core::analysis::DominanceCheck,
    precision_dominance_ml_by_bayes: segdecide_core::analysis::DominanceCheck,
}

pub fn analyze(args: AnalyzeArgs) -> CliResult {
    if usize::from(args.class) >= args.num_classes {
        return Err(usage(format!(
            "--class {} out of range for {} classes",
            args.class, args.num_classes
        )));
    }
    let params = PostprocessParams {
        connectivity: connectivity_from(args.connectivity)?,
        min_size: args.min_size,
        max_gap: args.max_gap,
    };
    let edges: Vec<u64> = match &args.bin_edges {
        Some(text) => text
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("bad --bin-edges: {e}")))?,
        None => default_size_bin_edges(),
    };

    let bayes_paths = sgt_paths(&args.pred_bayes)?;
    let ml_paths = sgt_paths(&args.pred_ml)?;
    let gt_paths = sgt_paths(&args.gt)?;
    if bayes_paths.len() != gt_paths.len() || ml_paths.len() != gt_paths.len() {
        return Err(usage(format!(
            "{} bayes / {} ml / {} ground-truth maps",
            bayes_paths.len(),
            ml_paths.len(),
            gt_paths.len()
        )));
    }
    let preds_bayes = read_label_maps(&bayes_paths, args.num_classes)?;
    let preds_ml = read_label_maps(&ml_paths, args.num_classes)?;
    let gts = read_label_maps(&gt_paths, args.num_classes)?;

    let gt_sets: Vec<_> = gts.iter().map(|g| postprocess(g, &params)).collect();
    let mut pred_scores_bayes: Vec<SegmentScore> = Vec::new();
    let mut pred_scores_ml: Vec<SegmentScore> = Vec::new();
    let mut gt_scores_bayes: Vec<SegmentScore> = Vec::new();
    let mut gt_scores_ml: Vec<SegmentScore> = Vec::new();
    for ((gt_set, pred_b), pred_m) in gt_sets.iter().zip(&preds_bayes).zip(&preds_ml) {
        let set_b = postprocess(pred_b, &params);
        let set_m = postprocess(pred_m, &params);
        let match_b = match_segments(&set_b, gt_set)?;
        let match_m = match_segments(&set_m, gt_set)?;
        let keep = |v: Vec<SegmentScore>| v.into_iter().filter(|s| s.class_id == args.class);
        pred_scores_bayes.extend(keep(match_b.pred));
        pred_scores_ml.extend(keep(match_m.pred));
        gt_scores_bayes.extend(keep(match_b.gt));
        gt_scores_ml.extend(keep(match_m.gt));
    }

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let recall_bayes =
        empirical_cdf(&gt_scores_bayes.iter().filter_map(|s| s.recall).collect::<Vec<_>>())?;
    let recall_ml =
        empirical_cdf(&gt_scores_ml.iter().filter_map(|s| s.recall).collect::<Vec<_>>())?;
    let precision_bayes = empirical_cdf(
        &pred_scores_bayes
            .iter()
            .filter_map(|s| s.precision)
            .collect::<Vec<_>>(),
    )?;
    let precision_ml = empirical_cdf(
        &pred_scores_ml
            .iter()
            .filter_map(|s| s.precision)
            .collect::<Vec<_>>(),
    )?;
    write_cdf_csv(args.out_dir.join("cdf_recall.csv"), &recall_bayes, &recall_ml)?;
    write_cdf_csv(
        args.out_dir.join("cdf_precision.csv"),
        &precision_bayes,
        &precision_ml,
    )?;

    let hists = detection_histograms(
        &pred_scores_bayes,
        &pred_scores_ml,
        &gt_scores_bayes,
        &gt_scores_ml,
        &edges,
    )?;
    write_histogram_csv(
        args.out_dir.join("hist_false_detection.csv"),
        &hists.false_detection,
    )?;
    write_histogram_csv(
        args.out_dir.join("hist_non_detection.csv"),
        &hists.non_detection,
    )?;

    let (pix_b, obj_b) = nondetection_heatmaps(&gt_sets, &preds_bayes, args.class)?;
    let (pix_m, obj_m) = nondetection_heatmaps(&gt_sets, &preds_ml, args.class)?;
    write_heatmap_pgm(args.out_dir.join("nondetection_pixel_bayes.pgm"), &pix_b)?;
    write_heatmap_pgm(args.out_dir.join("nondetection_object_bayes.pgm"), &obj_b)?;
    write_heatmap_pgm(args.out_dir.join("nondetection_pixel_ml.pgm"), &pix_m)?;
    write_heatmap_pgm(args.out_dir.join("nondetection_object_ml.pgm"), &obj_m)?;

    let summary = AnalyzeSummary {
        class_id: args.class,
        images: gts.len(),
        gt_components: gt_scores_bayes.len() as u64,
        predicted_components_bayes: pred_scores_bayes.len() as u64,
        predicted_components_ml: pred_scores_ml.len() as u64,
        non_detections_bayes: gt_scores_bayes.iter().filter(|s| !s.matched).count() as u64,
        non_detections_ml: gt_scores_ml.iter().filter(|s| !s.matched).count() as u64,
        false_detections_bayes: pred_scores_bayes.iter().filter(|s| !s.matched).count() as u64,
        false_detections_ml: pred_scores_ml.iter().filter(|s| !s.matched).count() as u64,
        recall_dominance_bayes_by_ml: dominates_first_order(&recall_bayes, &recall_ml),
        precision_dominance_ml_by_bayes: dominates_first_order(&precision_ml, &precision_bayes),
    };
    write_json(&args.out_dir.join("summary.json"), &summary)?;
    eprintln!("analyze: wrote {}", args.out_dir.display());
    Ok(())
}

pub fn synth(args: SynthArgs) -> CliResult {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config: SynthConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let gt_dir = args.out_dir.join("gt");
    let feature_dir = args.out_dir.join("features");
    fs::create_dir_all(&gt_dir).with_context(|| format!("creating {}", gt_dir.display()))?;
    fs::create_dir_all(&feature_dir)
        .with_context(|| format!("creating {}", feature_dir.display()))?;
    for index in 0..args.count {
        let scene = generate_scene(&config, scene_seed(args.seed, index as u64))?;
        let gt_path = gt_dir.join(format!("{}_{index:04}.sgt", args.prefix));
        let feat_path = feature_dir.join(format!("{}_{index:04}.sgt", args.prefix));
        write_label_map(&gt_path, &scene.gt)
            .with_context(|| format!("writing {}", gt_path.display()))?;
        write_feature_map(&feat_path, &scene.features)
            .with_context(|| format!("writing {}", feat_path.display()))?;
    }
    eprintln!(
        "synth: {} scene(s) -> {}",
        args.count,
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunMeta {
    command: &'static str,
    config: PathBuf,
    seed: u64,
    unix_time_seconds: u64,
}

pub fn experiment(args: ExperimentArgs) -> CliResult {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let report = run_experiment(&config, args.seed)?;
    write_experiment_artifacts(&report, &args.out_dir)?;

    // The only file that may differ between reruns.
    let meta = RunMeta {
        command: "experiment",
        config: args.config.clone(),
        seed: args.seed,
        unix_time_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_json(&args.out_dir.join("run_meta.json"), &meta)?;

    eprintln!(
        "experiment: report and artifacts in {} (all_pass = {})",
        args.out_dir.display(),
        report.verdicts.all_pass
    );
    if args.check && !report.verdicts.all_pass {
        return Err(CliError::CheckFailed);
    }
    Ok(())
}
