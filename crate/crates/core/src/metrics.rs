//! Pixel-level confusion statistics and segment-level matching.
//!
//! Pixel level: an N x N confusion matrix indexed `[true][predicted]`
//! yields per-class precision, recall and intersection-over-union.
//! Scores with a zero denominator are undefined and represented
//! explicitly as `None`, never as NaN.
//!
//! Segment level: a predicted component counts as a correct object
//! prediction when some ground-truth component of the same class
//! intersects it. Per-segment precision, recall and IoU are measured
//! against the union of same-class counterpart pixels, so a ground-truth
//! object is non-detected exactly when its recall is zero.

use serde::Serialize;
use thiserror::Error;

use crate::components::ComponentSet;
use crate::tensor::LabelMap;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction is {got_h}x{got_w}, ground truth is {want_h}x{want_w}")]
    ShapeMismatch {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("prediction has {pred_n} classes, ground truth has {gt_n}")]
    ClassCountMismatch { pred_n: usize, gt_n: usize },
    #[error("every class IoU is undefined; mean IoU needs at least one defined value")]
    AllUndefined,
    #[error("no segments to summarize")]
    EmptyInput,
}

/// Pixel counts `counts[k][k_hat]`: true class `k` predicted as `k_hat`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: pixels whose true class is `k`.
    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.num_classes..(k + 1) * self.num_classes]
            .iter()
            .sum()
    }

    /// Column sum: pixels predicted as `k`.
    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts[k..].iter().step_by(self.num_classes).sum()
    }

    /// Elementwise addition; matrices pool across images.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Rows as nested vectors, for reports.
    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks_exact(self.num_classes)
            .map(|r| r.to_vec())
            .collect()
    }
}

/// Counts true-vs-predicted pixels over a pair of label maps.
pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionMatrix, MetricsError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MetricsError::ShapeMismatch {
            want_h: gt.height(),
            want_w: gt.width(),
            got_h: pred.height(),
            got_w: pred.width(),
        });
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(MetricsError::ClassCountMismatch {
            pred_n: pred.num_classes(),
            gt_n: gt.num_classes(),
        });
    }
    let n = gt.num_classes();
    let mut cm = ConfusionMatrix::zeros(n);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        cm.counts[usize::from(g) * n + usize::from(p)] += 1;
    }
    Ok(cm)
}

/// Per-class pixel scores; `None` marks an undefined (0/0) score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub per_class: Vec<ClassScore>,
}

/// Precision, recall and IoU per class from a confusion matrix.
pub fn class_scores(cm: &ConfusionMatrix) -> ClassScores {
    let n = cm.num_classes();
    let per_class = (0..n)
        .map(|j| {
            let diag = cm.get(j, j) as f64;
            let row = cm.row_sum(j);
            let col = cm.col_sum(j);
            let union = row + col - cm.get(j, j);
            ClassScore {
                precision: (col > 0).then(|| diag / col as f64),
                recall: (row > 0).then(|| diag / row as f64),
                iou: (union > 0).then(|| diag / union as f64),
            }
        })
        .collect();
    ClassScores { per_class }
}

/// How undefined per-class IoUs enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanIouPolicy {
    /// Average only over classes whose IoU is defined.
    SkipUndefined,
    /// Treat undefined IoUs as zero and divide by the class count.
    CountUndefinedAsZero,
}

/// Mean IoU over classes under the chosen undefined-score policy.
pub fn mean_iou(scores: &ClassScores, policy: MeanIouPolicy) -> Result<f64, MetricsError> {
    let n = scores.per_class.len();
    let defined: Vec<f64> = scores.per_class.iter().filter_map(|s| s.iou).collect();
    match policy {
        MeanIouPolicy::SkipUndefined => {
            if defined.is_empty() {
                Err(MetricsError::AllUndefined)
            } else {
                Ok(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        }
        MeanIouPolicy::CountUndefinedAsZero => {
            Ok(defined.iter().sum::<f64>() / n as f64)
        }
    }
}

/// Scores of one segment against the counterpart component set.
///
/// Predicted segments carry `precision` (and `matched` per the
/// non-empty-intersection rule); ground-truth segments carry `recall`
/// (with `matched` meaning detected). `iou` is measured against the
/// union of intersecting same-class counterpart segments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentScore {
    pub segment_index: usize,
    pub class_id: u8,
    pub size: usize,
    pub matched: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// One entry per predicted segment.
    pub pred: Vec<SegmentScore>,
    /// One entry per ground-truth segment; `matched == false` means the
    /// object is entirely non-detected.
    pub gt: Vec<SegmentScore>,
}

/// Grid of segment indices for one component set; usize::MAX marks
/// pixels outside every segment.
fn segment_grid(set: &ComponentSet) -> Vec<usize> {
    let mut grid = vec![usize::MAX; set.height * set.width];
    for (idx, seg) in set.segments.iter().enumerate() {
        for (row, col) in seg.pixels() {
            grid[row * set.width + col] = idx;
        }
    }
    grid
}

fn score_side(own: &ComponentSet, other: &ComponentSet, is_pred_side: bool) -> Vec<SegmentScore> {
    let other_grid = segment_grid(other);
    let width = own.width;
    own.segments
        .iter()
        .enumerate()
        .map(|(segment_index, seg)| {
            let mut hits = 0usize;
            let mut counterparts: Vec<usize> = Vec::new();
            for (row, col) in seg.pixels() {
                let o = other_grid[row * width + col];
                if o != usize::MAX && other.segments[o].class_id == seg.class_id {
                    hits += 1;
                    if !counterparts.contains(&o) {
                        counterparts.push(o);
                    }
                }
            }
            let counterpart_pixels: usize =
                counterparts.iter().map(|&o| other.segments[o].size).sum();
            let union = seg.size + counterpart_pixels - hits;
            let overlap = hits as f64 / seg.size as f64;
            SegmentScore {
                segment_index,
                class_id: seg.class_id,
                size: seg.size,
                matched: hits > 0,
                precision: is_pred_side.then_some(overlap),
                recall: (!is_pred_side).then_some(overlap),
                iou: hits as f64 / union as f64,
            }
        })
        .collect()
}

/// Matches predicted segments against ground-truth segments of the same
/// class. Both sets must come from the same image shape and, for
/// meaningful results, the same post-processing parameters.
pub fn match_segments(
    pred_set: &ComponentSet,
    gt_set: &ComponentSet,
) -> Result<MatchResult, MetricsError> {
    if !pred_set.same_shape(gt_set) {
        return Err(MetricsError::ShapeMismatch {
            want_h: gt_set.height,
            want_w: gt_set.width,
            got_h: pred_set.height,
            got_w: pred_set.width,
        });
    }
    Ok(MatchResult {
        pred: score_side(pred_set, gt_set, true),
        gt: score_side(gt_set, pred_set, false),
    })
}

/// Per-class averages of segment scores, plus detection counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSegmentSummary {
    pub class_id: u8,
    pub pred_count: usize,
    pub gt_count: usize,
    /// Predicted segments with empty same-class ground-truth intersection.
    pub false_detections: usize,
    /// Ground-truth segments with recall zero.
    pub non_detections: usize,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    /// Mean IoU over predicted segments.
    pub mean_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub per_class: Vec<ClassSegmentSummary>,
}

/// Averages per-segment scores per class: precision and IoU over
/// predicted segments, recall over ground-truth segments.
pub fn segment_score_summary(result: &MatchResult) -> Result<SegmentSummary, MetricsError> {
    if result.pred.is_empty() && result.gt.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut classes: Vec<u8> = result
        .pred
        .iter()
        .chain(&result.gt)
        .map(|s| s.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let per_class = classes
        .into_iter()
        .map(|class_id| {
            let preds: Vec<&SegmentScore> = result
                .pred
                .iter()
                .filter(|s| s.class_id == class_id)
                .collect();
            let gts: Vec<&SegmentScore> = result
                .gt
                .iter()
                .filter(|s| s.class_id == class_id)
                .collect();
            let mean = |values: Vec<f64>| {
                (!values.is_empty())
                    .then(|| values.iter().sum::<f64>() / values.len() as f64)
            };
            ClassSegmentSummary {
                class_id,
                pred_count: preds.len(),
                gt_count: gts.len(),
                false_detections: preds.iter().filter(|s| !s.matched).count(),
                non_detections: gts.iter().filter(|s| !s.matched).count(),
                mean_precision: mean(preds.iter().filter_map(|s| s.precision).collect()),
                mean_recall: mean(gts.iter().filter_map(|s| s.recall).collect()),
                mean_iou: mean(preds.iter().map(|s| s.iou).collect()),
            }
        })
        .collect();
    Ok(SegmentSummary { per_class })
}
