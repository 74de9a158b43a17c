//! Corpus-level statistics comparing the two decision rules: empirical
//! CDFs of per-segment scores with a first-order stochastic dominance
//! check, size-conditioned false-/non-detection histograms with a
//! Bayes/ML ratio panel, and non-detection heatmaps.
//!
//! CDFs and histograms are written as CSV, heatmaps as 16-bit PGM with
//! the count-to-sample normalization recorded in a JSON sidecar.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::components::ComponentSet;
use crate::io::{write_pgm, FormatError};
use crate::metrics::SegmentScore;
use crate::tensor::LabelMap;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no sample values")]
    EmptyInput,
    #[error("sample {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("bin edges must be strictly increasing and non-empty")]
    BadEdges,
    #[error("image {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    ShapeMismatch {
        index: usize,
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("{gt} ground-truth sets vs {preds} prediction maps")]
    CountMismatch { gt: usize, preds: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Empirical CDF of score samples in [0, 1].
///
/// `F(x)` is the fraction of samples `<= x`: right-continuous,
/// nondecreasing, with `F(1) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCdf {
    samples: Vec<f64>,
}

/// Builds an empirical CDF from per-segment score values.
pub fn empirical_cdf(values: &[f64]) -> Result<EmpiricalCdf, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    for (index, &value) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(AnalysisError::OutOfRange { index, value });
        }
    }
    let mut samples = values.to_vec();
    samples.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(EmpiricalCdf { samples })
}

impl EmpiricalCdf {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// F(x) = #(samples <= x) / n.
    pub fn eval(&self, x: f64) -> f64 {
        let below = self.samples.partition_point(|&v| v <= x);
        below as f64 / self.samples.len() as f64
    }
}

/// Result of the first-order stochastic dominance check `F1 < F2`
/// (dominated means `F1(x) >= F2(x)` everywhere).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceCheck {
    pub dominated: bool,
    /// max over the merged sample grid of `F2(x) - F1(x)`, clamped at 0;
    /// zero when dominance holds, otherwise the size of the worst
    /// violation.
    pub max_violation: f64,
}

/// Checks whether `f1` is dominated stochastically to first order by
/// `f2`, i.e. `F1(x) >= F2(x)` for all x. For step functions it suffices
/// to compare on the merged sample grid.
pub fn dominates_first_order(f1: &EmpiricalCdf, f2: &EmpiricalCdf) -> DominanceCheck {
    let mut max_violation = 0.0f64;
    let mut dominated = true;
    for &x in f1.samples.iter().chain(&f2.samples) {
        let diff = f2.eval(x) - f1.eval(x);
        if diff > 0.0 {
            dominated = false;
            max_violation = max_violation.max(diff);
        }
    }
    DominanceCheck {
        dominated,
        max_violation,
    }
}

/// Per-bin counts for the two decision rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BinCount {
    pub bayes: u64,
    pub ml: u64,
}

impl BinCount {
    /// Bayes count over ML count; undefined when the ML count is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.ml > 0).then(|| self.bayes as f64 / self.ml as f64)
    }
}

/// Segment counts conditioned on segment size.
///
/// `bins[i]` covers sizes `edges[i] <= s < edges[i + 1]`. Sizes below
/// `edges[0]` land in `underflow`, sizes at or above the last edge in
/// `overflow`, so no segment is ever lost to binning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizeHistogram {
    pub edges: Vec<u64>,
    pub underflow: BinCount,
    pub bins: Vec<BinCount>,
    pub overflow: BinCount,
}

impl SizeHistogram {
    fn new(edges: &[u64]) -> Result<Self, AnalysisError> {
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::BadEdges);
        }
        Ok(SizeHistogram {
            edges: edges.to_vec(),
            underflow: BinCount { bayes: 0, ml: 0 },
            bins: vec![BinCount { bayes: 0, ml: 0 }; edges.len() - 1],
            overflow: BinCount { bayes: 0, ml: 0 },
        })
    }

    fn add(&mut self, size: u64, is_bayes: bool) {
        let slot = if size < self.edges[0] {
            &mut self.underflow
        } else if size >= *self.edges.last().unwrap() {
            &mut self.overflow
        } else {
            let bin = self.edges.partition_point(|&e| e <= size) - 1;
            &mut self.bins[bin]
        };
        if is_bayes {
            slot.bayes += 1;
        } else {
            slot.ml += 1;
        }
    }

    pub fn total(&self) -> BinCount {
        let mut total = BinCount {
            bayes: self.underflow.bayes + self.overflow.bayes,
            ml: self.underflow.ml + self.overflow.ml,
        };
        for b in &self.bins {
            total.bayes += b.bayes;
            total.ml += b.ml;
        }
        total
    }
}

/// Default size bins: the post-processing minimum, then powers of two.
pub fn default_size_bin_edges() -> Vec<u64> {
    vec![10, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
}

/// False-detection and non-detection histograms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectionHistograms {
    /// Unmatched predicted segments, binned by predicted-segment size.
    pub false_detection: SizeHistogram,
    /// Undetected ground-truth segments, binned by object size.
    pub non_detection: SizeHistogram,
}

/// Builds both histograms from per-rule segment scores. The same bin
/// edges apply to both rules so the per-bin ratio is meaningful.
pub fn detection_histograms(
    pred_bayes: &[SegmentScore],
    pred_ml: &[SegmentScore],
    gt_vs_bayes: &[SegmentScore],
    gt_vs_ml: &[SegmentScore],
    edges: &[u64],
) -> Result<DetectionHistograms, AnalysisError> {
    let mut false_detection = SizeHistogram::new(edges)?;
    let mut non_detection = SizeHistogram::new(edges)?;
    for s in pred_bayes.iter().filter(|s| !s.matched) {
        false_detection.add(s.size as u64, true);
    }
    for s in pred_ml.iter().filter(|s| !s.matched) {
        false_detection.add(s.size as u64, false);
    }
    for s in gt_vs_bayes.iter().filter(|s| !s.matched) {
        non_detection.add(s.size as u64, true);
    }
    for s in gt_vs_ml.iter().filter(|s| !s.matched) {
        non_detection.add(s.size as u64, false);
    }
    Ok(DetectionHistograms {
        false_detection,
        non_detection,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    PixelLevel,
    ObjectLevel,
}

/// Accumulated counts over an image grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub kind: HeatmapKind,
    pub counts: Vec<u64>,
}

impl Heatmap {
    fn zeros(height: usize, width: usize, kind: HeatmapKind) -> Self {
        Heatmap {
            height,
            width,
            kind,
            counts: vec![0; height * width],
        }
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Merges another accumulator of the same shape and kind.
    pub fn merge(&mut self, other: &Heatmap) {
        assert_eq!(self.height, other.height);
        assert_eq!(self.width, other.width);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Accumulates where one rule misses pixels and whole objects of a class
/// over a corpus.
///
/// Pixel level: every pixel of a ground-truth segment of `class_id`
/// whose predicted label differs. Object level: all pixels of each
/// ground-truth segment with no correctly predicted pixel at all, so an
/// object-level count never exceeds the pixel-level count.
pub fn nondetection_heatmaps(
    gt_sets: &[ComponentSet],
    pred_labels: &[LabelMap],
    class_id: u8,
) -> Result<(Heatmap, Heatmap), AnalysisError> {
    if gt_sets.len() != pred_labels.len() {
        return Err(AnalysisError::CountMismatch {
            gt: gt_sets.len(),
            preds: pred_labels.len(),
        });
    }
    let first = gt_sets.first().ok_or(AnalysisError::EmptyInput)?;
    let (h, w) = (first.height, first.width);
    let mut pixel_level = Heatmap::zeros(h, w, HeatmapKind::PixelLevel);
    let mut object_level = Heatmap::zeros(h, w, HeatmapKind::ObjectLevel);

    for (index, (gt_set, pred)) in gt_sets.iter().zip(pred_labels).enumerate() {
        if gt_set.height != h
            || gt_set.width != w
            || pred.height() != h
            || pred.width() != w
        {
            return Err(AnalysisError::ShapeMismatch {
                index,
                want_h: h,
                want_w: w,
                got_h: pred.height(),
                got_w: pred.width(),
            });
        }
        for seg in gt_set.segments.iter().filter(|s| s.class_id == class_id) {
            let mut any_hit = false;
            for (row, col) in seg.pixels() {
                if pred.get(row, col) == class_id {
                    any_hit = true;
                } else {
                    pixel_level.counts[row * w + col] += 1;
                }
            }
            if !any_hit {
                for (row, col) in seg.pixels() {
                    object_level.counts[row * w + col] += 1;
                }
            }
        }
    }
    Ok((pixel_level, object_level))
}

/// CSV with columns `x,F_bayes,F_ml` over the merged sample grid.
pub fn write_cdf_csv(
    path: impl AsRef<Path>,
    bayes: &EmpiricalCdf,
    ml: &EmpiricalCdf,
) -> Result<(), AnalysisError> {
    let mut grid: Vec<f64> = bayes
        .samples
        .iter()
        .chain(&ml.samples)
        .copied()
        .collect();
    grid.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "x,F_bayes,F_ml")?;
    for x in grid {
        writeln!(out, "{},{},{}", x, bayes.eval(x), ml.eval(x))?;
    }
    out.flush()?;
    Ok(())
}

/// CSV with columns `bin_lo,bin_hi,bayes,ml,ratio`; the ratio field is
/// empty where the ML count is zero. Underflow and overflow rows use 0
/// and `inf` as their open ends.
pub fn write_histogram_csv(
    path: impl AsRef<Path>,
    hist: &SizeHistogram,
) -> Result<(), AnalysisError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "bin_lo,bin_hi,bayes,ml,ratio")?;
    let mut row = |lo: String, hi: String, count: &BinCount| -> std::io::Result<()> {
        let ratio = count
            .ratio()
            .map(|r| r.to_string())
            .unwrap_or_default();
        writeln!(out, "{lo},{hi},{},{},{ratio}", count.bayes, count.ml)
    };
    row("0".into(), hist.edges[0].to_string(), &hist.underflow)?;
    for (i, count) in hist.bins.iter().enumerate() {
        row(
            hist.edges[i].to_string(),
            hist.edges[i + 1].to_string(),
            count,
        )?;
    }
    row(
        hist.edges.last().unwrap().to_string(),
        "inf".into(),
        &hist.overflow,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct HeatmapSidecar {
    kind: HeatmapKind,
    height: usize,
    width: usize,
    max_count: u64,
    pgm_max_val: u16,
}

/// Writes a heatmap as 16-bit PGM, scaling counts to 0..=65535, and a
/// `<path>.meta.json` sidecar recording the normalization.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, heatmap: &Heatmap) -> Result<(), AnalysisError> {
    let max_count = heatmap.max_count();
    let samples: Vec<u16> = if max_count == 0 {
        vec![0; heatmap.counts.len()]
    } else {
        heatmap
            .counts
            .iter()
            .map(|&c| ((c as f64 / max_count as f64) * 65535.0).round() as u16)
            .collect()
    };
    write_pgm(
        path.as_ref(),
        &samples,
        heatmap.height,
        heatmap.width,
        65535,
    )?;
    let sidecar = HeatmapSidecar {
        kind: heatmap.kind,
        height: heatmap.height,
        width: heatmap.width,
        max_count,
        pgm_max_val: 65535,
    };
    let mut meta_path = path.as_ref().as_os_str().to_owned();
    meta_path.push(".meta.json");
    std::fs::write(meta_path, serde_json::to_vec_pretty(&sidecar)?.as_slice())?;
    Ok(())
}

impl From<serde_json::Error> for AnalysisError {
    fn from(e: serde_json::Error) -> Self {
        AnalysisError::Io(std::io::Error::other(e))
    }
}
