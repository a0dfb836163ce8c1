//! Threshold-free and thresholded evaluation: ROC/AuC, average precision,
//! accuracy counters, and the source-by-stage generalization matrix with its
//! CSV/JSON/heatmap reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::{self, GeneratorSource, Timeline};
use crate::detector::{predict_scores, DetectorModel, HeadKind};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 32;

/// Scores for one (test source, stage) pairing; higher = more synthetic.
#[derive(Clone, Debug)]
pub struct ScoreSet {
    pub real_scores: Vec<f64>,
    pub fake_scores: Vec<f64>,
    pub source_id: String,
    pub stage: u32,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.real_scores.is_empty() || self.fake_scores.is_empty() {
            return Err(Error::Config(format!(
                "score set {}/stage {} needs both classes nonempty",
                self.source_id, self.stage
            )));
        }
        for &s in self.real_scores.iter().chain(self.fake_scores.iter()) {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "score in set {}/stage {}",
                    self.source_id, self.stage
                )));
            }
        }
        Ok(())
    }
}

/// ROC as an explicit point list, (fpr, tpr), including (0,0) and (1,1).
#[derive(Clone, Debug)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Threshold sweep with tied scores grouped into single steps, so the curve
/// takes one (possibly diagonal) segment per distinct score value.
pub fn roc_curve(scores: &ScoreSet) -> Result<RocCurve> {
    scores.validate()?;
    // (score, is_fake) sorted by descending score.
    let mut all: Vec<(f64, bool)> = scores
        .fake_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.real_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let np = scores.fake_scores.len() as f64;
    let nn = scores.real_scores.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(RocCurve { points })
}

/// Area under the ROC by trapezoidal integration over the grouped sweep;
/// equals the rank statistic P(fake > real) + ½·P(tie).
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let curve = roc_curve(scores)?;
    let mut area = 0.0;
    for pair in curve.points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

/// Fraction of synthetic-image scores above the decision threshold.
pub fn synthetic_accuracy(fake_scores: &[f64], threshold: f64) -> f64 {
    if fake_scores.is_empty() {
        return 0.0;
    }
    fake_scores.iter().filter(|&&s| s > threshold).count() as f64 / fake_scores.len() as f64
}

/// Fraction of real-image scores at or below the decision threshold.
pub fn real_accuracy(real_scores: &[f64], threshold: f64) -> f64 {
    if real_scores.is_empty() {
        return 0.0;
    }
    real_scores.iter().filter(|&&s| s <= threshold).count() as f64 / real_scores.len() as f64
}

/// Average precision over the descending-score sweep, synthetic = positive,
/// tied scores processed as one block.
pub fn average_precision(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut all: Vec<(f64, bool)> = scores
        .fake_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.real_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let total_pos = scores.fake_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        if recall > prev_recall {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Thresholded precision/recall/F1 with synthetic as the positive class;
/// zero-denominator cases are defined as 0.
pub fn precision_recall_f1(scores: &ScoreSet, threshold: f64) -> (f64, f64, f64) {
    let tp = scores.fake_scores.iter().filter(|&&s| s > threshold).count() as f64;
    let fp = scores.real_scores.iter().filter(|&&s| s > threshold).count() as f64;
    let fn_ = scores.fake_scores.len() as f64 - tp;
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

// ---------------------------------------------------------------------------
// Generalization matrix
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Test source was added at exactly this stage.
    Diagonal,
    /// Test source is in the stage's cumulative training history.
    Seen,
    /// Test source is released after this stage.
    Unseen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CellMetrics {
    pub synthetic_accuracy: f64,
    pub real_accuracy: f64,
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Test-source x training-stage evaluation grid, rows and columns in
/// release order, plus the stage-wise real-accuracy row.
#[derive(Clone, Debug)]
pub struct MetricsMatrix {
    /// Row labels: generated source ids in release order.
    pub source_ids: Vec<String>,
    /// Column labels: the source id added at each stage (1-based order).
    pub stage_sources: Vec<String>,
    /// cells[row][col].
    pub cells: Vec<Vec<CellMetrics>>,
    pub regions: Vec<Vec<Region>>,
    /// Real-image accuracy per stage (stage-dependent, source-independent).
    pub real_accuracy: Vec<f64>,
}

impl MetricsMatrix {
    pub fn stage_count(&self) -> usize {
        self.stage_sources.len()
    }
}

pub fn region_for(source_order: u32, stage: u32) -> Region {
    use std::cmp::Ordering::*;
    match source_order.cmp(&stage) {
        Equal => Region::Diagonal,
        Less => Region::Seen,
        Greater => Region::Unseen,
    }
}

fn eval_scores(model: &DetectorModel, images: &[crate::image::ImageBuffer]) -> Result<Vec<f64>> {
    // Deterministic eval-time transform: center crop to the model input.
    let cropped = images
        .iter()
        .map(|img| crate::image::center_crop(img, model.input_size))
        .collect::<Result<Vec<_>>>()?;
    predict_scores(model, &cropped, EVAL_BATCH)
}

/// Score every (test source, stage) cell on held-out test images. `models`
/// must be the stage checkpoints in order (stage indices 1..N); real test
/// images are scored once per stage and shared across that column.
pub fn build_matrix(
    models: &[DetectorModel],
    timeline: &Timeline,
    corpus_dir: &Path,
) -> Result<MetricsMatrix> {
    if models.len() != timeline.generated.len() {
        return Err(Error::Config(format!(
            "{} stage models for {} timeline sources",
            models.len(),
            timeline.generated.len()
        )));
    }
    for (k, model) in models.iter().enumerate() {
        if model.head != HeadKind::WholeImage {
            return Err(Error::Config(format!("stage {} model is not a whole-image head", k + 1)));
        }
        if model.stage_index != k as u32 + 1 {
            return Err(Error::Config(format!(
                "model at position {} carries stage index {}, expected {}",
                k,
                model.stage_index,
                k as u32 + 1
            )));
        }
    }
    let load_test = |source: &GeneratorSource| -> Result<Vec<crate::image::ImageBuffer>> {
        corpus::load_split(corpus_dir, source, "test").map_err(|e| match e {
            Error::MissingData(msg) => {
                Error::MissingData(format!("test split of source {:?}: {msg}", source.id))
            }
            other => other,
        })
    };

    let real_images = load_test(&timeline.real)?;
    let fake_images = timeline
        .generated
        .iter()
        .map(load_test)
        .collect::<Result<Vec<_>>>()?;

    let n = timeline.generated.len();
    let mut cells = vec![vec![CellMetrics::default(); n]; n];
    let mut regions = vec![vec![Region::Unseen; n]; n];
    let mut real_acc_row = Vec::with_capacity(n);

    for (col, model) in models.iter().enumerate() {
        let stage = col as u32 + 1;
        let real_scores = eval_scores(model, &real_images)?;
        real_acc_row.push(real_accuracy(&real_scores, DEFAULT_THRESHOLD));
        for (row, source) in timeline.generated.iter().enumerate() {
            let fake_scores = eval_scores(model, &fake_images[row])?;
            let set = ScoreSet {
                real_scores: real_scores.clone(),
                fake_scores,
                source_id: source.id.clone(),
                stage,
            };
            let (precision, recall, f1) = precision_recall_f1(&set, DEFAULT_THRESHOLD);
            let syn_acc = synthetic_accuracy(&set.fake_scores, DEFAULT_THRESHOLD);
            let real_acc = real_acc_row[col];
            cells[row][col] = CellMetrics {
                synthetic_accuracy: syn_acc,
                real_accuracy: real_acc,
                balanced_accuracy: (syn_acc + real_acc) / 2.0,
                auc: auc(&set)?,
                ap: average_precision(&set)?,
                precision,
                recall,
                f1,
            };
            regions[row][col] =
                region_for(source.order.expect("timeline sources carry order"), stage);
        }
    }

    Ok(MetricsMatrix {
        source_ids: timeline.generated.iter().map(|s| s.id.clone()).collect(),
        stage_sources: timeline.generated.iter().map(|s| s.id.clone()).collect(),
        cells,
        regions,
        real_accuracy: real_acc_row,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LongCell<'a> {
    test_source: &'a str,
    stage: u32,
    region: &'a str,
    metrics: CellMetrics,
}

fn csv_for(matrix: &MetricsMatrix, pick: impl Fn(&CellMetrics) -> f64) -> String {
    let mut out = String::from("test_source");
    for k in 1..=matrix.stage_count() {
        out.push_str(&format!(",stage_{k}"));
    }
    out.push('\n');
    for (row, id) in matrix.source_ids.iter().enumerate() {
        out.push_str(id);
        for col in 0..matrix.stage_count() {
            out.push_str(&format!(",{:.6}", pick(&matrix.cells[row][col])));
        }
        out.push('\n');
    }
    out
}

/// Piecewise-linear viridis ramp over [0,1]; endpoints are the exact viridis
/// limit colors.
pub fn viridis(t: f64) -> [u8; 3] {
    const ANCHORS: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut rgb = ANCHORS[ANCHORS.len() - 1].1;
    for pair in ANCHORS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            rgb = [
                c0[0] + a * (c1[0] - c0[0]),
                c0[1] + a * (c1[1] - c0[1]),
                c0[2] + a * (c1[2] - c0[2]),
            ];
            break;
        }
    }
    [rgb[0].round() as u8, rgb[1].round() as u8, rgb[2].round() as u8]
}

const HEATMAP_CELL: usize = 32;

fn heatmap_ppm(matrix: &MetricsMatrix, pick: impl Fn(&CellMetrics) -> f64) -> Vec<u8> {
    let rows = matrix.source_ids.len();
    let cols = matrix.stage_count();
    let (w, h) = (cols * HEATMAP_CELL, rows * HEATMAP_CELL);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let color = viridis(pick(&matrix.cells[y / HEATMAP_CELL][x / HEATMAP_CELL]));
            out.extend_from_slice(&color);
        }
    }
    out
}

/// Write the per-metric CSVs (`accuracy.csv` carries the real-accuracy row),
/// the long-format `matrix.json`, and per-metric PPM heatmaps. Returns the
/// paths written.
pub fn emit_reports(matrix: &MetricsMatrix, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.as_path(), e))?;
        written.push(path);
        Ok(())
    };

    let metric_views: [(&str, fn(&CellMetrics) -> f64); 3] = [
        ("accuracy", |c| c.synthetic_accuracy),
        ("auc", |c| c.auc),
        ("ap", |c| c.ap),
    ];
    for (name, pick) in metric_views {
        let mut csv = csv_for(matrix, pick);
        if name == "accuracy" {
            csv.push_str("real");
            for col in 0..matrix.stage_count() {
                csv.push_str(&format!(",{:.6}", matrix.real_accuracy[col]));
            }
            csv.push('\n');
        }
        write(&format!("{name}.csv"), csv.as_bytes())?;
        write(&format!("{name}.ppm"), &heatmap_ppm(matrix, pick))?;
    }

    let mut long = Vec::new();
    for (row, id) in matrix.source_ids.iter().enumerate() {
        for col in 0..matrix.stage_count() {
            let region = match matrix.regions[row][col] {
                Region::Diagonal => "diagonal",
                Region::Seen => "seen",
                Region::Unseen => "unseen",
            };
            long.push(LongCell {
                test_source: id,
                stage: col as u32 + 1,
                region,
                metrics: matrix.cells[row][col],
            });
        }
    }
    for col in 0..matrix.stage_count() {
        let mut metrics = CellMetrics::default();
        metrics.real_accuracy = matrix.real_accuracy[col];
        long.push(LongCell {
            test_source: "real",
            stage: col as u32 + 1,
            region: "real",
            metrics,
        });
    }
    let json = serde_json::to_string_pretty(&long).expect("matrix serializes");
    write("matrix.json", json.as_bytes())?;
    Ok(written)
}
