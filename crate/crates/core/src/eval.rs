//! COCO-style detection evaluation: AP at 101 interpolated recall points,
//! averaged over IoU thresholds 0.50:0.95, with AP50, AP75, and size buckets.
//!
//! Two protocols are supported. In direct mode only categories present in an
//! image's ground truth are queried, so predictions for absent categories are
//! dropped. In judge mode a yes/no existence judgment gates every queried
//! (image, category) pair: predictions are kept only when judged present.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::{AnnotationSet, ResponseLog};
use crate::grammar::{normalize_label, parse_detection_answer, parse_response, BBox, Prediction, COORD_MAX};
use crate::reward::iou;

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("judge mode: no existence judgment for image {image_id}, category '{category}'")]
    MissingJudgment { image_id: u64, category: String },
    #[error("image {image_id} has no pixel dimensions but size buckets were requested")]
    InconsistentDimensions { image_id: u64 },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
}

/// Area boundaries in squared pixels: small `< small_max`, medium
/// `< medium_max`, large otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small_max: f64,
    pub medium_max: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            small_max: 32.0 * 32.0,
            medium_max: 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// `None` disables AP_s / AP_m / AP_l.
    pub size_buckets: Option<SizeBuckets>,
    pub judge_mode: bool,
    /// Per image and category, highest-confidence first.
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            size_buckets: Some(SizeBuckets::default()),
            judge_mode: false,
            max_detections: 100,
        }
    }
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(EvalError::InvalidConfig("no IoU thresholds".into()));
        }
        if t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidConfig(format!(
                "IoU thresholds must be strictly increasing within (0, 1]: {t:?}"
            )));
        }
        if let Some(b) = self.size_buckets {
            if !(b.small_max > 0.0 && b.small_max < b.medium_max && b.medium_max.is_finite()) {
                return Err(EvalError::InvalidConfig(format!(
                    "size boundaries must be positive and increasing: {} / {}",
                    b.small_max, b.medium_max
                )));
            }
        }
        if self.max_detections == 0 {
            return Err(EvalError::InvalidConfig("max detections must be positive".into()));
        }
        Ok(())
    }
}

/// Predictions and ground truth for one image, keyed by category.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: u64,
    /// Pixel (width, height).
    pub dims: Option<(u32, u32)>,
    pub predictions: BTreeMap<String, Vec<Prediction>>,
    pub ground_truths: BTreeMap<String, Vec<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExistenceJudgment {
    pub image_id: u64,
    pub category: String,
    pub present: bool,
}

/// Fractions in [0, 1]; `None` when no category has ground truth in scope.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct APResult {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl APResult {
    pub fn columns(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("mAP", self.map),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("APs", self.ap_small),
            ("APm", self.ap_medium),
            ("APl", self.ap_large),
        ]
    }

    /// Six-column table, values x100 with one decimal and `-` for undefined.
    pub fn table(rows: &[(&str, &APResult)]) -> String {
        let mut out = format!("{:<12}", "Mode");
        for (name, _) in APResult::default().columns() {
            let _ = write!(out, " {name:>6}");
        }
        out.push('\n');
        for (label, r) in rows {
            let _ = write!(out, "{label:<12}");
            for (_, v) in r.columns() {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {:>6.1}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, " {:>6}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Area of a normalized box in squared pixels of a `dims` image.
pub fn pixel_area(b: &BBox, dims: (u32, u32)) -> f64 {
    let scale = f64::from(COORD_MAX);
    let w = b.width() as f64 * f64::from(dims.0) / scale;
    let h = b.height() as f64 * f64::from(dims.1) / scale;
    w * h
}

pub fn bucket_of(b: &BBox, dims: (u32, u32), buckets: &SizeBuckets) -> SizeBucket {
    let area = pixel_area(b, dims);
    if area < buckets.small_max {
        SizeBucket::Small
    } else if area < buckets.medium_max {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// One image's share of a single category's evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CategoryImage<'a> {
    pub image_id: u64,
    pub dims: Option<(u32, u32)>,
    pub predictions: &'a [Prediction],
    pub ground_truths: &'a [BBox],
}

/// Restriction of an AP computation to one size bucket.
#[derive(Debug, Clone, Copy)]
pub struct AreaFilter {
    pub bucket: SizeBucket,
    pub buckets: SizeBuckets,
}

struct RankedDet {
    confidence: f64,
    image_id: u64,
    emission: usize,
    tp: bool,
}

/// AP of one category at one IoU threshold, optionally restricted to a size
/// bucket. `None` when no in-scope ground truth exists.
///
/// Ground truth outside the bucket is ignored: a prediction matched to it is
/// dropped, and an unmatched prediction is dropped when its own area falls
/// outside the bucket.
pub fn compute_ap(
    images: &[CategoryImage<'_>],
    threshold: f64,
    area: Option<&AreaFilter>,
    max_detections: usize,
) -> Option<f64> {
    let in_scope = |b: &BBox, dims: Option<(u32, u32)>| match (area, dims) {
        (None, _) => true,
        (Some(f), Some(d)) => bucket_of(b, d, &f.buckets) == f.bucket,
        (Some(_), None) => false,
    };

    let mut npos = 0usize;
    let mut ranked = Vec::new();
    for img in images {
        let ignored: Vec<bool> = img.ground_truths.iter().map(|g| !in_scope(g, img.dims)).collect();
        npos += ignored.iter().filter(|&&i| !i).count();

        let mut order: Vec<usize> = (0..img.predictions.len()).collect();
        order.sort_by(|&a, &b| img.predictions[b].confidence.total_cmp(&img.predictions[a].confidence));
        order.truncate(max_detections);

        let mut used = vec![false; img.ground_truths.len()];
        for di in order {
            let det = &img.predictions[di];
            let pick = |want_ignored: bool, used: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in img.ground_truths.iter().enumerate() {
                    if used[gi] || ignored[gi] != want_ignored {
                        continue;
                    }
                    let v = iou(&det.bbox, g);
                    if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                best.map(|(gi, _)| gi)
            };
            let tp = if let Some(gi) = pick(false, &used) {
                used[gi] = true;
                true
            } else if let Some(gi) = pick(true, &used) {
                used[gi] = true;
                continue;
            } else if !in_scope(&det.bbox, img.dims) {
                continue;
            } else {
                false
            };
            ranked.push(RankedDet {
                confidence: det.confidence,
                image_id: img.image_id,
                emission: di,
                tp,
            });
        }
    }
    if npos == 0 {
        return None;
    }
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.emission.cmp(&b.emission))
    });

    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in &ranked {
        if d.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Runs the full evaluation over all images.
pub fn evaluate(
    results: &[ImageResult],
    cfg: &EvalConfig,
    judgments: Option<&[ExistenceJudgment]>,
) -> Result<APResult, EvalError> {
    cfg.validate()?;
    if cfg.size_buckets.is_some() {
        if let Some(r) = results.iter().find(|r| r.dims.is_none()) {
            return Err(EvalError::InconsistentDimensions { image_id: r.image_id });
        }
    }
    let verdicts: HashMap<(u64, &str), bool> = judgments
        .unwrap_or_default()
        .iter()
        .map(|j| ((j.image_id, j.category.as_str()), j.present))
        .collect();

    let mut images: Vec<&ImageResult> = results.iter().collect();
    images.sort_by_key(|r| r.image_id);

    // Predictions that survive the protocol, per category.
    let mut kept: BTreeMap<&str, Vec<CategoryImage<'_>>> = BTreeMap::new();
    const NONE: &[Prediction] = &[];
    const NO_GT: &[BBox] = &[];
    for img in &images {
        let queried: BTreeSet<&str> = if cfg.judge_mode {
            img.ground_truths
                .keys()
                .chain(img.predictions.keys())
                .map(String::as_str)
                .collect()
        } else {
            img.ground_truths.keys().map(String::as_str).collect()
        };
        for cat in queried {
            let gts = img.ground_truths.get(cat).map_or(NO_GT, Vec::as_slice);
            let mut preds = img.predictions.get(cat).map_or(NONE, Vec::as_slice);
            if cfg.judge_mode {
                let present = verdicts.get(&(img.image_id, cat)).ok_or_else(|| EvalError::MissingJudgment {
                    image_id: img.image_id,
                    category: cat.to_string(),
                })?;
                if !present {
                    preds = NONE;
                }
            }
            kept.entry(cat).or_default().push(CategoryImage {
                image_id: img.image_id,
                dims: img.dims,
                predictions: preds,
                ground_truths: gts,
            });
        }
    }

    let per_category = |threshold: f64, area: Option<&AreaFilter>| -> Vec<Option<f64>> {
        kept.values()
            .map(|imgs| compute_ap(imgs, threshold, area, cfg.max_detections))
            .collect()
    };
    // mean over thresholds per category, then over defined categories
    let averaged = |area: Option<&AreaFilter>| -> Option<f64> {
        let by_threshold: Vec<Vec<Option<f64>>> =
            cfg.iou_thresholds.iter().map(|&t| per_category(t, area)).collect();
        mean((0..kept.len()).filter_map(|c| mean(by_threshold.iter().filter_map(|row| row[c]))))
    };
    let single = |t: f64| mean(per_category(t, None).into_iter().flatten());

    let bucket = |b: SizeBucket| {
        cfg.size_buckets.and_then(|buckets| averaged(Some(&AreaFilter { bucket: b, buckets })))
    };
    Ok(APResult {
        map: averaged(None),
        ap50: single(0.5),
        ap75: single(0.75),
        ap_small: bucket(SizeBucket::Small),
        ap_medium: bucket(SizeBucket::Medium),
        ap_large: bucket(SizeBucket::Large),
    })
}

/// Reads a yes/no judgment from a judge response. Anything other than an
/// affirmative answer counts as absent.
pub fn parse_judgment(text: &str) -> bool {
    let parsed = parse_response(text);
    let answer = parsed.answer().unwrap_or(text);
    let norm = normalize_label(answer);
    let word = norm.trim_end_matches(['.', '!']);
    matches!(word, "yes" | "true" | "present")
}

/// Predictions parsed from a response log. Malformed responses contribute no
/// predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoggedResults {
    pub images: Vec<ImageResult>,
    pub judgments: Vec<ExistenceJudgment>,
}

pub fn results_from_log(ann: &AnnotationSet, log: &ResponseLog) -> LoggedResults {
    let mut images: BTreeMap<u64, ImageResult> = ann
        .images
        .iter()
        .map(|i| {
            (
                i.id,
                ImageResult {
                    image_id: i.id,
                    dims: Some((i.width, i.height)),
                    ..Default::default()
                },
            )
        })
        .collect();
    for inst in &ann.instances {
        if let Some(img) = images.get_mut(&inst.image_id) {
            img.ground_truths.entry(inst.category.clone()).or_default().push(inst.bbox);
        }
    }
    let mut judgments = Vec::new();
    for rec in &log.records {
        let Some(img) = images.get_mut(&rec.image_id) else { continue };
        let parsed = parse_response(&rec.response);
        let preds = parsed
            .answer()
            .and_then(|a| parse_detection_answer(a).ok())
            .map(|a| a.predictions().to_vec())
            .unwrap_or_default();
        img.predictions.entry(rec.category.clone()).or_default().extend(preds);
        if let Some(j) = &rec.judge_response {
            judgments.push(ExistenceJudgment {
                image_id: rec.image_id,
                category: rec.category.clone(),
                present: parse_judgment(j),
            });
        }
    }
    LoggedResults {
        images: images.into_values().collect(),
        judgments,
    }
}
