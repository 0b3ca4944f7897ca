//! Annotation files, few-shot subsets, prompt templates, and response logs.
//!
//! Annotations use a COCO-like JSON subset: `images[]` (`id`, `width`,
//! `height`, optional `file_name`), `categories[]` (`id`, `name`), and
//! `annotations[]` (`image_id`, `category_id`, `bbox` as pixel `[x, y, w, h]`).
//! Unknown fields are ignored, so full COCO files load. Pixel boxes are mapped
//! to the 0–1000 frame of their image, rounding half away from zero.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{BBox, COORD_MAX};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("detection prompt needs a category")]
    MissingCategory,
    #[error("line {line}: unknown {kind} '{value}'")]
    UnknownId {
        line: usize,
        kind: &'static str,
        value: String,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn from_json(err: serde_json::Error, line_offset: usize) -> Self {
        Self::Parse {
            line: err.line() + line_offset,
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub id: u64,
    pub name: String,
}

/// A ground-truth instance with both its source pixel box and its normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    pub category: String,
    /// `[x, y, w, h]` in pixels as read from the file.
    pub pixel_bbox: [f64; 4],
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<CategoryInfo>,
    pub instances: Vec<AnnotatedInstance>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotationFile {
    images: Vec<ImageInfo>,
    categories: Vec<CategoryInfo>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

/// Maps a pixel `[x, y, w, h]` box to the normalized frame of a
/// `width` x `height` image.
pub fn normalize_pixel_box(xywh: [f64; 4], width: u32, height: u32) -> Result<BBox, String> {
    let [x, y, w, h] = xywh;
    if xywh.iter().any(|v| !v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(format!("bbox {xywh:?} must be finite with positive size"));
    }
    if width == 0 || height == 0 {
        return Err(format!("image dimensions {width}x{height} must be positive"));
    }
    let scale = f64::from(COORD_MAX);
    let sx = |v: f64| (v * scale / f64::from(width)).round() as i64;
    let sy = |v: f64| (v * scale / f64::from(height)).round() as i64;
    BBox::new(sx(x), sy(y), sx(x + w), sy(y + h)).map_err(|e| e.to_string())
}

impl AnnotationSet {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&CategoryInfo> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Instances of `category` in image `image_id`.
    pub fn instances_of<'a>(&'a self, image_id: u64, category: &'a str) -> impl Iterator<Item = &'a AnnotatedInstance> + 'a {
        self.instances
            .iter()
            .filter(move |i| i.image_id == image_id && i.category == category)
    }

    /// Category names present in an image, in category-list order.
    pub fn categories_in(&self, image_id: u64) -> Vec<&str> {
        self.categories
            .iter()
            .filter(|c| self.instances.iter().any(|i| i.image_id == image_id && i.category_id == c.id))
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        let raw: RawAnnotationFile = serde_json::from_str(text).map_err(|e| DataError::from_json(e, 0))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawAnnotationFile) -> Result<Self, DataError> {
        let mut image_dims = HashMap::new();
        for img in &raw.images {
            if img.width == 0 || img.height == 0 {
                return Err(DataError::Validation(format!(
                    "image {} has non-positive dimensions {}x{}",
                    img.id, img.width, img.height
                )));
            }
            if image_dims.insert(img.id, (img.width, img.height)).is_some() {
                return Err(DataError::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        let mut cat_names = HashMap::new();
        let mut seen_names = HashSet::new();
        for c in &raw.categories {
            if !seen_names.insert(c.name.as_str()) {
                return Err(DataError::Validation(format!("duplicate category name '{}'", c.name)));
            }
            if cat_names.insert(c.id, c.name.clone()).is_some() {
                return Err(DataError::Validation(format!("duplicate category id {}", c.id)));
            }
        }
        let mut instances = Vec::with_capacity(raw.annotations.len());
        for (idx, a) in raw.annotations.iter().enumerate() {
            let label = match a.id {
                Some(id) => format!("annotation {idx} (id {id})"),
                None => format!("annotation {idx}"),
            };
            let &(w, h) = image_dims.get(&a.image_id).ok_or_else(|| {
                DataError::Validation(format!("{label}: unknown image id {}", a.image_id))
            })?;
            let category = cat_names.get(&a.category_id).ok_or_else(|| {
                DataError::Validation(format!("{label}: unknown category id {}", a.category_id))
            })?;
            let bbox = normalize_pixel_box(a.bbox, w, h)
                .map_err(|e| DataError::Validation(format!("{label}: {e}")))?;
            instances.push(AnnotatedInstance {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                category: category.clone(),
                pixel_bbox: a.bbox,
                bbox,
            });
        }
        Ok(Self {
            images: raw.images,
            categories: raw.categories,
            instances,
        })
    }

    /// Serializes back to the pixel-space file format.
    pub fn to_json_string(&self) -> String {
        let raw = RawAnnotationFile {
            images: self.images.clone(),
            categories: self.categories.clone(),
            annotations: self
                .instances
                .iter()
                .map(|i| RawAnnotation {
                    id: i.id,
                    image_id: i.image_id,
                    category_id: i.category_id,
                    bbox: i.pixel_bbox,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation file serializes")
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    AnnotationSet::from_json_str(&text)
}

pub fn write_annotations(ann: &AnnotationSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut text = ann.to_json_string();
    text.push('\n');
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Picks up to `shots` images per requested category, uniformly without
/// replacement, and keeps every instance of the requested categories in the
/// chosen images.
pub fn few_shot_sample(
    ann: &AnnotationSet,
    shots: usize,
    categories: &[String],
    seed: u64,
) -> Result<AnnotationSet, DataError> {
    let mut cats = Vec::new();
    for name in categories {
        let c = ann
            .category_by_name(name)
            .ok_or_else(|| DataError::UnknownCategory(name.clone()))?;
        if !cats.contains(&c) {
            cats.push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for cat in &cats {
        let candidates: Vec<u64> = ann
            .images
            .iter()
            .filter(|img| ann.instances.iter().any(|i| i.image_id == img.id && i.category_id == cat.id))
            .map(|img| img.id)
            .collect();
        let k = shots.min(candidates.len());
        for i in index::sample(&mut rng, candidates.len(), k) {
            chosen.insert(candidates[i]);
        }
    }
    let cat_ids: HashSet<u64> = cats.iter().map(|c| c.id).collect();
    Ok(AnnotationSet {
        images: ann.images.iter().filter(|i| chosen.contains(&i.id)).cloned().collect(),
        categories: ann.categories.iter().filter(|c| cat_ids.contains(&c.id)).cloned().collect(),
        instances: ann
            .instances
            .iter()
            .filter(|i| chosen.contains(&i.image_id) && cat_ids.contains(&i.category_id))
            .cloned()
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Classification,
    /// Yes/no presence check used by the judge evaluation mode.
    Existence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TaskKind,
    pub text: &'static str,
}

pub const CATEGORY_SLOT: &str = "{category}";

pub const DETECTION_PROMPT: PromptTemplate = PromptTemplate {
    kind: TaskKind::Detection,
    text: "Detect all objects belonging to the category '{category}' in the image, and provide the bounding boxes (between 0 and 1000, integer) and confidence (between 0 and 1, with two decimal places). If no object belonging to the category '{category}' in the image, return 'No Objects'. Output the thinking process in <think> </think> and final answer in <answer> </answer> tags. The output answer format should be as follows: <think> ... </think><answer>[{'Position': [x1, y1, x2, y2], 'Confidence': number}, ...]</answer> Please strictly follow the format.",
};

// Kept verbatim, mismatched tags in the second half included.
pub const CLASSIFICATION_PROMPT: PromptTemplate = PromptTemplate {
    kind: TaskKind::Classification,
    text: "This is an image containing a plant. Please identify the species of the plant based on the image. Output the thinking process in <think> </think> and final answer in </think> </answer> tags. The output answer format should be as follows: <think> ... </think> </think>species name</answer> Please strictly follow the format.",
};

/// Presence-check prompt for the judge mode.
pub const EXISTENCE_PROMPT: PromptTemplate = PromptTemplate {
    kind: TaskKind::Existence,
    text: "Is there any '{category}' in the image? Answer yes or no inside the answer tag.",
};

pub fn template_for(kind: TaskKind) -> PromptTemplate {
    match kind {
        TaskKind::Detection => DETECTION_PROMPT,
        TaskKind::Classification => CLASSIFICATION_PROMPT,
        TaskKind::Existence => EXISTENCE_PROMPT,
    }
}

/// Fills the `{category}` slot. Templates without a slot are returned as is.
pub fn build_prompt(template: &PromptTemplate, category: Option<&str>) -> Result<String, DataError> {
    if !template.text.contains(CATEGORY_SLOT) {
        return Ok(template.text.to_string());
    }
    let category = category.ok_or(DataError::MissingCategory)?;
    Ok(template.text.replace(CATEGORY_SLOT, category))
}

/// One model response for an (image, category) query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub image_id: u64,
    pub category: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResponseLog {
    pub records: Vec<ResponseRecord>,
}

impl ResponseLog {
    /// Parses line-delimited records, checking ids against the annotations.
    /// Blank lines are skipped.
    pub fn parse(text: &str, ann: &AnnotationSet) -> Result<Self, DataError> {
        let image_ids: HashSet<u64> = ann.images.iter().map(|i| i.id).collect();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ResponseRecord = serde_json::from_str(line).map_err(|e| DataError::from_json(e, i))?;
            if !image_ids.contains(&rec.image_id) {
                return Err(DataError::UnknownId {
                    line: i + 1,
                    kind: "image id",
                    value: rec.image_id.to_string(),
                });
            }
            if ann.category_by_name(&rec.category).is_none() {
                return Err(DataError::UnknownId {
                    line: i + 1,
                    kind: "category",
                    value: rec.category,
                });
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn read_response_log(path: impl AsRef<Path>, ann: &AnnotationSet) -> Result<ResponseLog, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    ResponseLog::parse(&text, ann)
}

pub fn write_response_log(log: &ResponseLog, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, log.to_jsonl()).map_err(|e| DataError::io(path, e))
}
