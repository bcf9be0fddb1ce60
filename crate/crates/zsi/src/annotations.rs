//! COCO-style annotation ingestion and seen/unseen benchmark set
//! construction.
//!
//! The training pool keeps only images whose (non-crowd) annotations are
//! exclusively seen-class; the test pool keeps every image with at least
//! one unseen-class annotation. Categories outside both lists are dropped
//! and never influence filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgeom::{rasterize, rle_decode, rle_from_string, BinaryMask, BoundingBox, Polygon, RleMask};

pub const SPLIT_48_17: &str = include_str!("../data/split_48_17.json");
pub const SPLIT_65_15: &str = include_str!("../data/split_65_15.json");

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse { offset: usize, line: usize, column: usize, message: String },
    #[error("annotation {annotation_id} references missing image {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id} references missing category {category_id}")]
    DanglingCategory { annotation_id: u64, category_id: u64 },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("duplicate category id {0}")]
    DuplicateCategory(u64),
    #[error("category {0} has an empty name")]
    EmptyCategoryName(u64),
    #[error("image {0} has non-positive dimensions")]
    BadImageSize(u64),
    #[error("unknown split {0:?} (built-ins: \"48/17\", \"65/15\")")]
    UnknownSplit(String),
    #[error("split {name:?}: class {class:?} appears in both seen and unseen lists")]
    SplitOverlap { name: String, class: String },
    #[error("split {0:?}: seen and unseen lists must both be non-empty")]
    SplitEmpty(String),
    #[error("annotation {0}: {1}")]
    BadSegmentation(u64, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

/// Segmentation payload as found in COCO files: polygon point lists, or
/// RLE with either integer counts or the compressed string form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle {
        /// `[height, width]`, COCO order.
        size: [usize; 2],
        counts: RleCounts,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u32>),
    Compressed(String),
}

impl Segmentation {
    /// Decode to a dense mask on the given image grid.
    pub fn to_mask(&self, width: usize, height: usize) -> Result<BinaryMask, String> {
        match self {
            Segmentation::Polygons(polys) => {
                let mut parsed = Vec::with_capacity(polys.len());
                for p in polys {
                    parsed.push(Polygon::new(p.clone()).map_err(|e| e.to_string())?);
                }
                Ok(rasterize(&parsed, width, height))
            }
            Segmentation::Rle { size, counts } => {
                let (h, w) = (size[0], size[1]);
                let rle = match counts {
                    RleCounts::Raw(runs) => RleMask { width: w, height: h, runs: runs.clone() },
                    RleCounts::Compressed(s) => {
                        rle_from_string(s, w, h).map_err(|e| e.to_string())?
                    }
                };
                rle_decode(&rle).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

impl InstanceAnnotation {
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        BoundingBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]).ok()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<CategoryRecord>,
}

impl Dataset {
    pub fn category_by_name(&self, name: &str) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    fn validate(&self) -> Result<(), AnnotationError> {
        let mut image_ids = BTreeSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(AnnotationError::BadImageSize(img.id));
            }
            if !image_ids.insert(img.id) {
                return Err(AnnotationError::DuplicateImage(img.id));
            }
        }
        let mut category_ids = BTreeSet::new();
        for cat in &self.categories {
            if cat.name.is_empty() {
                return Err(AnnotationError::EmptyCategoryName(cat.id));
            }
            if !category_ids.insert(cat.id) {
                return Err(AnnotationError::DuplicateCategory(cat.id));
            }
        }
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                return Err(AnnotationError::DanglingImage {
                    annotation_id: ann.id,
                    image_id: ann.image_id,
                });
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(AnnotationError::DanglingCategory {
                    annotation_id: ann.id,
                    category_id: ann.category_id,
                });
            }
        }
        Ok(())
    }

    /// Clip every bbox to its image bounds; drops annotations whose box
    /// falls entirely outside the image.
    fn clip_boxes(&mut self) {
        let dims: BTreeMap<u64, (f64, f64)> = self
            .images
            .iter()
            .map(|i| (i.id, (i.width as f64, i.height as f64)))
            .collect();
        self.annotations.retain_mut(|ann| {
            let Some(&(w, h)) = dims.get(&ann.image_id) else { return true };
            let Some(b) = ann.bounding_box() else { return false };
            match b.clipped(w, h) {
                Some(c) => {
                    ann.bbox = [c.x, c.y, c.w, c.h];
                    true
                }
                None => false,
            }
        });
    }
}

/// Parse a COCO-format annotation document and validate referential
/// integrity.
pub fn parse_dataset(raw: &[u8]) -> Result<Dataset, AnnotationError> {
    let mut ds: Dataset = serde_json::from_slice(raw).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        AnnotationError::Parse {
            offset: byte_offset(raw, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })?;
    ds.validate()?;
    ds.clip_boxes();
    Ok(ds)
}

/// Serialize back to COCO JSON. `parse_dataset(serialize_dataset(d)) == d`.
pub fn serialize_dataset(d: &Dataset) -> Vec<u8> {
    serde_json::to_vec_pretty(d).expect("dataset serialization cannot fail")
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    let mut cur_line = 1;
    for (i, &b) in raw.iter().enumerate() {
        if cur_line == line {
            return i + column.saturating_sub(1);
        }
        if b == b'\n' {
            cur_line += 1;
        }
    }
    raw.len()
}

/// A seen/unseen category partition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassSplit {
    pub name: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl ClassSplit {
    fn validate(&self) -> Result<(), AnnotationError> {
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(AnnotationError::SplitEmpty(self.name.clone()));
        }
        let seen: BTreeSet<&str> = self.seen.iter().map(|s| s.as_str()).collect();
        for u in &self.unseen {
            if seen.contains(u.as_str()) {
                return Err(AnnotationError::SplitOverlap {
                    name: self.name.clone(),
                    class: u.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn is_seen(&self, name: &str) -> bool {
        self.seen.iter().any(|s| s == name)
    }

    pub fn is_unseen(&self, name: &str) -> bool {
        self.unseen.iter().any(|s| s == name)
    }
}

fn split_from_str(text: &str) -> Result<ClassSplit, AnnotationError> {
    let split: ClassSplit = serde_json::from_str(text).map_err(|e| AnnotationError::Parse {
        offset: 0,
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    split.validate()?;
    Ok(split)
}

/// Resolve a split by built-in name ("48/17", "65/15") or config-file path.
pub fn load_split(name_or_path: &str) -> Result<ClassSplit, AnnotationError> {
    match name_or_path {
        "48/17" => split_from_str(SPLIT_48_17),
        "65/15" => split_from_str(SPLIT_65_15),
        other => {
            let path = Path::new(other);
            if path.exists() {
                split_from_str(&std::fs::read_to_string(path)?)
            } else {
                Err(AnnotationError::UnknownSplit(other.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClassKind {
    Seen,
    Unseen,
    Uninvolved,
}

fn classify_categories(d: &Dataset, s: &ClassSplit) -> BTreeMap<u64, ClassKind> {
    d.categories
        .iter()
        .map(|c| {
            let kind = if s.is_seen(&c.name) {
                ClassKind::Seen
            } else if s.is_unseen(&c.name) {
                ClassKind::Unseen
            } else {
                ClassKind::Uninvolved
            };
            (c.id, kind)
        })
        .collect()
}

fn restrict(d: &Dataset, keep_images: &BTreeSet<u64>, keep_ann: impl Fn(&InstanceAnnotation) -> bool) -> Dataset {
    let images: Vec<_> = d.images.iter().filter(|i| keep_images.contains(&i.id)).cloned().collect();
    let annotations: Vec<_> = d
        .annotations
        .iter()
        .filter(|a| keep_images.contains(&a.image_id) && keep_ann(a))
        .cloned()
        .collect();
    let used_cats: BTreeSet<u64> = annotations.iter().map(|a| a.category_id).collect();
    let categories: Vec<_> = d.categories.iter().filter(|c| used_cats.contains(&c.id)).cloned().collect();
    Dataset { images, annotations, categories }
}

/// Training pool: images with at least one seen-class annotation and no
/// unseen-class annotation. Crowd annotations neither count nor survive.
pub fn build_training_set(d: &Dataset, s: &ClassSplit) -> Dataset {
    let kinds = classify_categories(d, s);
    let mut has_seen: BTreeSet<u64> = BTreeSet::new();
    let mut has_unseen: BTreeSet<u64> = BTreeSet::new();
    for ann in d.annotations.iter().filter(|a| a.iscrowd == 0) {
        match kinds[&ann.category_id] {
            ClassKind::Seen => {
                has_seen.insert(ann.image_id);
            }
            ClassKind::Unseen => {
                has_unseen.insert(ann.image_id);
            }
            ClassKind::Uninvolved => {}
        }
    }
    let keep: BTreeSet<u64> = has_seen.difference(&has_unseen).copied().collect();
    restrict(d, &keep, |a| a.iscrowd == 0 && kinds[&a.category_id] == ClassKind::Seen)
}

/// Test pool: every image with at least one unseen-class annotation;
/// seen-class annotations on those images are retained.
pub fn build_test_set(d: &Dataset, s: &ClassSplit) -> Dataset {
    let kinds = classify_categories(d, s);
    let keep: BTreeSet<u64> = d
        .annotations
        .iter()
        .filter(|a| a.iscrowd == 0 && kinds[&a.category_id] == ClassKind::Unseen)
        .map(|a| a.image_id)
        .collect();
    restrict(d, &keep, |a| {
        a.iscrowd == 0 && kinds[&a.category_id] != ClassKind::Uninvolved
    })
}
