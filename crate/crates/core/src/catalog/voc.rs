//! PASCAL-VOC style box annotations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use quick_xml::escape::escape;
use serde::{Deserialize, Serialize};

use super::{CameraTrapImage, CatalogError, LabelSet};
use crate::geometry::{BoundingBox, PixelRect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
}

/// Labelled boxes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<LabeledBox>,
    pub label_set: LabelSet,
}

impl Annotation {
    pub fn empty(image_id: impl Into<String>, label_set: LabelSet) -> Self {
        Self { image_id: image_id.into(), boxes: Vec::new(), label_set }
    }
}

/// Non-fatal observation made while parsing, e.g. a clamped coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub image_id: String,
    pub object_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnnotation {
    pub annotation: Annotation,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    size: Option<RawSize>,
    #[serde(rename = "object", default)]
    objects: Vec<RawObject>,
}

#[derive(Deserialize)]
struct RawSize {
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct RawObject {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    bndbox: Option<RawBndBox>,
}

#[derive(Deserialize)]
struct RawBndBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

pub fn parse_box_annotations(
    xml_path: &Path,
    image: &CameraTrapImage,
    label_set: LabelSet,
) -> Result<ParsedAnnotation, CatalogError> {
    let xml = fs::read_to_string(xml_path).map_err(|source| CatalogError::Io {
        path: xml_path.to_path_buf(),
        source,
    })?;
    parse_box_annotations_str(&xml, &xml_path.display().to_string(), image, label_set)
}

/// Parses an annotation document already in memory. `origin` names it in errors.
pub fn parse_box_annotations_str(
    xml: &str,
    origin: &str,
    image: &CameraTrapImage,
    label_set: LabelSet,
) -> Result<ParsedAnnotation, CatalogError> {
    let (boxes, warnings) = parse_boxes(xml, origin, image, &|l| label_set.allows(l), &format!("label set {label_set:?}"))?;
    Ok(ParsedAnnotation {
        annotation: Annotation { image_id: image.image_id.clone(), boxes, label_set },
        warnings,
    })
}

/// Like [`parse_box_annotations_str`] but accepts any label in `vocabulary`,
/// e.g. the classes of a run taxonomy in exported review decisions.
pub fn parse_voc_boxes(
    xml: &str,
    origin: &str,
    image: &CameraTrapImage,
    vocabulary: &[String],
) -> Result<(Vec<LabeledBox>, Vec<ParseWarning>), CatalogError> {
    parse_boxes(xml, origin, image, &|l| vocabulary.iter().any(|v| v == l), &format!("vocabulary {vocabulary:?}"))
}

fn parse_boxes(
    xml: &str,
    origin: &str,
    image: &CameraTrapImage,
    allowed: &dyn Fn(&str) -> bool,
    vocabulary_name: &str,
) -> Result<(Vec<LabeledBox>, Vec<ParseWarning>), CatalogError> {
    let err = |message: String| CatalogError::Annotation { path: origin.to_owned(), message };
    let raw: RawAnnotation = quick_xml::de::from_str(xml).map_err(|e| err(e.to_string()))?;
    let size = raw.size.ok_or_else(|| err("missing size element".into()))?;
    if size.width != f64::from(image.width_px) || size.height != f64::from(image.height_px) {
        return Err(err(format!(
            "size {}x{} does not match image {} ({}x{})",
            size.width, size.height, image.image_id, image.width_px, image.height_px
        )));
    }

    let w = f64::from(image.width_px);
    let h = f64::from(image.height_px);
    let mut boxes = Vec::with_capacity(raw.objects.len());
    let mut warnings = Vec::new();
    for (i, obj) in raw.objects.into_iter().enumerate() {
        let label = obj.name.ok_or_else(|| err(format!("object {i} has no name element")))?;
        let label = label.trim().to_owned();
        if !allowed(&label) {
            return Err(err(format!("label {label:?} is not in {vocabulary_name}")));
        }
        let bb = obj.bndbox.ok_or_else(|| err(format!("object {i} ({label}) has no bndbox element")))?;
        let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
        let (x0, y0, x1, y1) = (clamp(bb.xmin, w), clamp(bb.ymin, h), clamp(bb.xmax, w), clamp(bb.ymax, h));
        if (x0, y0, x1, y1) != (bb.xmin, bb.ymin, bb.xmax, bb.ymax) {
            warnings.push(ParseWarning {
                image_id: image.image_id.clone(),
                object_index: i,
                message: format!(
                    "bndbox ({}, {}, {}, {}) clamped to ({x0}, {y0}, {x1}, {y1})",
                    bb.xmin, bb.ymin, bb.xmax, bb.ymax
                ),
            });
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(CatalogError::DegenerateBox { path: origin.to_owned(), label });
        }
        let bbox = BoundingBox::new(x0 / w, y0 / h, x1 / w, y1 / h)
            .map_err(|e| err(format!("object {i}: {e}")))?;
        boxes.push(LabeledBox { bbox, label });
    }

    Ok((boxes, warnings))
}

/// Renders an annotation back to VOC XML with integer pixel coordinates.
pub fn write_voc_xml(annotation: &Annotation, image: &CameraTrapImage) -> String {
    let filename = Path::new(&image.file_ref)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.file_ref.clone());
    let mut out = String::new();
    out.push_str("<annotation>\n");
    let _ = writeln!(out, "  <filename>{}</filename>", escape(filename.as_str()));
    let _ = writeln!(
        out,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        image.width_px, image.height_px
    );
    for b in &annotation.boxes {
        let PixelRect { x0, y0, x1, y1 } = b
            .bbox
            .to_pixels(image.width_px, image.height_px)
            .unwrap_or_else(|_| b.bbox.covering_pixels(image.width_px, image.height_px));
        let _ = writeln!(
            out,
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{x0}</xmin>\n      <ymin>{y0}</ymin>\n      <xmax>{x1}</xmax>\n      <ymax>{y1}</ymax>\n    </bndbox>\n  </object>",
            escape(b.label.as_str())
        );
    }
    out.push_str("</annotation>\n");
    out
}
