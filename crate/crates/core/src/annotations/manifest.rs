//! Manifest file I/O.
//!
//! Canonical layout: fixed key order, one category/image/annotation object per
//! line, floats printed with exactly six decimals. `save ∘ load` reproduces a
//! canonical file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{Annotation, Category, ClassCatalog, Dataset, DatasetKind, ImageRecord, Status};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const MANIFEST_VERSION: &str = "1.0";

#[derive(Deserialize)]
struct RawManifest {
    version: String,
    kind: String,
    categories: Vec<Category>,
    images: Vec<ImageRecord>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    weight: Option<f64>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path).map(|d| d.with_root(root))
}

/// Parse manifest text; `origin` is only used in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Dataset> {
    let parse_err = |context: String| Error::Parse {
        path: origin.to_path_buf(),
        context,
    };
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| {
        parse_err(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if raw.version != MANIFEST_VERSION {
        return Err(parse_err(format!(
            "field \"version\": expected {MANIFEST_VERSION:?}, found {:?}",
            raw.version
        )));
    }
    let kind = DatasetKind::parse(&raw.kind)
        .ok_or_else(|| parse_err(format!("field \"kind\": unknown kind {:?}", raw.kind)))?;
    let catalog = ClassCatalog::new(raw.categories)?;
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for (i, a) in raw.annotations.into_iter().enumerate() {
        let status = match a.status.as_deref() {
            None => None,
            Some(s) => Some(Status::parse(s).ok_or_else(|| {
                parse_err(format!("annotations[{i}].status: unknown status {s:?}"))
            })?),
        };
        let [x, y, w, h] = a.bbox;
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            class_id: a.category_id,
            bbox: BoundingBox::new(x, y, w, h),
            score: a.score,
            status,
            weight: a.weight,
        });
    }
    let d = Dataset {
        kind,
        catalog,
        images: raw.images,
        annotations,
        root: Default::default(),
    };
    d.validate()?;
    Ok(d)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

pub fn to_manifest_string(d: &Dataset) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"version\": {},", json_str(MANIFEST_VERSION));
    let _ = writeln!(out, "  \"kind\": {},", json_str(d.kind.as_str()));

    let cats: Vec<String> = d
        .catalog
        .categories()
        .iter()
        .map(|c| format!("{{\"id\": {}, \"name\": {}}}", c.id, json_str(&c.name)))
        .collect();
    write_array(&mut out, "categories", &cats, false);

    let images: Vec<String> = d
        .images
        .iter()
        .map(|im| {
            format!(
                "{{\"id\": {}, \"file\": {}, \"width\": {}, \"height\": {}, \"game_id\": {}}}",
                im.id,
                json_str(&im.file),
                im.width,
                im.height,
                json_str(&im.game_id)
            )
        })
        .collect();
    write_array(&mut out, "images", &images, false);

    let anns: Vec<String> = d
        .annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            let mut s = format!(
                "{{\"id\": {}, \"image_id\": {}, \"category_id\": {}, \"bbox\": [{}, {}, {}, {}]",
                a.id,
                a.image_id,
                a.class_id,
                fmt_f64(b.x),
                fmt_f64(b.y),
                fmt_f64(b.w),
                fmt_f64(b.h)
            );
            if let Some(score) = a.score {
                let _ = write!(s, ", \"score\": {}", fmt_f64(score));
            }
            if let Some(status) = a.status {
                let _ = write!(s, ", \"status\": {}", json_str(status.as_str()));
            }
            if let Some(weight) = a.weight {
                let _ = write!(s, ", \"weight\": {}", fmt_f64(weight));
            }
            s.push('}');
            s
        })
        .collect();
    write_array(&mut out, "annotations", &anns, true);
    out.push_str("}\n");
    out
}

fn write_array(out: &mut String, key: &str, items: &[String], last: bool) {
    let tail = if last { "" } else { "," };
    if items.is_empty() {
        let _ = writeln!(out, "  \"{key}\": []{tail}");
        return;
    }
    let _ = writeln!(out, "  \"{key}\": [");
    for (i, item) in items.iter().enumerate() {
        let sep = if i + 1 == items.len() { "" } else { "," };
        let _ = writeln!(out, "    {item}{sep}");
    }
    let _ = writeln!(out, "  ]{tail}");
}

pub fn save_manifest(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    d.validate()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_manifest_string(d)).map_err(|e| Error::io(path, e))
}
