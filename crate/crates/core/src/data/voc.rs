//! PASCAL VOC XML annotation ingestion (object counts only, no images).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocObject {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocRecord {
    /// File stem of the annotation file.
    pub id: String,
    pub objects: Vec<VocObject>,
}

impl VocRecord {
    /// Instance counts per category; `with_difficult` includes objects flagged difficult.
    pub fn counts(&self, with_difficult: bool) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for o in self
            .objects
            .iter()
            .filter(|o| with_difficult || !o.difficult)
        {
            *m.entry(o.name.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn difficult_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for o in self.objects.iter().filter(|o| o.difficult) {
            *m.entry(o.name.clone()).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Debug, Default, Serialize)]
pub struct VocLoadReport {
    pub records: Vec<VocRecord>,
    /// Files that failed to parse, with the reason. Parsing continues past them.
    pub errors: Vec<(PathBuf, String)>,
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn parse_coord(node: roxmltree::Node, name: &str) -> std::result::Result<f64, String> {
    child_text(node, name)
        .ok_or_else(|| format!("missing bndbox/{name}"))?
        .parse::<f64>()
        .map_err(|e| format!("bndbox/{name}: {e}"))
}

fn parse_record(id: String, text: &str) -> std::result::Result<VocRecord, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(format!("root element is <{}>", root.tag_name().name()));
    }
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")
            .filter(|s| !s.is_empty())
            .ok_or("object without name")?
            .to_string();
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| format!("object '{name}' without bndbox"))?;
        let bbox = BBox::new(
            parse_coord(bnd, "xmin")?,
            parse_coord(bnd, "ymin")?,
            parse_coord(bnd, "xmax")?,
            parse_coord(bnd, "ymax")?,
        )
        .map_err(|e| e.to_string())?;
        let difficult = match child_text(obj, "difficult") {
            None | Some("") => false,
            Some(v) => v.parse::<i64>().map_err(|e| format!("difficult: {e}"))? != 0,
        };
        objects.push(VocObject {
            name,
            bbox,
            difficult,
        });
    }
    Ok(VocRecord { id, objects })
}

/// Reads every `*.xml` file in `root` (sorted by name).
///
/// Only an unreadable directory is fatal; malformed files end up in
/// [`VocLoadReport::errors`].
pub fn load_voc_annotations(root: &Path) -> Result<VocLoadReport> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
        .collect();
    paths.sort();
    let mut report = VocLoadReport::default();
    for path in paths {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_record(id, &text));
        match parsed {
            Ok(r) => report.records.push(r),
            Err(msg) => report.errors.push((path, msg)),
        }
    }
    Ok(report)
}
