//! Heatmap files: CSV (full precision), 8-bit PGM and SVG, plus a JSON
//! metadata sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributionMap, AttributionMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Csv,
    Pgm,
    Svg,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Csv => "csv",
            HeatmapFormat::Pgm => "pgm",
            HeatmapFormat::Svg => "svg",
        }
    }
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(HeatmapFormat::Csv),
            "pgm" => Ok(HeatmapFormat::Pgm),
            "svg" => Ok(HeatmapFormat::Svg),
            _ => Err(Error::Config(format!("unknown heatmap format `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMetadata {
    pub mode: AttributionMode,
    pub rows: usize,
    pub cols: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub normalized: bool,
    /// How each raw entry was computed.
    pub measure: String,
    pub flagged_rows: Vec<usize>,
    /// Free-form provenance such as the checkpoint path and sentence index.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl HeatmapMetadata {
    pub fn of(map: &AttributionMap) -> Self {
        HeatmapMetadata {
            mode: map.mode,
            rows: map.rows,
            cols: map.cols,
            row_labels: map.row_labels.clone(),
            col_labels: map.col_labels.clone(),
            normalized: map.normalized,
            measure: "l2(h - h_masked) / l2(h), final decoder layer".into(),
            flagged_rows: map.flagged_rows.clone(),
            extra: Default::default(),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn to_csv(map: &AttributionMap) -> String {
    let mut out = String::new();
    out.push_str("target");
    for c in &map.col_labels {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for r in 0..map.rows {
        out.push_str(&csv_field(&map.row_labels[r]));
        for v in map.row(r) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads a CSV heatmap back; values round-trip exactly.
pub fn read_csv(path: &Path, mode: AttributionMode) -> Result<AttributionMap> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut lines = text.lines();
    let header = split_csv_line(lines.next().ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?);
    let col_labels = header[1..].to_vec();
    let (mut row_labels, mut values) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let f = split_csv_line(line);
        if f.len() != col_labels.len() + 1 {
            return Err(Error::Format(format!("{}: row {} has {} fields", path.display(), i + 1, f.len())));
        }
        row_labels.push(f[0].clone());
        for v in &f[1..] {
            values.push(v.parse::<f64>().map_err(|e| Error::Format(format!("{}: `{v}`: {e}", path.display())))?);
        }
    }
    Ok(AttributionMap {
        rows: row_labels.len(),
        cols: col_labels.len(),
        values,
        row_labels,
        col_labels,
        mode,
        normalized: false,
        flagged_rows: Vec::new(),
    })
}

/// Grey levels scaled by each row's maximum; all-zero rows are black.
fn row_scaled(map: &AttributionMap) -> Vec<u8> {
    let mut px = Vec::with_capacity(map.values.len());
    for r in 0..map.rows {
        let row = map.row(r);
        let max = row.iter().cloned().fold(0.0, f64::max);
        px.extend(row.iter().map(|&v| if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 }));
    }
    px
}

fn to_pgm(map: &AttributionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    out.extend(row_scaled(map));
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn to_svg(map: &AttributionMap) -> String {
    const CELL: usize = 12;
    const MARGIN: usize = 60;
    let (w, h) = (MARGIN + map.cols * CELL, MARGIN + map.rows * CELL);
    let px = row_scaled(map);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="8">"#
    );
    for (c, label) in map.col_labels.iter().enumerate() {
        let x = MARGIN + c * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-90 {x} {})">{}</text>"#,
            MARGIN - 4,
            MARGIN - 4,
            xml_escape(label)
        );
    }
    for r in 0..map.rows {
        let y = MARGIN + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 4,
            y + CELL - 3,
            xml_escape(&map.row_labels[r])
        );
        for c in 0..map.cols {
            let g = px[r * map.cols + c];
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"><title>{:?}</title></rect>"#,
                MARGIN + c * CELL,
                map.get(r, c)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Sidecar path: `heat.csv` becomes `heat.csv.meta.json`.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

pub fn write_metadata(path: &Path, meta: &HeatmapMetadata) -> Result<PathBuf> {
    let meta_path = metadata_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&meta_path, json).map_err(|e| io(&meta_path, e))?;
    Ok(meta_path)
}

/// Writes `map` in `format` to `path` and the metadata sidecar next to it.
pub fn export_heatmap(map: &AttributionMap, format: HeatmapFormat, path: &Path, meta: &HeatmapMetadata) -> Result<()> {
    let bytes = match format {
        HeatmapFormat::Csv => to_csv(map).into_bytes(),
        HeatmapFormat::Pgm => to_pgm(map),
        HeatmapFormat::Svg => to_svg(map).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| io(path, e))?;
    write_metadata(path, meta)?;
    Ok(())
}
