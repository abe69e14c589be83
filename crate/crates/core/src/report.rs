//! CSV export and SVG heatmaps for similarity matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{SfssMatrix, UcsMatrix};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("heatmap spec {spec:?} does not fit a {kind:?} matrix")]
    KindMismatch { kind: MatrixKind, spec: HeatmapSpec },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Ucs,
    Sfss,
}

impl MatrixKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            MatrixKind::Ucs => (0.0, 1.0),
            MatrixKind::Sfss => (-1.0, 1.0),
        }
    }
}

/// A matrix with row/column labels, the common input of CSV and SVG output.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub kind: MatrixKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl LabeledMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

impl From<&UcsMatrix> for LabeledMatrix {
    fn from(m: &UcsMatrix) -> Self {
        Self {
            kind: MatrixKind::Ucs,
            rows: m.rows(),
            cols: m.cols(),
            values: m.values().to_vec(),
            row_labels: m.row_concepts.iter().map(ToString::to_string).collect(),
            col_labels: m.col_concepts.iter().map(ToString::to_string).collect(),
        }
    }
}

impl From<&SfssMatrix> for LabeledMatrix {
    fn from(m: &SfssMatrix) -> Self {
        Self {
            kind: MatrixKind::Sfss,
            rows: m.rows(),
            cols: m.cols(),
            values: m.values().to_vec(),
            row_labels: m.row_layers.iter().map(ToString::to_string).collect(),
            col_labels: m.col_layers.iter().map(ToString::to_string).collect(),
        }
    }
}

/// Header row of column labels, then one row per matrix row led by its label.
/// Values carry 9 significant digits.
pub fn export_csv(m: &LabeledMatrix) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let header = std::iter::once(String::new()).chain(m.col_labels.iter().cloned());
    w.write_record(header).expect("in-memory write");
    for r in 0..m.rows {
        let row = std::iter::once(m.row_labels[r].clone()).chain((0..m.cols).map(|c| format!("{:.8e}", m.get(r, c))));
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Parses [`export_csv`] output back into labels and values.
pub fn parse_csv(text: &str, kind: MatrixKind) -> Result<LabeledMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| ReportError::Csv("missing header".into()))?
        .map_err(|e| ReportError::Csv(e.to_string()))?;
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
        if rec.len() != col_labels.len() + 1 {
            return Err(ReportError::Csv(format!("row has {} fields, expected {}", rec.len(), col_labels.len() + 1)));
        }
        row_labels.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            values.push(field.parse::<f64>().map_err(|e| ReportError::Csv(format!("{field:?}: {e}")))?);
        }
    }
    Ok(LabeledMatrix {
        kind,
        rows: row_labels.len(),
        cols: col_labels.len(),
        values,
        row_labels,
        col_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorScale {
    Sequential,
    Diverging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub scale: ColorScale,
    pub range: (f64, f64),
    pub cell_labels: bool,
}

impl HeatmapSpec {
    /// Sequential `[0, 1]` for UCS, diverging `[−1, 1]` for SFSS.
    pub fn for_kind(kind: MatrixKind) -> Self {
        Self {
            scale: match kind {
                MatrixKind::Ucs => ColorScale::Sequential,
                MatrixKind::Sfss => ColorScale::Diverging,
            },
            range: kind.range(),
            cell_labels: true,
        }
    }

    fn fits(&self, kind: MatrixKind) -> bool {
        *self == Self { cell_labels: self.cell_labels, ..Self::for_kind(kind) }
    }
}

type Rgb = [u8; 3];

const SEQ_LOW: Rgb = [0xf7, 0xfb, 0xff];
const SEQ_HIGH: Rgb = [0x08, 0x30, 0x6b];
const DIV_LOW: Rgb = [0x21, 0x66, 0xac];
const DIV_MID: Rgb = [0xf7, 0xf7, 0xf7];
const DIV_HIGH: Rgb = [0xb2, 0x18, 0x2b];

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (f64::from(a[i]) + (f64::from(b[i]) - f64::from(a[i])) * t).round() as u8;
    }
    out
}

/// Color of `value` under `spec`, clamped to the declared range.
pub fn color_for(spec: &HeatmapSpec, value: f64) -> Rgb {
    let (lo, hi) = spec.range;
    let t = if value.is_nan() { 0.5 } else { ((value - lo) / (hi - lo)).clamp(0.0, 1.0) };
    match spec.scale {
        ColorScale::Sequential => mix(SEQ_LOW, SEQ_HIGH, t),
        ColorScale::Diverging if t < 0.5 => mix(DIV_LOW, DIV_MID, t * 2.0),
        ColorScale::Diverging => mix(DIV_MID, DIV_HIGH, (t - 0.5) * 2.0),
    }
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL: usize = 40;
const CHAR_W: usize = 7;

/// Renders `m` as an SVG heatmap: one `rect.cell` per entry, row and column
/// labels, and a vertical color bar.
pub fn render_heatmap(m: &LabeledMatrix, spec: &HeatmapSpec) -> Result<String> {
    if !spec.fits(m.kind) {
        return Err(ReportError::KindMismatch {
            kind: m.kind,
            spec: spec.clone(),
        });
    }
    let longest = |labels: &[String]| labels.iter().map(|l| l.chars().count()).max().unwrap_or(0);
    let left = 10 + CHAR_W * longest(&m.row_labels);
    let top = 10 + CHAR_W * longest(&m.col_labels);
    let grid_w = CELL * m.cols;
    let grid_h = CELL * m.rows;
    let legend_x = left + grid_w + 20;
    let legend_h = grid_h.max(3 * CELL);
    let width = legend_x + 20 + 60;
    let height = top + legend_h + 10;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let (lo, hi) = spec.range;
    let _ = writeln!(s, r#"<defs><linearGradient id="scale" x1="0" y1="1" x2="0" y2="0">"#);
    for i in 0..=10 {
        let t = f64::from(i) / 10.0;
        let _ = writeln!(
            s,
            r#"<stop offset="{t:.1}" stop-color="{}"/>"#,
            hex(color_for(spec, lo + (hi - lo) * t))
        );
    }
    let _ = writeln!(s, "</linearGradient></defs>");

    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.get(r, c);
            let (x, y) = (left + c * CELL, top + r * CELL);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{}</title></rect>"#,
                hex(color_for(spec, v)),
                escape(&format!("{} / {}: {v:.4}", m.row_labels[r], m.col_labels[c]))
            );
            if spec.cell_labels {
                let rgb = color_for(spec, v);
                let luminance = 0.299 * f64::from(rgb[0]) + 0.587 * f64::from(rgb[1]) + 0.114 * f64::from(rgb[2]);
                let ink = if luminance < 128.0 { "#ffffff" } else { "#000000" };
                let _ = writeln!(
                    s,
                    r#"<text class="value" x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
    }
    for (r, label) in m.row_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 4,
            top + r * CELL + CELL / 2 + 4,
            escape(label)
        );
    }
    for (c, label) in m.col_labels.iter().enumerate() {
        let (x, y) = (left + c * CELL + CELL / 2, top - 4);
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{x}" y="{y}" transform="rotate(-90 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect class="legend-bar" x="{legend_x}" y="{top}" width="16" height="{legend_h}" fill="url(#scale)" stroke="#444444"/>"##
    );
    for (i, t) in [1.0, 0.5, 0.0].into_iter().enumerate() {
        let y = top + i * legend_h / 2;
        let _ = writeln!(
            s,
            r#"<text class="legend-tick" x="{}" y="{}">{:.2}</text>"#,
            legend_x + 20,
            y + 4,
            lo + (hi - lo) * t
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(kind: MatrixKind, rows: usize, cols: usize, values: Vec<f64>) -> LabeledMatrix {
        LabeledMatrix {
            kind,
            rows,
            cols,
            values,
            row_labels: (0..rows).map(|r| format!("r{r}")).collect(),
            col_labels: (0..cols).map(|c| format!("c{c}")).collect(),
        }
    }

    #[test]
    fn minimal_csv() {
        let m = matrix(MatrixKind::Ucs, 1, 1, vec![0.5]);
        let text = export_csv(&m);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text, ",c0\nr0,5.00000000e-1\n");
    }

    #[test]
    fn csv_round_trip_with_quoting() {
        let mut m = matrix(MatrixKind::Sfss, 2, 3, vec![0.123456789012, -0.5, 1.0, 1.0 / 3.0, -0.987654321, 0.0]);
        m.row_labels[0] = "model,a/layer \"x\"".into();
        m.col_labels[2] = "c,2".into();
        let text = export_csv(&m);
        let back = parse_csv(&text, MatrixKind::Sfss).unwrap();
        assert_eq!(back.row_labels, m.row_labels);
        assert_eq!(back.col_labels, m.col_labels);
        for (a, b) in back.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmap_structure() {
        let m = matrix(MatrixKind::Ucs, 2, 2, vec![0.0, 0.25, 0.5, 1.0]);
        let svg = render_heatmap(&m, &HeatmapSpec::for_kind(MatrixKind::Ucs)).unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 4);
        assert_eq!(svg.matches(r#"class="legend-bar""#).count(), 1);
        assert_eq!(svg.matches(r#"class="legend-tick""#).count(), 3);
        assert!(svg.contains(&hex(SEQ_LOW)) && svg.contains(&hex(SEQ_HIGH)));
        assert_eq!(svg, render_heatmap(&m, &HeatmapSpec::for_kind(MatrixKind::Ucs)).unwrap());
    }

    #[test]
    fn endpoints_map_to_scale_ends() {
        let ucs = HeatmapSpec::for_kind(MatrixKind::Ucs);
        assert_eq!(color_for(&ucs, 0.0), SEQ_LOW);
        assert_eq!(color_for(&ucs, 1.0), SEQ_HIGH);
        let sfss = HeatmapSpec::for_kind(MatrixKind::Sfss);
        assert_eq!(color_for(&sfss, -1.0), DIV_LOW);
        assert_eq!(color_for(&sfss, 0.0), DIV_MID);
        assert_eq!(color_for(&sfss, 1.0), DIV_HIGH);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let m = matrix(MatrixKind::Sfss, 1, 1, vec![0.0]);
        assert!(matches!(
            render_heatmap(&m, &HeatmapSpec::for_kind(MatrixKind::Ucs)),
            Err(ReportError::KindMismatch { .. })
        ));
    }

    #[test]
    fn labels_are_escaped() {
        let mut m = matrix(MatrixKind::Ucs, 1, 1, vec![0.3]);
        m.row_labels[0] = "<a&b>".into();
        let svg = render_heatmap(&m, &HeatmapSpec::for_kind(MatrixKind::Ucs)).unwrap();
        assert!(svg.contains("&lt;a&amp;b&gt;"));
        assert!(!svg.contains("<a&b>"));
    }
}
