//! CSV and SVG renderings of an `N x N` relation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::DataError;

/// Each row divided by its Euclidean norm; all-zero rows stay zero.
pub fn row_l2_normalize(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|v| v / norm).collect()
            } else {
                row.clone()
            }
        })
        .collect()
}

/// Entries whose magnitude exceeds `threshold`.
pub fn count_above(m: &[Vec<f64>], threshold: f64) -> usize {
    m.iter().flatten().filter(|v| v.abs() > threshold).count()
}

pub fn to_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Linear ramp from light gray (low) to deep red (high).
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(235.0, 178.0), lerp(235.0, 24.0), lerp(235.0, 43.0))
}

const CELL: usize = 40;
const MARGIN: usize = 30;

pub fn to_svg(m: &[Vec<f64>], title: &str) -> String {
    let n = m.len();
    let (lo, hi) = m
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let side = 2 * MARGIN + n * CELL;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", escape(title)).unwrap();
    writeln!(s, r#"<rect width="{side}" height="{side}" fill="white"/>"#).unwrap();
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let t = if hi > lo { (v - lo) / span } else { 0.0 };
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#, color(t)).unwrap();
            if n <= 12 {
                let ink = if t > 0.6 { "white" } else { "black" };
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                )
                .unwrap();
            }
        }
    }
    for k in 0..n {
        let c = MARGIN + k * CELL + CELL / 2;
        writeln!(s, r#"<text x="{c}" y="{}" font-family="monospace" font-size="10" text-anchor="middle">{k}</text>"#, MARGIN - 8).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-family="monospace" font-size="10" text-anchor="end">{k}</text>"#, MARGIN - 6, c + 4).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg` of the row-normalized matrix.
pub fn export(m: &[Vec<f64>], stem: &Path, title: &str) -> Result<(PathBuf, PathBuf), DataError> {
    let norm = row_l2_normalize(m);
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let (csv, svg) = (with(".csv"), with(".svg"));
    for (path, body) in [(&csv, to_csv(&norm)), (&svg, to_svg(&norm, title))] {
        fs::write(path, body).map_err(|source| DataError::Io { path: path.clone(), source })?;
    }
    Ok((csv, svg))
}
