//! Comparison tables across runs and loss-curve plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::train::Report;

/// Canonical row order of the comparison table.
pub const ROW_ORDER: [&str; 8] = [
    "Teacher",
    "Single-task",
    "Multi-task",
    "+ Soft",
    "+ MSE",
    "+ PDF",
    "+ Soft + MSE",
    "+ Soft + PDF",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub detection_map: Option<f64>,
    pub segmentation_miou: Option<f64>,
    pub runs: Vec<String>,
    pub flags: Vec<String>,
}

/// One row per label; runs sharing a label (e.g. the two single-task
/// students or the two teachers) fill different columns of that row.
pub fn build_table(reports: &[Report]) -> Vec<TableRow> {
    let mut rows: BTreeMap<String, TableRow> = BTreeMap::new();
    for r in reports {
        let row = rows.entry(r.label.clone()).or_insert_with(|| TableRow {
            label: r.label.clone(),
            detection_map: None,
            segmentation_miou: None,
            runs: Vec::new(),
            flags: Vec::new(),
        });
        row.runs.push(r.name.clone());
        for (t, v) in &r.final_metrics {
            let slot = match t {
                Task::Detection => &mut row.detection_map,
                Task::Segmentation => &mut row.segmentation_miou,
            };
            if slot.is_some() {
                row.flags.push(format!("several runs report {t}; kept {}", r.name));
            }
            *slot = Some(*v);
        }
    }
    for row in rows.values_mut() {
        if row.detection_map.is_none() {
            row.flags.push("no detection run".into());
        }
        if row.segmentation_miou.is_none() {
            row.flags.push("no segmentation run".into());
        }
    }
    let rank = |l: &str| ROW_ORDER.iter().position(|x| *x == l).unwrap_or(ROW_ORDER.len());
    let mut out: Vec<TableRow> = rows.into_values().collect();
    out.sort_by(|a, b| rank(&a.label).cmp(&rank(&b.label)).then(a.label.cmp(&b.label)));
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn render_text(rows: &[TableRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Row".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>8}  {:>8}", "Row", "mAP", "mIoU");
    let _ = writeln!(s, "{}", "-".repeat(w + 20));
    for r in rows {
        let _ = write!(s, "{:<w$}  {:>8}  {:>8}", r.label, pct(r.detection_map), pct(r.segmentation_miou));
        if !r.flags.is_empty() {
            let _ = write!(s, "  [{}]", r.flags.join("; "));
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
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
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

const CSV_HEADER: &str = "label,detection_map,segmentation_miou,runs,flags";

/// Metric values are written with full precision so the table re-parses
/// exactly.
pub fn to_csv(rows: &[TableRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&r.label),
            num(r.detection_map),
            num(r.segmentation_miou),
            csv_field(&r.runs.join(" ")),
            csv_field(&r.flags.join("; "))
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data("unexpected CSV header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("bad number `{s}`")))
        }
    };
    let list = |s: &str, sep: &str| -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(sep).map(str::to_string).collect()
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f = split_csv_line(l);
            if f.len() != 5 {
                return Err(Error::Data(format!("expected 5 CSV fields: {l}")));
            }
            Ok(TableRow {
                label: f[0].clone(),
                detection_map: num(&f[1])?,
                segmentation_miou: num(&f[2])?,
                runs: list(&f[3], " "),
                flags: list(&f[4], "; "),
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of named `(x, y)` series as a standalone SVG document.
pub fn line_plot_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        if y.is_finite() {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{m}" y="{}" text-anchor="start">{x0:.0}</text>"#, h - m + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.0}</text>"#, w - m, h - m + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, m - 4.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, m - 4.0, m + 4.0);
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = p
            .iter()
            .filter(|(_, y)| y.is_finite())
            .enumerate()
            .map(|(k, (x, y))| format!("{}{:.1} {:.1}", if k == 0 { "M" } else { "L" }, sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            w - m - 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Loss streams of one run (top-level keys only).
pub fn loss_curves_svg(report: &Report) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .loss_curves
        .iter()
        .filter(|(k, _)| !k.contains('.'))
        .map(|(k, v)| (k.clone(), v.iter().map(|(i, y)| (*i as f64, *y)).collect()))
        .collect();
    line_plot_svg(&format!("{} ({})", report.label, report.name), &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            TableRow {
                label: "+ Soft + PDF".into(),
                detection_map: Some(0.123456789),
                segmentation_miou: None,
                runs: vec!["a".into(), "b".into()],
                flags: vec!["no segmentation run".into()],
            },
            TableRow {
                label: "odd, \"quoted\"".into(),
                detection_map: None,
                segmentation_miou: Some(1.0),
                runs: vec!["c".into()],
                flags: vec![],
            },
        ];
        assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = line_plot_svg("t", &[("a".into(), vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("M48.0"));
    }
}
