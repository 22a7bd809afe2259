//! Metrics CSV parsing and SVG line charts.
//!
//! The CSV dialect is deliberately tiny: a header of unique column names,
//! then rows of finite decimal numbers, no quoting and no escaping. The
//! chart renderer is a pure function of its input, so replotting the same
//! file always yields the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A parsed metrics table: named columns over f64 rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsCsv {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl MetricsCsv {
    /// Build a table, checking the format invariants: at least one
    /// column; names nonempty, unique, and free of commas and control
    /// characters; every row as wide as the header; every value finite.
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<MetricsCsv> {
        if names.is_empty() {
            return Err(Error::Parse("a metrics table needs at least one column".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Parse(format!("column {i} has an empty name")));
            }
            if name.contains(',') || name.chars().any(|c| c.is_control()) {
                return Err(Error::Parse(format!("column name {name:?} is not plain text")));
            }
            if names[..i].contains(name) {
                return Err(Error::Parse(format!("duplicate column name {name:?}")));
            }
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != names.len() {
                return Err(Error::Parse(format!(
                    "row {r} has {} values for {} columns",
                    row.len(),
                    names.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("row {r} contains the non-finite value {v}")));
            }
        }
        Ok(MetricsCsv { names, rows })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Number of data rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn from_csv_str(s: &str) -> Result<MetricsCsv> {
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let names: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                return Err(Error::Parse(format!("line {}: blank line", idx + 2)));
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|field| {
                    field.parse::<f64>().map_err(|_| {
                        Error::Parse(format!("line {}: bad number {field:?}", idx + 2))
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        MetricsCsv::new(names, rows)
    }

    /// Canonical emission: header, then one row per line with `{}`
    /// (shortest round-trip) float formatting and a trailing newline.
    pub fn to_csv_string(&self) -> String {
        let mut s = self.names.join(",");
        s.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<MetricsCsv> {
        let s = std::fs::read_to_string(path)?;
        MetricsCsv::from_csv_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_R: f64 = 10.0;
const MARGIN_T: f64 = 10.0;
const MARGIN_B: f64 = 30.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one polyline per selected column over the row index.
///
/// All series share a y scale spanning their joint value range. An empty
/// `columns` slice selects every column; a name not in the table, a
/// duplicate selection, or a table without rows is an error.
pub fn svg_line_chart(csv: &MetricsCsv, columns: &[&str]) -> Result<String> {
    if csv.is_empty() {
        return Err(Error::arg("nothing to plot: the table has no rows"));
    }
    let sel: Vec<usize> = if columns.is_empty() {
        (0..csv.names.len()).collect()
    } else {
        let mut sel = Vec::with_capacity(columns.len());
        for name in columns {
            let idx = csv
                .column_index(name)
                .ok_or_else(|| Error::arg(format!("no column named {name:?}")))?;
            if sel.contains(&idx) {
                return Err(Error::arg(format!("column {name:?} selected twice")));
            }
            sel.push(idx);
        }
        sel
    };

    let values = |c: usize| csv.rows.iter().map(move |row| row[c]);
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for &c in &sel {
        for v in values(c) {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }

    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let n = csv.len();
    let x_at = |i: usize| {
        if n == 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| {
        if ymax == ymin {
            MARGIN_T + plot_h / 2.0
        } else {
            MARGIN_T + plot_h * (1.0 - (v - ymin) / (ymax - ymin))
        }
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}">"#
    );
    let _ = writeln!(svg, r#"  <rect width="{CHART_W}" height="{CHART_H}" fill="white"/>"#);
    let x0 = MARGIN_L;
    let y0 = CHART_H - MARGIN_B;
    let _ = writeln!(
        svg,
        r#"  <line x1="{x0}" y1="{MARGIN_T}" x2="{x0}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"  <line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        CHART_W - MARGIN_R
    );
    let label = |x: f64, y: f64, anchor: &str, text: &str| {
        format!(
            r#"  <text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="12">{text}</text>"#
        )
    };
    let _ = writeln!(svg, "{}", label(x0 - 4.0, y0 + 4.0, "end", &format!("{ymin:.4}")));
    let _ = writeln!(
        svg,
        "{}",
        label(x0 - 4.0, MARGIN_T + 4.0, "end", &format!("{ymax:.4}"))
    );
    let _ = writeln!(svg, "{}", label(x0, y0 + 16.0, "middle", "0"));
    let _ = writeln!(
        svg,
        "{}",
        label(x_at(n - 1), y0 + 16.0, "middle", &format!("{}", n - 1))
    );
    for (k, &c) in sel.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"  <text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            MARGIN_L + 8.0,
            MARGIN_T + 14.0 + 16.0 * k as f64,
            escape_xml(&csv.names[c])
        );
    }
    for (k, &c) in sel.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values(c)
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x_at(i), y_at(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"  <polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Plot straight from a CSV file to an SVG file.
pub fn plot_csv(csv_path: &Path, svg_path: &Path, columns: &[&str]) -> Result<()> {
    let csv = MetricsCsv::load(csv_path)?;
    std::fs::write(svg_path, svg_line_chart(&csv, columns)?)?;
    Ok(())
}
