//! Aggregated result tables for ablation grids and parameter sweeps, plus
//! static SVG charts rendered from those tables alone.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ReportRow;
use crate::synthviews::ViewName;

/// Word error rates of one evaluation, grouped the way result tables group
/// them: per view category, mean over the non-frontal views, and pooled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryWers {
    pub front: f64,
    pub small: f64,
    pub large: f64,
    pub pitch: f64,
    /// Arithmetic mean of the six non-frontal view rates.
    pub nonfront: f64,
    /// Pooled over every sample of every view.
    pub all: f64,
}

impl CategoryWers {
    /// Extracts the grouped rates from an evaluation report.
    pub fn from_rows(rows: &[ReportRow]) -> Result<CategoryWers> {
        let find = |label: &str| -> Result<f64> {
            rows.iter()
                .find(|r| r.label == label)
                .map(|r| r.wer)
                .ok_or_else(|| Error::invalid(format!("report has no {label} row")))
        };
        let mut nonfront = 0.0;
        let mut n = 0;
        for view in ViewName::ALL {
            if view == ViewName::Front {
                continue;
            }
            nonfront += find(view.as_str())?;
            n += 1;
        }
        Ok(CategoryWers {
            front: find("Front")?,
            small: find("SmallYaw (avg)")?,
            large: find("LargeYaw (avg)")?,
            pitch: find("Pitch (avg)")?,
            nonfront: nonfront / n as f64,
            all: find("All")?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.front,
            self.small,
            self.large,
            self.pitch,
            self.nonfront,
            self.all,
        ]
    }

    /// Elementwise mean over several evaluations (one per seed).
    pub fn mean(items: &[CategoryWers]) -> Result<CategoryWers> {
        if items.is_empty() {
            return Err(Error::invalid("cannot average an empty list"));
        }
        let n = items.len() as f64;
        let mut sums = [0.0; 6];
        for item in items {
            for (s, v) in sums.iter_mut().zip(item.values()) {
                *s += v;
            }
        }
        Ok(CategoryWers {
            front: sums[0] / n,
            small: sums[1] / n,
            large: sums[2] / n,
            pitch: sums[3] / n,
            nonfront: sums[4] / n,
            all: sums[5] / n,
        })
    }
}

pub const CATEGORY_COLUMNS: [&str; 6] = ["front", "small", "large", "pitch", "nonfront", "all"];

/// One row of an aggregate table: a grid cell or sweep point with its
/// seed-averaged rates.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub label: String,
    pub wers: CategoryWers,
}

/// Writes the ablation grid as a tab-separated table. The first row is the
/// baseline; every rate column is followed by a delta column holding
/// `row - baseline`, so improvements are negative.
pub fn write_ablation_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("ablation table needs at least one row"));
    }
    let mut out = String::from("cell");
    for col in CATEGORY_COLUMNS {
        out.push_str(&format!("\t{col}\t{col}_delta"));
    }
    out.push('\n');
    let base = rows[0].wers.values();
    for row in rows {
        out.push_str(&row.label);
        for (v, b) in row.wers.values().iter().zip(base) {
            out.push_str(&format!("\t{v:.4}\t{:+.4}", v - b));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `write_ablation_table` file back; delta columns are ignored
/// since they are derived.
pub fn read_ablation_table(path: &Path) -> Result<Vec<TableRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, '\t', 2).map_err(|m| Error::format(path, m))
}

/// Writes a sweep as CSV: one row per swept value with its rate columns.
pub fn write_sweep_csv(path: &Path, axis: &str, rows: &[TableRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("sweep table needs at least one row"));
    }
    let mut out = String::from(axis);
    for col in CATEGORY_COLUMNS {
        out.push_str(&format!(",{col}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.label);
        for v in row.wers.values() {
            out.push_str(&format!(",{v:.4}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `write_sweep_csv` file back.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<TableRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, ',', 1).map_err(|m| Error::format(path, m))
}

/// Shared parser for both table formats. `stride` is the number of columns
/// per category (rate only, or rate plus delta).
fn parse_table(
    text: &str,
    sep: char,
    stride: usize,
) -> std::result::Result<Vec<TableRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| "empty table".to_string())?;
    let expected = 1 + CATEGORY_COLUMNS.len() * stride;
    if header.split(sep).count() != expected {
        return Err(format!("header has the wrong column count: {header:?}"));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != expected {
            return Err(format!("row has the wrong column count: {line:?}"));
        }
        let mut values = [0.0f64; 6];
        for (i, v) in values.iter_mut().enumerate() {
            let field = fields[1 + i * stride];
            *v = field
                .parse()
                .map_err(|_| format!("not a number: {field:?}"))?;
        }
        rows.push(TableRow {
            label: fields[0].to_string(),
            wers: CategoryWers {
                front: values[0],
                small: values[1],
                large: values[2],
                pitch: values[3],
                nonfront: values[4],
                all: values[5],
            },
        });
    }
    if rows.is_empty() {
        return Err("table has no data rows".to_string());
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = [
    "#4472c4", "#ed7d31", "#70ad47", "#ffc000", "#5b9bd5", "#a5a5a5",
];
const CHART_W: f64 = 720.0;
const CHART_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 56.0;

fn chart_frame(title: &str, ylabel: &str, ymax: f64) -> (String, f64, f64) {
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        title
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        ylabel
    ));
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let y = MARGIN_T + plot_h * (1.0 - frac);
        s.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_L + plot_w
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0,
            ymax * frac
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h
    ));
    (s, plot_w, plot_h)
}

fn chart_legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_T + 8.0 + i as f64 * 18.0;
        let x = CHART_W - MARGIN_R + 16.0;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
            y - 10.0,
            PALETTE[i % PALETTE.len()]
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>\n",
            x + 16.0,
            name
        ));
    }
}

fn data_max(series: &[(&str, Vec<f64>)]) -> f64 {
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max);
    if max <= 0.0 {
        1.0
    } else {
        max * 1.15
    }
}

/// Grouped bar chart: one group per row label, one bar per series.
pub fn bar_chart_svg(
    path: &Path,
    title: &str,
    ylabel: &str,
    groups: &[String],
    series: &[(&str, Vec<f64>)],
) -> Result<()> {
    for (name, values) in series {
        if values.len() != groups.len() {
            return Err(Error::invalid(format!(
                "series {name} has {} values for {} groups",
                values.len(),
                groups.len()
            )));
        }
    }
    let ymax = data_max(series);
    let (mut s, plot_w, plot_h) = chart_frame(title, ylabel, ymax);
    let group_w = plot_w / groups.len() as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;
    for (gi, group) in groups.iter().enumerate() {
        let group_x = MARGIN_L + gi as f64 * group_w;
        for (si, (_, values)) in series.iter().enumerate() {
            let h = plot_h * values[gi] / ymax;
            let x = group_x + group_w * 0.1 + si as f64 * bar_w;
            let y = MARGIN_T + plot_h - h;
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                bar_w * 0.9,
                PALETTE[si % PALETTE.len()]
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            group_x + group_w / 2.0,
            MARGIN_T + plot_h + 18.0,
            group
        ));
    }
    chart_legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    write_text(path, &s)
}

/// Line chart over categorical x positions (evenly spaced, labeled with the
/// swept values).
pub fn line_chart_svg(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    xs: &[String],
    series: &[(&str, Vec<f64>)],
) -> Result<()> {
    for (name, values) in series {
        if values.len() != xs.len() {
            return Err(Error::invalid(format!(
                "series {name} has {} values for {} x positions",
                values.len(),
                xs.len()
            )));
        }
    }
    if xs.is_empty() {
        return Err(Error::invalid("line chart needs at least one x position"));
    }
    let ymax = data_max(series);
    let (mut s, plot_w, plot_h) = chart_frame(title, ylabel, ymax);
    let step = if xs.len() > 1 {
        plot_w / (xs.len() - 1) as f64
    } else {
        0.0
    };
    let x_at = |i: usize| MARGIN_L + i as f64 * step;
    let y_at = |v: f64| MARGIN_T + plot_h * (1.0 - v / ymax);
    for (i, x) in xs.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x_at(i),
            MARGIN_T + plot_h + 18.0,
            x
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        MARGIN_T + plot_h + 40.0,
        xlabel
    ));
    for (si, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_at(i), y_at(v)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        for (i, &v) in values.iter().enumerate() {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x_at(i),
                y_at(v)
            ));
        }
    }
    chart_legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    write_text(path, &s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
