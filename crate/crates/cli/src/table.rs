//! Minimal CSV reading for label and vector files, and the SVG scatter plot.

use std::fmt::Write as _;

use crate::error::CliError;

/// Comma-separated cells with a header row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> Result<Table, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::invalid("empty csv file"))?
        .split(',')
        .map(|c| c.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(CliError::invalid(format!(
                "csv row {} has {} cells, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Labels from the `label` column, or the only column. A file without a
/// header (first line numeric) is read as one label per line.
pub fn read_labels(text: &str) -> Result<Vec<usize>, CliError> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let table = if first.split(',').next().is_some_and(|c| c.trim().parse::<usize>().is_ok()) {
        parse_csv(&format!("label\n{text}"))?
    } else {
        parse_csv(text)?
    };
    let col = match table.header.iter().position(|h| h == "label") {
        Some(c) => c,
        None if table.header.len() == 1 => 0,
        None => return Err(CliError::invalid("label file needs a `label` column")),
    };
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r[col]
                .parse()
                .map_err(|_| CliError::invalid(format!("row {}: `{}` is not a class id", i + 2, r[col])))
        })
        .collect()
}

/// Numeric columns as vectors plus the optional label column.
pub fn read_vectors(text: &str, label: Option<&str>) -> Result<(Vec<Vec<f64>>, Option<Vec<String>>), CliError> {
    let table = parse_csv(text)?;
    let label_col = match label {
        Some(name) => Some(
            table
                .header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::invalid(format!("no column named `{name}`")))?,
        ),
        None => None,
    };
    let numeric: Vec<usize> = (0..table.header.len())
        .filter(|&c| Some(c) != label_col)
        .filter(|&c| table.rows.iter().all(|r| r[c].parse::<f64>().is_ok()))
        .collect();
    if numeric.is_empty() {
        return Err(CliError::invalid("no numeric columns to project"));
    }
    let vectors = table
        .rows
        .iter()
        .map(|r| numeric.iter().map(|&c| r[c].parse().expect("checked")).collect())
        .collect();
    let labels = label_col.map(|c| table.rows.iter().map(|r| r[c].clone()).collect());
    Ok((vectors, labels))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Scatter plot of 2-D coordinates, coloured by label.
pub fn scatter_svg(coords: &[Vec<f64>], labels: Option<&[String]>, explained: &[f64]) -> String {
    let (size, margin) = (480.0, 40.0);
    let bounds = |k: usize| {
        let lo = coords.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) }
    };
    let (bx, by) = (bounds(0), bounds(1));
    let sx = |v: f64| margin + (v - bx.0) / (bx.1 - bx.0) * (size - 2.0 * margin);
    let sy = |v: f64| size - margin - (v - by.0) / (by.1 - by.0) * (size - 2.0 * margin);
    let mut names: Vec<&str> = labels.map_or_else(Vec::new, |l| l.iter().map(String::as_str).collect());
    names.sort_unstable();
    names.dedup();
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(out, "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>");
    for (i, c) in coords.iter().enumerate() {
        let colour = labels
            .and_then(|l| names.iter().position(|n| *n == l[i]))
            .map_or(PALETTE[0], |k| PALETTE[k % PALETTE.len()]);
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{colour}\" fill-opacity=\"0.7\"/>",
            sx(c[0]),
            sy(c[1])
        );
    }
    let pct = |k: usize| explained.get(k).map_or(0.0, |v| v * 100.0);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">PC1 ({:.1}%)</text>",
        size / 2.0,
        size - 10.0,
        pct(0)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">PC2 ({:.1}%)</text>",
        size / 2.0,
        size / 2.0,
        pct(1)
    );
    for (k, n) in names.iter().enumerate() {
        let y = 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            size - 90.0,
            y - 4.0,
            PALETTE[k % PALETTE.len()],
            size - 80.0,
            y,
            escape(n)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
