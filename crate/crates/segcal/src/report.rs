//! Static report artifacts for a suite: the comparison CSV, the full JSON
//! record set, and per-model SVG reliability diagrams and probability
//! histograms. All outputs are deterministic byte-for-byte for identical
//! outcomes; the SVGs are self-contained static markup with no scripting.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ReliabilityBins;
use crate::runner::{MetricsRow, RunRecord, SuiteOutcome};

/// Fixed column header of `results.csv`.
pub const CSV_HEADER: &str = "model,seed,dice,hd,brier,brier_plus,ece";

fn fmt(v: f64) -> String {
    // shortest round-trip formatting; NaN prints as NaN
    format!("{v}")
}

fn metrics_cells(m: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{}",
        fmt(m.dice),
        fmt(m.hd),
        fmt(m.brier),
        fmt(m.brier_plus),
        fmt(m.ece)
    )
}

/// Render the comparison CSV: per-seed rows then `mean`/`std` aggregate
/// rows per model, in record order. Failed seeds keep their row with empty
/// metric cells.
pub fn render_csv(outcome: &SuiteOutcome) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for record in &outcome.records {
        for row in &record.per_seed {
            match &row.metrics {
                Some(m) => {
                    out.push_str(&format!("{},{},{}\n", record.label, row.seed, metrics_cells(m)));
                }
                None => {
                    out.push_str(&format!("{},{},,,,,\n", record.label, row.seed));
                }
            }
        }
        if let Some(agg) = &record.aggregate {
            out.push_str(&format!(
                "{},mean,{}\n",
                record.label,
                metrics_cells(&agg.mean)
            ));
            out.push_str(&format!(
                "{},std,{}\n",
                record.label,
                metrics_cells(&agg.std)
            ));
        }
    }
    out
}

/// Parse one metrics row back from its CSV cells (used by the round-trip
/// checks and the loader).
pub fn parse_csv_row(line: &str) -> Result<(String, String, Option<MetricsRow>)> {
    let cells: Vec<&str> = line.split(',').collect();
    if cells.len() != 7 {
        return Err(Error::Config(format!(
            "CSV row has {} cells, expected 7: {line:?}",
            cells.len()
        )));
    }
    if cells[2..].iter().all(|c| c.is_empty()) {
        return Ok((cells[0].to_string(), cells[1].to_string(), None));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad CSV float {s:?} in {line:?}")))
    };
    Ok((
        cells[0].to_string(),
        cells[1].to_string(),
        Some(MetricsRow {
            dice: parse(cells[2])?,
            hd: parse(cells[3])?,
            brier: parse(cells[4])?,
            brier_plus: parse(cells[5])?,
            ece: parse(cells[6])?,
        }),
    ))
}

// ---- SVG rendering ----------------------------------------------------------

const SVG_SIZE: f64 = 420.0;
const PLOT_MARGIN: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" ",
            "viewBox=\"0 0 {s} {s}\">\n",
            "<rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
            "<text x=\"{mid}\" y=\"24\" text-anchor=\"middle\" ",
            "font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
        ),
        s = SVG_SIZE,
        mid = SVG_SIZE / 2.0,
        title = title
    )
}

fn plot_x(frac: f64) -> f64 {
    PLOT_MARGIN + frac * (SVG_SIZE - 2.0 * PLOT_MARGIN)
}

fn plot_y(frac: f64) -> f64 {
    SVG_SIZE - PLOT_MARGIN - frac * (SVG_SIZE - 2.0 * PLOT_MARGIN)
}

fn axes() -> String {
    format!(
        concat!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
        ),
        x0 = plot_x(0.0),
        x1 = plot_x(1.0),
        y0 = plot_y(0.0),
        y1 = plot_y(1.0),
    )
}

/// Reliability diagram: one bar per non-empty bin at the bin's mean
/// confidence, bar height the empirical accuracy, plus the identity
/// diagonal. Bar data is embedded in `data-*` attributes.
pub fn render_reliability_svg(label: &str, bins: &ReliabilityBins) -> String {
    let m = bins.num_bins();
    let mut svg = svg_open(&format!("reliability: {label}"));
    svg.push_str(&axes());
    // identity diagonal
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        plot_x(0.0),
        plot_y(0.0),
        plot_x(1.0),
        plot_y(1.0)
    ));
    let bar_w = (SVG_SIZE - 2.0 * PLOT_MARGIN) / m as f64;
    for i in 0..m {
        if bins.counts[i] == 0 {
            continue;
        }
        let acc = bins.accuracy[i];
        let x = plot_x(i as f64 / m as f64);
        let y = plot_y(acc);
        let h = plot_y(0.0) - y;
        svg.push_str(&format!(
            concat!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" ",
                "fill=\"steelblue\" fill-opacity=\"0.7\" stroke=\"black\" ",
                "data-bin=\"{bin}\" data-count=\"{count}\" ",
                "data-confidence=\"{conf}\" data-accuracy=\"{acc}\"/>\n"
            ),
            x = x,
            y = y,
            w = bar_w,
            h = h,
            bin = i,
            count = bins.counts[i],
            conf = bins.mean_confidence[i],
            acc = acc,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">confidence</text>\n",
        SVG_SIZE / 2.0,
        SVG_SIZE - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Probability histogram: one bar per bin with the raw count embedded in a
/// `data-count` attribute; heights are normalized to the largest bin.
pub fn render_histogram_svg(label: &str, counts: &[usize]) -> String {
    let m = counts.len().max(1);
    let total: usize = counts.iter().sum();
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut svg = svg_open(&format!("foreground probabilities: {label}"));
    svg.push_str(&axes());
    let bar_w = (SVG_SIZE - 2.0 * PLOT_MARGIN) / m as f64;
    for (i, &count) in counts.iter().enumerate() {
        let frac = count as f64 / peak as f64;
        let x = plot_x(i as f64 / m as f64);
        let y = plot_y(frac);
        let h = plot_y(0.0) - y;
        svg.push_str(&format!(
            concat!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" ",
                "fill=\"darkorange\" fill-opacity=\"0.8\" stroke=\"black\" ",
                "data-bin=\"{bin}\" data-count=\"{count}\"/>\n"
            ),
            x = x,
            y = y,
            w = bar_w,
            h = h,
            bin = i,
            count = count,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">p(foreground), {total} pixels</text>\n",
        SVG_SIZE / 2.0,
        SVG_SIZE - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Pool per-seed reliability bins of one record: counts add, confidences
/// and accuracies combine count-weighted.
pub fn pooled_bins(record: &RunRecord) -> Option<ReliabilityBins> {
    let reports: Vec<_> = record.per_seed.iter().filter_map(|r| r.report.as_ref()).collect();
    let first = reports.first()?;
    let m = first.bins.num_bins();
    let mut counts = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut correct_sum = vec![0.0; m];
    for report in &reports {
        if report.bins.num_bins() != m {
            return None;
        }
        for i in 0..m {
            let c = report.bins.counts[i];
            counts[i] += c;
            conf_sum[i] += report.bins.mean_confidence[i] * c as f64;
            correct_sum[i] += report.bins.accuracy[i] * c as f64;
        }
    }
    let mut mean_confidence = vec![0.0; m];
    let mut accuracy = vec![0.0; m];
    for i in 0..m {
        if counts[i] > 0 {
            mean_confidence[i] = conf_sum[i] / counts[i] as f64;
            accuracy[i] = correct_sum[i] / counts[i] as f64;
        }
    }
    Some(ReliabilityBins {
        counts,
        mean_confidence,
        accuracy,
    })
}

/// Pool per-seed probability histograms of one record by summing counts.
pub fn pooled_histogram(record: &RunRecord) -> Option<Vec<usize>> {
    let reports: Vec<_> = record.per_seed.iter().filter_map(|r| r.report.as_ref()).collect();
    let first = reports.first()?;
    let mut counts = vec![0usize; first.prob_histogram.len()];
    for report in &reports {
        if report.prob_histogram.len() != counts.len() {
            return None;
        }
        for (acc, &c) in counts.iter_mut().zip(&report.prob_histogram) {
            *acc += c;
        }
    }
    Some(counts)
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '+' { c } else { '_' })
        .collect()
}

/// Write `results.csv`, `results.json`, and per-model
/// `reliability_<model>.svg` / `hist_<model>.svg` into `outdir`.
pub fn render_reports(outcome: &SuiteOutcome, outdir: impl AsRef<Path>) -> Result<Vec<String>> {
    let outdir = outdir.as_ref();
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir.display().to_string(), e))?;
    let mut written = Vec::new();
    let write = |name: &str, contents: &str, written: &mut Vec<String>| -> Result<()> {
        let path = outdir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(name.to_string());
        Ok(())
    };

    write("results.csv", &render_csv(outcome), &mut written)?;
    let json = serde_json::to_string_pretty(outcome)
        .map_err(|e| Error::json("suite outcome", e))?;
    write("results.json", &json, &mut written)?;

    for record in &outcome.records {
        let tag = sanitize_label(&record.label);
        if let Some(bins) = pooled_bins(record) {
            write(
                &format!("reliability_{tag}.svg"),
                &render_reliability_svg(&record.label, &bins),
                &mut written,
            )?;
        }
        if let Some(hist) = pooled_histogram(record) {
            write(
                &format!("hist_{tag}.svg"),
                &render_histogram_svg(&record.label, &hist),
                &mut written,
            )?;
        }
    }
    Ok(written)
}

/// Load and re-validate a previously written `results.json`.
pub fn load_results(path: impl AsRef<Path>) -> Result<SuiteOutcome> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    SuiteOutcome::from_json_bytes(&bytes)
}
