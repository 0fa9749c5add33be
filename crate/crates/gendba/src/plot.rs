//! Static chart emission: one self-contained SVG grouped-bar chart per
//! (hardware, workload) evaluation cell, median throughput per policy
//! source. Output bytes are deterministic and embed a machine-readable
//! data block so tests can verify bar values without an SVG parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::infer::EvalReport;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Emit one SVG per (hardware, workload) cell; returns the written paths.
pub fn emit_plots(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !out_dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", out_dir.display()),
        )));
    }
    let mut cells: BTreeMap<(String, String), Vec<(String, f64)>> = BTreeMap::new();
    for r in &report.rows {
        cells
            .entry((r.hardware_id.clone(), r.workload_id.clone()))
            .or_default()
            .push((r.policy_source.clone(), r.median_mops));
    }
    let mut paths = Vec::new();
    for ((hw, wl), mut bars) in cells {
        bars.sort_by(|a, b| a.0.cmp(&b.0));
        let path = out_dir.join(format!("eval-{hw}-{wl}.svg"));
        std::fs::write(&path, render_bars(&format!("{hw} / {wl}"), &bars))?;
        paths.push(path);
    }
    Ok(paths)
}

fn render_bars(title: &str, bars: &[(String, f64)]) -> String {
    let width = 640.0;
    let height = 400.0;
    let margin_left = 60.0;
    let margin_bottom = 70.0;
    let margin_top = 40.0;
    let plot_w = width - margin_left - 20.0;
    let plot_h = height - margin_top - margin_bottom;
    let max = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-12);
    let slot = plot_w / bars.len() as f64;
    let bar_w = slot * 0.7;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    // Machine-readable data block (policy_source,median_mops per line).
    svg.push_str("<!--DATA\n");
    for (name, v) in bars {
        svg.push_str(&format!("{name},{v:?}\n"));
    }
    svg.push_str("-->\n");
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{title} — median throughput (Mops)</text>\n",
        x = width / 2.0
    ));
    // Y axis with 5 gridlines.
    for i in 0..=5 {
        let v = max * i as f64 / 5.0;
        let y = margin_top + plot_h * (1.0 - i as f64 / 5.0);
        svg.push_str(&format!(
            "<line x1=\"{margin_left}\" y1=\"{y:.2}\" x2=\"{x2}\" y2=\"{y:.2}\" \
             stroke=\"#dddddd\"/>\n<text x=\"{tx}\" y=\"{ty:.2}\" text-anchor=\"end\" \
             font-family=\"sans-serif\" font-size=\"11\">{v:.2}</text>\n",
            x2 = margin_left + plot_w,
            tx = margin_left - 6.0,
            ty = y + 4.0
        ));
    }
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = plot_h * v / max;
        let x = margin_left + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = margin_top + plot_h - h;
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
             fill=\"{color}\"/>\n\
             <text x=\"{cx:.2}\" y=\"{ly:.2}\" text-anchor=\"middle\" \
             font-family=\"sans-serif\" font-size=\"11\">{v:.2}</text>\n\
             <text x=\"{cx:.2}\" y=\"{nx:.2}\" text-anchor=\"middle\" \
             font-family=\"sans-serif\" font-size=\"12\">{name}</text>\n",
            cx = x + bar_w / 2.0,
            ly = y - 4.0,
            nx = margin_top + plot_h + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Parse the embedded data block back out of an emitted chart.
pub fn parse_data_block(svg: &str) -> Result<Vec<(String, f64)>> {
    let start = svg
        .find("<!--DATA\n")
        .ok_or_else(|| Error::Format("no data block in chart".into()))?
        + "<!--DATA\n".len();
    let end = svg[start..]
        .find("-->")
        .ok_or_else(|| Error::Format("unterminated data block".into()))?
        + start;
    let mut out = Vec::new();
    for line in svg[start..end].lines() {
        if line.is_empty() {
            continue;
        }
        let (name, v) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Format(format!("bad data line '{line}'")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Format(format!("bad value in data line '{line}'")))?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{evaluate, PolicySource};
    use crate::sim::{profile_by_id, workload_by_id};

    fn small_report() -> EvalReport {
        let hw = profile_by_id("tiny-2n2c").unwrap();
        let wls = vec![
            workload_by_id("read-uniform").unwrap(),
            workload_by_id("ycsb-a").unwrap(),
        ];
        let sources = vec![
            PolicySource::Baseline("os-d"),
            PolicySource::Baseline("os-i"),
            PolicySource::Oracle,
        ];
        evaluate(&sources, &[hw], &wls, 3, 4).unwrap()
    }

    #[test]
    fn one_chart_per_cell_with_exact_medians() {
        let report = small_report();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_plots(&report, dir.path()).unwrap();
        assert_eq!(paths.len(), 2); // one hardware x two workloads
        for p in &paths {
            let svg = std::fs::read_to_string(p).unwrap();
            let data = parse_data_block(&svg).unwrap();
            assert_eq!(data.len(), 3);
            for (source, v) in data {
                let row = report
                    .rows
                    .iter()
                    .find(|r| {
                        r.policy_source == source
                            && p.file_name()
                                .unwrap()
                                .to_str()
                                .unwrap()
                                .contains(&r.workload_id)
                    })
                    .unwrap();
                assert_eq!(v, row.median_mops);
            }
        }
    }

    #[test]
    fn chart_bytes_are_deterministic() {
        let report = small_report();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = emit_plots(&report, d1.path()).unwrap();
        let p2 = emit_plots(&report, d2.path()).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let report = small_report();
        let missing = Path::new("/nonexistent-gendba-plot-dir");
        assert!(matches!(emit_plots(&report, missing), Err(Error::Io(_))));
    }
}
