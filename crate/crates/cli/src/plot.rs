//! Metric series as CSV plus a bare-bones SVG line chart per metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dualproc::trainer::MetricsRecord;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// (run label, step, value) points for one metric.
type Series = Vec<(String, u64, f64)>;

/// Parses every line of a metrics file. Returns the records and how many
/// lines were malformed.
pub fn parse_metrics(text: &str) -> (Vec<MetricsRecord>, usize) {
    let mut recs = Vec::new();
    let mut bad = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(r) => recs.push(r),
            Err(_) => bad += 1,
        }
    }
    (recs, bad)
}

fn default_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn run(files: &[std::path::PathBuf], labels: &[String], out: &Path) -> Result<(), String> {
    if !labels.is_empty() && labels.len() != files.len() {
        return Err(format!(
            "{} labels for {} metrics files",
            labels.len(),
            files.len()
        ));
    }
    let mut series: BTreeMap<&'static str, Series> = BTreeMap::new();
    let mut skipped = 0;
    let mut total = 0;
    let mut used = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let (recs, bad) = parse_metrics(&text);
        skipped += bad;
        total += recs.len();
        let mut label = labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| default_label(path));
        if used.contains(&label) {
            label = format!("{label}#{i}");
        }
        used.push(label.clone());
        for r in &recs {
            for (name, v) in r.series() {
                series
                    .entry(name)
                    .or_default()
                    .push((label.clone(), r.step, v));
            }
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} malformed line(s)");
    }
    if total == 0 {
        return Err("no records".into());
    }
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    for (name, pts) in &series {
        let mut csv = String::from("step,value,run_label\n");
        for (label, step, v) in pts {
            let _ = writeln!(csv, "{step},{v},{label}");
        }
        let path = out.join(format!("{name}.csv"));
        fs::write(&path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
        let path = out.join(format!("{name}.svg"));
        fs::write(&path, svg(name, pts, &used)).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!(
        "{total} records, {} metrics, {skipped} malformed lines skipped",
        series.len()
    );
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg(title: &str, pts: &Series, labels: &[String]) -> String {
    let (mut x0, mut x1) = (u64::MAX, 0u64);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, s, v) in pts {
        x0 = x0.min(*s);
        x1 = x1.max(*s);
        y0 = y0.min(*v);
        y1 = y1.max(*v);
    }
    if y0 >= 0.0 && y1 <= 1.0 {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let xspan = (x1.saturating_sub(x0)).max(1) as f64;
    let px = |s: u64| MARGIN + (s - x0) as f64 / xspan * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{m},{t} {m},{b} {r},{b}"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#,
        MARGIN - 4.0,
        H - MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}">{x0}</text>"#,
        H - MARGIN + 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{x1}</text>"#,
        W - MARGIN,
        H - MARGIN + 16.0
    );
    let mut legend_row = 0;
    for (i, label) in labels.iter().enumerate() {
        let mine: Vec<_> = pts.iter().filter(|p| &p.0 == label).collect();
        if mine.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = mine
            .iter()
            .map(|p| format!("{:.1},{:.1}", px(p.1), py(p.2)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = MARGIN + 14.0 * legend_row as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            escape(label)
        );
        legend_row += 1;
    }
    out.push_str("</svg>\n");
    out
}
