// SPDX-License-Identifier: Apache-2.0

//! Comparison table and plot-ready CSV over simulation summaries.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use teeinfer_sim::metrics::Summary;

/// Finds `summary.json` files: the path itself, `<dir>/summary.json`, or
/// one level of variant directories below `dir`.
pub fn find_summaries(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
            continue;
        }
        let direct = p.join("summary.json");
        if direct.is_file() {
            out.push(direct);
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
            .filter(|s| s.is_file())
            .collect();
        if found.is_empty() {
            bail!("no summary.json under {}", p.display());
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<Summary>> {
    find_summaries(paths)?
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

const COLUMNS: [&str; 14] = [
    "variant", "requests", "completed", "rejected", "mean_ms", "p50_ms", "p95_ms", "p99_ms", "max_ms", "cold", "warm", "hot", "model_switches", "gb_s",
];

fn row(s: &Summary) -> [String; 14] {
    let l = &s.overall.latency;
    let p = &s.overall.paths;
    [
        s.variant.clone(),
        s.requests.to_string(),
        s.completed.to_string(),
        s.rejected.to_string(),
        format!("{:.3}", l.mean_ms),
        format!("{:.3}", l.p50_ms),
        format!("{:.3}", l.p95_ms),
        format!("{:.3}", l.p99_ms),
        format!("{:.3}", l.max_ms),
        p.cold.to_string(),
        p.warm.to_string(),
        p.hot.to_string(),
        s.overall.model_switches.to_string(),
        format!("{:.6}", s.gb_s),
    ]
}

/// Plot-ready CSV, one row per variant.
pub fn write_csv<W: Write>(summaries: &[Summary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for s in summaries {
        out.write_record(row(s))?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text table.
pub fn render_table(summaries: &[Summary]) -> String {
    let rows: Vec<[String; 14]> = summaries.iter().map(row).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.push('\n');
    };
    line(&mut s, &COLUMNS);
    for r in &rows {
        line(&mut s, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    s
}

/// Prints the table and writes `csv_out` if given.
pub fn report(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<String> {
    let summaries = load_summaries(paths)?;
    if let Some(p) = csv_out {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d)?;
        }
        write_csv(&summaries, fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    Ok(render_table(&summaries))
}
