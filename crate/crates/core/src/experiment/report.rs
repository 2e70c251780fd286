//! Report plumbing: deterministic text/CSV/JSON emission, summary assembly,
//! and the mean ± stddev aggregation used by every multi-seed experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::runs::Workspace;

/// Writes UTF-8 text, creating parent directories. All artifact writers go
/// through here so every file ends with exactly one `\n` and nothing ever
/// depends on platform line endings.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut owned;
    let content = if content.ends_with('\n') {
        content
    } else {
        owned = String::with_capacity(content.len() + 1);
        owned.push_str(content);
        owned.push('\n');
        &owned
    };
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Serializes a value as pretty JSON with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("report serialization failed: {e}")))?;
    write_text(path, &text)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Io { path: path.to_path_buf(), detail: e.to_string() })
}

/// Sample mean and standard deviation (n−1 denominator; 0 for a single
/// sample). Errors on an empty slice.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::contract("mean over an empty sample is undefined"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Assembles a CSV from a header and formatted rows; numeric cells are the
/// caller's responsibility (the convention is `{:.6}` for floats).
pub(crate) fn csv_document(header: &str, rows: &[Vec<String>]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// One line of the run summary: a report file plus its headline numbers.
#[derive(Debug, Clone, Serialize)]
struct SummaryEntry {
    file: String,
    base_acc: Option<f64>,
    novel_acc: Option<f64>,
    harmonic_mean: Option<f64>,
    plain_acc: Option<f64>,
    boosted_acc: Option<f64>,
}

/// Collects every report and ablation artifact in the workspace into
/// `reports/summary.json` and returns a human-readable table.
pub fn run_report(ws: &Workspace) -> Result<(PathBuf, String)> {
    let mut entries: Vec<SummaryEntry> = Vec::new();
    let reports_dir = ws.path("reports");
    let mut report_files = list_files(&reports_dir, "json")?;
    report_files.retain(|p| p.file_name().is_some_and(|n| n != "summary.json"));
    for file in &report_files {
        let value: serde_json::Value = read_json(file)?;
        let num = |key: &str| value.get(key).and_then(|v| v.as_f64());
        entries.push(SummaryEntry {
            file: rel_name(ws, file),
            base_acc: num("base_acc"),
            novel_acc: num("novel_acc"),
            harmonic_mean: num("harmonic_mean"),
            plain_acc: num("plain_acc"),
            boosted_acc: num("boosted_acc"),
        });
    }
    let ablations: Vec<String> = list_files(&ws.path("ablate"), "csv")?
        .iter()
        .map(|p| rel_name(ws, p))
        .collect();
    let metrics: Vec<String> = list_files(&ws.path("metrics"), "csv")?
        .iter()
        .map(|p| rel_name(ws, p))
        .collect();

    let summary = serde_json::json!({
        "reports": entries,
        "ablations": ablations,
        "metrics": metrics,
    });
    let path = ws.path("reports/summary.json");
    write_json(&path, &summary)?;

    let mut table = String::new();
    let name_w = entries.iter().map(|e| e.file.len()).chain([6]).max().unwrap();
    table.push_str(&format!("{:<name_w$} {:>8} {:>8} {:>8}\n", "report", "base", "novel", "hm"));
    for e in &entries {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:8.2}"),
            None => format!("{:>8}", "-"),
        };
        table.push_str(&format!(
            "{:<name_w$} {} {} {}\n",
            e.file,
            cell(e.base_acc.or(e.plain_acc)),
            cell(e.novel_acc.or(e.boosted_acc)),
            cell(e.harmonic_mean),
        ));
    }
    if !ablations.is_empty() {
        table.push_str("ablation grids: ");
        table.push_str(&ablations.join(", "));
        table.push('\n');
    }
    Ok((path, table))
}

/// Files under `dir` with the given extension, sorted by name for
/// deterministic assembly. A missing directory is an empty listing.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn rel_name(ws: &Workspace, path: &Path) -> String {
    path.strip_prefix(ws.root())
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((m - 5.0).abs() < 1e-12);
        // Sample variance of this classic set is 32/7.
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[3.25]).unwrap();
        assert_eq!((m1, s1), (3.25, 0.0));
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn write_text_normalizes_the_trailing_newline() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_text(&p, "alpha").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "alpha\n");
        write_text(&p, "beta\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "beta\n");
    }

    #[test]
    fn csv_document_is_one_row_per_line() {
        let doc = csv_document(
            "a,b",
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        );
        assert_eq!(doc, "a,b\n1,2\n3,4\n");
    }

    #[test]
    fn summary_collects_reports_and_grids() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        write_json(
            &ws.path("reports/adapt_x.json"),
            &serde_json::json!({"base_acc": 80.0, "novel_acc": 60.0, "harmonic_mean": 68.57}),
        )
        .unwrap();
        write_text(&ws.path("ablate/depth_grid.csv"), "h\n1\n").unwrap();
        let (path, table) = run_report(&ws).unwrap();
        assert!(path.exists());
        let v: serde_json::Value = read_json(&path).unwrap();
        assert_eq!(v["reports"][0]["file"], "reports/adapt_x.json");
        assert_eq!(v["ablations"][0], "ablate/depth_grid.csv");
        assert!(table.contains("adapt_x"));
        assert!(table.contains("68.57"));
    }
}
