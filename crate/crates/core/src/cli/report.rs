//! Markdown and CSV summaries of evaluated runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::CliError;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub model: String,
    pub n_params: usize,
    pub recall5: Option<f64>,
    pub recall10: Option<f64>,
    pub ndcg5: Option<f64>,
    pub ndcg10: Option<f64>,
}

#[derive(Deserialize)]
struct EvalFile {
    model: String,
    n_params: usize,
    recall: BTreeMap<String, f64>,
    ndcg: BTreeMap<String, f64>,
}

const MODELS: [&str; 2] = ["tiger", "sasrec"];

fn run_name(dir: &Path, out: &Path) -> String {
    if dir == out {
        ".".into()
    } else {
        dir.strip_prefix(out).unwrap_or(dir).display().to_string()
    }
}

/// Rows from every `eval_<model>.json` under `runs`, ordered by model size
/// then run name.
pub(crate) fn collect_rows(runs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("run directory {} does not exist", dir.display())));
        }
        for m in MODELS {
            let path = dir.join(format!("eval_{m}.json"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let f: EvalFile = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
            rows.push(ReportRow {
                run: run_name(dir, out),
                model: f.model,
                n_params: f.n_params,
                recall5: f.recall.get("5").copied(),
                recall10: f.recall.get("10").copied(),
                ndcg5: f.ndcg.get("5").copied(),
                ndcg10: f.ndcg.get("10").copied(),
            });
        }
    }
    rows.sort_by(|a, b| a.n_params.cmp(&b.n_params).then_with(|| a.run.cmp(&b.run)).then_with(|| a.model.cmp(&b.model)));
    Ok(rows)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s = String::from("| run | model | params | Recall@5 | Recall@10 | NDCG@5 | NDCG@10 |\n");
    s.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.run,
            r.model,
            r.n_params,
            cell(r.recall5),
            cell(r.recall10),
            cell(r.ndcg5),
            cell(r.ndcg10)
        );
    }
    s
}

/// One row per run, ready to plot metric against `n_params`.
pub(crate) fn render_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("run,model,n_params,recall@5,recall@10,ndcg@5,ndcg@10\n");
    let v = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.run,
            r.model,
            r.n_params,
            v(r.recall5),
            v(r.recall10),
            v(r.ndcg5),
            v(r.ndcg10)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rows_render_header_only() {
        assert_eq!(render_report(&[]).lines().count(), 2);
        assert_eq!(render_csv(&[]).lines().count(), 1);
    }

    #[test]
    fn rows_render_with_missing_cells() {
        let row = ReportRow {
            run: "a".into(),
            model: "tiger".into(),
            n_params: 10,
            recall5: Some(0.5),
            recall10: None,
            ndcg5: Some(0.25),
            ndcg10: None,
        };
        let md = render_report(std::slice::from_ref(&row));
        assert!(md.ends_with("| a | tiger | 10 | 0.5000 | - | 0.2500 | - |\n"));
        assert!(render_csv(&[row]).ends_with("a,tiger,10,0.5,,0.25,\n"));
    }
}
