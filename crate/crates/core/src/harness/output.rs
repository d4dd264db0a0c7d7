use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::combinators::{ModelSpec, SPEC_KEYS};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ScoredLabel, DEFAULT_KS};
use crate::train::{EpochRecord, TrainConfig};

use super::grid::GridResult;
use super::lomo::{FoldManifest, LomoResult};

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    /// Row label: cell number, fold group, or `macro`.
    pub run: String,
    pub spec: ModelSpec,
    pub valid_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub test: Option<EvalReport<f64>>,
    pub error: Option<String>,
    pub wall_ms: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes rows as CSV: spec keys, validation columns, then test metrics.
/// A `wall_ms` column appears only when some row carries a timing.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let timed = rows.iter().any(|r| r.wall_ms.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["run".into()];
    header.extend(SPEC_KEYS.iter().map(|k| k.to_string()));
    header.extend(["valid_metric", "best_epoch", "n_test", "avgp", "auc", "accuracy"].map(String::from));
    for k in DEFAULT_KS {
        header.extend([format!("p@{k}"), format!("r@{k}"), format!("f1@{k}")]);
    }
    header.push("error".into());
    if timed {
        header.push("wall_ms".into());
    }
    w.write_record(&header)?;
    for r in rows {
        let mut line = vec![r.run.clone()];
        line.extend(SPEC_KEYS.iter().map(|k| r.spec.get(k).unwrap_or_default()));
        line.push(opt(r.valid_metric));
        line.push(opt(r.best_epoch));
        let t = r.test.as_ref();
        line.push(opt(t.map(|t| t.n)));
        line.push(opt(t.and_then(|t| t.avgp)));
        line.push(opt(t.and_then(|t| t.auc)));
        line.push(opt(t.and_then(|t| t.accuracy)));
        for k in DEFAULT_KS {
            let at = t.and_then(|t| t.at(k));
            line.push(opt(at.map(|a| a.precision)));
            line.push(opt(at.map(|a| a.recall)));
            line.push(opt(at.map(|a| a.f1)));
        }
        line.push(r.error.clone().unwrap_or_default());
        if timed {
            line.push(opt(r.wall_ms));
        }
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn grid_rows(result: &GridResult) -> Vec<ResultRow> {
    result
        .rows
        .iter()
        .map(|r| ResultRow {
            run: format!("cell{}", r.cell + 1),
            spec: r.spec.clone(),
            valid_metric: r.valid_metric,
            best_epoch: r.best_epoch,
            test: r.test.clone(),
            error: r.error.clone(),
            wall_ms: r.wall_ms,
        })
        .collect()
}

/// Per-fold rows followed by a `macro` row.
pub fn lomo_rows(spec: &ModelSpec, result: &LomoResult) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = result
        .folds
        .iter()
        .map(|f| ResultRow {
            run: format!("fold:{}", f.manifest.test_group),
            spec: spec.clone(),
            valid_metric: f.history.iter().find(|h| Some(h.epoch) == f.manifest.best_epoch).map(|h| h.valid_metric),
            best_epoch: f.manifest.best_epoch,
            test: Some(f.report.clone()),
            error: None,
            wall_ms: None,
        })
        .collect();
    let m = &result.report;
    rows.push(ResultRow {
        run: "macro".into(),
        spec: spec.clone(),
        valid_metric: None,
        best_epoch: None,
        test: Some(EvalReport {
            n: result.folds.iter().map(|f| f.report.n).sum(),
            n_pos: result.folds.iter().map(|f| f.report.n_pos).sum(),
            avgp: m.avgp,
            auc: m.auc,
            accuracy: m.accuracy,
            at_k: m.at_k.clone(),
        }),
        error: None,
        wall_ms: None,
    });
    rows
}

/// Training history line tagged with its run.
#[derive(Serialize)]
struct HistoryLine<'a> {
    run: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

pub fn write_history_jsonl<'a>(path: &Path, runs: impl IntoIterator<Item = (String, &'a [EpochRecord])>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (run, history) in runs {
        for record in history {
            serde_json::to_writer(&mut out, &HistoryLine { run: &run, record })?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `score<TAB>label[<TAB>group]` lines.
pub fn read_scores(path: &Path) -> Result<Vec<ScoredLabel<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::parse(path, i + 1, format!("expected score, label[, group] but found {} columns", cols.len())));
        }
        let score: f64 = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("`{}` is not a number", cols[0])))?;
        let label = match cols[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(path, i + 1, format!("label must be 0 or 1, got `{other}`"))),
        };
        items.push(ScoredLabel {
            score,
            label,
            group: cols.get(2).map(|g| g.trim().to_string()),
        });
    }
    if items.is_empty() {
        return Err(Error::Input(format!("{} holds no scores", path.display())));
    }
    Ok(items)
}

pub fn write_scores(path: &Path, items: &[ScoredLabel<f64>]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for it in items {
        match &it.group {
            Some(g) => writeln!(out, "{}\t{}\t{g}", it.score, it.label)?,
            None => writeln!(out, "{}\t{}", it.score, it.label)?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub path: String,
    pub format: String,
    pub sha256: String,
    pub records: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitManifest {
    pub train_groups: Vec<String>,
    pub valid_groups: Vec<String>,
    pub test_groups: Vec<String>,
}

impl SplitManifest {
    /// True when any group sits in more than one part.
    pub fn leaks(&self) -> bool {
        let parts = [&self.train_groups, &self.valid_groups, &self.test_groups];
        parts.iter().enumerate().any(|(i, a)| {
            parts[i + 1..]
                .iter()
                .any(|b| a.iter().any(|g| b.contains(g)))
        })
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub dataset: DatasetInfo,
    pub embedding: String,
    pub train: TrainConfig,
    pub specs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitManifest>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldManifest>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, usize>,
    pub cancelled: bool,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
