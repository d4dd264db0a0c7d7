use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use biseq::combinators::{parse_windows, SPEC_KEYS};
use biseq::harness::{EmbeddingSource, Format, GridSpace};
use biseq::train::{SelectionMetric, TrainConfig};
use biseq::{CellKind, Error, ModelSpec, Result};

use crate::args::{RunArgs, SpecArgs};

/// Keys every run command accepts besides the spec keys.
pub const RUN_KEYS: [&str; 17] = [
    "data",
    "format",
    "embeddings",
    "embed_dim",
    "min_count",
    "freeze_embeddings",
    "length_percentile",
    "batch_size",
    "max_epochs",
    "patience",
    "metric",
    "clip_norm",
    "pos_weight",
    "timings",
    "out",
    "workers",
    "config",
];

pub const GRID_KEYS: [&str; 9] = [
    "split",
    "paper_grid",
    "grid_cell",
    "grid_rnn_size",
    "grid_windows",
    "grid_filters",
    "grid_l2",
    "grid_lr",
    "full_table",
];

/// Layered `key → value` settings: config file, then flags, then positional overrides.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn read_config(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                i + 1
            )));
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn collect(spec: &SpecArgs, run: &RunArgs, extra: &[(&str, Option<String>)], allowed: &[&str]) -> Result<Self> {
        let mut s = Settings::default();
        let known = |k: &str| SPEC_KEYS.contains(&k) || RUN_KEYS.contains(&k) || allowed.contains(&k);
        if let Some(path) = &run.config {
            for (line, k, v) in read_config(path)? {
                if !known(&k) || k == "config" {
                    return Err(Error::Usage(format!("{}:{line}: unknown key `{k}`", path.display())));
                }
                s.values.insert(k, v);
            }
        }
        let flags: Vec<(&str, Option<String>)> = vec![
            ("combination", spec.combination.clone()),
            ("context", spec.context.clone()),
            ("target", spec.target.clone()),
            ("cell", spec.cell.clone()),
            ("rnn_size", spec.rnn_size.clone()),
            ("windows", spec.windows.clone()),
            ("filters", spec.filters.clone()),
            ("l2", spec.l2.clone()),
            ("lr", spec.lr.clone()),
            ("classes", spec.classes.clone()),
            ("ctx_len", spec.ctx_len.clone()),
            ("tgt_len", spec.tgt_len.clone()),
            ("seed", spec.seed.clone()),
            ("bilinear_bias", spec.bilinear_bias.clone()),
            ("data", run.data.clone()),
            ("format", run.format.clone()),
            ("embeddings", run.embeddings.clone()),
            ("embed_dim", run.embed_dim.clone()),
            ("min_count", run.min_count.clone()),
            ("freeze_embeddings", run.freeze_embeddings.then(|| "true".into())),
            ("length_percentile", run.length_percentile.clone()),
            ("batch_size", run.batch_size.clone()),
            ("max_epochs", run.max_epochs.clone()),
            ("patience", run.patience.clone()),
            ("metric", run.metric.clone()),
            ("clip_norm", run.clip_norm.clone()),
            ("pos_weight", run.pos_weight.clone()),
            ("timings", run.timings.then(|| "true".into())),
            ("out", run.out.clone()),
            ("workers", run.workers.clone()),
        ];
        for (k, v) in flags.into_iter().chain(extra.iter().map(|(k, v)| (*k, v.clone()))) {
            if let Some(v) = v {
                s.values.insert(k.to_string(), v);
            }
        }
        for o in &run.overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Usage(format!("expected key=value, got `{o}`")));
            };
            if !known(k) || k == "config" {
                return Err(Error::Usage(format!("unknown key `{k}`")));
            }
            s.values.insert(k.to_string(), v.to_string());
        }
        Ok(s)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for {key}"))),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            None | Some("false") | Some("0") => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some(v) => Err(Error::Config(format!("invalid value `{v}` for {key}"))),
        }
    }

    /// Spec from defaults plus every spec key present.
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::default();
        for key in SPEC_KEYS {
            if let Some(v) = self.get(key) {
                spec.set(key, v)?;
            }
        }
        Ok(spec)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed", 0)
    }

    pub fn data(&self) -> Result<(PathBuf, Format)> {
        let path = self
            .get("data")
            .ok_or_else(|| Error::Usage("--data is required".into()))?;
        let format = self.get("format").unwrap_or("tsv-pairs").parse()?;
        Ok((PathBuf::from(path), format))
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        Ok(match self.get("embeddings") {
            Some(p) => EmbeddingSource::Pretrained { path: p.into() },
            None => EmbeddingSource::Random {
                dim: self.parse("embed_dim", 50)?,
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip_norm = match self.get("clip_norm") {
            None => Some(5.0),
            Some("none") | Some("off") => None,
            Some(v) => Some(
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for clip_norm")))?,
            ),
        };
        let config = TrainConfig {
            batch_size: self.parse("batch_size", 64)?,
            max_epochs: self.parse("max_epochs", 50)?,
            patience: self.parse("patience", 5)?,
            seed: self.seed()?,
            metric: self.parse("metric", SelectionMetric::Avgp)?,
            clip_norm,
            pos_weight: self.get("pos_weight").map(str::parse).transpose().map_err(|_| {
                Error::Config(format!("invalid value `{}` for pos_weight", self.get("pos_weight").unwrap_or("")))
            })?,
            record_timing: self.flag("timings")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("out"))
    }

    pub fn workers(&self) -> Result<usize> {
        self.parse("workers", 0)
    }

    pub fn split(&self) -> Result<[f64; 3]> {
        let Some(v) = self.get("split") else {
            return Ok([0.6, 0.1, 0.3]);
        };
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid split `{v}`")))?;
        <[f64; 3]>::try_from(parts).map_err(|_| Error::Config(format!("split `{v}` needs three ratios")))
    }

    /// Grid axes: the spec's own values (or the published space with
    /// `paper_grid`), replaced axis by axis by any `grid_*` list.
    pub fn grid(&self, spec: &ModelSpec) -> Result<GridSpace> {
        let mut g = if self.flag("paper_grid")? {
            GridSpace::paper()
        } else {
            GridSpace::single(spec)
        };
        fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
            v.split(',').map(|x| f(x.trim())).collect()
        }
        let num = |key: &'static str| {
            move |x: &str| {
                x.parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid value `{x}` in {key}")))
            }
        };
        let int = |key: &'static str| {
            move |x: &str| {
                x.parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid value `{x}` in {key}")))
            }
        };
        if let Some(v) = self.get("grid_cell") {
            g.cells = list(v, |x| x.parse::<CellKind>())?;
        }
        if let Some(v) = self.get("grid_rnn_size") {
            g.rnn_sizes = list(v, int("grid_rnn_size"))?;
        }
        if let Some(v) = self.get("grid_windows") {
            g.windows = list(v, parse_windows)?;
        }
        if let Some(v) = self.get("grid_filters") {
            g.filters = list(v, int("grid_filters"))?;
        }
        if let Some(v) = self.get("grid_l2") {
            g.l2 = list(v, num("grid_l2"))?;
        }
        if let Some(v) = self.get("grid_lr") {
            g.lr = list(v, num("grid_lr"))?;
        }
        Ok(g)
    }
}
