use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;

use crate::combinators::{validate_spec, Model, ModelSpec};
use crate::embed::EmbeddingTable;
use crate::encoders::CellKind;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::scalar::Scalar;
use crate::train::{evaluate, train_model_with, validation_metric, EncodedPair, EpochRecord, SelectionMetric, TrainConfig};

/// Hyperparameter axes. Only the axes a spec actually uses are expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace {
    pub cells: Vec<CellKind>,
    pub rnn_sizes: Vec<usize>,
    pub windows: Vec<Vec<usize>>,
    pub filters: Vec<usize>,
    pub l2: Vec<f64>,
    pub lr: Vec<f64>,
}

impl GridSpace {
    /// The published search space.
    pub fn paper() -> Self {
        Self {
            cells: vec![CellKind::Gru, CellKind::Lstm],
            rnn_sizes: vec![50, 100, 200, 300, 400, 500, 1000],
            windows: vec![vec![3], vec![3, 4], vec![3, 4, 5], vec![2, 3, 4, 5]],
            filters: vec![10, 20, 40, 64, 128],
            l2: vec![0.0, 0.01, 0.001, 0.0001],
            lr: vec![0.001, 0.0001, 0.00001],
        }
    }

    /// A one-point grid at the values of `spec`.
    pub fn single(spec: &ModelSpec) -> Self {
        Self {
            cells: vec![spec.cell],
            rnn_sizes: vec![spec.rnn_size],
            windows: vec![spec.windows.clone()],
            filters: vec![spec.filters],
            l2: vec![spec.l2],
            lr: vec![spec.lr],
        }
    }

    fn check_axes(&self) -> Result<()> {
        let empty: Vec<&str> = [
            ("cell", self.cells.is_empty()),
            ("rnn_size", self.rnn_sizes.is_empty()),
            ("windows", self.windows.is_empty()),
            ("filters", self.filters.is_empty()),
            ("l2", self.l2.is_empty()),
            ("lr", self.lr.is_empty()),
        ]
        .into_iter()
        .filter_map(|(name, e)| e.then_some(name))
        .collect();
        if empty.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("grid axes {} are empty", empty.join(", "))))
        }
    }

    /// Every valid cell for the architecture of `base`, plus counts of the
    /// excluded cells keyed by the violated rule.
    pub fn expand(&self, base: &ModelSpec) -> Result<Expansion> {
        self.check_axes()?;
        let rnn = base.uses_rnn();
        let cnn = base.uses_cnn();
        let pick = |relevant: bool, axis: Vec<ModelSpec>, apply: &dyn Fn(&ModelSpec) -> Vec<ModelSpec>| {
            if relevant {
                axis.iter().flat_map(apply).collect()
            } else {
                axis
            }
        };
        let mut specs = vec![base.clone()];
        specs = pick(rnn, specs, &|s| self.cells.iter().map(|&cell| ModelSpec { cell, ..s.clone() }).collect());
        specs = pick(rnn, specs, &|s| {
            self.rnn_sizes.iter().map(|&rnn_size| ModelSpec { rnn_size, ..s.clone() }).collect()
        });
        specs = pick(cnn, specs, &|s| {
            self.windows.iter().map(|w| ModelSpec { windows: w.clone(), ..s.clone() }).collect()
        });
        specs = pick(cnn, specs, &|s| self.filters.iter().map(|&filters| ModelSpec { filters, ..s.clone() }).collect());
        specs = pick(cnn, specs, &|s| self.l2.iter().map(|&l2| ModelSpec { l2, ..s.clone() }).collect());
        specs = pick(true, specs, &|s| self.lr.iter().map(|&lr| ModelSpec { lr, ..s.clone() }).collect());

        let total = specs.len();
        let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
        let mut first_reason: BTreeMap<String, String> = BTreeMap::new();
        let mut valid = Vec::new();
        for s in specs {
            match validate_spec(&s) {
                Ok(()) => valid.push(s),
                Err(v) => {
                    let rule = format!("rule {}", v[0].rule);
                    *excluded.entry(rule.clone()).or_default() += 1;
                    first_reason.entry(rule).or_insert_with(|| v[0].message.clone());
                }
            }
        }
        if valid.is_empty() {
            let why: Vec<String> = excluded
                .iter()
                .map(|(rule, n)| format!("{n} cells violate {rule}, e.g. {}", first_reason[rule]))
                .collect();
            return Err(Error::Config(format!(
                "all {total} grid cells for {} are invalid: {}",
                base.architecture(),
                why.join("; ")
            )));
        }
        Ok(Expansion {
            specs: valid,
            excluded,
            total,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub specs: Vec<ModelSpec>,
    /// Excluded cell counts keyed by `rule <letter>`.
    pub excluded: BTreeMap<String, usize>,
    pub total: usize,
}

impl Expansion {
    pub fn excluded_count(&self) -> usize {
        self.excluded.values().sum()
    }
}

/// Training data shared read-only by every cell.
#[derive(Clone, Copy, Debug)]
pub struct GridData<'a, T> {
    pub train: &'a [EncodedPair],
    pub valid: &'a [EncodedPair],
    pub test: &'a [EncodedPair],
    pub embedding: &'a EmbeddingTable<T>,
}

#[derive(Clone, Debug, Default)]
pub struct GridConfig {
    pub train: TrainConfig,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    /// Report test metrics for every row, not just the winner.
    pub full_table: bool,
    pub cancel: Option<Arc<AtomicBool>>,
}

/// One trained cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    /// Position of the cell in the expansion order.
    pub cell: usize,
    pub spec: ModelSpec,
    pub valid_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub test: Option<EvalReport<f64>>,
    pub error: Option<String>,
    pub wall_ms: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Sorted by validation metric, best first; failed cells last.
    pub rows: Vec<GridRow>,
    pub metric: SelectionMetric,
    pub excluded: BTreeMap<String, usize>,
    /// True when cancellation left some cells unrun.
    pub cancelled: bool,
}

impl GridResult {
    pub fn winner(&self) -> Option<&GridRow> {
        self.rows.first().filter(|r| r.valid_metric.is_some())
    }
}

pub(crate) fn is_cancelled(flag: &Option<Arc<AtomicBool>>) -> bool {
    flag.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
}

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Trains one model per cell and ranks the cells by validation metric.
pub fn grid_search<T: Scalar>(data: GridData<'_, T>, cells: &[ModelSpec], config: &GridConfig) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    if data.valid.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let metric = config.train.metric;
    let best: Mutex<Option<(f64, usize, Model<T>)>> = Mutex::new(None);
    let run = |(cell, spec): (usize, &ModelSpec)| -> Option<GridRow> {
        if is_cancelled(&config.cancel) {
            return None;
        }
        log::info!("cell {}/{}: {spec}", cell + 1, cells.len());
        let started = Instant::now();
        let trained = train_model_with(spec, data.embedding.clone(), data.train, &config.train, |m| {
            if is_cancelled(&config.cancel) {
                return Err(Error::Cancelled);
            }
            validation_metric(m, data.valid, metric)
        });
        let wall_ms = config.train.record_timing.then(|| started.elapsed().as_secs_f64() * 1e3);
        let mut row = GridRow {
            cell,
            spec: spec.clone(),
            valid_metric: None,
            best_epoch: None,
            test: None,
            error: None,
            wall_ms,
            history: Vec::new(),
        };
        match trained {
            Ok(t) => {
                row.valid_metric = Some(t.best_metric);
                row.best_epoch = Some(t.best_epoch);
                row.history = t.history;
                if config.full_table {
                    match evaluate(&t.model, data.test) {
                        Ok(r) => row.test = Some(r.to_f64()),
                        Err(e) => row.error = Some(e.to_string()),
                    }
                }
                let mut slot = best.lock().expect("no panics while holding the lock");
                let better = slot
                    .as_ref()
                    .is_none_or(|(m, c, _)| t.best_metric > *m || (t.best_metric == *m && cell < *c));
                if better {
                    *slot = Some((t.best_metric, cell, t.model));
                }
            }
            Err(e) if e.is_cancelled() => return None,
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell + 1);
                if let Error::Training { history, .. } = &e {
                    row.history = history.clone();
                }
                row.error = Some(e.to_string());
            }
        }
        Some(row)
    };
    let pool = worker_pool(config.workers)?;
    let results: Vec<Option<GridRow>> = pool.install(|| cells.par_iter().enumerate().map(run).collect());
    let cancelled = results.iter().any(Option::is_none);
    let mut rows: Vec<GridRow> = results.into_iter().flatten().collect();
    rows.sort_by(|a, b| match (a.valid_metric, b.valid_metric) {
        (Some(x), Some(y)) => y.partial_cmp(&x).expect("finite metrics").then(a.cell.cmp(&b.cell)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cell.cmp(&b.cell),
    });
    if let Some((_, cell, model)) = best.into_inner().expect("workers finished") {
        let row = rows.iter_mut().find(|r| r.cell == cell).expect("winner has a row");
        if row.test.is_none() {
            row.test = Some(evaluate(&model, data.test)?.to_f64());
        }
    }
    Ok(GridResult {
        rows,
        metric,
        excluded: BTreeMap::new(),
        cancelled,
    })
}

/// Expands `space` around `base` and searches the surviving cells.
pub fn search_space<T: Scalar>(data: GridData<'_, T>, base: &ModelSpec, space: &GridSpace, config: &GridConfig) -> Result<GridResult> {
    let expansion = space.expand(base)?;
    if !expansion.excluded.is_empty() {
        log::info!(
            "{} of {} cells excluded: {:?}",
            expansion.excluded_count(),
            expansion.total,
            expansion.excluded
        );
    }
    let mut result = grid_search(data, &expansion.specs, config)?;
    result.excluded = expansion.excluded;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinators::{Combination, ContextEncoder, TargetEncoder};

    #[test]
    fn only_relevant_axes_expand() {
        let g = GridSpace::paper();
        let rnn_only = ModelSpec {
            context: ContextEncoder::Cbow,
            target: TargetEncoder::Rnn,
            ..ModelSpec::default()
        };
        assert_eq!(g.expand(&rnn_only).unwrap().specs.len(), 2 * 7 * 3);
        let cnn_only = ModelSpec {
            context: ContextEncoder::Cbow,
            target: TargetEncoder::Cnn,
            ..ModelSpec::default()
        };
        assert_eq!(g.expand(&cnn_only).unwrap().specs.len(), 4 * 5 * 4 * 3);
    }

    #[test]
    fn rule_d_exclusions_are_counted() {
        let g = GridSpace {
            rnn_sizes: vec![48, 64],
            windows: vec![vec![3, 4, 5], vec![3, 4]],
            filters: vec![16, 32],
            cells: vec![CellKind::Gru],
            l2: vec![0.0],
            lr: vec![0.001],
        };
        let spec = ModelSpec {
            combination: Combination::ConditionalState,
            context: ContextEncoder::Cnn,
            ..ModelSpec::default()
        };
        let e = g.expand(&spec).unwrap();
        assert_eq!(e.total, 8);
        // 48 = 16·3 and 64 = 32·2 survive.
        assert_eq!(e.specs.len(), 2);
        assert_eq!(e.excluded.get("rule d"), Some(&6));
        assert!(e.specs.iter().all(|s| s.filters * s.windows.len() == s.rnn_size));
    }

    #[test]
    fn paper_grid_has_no_state_seeding_cnn_cells() {
        let spec = ModelSpec {
            combination: Combination::ConditionalStateInput,
            context: ContextEncoder::Cnn,
            ..ModelSpec::default()
        };
        let err = GridSpace::paper().expand(&spec).unwrap_err();
        assert!(err.to_string().contains("rule d"), "{err}");
    }

    #[test]
    fn empty_axis_is_rejected() {
        let g = GridSpace {
            lr: vec![],
            ..GridSpace::single(&ModelSpec::default())
        };
        assert!(g.expand(&ModelSpec::default()).is_err());
    }
}
