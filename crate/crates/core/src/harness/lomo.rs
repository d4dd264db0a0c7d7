use std::collections::BTreeSet;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::combinators::ModelSpec;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MacroReport};
use crate::scalar::Scalar;
use crate::train::{evaluate, train_model_with, validation_metric, EncodedPair, EpochRecord, TrainConfig};

use super::dataset::assign_groups;
use super::grid::{is_cancelled, worker_pool};
use super::Dataset;

#[derive(Clone, Debug)]
pub struct LomoConfig {
    pub train: TrainConfig,
    pub workers: usize,
    /// Share of each fold's training records held out for early stopping.
    pub holdout: f64,
    /// Seeds the holdout choice.
    pub seed: u64,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for LomoConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            workers: 0,
            holdout: 0.1,
            seed: 0,
            cancel: None,
        }
    }
}

/// Which groups and how many records went where in one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldManifest {
    pub test_group: String,
    pub train_groups: Vec<String>,
    pub valid_groups: Vec<String>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// True when too few groups remained and the holdout was drawn by record.
    pub record_holdout: bool,
    pub best_epoch: Option<usize>,
}

impl FoldManifest {
    /// True when the held-out group also appears on the training side.
    pub fn leaks(&self) -> bool {
        self.train_groups.contains(&self.test_group) || self.valid_groups.contains(&self.test_group)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub manifest: FoldManifest,
    pub report: EvalReport<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LomoResult {
    pub report: MacroReport<f64>,
    pub folds: Vec<Fold>,
    pub cancelled: bool,
}

struct FoldPlan {
    manifest: FoldManifest,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

fn plan_fold(dataset: &Dataset, group: &str, holdout: f64, seed: u64) -> Result<FoldPlan> {
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records[i].group == group).collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records[i].group != group).collect();
    let mut sizes: Vec<(String, usize)> = Vec::new();
    for &i in &rest {
        let g = &dataset.records[i].group;
        match sizes.iter_mut().find(|(n, _)| n == g) {
            Some(entry) => entry.1 += 1,
            None => sizes.push((g.clone(), 1)),
        }
    }
    let (train, valid, train_groups, valid_groups, record_holdout) = if sizes.len() >= 2 {
        let parts = assign_groups(&sizes, &[1.0 - holdout, holdout], seed)?;
        let valid_set: BTreeSet<&str> = parts[1].iter().map(String::as_str).collect();
        let (valid, train): (Vec<usize>, Vec<usize>) =
            rest.iter().partition(|&&i| valid_set.contains(dataset.records[i].group.as_str()));
        (train, valid, parts[0].clone(), parts[1].clone(), false)
    } else {
        if rest.len() < 2 {
            return Err(Error::Input(format!(
                "fold `{group}` leaves {} training records, too few for a holdout",
                rest.len()
            )));
        }
        let mut shuffled = rest.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = ((rest.len() as f64 * holdout).ceil() as usize).clamp(1, rest.len() - 1);
        let mut valid = shuffled[..n_valid].to_vec();
        let mut train = shuffled[n_valid..].to_vec();
        valid.sort_unstable();
        train.sort_unstable();
        let groups: Vec<String> = sizes.into_iter().map(|g| g.0).collect();
        (train, valid, groups.clone(), groups, true)
    };
    Ok(FoldPlan {
        manifest: FoldManifest {
            test_group: group.to_string(),
            train_groups,
            valid_groups,
            n_train: train.len(),
            n_valid: valid.len(),
            n_test: test.len(),
            record_holdout,
            best_epoch: None,
        },
        train,
        valid,
        test,
    })
}

/// Leave-one-group-out evaluation: one model per group, tested on that group
/// after training on all others, then macro-averaged.
pub fn lomo_evaluate<T: Scalar>(
    dataset: &Dataset,
    pairs: &[EncodedPair],
    embedding: &EmbeddingTable<T>,
    spec: &ModelSpec,
    config: &LomoConfig,
) -> Result<LomoResult> {
    if pairs.len() != dataset.len() {
        return Err(Error::Input(format!(
            "{} encoded pairs for {} records",
            pairs.len(),
            dataset.len()
        )));
    }
    if !(config.holdout > 0.0 && config.holdout < 1.0) {
        return Err(Error::Config(format!("holdout {} is outside (0, 1)", config.holdout)));
    }
    let groups = dataset.groups();
    if groups.len() < 2 {
        return Err(Error::Input(format!(
            "leave-one-group-out needs at least 2 groups, found {}",
            groups.len()
        )));
    }
    let plans = groups
        .iter()
        .map(|g| plan_fold(dataset, g, config.holdout, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();

    let run = |plan: &FoldPlan| -> Option<Result<Fold>> {
        if is_cancelled(&config.cancel) {
            return None;
        }
        log::info!("fold `{}`: {} train / {} valid / {} test", plan.manifest.test_group, plan.train.len(), plan.valid.len(), plan.test.len());
        let (train, valid, test) = (pick(&plan.train), pick(&plan.valid), pick(&plan.test));
        let trained = train_model_with(spec, embedding.clone(), &train, &config.train, |m| {
            if is_cancelled(&config.cancel) {
                return Err(Error::Cancelled);
            }
            validation_metric(m, &valid, config.train.metric)
        });
        let trained = match trained {
            Ok(t) => t,
            Err(e) if e.is_cancelled() => return None,
            Err(e) => return Some(Err(e)),
        };
        let report = match evaluate(&trained.model, &test) {
            Ok(r) => r.to_f64(),
            Err(e) => return Some(Err(e)),
        };
        let mut manifest = plan.manifest.clone();
        manifest.best_epoch = Some(trained.best_epoch);
        Some(Ok(Fold {
            manifest,
            report,
            history: trained.history,
        }))
    };
    let pool = worker_pool(config.workers)?;
    let outcomes: Vec<Option<Result<Fold>>> = pool.install(|| plans.par_iter().map(run).collect());
    let cancelled = outcomes.iter().any(Option::is_none);
    let folds = outcomes.into_iter().flatten().collect::<Result<Vec<_>>>()?;
    if folds.is_empty() {
        return Err(Error::Cancelled);
    }
    let report = MacroReport::from_reports(
        folds
            .iter()
            .map(|f| (f.manifest.test_group.clone(), f.report.clone()))
            .collect(),
    )?;
    Ok(LomoResult {
        report,
        folds,
        cancelled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Record;

    fn dataset(groups: &[(&str, usize)]) -> Dataset {
        let records = groups
            .iter()
            .flat_map(|&(g, n)| {
                (0..n).map(move |i| Record {
                    context: "c".into(),
                    target: "t".into(),
                    label: i % 2,
                    group: g.to_string(),
                })
            })
            .collect();
        Dataset {
            name: "d".into(),
            records,
            label_names: vec!["0".into(), "1".into()],
        }
    }

    #[test]
    fn fold_plans_hold_out_whole_groups() {
        let d = dataset(&[("a", 10), ("b", 10), ("c", 10), ("d", 10)]);
        let p = plan_fold(&d, "b", 0.1, 4).unwrap();
        assert!(!p.manifest.leaks());
        assert!(!p.manifest.record_holdout);
        assert_eq!(p.manifest.n_test, 10);
        assert_eq!(p.manifest.valid_groups.len(), 1);
        assert_eq!(p.train.len() + p.valid.len(), 30);
        assert!(p.test.iter().all(|&i| d.records[i].group == "b"));
    }

    #[test]
    fn two_groups_fall_back_to_record_holdout() {
        let d = dataset(&[("a", 20), ("b", 10)]);
        let p = plan_fold(&d, "a", 0.1, 1).unwrap();
        assert!(p.manifest.record_holdout);
        assert_eq!((p.valid.len(), p.train.len()), (1, 9));
        assert!(!p.manifest.leaks());
    }
}
