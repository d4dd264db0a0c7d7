pub mod args;
pub mod settings;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{CommandFactory, Parser};

use biseq::harness::{
    encode_dataset, grid_rows, load_dataset, lomo_evaluate, lomo_rows, prepare, read_scores, search_space, sha256_hex,
    split_dataset, suggest_max_lengths, synth, write_history_jsonl, write_results_csv, write_scores, Dataset,
    DatasetInfo, EmbeddingSource, GridConfig, GridData, LomoConfig, Manifest, Prepared, ResultRow,
    SplitManifest, SynthConfig,
};
use biseq::metrics::{macro_average, EvalReport, ScoredLabel, DEFAULT_KS};
use biseq::train::{evaluate, positive_scores, train_model_with, validation_metric};
use biseq::{enumerate_architectures, Error, ModelSpec, Result};

use args::{Cli, Command, EnumerateArgs, EvalArgs, GridArgs, LomoArgs, RunArgs, SynthArgs, TrainArgs};
use settings::{Settings, GRID_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CANCELLED: i32 = 130;

pub fn command() -> clap::Command {
    Cli::command()
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_cancelled() {
        EXIT_CANCELLED
    } else if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_with_cancel(argv, None)
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run_with_cancel<I, S>(argv: I, cancel: Option<Arc<AtomicBool>>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli.command, cancel) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, cancel: Option<Arc<AtomicBool>>) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, cancel),
        Command::Grid(a) => cmd_grid(a, cancel),
        Command::Lomo(a) => cmd_lomo(a, cancel),
        Command::Eval(a) => cmd_eval(a),
        Command::Enumerate(a) => cmd_enumerate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Dataset, spec and embeddings shared by train, grid and lomo.
struct Loaded {
    dataset: Dataset,
    info: DatasetInfo,
    spec: ModelSpec,
    source: EmbeddingSource,
    prepared: Prepared<f64>,
}

fn load(settings: &Settings) -> Result<Loaded> {
    let (path, format) = settings.data()?;
    let dataset = load_dataset(&path, format)?;
    if dataset.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())));
    }
    let mut spec = settings.spec()?;
    if settings.get("classes").is_none() {
        spec.classes = dataset.classes();
    } else if spec.classes != dataset.classes() {
        return Err(Error::Config(format!(
            "classes={} but the dataset has {} labels",
            spec.classes,
            dataset.classes()
        )));
    }
    if let Some(p) = settings.get("length_percentile") {
        let p: f64 = p
            .parse()
            .map_err(|_| Error::Config(format!("invalid value `{p}` for length_percentile")))?;
        let (ctx, tgt) = suggest_max_lengths(&dataset, p)?;
        spec.ctx_len = ctx.max(1);
        spec.tgt_len = tgt.max(1);
        log::info!("length percentile {p}: ctx_len={} tgt_len={}", spec.ctx_len, spec.tgt_len);
    }
    let source = settings.embedding_source()?;
    let prepared = prepare::<f64>(
        &dataset,
        &source,
        settings.parse("min_count", 1)?,
        !settings.flag("freeze_embeddings")?,
        spec.seed,
    )?;
    let info = DatasetInfo {
        name: dataset.name.clone(),
        path: path.display().to_string(),
        format: format.as_str().to_string(),
        sha256: sha256_hex(&fs::read(&path)?),
        records: dataset.len(),
        groups: dataset.groups().len(),
    };
    log::info!(
        "{}: {} records, {} groups, {} labels, vocabulary {}",
        info.name,
        info.records,
        info.groups,
        dataset.classes(),
        prepared.vocab.len()
    );
    Ok(Loaded {
        dataset,
        info,
        spec,
        source,
        prepared,
    })
}

fn embedding_label(source: &EmbeddingSource, settings: &Settings) -> String {
    let frozen = settings.flag("freeze_embeddings").unwrap_or(false);
    let kind = match source {
        EmbeddingSource::Random { dim } => format!("random dim={dim}"),
        EmbeddingSource::Pretrained { path } => format!("pretrained {}", path.display()),
    };
    if frozen {
        format!("{kind} frozen")
    } else {
        kind
    }
}

fn out_dir(settings: &Settings) -> Result<std::path::PathBuf> {
    let dir = settings.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn split_manifest(split: &biseq::harness::Split) -> SplitManifest {
    SplitManifest {
        train_groups: split.train_groups.clone(),
        valid_groups: split.valid_groups.clone(),
        test_groups: split.test_groups.clone(),
    }
}

fn print_summary(label: &str, report: Option<&EvalReport<f64>>) {
    let Some(r) = report else { return };
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{label}: avgp {} auc {} accuracy {}",
        show(r.avgp),
        show(r.auc),
        show(r.accuracy)
    );
}

fn cmd_train(a: TrainArgs, cancel: Option<Arc<AtomicBool>>) -> Result<()> {
    let settings = Settings::collect(&a.spec, &a.run, &[("split", a.split.clone())], &["split"])?;
    let train = settings.train_config()?;
    let loaded = load(&settings)?;
    let split = split_dataset(&loaded.dataset, settings.split()?, loaded.spec.seed)?;
    let vocab = &loaded.prepared.vocab;
    let (tr, va, te) = (
        encode_dataset(vocab, &split.train),
        encode_dataset(vocab, &split.valid),
        encode_dataset(vocab, &split.test),
    );
    log::info!("split: {} train / {} valid / {} test", tr.len(), va.len(), te.len());
    let dir = out_dir(&settings)?;
    let start = Instant::now();
    let trained = train_model_with(&loaded.spec, loaded.prepared.embedding.clone(), &tr, &train, |m| {
        if cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) {
            return Err(Error::Cancelled);
        }
        validation_metric(m, &va, train.metric)
    });
    let trained = match trained {
        Ok(t) => t,
        Err(Error::Training { epoch, source, history }) => {
            write_history_jsonl(&dir.join("history.jsonl"), [("train".to_string(), history.as_slice())])?;
            return Err(Error::Training { epoch, source, history });
        }
        Err(e) => return Err(e),
    };
    let report = evaluate(&trained.model, &te)?.to_f64();
    let wall_ms = train.record_timing.then(|| start.elapsed().as_secs_f64() * 1000.0);
    let row = ResultRow {
        run: "train".into(),
        spec: loaded.spec.clone(),
        valid_metric: Some(trained.best_metric),
        best_epoch: Some(trained.best_epoch),
        test: Some(report.clone()),
        error: None,
        wall_ms,
    };
    write_results_csv(&dir.join("results.csv"), std::slice::from_ref(&row))?;
    write_history_jsonl(&dir.join("history.jsonl"), [("train".to_string(), trained.history.as_slice())])?;
    if loaded.spec.classes == 2 {
        let items: Vec<ScoredLabel<f64>> = positive_scores(&trained.model, &te)?
            .into_iter()
            .zip(&split.test.records)
            .map(|(s, r)| ScoredLabel::grouped(s, r.label, r.group.clone()))
            .collect();
        write_scores(&dir.join("scores.tsv"), &items)?;
    }
    Manifest {
        command: "train".into(),
        seed: loaded.spec.seed,
        dataset: loaded.info.clone(),
        embedding: embedding_label(&loaded.source, &settings),
        train,
        specs: vec![loaded.spec.to_string()],
        split: Some(split_manifest(&split)),
        folds: Vec::new(),
        excluded: Default::default(),
        cancelled: false,
    }
    .write(&dir.join("manifest.json"))?;
    eprintln!("best epoch {} valid {:.4}", trained.best_epoch, trained.best_metric);
    print_summary("test", Some(&report));
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn cmd_grid(a: GridArgs, cancel: Option<Arc<AtomicBool>>) -> Result<()> {
    let extra = [
        ("split", a.split.clone()),
        ("paper_grid", a.paper_grid.then(|| "true".into())),
        ("grid_cell", a.grid_cell.clone()),
        ("grid_rnn_size", a.grid_rnn_size.clone()),
        ("grid_windows", a.grid_windows.clone()),
        ("grid_filters", a.grid_filters.clone()),
        ("grid_l2", a.grid_l2.clone()),
        ("grid_lr", a.grid_lr.clone()),
        ("full_table", a.full_table.then(|| "true".into())),
    ];
    let settings = Settings::collect(&a.spec, &a.run, &extra, &GRID_KEYS)?;
    let train = settings.train_config()?;
    let loaded = load(&settings)?;
    let space = settings.grid(&loaded.spec)?;
    let split = split_dataset(&loaded.dataset, settings.split()?, loaded.spec.seed)?;
    let vocab = &loaded.prepared.vocab;
    let (tr, va, te) = (
        encode_dataset(vocab, &split.train),
        encode_dataset(vocab, &split.valid),
        encode_dataset(vocab, &split.test),
    );
    let dir = out_dir(&settings)?;
    let config = GridConfig {
        train: train.clone(),
        workers: settings.workers()?,
        full_table: settings.flag("full_table")?,
        cancel,
    };
    let result = search_space(
        GridData {
            train: &tr,
            valid: &va,
            test: &te,
            embedding: &loaded.prepared.embedding,
        },
        &loaded.spec,
        &space,
        &config,
    )?;
    let rows = grid_rows(&result);
    write_results_csv(&dir.join("results.csv"), &rows)?;
    write_history_jsonl(
        &dir.join("history.jsonl"),
        result
            .rows
            .iter()
            .map(|r| (format!("cell{}", r.cell + 1), r.history.as_slice())),
    )?;
    let mut specs: Vec<(usize, String)> = result.rows.iter().map(|r| (r.cell, r.spec.to_string())).collect();
    specs.sort();
    Manifest {
        command: "grid".into(),
        seed: loaded.spec.seed,
        dataset: loaded.info.clone(),
        embedding: embedding_label(&loaded.source, &settings),
        train,
        specs: specs.into_iter().map(|s| s.1).collect(),
        split: Some(split_manifest(&split)),
        folds: Vec::new(),
        excluded: result.excluded.clone(),
        cancelled: result.cancelled,
    }
    .write(&dir.join("manifest.json"))?;
    let excluded: usize = result.excluded.values().sum();
    eprintln!("{} cells trained, {excluded} excluded by spec rules", result.rows.len());
    match result.winner() {
        Some(w) => {
            eprintln!("best cell{} valid {:.4}: {}", w.cell + 1, w.valid_metric.unwrap_or(f64::NAN), w.spec);
            print_summary("test", w.test.as_ref());
        }
        None => eprintln!("no cell finished"),
    }
    if result.cancelled {
        return Err(Error::Cancelled);
    }
    if result.winner().is_none() {
        return Err(match result.rows.iter().find_map(|r| r.error.clone()) {
            Some(e) if e.contains("numeric") => Error::Numeric(e),
            Some(e) => Error::Input(e),
            None => Error::Input("no cell produced a validation metric".into()),
        });
    }
    Ok(())
}

fn cmd_lomo(a: LomoArgs, cancel: Option<Arc<AtomicBool>>) -> Result<()> {
    let settings = Settings::collect(&a.spec, &a.run, &[("holdout", a.holdout.clone())], &["holdout"])?;
    let train = settings.train_config()?;
    let loaded = load(&settings)?;
    let dir = out_dir(&settings)?;
    let config = LomoConfig {
        train: train.clone(),
        workers: settings.workers()?,
        holdout: settings.parse("holdout", 0.1)?,
        seed: loaded.spec.seed,
        cancel,
    };
    let result = lomo_evaluate(
        &loaded.dataset,
        &loaded.prepared.pairs,
        &loaded.prepared.embedding,
        &loaded.spec,
        &config,
    )?;
    write_results_csv(&dir.join("results.csv"), &lomo_rows(&loaded.spec, &result))?;
    write_history_jsonl(
        &dir.join("history.jsonl"),
        result
            .folds
            .iter()
            .map(|f| (format!("fold:{}", f.manifest.test_group), f.history.as_slice())),
    )?;
    Manifest {
        command: "lomo".into(),
        seed: loaded.spec.seed,
        dataset: loaded.info.clone(),
        embedding: embedding_label(&loaded.source, &settings),
        train,
        specs: vec![loaded.spec.to_string()],
        split: None,
        folds: result.folds.iter().map(|f| f.manifest.clone()).collect(),
        excluded: Default::default(),
        cancelled: result.cancelled,
    }
    .write(&dir.join("manifest.json"))?;
    let m = &result.report;
    let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "macro over {} groups: avgp {} auc {} accuracy {}",
        m.groups.len(),
        show(m.avgp),
        show(m.auc),
        show(m.accuracy)
    );
    if !m.skipped.is_empty() {
        eprintln!("groups without defined ranking metrics: {}", m.skipped.join(", "));
    }
    if result.cancelled {
        return Err(Error::Cancelled);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let items = read_scores(&a.scores)?;
    let ks: Vec<usize> = if a.k.is_empty() { DEFAULT_KS.to_vec() } else { a.k.clone() };
    if ks.contains(&0) {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let report = EvalReport::from_scores(&items, &ks)?;
    let mut out = std::io::stdout().lock();
    write_report(&mut out, "", &report)?;
    if items.iter().all(|i| i.group.is_some()) {
        let m = macro_average(&items, &ks)?;
        let line = |out: &mut dyn Write, key: &str, v: Option<f64>| -> std::io::Result<()> {
            match v {
                Some(v) => writeln!(out, "macro_{key}\t{v}"),
                None => writeln!(out, "macro_{key}\t-"),
            }
        };
        writeln!(out, "macro_groups\t{}", m.groups.len())?;
        line(&mut out, "avgp", m.avgp)?;
        line(&mut out, "auc", m.auc)?;
        for at in &m.at_k {
            line(&mut out, &format!("p@{}", at.k), Some(at.precision))?;
            line(&mut out, &format!("r@{}", at.k), Some(at.recall))?;
            line(&mut out, &format!("f1@{}", at.k), Some(at.f1))?;
        }
        if !m.skipped.is_empty() {
            writeln!(out, "macro_skipped\t{}", m.skipped.join(","))?;
        }
    }
    Ok(())
}

fn write_report(out: &mut dyn Write, prefix: &str, r: &EvalReport<f64>) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    writeln!(out, "{prefix}n\t{}", r.n)?;
    writeln!(out, "{prefix}n_pos\t{}", r.n_pos)?;
    writeln!(out, "{prefix}avgp\t{}", opt(r.avgp))?;
    writeln!(out, "{prefix}auc\t{}", opt(r.auc))?;
    writeln!(out, "{prefix}accuracy\t{}", opt(r.accuracy))?;
    for at in &r.at_k {
        writeln!(out, "{prefix}p@{}\t{}", at.k, at.precision)?;
        writeln!(out, "{prefix}r@{}\t{}", at.k, at.recall)?;
        writeln!(out, "{prefix}f1@{}\t{}", at.k, at.f1)?;
    }
    Ok(())
}

fn cmd_enumerate(a: EnumerateArgs) -> Result<()> {
    let settings = Settings::collect(&a.spec, &RunArgs::default(), &[], &[])?;
    let base = settings.spec()?;
    let mut out = std::io::stdout().lock();
    for spec in enumerate_architectures(&base)? {
        writeln!(out, "{spec}")?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n: a.n,
        groups: a.groups,
        vocab: a.vocab,
        seed: a.seed,
        distractors: a.distractors,
        ..SynthConfig::default()
    };
    let dataset = synth(&config)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    dataset.write_tsv(&a.out)?;
    eprintln!(
        "wrote {} records in {} groups to {}",
        dataset.len(),
        dataset.groups().len(),
        a.out.display()
    );
    Ok(())
}
