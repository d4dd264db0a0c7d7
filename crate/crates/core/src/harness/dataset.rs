use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::embed::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub context: String,
    pub target: String,
    pub label: usize,
    pub group: String,
}

/// Labelled context/target records with dense label ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<Record>,
    /// `label_names[id]` is the original label string.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct group ids, sorted.
    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.group.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Records whose group satisfies `keep`, under a new name.
    pub fn filter_groups(&self, name: impl Into<String>, keep: impl Fn(&str) -> bool) -> Dataset {
        Dataset {
            name: name.into(),
            records: self.records.iter().filter(|r| keep(&r.group)).cloned().collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Writes the dataset as `context<TAB>target<TAB>label<TAB>group` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            for field in [&r.context, &r.target, &r.group] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(Error::Format(format!("field {field:?} cannot be written as TSV")));
                }
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.context, r.target, self.label_names[r.label], r.group
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    TsvPairs,
    SnliJsonl,
    WikiqaTsv,
}

impl Format {
    pub fn as_str(self) -> &'static str {
        match self {
            Format::TsvPairs => "tsv-pairs",
            Format::SnliJsonl => "snli-jsonl",
            Format::WikiqaTsv => "wikiqa-tsv",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv-pairs" => Ok(Format::TsvPairs),
            "snli-jsonl" => Ok(Format::SnliJsonl),
            "wikiqa-tsv" => Ok(Format::WikiqaTsv),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected tsv-pairs, snli-jsonl or wikiqa-tsv)"
            ))),
        }
    }
}

const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

/// Dense ids for raw label strings.
///
/// All-integer labels keep numeric order (so `1` stays the positive class of a
/// binary file); subsets of the three inference labels use the order
/// entailment, contradiction, neutral; anything else is sorted.
fn label_mapping(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let mut names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
    } else if names.iter().all(|n| NLI_LABELS.contains(&n.as_str())) {
        names.sort_by_key(|n| NLI_LABELS.iter().position(|l| l == n));
    }
    names
}

struct RawRow {
    line: usize,
    context: String,
    target: String,
    label: String,
    group: String,
}

fn assemble(name: String, path: &Path, rows: Vec<RawRow>) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())));
    }
    for r in &rows {
        if tokenize(&r.context).is_empty() {
            return Err(Error::parse(path, r.line, "context is empty"));
        }
        if tokenize(&r.target).is_empty() {
            return Err(Error::parse(path, r.line, "target is empty"));
        }
    }
    let raw_labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let label_names = label_mapping(&raw_labels);
    let ids: HashMap<&str, usize> = label_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let records = rows
        .into_iter()
        .map(|r| Record {
            label: ids[r.label.as_str()],
            context: r.context,
            target: r.target,
            group: r.group,
        })
        .collect();
    Ok(Dataset {
        name,
        records,
        label_names,
    })
}

/// Reads a dataset file. Group ids default to the context text when a format
/// has no explicit group column.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    let rows = match format {
        Format::TsvPairs => parse_tsv_pairs(path, &text)?,
        Format::SnliJsonl => parse_snli(path, &text)?,
        Format::WikiqaTsv => parse_wikiqa(path, &text)?,
    };
    assemble(name, path, rows)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_tsv_pairs(path: &Path, text: &str) -> Result<Vec<RawRow>> {
    let mut width = None;
    let mut rows = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(Error::parse(
                path,
                line,
                format!("expected context, target, label[, group] but found {} columns", cols.len()),
            ));
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("{} columns where earlier lines have {w}", cols.len()),
                ))
            }
            Some(_) => {}
        }
        let label = cols[2].trim();
        if label.is_empty() {
            return Err(Error::parse(path, line, "label is empty"));
        }
        rows.push(RawRow {
            line,
            context: cols[0].to_string(),
            target: cols[1].to_string(),
            label: label.to_string(),
            group: cols.get(3).map_or(cols[0], |g| g.trim()).to_string(),
        });
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct SnliLine {
    sentence1: String,
    sentence2: String,
    gold_label: String,
}

fn parse_snli(path: &Path, text: &str) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for (line, l) in content_lines(text) {
        let parsed: SnliLine = serde_json::from_str(l).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if parsed.gold_label == "-" {
            continue;
        }
        rows.push(RawRow {
            line,
            group: parsed.sentence1.clone(),
            context: parsed.sentence1,
            target: parsed.sentence2,
            label: parsed.gold_label,
        });
    }
    Ok(rows)
}

fn parse_wikiqa(path: &Path, text: &str) -> Result<Vec<RawRow>> {
    let mut lines = content_lines(text);
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let names: Vec<String> = header.split('\t').map(|h| h.trim().to_ascii_lowercase()).collect();
    let find = |want: &str| names.iter().position(|n| n == want);
    let (Some(q), Some(s), Some(lab)) = (find("question"), find("sentence"), find("label")) else {
        return Err(Error::parse(path, 1, "header must name Question, Sentence and Label columns"));
    };
    let qid = find("questionid");
    let mut rows = Vec::new();
    for (line, l) in lines {
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != names.len() {
            return Err(Error::parse(
                path,
                line,
                format!("{} columns where the header has {}", cols.len(), names.len()),
            ));
        }
        rows.push(RawRow {
            line,
            context: cols[q].to_string(),
            target: cols[s].to_string(),
            label: cols[lab].trim().to_string(),
            group: qid.map_or(cols[q], |i| cols[i]).to_string(),
        });
    }
    Ok(rows)
}

/// Assigns whole groups to parts by a seeded shuffle; each group goes to the
/// part furthest below its record-count target.
pub fn assign_groups(groups: &[(String, usize)], ratios: &[f64], seed: u64) -> Result<Vec<Vec<String>>> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    if groups.len() < ratios.len() {
        return Err(Error::Input(format!(
            "{} groups cannot fill {} parts",
            groups.len(),
            ratios.len()
        )));
    }
    let mut order: Vec<&(String, usize)> = groups.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total: usize = groups.iter().map(|g| g.1).sum();
    let targets: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut filled = vec![0usize; ratios.len()];
    let mut parts: Vec<Vec<&(String, usize)>> = vec![Vec::new(); ratios.len()];
    for g in order {
        let part = (0..ratios.len())
            .max_by(|&a, &b| {
                let da = targets[a] - filled[a] as f64;
                let db = targets[b] - filled[b] as f64;
                da.partial_cmp(&db).expect("finite").then(b.cmp(&a))
            })
            .expect("at least one part");
        filled[part] += g.1;
        parts[part].push(g);
    }
    for p in 0..parts.len() {
        if parts[p].is_empty() {
            if ratios[p] == 0.0 {
                return Err(Error::Input(format!("split part {p} has ratio 0 and would be empty")));
            }
            // Take the smallest group from the part holding the most groups.
            let donor = (0..parts.len()).max_by_key(|&q| (parts[q].len(), std::cmp::Reverse(q))).expect("parts");
            if parts[donor].len() < 2 {
                return Err(Error::Input(format!("split part {p} would be empty")));
            }
            let (idx, _) = parts[donor]
                .iter()
                .enumerate()
                .min_by_key(|(i, g)| (g.1, *i))
                .expect("donor has groups");
            let g = parts[donor].remove(idx);
            parts[p].push(g);
        }
    }
    Ok(parts
        .into_iter()
        .map(|p| {
            let mut names: Vec<String> = p.into_iter().map(|g| g.0.clone()).collect();
            names.sort();
            names
        })
        .collect())
}

fn group_sizes(dataset: &Dataset) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &dataset.records {
        *counts.entry(&r.group).or_default() += 1;
    }
    counts.into_iter().map(|(g, n)| (g.to_string(), n)).collect()
}

/// Train, validation and test parts plus the groups each one holds.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub train_groups: Vec<String>,
    pub valid_groups: Vec<String>,
    pub test_groups: Vec<String>,
}

/// Grouped train/valid/test split; every group lands wholly inside one part.
pub fn split_dataset(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let parts = assign_groups(&group_sizes(dataset), &ratios, seed)?;
    let part = |i: usize, suffix: &str| {
        let set: BTreeSet<&str> = parts[i].iter().map(String::as_str).collect();
        dataset.filter_groups(format!("{}-{suffix}", dataset.name), |g| set.contains(g))
    };
    Ok(Split {
        train: part(0, "train"),
        valid: part(1, "valid"),
        test: part(2, "test"),
        train_groups: parts[0].clone(),
        valid_groups: parts[1].clone(),
        test_groups: parts[2].clone(),
    })
}

/// Nearest-rank percentile of token counts on each side.
pub fn suggest_max_lengths(dataset: &Dataset, percentile: f64) -> Result<(usize, usize)> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile} is outside (0, 100]")));
    }
    if dataset.is_empty() {
        return Err(Error::Input("cannot measure lengths of an empty dataset".into()));
    }
    let nearest_rank = |mut lengths: Vec<usize>| {
        lengths.sort_unstable();
        let rank = ((percentile / 100.0) * lengths.len() as f64).ceil() as usize;
        lengths[rank.clamp(1, lengths.len()) - 1]
    };
    let ctx = dataset.records.iter().map(|r| tokenize(&r.context).len()).collect();
    let tgt = dataset.records.iter().map(|r| tokenize(&r.target).len()).collect();
    Ok((nearest_rank(ctx), nearest_rank(tgt)))
}

/// Settings for the synthetic containment task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub groups: usize,
    /// Number of distinct word types.
    pub vocab: usize,
    pub seed: u64,
    /// Negatives carry a topic word other than the context's.
    pub distractors: bool,
    pub min_target_len: usize,
    pub max_target_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            groups: 5,
            vocab: 50,
            seed: 0,
            distractors: false,
            min_target_len: 4,
            max_target_len: 10,
        }
    }
}

impl SynthConfig {
    /// The first `vocab / 5` word types (at least 2) serve as topics.
    pub fn topic_count(&self) -> usize {
        (self.vocab / 5).max(2)
    }
}

fn synth_word(i: usize) -> String {
    format!("w{i:02}")
}

/// Containment task: the context is one topic word and the label is 1 iff
/// that word occurs in the target. Groups are assigned independently of
/// content, so every group poses the same task.
pub fn synth(config: &SynthConfig) -> Result<Dataset> {
    let topics = config.topic_count();
    if config.n == 0 || config.groups == 0 {
        return Err(Error::Config("synthetic data needs n ≥ 1 and groups ≥ 1".into()));
    }
    if config.vocab < topics + 1 {
        return Err(Error::Config(format!(
            "vocabulary of {} leaves no filler words after {topics} topics",
            config.vocab
        )));
    }
    if config.min_target_len == 0 || config.min_target_len > config.max_target_len {
        return Err(Error::Config("target lengths must satisfy 1 ≤ min ≤ max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let topic = rng.gen_range(0..topics);
        let label = usize::from(rng.gen_bool(0.5));
        let len = rng.gen_range(config.min_target_len..=config.max_target_len);
        let mut words: Vec<usize> = (0..len).map(|_| rng.gen_range(topics..config.vocab)).collect();
        let slot = rng.gen_range(0..len);
        if label == 1 {
            words[slot] = topic;
        } else if config.distractors {
            let other = (topic + rng.gen_range(1..topics)) % topics;
            words[slot] = other;
        }
        records.push(Record {
            context: synth_word(topic),
            target: words.into_iter().map(synth_word).collect::<Vec<_>>().join(" "),
            label,
            group: format!("g{}", i % config.groups),
        });
    }
    Ok(Dataset {
        name: "synth".into(),
        records,
        label_names: vec!["0".into(), "1".into()],
    })
}
