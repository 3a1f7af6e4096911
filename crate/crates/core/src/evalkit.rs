//! Parsing decoded answers, the accuracy and zero-fill MSE metrics, paired
//! with/without-command evaluation and the report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::LazyLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_value, mix64, TripletRecord};
use crate::error::{Error, Result};
use crate::imgedit::{EditSpec, OpKind};
use crate::model::{Model, SlotInput};
use crate::prompting::{assemble_prompt, PromptSet, PromptStyle, TokenVocab};

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Table columns, in order.
pub const TABLE_COLUMNS: [&str; 6] = [
    "Accuracy(Average)↑",
    "MSE(Average)↓",
    "Accuracy(With Command)↑",
    "MSE(With Command)↓",
    "Accuracy(Without Command)↑",
    "MSE(Without Command)↓",
];

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0003;

static OP_WITH_VALUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(brightness|contrast|saturation|hue|gamma) with value (-?[0-9]\.[0-9]{2})").expect("valid regex")
});
static OP_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(brightness|contrast|saturation|hue|gamma)\b").expect("valid regex"));
static VALUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?[0-9]\.[0-9]{2}").expect("valid regex"));

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPrediction {
    /// First occurrence of each op name, in text order.
    pub ops: Vec<(OpKind, f64)>,
    pub malformed: bool,
    pub raw: String,
}

impl ParsedPrediction {
    pub fn value_of(&self, kind: OpKind) -> Option<f64> {
        self.ops.iter().find(|(k, _)| *k == kind).map(|&(_, v)| v)
    }
}

/// Extracts `(op, value)` pairs. Malformed when an op name lacks a
/// well-formed value or a value has no op name in front of it.
pub fn parse_output(text: &str) -> ParsedPrediction {
    let mut ops: Vec<(OpKind, f64)> = Vec::new();
    let mut claimed_names = Vec::new();
    let mut claimed_values = Vec::new();
    for cap in OP_WITH_VALUE.captures_iter(text) {
        let name = cap.get(1).expect("group 1");
        let value = cap.get(2).expect("group 2");
        claimed_names.push(name.start());
        claimed_values.push(value.start());
        let kind: OpKind = name.as_str().parse().expect("regex only matches known ops");
        let v: f64 = value.as_str().parse().expect("regex only matches numbers");
        if !ops.iter().any(|(k, _)| *k == kind) {
            ops.push((kind, v));
        }
    }
    let stray_name = OP_NAME.find_iter(text).any(|m| !claimed_names.contains(&m.start()));
    let stray_value = VALUE.find_iter(text).any(|m| !claimed_values.contains(&m.start()));
    ParsedPrediction {
        ops,
        malformed: stray_name || stray_value,
        raw: text.to_string(),
    }
}

/// Share of ground-truth op names present in the prediction.
pub fn accuracy(pred: &ParsedPrediction, gt: &EditSpec) -> f64 {
    let hit = gt.ops().iter().filter(|op| pred.value_of(op.kind).is_some()).count();
    hit as f64 / gt.len() as f64
}

/// Mean squared value error over ground-truth ops; a missing prediction
/// counts as 0 and extra predicted ops are ignored.
pub fn param_mse(pred: &ParsedPrediction, gt: &EditSpec) -> f64 {
    let sum: f64 = gt
        .ops()
        .iter()
        .map(|op| (pred.value_of(op.kind).unwrap_or(0.0) - op.value).powi(2))
        .sum();
    sum / gt.len() as f64
}

/// Predicted ops whose names are absent from the ground truth.
pub fn spurious_count(pred: &ParsedPrediction, gt: &EditSpec) -> usize {
    pred.ops.iter().filter(|(k, _)| gt.value_of(*k).is_none()).count()
}

/// Bucket label for a command of `words` whitespace-separated words.
pub fn length_bucket(words: usize) -> &'static str {
    match words {
        0 => "len:0",
        1..=4 => "len:1-4",
        5..=8 => "len:5-8",
        _ => "len:9+",
    }
}

pub const PARTITIONS: [&str; 7] = ["all", "with_command", "without_command", "len:0", "len:1-4", "len:5-8", "len:9+"];

/// One scored decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub record_id: String,
    pub uses_command: bool,
    pub template_id: u8,
    pub command_words: usize,
    pub raw: String,
    pub ops: Vec<(String, String)>,
    pub gt: Vec<(String, String)>,
    pub accuracy: f64,
    pub mse: f64,
    pub malformed: bool,
    pub truncated: bool,
    pub spurious: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub name: String,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub malformed: usize,
    /// Mean number of predicted ops absent from the ground truth; diagnostic only.
    pub spurious_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub partitions: Vec<PartitionMetrics>,
    pub meta: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn partition(&self, name: &str) -> Option<&PartitionMetrics> {
        self.partitions.iter().find(|p| p.name == name)
    }

    /// Table row: accuracy/MSE for average, with and without command.
    pub fn table_row(&self) -> [Option<f64>; 6] {
        let get = |n: &str| self.partition(n).cloned();
        let [a, w, wo] = ["all", "with_command", "without_command"].map(get);
        let acc = |p: &Option<PartitionMetrics>| p.as_ref().and_then(|p| p.accuracy);
        let mse = |p: &Option<PartitionMetrics>| p.as_ref().and_then(|p| p.mse);
        [acc(&a), mse(&a), acc(&w), mse(&w), acc(&wo), mse(&wo)]
    }

    pub fn malformed_rate(&self) -> f64 {
        match self.partition("all") {
            Some(p) if p.count > 0 => p.malformed as f64 / p.count as f64,
            _ => 0.0,
        }
    }
}

/// Aggregates per-sample results into the fixed partitions.
pub fn aggregate(samples: &[SamplePrediction], meta: BTreeMap<String, String>) -> MetricsReport {
    let partitions = PARTITIONS
        .iter()
        .map(|&name| {
            let members: Vec<&SamplePrediction> = samples
                .iter()
                .filter(|s| match name {
                    "all" => true,
                    "with_command" => s.uses_command,
                    "without_command" => !s.uses_command,
                    bucket => length_bucket(s.command_words) == bucket,
                })
                .collect();
            let n = members.len();
            let mean = |f: &dyn Fn(&SamplePrediction) -> f64| {
                (n > 0).then(|| members.iter().map(|s| f(s)).sum::<f64>() / n as f64)
            };
            PartitionMetrics {
                name: name.to_string(),
                count: n,
                accuracy: mean(&|s| s.accuracy),
                mse: mean(&|s| s.mse),
                malformed: members.iter().filter(|s| s.malformed).count(),
                spurious_mean: mean(&|s| s.spurious as f64),
            }
        })
        .collect();
    MetricsReport { partitions, meta }
}

/// Scores one decoded text against a record.
pub fn score(record: &TripletRecord, uses_command: bool, template_id: u8, text: &str, truncated: bool) -> SamplePrediction {
    let parsed = parse_output(text);
    SamplePrediction {
        record_id: record.id.clone(),
        uses_command,
        template_id,
        command_words: if uses_command { record.command.split_whitespace().count() } else { 0 },
        raw: text.to_string(),
        ops: parsed.ops.iter().map(|(k, v)| (k.name().to_string(), format_value(*v))).collect(),
        gt: record
            .spec
            .ops()
            .iter()
            .map(|op| (op.kind.name().to_string(), format_value(op.value)))
            .collect(),
        accuracy: accuracy(&parsed, &record.spec),
        mse: param_mse(&parsed, &record.spec),
        malformed: parsed.malformed,
        truncated,
        spurious: spurious_count(&parsed, &record.spec),
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub style: PromptStyle,
    pub seed: u64,
    pub max_new: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            style: PromptStyle::Plain,
            seed: 0,
            max_new: 64,
            threads: 1,
        }
    }
}

/// Decodes one prompt for a record; returns (template id, text, truncated).
pub fn predict(
    model: &Model<f32>,
    vocab: &TokenVocab,
    record: &TripletRecord,
    uses_command: bool,
    config: &EvalConfig,
) -> Result<(u8, String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ EVAL_SALT ^ record.seed) ^ uses_command as u64);
    let command = uses_command.then_some(record.command.as_str());
    let (prompt, template_id) = PromptSet::builtin().select_and_render(command, config.style, &mut rng);
    let (prefix, slots) = assemble_prompt(vocab, &vocab.tokenize(&prompt), model.config.k)?;
    let decoded = model.greedy_decode(
        &prefix,
        &slots,
        SlotInput::Images([&record.source, &record.edited]),
        vocab.eos(),
        config.max_new,
    )?;
    Ok((template_id, vocab.detokenize(&decoded.tokens), decoded.truncated))
}

/// Evaluates every record twice (with and without its command). Results come
/// back in record order regardless of thread count.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &TokenVocab,
    records: &[&TripletRecord],
    config: &EvalConfig,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let threads = config.threads.max(1);
    let chunk = records.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<SamplePrediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut out = Vec::with_capacity(part.len() * 2);
                    for record in part {
                        for uses_command in [true, false] {
                            let (tid, text, truncated) = predict(model, vocab, record, uses_command, config)?;
                            out.push(score(record, uses_command, tid, &text, truncated));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut samples = Vec::with_capacity(records.len() * 2);
    for r in results {
        samples.extend(r?);
    }
    let mut meta = BTreeMap::new();
    meta.insert("test_protocol".into(), "paired: each record once with and once without its command".into());
    meta.insert("records".into(), records.len().to_string());
    meta.insert("prompt_style".into(), config.style.as_str().into());
    meta.insert("eval_seed".into(), config.seed.to_string());
    Ok((aggregate(&samples, meta), samples))
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", v * 100.0))
}

fn fmt_mse(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn fmt_cell(col: usize, v: Option<f64>) -> String {
    if col % 2 == 0 {
        fmt_acc(v)
    } else {
        fmt_mse(v)
    }
}

/// Plain-text report: the six-column summary, then per-partition detail.
pub fn render_report_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&render_table(&[("model".to_string(), report.table_row())], false));
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>9} {:>8} {:>9} {:>9}",
        "partition", "n", "accuracy", "mse", "malformed", "spurious"
    );
    for p in &report.partitions {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>9} {:>8} {:>9} {:>9}",
            p.name,
            p.count,
            fmt_acc(p.accuracy),
            fmt_mse(p.mse),
            p.malformed,
            p.spurious_mean.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    out.push('\n');
    for (k, v) in &report.meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    out
}

/// Index of the best value per column: highest accuracy, lowest MSE; the
/// earliest row wins ties.
pub fn best_per_column(rows: &[[Option<f64>; 6]]) -> [Option<usize>; 6] {
    std::array::from_fn(|col| {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in rows.iter().enumerate() {
            // compare on printed precision so the marking matches what is shown
            let Some(v) = row[col] else { continue };
            let shown: f64 = fmt_cell(col, Some(v)).parse().expect("formatted number");
            let better = match best {
                None => true,
                Some((_, b)) if col % 2 == 0 => shown > b,
                Some((_, b)) => shown < b,
            };
            if better {
                best = Some((i, shown));
            }
        }
        best.map(|(i, _)| i)
    })
}

/// Aligned table with the six metric columns; with `mark_best`, the best
/// cell of each column gets a trailing `*`.
pub fn render_table(rows: &[(String, [Option<f64>; 6])], mark_best: bool) -> String {
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).chain([3]).max().unwrap_or(3);
    let best = if mark_best {
        best_per_column(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>())
    } else {
        [None; 6]
    };
    let widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.chars().count()).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "run");
    for (c, w) in TABLE_COLUMNS.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (i, (label, row)) in rows.iter().enumerate() {
        let _ = write!(out, "{label:<label_w$}");
        for (col, w) in widths.iter().enumerate() {
            let mut cell = fmt_cell(col, row[col]);
            cell.push(if best[col] == Some(i) { '*' } else { ' ' });
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Writes `report.txt`, `report.json` and `predictions.jsonl`.
pub fn write_report(dir: &Path, report: &MetricsReport, samples: &[SamplePrediction]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write(REPORT_TXT, render_report_text(report))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(REPORT_JSON, json + "\n")?;
    let mut lines = String::new();
    for s in samples {
        lines.push_str(&serde_json::to_string(s).expect("prediction serializes"));
        lines.push('\n');
    }
    write(PREDICTIONS_FILE, lines)
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_predictions(dir: &Path) -> Result<Vec<SamplePrediction>> {
    let path = dir.join(PREDICTIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ManifestLine {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
