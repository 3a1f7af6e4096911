use std::fmt;
use std::path::{Path, PathBuf};

use rdlab::dataset::{self, GenConfig, Manifest, Split, TripletRecord};
use rdlab::evalkit::{self, EvalConfig};
use rdlab::model::checkpoint::{probe_hex, Checkpoint};
use rdlab::prompting::{PromptStyle, TokenVocab};
use rdlab::training::pretrain::{pretrain_checkpoint, PretrainPlan};
use rdlab::training::{self, Experiment, ExperimentConfig};
use rdlab::Error;

use crate::config::RunConfig;

pub const GEN_CONFIG_FILE: &str = "gen_config.txt";
pub const EVAL_CONFIG_FILE: &str = "eval_config.txt";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Malformed { rate: f64, limit: f64 },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Malformed { rate, limit } => {
                write!(f, "malformed-output rate {rate:.3} exceeds {limit:.3}; the decode path looks broken")
            }
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Malformed { .. } => 5,
            CliError::Core(Error::Divergence { .. }) => 4,
            CliError::Core(e) if e.is_data_integrity() => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn echo(command: &str, cfg: &RunConfig) {
    println!("# {command} effective config");
    print!("{}", cfg.render());
}

fn write_text(path: &Path, body: &str) -> CliResult {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn dir_is_nonempty(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> CliResult {
    echo("gen-data", cfg);
    let out = PathBuf::from(cfg.required("out")?);
    if dir_is_nonempty(&out) && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())).into());
    }
    let gen = if cfg.get::<bool>("single_op")? { GenConfig::single_op() } else { GenConfig::default() };
    let manifest = Manifest::generate(cfg.get("seed")?, cfg.get("n")?, &gen)?;
    create_dir(&out)?;
    dataset::write_manifest(&manifest, &out)?;
    write_text(&out.join(GEN_CONFIG_FILE), &cfg.render())?;
    if cfg.get::<bool>("verify")? {
        dataset::read_manifest(&out, true)?;
        println!("verified=ok");
    }
    print!("{}", manifest.summary());
    println!("manifest_hash={}", dataset::manifest_hash(&out)?);
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> CliResult {
    echo("pretrain", cfg);
    let data = PathBuf::from(cfg.required("data")?);
    let out = PathBuf::from(cfg.required("out")?);
    let seed: u64 = cfg.get("seed")?;
    let manifest = dataset::read_manifest(&data, false)?;
    let mut plan = PretrainPlan::for_manifest(&manifest, seed);
    plan.min_vision_images = cfg.get("vision_min_images")?;
    plan.vision.max_epochs = cfg.get("vision_epochs")?;
    plan.vision.batch = cfg.get("vision_batch")?;
    plan.vision.lr = cfg.get("vision_lr")?;
    plan.vision.target_mse = cfg.get("vision_target_mse")?;
    plan.lm.corpus = cfg.get("lm_corpus")?;
    plan.lm.heldout = cfg.get("lm_heldout")?;
    plan.lm.epochs = cfg.get("lm_epochs")?;
    plan.lm.batch = cfg.get("lm_batch")?;
    plan.lm.lr = cfg.get("lm_lr")?;
    plan.lm.warmup = cfg.get("lm_warmup")?;
    let model_config = cfg.model_config(TokenVocab::builtin().len(), seed)?;
    let (ckpt, _, _) = pretrain_checkpoint(&manifest, model_config, &plan, &mut progress)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ckpt.save(&out)?;
    let metrics: String = ckpt.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let sidecar = PathBuf::from(format!("{}.config.txt", out.display()));
    write_text(&sidecar, &format!("{}{}", cfg.render(), metrics))?;
    print!("{metrics}");
    Ok(())
}

fn experiment_config(cfg: &RunConfig) -> CliResult<ExperimentConfig> {
    let experiment: Experiment = cfg.raw("experiment").parse()?;
    let aux_detached = match cfg.raw("aux_detached") {
        "default" => None,
        _ => Some(cfg.get::<bool>("aux_detached")?),
    };
    let ec = ExperimentConfig {
        experiment,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        warmup: cfg.get("warmup")?,
        peak_lr: cfg.get("peak_lr")?,
        floor_lr: cfg.get("floor_lr")?,
        weight_decay: cfg.get("weight_decay")?,
        aux_weight: cfg.get("aux_weight")?,
        aux_detached,
        overlap: cfg.raw("overlap_penalty").parse()?,
        unfrozen: cfg.get("unfrozen")?,
        pretrained_lr_scale: cfg.get("pretrained_lr_scale")?,
        seed: cfg.get("seed")?,
        val_limit: cfg.get_opt("val_limit")?,
        eval_threads: cfg.get("eval_threads")?,
        max_new: cfg.get("max_new")?,
    };
    ec.validate()?;
    Ok(ec)
}

pub fn train(cfg: &RunConfig) -> CliResult {
    let ec = experiment_config(cfg)?;
    echo("train", cfg);
    println!("# resolved\naux_detached={}", ec.aux_detached());
    let data = PathBuf::from(cfg.required("data")?);
    let init_path = PathBuf::from(cfg.required("init")?);
    let out = PathBuf::from(cfg.required("out")?);
    let manifest = dataset::read_manifest(&data, false)?;
    let init = Checkpoint::load_for(&init_path, &TokenVocab::builtin())?;
    let outcome = training::train(&ec, &manifest, &init, &mut progress)?;
    let extra = vec![
        ("data".to_string(), data.display().to_string()),
        ("init".to_string(), init_path.display().to_string()),
        ("prompt_style".to_string(), ec.experiment.prompt_style().as_str().to_string()),
    ];
    training::write_run(&out, &ec, &outcome, &extra)?;
    println!("best_step={}", outcome.best.step);
    if let Some(v) = outcome.validations.iter().find(|v| v.step == outcome.best.step) {
        println!("best_val_accuracy={:.6}\nbest_val_mse={:.6}", v.accuracy, v.mse);
    }
    Ok(())
}

/// The value of `key` in a run directory's `config.txt`.
fn run_config_value(dir: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(dir.join(training::CONFIG_FILE)).ok()?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string())
}

pub fn eval(cfg: &mut RunConfig) -> CliResult {
    let out = PathBuf::from(cfg.required("out")?);
    if cfg.raw("ckpt").is_empty() {
        cfg.set("ckpt", out.join(training::BEST_CKPT).display().to_string())?;
    }
    if cfg.raw("data").is_empty() {
        if let Some(d) = run_config_value(&out, "data") {
            cfg.set("data", d)?;
        }
    }
    echo("eval", cfg);
    let split: Split = cfg.raw("split").parse()?;
    let ckpt = Checkpoint::load(Path::new(cfg.raw("ckpt")))?;
    let manifest = dataset::read_manifest(Path::new(cfg.required("data")?), false)?;
    let mut records: Vec<&TripletRecord> = manifest.split(split).collect();
    if let Some(limit) = cfg.get_opt::<usize>("limit")? {
        records.truncate(limit);
    }
    let style: PromptStyle = ckpt.meta.get("prompt_style").map_or(Ok(PromptStyle::Plain), |s| s.parse())?;
    let eval_cfg = EvalConfig {
        style,
        seed: cfg.get("seed")?,
        max_new: cfg.get("max_new")?,
        threads: cfg.get("threads")?,
    };
    let (mut report, samples) = evalkit::evaluate(&ckpt.model, &ckpt.vocab, &records, &eval_cfg)?;
    report.meta.insert("split".into(), split.to_string());
    if let Some(exp) = ckpt.meta.get("experiment") {
        report.meta.insert("experiment".into(), exp.clone());
    }
    create_dir(&out)?;
    evalkit::write_report(&out, &report, &samples)?;
    write_text(&out.join(EVAL_CONFIG_FILE), &cfg.render())?;
    print!("{}", evalkit::render_report_text(&report));
    let limit: f64 = cfg.get("max_malformed_rate")?;
    let rate = report.malformed_rate();
    if rate > limit {
        return Err(CliError::Malformed { rate, limit });
    }
    Ok(())
}

/// Row label: the run's experiment id, else the directory name.
fn run_label(dir: &Path) -> String {
    match run_config_value(dir, "experiment") {
        Some(e) => format!("Experiment {e}"),
        None => dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
    }
}

pub fn compare(runs: &[PathBuf]) -> CliResult {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let report = evalkit::read_report(dir)?;
        rows.push((run_label(dir), report.table_row()));
    }
    print!("{}", evalkit::render_table(&rows, true));
    Ok(())
}

pub fn probe(path: &Path) -> CliResult {
    let ckpt = Checkpoint::load(path)?;
    println!("{}", probe_hex(&ckpt.model, &ckpt.vocab)?);
    Ok(())
}
