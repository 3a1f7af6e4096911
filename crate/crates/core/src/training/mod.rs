//! Fine-tuning experiments, pretraining stages, losses and gradient checks.

pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod pretrain;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{mix64, Manifest, Split, TripletRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, parse_output, param_mse, EvalConfig};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Group, Model, SlotInput};
use crate::prompting::{break_tokens, encode_example, extended_special_tokens, register_special_tokens, PromptStyle, TokenVocab};
use losses::{heuristic_aux, lm_loss, mse_aux, teacher_forced_argmax, OverlapPenalty};
use optim::{AdamW, Schedule};

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const META_FILE: &str = "meta.txt";
pub const BEST_CKPT: &str = "ckpt_best.bin";
pub const LAST_CKPT: &str = "ckpt_last.bin";

const ORDER_SALT: u64 = 0x0bde_0000_0000_0009;
const PAIRING_SALT: u64 = 0x0bde_0000_0000_000a;
const TEMPLATE_SALT: u64 = 0x0bde_0000_0000_000b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    /// Language-model loss only.
    One,
    /// Plus the value MSE surrogate.
    Two,
    /// Plus the three-part heuristic loss.
    Three,
    /// `<break>` between modalities, registered as a special token.
    Four,
    /// Like `Four`, also registering image tags and op names.
    FourX,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::One,
        Experiment::Two,
        Experiment::Three,
        Experiment::Four,
        Experiment::FourX,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::One => "1",
            Experiment::Two => "2",
            Experiment::Three => "3",
            Experiment::Four => "4",
            Experiment::FourX => "4x",
        }
    }

    pub fn prompt_style(self) -> PromptStyle {
        match self {
            Experiment::Four | Experiment::FourX => PromptStyle::Break,
            _ => PromptStyle::Plain,
        }
    }

    pub fn special_tokens(self) -> Vec<&'static str> {
        match self {
            Experiment::Four => break_tokens(),
            Experiment::FourX => extended_special_tokens(),
            _ => Vec::new(),
        }
    }

    /// Experiment 3 keeps its heuristic detached by default; experiment 2's
    /// surrogate carries gradient by default.
    pub fn default_aux_detached(self) -> bool {
        !matches!(self, Experiment::Two)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}` (expected 1, 2, 3, 4 or 4x)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub weight_decay: f64,
    pub aux_weight: f64,
    /// `None` picks the experiment's default.
    pub aux_detached: Option<bool>,
    pub overlap: OverlapPenalty,
    /// Train every group instead of the projection alone.
    pub unfrozen: bool,
    /// Learning-rate multiplier for the pretrained groups when unfrozen; the
    /// freshly initialized projection always gets the full rate.
    pub pretrained_lr_scale: f64,
    pub seed: u64,
    /// Validate on at most this many records (all when `None`).
    pub val_limit: Option<usize>,
    pub eval_threads: usize,
    pub max_new: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::One,
            epochs: 10,
            batch_size: 2,
            warmup: 200,
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            weight_decay: 0.01,
            aux_weight: 1.0,
            aux_detached: None,
            overlap: OverlapPenalty::Ratio,
            unfrozen: false,
            pretrained_lr_scale: 0.1,
            seed: 0,
            val_limit: None,
            eval_threads: 1,
            max_new: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn aux_detached(&self) -> bool {
        self.aux_detached.unwrap_or(self.experiment.default_aux_detached())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be a positive even number for the 50/50 command split",
                self.batch_size
            )));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config("learning rates must satisfy 0 <= floor <= peak, peak > 0".into()));
        }
        if !(self.pretrained_lr_scale > 0.0 && self.pretrained_lr_scale <= 1.0) {
            return Err(Error::Config("pretrained_lr_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("experiment", self.experiment.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup", self.warmup.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("floor_lr", self.floor_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("aux_weight", self.aux_weight.to_string()),
            ("aux_detached", self.aux_detached().to_string()),
            ("overlap_penalty", self.overlap.as_str().to_string()),
            ("unfrozen", self.unfrozen.to_string()),
            ("pretrained_lr_scale", self.pretrained_lr_scale.to_string()),
            ("seed", self.seed.to_string()),
            ("val_limit", self.val_limit.map_or("all".into(), |v| v.to_string())),
            ("eval_threads", self.eval_threads.to_string()),
            ("max_new", self.max_new.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One optimizer step, averaged over its batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lm_loss: f64,
    pub aux: f64,
    pub aux_c1: f64,
    pub aux_c2: f64,
    pub aux_c3: f64,
    pub total_loss: f64,
    pub lr: f64,
    /// Cumulative within the epoch.
    pub with_command: usize,
    pub without_command: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    pub epoch: usize,
    pub accuracy: f64,
    pub mse: f64,
}

/// Index of the best validation: highest accuracy, then lowest MSE, then
/// earliest step.
pub fn select_best(vals: &[ValRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in vals.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &vals[b];
                v.accuracy > cur.accuracy
                    || (v.accuracy == cur.accuracy && v.mse < cur.mse)
                    || (v.accuracy == cur.accuracy && v.mse == cur.mse && v.step < cur.step)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    /// Checksums of each group before and after training.
    pub checksums_before: BTreeMap<Group, String>,
    pub checksums_after: BTreeMap<Group, String>,
}

fn checksums(model: &Model<f32>) -> BTreeMap<Group, String> {
    Group::ALL.iter().map(|&g| (g, model.params.group_checksum(g))).collect()
}

/// Prepares model and vocabulary for an experiment: freeze flags and any
/// special tokens it registers.
pub fn prepare(cfg: &ExperimentConfig, init: &Checkpoint) -> Result<(Model<f32>, TokenVocab)> {
    let mut model = init.model.clone();
    model.config.freeze_vision = !cfg.unfrozen;
    model.config.freeze_lm = !cfg.unfrozen;
    let specials = cfg.experiment.special_tokens();
    if specials.is_empty() {
        return Ok((model, init.vocab.clone()));
    }
    let (vocab, inits) = register_special_tokens(&init.vocab, &specials)?;
    model.add_special_tokens(vocab.len(), &inits)?;
    Ok((model, vocab))
}

struct SampleLosses {
    lm: f64,
    aux: f64,
    c: [f64; 3],
}

/// Fine-tunes `init` on the manifest's train split, validating after each
/// epoch.
pub fn train(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    init: &Checkpoint,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_records: Vec<&TripletRecord> = manifest.split(Split::Train).collect();
    let mut val_records: Vec<&TripletRecord> = manifest.split(Split::Val).collect();
    if let Some(limit) = cfg.val_limit {
        val_records.truncate(limit);
    }
    if train_records.len() < cfg.batch_size || val_records.is_empty() {
        return Err(Error::Config("manifest needs a train split of at least one batch and a non-empty val split".into()));
    }
    let (mut model, vocab) = prepare(cfg, init)?;
    let style = cfg.experiment.prompt_style();
    let frozen: Vec<Group> = Group::ALL.into_iter().filter(|&g| model.config.group_frozen(g)).collect();
    let checksums_before = checksums(&model);

    // frozen encoder: encode each image once
    let mut encoded: HashMap<&str, [Vec<f32>; 2]> = HashMap::new();
    if model.config.freeze_vision {
        for r in &train_records {
            encoded.insert(&r.id, [model.encode_image(&r.source), model.encode_image(&r.edited)]);
        }
    }

    let per_epoch = train_records.len() / cfg.batch_size;
    let schedule = Schedule {
        warmup: cfg.warmup,
        peak: cfg.peak_lr,
        floor: cfg.floor_lr,
        total: per_epoch * cfg.epochs,
    };
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut grads = model.params.zeros_like();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ ORDER_SALT));
    let mut pair_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ PAIRING_SALT));
    let mut template_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ TEMPLATE_SALT));
    let eval_cfg = EvalConfig {
        style,
        seed: cfg.seed,
        max_new: cfg.max_new,
        threads: cfg.eval_threads,
    };
    let digit_ids = vocab.digit_ids();
    let v = model.config.vocab_size;
    let detached = cfg.aux_detached();

    let mut steps = Vec::new();
    let mut validations: Vec<ValRecord> = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_records.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut with_cmd, mut without_cmd) = (0, 0);
        // a trailing partial batch is dropped so every batch splits evenly
        for batch in order.chunks_exact(cfg.batch_size) {
            let mut flags: Vec<bool> = (0..cfg.batch_size).map(|i| i < cfg.batch_size / 2).collect();
            flags.shuffle(&mut pair_rng);
            grads.fill_zero();
            let mut sums = SampleLosses { lm: 0.0, aux: 0.0, c: [0.0; 3] };
            for (&idx, &use_command) in batch.iter().zip(&flags) {
                let record = train_records[idx];
                if use_command {
                    with_cmd += 1;
                } else {
                    without_cmd += 1;
                }
                let command = use_command.then_some(record.command.as_str());
                let (sample, _) = encode_example(&vocab, command, &record.answer_text(), style, model.config.k, &mut template_rng)?;
                let input = match encoded.get(record.id.as_str()) {
                    Some(e) => SlotInput::Encoded([&e[0], &e[1]]),
                    None => SlotInput::Images([&record.source, &record.edited]),
                };
                let trace = model.forward_trace(&sample.token_ids, &sample.image_slots, input)?;
                let logits = trace.logits();
                let (lm, mut dlogits) = lm_loss(logits, v, &sample.token_ids, &sample.loss_mask)?;
                let mut add_grad = |g: &[f32], w: f64| {
                    for (d, x) in dlogits.iter_mut().zip(g) {
                        *d += x * w as f32;
                    }
                };
                let mut losses = SampleLosses { lm, aux: 0.0, c: [0.0; 3] };
                match cfg.experiment {
                    Experiment::Two if !detached => {
                        let m = mse_aux(logits, v, &sample.value_digit_positions, &record.spec, &digit_ids)?;
                        add_grad(&m.grad, cfg.aux_weight);
                        losses.aux = m.loss;
                    }
                    Experiment::Two => {
                        let ids = teacher_forced_argmax(logits, v, sample.prompt_len, sample.len(), vocab.eos());
                        losses.aux = param_mse(&parse_output(&vocab.detokenize(&ids)), &record.spec);
                    }
                    Experiment::Three => {
                        let ids = teacher_forced_argmax(logits, v, sample.prompt_len, sample.len(), vocab.eos());
                        let h = heuristic_aux(&parse_output(&vocab.detokenize(&ids)), &record.spec, cfg.overlap);
                        losses.c = [h.c1, h.c2, h.c3];
                        losses.aux = h.total;
                        if !detached {
                            let m = mse_aux(logits, v, &sample.value_digit_positions, &record.spec, &digit_ids)?;
                            losses.c[2] = m.loss;
                            losses.aux = (h.c1 + h.c2 + m.loss) / 3.0;
                            add_grad(&m.grad, cfg.aux_weight / 3.0);
                        }
                    }
                    _ => {}
                }
                let total = losses.lm + cfg.aux_weight * losses.aux;
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("loss {total} on record {}", record.id),
                    });
                }
                let scale = 1.0 / cfg.batch_size as f32;
                dlogits.iter_mut().for_each(|d| *d *= scale);
                model.backward(&trace, &dlogits, &mut grads);
                sums.lm += losses.lm;
                sums.aux += losses.aux;
                for (s, c) in sums.c.iter_mut().zip(losses.c) {
                    *s += c;
                }
            }
            let lr = schedule.lr(step);
            let scale = cfg.pretrained_lr_scale;
            opt.step_scaled(&mut model.params, &grads, lr, |g| match g {
                _ if frozen.contains(&g) => 0.0,
                Group::Projection => 1.0,
                _ => scale,
            });
            if model.params.tensors.iter().any(|t| t.data.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite parameter after update".into(),
                });
            }
            let b = cfg.batch_size as f64;
            steps.push(StepRecord {
                step,
                epoch,
                lm_loss: sums.lm / b,
                aux: sums.aux / b,
                aux_c1: sums.c[0] / b,
                aux_c2: sums.c[1] / b,
                aux_c3: sums.c[2] / b,
                total_loss: (sums.lm + cfg.aux_weight * sums.aux) / b,
                lr,
                with_command: with_cmd,
                without_command: without_cmd,
            });
            step += 1;
            if step % 200 == 0 {
                let recent = &steps[steps.len().saturating_sub(200)..];
                let mean = recent.iter().map(|s| s.total_loss).sum::<f64>() / recent.len() as f64;
                progress(&format!("epoch {epoch} step {step} loss {mean:.4} lr {lr:.2e}"));
            }
        }
        let (report, _) = evaluate(&model, &vocab, &val_records, &eval_cfg)?;
        let all = report.partition("all").expect("all partition");
        let val = ValRecord {
            step,
            epoch,
            accuracy: all.accuracy.unwrap_or(0.0),
            mse: all.mse.unwrap_or(0.0),
        };
        progress(&format!(
            "epoch {epoch} validation accuracy {:.4} mse {:.4}",
            val.accuracy, val.mse
        ));
        validations.push(val.clone());
        if select_best(&validations) == Some(validations.len() - 1) {
            best = Some(snapshot(&model, &vocab, cfg, step, Some(&val)));
        }
    }
    let last_val = validations.last().cloned();
    let last = snapshot(&model, &vocab, cfg, step, last_val.as_ref());
    Ok(TrainOutcome {
        best: best.expect("at least one validation ran"),
        last,
        steps,
        validations,
        checksums_before,
        checksums_after: checksums(&model),
    })
}

fn snapshot(model: &Model<f32>, vocab: &TokenVocab, cfg: &ExperimentConfig, step: usize, val: Option<&ValRecord>) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), "train".into());
    meta.insert("experiment".into(), cfg.experiment.to_string());
    meta.insert("prompt_style".into(), cfg.experiment.prompt_style().as_str().into());
    if let Some(v) = val {
        meta.insert("epoch".into(), v.epoch.to_string());
        meta.insert("val_accuracy".into(), format!("{:.6}", v.accuracy));
        meta.insert("val_mse".into(), format!("{:.6}", v.mse));
    }
    Checkpoint {
        model: model.clone(),
        vocab: vocab.clone(),
        step,
        meta,
    }
}

pub const RUNLOG_HEADER: &str =
    "kind,step,epoch,lm_loss,aux,aux_c1,aux_c2,aux_c3,total_loss,lr,with_command,without_command,val_accuracy,val_mse";

/// CSV with one `train` row per step and one `val` row per epoch.
pub fn render_runlog(steps: &[StepRecord], vals: &[ValRecord]) -> String {
    let mut out = String::from(RUNLOG_HEADER);
    out.push('\n');
    let mut vi = 0;
    for s in steps {
        while vi < vals.len() && vals[vi].step <= s.step {
            push_val(&mut out, &vals[vi]);
            vi += 1;
        }
        let _ = writeln!(
            out,
            "train,{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{},{},,",
            s.step, s.epoch, s.lm_loss, s.aux, s.aux_c1, s.aux_c2, s.aux_c3, s.total_loss, s.lr, s.with_command, s.without_command
        );
    }
    for v in &vals[vi..] {
        push_val(&mut out, v);
    }
    out
}

fn push_val(out: &mut String, v: &ValRecord) {
    let _ = writeln!(out, "val,{},{},,,,,,,,,,{:.6},{:.6}", v.step, v.epoch, v.accuracy, v.mse);
}

/// Parses the `val` rows of a run log, for re-deriving the best checkpoint.
pub fn parse_runlog_validations(text: &str) -> Result<Vec<ValRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.first() != Some(&"val") {
            continue;
        }
        let bad = || Error::Config(format!("run log line {}: malformed val row", i + 1));
        if f.len() != 14 {
            return Err(bad());
        }
        out.push(ValRecord {
            step: f[1].parse().map_err(|_| bad())?,
            epoch: f[2].parse().map_err(|_| bad())?,
            accuracy: f[12].parse().map_err(|_| bad())?,
            mse: f[13].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Writes checkpoints, run log, config and metadata into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &TrainOutcome, extra_config: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    outcome.best.save(&dir.join(BEST_CKPT))?;
    outcome.last.save(&dir.join(LAST_CKPT))?;
    write(RUNLOG_FILE, render_runlog(&outcome.steps, &outcome.validations))?;
    let mut pairs = cfg.to_pairs();
    pairs.extend(outcome.best.model.config.to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
    pairs.extend_from_slice(extra_config);
    write(CONFIG_FILE, render_pairs(&pairs))?;
    let mut meta = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("train_threads".to_string(), "1".to_string()),
        ("eval_threads".to_string(), cfg.eval_threads.to_string()),
        ("version".to_string(), format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))),
        ("best_step".to_string(), outcome.best.step.to_string()),
    ];
    for (g, sum) in &outcome.checksums_after {
        meta.push((format!("checksum.{}", g.as_str()), sum.clone()));
    }
    write(META_FILE, render_pairs(&meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(step: usize, accuracy: f64, mse: f64) -> ValRecord {
        ValRecord { step, epoch: step, accuracy, mse }
    }

    #[test]
    fn best_selection_rule() {
        assert_eq!(select_best(&[]), None);
        let v = [val(1, 0.5, 0.2), val(2, 0.7, 0.3), val(3, 0.7, 0.1), val(4, 0.7, 0.1)];
        assert_eq!(select_best(&v), Some(2));
    }

    #[test]
    fn runlog_round_trips_validations() {
        let steps: Vec<StepRecord> = (0..4)
            .map(|i| StepRecord {
                step: i,
                epoch: i / 2 + 1,
                lm_loss: 1.0,
                aux: 0.0,
                aux_c1: 0.0,
                aux_c2: 0.0,
                aux_c3: 0.0,
                total_loss: 1.0,
                lr: 1e-3,
                with_command: i % 2 + 1,
                without_command: i % 2 + 1,
            })
            .collect();
        let vals = vec![val(2, 0.5, 0.25), val(4, 0.75, 0.125)];
        let text = render_runlog(&steps, &vals);
        assert_eq!(text.lines().count(), 1 + 4 + 2);
        assert_eq!(parse_runlog_validations(&text).unwrap(), vals);
        assert!(text.lines().all(|l| l.split(',').count() == 14));
    }

    #[test]
    fn experiment_ids() {
        for e in Experiment::ALL {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
        assert!("5".parse::<Experiment>().is_err());
        assert_eq!(Experiment::Four.special_tokens().len(), 1);
        assert_eq!(Experiment::FourX.special_tokens().len(), 8);
        assert!(ExperimentConfig { batch_size: 3, ..Default::default() }.validate().is_err());
        assert_eq!(ExperimentConfig::default().epochs, 10);
    }
}
