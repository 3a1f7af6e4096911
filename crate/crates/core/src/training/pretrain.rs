//! Stages that produce the weights later held frozen: an autoencoding pass
//! for the image encoder and next-token training of the language model on
//! rendered prompt/answer text.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::losses::lm_loss;
use super::optim::{AdamW, Schedule};
use crate::dataset::{gen_record, gen_text, mix64, render_ground_truth, GenConfig, Manifest, Split};
use crate::error::{Error, Result};
use crate::imgedit::{Image, OpKind, CHANNELS, PIXELS};
use crate::model::nn::{self, softmax_f64};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Group, Model, ModelConfig, ParamTensor, Params, SlotInput};
use crate::prompting::{encode_example, EncodedSample, PromptStyle, TokenId, TokenVocab};

const LM_CORPUS_SALT: u64 = 0x1a7e_c0de_0000_0004;
const LM_HELDOUT_SALT: u64 = 0x1a7e_c0de_0000_0005;
const LM_TEMPLATE_SALT: u64 = 0x1a7e_c0de_0000_0006;
const LM_ORDER_SALT: u64 = 0x1a7e_c0de_0000_0007;
const VISION_SALT: u64 = 0x0b5e_e000_0000_0008;
const VISION_EXTRA_SALT: u64 = 0x0b5e_e000_0000_0009;

#[derive(Clone, Debug, PartialEq)]
pub struct VisionPretrainConfig {
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for VisionPretrainConfig {
    fn default() -> Self {
        VisionPretrainConfig {
            max_epochs: 5,
            batch: 16,
            lr: 1e-3,
            target_mse: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionPretrainReport {
    pub images: usize,
    /// Mean reconstruction MSE per epoch (per pixel channel, in [0,1] units).
    pub epoch_mse: Vec<f64>,
    pub reached_target: bool,
}

impl VisionPretrainReport {
    pub fn final_mse(&self) -> f64 {
        self.epoch_mse.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains the image encoder with a throwaway linear decoder that rebuilds the
/// image from its K tokens. Stops once an epoch's mean MSE is below the
/// target, or after `max_epochs`. Only the vision group changes.
pub fn pretrain_vision(
    model: &mut Model<f32>,
    images: &[Image],
    cfg: &VisionPretrainConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<VisionPretrainReport> {
    if images.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("vision pretraining needs images and a positive batch".into()));
    }
    let c = model.config.clone();
    let feat = c.k * c.d_vision;
    let out = PIXELS * CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ VISION_SALT));
    let dist = Normal::new(0.0, 0.01).expect("positive std");
    let mut decoder = Params {
        tensors: vec![
            ParamTensor {
                name: "decoder.w".into(),
                group: Group::Vision,
                shape: vec![feat, out],
                data: (0..feat * out).map(|_| dist.sample(&mut rng) as f32).collect(),
            },
            ParamTensor {
                name: "decoder.b".into(),
                group: Group::Vision,
                shape: vec![out],
                data: vec![0.0; out],
            },
        ],
    };
    let saved = (c.freeze_vision, c.freeze_lm);
    model.config.freeze_vision = false;
    let mut enc_opt = AdamW::new(&model.params, 0.0);
    let mut dec_opt = AdamW::new(&decoder, 0.0);
    let steps_per_epoch = images.len().div_ceil(cfg.batch);
    let schedule = Schedule {
        warmup: (steps_per_epoch / 2).clamp(1, 100),
        peak: cfg.lr,
        floor: cfg.lr * 0.1,
        total: steps_per_epoch * cfg.max_epochs,
    };
    let mut grads = model.params.zeros_like();
    let mut dgrads = decoder.zeros_like();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = VisionPretrainReport {
        images: images.len(),
        epoch_mse: Vec::new(),
        reached_target: false,
    };
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            grads.fill_zero();
            dgrads.fill_zero();
            for &i in batch {
                let img = &images[i];
                let trace = model.vision_forward(img);
                let recon = nn::linear(&trace.tokens, &decoder.tensors[0].data, Some(&decoder.tensors[1].data), 1, feat, out);
                let scale = 2.0 / (out as f32 * batch.len() as f32);
                let mut drecon = vec![0f32; out];
                let mut se = 0.0f64;
                for (j, (&r, &t)) in recon.iter().zip(img.data()).enumerate() {
                    let diff = r - (t - 0.5);
                    se += (diff as f64).powi(2);
                    drecon[j] = diff * scale;
                }
                let mse = se / out as f64;
                if !mse.is_finite() {
                    model.config.freeze_vision = saved.0;
                    return Err(Error::Divergence {
                        step,
                        detail: "vision reconstruction loss is not finite".into(),
                    });
                }
                sum += mse;
                let (dw, db) = dgrads.tensors.split_at_mut(1);
                let dtokens = nn::linear_backward(
                    &trace.tokens,
                    &decoder.tensors[0].data,
                    &drecon,
                    1,
                    feat,
                    out,
                    Some(&mut dw[0].data),
                    Some(&mut db[0].data),
                    true,
                )
                .expect("dx requested");
                model.vision_backward(&trace, &dtokens, &mut grads);
            }
            let lr = schedule.lr(step);
            enc_opt.step(&mut model.params, &grads, lr, &[Group::Projection, Group::Lm]);
            dec_opt.step(&mut decoder, &dgrads, lr, &[]);
            step += 1;
        }
        let mean = sum / images.len() as f64;
        report.epoch_mse.push(mean);
        progress(&format!("vision epoch {} reconstruction mse {:.5}", epoch + 1, mean));
        if mean < cfg.target_mse {
            report.reached_target = true;
            break;
        }
    }
    model.config.freeze_vision = saved.0;
    model.config.freeze_lm = saved.1;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmPretrainConfig {
    pub corpus: usize,
    pub heldout: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            corpus: 50_000,
            heldout: 1_000,
            epochs: 3,
            batch: 8,
            lr: 1e-3,
            warmup: 200,
            seed: 0,
            gen: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmPretrainReport {
    pub epoch_loss: Vec<f64>,
    /// Per-token cross-entropy on held-out text (nats).
    pub heldout_ce: f64,
    /// Mean probability mass on an op name right after `The edit applied`.
    pub op_name_prob: f64,
}

/// One pretraining sequence: a rendered prompt (with or without command) and
/// its answer. The loss covers every text token; image slots hold their
/// placeholder tokens and are never targets.
pub fn lm_text_sample(
    vocab: &TokenVocab,
    global_seed: u64,
    index: u64,
    gen: &GenConfig,
    k: usize,
    style: PromptStyle,
) -> Result<EncodedSample> {
    let (seed, spec, command) = gen_text(global_seed, index, gen);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ LM_TEMPLATE_SALT));
    let with_command = index % 2 == 0;
    let (mut sample, _) = encode_example(
        vocab,
        with_command.then_some(command.as_str()),
        &render_ground_truth(&spec),
        style,
        k,
        &mut rng,
    )?;
    sample.loss_mask = (0..sample.len()).map(|t| t > 0 && sample.slot_of(t).is_none()).collect();
    Ok(sample)
}

fn sample_loss(model: &Model<f32>, s: &EncodedSample) -> Result<(f64, crate::model::Trace<f32>, Vec<f32>)> {
    let trace = model.forward_trace(&s.token_ids, &s.image_slots, SlotInput::Placeholder)?;
    let (loss, grad) = lm_loss(trace.logits(), model.config.vocab_size, &s.token_ids, &s.loss_mask)?;
    Ok((loss, trace, grad))
}

/// Token-weighted cross-entropy of `samples` under their text masks.
pub fn heldout_ce(model: &Model<f32>, samples: &[EncodedSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let n = s.loss_mask.iter().skip(1).filter(|&&m| m).count();
        let (loss, _, _) = sample_loss(model, s)?;
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Mean probability that the token after `The edit applied` is an op name.
pub fn op_name_probability(model: &Model<f32>, vocab: &TokenVocab, samples: &[EncodedSample]) -> Result<f64> {
    let lead = vocab.tokenize("The edit applied");
    let op_ids: Vec<TokenId> = OpKind::ALL.iter().filter_map(|k| vocab.id(k.name())).collect();
    let mut sum = 0.0;
    for s in samples {
        let mut ids = s.token_ids[..s.prompt_len].to_vec();
        ids.extend_from_slice(&lead);
        let logits = model.forward(&ids, &s.image_slots, SlotInput::Placeholder)?;
        let v = model.config.vocab_size;
        let p = softmax_f64(&logits[(ids.len() - 1) * v..]);
        sum += op_ids.iter().map(|&id| p[id as usize]).sum::<f64>();
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Next-token training of the language model alone on rendered text.
pub fn pretrain_lm(
    model: &mut Model<f32>,
    vocab: &TokenVocab,
    cfg: &LmPretrainConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<LmPretrainReport> {
    if cfg.corpus == 0 || cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("LM pretraining needs a corpus, a batch and epochs".into()));
    }
    let k = model.config.k;
    let corpus_seed = mix64(cfg.seed ^ LM_CORPUS_SALT);
    let heldout_seed = mix64(cfg.seed ^ LM_HELDOUT_SALT);
    let corpus = (0..cfg.corpus as u64)
        .map(|i| lm_text_sample(vocab, corpus_seed, i, &cfg.gen, k, PromptStyle::Plain))
        .collect::<Result<Vec<_>>>()?;
    let heldout = (0..cfg.heldout as u64)
        .map(|i| lm_text_sample(vocab, heldout_seed, i, &cfg.gen, k, PromptStyle::Plain))
        .collect::<Result<Vec<_>>>()?;

    let saved = (model.config.freeze_vision, model.config.freeze_lm);
    model.config.freeze_vision = true;
    model.config.freeze_lm = false;
    let mut opt = AdamW::new(&model.params, 0.01);
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch);
    let schedule = Schedule {
        warmup: cfg.warmup,
        peak: cfg.lr,
        floor: cfg.lr * 0.01,
        total: steps_per_epoch * cfg.epochs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ LM_ORDER_SALT));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grads = model.params.zeros_like();
    let mut epoch_loss = Vec::new();
    let mut step = 0;
    let result = (|| {
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(cfg.batch) {
                grads.fill_zero();
                for &i in batch {
                    let (loss, trace, mut grad) = sample_loss(model, &corpus[i])?;
                    if !loss.is_finite() {
                        return Err(Error::Divergence {
                            step,
                            detail: format!("LM pretraining loss {loss} on corpus item {i}"),
                        });
                    }
                    sum += loss;
                    let scale = 1.0 / batch.len() as f32;
                    grad.iter_mut().for_each(|g| *g *= scale);
                    model.backward(&trace, &grad, &mut grads);
                }
                opt.step(&mut model.params, &grads, schedule.lr(step), &[Group::Vision, Group::Projection]);
                step += 1;
                if step % 500 == 0 {
                    progress(&format!("lm step {step} lr {:.2e}", schedule.lr(step)));
                }
            }
            let mean = sum / corpus.len() as f64;
            epoch_loss.push(mean);
            progress(&format!("lm epoch {} train ce {:.4}", epoch + 1, mean));
        }
        Ok(())
    })();
    model.config.freeze_vision = saved.0;
    model.config.freeze_lm = saved.1;
    result?;
    let heldout_ce = heldout_ce(model, &heldout)?;
    let probe: Vec<EncodedSample> = heldout.iter().take(100).cloned().collect();
    let op_name_prob = op_name_probability(model, vocab, &probe)?;
    progress(&format!("lm held-out ce {heldout_ce:.4}, op-name probability {op_name_prob:.4}"));
    Ok(LmPretrainReport {
        epoch_loss,
        heldout_ce,
        op_name_prob,
    })
}

/// Both pretraining stages, run on a manifest's train split.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPlan {
    pub vision: VisionPretrainConfig,
    pub lm: LmPretrainConfig,
    /// Vision pretraining tops the train-split images up to this count with
    /// freshly generated records.
    pub min_vision_images: usize,
}

impl PretrainPlan {
    /// Defaults with every stage seeded from `seed` and the LM corpus drawn
    /// like the manifest's records.
    pub fn for_manifest(manifest: &Manifest, seed: u64) -> Self {
        PretrainPlan {
            vision: VisionPretrainConfig { seed, ..Default::default() },
            lm: LmPretrainConfig {
                seed,
                gen: corpus_gen_config(manifest),
                ..Default::default()
            },
            min_vision_images: 5000,
        }
    }
}

/// Single-op manifests get single-op text; anything else the default mix.
pub fn corpus_gen_config(manifest: &Manifest) -> GenConfig {
    let hist = manifest.op_count_histogram();
    if hist[1] == 0 && hist[2] == 0 {
        GenConfig::single_op()
    } else {
        GenConfig::default()
    }
}

/// Runs vision then LM pretraining from a fresh model and packages the
/// result with its exit metrics in the checkpoint meta.
pub fn pretrain_checkpoint(
    manifest: &Manifest,
    config: ModelConfig,
    plan: &PretrainPlan,
    progress: &mut dyn FnMut(&str),
) -> Result<(Checkpoint, VisionPretrainReport, LmPretrainReport)> {
    let vocab = TokenVocab::builtin();
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match the builtin vocabulary {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::new(config)?;
    let mut images = Vec::new();
    for r in manifest.split(Split::Train) {
        images.push(r.source.clone());
        images.push(r.edited.clone());
    }
    let extra_seed = mix64(plan.vision.seed ^ VISION_EXTRA_SALT);
    let missing = plan.min_vision_images.saturating_sub(images.len());
    for i in 0..missing.div_ceil(2) as u64 {
        let r = gen_record(extra_seed, i, &plan.lm.gen);
        images.push(r.source);
        images.push(r.edited);
    }
    let vision = pretrain_vision(&mut model, &images, &plan.vision, progress)?;
    let lm = pretrain_lm(&mut model, &vocab, &plan.lm, progress)?;

    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| meta.insert(k.to_string(), v);
    put("stage", "pretrain".into());
    put("vision_images", vision.images.to_string());
    put("vision_epochs_run", vision.epoch_mse.len().to_string());
    put("vision_mse", format!("{:.6}", vision.final_mse()));
    put("vision_reached_target", vision.reached_target.to_string());
    put("lm_train_ce", format!("{:.6}", lm.epoch_loss.last().copied().unwrap_or(f64::NAN)));
    put("lm_heldout_ce", format!("{:.6}", lm.heldout_ce));
    put("lm_op_name_prob", format!("{:.6}", lm.op_name_prob));
    let ckpt = Checkpoint {
        model,
        vocab,
        step: 0,
        meta,
    };
    Ok((ckpt, vision, lm))
}
