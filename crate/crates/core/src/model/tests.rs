use super::checkpoint::{probe_batch, probe_hex, Checkpoint};
use super::*;
use crate::imgedit::{apply_spec, synth_image, EditOp, EditSpec};
use crate::prompting::TokenVocab;

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_vision: 8,
        d_lm: 12,
        lm_layers: 2,
        lm_heads: 3,
        vision_layers: 1,
        vision_heads: 2,
        patch: 8,
        k: 3,
        max_seq: 80,
        vocab_size: vocab,
        mlp_ratio: 2,
        freeze_vision: false,
        freeze_lm: false,
        seed: 5,
    }
}

/// Replaces every parameter with a deterministic value in `[-scale, scale]`.
fn scramble<T: Real>(params: &mut Params<T>, seed: u64, scale: f64) {
    let mut s = seed;
    for t in &mut params.tensors {
        for v in &mut t.data {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            *v = T::of((2.0 * u - 1.0) * scale);
        }
    }
}

fn sample_sequence(vocab: &TokenVocab, k: usize) -> (Vec<TokenId>, [ImageSlot; 2]) {
    let prompt = vocab.tokenize("[IMG1] then [IMG2] what changed ?");
    let (mut ids, slots) = crate::prompting::assemble_prompt(vocab, &prompt, k).unwrap();
    ids.extend(vocab.tokenize("The edit applied hue with value 0.25."));
    (ids, slots)
}

fn images() -> (Image, Image) {
    let a = synth_image(3);
    let spec = EditSpec::new(vec![EditOp::named("contrast", 0.6).unwrap()]).unwrap();
    let b = apply_spec(&a, &spec).unwrap();
    (a, b)
}

fn tiny_model(vocab: &TokenVocab, scale: f64) -> Model<f32> {
    let mut m = Model::new(tiny_config(vocab.len())).unwrap();
    scramble(&mut m.params, 17, scale);
    m
}

#[test]
fn default_encoder_shapes() {
    let vocab = TokenVocab::builtin();
    let model = Model::new(ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })
    .unwrap();
    let img = synth_image(1);
    let tokens = model.encode_image(&img);
    assert_eq!(tokens.len(), 16 * 64);
    assert_eq!(tokens, model.encode_image(&img));
    assert_ne!(tokens, model.encode_image(&synth_image(2)));
    assert_eq!(model.project(&tokens).len(), 16 * 128);
}

#[test]
fn projection_is_affine() {
    let vocab = TokenVocab::builtin();
    let mut model = tiny_model(&vocab, 0.3);
    let c = model.config.clone();
    let x: Vec<f32> = (0..c.k * c.d_vision).map(|i| (i as f32 * 0.37).sin()).collect();
    let zero = model.project(&vec![0.0; x.len()]);
    let px = model.project(&x);
    let x2: Vec<f32> = x.iter().map(|v| v * 2.5).collect();
    let p2 = model.project(&x2);
    for i in 0..px.len() {
        assert!(((p2[i] - zero[i]) - 2.5 * (px[i] - zero[i])).abs() < 1e-5);
    }
    let idx = model.layout.proj_w;
    model.params.tensors[idx].data.iter_mut().for_each(|v| *v = 0.0);
    let bias = model.p(model.layout.proj_b).to_vec();
    for row in model.project(&x).chunks_exact(c.d_lm) {
        assert_eq!(row, bias.as_slice());
    }
}

#[test]
fn logits_are_causal() {
    let vocab = TokenVocab::builtin();
    let model = tiny_model(&vocab, 0.4);
    let (a, b) = images();
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let v = model.config.vocab_size;
    let base = model.forward(&ids, &slots, SlotInput::Images([&a, &b])).unwrap();
    let t = ids.len() - 5;
    let mut perturbed = ids.clone();
    perturbed[t + 1..].reverse();
    perturbed[ids.len() - 1] = vocab.id("gamma").unwrap();
    let other = model.forward(&perturbed, &slots, SlotInput::Images([&a, &b])).unwrap();
    assert_eq!(base[..(t + 1) * v], other[..(t + 1) * v]);
    assert_ne!(base[(t + 1) * v..], other[(t + 1) * v..]);
}

#[test]
fn swapping_images_changes_logits() {
    let vocab = TokenVocab::builtin();
    let model = tiny_model(&vocab, 0.4);
    let (a, b) = images();
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let ab = model.forward(&ids, &slots, SlotInput::Images([&a, &b])).unwrap();
    let ba = model.forward(&ids, &slots, SlotInput::Images([&b, &a])).unwrap();
    assert_ne!(ab, ba);
    // the encoder is shared, so encoded inputs give the same result
    let ea = model.encode_image(&a);
    let eb = model.encode_image(&b);
    let enc = model.forward(&ids, &slots, SlotInput::Encoded([&ea, &eb])).unwrap();
    assert_eq!(ab, enc);
}

#[test]
fn rejects_bad_shapes() {
    let vocab = TokenVocab::builtin();
    let model = tiny_model(&vocab, 0.1);
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let wrong = [ImageSlot { len: 2, ..slots[0] }, slots[1]];
    assert!(matches!(model.forward(&ids, &wrong, SlotInput::Placeholder), Err(Error::Shape(_))));
    let long = vec![vocab.bos(); model.config.max_seq + 1];
    assert!(matches!(model.forward(&long, &slots, SlotInput::Placeholder), Err(Error::Shape(_))));
    let short = vec![0.0f32; 3];
    assert!(matches!(
        model.forward(&ids, &slots, SlotInput::Encoded([&short, &short])),
        Err(Error::Shape(_))
    ));
}

/// Loss = sum(weights * logits), so the logit gradient is `weights`.
fn weighted_loss(model: &Model<f64>, ids: &[TokenId], slots: &[ImageSlot; 2], imgs: [&Image; 2], w: &[f64]) -> f64 {
    let logits = model.forward(ids, slots, SlotInput::Images(imgs)).unwrap();
    logits.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_finite_differences() {
    let vocab = TokenVocab::builtin();
    let mut model: Model<f64> = tiny_model(&vocab, 0.3).cast();
    scramble(&mut model.params, 99, 0.3);
    let (a, b) = images();
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let v = model.config.vocab_size;
    let w: Vec<f64> = (0..ids.len() * v).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let trace = model.forward_trace(&ids, &slots, SlotInput::Images([&a, &b])).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&trace, &w, &mut grads);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for ti in 0..model.params.tensors.len() {
        let len = model.params.tensors[ti].data.len();
        for j in [0, len / 2, len - 1] {
            let orig = model.params.tensors[ti].data[j];
            model.params.tensors[ti].data[j] = orig + h;
            let up = weighted_loss(&model, &ids, &slots, [&a, &b], &w);
            model.params.tensors[ti].data[j] = orig - h;
            let down = weighted_loss(&model, &ids, &slots, [&a, &b], &w);
            model.params.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[j];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
            if (analytic - numeric).abs() > 1e-7 {
                worst = worst.max(rel);
            }
            assert!(rel < 1e-4 || (analytic - numeric).abs() < 1e-7, "{} [{j}]: {analytic} vs {numeric}", model.params.tensors[ti].name);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn frozen_groups_get_no_gradient() {
    let vocab = TokenVocab::builtin();
    let mut model: Model<f64> = tiny_model(&vocab, 0.3).cast();
    model.config.freeze_vision = true;
    model.config.freeze_lm = true;
    let (a, b) = images();
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let w = vec![0.1; ids.len() * model.config.vocab_size];
    let trace = model.forward_trace(&ids, &slots, SlotInput::Images([&a, &b])).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&trace, &w, &mut grads);
    for t in &grads.tensors {
        let nonzero = t.data.iter().any(|&g| g != 0.0);
        assert_eq!(nonzero, t.group == Group::Projection, "{}", t.name);
    }
}

/// Decoding by re-running the full forward at every step.
fn reference_decode(model: &Model<f32>, prefix: &[TokenId], slots: &[ImageSlot; 2], imgs: [&Image; 2], eos: TokenId, max_new: usize) -> Decoded {
    let v = model.config.vocab_size;
    let mut ids = prefix.to_vec();
    let mut tokens = Vec::new();
    loop {
        let logits = model.forward(&ids, slots, SlotInput::Images(imgs)).unwrap();
        let next = argmax(&logits[(ids.len() - 1) * v..]);
        if next == eos {
            return Decoded { tokens, truncated: false };
        }
        if tokens.len() == max_new || ids.len() == model.config.max_seq {
            return Decoded { tokens, truncated: true };
        }
        tokens.push(next);
        ids.push(next);
    }
}

#[test]
fn cached_decode_matches_full_forward() {
    let vocab = TokenVocab::builtin();
    let (a, b) = images();
    for seed in 0..3 {
        let mut model = tiny_model(&vocab, 0.5);
        scramble(&mut model.params, seed, 0.5);
        let (ids, slots) = sample_sequence(&vocab, model.config.k);
        let prefix = &ids[..ids.len() - 6];
        let fast = model.greedy_decode(prefix, &slots, SlotInput::Images([&a, &b]), vocab.eos(), 8).unwrap();
        let slow = reference_decode(&model, prefix, &slots, [&a, &b], vocab.eos(), 8);
        assert_eq!(fast, slow);
        assert!(fast.truncated);
        assert_eq!(fast.tokens.len(), 8);
    }
}

#[test]
fn rigged_head_decodes_nothing() {
    let vocab = TokenVocab::builtin();
    let mut model = tiny_model(&vocab, 0.1);
    let eos = vocab.eos() as usize;
    model.head_bias_mut()[eos] = 1e3;
    let (a, b) = images();
    let (ids, slots) = sample_sequence(&vocab, model.config.k);
    let out = model.greedy_decode(&ids, &slots, SlotInput::Images([&a, &b]), vocab.eos(), 64).unwrap();
    assert_eq!(out, Decoded { tokens: vec![], truncated: false });
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.5f32, 2.0, 2.0, 1.0]), 1);
    assert_eq!(argmax(&[3.0f64, 3.0]), 0);
}

#[test]
fn special_embeddings_average_sources() {
    let vocab = TokenVocab::builtin();
    let mut model = tiny_model(&vocab, 0.5);
    let (v2, inits) = crate::prompting::register_special_tokens(&vocab, &["<break>"]).unwrap();
    model.add_special_tokens(v2.len(), &inits).unwrap();
    assert_eq!(model.config.vocab_size, vocab.len() + 1);
    let init = &inits[0];
    assert_eq!(init.source_ids.len(), 3);
    let new = model.token_embedding(init.id).to_vec();
    for j in 0..new.len() {
        let mean = init
            .source_ids
            .iter()
            .map(|&s| model.token_embedding(s)[j] as f64)
            .sum::<f64>()
            / 3.0;
        assert!((new[j] as f64 - mean).abs() < 1e-6);
    }
    let single = vocab.id("hue").unwrap();
    model.init_special_embedding(init.id, &[single]).unwrap();
    assert_eq!(model.token_embedding(init.id), model.token_embedding(single));
    assert!(matches!(
        model.init_special_embedding(init.id, &[]),
        Err(Error::EmptySourceTokens(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let vocab = TokenVocab::builtin();
    let model = tiny_model(&vocab, 0.3);
    let mut meta = BTreeMap::new();
    meta.insert("val_accuracy".to_string(), "0.5".to_string());
    let ckpt = Checkpoint { model, vocab: vocab.clone(), step: 42, meta };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(probe_hex(&back.model, &vocab).unwrap(), probe_hex(&ckpt.model, &vocab).unwrap());
    let probe = probe_batch(&vocab, ckpt.model.config.k).unwrap();
    assert!(probe.sample.len() <= ckpt.model.config.max_seq);

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 7]), Err(Error::Checkpoint(_))));

    let (other, _) = crate::prompting::register_special_tokens(&vocab, &["<break>"]).unwrap();
    assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::Fingerprint { .. })));
}
