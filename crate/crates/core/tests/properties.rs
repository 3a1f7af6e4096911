use proptest::prelude::*;

use rdlab::dataset::{gen_record, quantize, render_ground_truth, split_assign, split_sizes, GenConfig, Split};
use rdlab::evalkit::{accuracy, param_mse, parse_output, spurious_count};
use rdlab::imgedit::{apply_op, apply_spec, synth_image, EditOp, EditSpec, Image, OpKind};
use rdlab::prompting::TokenVocab;
use rdlab::training::optim::Schedule;

fn op_kind() -> impl Strategy<Value = OpKind> {
    prop::sample::select(OpKind::ALL.to_vec())
}

/// Specs of 1..=3 distinct ops with two-decimal values.
fn spec() -> impl Strategy<Value = EditSpec> {
    (
        Just(OpKind::ALL.to_vec()).prop_shuffle(),
        prop::collection::vec(-100i32..=100, 1..=3),
    )
        .prop_map(|(kinds, cents)| {
            let ops = kinds.iter().zip(&cents).map(|(&k, &c)| EditOp::new(k, c as f64 / 100.0).unwrap()).collect();
            EditSpec::new(ops).unwrap()
        })
}

fn in_unit_range(img: &Image) -> bool {
    img.data().iter().all(|v| (0.0..=1.0).contains(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edits_stay_in_unit_range(seed in any::<u64>(), kind in op_kind(), value in -1.0f64..=1.0) {
        let out = apply_op(&synth_image(seed), &EditOp::new(kind, value).unwrap()).unwrap();
        prop_assert!(in_unit_range(&out));
    }

    #[test]
    fn zero_value_is_identity(seed in any::<u64>(), kind in op_kind()) {
        let img = synth_image(seed);
        prop_assert_eq!(apply_op(&img, &EditOp { kind, value: 0.0 }).unwrap(), img);
    }

    #[test]
    fn out_of_range_values_are_rejected(kind in op_kind(), excess in 1e-6f64..10.0, negative in any::<bool>()) {
        let value = if negative { -1.0 - excess } else { 1.0 + excess };
        prop_assert!(EditOp::new(kind, value).is_err());
        let unchecked = EditOp { kind, value };
        prop_assert!(apply_op(&synth_image(0), &unchecked).is_err());
    }

    #[test]
    fn brightness_is_monotone(seed in any::<u64>(), a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let img = synth_image(seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dark = apply_op(&img, &EditOp::new(OpKind::Brightness, lo).unwrap()).unwrap();
        let light = apply_op(&img, &EditOp::new(OpKind::Brightness, hi).unwrap()).unwrap();
        prop_assert!(dark.data().iter().zip(light.data()).all(|(d, l)| d <= l));
    }

    #[test]
    fn full_desaturation_is_gray(seed in any::<u64>()) {
        let out = apply_op(&synth_image(seed), &EditOp::new(OpKind::Saturation, -1.0).unwrap()).unwrap();
        for px in out.data().chunks_exact(3) {
            prop_assert!((px[0] - px[1]).abs() < 1e-5 && (px[1] - px[2]).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_contrast_is_flat_mid_gray(seed in any::<u64>()) {
        let out = apply_op(&synth_image(seed), &EditOp::new(OpKind::Contrast, -1.0).unwrap()).unwrap();
        prop_assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn rgb8_round_trip_within_half_a_level(seed in any::<u64>(), spec in spec()) {
        let img = apply_spec(&synth_image(seed), &spec).unwrap();
        let back = Image::from_rgb8(&img.to_rgb8()).unwrap();
        let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 0.5 / 255.0 + 1e-6, "worst {}", worst);
    }

    #[test]
    fn ground_truth_text_parses_back_exactly(spec in spec()) {
        let pred = parse_output(&render_ground_truth(&spec));
        prop_assert!(!pred.malformed);
        prop_assert_eq!(accuracy(&pred, &spec), 1.0);
        prop_assert_eq!(param_mse(&pred, &spec), 0.0);
        prop_assert_eq!(spurious_count(&pred, &spec), 0);
        let kinds: Vec<OpKind> = pred.ops.iter().map(|(k, _)| *k).collect();
        let expected: Vec<OpKind> = spec.ops().iter().map(|o| o.kind).collect();
        prop_assert_eq!(kinds, expected);
    }

    #[test]
    fn answers_tokenize_without_unknowns(spec in spec()) {
        let vocab = TokenVocab::builtin();
        let text = render_ground_truth(&spec);
        let ids = vocab.tokenize(&text);
        prop_assert!(!ids.contains(&vocab.unk()));
        prop_assert_eq!(parse_output(&vocab.detokenize(&ids)).ops, parse_output(&text).ops);
    }

    #[test]
    fn scores_are_bounded(gt in spec(), pred in spec()) {
        let parsed = parse_output(&render_ground_truth(&pred));
        let acc = accuracy(&parsed, &gt);
        prop_assert!((0.0..=1.0).contains(&acc));
        // values in [-1, 1] are at most 2 apart
        prop_assert!((0.0..=4.0).contains(&param_mse(&parsed, &gt)));
        prop_assert!(spurious_count(&parsed, &gt) <= pred.len());
    }

    #[test]
    fn records_are_reproducible_and_quantized(seed in any::<u64>(), index in 0u64..1_000_000) {
        let cfg = GenConfig::default();
        let a = gen_record(seed, index, &cfg);
        prop_assert_eq!(&a, &gen_record(seed, index, &cfg));
        for op in a.spec.ops() {
            prop_assert_eq!(op.value, quantize(op.value));
            prop_assert!((cfg.min_abs_value - 0.005..=cfg.max_abs_value + 0.005).contains(&op.value.abs()));
        }
        prop_assert_eq!(a.edited, apply_spec(&a.source, &a.spec).unwrap());
    }

    #[test]
    fn splits_have_the_declared_sizes(n in 10usize..5000, seed in any::<u64>()) {
        let labels = split_assign(n, seed).unwrap();
        let count = |s: Split| labels.iter().filter(|&&l| l == s).count();
        prop_assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), split_sizes(n));
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(
        warmup in 0usize..500,
        extra in 0usize..5000,
        peak in 1e-5f64..1e-2,
        floor_frac in 0.0f64..1.0,
        step in 0usize..10_000,
    ) {
        let s = Schedule { warmup, peak, floor: peak * floor_frac, total: warmup + extra };
        let lr = s.lr(step);
        prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
        if step >= warmup {
            prop_assert!(lr >= s.floor * (1.0 - 1e-12));
            prop_assert!(s.lr(step + 1) <= lr * (1.0 + 1e-12));
        }
    }
}
