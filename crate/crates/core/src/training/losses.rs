//! Masked LM loss, the expected-digit MSE surrogate and the heuristic
//! auxiliary loss. Each differentiable loss returns its logit gradient.

use crate::error::{Error, Result};
use crate::evalkit::{accuracy, param_mse, ParsedPrediction};
use crate::imgedit::EditSpec;
use crate::model::nn::{softmax_f64, Real};
use crate::prompting::{DigitPosition, TokenId};

/// Mean next-token cross-entropy over positions whose target is selected by
/// `mask`: row `t` of `logits` predicts `targets[t + 1]` and counts when
/// `mask[t + 1]` is set. Returns the loss and `d loss / d logits`.
pub fn lm_loss<T: Real>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<(f64, Vec<T>)> {
    let n = targets.len();
    if logits.len() != n * vocab || mask.len() != n {
        return Err(Error::Shape(format!(
            "logits {} / targets {} / mask {} disagree for vocab {vocab}",
            logits.len(),
            n,
            mask.len()
        )));
    }
    let count = mask.iter().skip(1).filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for t in 0..n - 1 {
        if !mask[t + 1] {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let p = softmax_f64(row);
        let target = targets[t + 1] as usize;
        total -= p[target].max(f64::MIN_POSITIVE).ln();
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (k, gk) in g.iter_mut().enumerate() {
            let indicator = if k == target { 1.0 } else { 0.0 };
            *gk = T::of((p[k] - indicator) / count as f64);
        }
    }
    Ok((total / count as f64, grad))
}

/// Result of [`mse_aux`].
#[derive(Clone, Debug, PartialEq)]
pub struct MseAux<T> {
    pub loss: f64,
    /// Reconstructed value per ground-truth op.
    pub predicted: Vec<f64>,
    pub grad: Vec<T>,
}

/// Expected-digit surrogate of the value MSE. For each ground-truth value the
/// three teacher-forced digit positions give expected digits under the
/// softmax; `sign(gt) * (d0 + d1/10 + d2/100)` is compared with the truth.
pub fn mse_aux<T: Real>(
    logits: &[T],
    vocab: usize,
    positions: &[DigitPosition],
    gt: &EditSpec,
    digit_ids: &[TokenId; 10],
) -> Result<MseAux<T>> {
    if positions.is_empty() {
        return Err(Error::MissingDigitPositions);
    }
    let ops = gt.ops();
    let mut expected: Vec<[Option<(f64, Vec<f64>)>; 3]> = (0..ops.len()).map(|_| [None, None, None]).collect();
    for dp in positions {
        if dp.op_index >= ops.len() || dp.position == 0 || dp.place > 2 {
            return Err(Error::MissingDigitPositions);
        }
        let row_start = (dp.position - 1) * vocab;
        if row_start + vocab > logits.len() {
            return Err(Error::Shape("digit position outside the logits".into()));
        }
        let p = softmax_f64(&logits[row_start..row_start + vocab]);
        let d: f64 = digit_ids.iter().enumerate().map(|(digit, &id)| digit as f64 * p[id as usize]).sum();
        expected[dp.op_index][dp.place as usize] = Some((d, p));
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut predicted = Vec::with_capacity(ops.len());
    let mut loss = 0.0;
    let n_ops = ops.len() as f64;
    for (i, op) in ops.iter().enumerate() {
        let sign = if op.value < 0.0 { -1.0 } else { 1.0 };
        let mut magnitude = 0.0;
        for place in 0..3 {
            let (d, _) = expected[i][place].as_ref().ok_or(Error::MissingDigitPositions)?;
            magnitude += d * 10f64.powi(-(place as i32));
        }
        let v_hat = sign * magnitude;
        let err = v_hat - op.value;
        loss += err * err / n_ops;
        predicted.push(v_hat);
        let dv = 2.0 * err / n_ops;
        for dp in positions.iter().filter(|dp| dp.op_index == i) {
            let (d, p) = expected[i][dp.place as usize].as_ref().expect("filled above");
            let scale = dv * sign * 10f64.powi(-(dp.place as i32));
            let row = &mut grad[(dp.position - 1) * vocab..dp.position * vocab];
            // d d_hat / d z_k = p_k (c_k - d_hat), c_k the digit of token k or 0
            for (k, g) in row.iter_mut().enumerate() {
                let c = digit_ids.iter().position(|&id| id as usize == k).map_or(0.0, |x| x as f64);
                *g = *g + T::of(scale * p[k] * (c - d));
            }
        }
    }
    Ok(MseAux { loss, predicted, grad })
}

/// How the second heuristic component scores the name overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapPenalty {
    /// `1 - |pred ∩ gt| / |gt|`.
    Ratio,
    /// 1 when no ground-truth op is predicted, else 0.
    Binary,
}

impl OverlapPenalty {
    pub fn as_str(self) -> &'static str {
        match self {
            OverlapPenalty::Ratio => "ratio",
            OverlapPenalty::Binary => "binary",
        }
    }
}

impl std::str::FromStr for OverlapPenalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(OverlapPenalty::Ratio),
            "binary" => Ok(OverlapPenalty::Binary),
            other => Err(Error::Config(format!("unknown overlap penalty `{other}`"))),
        }
    }
}

/// The three heuristic components and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicAux {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub total: f64,
}

/// Count mismatch, name-overlap shortfall and zero-fill value MSE, averaged.
pub fn heuristic_aux(pred: &ParsedPrediction, gt: &EditSpec, overlap: OverlapPenalty) -> HeuristicAux {
    let n_gt = gt.len() as f64;
    let c1 = ((pred.ops.len() as f64 - n_gt).abs() / n_gt).min(1.0);
    let acc = accuracy(pred, gt);
    let c2 = match overlap {
        OverlapPenalty::Ratio => 1.0 - acc,
        OverlapPenalty::Binary => {
            if acc == 0.0 {
                1.0
            } else {
                0.0
            }
        }
    };
    let c3 = param_mse(pred, gt);
    HeuristicAux {
        c1,
        c2,
        c3,
        total: (c1 + c2 + c3) / 3.0,
    }
}

/// Tokens predicted by teacher-forced argmax over the answer region, cut at
/// the first `eos`.
pub fn teacher_forced_argmax<T: Real>(logits: &[T], vocab: usize, prompt_len: usize, len: usize, eos: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    for t in prompt_len.saturating_sub(1)..len.saturating_sub(1) {
        let id = crate::model::argmax(&logits[t * vocab..(t + 1) * vocab]);
        if id == eos {
            break;
        }
        out.push(id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::parse_output;
    use crate::imgedit::EditOp;

    fn spec(ops: &[(&str, f64)]) -> EditSpec {
        EditSpec::new(ops.iter().map(|&(n, v)| EditOp::named(n, v).unwrap()).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 64;
        let n = 5;
        let logits = vec![0.0f64; n * v];
        let targets = vec![3u32; n];
        let mask = vec![false, false, true, true, true];
        let (loss, _) = lm_loss(&logits, v, &targets, &mask).unwrap();
        assert!((loss - 64f64.ln()).abs() < 1e-12);
        assert!((loss - 4.1589).abs() < 1e-4);
        assert!(matches!(lm_loss(&logits, v, &targets, &[true, false, false, false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let v = 10;
        let targets = vec![1u32, 4, 7];
        let mut logits = vec![0.0f64; 3 * v];
        logits[4] = 50.0;
        logits[v + 7] = 50.0;
        let (loss, _) = lm_loss(&logits, v, &targets, &[false, true, true]).unwrap();
        assert!(loss < 1e-15);
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let v = 7;
        let logits: Vec<f64> = (0..4 * v).map(|i| (i as f64 * 0.31).sin()).collect();
        let mask = [false, false, true, true];
        let a = lm_loss(&logits, v, &[0, 1, 2, 3], &mask).unwrap();
        let b = lm_loss(&logits, v, &[5, 6, 2, 3], &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let v = 6;
        let mut logits: Vec<f64> = (0..4 * v).map(|i| (i as f64 * 0.77).cos()).collect();
        let targets = [0u32, 2, 5, 1];
        let mask = [false, true, false, true];
        let (_, grad) = lm_loss(&logits, v, &targets, &mask).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let orig = logits[i];
            logits[i] = orig + h;
            let up = lm_loss(&logits, v, &targets, &mask).unwrap().0;
            logits[i] = orig - h;
            let down = lm_loss(&logits, v, &targets, &mask).unwrap().0;
            logits[i] = orig;
            assert!((grad[i] - (up - down) / (2.0 * h)).abs() < 1e-8);
        }
    }

    fn digit_setup(value: f64) -> (usize, [TokenId; 10], Vec<DigitPosition>, EditSpec) {
        // vocab: ids 0..10 are digits, 10..12 other tokens
        let digits: [TokenId; 10] = std::array::from_fn(|i| i as TokenId);
        let positions = (0..3)
            .map(|place| DigitPosition {
                position: [2, 4, 5][place],
                place: place as u8,
                op_index: 0,
            })
            .collect();
        (12, digits, positions, spec(&[("brightness", value)]))
    }

    #[test]
    fn mse_aux_exact_and_offset() {
        let (v, digits, positions, gt) = digit_setup(0.5);
        let n = 6;
        let mut logits = vec![0.0f64; n * v];
        let put = |logits: &mut Vec<f64>, pos: usize, digit: usize| logits[(pos - 1) * v + digit] = 80.0;
        put(&mut logits, 2, 0);
        put(&mut logits, 4, 5);
        put(&mut logits, 5, 0);
        let r = mse_aux(&logits, v, &positions, &gt, &digits).unwrap();
        assert!(r.loss < 1e-20);
        let mut wrong = vec![0.0f64; n * v];
        put(&mut wrong, 2, 0);
        put(&mut wrong, 4, 3);
        put(&mut wrong, 5, 0);
        let r = mse_aux(&wrong, v, &positions, &gt, &digits).unwrap();
        assert!((r.predicted[0] - 0.3).abs() < 1e-12);
        assert!((r.loss - 0.04).abs() < 1e-12);
        assert!(matches!(mse_aux(&wrong, v, &[], &gt, &digits), Err(Error::MissingDigitPositions)));
    }

    #[test]
    fn mse_aux_gradient_matches_finite_differences() {
        let (v, digits, positions, gt) = digit_setup(-0.37);
        let mut logits: Vec<f64> = (0..6 * v).map(|i| (i as f64 * 1.3).sin() * 2.0).collect();
        let r = mse_aux(&logits, v, &positions, &gt, &digits).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..logits.len() {
            let orig = logits[i];
            logits[i] = orig + h;
            let up = mse_aux(&logits, v, &positions, &gt, &digits).unwrap().loss;
            logits[i] = orig - h;
            let down = mse_aux(&logits, v, &positions, &gt, &digits).unwrap().loss;
            logits[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (r.grad[i] - numeric).abs() / (r.grad[i].abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn heuristic_examples() {
        let gt = spec(&[("brightness", 0.5)]);
        let empty = parse_output("");
        let h = heuristic_aux(&empty, &gt, OverlapPenalty::Ratio);
        assert_eq!((h.c1, h.c2, h.c3), (1.0, 1.0, 0.25));
        assert!((h.total - 0.75).abs() < 1e-12);

        let gt2 = spec(&[("brightness", 0.5), ("contrast", -0.2)]);
        let one = parse_output("The edit applied brightness with value 0.50.");
        let h = heuristic_aux(&one, &gt2, OverlapPenalty::Ratio);
        assert_eq!((h.c1, h.c2), (0.5, 0.5));
        assert!((h.c3 - 0.02).abs() < 1e-12);
        assert!((h.total - 0.34).abs() < 1e-12);
        assert_eq!(heuristic_aux(&one, &gt2, OverlapPenalty::Binary).c2, 0.0);

        let exact = parse_output("The edits applied were: brightness with value 0.50, contrast with value -0.20.");
        assert_eq!(heuristic_aux(&exact, &gt2, OverlapPenalty::Ratio).total, 0.0);
    }
}
