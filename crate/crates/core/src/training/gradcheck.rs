//! Finite-difference verification of the hand-written backward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{lm_loss, mse_aux};
use crate::error::Result;
use crate::imgedit::{EditOp, EditSpec};
use crate::model::checkpoint::{probe_batch, ProbeBatch};
use crate::model::{Group, Model, Params, SlotInput};
use crate::prompting::TokenVocab;

/// A sampled scalar: tensor index and element index.
pub type ScalarRef = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarCheck {
    pub tensor: String,
    pub group: Group,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ScalarCheck {
    /// `|a - n| / (|a| + |n| + 1e-8)`.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs() + 1e-8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<ScalarCheck>,
    pub h: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(ScalarCheck::rel_err).fold(0.0, f64::max)
    }

    pub fn per_group(&self) -> BTreeMap<Group, usize> {
        let mut m = BTreeMap::new();
        for c in &self.checks {
            *m.entry(c.group).or_insert(0) += 1;
        }
        m
    }
}

/// The probe spec used by [`probe_batch`].
fn probe_spec() -> EditSpec {
    EditSpec::new(vec![
        EditOp::named("brightness", 0.5).expect("valid op"),
        EditOp::named("hue", -0.2).expect("valid op"),
    ])
    .expect("valid spec")
}

/// Loss on the probe batch and, when `grads` is given, its gradient.
pub fn probe_loss(
    model: &Model<f64>,
    vocab: &TokenVocab,
    probe: &ProbeBatch,
    with_aux: bool,
    grads: Option<&mut Params<f64>>,
) -> Result<f64> {
    let s = &probe.sample;
    let v = model.config.vocab_size;
    let trace = model.forward_trace(&s.token_ids, &s.image_slots, SlotInput::Images([&probe.source, &probe.edited]))?;
    let (mut loss, mut dlogits) = lm_loss(trace.logits(), v, &s.token_ids, &s.loss_mask)?;
    if with_aux {
        let m = mse_aux(trace.logits(), v, &s.value_digit_positions, &probe_spec(), &vocab.digit_ids())?;
        loss += m.loss;
        for (d, g) in dlogits.iter_mut().zip(&m.grad) {
            *d += g;
        }
    }
    if let Some(g) = grads {
        model.backward(&trace, &dlogits, g);
    }
    Ok(loss)
}

/// Up to `n` scalars, cycling over groups so each is represented.
pub fn sample_scalars(params: &Params<f64>, n: usize, seed: u64) -> Vec<ScalarRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_group: Vec<Vec<usize>> = Group::ALL
        .iter()
        .map(|&g| (0..params.tensors.len()).filter(|&i| params.tensors[i].group == g).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tensors = &by_group[i % by_group.len()];
        if tensors.is_empty() {
            continue;
        }
        let t = tensors[rng.random_range(0..tensors.len())];
        let e = rng.random_range(0..params.tensors[t].data.len());
        if !out.contains(&(t, e)) {
            out.push((t, e));
        }
    }
    out
}

/// Compares analytic gradients with central differences of step `h` at the
/// given scalars. Runs in 64-bit with every group trainable.
pub fn grad_check_at(model: &Model<f32>, vocab: &TokenVocab, with_aux: bool, scalars: &[ScalarRef], h: f64) -> Result<GradCheckReport> {
    let mut m: Model<f64> = model.cast();
    m.config.freeze_vision = false;
    m.config.freeze_lm = false;
    let probe = probe_batch(vocab, m.config.k)?;
    let mut grads = m.params.zeros_like();
    probe_loss(&m, vocab, &probe, with_aux, Some(&mut grads))?;
    let mut checks = Vec::with_capacity(scalars.len());
    for &(t, e) in scalars {
        let orig = m.params.tensors[t].data[e];
        m.params.tensors[t].data[e] = orig + h;
        let up = probe_loss(&m, vocab, &probe, with_aux, None)?;
        m.params.tensors[t].data[e] = orig - h;
        let down = probe_loss(&m, vocab, &probe, with_aux, None)?;
        m.params.tensors[t].data[e] = orig;
        checks.push(ScalarCheck {
            tensor: m.params.tensors[t].name.clone(),
            group: m.params.tensors[t].group,
            index: e,
            analytic: grads.tensors[t].data[e],
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(GradCheckReport { checks, h })
}

/// Samples `n` scalars (at most 200) across all groups and checks them.
pub fn grad_check(model: &Model<f32>, vocab: &TokenVocab, with_aux: bool, n: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let scalars = sample_scalars(&model.params.cast(), n.min(200), seed);
    grad_check_at(model, vocab, with_aux, &scalars, h)
}

/// Analytic gradient of the probe loss under the model's own freeze flags.
pub fn analytic_gradient(model: &Model<f32>, vocab: &TokenVocab, with_aux: bool) -> Result<Params<f64>> {
    let m: Model<f64> = model.cast();
    let probe = probe_batch(vocab, m.config.k)?;
    let mut grads = m.params.zeros_like();
    probe_loss(&m, vocab, &probe, with_aux, Some(&mut grads))?;
    Ok(grads)
}

/// Slope of log(finite-difference error) against log(h) between two step
/// sizes, over scalars whose error at the larger step is clearly above
/// round-off. Central differences give about 2.
pub fn convergence_order(coarse: &GradCheckReport, fine: &GradCheckReport, min_err: f64) -> Option<f64> {
    let mut slopes: Vec<f64> = coarse
        .checks
        .iter()
        .zip(&fine.checks)
        .filter_map(|(a, b)| {
            let ea = (a.analytic - a.numeric).abs();
            let eb = (b.analytic - b.numeric).abs();
            (ea > min_err && eb > 0.0).then(|| (ea / eb).ln() / (coarse.h / fine.h).ln())
        })
        .collect();
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    Some(slopes[slopes.len() / 2])
}
