//! Contrastive objectives: InfoNCE and the three semantic sampling variants.
//!
//! All four share one form. With `A` the matched key plus any extra
//! positives, `B` the boosted negatives and `l_j = cos(q, k_j) / tau`:
//!
//! ```text
//! L = -log( Σ_{j∈A} e^{l_j} / ( Σ_{j∈A} e^{l_j} + Σ_{j∈B} e^{l_j} + Σ_{j∉A} e^{l_j} ) )
//! ```
//!
//! so boosted negatives are counted twice in the denominator and extra
//! positives leave the plain-negative sum. Evaluation goes through
//! log-sum-exp and returns the analytic gradient with respect to the raw
//! (unnormalized) query. Keys are constants.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::{dot, log_sum_exp, norm, EmbeddingBatch, Temperature, ZERO_NORM};
use crate::sampling::{build_selection, SampleSelection, SamplingPlan, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Matched,
    ExtraPos,
    BoostedNeg,
    PlainNeg,
}

#[derive(Debug, Clone)]
pub struct ContrastiveLossInput<'a> {
    pub q: &'a [f64],
    pub keys: &'a EmbeddingBatch,
    pub matched_index: usize,
    pub selection: &'a SampleSelection,
    pub tau: Temperature,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    /// Summed ψ mass per term. Boosted negatives also appear in `PlainNeg`.
    pub breakdown: BTreeMap<Term, f64>,
    /// dL/dq for the raw query.
    pub grad_q: Vec<f64>,
}

impl LossValue {
    /// Recomputes the loss from the ψ masses.
    pub fn from_breakdown(&self) -> f64 {
        let get = |t| self.breakdown.get(&t).copied().unwrap_or(0.0);
        let num = get(Term::Matched) + get(Term::ExtraPos);
        ((get(Term::BoostedNeg) + get(Term::PlainNeg)) / num).ln_1p()
    }
}

fn validate(input: &ContrastiveLossInput<'_>) -> Result<()> {
    let n = input.keys.len();
    if n < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 keys, got {n}")));
    }
    if input.q.len() != input.keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: input.keys.dim(),
            got: input.q.len(),
        });
    }
    if input.matched_index >= n {
        return Err(Error::ShapeMismatch(format!(
            "matched index {} outside key batch of {n}",
            input.matched_index
        )));
    }
    let sel = input.selection;
    sel.check(input.matched_index, n)?;
    let mut seen = vec![false; n];
    for &i in sel.positives.iter().chain(&sel.negatives_boosted) {
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Overlap(format!("index {i} selected twice")));
        }
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn evaluate(input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    validate(input)?;
    let tau = input.tau.get();
    let qn = norm(input.q);
    if !(qn >= ZERO_NORM) {
        return Err(Error::ZeroVector(qn));
    }
    let q_hat: Vec<f64> = input.q.iter().map(|x| x / qn).collect();

    let n = input.keys.len();
    let mut k_hat = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for k in input.keys.rows() {
        let kn = norm(k);
        if !(kn >= ZERO_NORM) {
            return Err(Error::ZeroVector(kn));
        }
        let kh: Vec<f64> = k.iter().map(|x| x / kn).collect();
        logits.push(dot(&q_hat, &kh) / tau);
        k_hat.push(kh);
    }

    let sel = input.selection;
    let mut in_numerator = vec![false; n];
    in_numerator[input.matched_index] = true;
    for &j in &sel.positives {
        in_numerator[j] = true;
    }
    let mut weight = vec![1.0f64; n];
    for &j in &sel.negatives_boosted {
        weight[j] = 2.0;
    }

    let num_logits: Vec<f64> = (0..n).filter(|&j| in_numerator[j]).map(|j| logits[j]).collect();
    let den_logits: Vec<f64> = (0..n).map(|j| logits[j] + weight[j].ln()).collect();
    let rest_logits: Vec<f64> = (0..n).filter(|&j| !in_numerator[j]).map(|j| den_logits[j]).collect();
    let log_num = log_sum_exp(&num_logits);
    let log_den = log_sum_exp(&den_logits);
    // L = ln(1 + rest/num); softplus keeps full relative precision when L is tiny
    let value = softplus(log_sum_exp(&rest_logits) - log_num);

    // dL/dl_j = w_j e^{l_j} / Z_den - [j∈A] e^{l_j} / Z_num
    let mut g_hat = vec![0.0; q_hat.len()];
    for j in 0..n {
        let mut dl = (den_logits[j] - log_den).exp();
        if in_numerator[j] {
            dl -= (logits[j] - log_num).exp();
        }
        let c = dl / tau;
        for (g, k) in g_hat.iter_mut().zip(&k_hat[j]) {
            *g += c * k;
        }
    }
    let radial = dot(&g_hat, &q_hat);
    let grad_q = g_hat.iter().zip(&q_hat).map(|(g, qh)| (g - radial * qh) / qn).collect();

    let mut breakdown = BTreeMap::new();
    let psi = |j: usize| logits[j].exp();
    breakdown.insert(Term::Matched, psi(input.matched_index));
    breakdown.insert(Term::ExtraPos, sel.positives.iter().map(|&j| psi(j)).sum());
    breakdown.insert(Term::BoostedNeg, sel.negatives_boosted.iter().map(|&j| psi(j)).sum());
    breakdown.insert(Term::PlainNeg, (0..n).filter(|&j| !in_numerator[j]).map(psi).sum());
    Ok(LossValue {
        value,
        breakdown,
        grad_q,
    })
}

/// Plain InfoNCE against every other key in the batch.
pub fn infonce(input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    if !input.selection.is_empty() {
        return Err(Error::SelectionNotEmpty);
    }
    evaluate(input)
}

/// Extra positives join the numerator and leave the negative sum.
pub fn srcl_loss(input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    if !input.selection.negatives_boosted.is_empty() {
        return Err(Error::Selection("positive sampling takes no boosted negatives".into()));
    }
    evaluate(input)
}

/// The `T` least similar keys get a second term in the denominator.
pub fn nsam_loss(input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    if !input.selection.positives.is_empty() {
        return Err(Error::Selection("negative sampling takes no extra positives".into()));
    }
    evaluate(input)
}

/// Extra positives plus doubled middle-band negatives, with epoch-dependent counts.
pub fn dynamic_loss(input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    evaluate(input)
}

pub fn loss_for(strategy: Strategy, input: &ContrastiveLossInput<'_>) -> Result<LossValue> {
    match strategy {
        Strategy::Baseline => infonce(input),
        Strategy::Srcl => srcl_loss(input),
        Strategy::NSam => nsam_loss(input),
        Strategy::Dynamic => dynamic_loss(input),
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean per-anchor loss.
    pub value: f64,
    /// Row-major dL/dq for every query.
    pub grad_queries: Vec<f64>,
    pub selections: Vec<SampleSelection>,
}

fn ranking_row(rank_from: &[f64], rank_against: &EmbeddingBatch, out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    let an = norm(rank_from);
    if !(an >= ZERO_NORM) {
        return Err(Error::ZeroVector(an));
    }
    for row in rank_against.rows() {
        let rn = norm(row);
        if !(rn >= ZERO_NORM) {
            return Err(Error::ZeroVector(rn));
        }
        out.push(dot(rank_from, row) / (an * rn));
    }
    Ok(())
}

/// Mean loss over all anchors of a batch.
///
/// Query `i` is matched with key `i`. The selection for anchor `i` comes from
/// ranking `original_keys[i]` against `keys` (SRCL) or against `original_keys`
/// (N-Sam, Dynamic).
pub fn batch_loss(
    plan: &SamplingPlan,
    epoch: usize,
    queries: &EmbeddingBatch,
    keys: &EmbeddingBatch,
    original_keys: &EmbeddingBatch,
    tau: Temperature,
) -> Result<BatchLoss> {
    let n = queries.len();
    for b in [keys, original_keys] {
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!("batch sizes {n} and {} differ", b.len())));
        }
    }
    if keys.dim() != queries.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            got: keys.dim(),
        });
    }
    if original_keys.dim() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: original_keys.dim(),
        });
    }

    let mut value = 0.0;
    let mut grad_queries = Vec::with_capacity(n * queries.dim());
    let mut selections = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        let selection = match plan.strategy {
            Strategy::Baseline => SampleSelection::empty(epoch),
            Strategy::Srcl => {
                ranking_row(original_keys.row(i), keys, &mut row)?;
                build_selection(plan, epoch, &row, i)?
            }
            Strategy::NSam | Strategy::Dynamic => {
                ranking_row(original_keys.row(i), original_keys, &mut row)?;
                build_selection(plan, epoch, &row, i)?
            }
        };
        let input = ContrastiveLossInput {
            q: queries.row(i),
            keys,
            matched_index: i,
            selection: &selection,
            tau,
        };
        let lv = loss_for(plan.strategy, &input)?;
        value += lv.value;
        grad_queries.extend(lv.grad_q.iter().map(|g| g / n as f64));
        selections.push(selection);
    }
    Ok(BatchLoss {
        value: value / n as f64,
        grad_queries,
        selections,
    })
}

/// Two-direction loss: view-a queries against view-b keys and vice versa, averaged.
#[derive(Debug, Clone)]
pub struct SymmetricLoss {
    pub value: f64,
    pub grad_queries_a: Vec<f64>,
    pub grad_queries_b: Vec<f64>,
    pub forward: BatchLoss,
    pub backward: BatchLoss,
}

#[allow(clippy::too_many_arguments)]
pub fn symmetric_batch_loss(
    plan: &SamplingPlan,
    epoch: usize,
    queries_a: &EmbeddingBatch,
    queries_b: &EmbeddingBatch,
    keys_a: &EmbeddingBatch,
    keys_b: &EmbeddingBatch,
    original_keys: &EmbeddingBatch,
    tau: Temperature,
) -> Result<SymmetricLoss> {
    let forward = batch_loss(plan, epoch, queries_a, keys_b, original_keys, tau)?;
    let backward = batch_loss(plan, epoch, queries_b, keys_a, original_keys, tau)?;
    Ok(SymmetricLoss {
        value: 0.5 * (forward.value + backward.value),
        grad_queries_a: forward.grad_queries.iter().map(|g| 0.5 * g).collect(),
        grad_queries_b: backward.grad_queries.iter().map(|g| 0.5 * g).collect(),
        forward,
        backward,
    })
}
