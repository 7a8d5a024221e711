//! Attention, bias-index and CTC losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{log_add, log_softmax};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Target value skipped by [`bidx_loss`]. Index 0 is a real label there, so
/// padding cannot reuse `<pad>`.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Mean token cross entropy, skipping `<pad>` targets.
pub fn batt_loss(tape: &mut Tape<'_>, token_logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(token_logits, targets, Some(PAD))
}

/// Mean bias-index cross entropy, skipping [`IGNORE_INDEX`]. Labels above
/// `N` are rejected.
pub fn bidx_loss(tape: &mut Tape<'_>, index_logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(index_logits, labels, Some(IGNORE_INDEX))
}

/// Result of the CTC forward-backward pass over one utterance.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-log p(labels | logits)`; `+inf` when no alignment exists.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the logits; empty when infeasible.
    pub grad: Vec<f64>,
}

impl CtcOutput {
    pub fn feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC over `logits: T×K` with blank class 0 and `labels` in `1..K`.
pub fn ctc(logits: &Tensor, labels: &[usize]) -> Result<CtcOutput> {
    let (t_len, k) = (logits.rows(), logits.cols());
    for (position, &l) in labels.iter().enumerate() {
        if l == 0 || l >= k {
            return Err(Error::TargetOutOfRange {
                target: l,
                classes: k,
                position,
            });
        }
    }
    if t_len < ctc_min_frames(labels) {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Vec::new(),
        });
    }

    let mut lp = vec![0.0; t_len * k];
    for t in 0..t_len {
        log_softmax(logits.row(t), &mut lp[t * k..(t + 1) * k]);
    }
    // blank-augmented label sequence: b l1 b l2 ... b
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { 0 } else { labels[s / 2] };
    let can_skip = |s: usize| s % 2 == 1 && s >= 2 && ext(s) != ext(s - 2);
    let ninf = f64::NEG_INFINITY;

    // alpha includes the emission at t; beta excludes it
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[0];
    if s_len > 1 {
        alpha[1] = lp[ext(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * k + ext(s)];
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Vec::new(),
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp[(t + 1) * k + ext(s)];
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp[(t + 1) * k + ext(s + 1)]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp[(t + 1) * k + ext(s + 2)]);
            }
            beta[t * s_len + s] = b;
        }
    }

    // d(-log p)/d logit = softmax - posterior occupancy of each class
    let mut grad: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    for t in 0..t_len {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if g > ninf {
                grad[t * k + ext(s)] -= g.exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// CTC loss recorded on the tape, or `None` when the labels cannot fit in
/// the available frames.
pub fn ctc_loss(tape: &mut Tape<'_>, ctc_logits: Var, labels: &[usize]) -> Result<Option<Var>> {
    let out = ctc(tape.value(ctc_logits), labels)?;
    if !out.feasible() {
        return Ok(None);
    }
    Ok(Some(tape.precomputed_loss(ctc_logits, out.loss, out.grad)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ctc: f64,
    pub batt: f64,
    pub bidx: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ctc: 0.3,
            batt: 0.7,
            bidx: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ctc, self.batt, self.bidx];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// `λ_ctc·l_ctc + λ_batt·l_batt + λ_bidx·l_bidx` on plain numbers. An
/// infinite (infeasible) CTC term is dropped.
pub fn multitask_value(l_ctc: f64, l_batt: f64, l_bidx: f64, w: &LossWeights) -> f64 {
    let ctc = if l_ctc.is_finite() { w.ctc * l_ctc } else { 0.0 };
    ctc + w.batt * l_batt + w.bidx * l_bidx
}

/// The same weighted sum recorded on the tape. Terms with zero weight are
/// left out of the graph.
pub fn multitask_loss(
    tape: &mut Tape<'_>,
    l_ctc: Option<Var>,
    l_batt: Var,
    l_bidx: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms = vec![(l_batt, w.batt)];
    if w.bidx != 0.0 {
        terms.push((l_bidx, w.bidx));
    }
    if let Some(c) = l_ctc {
        if w.ctc != 0.0 {
            terms.push((c, w.ctc));
        }
    }
    tape.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParameterStore;
    use crate::gradcheck::{self, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    /// Sum over every frame-level path whose collapse equals `labels`.
    fn brute_force_ctc(logits: &Tensor, labels: &[usize]) -> f64 {
        let (t_len, k) = (logits.rows(), logits.cols());
        let mut lp = vec![0.0; t_len * k];
        for t in 0..t_len {
            log_softmax(logits.row(t), &mut lp[t * k..(t + 1) * k]);
        }
        let mut total = f64::NEG_INFINITY;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &c in &path {
                if c != 0 && Some(c) != prev {
                    collapsed.push(c);
                }
                prev = Some(c);
            }
            if collapsed == labels {
                let s: f64 = path.iter().enumerate().map(|(t, &c)| lp[t * k + c]).sum();
                total = log_add(total, s);
            }
            let mut i = 0;
            while i < t_len {
                path[i] += 1;
                if path[i] < k {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
            if i == t_len {
                break;
            }
        }
        -total
    }

    #[test]
    fn ctc_single_frame_certain() {
        let logits = Tensor::new(vec![1, 3], vec![-50.0, 50.0, -50.0]).unwrap();
        assert!(ctc(&logits, &[1]).unwrap().loss.abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_is_infinite() {
        let logits = Tensor::zeros(&[2, 3]);
        let out = ctc(&logits, &[1, 1]).unwrap();
        assert!(!out.feasible());
        assert_eq!(out.loss, f64::INFINITY);
        assert!(ctc(&logits, &[1, 2]).unwrap().feasible());
        assert!(ctc(&logits, &[0]).is_err());
        assert!(ctc(&logits, &[3]).is_err());
    }

    #[test]
    fn ctc_empty_label_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&mut rng, 4, 3);
        let out = ctc(&logits, &[]).unwrap();
        assert!((out.loss - brute_force_ctc(&logits, &[])).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ctc_matches_enumeration(seed in any::<u64>(), t_len in 1usize..=5, k in 2usize..=4, n in 0usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random_tensor(&mut rng, t_len, k);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..k)).collect();
            let fast = ctc(&logits, &labels).unwrap().loss;
            let slow = brute_force_ctc(&logits, &labels);
            if slow.is_finite() {
                prop_assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
            } else {
                prop_assert_eq!(fast, f64::INFINITY);
            }
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let id = store.add("logits", random_tensor(&mut rng, 6, 4)).unwrap();
            let labels = [1, 3, 3];
            let report = gradcheck::check(&store, &[id], &GradCheckOptions::default(), |tape| {
                let x = tape.param(id);
                Ok(ctc_loss(tape, x, &labels)?.expect("feasible"))
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
        }
    }

    #[test]
    fn batt_and_bidx_analytic_values() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let uniform = tape.constant(Tensor::zeros(&[3, 8]));
        let l = batt_loss(&mut tape, uniform, &[7, 1, PAD]).unwrap();
        assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let uniform5 = tape.constant(Tensor::zeros(&[2, 5]));
        let l = bidx_loss(&mut tape, uniform5, &[0, 4]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

        let forcing = tape.constant(Tensor::new(vec![2, 3], vec![100.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap());
        let l = bidx_loss(&mut tape, forcing, &[0, 0]).unwrap();
        assert!(tape.value(l).item() < 1e-12);

        let narrow = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            bidx_loss(&mut tape, narrow, &[3]),
            Err(Error::TargetOutOfRange { target: 3, .. })
        ));
    }

    #[test]
    fn bidx_zero_is_a_label_not_padding() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.0, 3.0]).unwrap());
        let with_zero = bidx_loss(&mut tape, logits, &[0, 1]).unwrap();
        let only_one = bidx_loss(&mut tape, logits, &[IGNORE_INDEX, 1]).unwrap();
        assert!(tape.value(with_zero).item() > tape.value(only_one).item());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParameterStore::new();
            let tok = store.add("tok", random_tensor(&mut rng, 4, 6)).unwrap();
            let idx = store.add("idx", random_tensor(&mut rng, 4, 3)).unwrap();
            let frames = store.add("ctc", random_tensor(&mut rng, 5, 4)).unwrap();
            let w = LossWeights::default();
            let report = gradcheck::check(&store, &[], &GradCheckOptions::default(), |tape| {
                let (a, b, c) = (tape.param(tok), tape.param(idx), tape.param(frames));
                let lb = batt_loss(tape, a, &[2, 5, PAD, 4])?;
                let li = bidx_loss(tape, b, &[0, 2, 2, 0])?;
                let lc = ctc_loss(tape, c, &[1, 2])?;
                multitask_loss(tape, lc, lb, li, &w)
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
        }
    }

    #[test]
    fn multitask_arithmetic() {
        let w = LossWeights::default();
        assert!((multitask_value(1.0, 1.0, 1.0, &w) - 2.0).abs() < 1e-12);
        let only_batt = LossWeights {
            ctc: 0.0,
            batt: 1.0,
            bidx: 0.0,
        };
        assert_eq!(multitask_value(3.0, 0.25, 7.0, &only_batt), 0.25);
        assert_eq!(multitask_value(f64::INFINITY, 1.0, 1.0, &w), 1.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (a, b, c, d): (f64, f64, f64, f64) = rng.gen();
            let lhs = multitask_value(a + d, b, c, &w);
            let rhs = multitask_value(a, b, c, &w) + w.ctc * d;
            assert!((lhs - rhs).abs() < 1e-12);
        }
        assert!(LossWeights { ctc: 0.0, batt: 0.0, bidx: 0.0 }.validate().is_err());
        assert!(LossWeights { ctc: -1.0, batt: 1.0, bidx: 0.0 }.validate().is_err());
    }

    #[test]
    fn multitask_on_tape_matches_value() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::scalar(1.5));
        let b = tape.constant(Tensor::scalar(0.5));
        let c = tape.constant(Tensor::scalar(2.0));
        let w = LossWeights::default();
        let l = multitask_loss(&mut tape, Some(a), b, c, &w).unwrap();
        assert!((tape.value(l).item() - multitask_value(1.5, 0.5, 2.0, &w)).abs() < 1e-12);
    }
}
