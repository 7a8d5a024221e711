//! Multitask training loop.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bias::{annotate, build_batch_bias_list, sample_bias_phrases, BiasList, Span};
use crate::config::ExperimentConfig;
use crate::corpus::{permutation, Utterance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, teacher_forced_stats, DecodeMode, TeacherForcedStats};
use crate::metrics::EvalReport;
use crate::losses::{batt_loss, bidx_loss, ctc_loss};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS, SOS};

/// Losses of one optimiser step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ctc: f64,
    pub batt: f64,
    pub bidx: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_header() -> &'static str {
        "step,total,ctc,batt,bidx,grad_norm,lr"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.ctc, self.batt, self.bidx, self.grad_norm, self.lr
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: usize,
    pub stats: TeacherForcedStats,
    /// Baseline beam search over the dev split with the dev list.
    pub report: EvalReport,
}

pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossRecord>,
    pub dev: Vec<DevRecord>,
    /// Utterance-steps whose CTC term was dropped because the labels did not
    /// fit in the subsampled frames.
    pub skipped_ctc: usize,
    /// First step with a non-finite loss. Training stops there and `model`
    /// keeps the parameters from before that step.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn losses_csv(&self) -> String {
        let mut s = format!("{}\n", LossRecord::csv_header());
        for r in &self.losses {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Everything the loop needs per utterance, computed once.
struct Prepared {
    features: Tensor,
    tokens: Vec<usize>,
    ctc_labels: Vec<usize>,
}

fn prepare(u: &Utterance, vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<Prepared> {
    let tokens = u.tokens(vocab, cfg.tokenization)?;
    let ctc_labels = tokens
        .iter()
        .map(|&t| {
            vocab
                .ctc_class(t)
                .ok_or_else(|| Error::Invariant(format!("{}: token {t} has no CTC class", u.id)))
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        features: u.features(),
        tokens,
        ctc_labels,
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Options that are not part of the experiment config.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Dev split and list for the periodic teacher-forced diagnostics.
    pub dev: Option<(&'a [Utterance], &'a BiasList)>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&LossRecord)>,
}


/// Trains a fresh model on `train` for `cfg.steps` steps.
pub fn train(cfg: &ExperimentConfig, vocab: &Vocabulary, feature_dim: usize, train: &[Utterance]) -> Result<TrainOutcome> {
    train_with(cfg, vocab, feature_dim, train, TrainHooks::default())
}

pub fn train_with(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    feature_dim: usize,
    train: &[Utterance],
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let weights = cfg.loss_weights();
    let mut model = Model::new(cfg.model(feature_dim, vocab.len(), vocab.ctc_classes()), cfg.seed)?;
    let data = train
        .iter()
        .map(|u| prepare(u, vocab, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(cfg.adam(), &model.store);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut dev = Vec::new();
    let mut skipped_ctc = 0;
    let mut diverged_at = None;

    let mut epoch = 0u64;
    let mut order = permutation(data.len(), mix(cfg.seed, 1, epoch));
    let mut cursor = 0;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                epoch += 1;
                order = permutation(data.len(), mix(cfg.seed, 1, epoch));
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let spans = batch
            .iter()
            .map(|&i| sample_bias_phrases(&data[i].tokens, mix(cfg.seed, 2 + step as u64, i as u64), cfg.n_utt, cfg.l_max))
            .collect::<Result<Vec<_>>>()?;
        let phrases: Vec<Vec<Vec<usize>>> = batch
            .iter()
            .zip(&spans)
            .map(|(&i, ss)| ss.iter().map(|s| data[i].tokens[s.start..s.end()].to_vec()).collect())
            .collect();
        let bb = build_batch_bias_list(&phrases, cfg.dedupe, cfg.l_max)?;

        let (grads, record) = {
            let mut tape = Tape::new(&model.store);
            let bias = model.bias.forward(&mut tape, &bb.list)?;
            let mut ctc_terms = Vec::new();
            let mut batt_terms = Vec::new();
            let mut bidx_terms = Vec::new();
            for (b, &i) in batch.iter().enumerate() {
                let d = &data[i];
                let h = model.audio.forward(&mut tape, &d.features)?;
                if weights.ctc != 0.0 {
                    let logits = model.audio.ctc_logits(&mut tape, h)?;
                    match ctc_loss(&mut tape, logits, &d.ctc_labels)? {
                        Some(l) => ctc_terms.push(l),
                        None => skipped_ctc += 1,
                    }
                }
                let own: Vec<(Span, usize)> = spans[b].iter().copied().zip(bb.indices[b].iter().copied()).collect();
                let ann = annotate(&d.tokens, &own)?;
                let mut input = vec![SOS];
                input.extend(&ann.tokens);
                let mut targets = ann.tokens;
                targets.push(EOS);
                let mut labels = ann.labels;
                labels.push(0);
                let mem = model.decoder.memory(&mut tape, h, bias.v)?;
                let out = model.decoder.forward(&mut tape, &input, &mem, None)?;
                batt_terms.push(batt_loss(&mut tape, out.token_logits, &targets)?);
                if weights.bidx != 0.0 {
                    bidx_terms.push(bidx_loss(&mut tape, out.index_logits, &labels)?);
                }
            }
            let mean = |tape: &Tape<'_>, v: &[crate::autograd::Var]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().map(|&x| tape.value(x).item()).sum::<f64>() / v.len() as f64
                }
            };
            let record = LossRecord {
                step,
                total: 0.0,
                ctc: mean(&tape, &ctc_terms),
                batt: mean(&tape, &batt_terms),
                bidx: mean(&tape, &bidx_terms),
                grad_norm: 0.0,
                lr: 0.0,
            };
            let mut terms = Vec::new();
            for (vars, w) in [(&ctc_terms, weights.ctc), (&batt_terms, weights.batt), (&bidx_terms, weights.bidx)] {
                if w != 0.0 && !vars.is_empty() {
                    let scale = w / vars.len() as f64;
                    terms.extend(vars.iter().map(|&v| (v, scale)));
                }
            }
            let root = tape.combine(&terms)?;
            let total = tape.value(root).item();
            if !total.is_finite() {
                (None, LossRecord { total, ..record })
            } else {
                (Some(tape.backward(root)?), LossRecord { total, ..record })
            }
        };
        let Some(grads) = grads else {
            log::warn!("non-finite loss at step {step}, stopping");
            diverged_at = Some(step);
            break;
        };
        model.store.accumulate(&grads);
        model.store.fill_missing_grads();
        let norm = model.store.clip_grad_norm(cfg.grad_clip);
        if !norm.is_finite() {
            model.store.clear_grads();
            log::warn!("non-finite gradient at step {step}, stopping");
            diverged_at = Some(step);
            break;
        }
        let lr = adam.step(&mut model.store)?;
        let record = LossRecord {
            grad_norm: norm,
            lr,
            ..record
        };
        if step == 1 || step % 100 == 0 {
            log::info!(
                "step {step} loss {:.4} ctc {:.4} batt {:.4} bidx {:.4}",
                record.total,
                record.ctc,
                record.batt,
                record.bidx
            );
        }
        if let Some(f) = hooks.on_step.as_mut() {
            f(&record);
        }
        losses.push(record);

        if let Some((utts, list)) = hooks.dev {
            if cfg.dev_every > 0 && (step % cfg.dev_every == 0 || step == cfg.steps) {
                let stats = teacher_forced_stats(&model, utts, vocab, cfg.tokenization, list)?;
                let report = evaluate(&model, utts, vocab, cfg.tokenization, list, list, &cfg.decode(), DecodeMode::Baseline, false)?.report;
                log::info!(
                    "step {step} dev batt {:.4} bidx {:.4} index acc {:.3} B-WER {:.3} U-WER {:.3}",
                    stats.batt,
                    stats.bidx,
                    stats.index_accuracy(),
                    report.b_wer,
                    report.u_wer
                );
                dev.push(DevRecord { step, stats, report });
            }
        }
    }

    Ok(TrainOutcome {
        model,
        losses,
        dev,
        skipped_ctc,
        diverged_at,
    })
}
