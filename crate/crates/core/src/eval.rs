//! Decoding a split, scoring it, the α sweep and teacher-forced diagnostics.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bias::{annotate, BiasList, Span};
use crate::corpus::Utterance;
use crate::decoding::{beam_search, bpb_beam_search, BiasSpan, DecodeConfig, DecodeResult, NeuralScorer, TraceStep};
use crate::error::{Error, Result};
use crate::losses::{batt_loss, bidx_loss};
use crate::metrics::{aggregate, score_with_list, EvalReport};
use crate::model::{BiasEncoding, Model};
use crate::tensor::kernels::argmax;
use crate::vocab::{Tokenization, Vocabulary, EOS, SOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Plain beam search; the list still feeds the bias attention.
    Baseline,
    /// Beam search with bias-phrase boosting.
    Bpb,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "bpb" => Ok(Self::Bpb),
            other => Err(Error::Config(format!("unknown decode mode `{other}`"))),
        }
    }
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub reference: String,
    pub text: String,
    pub score: f64,
    pub finished: bool,
    pub spans: Vec<BiasSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<DecodeRecord>,
}

impl Evaluation {
    /// Writes `<prefix>report.json` and `<prefix>records.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("{prefix}report.json")),
            serde_json::to_string_pretty(&self.report)? + "\n",
        )?;
        let mut f = fs::File::create(dir.join(format!("{prefix}records.jsonl")))?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Decodes one utterance against an already encoded list.
pub fn decode_features(
    model: &Model,
    features: &crate::tensor::Tensor,
    list: &BiasList,
    enc: &BiasEncoding,
    cfg: &DecodeConfig,
    mode: DecodeMode,
) -> Result<DecodeResult> {
    let h = model.encode_audio(features)?;
    let memory = model.memory(&h, enc)?;
    let scorer = NeuralScorer::new(model, memory, cfg.k_score);
    // with only the dummy phrase there is nothing to boost
    match mode {
        DecodeMode::Bpb if list.num_phrases() > 0 => bpb_beam_search(&scorer, list, cfg),
        _ => beam_search(&scorer, list, cfg),
    }
}

/// Decodes and scores every utterance. Bias errors are attributed with the
/// reference entity spans and the phrases of `gold`, whatever list was used
/// for decoding.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    utterances: &[Utterance],
    vocab: &Vocabulary,
    mode_tokens: Tokenization,
    list: &BiasList,
    gold: &BiasList,
    cfg: &DecodeConfig,
    mode: DecodeMode,
    keep_trace: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    let enc = model.encode_bias(list)?;
    let mut records = Vec::with_capacity(utterances.len());
    for u in utterances {
        let reference = u.tokens(vocab, mode_tokens)?;
        let out = decode_features(model, &u.features(), list, &enc, cfg, mode)?;
        let report = score_with_list(&reference, &out.tokens, &u.entity_spans(), gold)?;
        report.check_partition()?;
        records.push(DecodeRecord {
            id: u.id.clone(),
            reference: u.text.clone(),
            text: vocab.decode(&out.tokens, mode_tokens),
            score: out.score,
            finished: out.finished,
            spans: out.spans,
            trace: keep_trace.then_some(out.trace),
            report,
        });
    }
    let report = aggregate(records.iter().map(|r| &r.report));
    report.check_partition()?;
    Ok(Evaluation { report, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha_bonus: f64,
    pub report: EvalReport,
}

/// One BPB evaluation per `α_bonus` in `grid`, everything else fixed.
#[allow(clippy::too_many_arguments)]
pub fn ablate_alpha(
    model: &Model,
    utterances: &[Utterance],
    vocab: &Vocabulary,
    mode_tokens: Tokenization,
    list: &BiasList,
    gold: &BiasList,
    cfg: &DecodeConfig,
    grid: &[f64],
) -> Result<Vec<AlphaRow>> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    grid.iter()
        .map(|&a| {
            let c = DecodeConfig {
                alpha_bonus: a,
                ..cfg.clone()
            };
            let e = evaluate(model, utterances, vocab, mode_tokens, list, gold, &c, DecodeMode::Bpb, false)?;
            Ok(AlphaRow {
                alpha_bonus: a,
                report: e.report,
            })
        })
        .collect()
}

pub fn alpha_csv(rows: &[AlphaRow]) -> String {
    let mut s = format!("alpha_bonus,{}\n", EvalReport::csv_header());
    for r in rows {
        s.push_str(&format!("{},{}\n", r.alpha_bonus, r.report.csv_fields()));
    }
    s
}

/// Teacher-forced losses and bias-index accuracy over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedStats {
    pub batt: f64,
    pub bidx: f64,
    /// Positions labelled with a real phrase whose argmax index is right.
    pub entity_correct: usize,
    pub entity_positions: usize,
}

impl TeacherForcedStats {
    pub fn index_accuracy(&self) -> f64 {
        if self.entity_positions == 0 {
            0.0
        } else {
            self.entity_correct as f64 / self.entity_positions as f64
        }
    }
}

/// Decoder inputs, token targets and index labels of an utterance annotated
/// with its entity spans (entity `e` is list index `e + 1`).
pub fn gold_targets(u: &Utterance, vocab: &Vocabulary, mode: Tokenization) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let tokens = u.tokens(vocab, mode)?;
    let spans: Vec<(Span, usize)> = u
        .entities
        .iter()
        .map(|e| (Span::new(e.start, e.len), e.entity + 1))
        .collect();
    let ann = annotate(&tokens, &spans)?;
    let mut input = vec![SOS];
    input.extend(&ann.tokens);
    let mut targets = ann.tokens.clone();
    targets.push(EOS);
    let mut labels = ann.labels;
    labels.push(0);
    Ok((input, targets, labels))
}

/// Runs the decoder teacher-forced on each utterance's gold annotation with
/// `list` (normally the entity inventory).
pub fn teacher_forced_stats(
    model: &Model,
    utterances: &[Utterance],
    vocab: &Vocabulary,
    mode: Tokenization,
    list: &BiasList,
) -> Result<TeacherForcedStats> {
    let enc = model.encode_bias(list)?;
    let mut stats = TeacherForcedStats::default();
    for u in utterances {
        let (input, targets, labels) = gold_targets(u, vocab, mode)?;
        if labels.iter().any(|&l| l >= list.len()) {
            return Err(Error::Invariant(format!("{}: entity index outside the list", u.id)));
        }
        let h = model.encode_audio(&u.features())?;
        let mem = model.memory(&h, &enc)?;
        let mut tape = Tape::new(&model.store);
        let m = mem.attach(&mut tape);
        let out = model.decoder.forward(&mut tape, &input, &m, None)?;
        let b = batt_loss(&mut tape, out.token_logits, &targets)?;
        let i = bidx_loss(&mut tape, out.index_logits, &labels)?;
        stats.batt += tape.value(b).item();
        stats.bidx += tape.value(i).item();
        let idx = tape.value(out.index_logits);
        for (s, &l) in labels.iter().enumerate() {
            if l > 0 {
                stats.entity_positions += 1;
                if argmax(idx.row(s)) == l {
                    stats.entity_correct += 1;
                }
            }
        }
    }
    let n = utterances.len().max(1) as f64;
    stats.batt /= n;
    stats.bidx /= n;
    Ok(stats)
}
