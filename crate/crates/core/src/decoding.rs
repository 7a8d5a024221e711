//! Attention beam search and bias-phrase-boosted (BPB) beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bias::BiasList;
use crate::error::{Error, Result};
use crate::model::{FrozenMemory, Model, StepOutput};
use crate::vocab::{BLANK, EOB, EOS, NO_BIAS, PAD, SOB, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub k_beam: usize,
    pub k_score: usize,
    pub alpha_bonus: f64,
    pub alpha_pen: f64,
    /// Maximum number of emitted tokens including `<eos>`; 0 picks a
    /// length from the input.
    pub max_len: usize,
    pub end_token: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k_beam: 20,
            k_score: 50,
            alpha_bonus: 1.0,
            alpha_pen: 10.0,
            max_len: 0,
            end_token: EOS,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_beam == 0 || self.k_score == 0 {
            return Err(Error::Config("k_beam and k_score must be at least 1".into()));
        }
        if !(self.alpha_bonus >= 0.0 && self.alpha_pen >= 0.0) {
            return Err(Error::Config(format!(
                "alpha_bonus and alpha_pen must be nonnegative, got {} and {}",
                self.alpha_bonus, self.alpha_pen
            )));
        }
        Ok(())
    }
}

/// Where a hypothesis stands relative to the bias phrases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchState {
    /// Outside any `<sob>…<eob>` block.
    Inactive,
    /// Inside a block whose interior so far equals the first `matched`
    /// tokens of `phrase`.
    Active { phrase: usize, matched: usize },
    /// Inside a block that no longer matches any detected phrase.
    Broken,
}

impl MatchState {
    /// State after emitting `token` while the estimated phrase index is `index`.
    pub fn advance(self, token: usize, index: usize, list: &BiasList) -> Self {
        match (self, token) {
            (_, EOB) => MatchState::Inactive,
            (MatchState::Inactive, SOB) if index > 0 => MatchState::Active {
                phrase: index,
                matched: 0,
            },
            (_, SOB) => MatchState::Broken,
            (MatchState::Active { phrase, matched }, t) => {
                let p = list.phrase(phrase);
                if matched < p.len() && p[matched] == t {
                    MatchState::Active {
                        phrase,
                        matched: matched + 1,
                    }
                } else {
                    MatchState::Broken
                }
            }
            (s, _) => s,
        }
    }
}

/// One emitted token of a hypothesis with the bias index estimated at that
/// step and the match state before the emission.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub token: usize,
    pub index: usize,
    pub state: MatchState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with `<sos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub state: MatchState,
    pub trace: Vec<TraceStep>,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: vec![SOS],
            score: 0.0,
            state: MatchState::Inactive,
            trace: Vec::new(),
        }
    }

    pub fn emitted(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Cumulative score divided by the number of emitted tokens.
    pub fn normalized_score(&self) -> f64 {
        if self.emitted() == 0 {
            self.score
        } else {
            self.score / self.emitted() as f64
        }
    }
}

/// Best-first with a fixed tie-break on the token prefix.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score()
        .total_cmp(&a.normalized_score())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Something that yields next-token and bias-index distributions.
pub trait StepScorer {
    fn score(&self, prefix: &[usize]) -> Result<StepOutput>;

    /// Output length used when the config leaves `max_len` at 0.
    fn default_max_len(&self) -> usize {
        64
    }
}

/// Scores prefixes with a trained model against a fixed audio/bias memory.
pub struct NeuralScorer<'a> {
    model: &'a Model,
    memory: FrozenMemory,
    k_score: usize,
    frames: usize,
}

impl<'a> NeuralScorer<'a> {
    pub fn new(model: &'a Model, memory: FrozenMemory, k_score: usize) -> Self {
        let frames = memory.audio.first().map_or(0, |(k, _)| k.rows());
        Self {
            model,
            memory,
            k_score,
            frames,
        }
    }
}

impl StepScorer for NeuralScorer<'_> {
    fn score(&self, prefix: &[usize]) -> Result<StepOutput> {
        self.model.step(prefix, &self.memory, self.k_score)
    }

    fn default_max_len(&self) -> usize {
        2 * self.frames + 4
    }
}

/// Tokens a search may append. Padding, `<sos>`, the CTC blank and the
/// no-bias token are never emitted.
pub fn is_emittable(token: usize) -> bool {
    !matches!(token, PAD | SOS | BLANK | NO_BIAS)
}

/// Additive log-domain shaping of one step's scores.
///
/// With `index == 0` the scores of `<sob>` and `<eob>` drop by `alpha_pen`.
/// Otherwise: outside a block `<sob>` gains `alpha_bonus`; inside a block
/// matching phrase `index`, the phrase's next token gains `alpha_bonus`, or
/// `<eob>` once the phrase is complete.
pub fn shape_scores(
    log_probs: &[f64],
    index: usize,
    state: MatchState,
    list: &BiasList,
    alpha_bonus: f64,
    alpha_pen: f64,
) -> Vec<f64> {
    let mut s = log_probs.to_vec();
    if index == 0 {
        s[SOB] -= alpha_pen;
        s[EOB] -= alpha_pen;
        return s;
    }
    match state {
        MatchState::Inactive => s[SOB] += alpha_bonus,
        MatchState::Active { phrase, matched } if phrase == index => {
            let p = list.phrase(phrase);
            let target = if matched < p.len() { p[matched] } else { EOB };
            s[target] += alpha_bonus;
        }
        _ => {}
    }
    s
}

/// A bias span in the stripped output: phrase index (0 when the block was
/// opened without a detected phrase) and the half-open token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSpan {
    pub phrase: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Emitted tokens without `<sos>`/`<eos>`, specials kept.
    pub annotated: Vec<usize>,
    /// `annotated` with `<sob>`/`<eob>` removed.
    pub tokens: Vec<usize>,
    /// Length-normalised score.
    pub score: f64,
    /// False when no hypothesis reached the end token.
    pub finished: bool,
    pub spans: Vec<BiasSpan>,
    pub trace: Vec<TraceStep>,
}

fn result_of(h: Hypothesis, finished: bool, end: usize) -> DecodeResult {
    let mut annotated: Vec<usize> = h.tokens[1..].to_vec();
    if annotated.last() == Some(&end) {
        annotated.pop();
    }
    let mut tokens = Vec::with_capacity(annotated.len());
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in annotated.iter().enumerate() {
        match t {
            SOB => {
                if let Some((phrase, start)) = open.take() {
                    spans.push(BiasSpan { phrase, start, end: tokens.len() });
                }
                let step = h.trace[i];
                let phrase = if step.state == MatchState::Inactive { step.index } else { 0 };
                open = Some((phrase, tokens.len()));
            }
            EOB => {
                if let Some((phrase, start)) = open.take() {
                    spans.push(BiasSpan { phrase, start, end: tokens.len() });
                }
            }
            _ => tokens.push(t),
        }
    }
    if let Some((phrase, start)) = open {
        spans.push(BiasSpan { phrase, start, end: tokens.len() });
    }
    DecodeResult {
        score: h.normalized_score(),
        annotated,
        tokens,
        finished,
        spans,
        trace: h.trace,
    }
}

fn search<S: StepScorer>(
    scorer: &S,
    list: &BiasList,
    cfg: &DecodeConfig,
    shaping: bool,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let max_len = if cfg.max_len == 0 {
        scorer.default_max_len()
    } else {
        cfg.max_len
    };
    let mut running = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &running {
            let out = scorer.score(&hyp.tokens)?;
            if out.index >= list.len() {
                return Err(Error::Invariant(format!(
                    "bias index {} outside a list of {} phrases",
                    out.index,
                    list.len()
                )));
            }
            let scores = if shaping {
                shape_scores(&out.log_probs, out.index, hyp.state, list, cfg.alpha_bonus, cfg.alpha_pen)
            } else {
                out.log_probs.clone()
            };
            for (tok, &s) in scores.iter().enumerate() {
                if !is_emittable(tok) || !s.is_finite() {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let mut trace = hyp.trace.clone();
                trace.push(TraceStep {
                    token: tok,
                    index: out.index,
                    state: hyp.state,
                });
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + s,
                    state: hyp.state.advance(tok, out.index, list),
                    trace,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.k_beam);
        running.clear();
        for c in candidates {
            if c.tokens.last() == Some(&cfg.end_token) {
                finished.push(c);
            } else {
                running.push(c);
            }
        }
        if finished.len() >= cfg.k_beam || running.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    if let Some(best) = finished.into_iter().next() {
        return Ok(result_of(best, true, cfg.end_token));
    }
    running.sort_by(rank);
    let best = running
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invariant("beam search produced no hypothesis".into()))?;
    Ok(result_of(best, false, cfg.end_token))
}

/// Length-normalised beam search on the model scores alone.
pub fn beam_search<S: StepScorer>(scorer: &S, list: &BiasList, cfg: &DecodeConfig) -> Result<DecodeResult> {
    search(scorer, list, cfg, false)
}

/// Beam search with the BPB bonus/penalty shaping applied at every step.
pub fn bpb_beam_search<S: StepScorer>(scorer: &S, list: &BiasList, cfg: &DecodeConfig) -> Result<DecodeResult> {
    search(scorer, list, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::log_softmax;
    use std::hash::{Hash, Hasher};

    /// Deterministic pseudo-random distributions keyed on the prefix.
    struct HashScorer {
        classes: usize,
        rows: usize,
        salt: u64,
    }

    impl HashScorer {
        fn values(&self, prefix: &[usize], n: usize, tag: u64) -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let mut h = std::collections::hash_map::DefaultHasher::new();
                    (prefix, i, tag, self.salt).hash(&mut h);
                    (h.finish() % 10_000) as f64 / 1_000.0
                })
                .collect()
        }
    }

    impl StepScorer for HashScorer {
        fn score(&self, prefix: &[usize]) -> Result<StepOutput> {
            let logits = self.values(prefix, self.classes, 0);
            let mut log_probs = vec![0.0; self.classes];
            log_softmax(&logits, &mut log_probs);
            let mut q = self.values(prefix, self.rows, 1);
            crate::tensor::kernels::softmax_in_place(&mut q);
            let index = crate::tensor::kernels::argmax(&q);
            Ok(StepOutput {
                log_probs,
                index_probs: q,
                index,
            })
        }
    }

    fn cfg(k_beam: usize, max_len: usize, bonus: f64, pen: f64) -> DecodeConfig {
        DecodeConfig {
            k_beam,
            k_score: 50,
            alpha_bonus: bonus,
            alpha_pen: pen,
            max_len,
            end_token: EOS,
        }
    }

    /// Every `<eos>`-terminated sequence of emittable tokens up to `max_len`
    /// emissions, scored under `shaping`.
    fn exhaustive<S: StepScorer>(
        scorer: &S,
        list: &BiasList,
        c: &DecodeConfig,
        shaping: bool,
    ) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(vec![SOS], 0.0, MatchState::Inactive)];
        while let Some((tokens, score, state)) = stack.pop() {
            let out = scorer.score(&tokens).unwrap();
            let s = if shaping {
                shape_scores(&out.log_probs, out.index, state, list, c.alpha_bonus, c.alpha_pen)
            } else {
                out.log_probs.clone()
            };
            for tok in (0..s.len()).filter(|&t| is_emittable(t)) {
                let mut next = tokens.clone();
                next.push(tok);
                let total = score + s[tok];
                if tok == EOS {
                    let norm = total / (next.len() - 1) as f64;
                    let better = match &best {
                        None => true,
                        Some((bt, bs)) => norm > *bs || (norm == *bs && next < *bt),
                    };
                    if better {
                        best = Some((next, norm));
                    }
                } else if next.len() - 1 < c.max_len {
                    stack.push((next, total, state.advance(tok, out.index, list)));
                }
            }
        }
        best.unwrap()
    }

    fn full_tokens(r: &DecodeResult) -> Vec<usize> {
        let mut t = vec![SOS];
        t.extend(&r.annotated);
        t.push(EOS);
        t
    }

    #[test]
    fn huge_beam_equals_exhaustive_search() {
        // vocabulary: the specials plus two regular tokens
        for salt in 0..30 {
            let scorer = HashScorer { classes: 9, rows: 1, salt };
            let list = BiasList::dummy_only();
            let c = cfg(10_000, 3, 0.0, 0.0);
            let r = beam_search(&scorer, &list, &c).unwrap();
            let (tokens, score) = exhaustive(&scorer, &list, &c, false);
            assert!(r.finished);
            assert_eq!(full_tokens(&r), tokens);
            assert_eq!(r.score, score);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for salt in 0..20 {
            let scorer = HashScorer { classes: 10, rows: 1, salt };
            let list = BiasList::dummy_only();
            let r = beam_search(&scorer, &list, &cfg(1, 6, 0.0, 0.0)).unwrap();
            let mut prefix = vec![SOS];
            for _ in 0..6 {
                let out = scorer.score(&prefix).unwrap();
                let mut best = None;
                for t in (0..10).filter(|&t| is_emittable(t)) {
                    if best.is_none_or(|b: usize| out.log_probs[t] > out.log_probs[b]) {
                        best = Some(t);
                    }
                }
                prefix.push(best.unwrap());
                if best == Some(EOS) {
                    break;
                }
            }
            let mut got = vec![SOS];
            got.extend(&r.annotated);
            if r.finished {
                got.push(EOS);
            }
            assert_eq!(got, prefix);
        }
    }

    #[test]
    fn search_is_deterministic() {
        let scorer = HashScorer { classes: 10, rows: 3, salt: 7 };
        let list = BiasList::new(vec![vec![7, 8], vec![9]], 4).unwrap();
        let c = cfg(4, 8, 1.0, 10.0);
        assert_eq!(
            bpb_beam_search(&scorer, &list, &c).unwrap(),
            bpb_beam_search(&scorer, &list, &c).unwrap()
        );
    }

    #[test]
    fn zero_weights_match_baseline() {
        for salt in 0..30 {
            let scorer = HashScorer { classes: 10, rows: 3, salt };
            let list = BiasList::new(vec![vec![7, 8], vec![9]], 4).unwrap();
            let c = cfg(5, 8, 0.0, 0.0);
            let a = beam_search(&scorer, &list, &c).unwrap();
            let b = bpb_beam_search(&scorer, &list, &c).unwrap();
            assert_eq!(a.annotated, b.annotated);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn shaped_beam_equals_exhaustive_shaped_search() {
        for salt in 0..30 {
            let scorer = HashScorer { classes: 9, rows: 2, salt };
            let list = BiasList::new(vec![vec![7, 8]], 4).unwrap();
            let c = cfg(100_000, 3, 1.5, 2.0);
            let r = bpb_beam_search(&scorer, &list, &c).unwrap();
            let (tokens, score) = exhaustive(&scorer, &list, &c, true);
            assert_eq!(full_tokens(&r), tokens, "salt {salt}");
            assert_eq!(r.score, score);
        }
    }

    #[test]
    fn shaping_only_moves_by_the_constants() {
        let list = BiasList::new(vec![vec![7, 8, 9]], 4).unwrap();
        let lp: Vec<f64> = (0..12).map(|i| -(i as f64) * 0.3 - 0.1).collect();
        let states = [
            MatchState::Inactive,
            MatchState::Broken,
            MatchState::Active { phrase: 1, matched: 0 },
            MatchState::Active { phrase: 1, matched: 2 },
            MatchState::Active { phrase: 1, matched: 3 },
        ];
        for &state in &states {
            for index in 0..2 {
                let s = shape_scores(&lp, index, state, &list, 1.25, 4.5);
                for (a, b) in s.iter().zip(&lp) {
                    let d = a - b;
                    assert!(d == 0.0 || d == 1.25 || d == -4.5, "{d}");
                }
            }
        }
        let s = shape_scores(&lp, 0, MatchState::Inactive, &list, 1.0, 10.0);
        assert_eq!(s[SOB], lp[SOB] - 10.0);
        assert_eq!(s[EOB], lp[EOB] - 10.0);
        let s = shape_scores(&lp, 1, MatchState::Active { phrase: 1, matched: 1 }, &list, 1.0, 10.0);
        assert_eq!(s[8], lp[8] + 1.0);
        let s = shape_scores(&lp, 1, MatchState::Active { phrase: 1, matched: 3 }, &list, 1.0, 10.0);
        assert_eq!(s[EOB], lp[EOB] + 1.0);
    }

    #[test]
    fn match_state_transitions() {
        let list = BiasList::new(vec![vec![7, 8]], 4).unwrap();
        let s = MatchState::Inactive.advance(SOB, 1, &list);
        assert_eq!(s, MatchState::Active { phrase: 1, matched: 0 });
        let s = s.advance(7, 1, &list);
        assert_eq!(s, MatchState::Active { phrase: 1, matched: 1 });
        assert_eq!(s.advance(9, 1, &list), MatchState::Broken);
        let s = s.advance(8, 0, &list).advance(9, 1, &list);
        assert_eq!(s, MatchState::Broken);
        assert_eq!(s.advance(EOB, 0, &list), MatchState::Inactive);
        assert_eq!(MatchState::Inactive.advance(SOB, 0, &list), MatchState::Broken);
        assert_eq!(MatchState::Inactive.advance(EOB, 0, &list), MatchState::Inactive);
        assert_eq!(MatchState::Inactive.advance(9, 1, &list), MatchState::Inactive);
    }

    /// A scorer that knows the sentence "I play a song today" with the
    /// phrase "play a song" at list index 1 and reports index 1 while the
    /// phrase is being spoken.
    struct Scripted;

    const I: usize = 7;
    const PLAY: usize = 8;
    const A: usize = 9;
    const SONG: usize = 10;
    const TODAY: usize = 11;

    impl StepScorer for Scripted {
        fn score(&self, prefix: &[usize]) -> Result<StepOutput> {
            let words: Vec<usize> = prefix.iter().copied().filter(|&t| t > NO_BIAS).collect();
            let sentence = [I, PLAY, A, SONG, TODAY];
            let next = sentence.get(words.len()).copied().unwrap_or(EOS);
            // the model slightly prefers a wrong word inside the phrase
            let mut logits = vec![-5.0; 13];
            logits[next] = 2.0;
            if next == A {
                logits[12] = 2.3;
            }
            logits[SOB] = -1.0;
            logits[EOB] = -1.0;
            // the specials are plausible, though never the top choice, at the phrase edges
            if next == PLAY && prefix.last() != Some(&SOB) {
                logits[SOB] = 1.0;
            }
            if prefix.last() == Some(&SONG) {
                logits[EOB] = 1.0;
            }
            let mut log_probs = vec![0.0; 13];
            log_softmax(&logits, &mut log_probs);
            let inside = matches!(words.len(), 1..=3) || (words.len() == 4 && prefix.last() == Some(&SONG));
            let index = usize::from(inside);
            let mut q = vec![0.1, 0.1];
            q[index] = 0.9;
            Ok(StepOutput {
                log_probs,
                index_probs: q,
                index,
            })
        }
    }

    #[test]
    fn boosted_phrase_is_wrapped_and_matched() {
        let list = BiasList::new(vec![vec![PLAY, A, SONG]], 4).unwrap();
        let plain = beam_search(&Scripted, &list, &cfg(4, 12, 0.0, 0.0)).unwrap();
        assert_eq!(plain.tokens, vec![I, PLAY, 12, SONG, TODAY]);

        let r = bpb_beam_search(&Scripted, &list, &cfg(4, 12, 3.0, 10.0)).unwrap();
        assert_eq!(r.annotated, vec![I, SOB, PLAY, A, SONG, EOB, TODAY]);
        assert_eq!(r.tokens, vec![I, PLAY, A, SONG, TODAY]);
        assert_eq!(r.spans, vec![BiasSpan { phrase: 1, start: 1, end: 4 }]);
        let walk: Vec<MatchState> = r.trace.iter().map(|t| t.state).collect();
        assert_eq!(
            &walk[2..6],
            &[
                MatchState::Active { phrase: 1, matched: 0 },
                MatchState::Active { phrase: 1, matched: 1 },
                MatchState::Active { phrase: 1, matched: 2 },
                MatchState::Active { phrase: 1, matched: 3 },
            ]
        );
    }

    #[test]
    fn unfinished_search_is_flagged() {
        struct NeverEnds;
        impl StepScorer for NeverEnds {
            fn score(&self, _: &[usize]) -> Result<StepOutput> {
                let mut log_probs = vec![-10.0; 8];
                log_probs[7] = -0.01;
                log_probs[EOS] = f64::NEG_INFINITY;
                Ok(StepOutput {
                    log_probs,
                    index_probs: vec![1.0],
                    index: 0,
                })
            }
        }
        let r = beam_search(&NeverEnds, &BiasList::dummy_only(), &cfg(2, 4, 0.0, 0.0)).unwrap();
        assert!(!r.finished);
        assert_eq!(r.tokens, vec![7; 4]);
    }

    #[test]
    fn rejects_invalid_config() {
        let scorer = HashScorer { classes: 9, rows: 1, salt: 0 };
        assert!(beam_search(&scorer, &BiasList::dummy_only(), &cfg(0, 3, 0.0, 0.0)).is_err());
        assert!(bpb_beam_search(&scorer, &BiasList::dummy_only(), &cfg(1, 3, -1.0, 0.0)).is_err());
    }
}
