//! Levenshtein alignment and WER split into bias and non-bias errors.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bias::{BiasList, Span};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitution { r: usize, h: usize },
    Deletion { r: usize },
    Insertion { h: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn distance(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count()
    }

    /// Rebuilds the hypothesis from the reference and the alignment.
    pub fn apply<T: Clone>(&self, reference: &[T], hypothesis: &[T]) -> Vec<T> {
        let mut out = Vec::new();
        for op in &self.ops {
            match *op {
                EditOp::Match { r, .. } => out.push(reference[r].clone()),
                EditOp::Substitution { h, .. } | EditOp::Insertion { h } => out.push(hypothesis[h].clone()),
                EditOp::Deletion { .. } => {}
            }
        }
        out
    }
}

/// Minimum edit alignment. On equal cost the backtrace prefers match, then
/// substitution, deletion and insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            let prev = d[(i - 1) * w + j - 1];
            if same && here == prev {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && here == prev + 1 {
                ops.push(EditOp::Substitution { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Deletion { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insertion { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Edit counts of one category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl Counts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference word. With no reference words the rate is 0 if
    /// there are no errors and infinite otherwise.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.reference_words) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, r) => e as f64 / r as f64,
        }
    }

    fn add(&mut self, o: &Counts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_words += o.reference_words;
    }
}

fn ser_rate<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_rate<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Rate {
        Num(f64),
        Text(String),
    }
    match Rate::deserialize(d)? {
        Rate::Num(v) => Ok(v),
        Rate::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Rate::Text(t) => Err(serde::de::Error::custom(format!("invalid rate `{t}`"))),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Counts,
    pub bias: Counts,
    pub unbias: Counts,
    #[serde(serialize_with = "ser_rate", deserialize_with = "de_rate")]
    pub wer: f64,
    #[serde(serialize_with = "ser_rate", deserialize_with = "de_rate")]
    pub u_wer: f64,
    /// Infinite when bias errors occur without any bias reference words;
    /// serialised as `"inf"`.
    #[serde(serialize_with = "ser_rate", deserialize_with = "de_rate")]
    pub b_wer: f64,
}

impl EvalReport {
    pub fn from_counts(bias: Counts, unbias: Counts) -> Self {
        let mut overall = bias;
        overall.add(&unbias);
        Self {
            overall,
            bias,
            unbias,
            wer: overall.rate(),
            u_wer: unbias.rate(),
            b_wer: bias.rate(),
        }
    }

    /// Bias and non-bias counts add up to the overall counts.
    pub fn check_partition(&self) -> Result<()> {
        let mut sum = self.bias;
        sum.add(&self.unbias);
        if sum != self.overall {
            return Err(Error::Invariant(format!(
                "bias {:?} + unbias {:?} != overall {:?}",
                self.bias, self.unbias, self.overall
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "wer,u_wer,b_wer,sub,del,ins,ref_words,bias_errors,bias_ref_words,unbias_errors,unbias_ref_words"
    }

    pub fn csv_fields(&self) -> String {
        let r = |v: f64| if v.is_finite() { format!("{v:.6}") } else { "inf".into() };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r(self.wer),
            r(self.u_wer),
            r(self.b_wer),
            self.overall.substitutions,
            self.overall.deletions,
            self.overall.insertions,
            self.overall.reference_words,
            self.bias.errors(),
            self.bias.reference_words,
            self.unbias.errors(),
            self.unbias.reference_words
        )
    }
}

/// Scores one utterance. Reference words inside `bias_spans` are bias
/// words; substitutions and deletions follow the reference word. A maximal
/// run of inserted words counts as bias only if it equals a phrase of
/// `list` exactly.
pub fn score<T: PartialEq>(
    reference: &[T],
    hypothesis: &[T],
    bias_spans: &[Span],
    list: &[Vec<T>],
) -> Result<EvalReport> {
    let mut in_bias = vec![false; reference.len()];
    for s in bias_spans {
        if s.end() > reference.len() {
            return Err(Error::InvalidSpan(format!(
                "bias span [{}, {}) outside reference of length {}",
                s.start,
                s.end(),
                reference.len()
            )));
        }
        in_bias[s.start..s.end()].iter_mut().for_each(|b| *b = true);
    }
    let mut bias = Counts::default();
    let mut unbias = Counts::default();
    for &b in &in_bias {
        if b {
            bias.reference_words += 1;
        } else {
            unbias.reference_words += 1;
        }
    }
    let alignment = align(reference, hypothesis);
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, bias: &mut Counts, unbias: &mut Counts| {
        if run.is_empty() {
            return;
        }
        let matches_phrase = list.iter().any(|p| {
            p.len() == run.len() && p.iter().zip(run.iter()).all(|(a, &h)| *a == hypothesis[h])
        });
        if matches_phrase {
            bias.insertions += run.len();
        } else {
            unbias.insertions += run.len();
        }
        run.clear();
    };
    for op in &alignment.ops {
        match *op {
            EditOp::Insertion { h } => {
                run.push(h);
                continue;
            }
            EditOp::Match { .. } => {}
            EditOp::Substitution { r, .. } => {
                if in_bias[r] {
                    bias.substitutions += 1;
                } else {
                    unbias.substitutions += 1;
                }
            }
            EditOp::Deletion { r } => {
                if in_bias[r] {
                    bias.deletions += 1;
                } else {
                    unbias.deletions += 1;
                }
            }
        }
        flush(&mut run, &mut bias, &mut unbias);
    }
    flush(&mut run, &mut bias, &mut unbias);
    Ok(EvalReport::from_counts(bias, unbias))
}

/// [`score`] against the real phrases of a [`BiasList`].
pub fn score_with_list(
    reference: &[usize],
    hypothesis: &[usize],
    bias_spans: &[Span],
    list: &BiasList,
) -> Result<EvalReport> {
    score(reference, hypothesis, bias_spans, list.real_phrases())
}

/// Pools counts over utterances and recomputes every rate.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> EvalReport {
    let mut bias = Counts::default();
    let mut unbias = Counts::default();
    for r in reports {
        bias.add(&r.bias);
        unbias.add(&r.unbias);
    }
    EvalReport::from_counts(bias, unbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = recursive_distance(ra, rb) + usize::from(x != y);
                let del = recursive_distance(ra, b) + 1;
                let ins = recursive_distance(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn identical_and_substitution() {
        let a = align(&words("a b c"), &words("a b c"));
        assert_eq!(a.distance(), 0);
        assert!(a.ops.iter().all(|o| matches!(o, EditOp::Match { .. })));
        let a = align(&words("a b c"), &words("a x c"));
        assert_eq!(a.distance(), 1);
        assert_eq!(a.ops[1], EditOp::Substitution { r: 1, h: 1 });
    }

    #[test]
    fn tie_break_prefers_substitution_over_indel() {
        // "a b" -> "b c": two substitutions or delete+insert, both cost 2
        let a = align(&[1, 2], &[2, 3]);
        assert_eq!(a.distance(), 2);
        assert_eq!(
            a.ops,
            vec![EditOp::Substitution { r: 0, h: 0 }, EditOp::Substitution { r: 1, h: 1 }]
        );
    }

    proptest! {
        #[test]
        fn matches_recursive_distance(
            r in proptest::collection::vec(0u8..3, 0..=8),
            h in proptest::collection::vec(0u8..3, 0..=8),
        ) {
            let a = align(&r, &h);
            prop_assert_eq!(a.distance(), recursive_distance(&r, &h));
            prop_assert_eq!(a.apply(&r, &h), h.clone());
        }

        #[test]
        fn attribution_partitions_errors(
            r in proptest::collection::vec(0u8..4, 0..=10),
            h in proptest::collection::vec(0u8..4, 0..=10),
            start in 0usize..10,
            len in 0usize..4,
        ) {
            let spans: Vec<Span> = if start + len <= r.len() && len > 0 {
                vec![Span::new(start, len)]
            } else {
                vec![]
            };
            let list = vec![vec![1u8, 2], vec![3]];
            let rep = score(&r, &h, &spans, &list).unwrap();
            rep.check_partition().unwrap();
            prop_assert_eq!(rep.bias.errors() + rep.unbias.errors(), rep.overall.errors());
            prop_assert_eq!(rep.overall.errors(), align(&r, &h).distance());
            let reversed: Vec<Vec<u8>> = list.iter().rev().cloned().collect();
            prop_assert_eq!(score(&r, &h, &spans, &reversed).unwrap(), rep);
        }
    }

    #[test]
    fn perfect_hypothesis() {
        let r = words("call john smith now");
        let rep = score(&r, &r, &[Span::new(1, 2)], &[words("john smith")]).unwrap();
        assert_eq!((rep.wer, rep.u_wer, rep.b_wer), (0.0, 0.0, 0.0));
    }

    #[test]
    fn misspelt_bias_word() {
        let r = words("call john smith now");
        let h = words("call jon smith now");
        let rep = score(&r, &h, &[Span::new(1, 2)], &[words("john smith")]).unwrap();
        assert_eq!(rep.b_wer, 0.5);
        assert_eq!(rep.u_wer, 0.0);
        assert_eq!(rep.wer, 0.25);
    }

    #[test]
    fn inserted_bias_phrase_counts_as_bias() {
        let r = words("call me now");
        let h = words("call john smith me now");
        let rep = score(&r, &h, &[], &[words("john smith")]).unwrap();
        assert_eq!(rep.bias.insertions, 2);
        assert_eq!(rep.unbias.insertions, 0);
        assert_eq!(rep.b_wer, f64::INFINITY);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"b_wer\":\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);

        // only part of the phrase inserted: not a bias insertion
        let h = words("call john me now");
        let rep = score(&r, &h, &[], &[words("john smith")]).unwrap();
        assert_eq!(rep.unbias.insertions, 1);
        // run longer than any phrase
        let h = words("call john smith jr me now");
        let rep = score(&r, &h, &[], &[words("john smith")]).unwrap();
        assert_eq!(rep.unbias.insertions, 3);
    }

    #[test]
    fn aggregate_pools_counts() {
        let a = score(&[1, 2], &[1, 3], &[], &[]).unwrap();
        let b = score(&[1, 2], &[1, 2], &[], &[]).unwrap();
        assert_eq!(aggregate([&a]), a);
        let ab = aggregate([&a, &b]);
        assert_eq!(ab.wer, 0.25);
        assert_eq!(aggregate([&b, &a]), ab);
    }

    #[test]
    fn csv_row_has_header_width() {
        let rep = score(&[1, 2], &[1, 3], &[Span::new(1, 1)], &[]).unwrap();
        assert_eq!(
            rep.csv_fields().split(',').count(),
            EvalReport::csv_header().split(',').count()
        );
    }
}
