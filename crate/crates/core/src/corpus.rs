//! Synthetic token-to-feature corpus with confusable entity phrases.
//!
//! Every word has a random prototype vector; an utterance's frames repeat
//! each word's prototype a few times with Gaussian noise. Some words come in
//! homophone pairs: a common word and a rare twin whose prototype differs
//! only by a small offset. Entity phrases are built mostly from rare twins,
//! so without context a recogniser tends to output the common twin.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bias::{BiasList, Span};
use crate::config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{Tokenization, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Ordinary words `w0, w1, ...`.
    pub vocab_size: usize,
    /// Rare twins `h0, h1, ...` of the first common words.
    pub homophones: usize,
    /// Prototype distance scale between a word and its rare twin.
    pub homophone_offset: f64,
    /// Sampling weight of a rare twin in ordinary text (common words have 1).
    pub rare_weight: f64,
    /// Number of entity phrases in the inventory.
    pub entities: usize,
    pub entity_min_len: usize,
    pub entity_max_len: usize,
    /// Probability that an entity token is a rare twin rather than a common word.
    pub entity_rare_prob: f64,
    /// Random entity-like phrases that never occur in speech.
    pub distractors: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of dev and test utterances carrying one entity.
    pub injection_prob: f64,
    /// The same for the training split, where entities should stay rare.
    pub train_injection_prob: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            homophones: 20,
            homophone_offset: 0.05,
            rare_weight: 0.25,
            entities: 10,
            entity_min_len: 2,
            entity_max_len: 4,
            entity_rare_prob: 0.75,
            distractors: 0,
            train_utterances: 3000,
            dev_utterances: 50,
            test_utterances: 100,
            min_words: 3,
            max_words: 7,
            injection_prob: 0.5,
            train_injection_prob: 0.05,
            min_frames: 4,
            max_frames: 6,
            feature_dim: 16,
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("entities", self.entities),
            ("entity_min_len", self.entity_min_len),
            ("train_utterances", self.train_utterances),
            ("dev_utterances", self.dev_utterances),
            ("test_utterances", self.test_utterances),
            ("min_words", self.min_words),
            ("min_frames", self.min_frames),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.homophones > self.vocab_size {
            return Err(Error::Config("homophones cannot exceed vocab_size".into()));
        }
        if self.entity_max_len < self.entity_min_len
            || self.max_words < self.min_words
            || self.max_frames < self.min_frames
        {
            return Err(Error::Config("a max bound is below its min bound".into()));
        }
        for (name, p) in [
            ("injection_prob", self.injection_prob),
            ("train_injection_prob", self.train_injection_prob),
            ("entity_rare_prob", self.entity_rare_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.noise_std < 0.0 || self.homophone_offset < 0.0 || self.rare_weight < 0.0 {
            return Err(Error::Config("noise, offset and weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// An entity occurrence: `len` words from `start`, inventory entry `entity`
/// (0-based; list index `entity + 1` in [`Corpus::entity_list`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub len: usize,
    pub entity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// `T×F` feature frames.
    pub frames: Vec<Vec<f64>>,
    pub entities: Vec<EntitySpan>,
}

impl Utterance {
    pub fn features(&self) -> Tensor {
        let cols = self.frames.first().map_or(0, Vec::len);
        let data = self.frames.iter().flatten().copied().collect();
        Tensor::new(vec![self.frames.len(), cols], data).expect("rectangular frames")
    }

    pub fn tokens(&self, vocab: &Vocabulary, mode: Tokenization) -> Result<Vec<usize>> {
        vocab.encode(&self.text, mode, 0)
    }

    pub fn entity_spans(&self) -> Vec<Span> {
        self.entities.iter().map(|e| Span::new(e.start, e.len)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub words: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub entities: Vec<Vec<String>>,
    pub distractors: Vec<Vec<String>>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn common(i: usize) -> String {
    format!("w{i}")
}

fn rare(i: usize) -> String {
    format!("h{i}")
}

struct Sampler<'a> {
    spec: &'a CorpusSpec,
    words: &'a [String],
    prototypes: &'a [Vec<f64>],
    entities: &'a [Vec<String>],
    index: std::collections::HashMap<&'a str, usize>,
}

impl Sampler<'_> {
    fn ordinary_word<R: Rng>(&self, rng: &mut R) -> usize {
        let v = self.spec.vocab_size;
        let total = v as f64 + self.spec.homophones as f64 * self.spec.rare_weight;
        let x = rng.gen::<f64>() * total;
        if x < v as f64 || self.spec.homophones == 0 {
            (x as usize).min(v - 1)
        } else {
            let r = ((x - v as f64) / self.spec.rare_weight) as usize;
            v + r.min(self.spec.homophones - 1)
        }
    }

    fn utterance<R: Rng>(&self, rng: &mut R, id: String, injection: f64) -> Utterance {
        let s = self.spec;
        let n = rng.gen_range(s.min_words..=s.max_words);
        let mut words: Vec<String> = (0..n).map(|_| self.words[self.ordinary_word(rng)].clone()).collect();
        let mut entities = Vec::new();
        if rng.gen::<f64>() < injection {
            let e = rng.gen_range(0..self.entities.len());
            let at = rng.gen_range(0..=words.len());
            let phrase = &self.entities[e];
            words.splice(at..at, phrase.iter().cloned());
            entities.push(EntitySpan {
                start: at,
                len: phrase.len(),
                entity: e,
            });
        }
        let noise = Normal::new(0.0, s.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut frames = Vec::new();
        for w in &words {
            let proto = &self.prototypes[self.index[w.as_str()]];
            for _ in 0..rng.gen_range(s.min_frames..=s.max_frames) {
                frames.push(
                    proto
                        .iter()
                        .map(|p| if s.noise_std > 0.0 { p + noise.sample(rng) } else { *p })
                        .collect(),
                );
            }
        }
        Utterance {
            id,
            text: words.join(" "),
            frames,
            entities,
        }
    }
}

/// Builds the word inventory, prototypes, entities and the three splits.
/// Fully determined by `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut words: Vec<String> = (0..spec.vocab_size).map(common).collect();
    words.extend((0..spec.homophones).map(rare));

    let f = spec.feature_dim;
    let mut prototypes: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..f).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..spec.homophones {
        let twin: Vec<f64> = prototypes[i]
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p + spec.homophone_offset * z
            })
            .collect();
        prototypes.push(twin);
    }

    let phrase = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(spec.entity_min_len..=spec.entity_max_len);
        (0..len)
            .map(|_| {
                if spec.homophones > 0 && rng.gen::<f64>() < spec.entity_rare_prob {
                    rare(rng.gen_range(0..spec.homophones))
                } else {
                    common(rng.gen_range(0..spec.vocab_size))
                }
            })
            .collect()
    };
    let mut entities: Vec<Vec<String>> = Vec::with_capacity(spec.entities);
    let mut distractors: Vec<Vec<String>> = Vec::with_capacity(spec.distractors);
    let mut attempts = 0;
    while entities.len() + distractors.len() < spec.entities + spec.distractors {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config("cannot draw enough distinct entity phrases".into()));
        }
        let p = phrase(&mut rng);
        if entities.contains(&p) || distractors.contains(&p) {
            continue;
        }
        if entities.len() < spec.entities {
            entities.push(p);
        } else {
            distractors.push(p);
        }
    }

    let sampler = Sampler {
        spec,
        words: &words,
        prototypes: &prototypes,
        entities: &entities,
        index: words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect(),
    };
    let split = |name: &str, count: usize, salt: u64, injection: f64| -> Vec<Utterance> {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..count)
            .map(|i| sampler.utterance(&mut r, format!("{name}-{i:04}"), injection))
            .collect()
    };
    let train = split("train", spec.train_utterances, 1, spec.train_injection_prob);
    let dev = split("dev", spec.dev_utterances, 2, spec.injection_prob);
    let test = split("test", spec.test_utterances, 3, spec.injection_prob);
    Ok(Corpus {
        spec: spec.clone(),
        words,
        prototypes,
        entities,
        distractors,
        train,
        dev,
        test,
    })
}

fn write_jsonl(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for u in utts {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_phrases(path: &Path, phrases: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    for p in phrases {
        s.push_str(&p.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_phrases(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

impl Corpus {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.words.iter().cloned())
    }

    /// The entity inventory in file order; entity `e` is list index `e + 1`.
    pub fn entity_list(&self, vocab: &Vocabulary, l_max: usize) -> Result<BiasList> {
        self.phrase_list(vocab, l_max, false)
    }

    /// Entities followed by the distractor phrases.
    pub fn entity_list_with_distractors(&self, vocab: &Vocabulary, l_max: usize) -> Result<BiasList> {
        self.phrase_list(vocab, l_max, true)
    }

    fn phrase_list(&self, vocab: &Vocabulary, l_max: usize, distractors: bool) -> Result<BiasList> {
        let extra = if distractors { &self.distractors[..] } else { &[] };
        let phrases = self
            .entities
            .iter()
            .chain(extra)
            .enumerate()
            .map(|(i, p)| vocab.encode(&p.join(" "), Tokenization::Word, i + 1))
            .collect::<Result<Vec<_>>>()?;
        BiasList::new(phrases, l_max)
    }

    /// Writes `corpus.txt`, `vocab.txt`, `prototypes.json`, `entities.txt`,
    /// `distractors.txt` and one JSONL file per split.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        config::save_kv(&self.spec, dir.join("corpus.txt"))?;
        self.vocabulary()?.save(dir.join("vocab.txt"))?;
        fs::write(dir.join("prototypes.json"), serde_json::to_string(&self.prototypes)?)?;
        write_phrases(&dir.join("entities.txt"), &self.entities)?;
        write_phrases(&dir.join("distractors.txt"), &self.distractors)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("dev.jsonl"), &self.dev)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: CorpusSpec = config::load_kv(dir.join("corpus.txt"))?;
        let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
        Ok(Self {
            spec,
            words: vocab.regular_ids().map(|i| vocab.token(i).to_string()).collect(),
            prototypes: serde_json::from_str(&fs::read_to_string(dir.join("prototypes.json"))?)?,
            entities: read_phrases(&dir.join("entities.txt"))?,
            distractors: read_phrases(&dir.join("distractors.txt"))?,
            train: read_jsonl(dir.join("train.jsonl"))?,
            dev: read_jsonl(dir.join("dev.jsonl"))?,
            test: read_jsonl(dir.join("test.jsonl"))?,
        })
    }
}

/// Shuffled copy of `0..n`, used for epoch ordering.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            train_utterances: 20,
            dev_utterances: 5,
            test_utterances: 10,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_and_byte_identical_on_disk() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.save(da.path()).unwrap();
        b.save(db.path()).unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "entities.txt", "vocab.txt", "corpus.txt"] {
            assert_eq!(
                fs::read(da.path().join(f)).unwrap(),
                fs::read(db.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(Corpus::load(da.path()).unwrap(), a);
    }

    #[test]
    fn no_injection_no_entities() {
        let spec = CorpusSpec {
            injection_prob: 0.0,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        assert!(c.test.iter().all(|u| u.entities.is_empty()));
    }

    #[test]
    fn entity_spans_point_at_entity_words() {
        let c = generate_corpus(&small()).unwrap();
        let vocab = c.vocabulary().unwrap();
        let list = c.entity_list(&vocab, 4).unwrap();
        for u in c.train.iter().chain(&c.test) {
            let toks = u.tokens(&vocab, Tokenization::Word).unwrap();
            for e in &u.entities {
                assert_eq!(&toks[e.start..e.start + e.len], list.phrase(e.entity + 1));
            }
        }
    }

    #[test]
    fn noiseless_single_frames_decode_by_nearest_prototype() {
        let spec = CorpusSpec {
            noise_std: 0.0,
            min_frames: 1,
            max_frames: 1,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        for u in &c.test {
            let decoded: Vec<&str> = u
                .frames
                .iter()
                .map(|f| {
                    let dist = |p: &Vec<f64>| p.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let best = (0..c.prototypes.len())
                        .min_by(|&a, &b| dist(&c.prototypes[a]).total_cmp(&dist(&c.prototypes[b])))
                        .unwrap();
                    c.words[best].as_str()
                })
                .collect();
            assert_eq!(decoded.join(" "), u.text);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_corpus(&CorpusSpec { injection_prob: 1.5, ..small() }).is_err());
        assert!(generate_corpus(&CorpusSpec { max_words: 1, ..small() }).is_err());
    }
}
