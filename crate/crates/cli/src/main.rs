use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctxbias::bias::{load_bias_list, BiasList};
use ctxbias::config::{self, ExperimentConfig};
use ctxbias::corpus::{generate_corpus, Corpus, CorpusSpec, Utterance};
use ctxbias::eval::{ablate_alpha, alpha_csv, evaluate, DecodeMode};
use ctxbias::metrics::EvalReport;
use ctxbias::model::{Model, ModelConfig};
use ctxbias::train::{train_with, TrainHooks};
use ctxbias::vocab::Vocabulary;

/// Declares a clap flag group with one optional flag per config field and a
/// method that writes the given flags into the config through its key names.
macro_rules! config_flags {
    ($name:ident for $target:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Args, Debug, Default)]
        struct $name {
            $(
                #[arg(long)]
                $field: Option<$ty>,
            )*
        }

        impl $name {
            #[allow(dead_code)]
            const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn apply(&self, target: &mut $target) -> Result<()> {
                $(
                    if let Some(v) = &self.$field {
                        config::set_kv(target, stringify!($field), &v.to_string())?;
                    }
                )*
                Ok(())
            }
        }
    };
}

config_flags!(ExperimentFlags for ExperimentConfig {
    dim: usize,
    heads: usize,
    ff_dim: usize,
    audio_blocks: usize,
    bias_blocks: usize,
    decoder_blocks: usize,
    subsampling: usize,
    lambda_ctc: f64,
    lambda_batt: f64,
    lambda_bidx: f64,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    warmup_steps: usize,
    grad_clip: f64,
    n_utt: usize,
    l_max: usize,
    dedupe: bool,
    seed: u64,
    dev_every: usize,
    k_beam: usize,
    k_score: usize,
    alpha_bonus: f64,
    alpha_pen: f64,
    max_len: usize,
    tokenization: String,
});

config_flags!(CorpusFlags for CorpusSpec {
    vocab_size: usize,
    homophones: usize,
    homophone_offset: f64,
    rare_weight: f64,
    entities: usize,
    entity_min_len: usize,
    entity_max_len: usize,
    entity_rare_prob: f64,
    distractors: usize,
    train_utterances: usize,
    dev_utterances: usize,
    test_utterances: usize,
    min_words: usize,
    max_words: usize,
    injection_prob: f64,
    train_injection_prob: f64,
    min_frames: usize,
    max_frames: usize,
    feature_dim: usize,
    noise_std: f64,
    seed: u64,
});

#[derive(Parser, Debug)]
#[command(name = "ctxbias", version, about = "Contextual biasing experiments on a synthetic speech corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into a directory.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// `key = value` file with corpus settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: CorpusFlags,
    },
    /// Train a model and write it to a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Decode a split and print one hypothesis per utterance.
    Decode {
        #[command(flatten)]
        common: EvalArgs,
        /// Also write per-utterance records with decoding traces here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode and score a split, writing report files.
    Evaluate {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the BPB bonus weight and write a CSV.
    Ablate {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,5,50")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// `key = value` file with experiment settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ExperimentFlags,
}

impl ExperimentArgs {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config::apply_kv(&mut cfg, &text)?;
        }
        self.flags.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// `none`, `entities`, `entities+distractors`, or a phrase file.
    #[arg(long, default_value = "entities")]
    list: String,
    #[arg(long, default_value = "bpb")]
    mode: String,
    /// Decoding settings; training settings given here are ignored.
    #[command(flatten)]
    exp: ExperimentArgs,
}

struct Run {
    cfg: ExperimentConfig,
    vocab: Vocabulary,
    model: Model,
}

fn load_run(dir: &Path) -> Result<Run> {
    let cfg: ExperimentConfig = config::load_kv(dir.join("config.txt")).context("reading run config")?;
    let vocab = Vocabulary::load(dir.join("vocab.txt")).context("reading run vocabulary")?;
    let model_cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let model = Model::load(model_cfg, dir.join("model.ckpt")).context("reading checkpoint")?;
    Ok(Run { cfg, vocab, model })
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [Utterance]> {
    Ok(match name {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test" => &corpus.test,
        other => bail!("unknown split `{other}` (expected train, dev or test)"),
    })
}

fn pick_list(spec: &str, corpus: &Corpus, vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<BiasList> {
    Ok(match spec {
        "none" => BiasList::dummy_only(),
        "entities" => corpus.entity_list(vocab, cfg.l_max)?,
        "entities+distractors" => corpus.entity_list_with_distractors(vocab, cfg.l_max)?,
        path => load_bias_list(path, vocab, cfg.tokenization, cfg.l_max)
            .with_context(|| format!("loading bias list {path}"))?,
    })
}

struct Prepared<'a> {
    run: Run,
    cfg: ExperimentConfig,
    utterances: &'a [Utterance],
    list: BiasList,
    gold: BiasList,
    mode: DecodeMode,
}

fn prepare<'a>(args: &EvalArgs, corpus: &'a Corpus) -> Result<Prepared<'a>> {
    let run = load_run(&args.run)?;
    if run.vocab != corpus.vocabulary()? {
        bail!("corpus vocabulary differs from the one the model was trained with");
    }
    let cfg = args.exp.resolve(run.cfg.clone())?;
    let list = pick_list(&args.list, corpus, &run.vocab, &cfg)?;
    let gold = corpus.entity_list(&run.vocab, cfg.l_max)?;
    Ok(Prepared {
        utterances: split(corpus, &args.split)?,
        mode: args.mode.parse()?,
        run,
        cfg,
        list,
        gold,
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData { out, config: file, flags } => {
            let mut spec = match file {
                Some(p) => config::load_kv(&p).with_context(|| format!("reading {}", p.display()))?,
                None => CorpusSpec::default(),
            };
            flags.apply(&mut spec)?;
            let corpus = generate_corpus(&spec)?;
            corpus.save(&out)?;
            log::info!(
                "wrote {} / {} / {} utterances to {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Train { data, run, exp } => {
            let cfg = exp.resolve(ExperimentConfig::default())?;
            let corpus = Corpus::load(&data).with_context(|| format!("loading corpus from {}", data.display()))?;
            let vocab = corpus.vocabulary()?;
            let dev_list = corpus.entity_list(&vocab, cfg.l_max)?;
            let hooks = TrainHooks {
                dev: Some((&corpus.dev, &dev_list)),
                on_step: None,
            };
            let outcome = train_with(&cfg, &vocab, corpus.spec.feature_dim, &corpus.train, hooks)?;
            fs::create_dir_all(&run)?;
            outcome.model.save(run.join("model.ckpt"))?;
            fs::write(run.join("model.json"), serde_json::to_string_pretty(&outcome.model.config)? + "\n")?;
            config::save_kv(&cfg, run.join("config.txt"))?;
            vocab.save(run.join("vocab.txt"))?;
            fs::write(run.join("losses.csv"), outcome.losses_csv())?;
            if !outcome.dev.is_empty() {
                let mut s = format!("step,batt,bidx,index_accuracy,{}\n", EvalReport::csv_header());
                for d in &outcome.dev {
                    s.push_str(&format!(
                        "{},{},{},{},{}\n",
                        d.step,
                        d.stats.batt,
                        d.stats.bidx,
                        d.stats.index_accuracy(),
                        d.report.csv_fields()
                    ));
                }
                fs::write(run.join("dev.csv"), s)?;
            }
            if outcome.skipped_ctc > 0 {
                log::warn!("{} CTC terms skipped as infeasible", outcome.skipped_ctc);
            }
            if let Some(step) = outcome.diverged_at {
                bail!("training diverged at step {step}; parameters from step {} were saved", step - 1);
            }
        }
        Command::Decode { common, out } => {
            let corpus = Corpus::load(&common.data)?;
            let p = prepare(&common, &corpus)?;
            let e = evaluate(
                &p.run.model,
                p.utterances,
                &p.run.vocab,
                p.cfg.tokenization,
                &p.list,
                &p.gold,
                &p.cfg.decode(),
                p.mode,
                out.is_some(),
            )?;
            for r in &e.records {
                println!("{}\t{}", r.id, r.text);
            }
            if let Some(path) = out {
                let mut s = String::new();
                for r in &e.records {
                    s.push_str(&serde_json::to_string(r)?);
                    s.push('\n');
                }
                fs::write(path, s)?;
            }
        }
        Command::Evaluate { common, out } => {
            let corpus = Corpus::load(&common.data)?;
            let p = prepare(&common, &corpus)?;
            let e = evaluate(
                &p.run.model,
                p.utterances,
                &p.run.vocab,
                p.cfg.tokenization,
                &p.list,
                &p.gold,
                &p.cfg.decode(),
                p.mode,
                false,
            )?;
            e.write(&out, "")?;
            println!("{}", serde_json::to_string_pretty(&e.report)?);
        }
        Command::Ablate { common, alphas, out } => {
            let corpus = Corpus::load(&common.data)?;
            let p = prepare(&common, &corpus)?;
            let rows = ablate_alpha(
                &p.run.model,
                p.utterances,
                &p.run.vocab,
                p.cfg.tokenization,
                &p.list,
                &p.gold,
                &p.cfg.decode(),
                &alphas,
            )?;
            let csv = alpha_csv(&rows);
            fs::write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flags_cover_every_config_key() {
        let sorted = |f: &[&str]| {
            let mut v: Vec<String> = f.iter().map(|s| s.to_string()).collect();
            v.sort();
            v
        };
        let mut exp = config::keys(&ExperimentConfig::default());
        let mut corpus = config::keys(&CorpusSpec::default());
        exp.sort();
        corpus.sort();
        assert_eq!(sorted(ExperimentFlags::FIELDS), exp);
        assert_eq!(sorted(CorpusFlags::FIELDS), corpus);
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.txt");
        fs::write(&path, "steps = 5\nalpha_bonus = 3\n").unwrap();
        let args = ExperimentArgs {
            config: Some(path),
            flags: ExperimentFlags {
                steps: Some(7),
                tokenization: Some("char".into()),
                ..Default::default()
            },
        };
        let cfg = args.resolve(ExperimentConfig::default()).unwrap();
        assert_eq!((cfg.steps, cfg.alpha_bonus), (7, 3.0));
        assert_eq!(cfg.tokenization, ctxbias::vocab::Tokenization::Char);
    }
}
