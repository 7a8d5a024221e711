use ctxbias::config::ExperimentConfig;
use ctxbias::corpus::{generate_corpus, CorpusSpec};
use ctxbias::train::{train, train_with, TrainHooks};

fn small_spec() -> CorpusSpec {
    CorpusSpec {
        train_utterances: 40,
        dev_utterances: 6,
        test_utterances: 6,
        feature_dim: 6,
        ..CorpusSpec::default()
    }
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        dim: 8,
        ff_dim: 16,
        steps: 6,
        batch_size: 4,
        warmup_steps: 2,
        k_beam: 2,
        max_len: 8,
        ..ExperimentConfig::default()
    }
}

#[test]
fn loss_trends_down_over_first_200_steps() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let vocab = corpus.vocabulary().unwrap();
    let cfg = ExperimentConfig {
        steps: 200,
        ..ExperimentConfig::default()
    };
    let out = train(&cfg, &vocab, corpus.spec.feature_dim, &corpus.train).unwrap();
    assert_eq!(out.losses.len(), 200);
    let mean = |r: &[ctxbias::train::LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let first = mean(&out.losses[..50]);
    let last = mean(&out.losses[150..]);
    assert!(last < first, "first 50 mean {first}, last 50 mean {last}");
}

#[test]
fn one_step_moves_parameters() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    let vocab = corpus.vocabulary().unwrap();
    let cfg = ExperimentConfig {
        steps: 1,
        ..small_config()
    };
    let fresh = ctxbias::model::Model::new(cfg.model(6, vocab.len(), vocab.ctc_classes()), cfg.seed).unwrap();
    let out = train(&cfg, &vocab, 6, &corpus.train).unwrap();
    let moved = fresh
        .store
        .ids()
        .filter(|&id| fresh.store.value(id) != out.model.store.value(id))
        .count();
    assert!(moved > 0);
}

#[test]
fn dev_records_and_checkpoints_are_reproducible() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    let vocab = corpus.vocabulary().unwrap();
    let cfg = ExperimentConfig {
        dev_every: 4,
        ..small_config()
    };
    let list = corpus.entity_list(&vocab, cfg.l_max).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut records = Vec::new();
    for run in 0..2 {
        let mut seen = 0;
        let mut count = |_: &ctxbias::train::LossRecord| seen += 1;
        let hooks = TrainHooks {
            dev: Some((&corpus.dev, &list)),
            on_step: Some(&mut count),
        };
        let out = train_with(&cfg, &vocab, 6, &corpus.train, hooks).unwrap();
        assert_eq!(seen, 6);
        // every dev_every steps and once at the end
        assert_eq!(out.dev.iter().map(|d| d.step).collect::<Vec<_>>(), vec![4, 6]);
        for d in &out.dev {
            d.report.check_partition().unwrap();
            assert_eq!(d.report.overall.reference_words, corpus.dev.iter().map(|u| u.text.split(' ').count()).sum::<usize>());
        }
        let path = dir.path().join(format!("{run}.ckpt"));
        out.model.save(&path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        records.push((out.losses_csv(), out.dev));
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(records[0], records[1]);
}

#[test]
fn rejects_empty_training_split() {
    let corpus = generate_corpus(&small_spec()).unwrap();
    let vocab = corpus.vocabulary().unwrap();
    assert!(train(&small_config(), &vocab, 6, &[]).is_err());
}
