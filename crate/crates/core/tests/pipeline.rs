use movierec::ingest::Corpus;
use movierec::synth::{write_movielens, SynthSpec};
use movierec::towers::{init_params, ModelConfig, TitleEncoder};
use movierec::trainer::{
    evaluate, load_checkpoint, recommend, save_checkpoint, split_ratings, train, Catalog, CheckpointMeta, DataSource,
    Evaluation, Split, TrainConfig,
};

fn corpus(spec: SynthSpec) -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    write_movielens(dir.path(), spec).unwrap();
    let c = Corpus::load(dir.path()).unwrap();
    (dir, c)
}

#[test]
fn training_beats_the_mean_predictor() {
    let (_dir, c) = corpus(SynthSpec { users: 120, movies: 80, ratings: 4000, seed: 11 });
    let config = TrainConfig { epochs: 6, batch_size: 64, lr: 5e-3, seed: 11, ..TrainConfig::default() };
    let (tr, te) = split_ratings(&c.ratings, config.test_fraction, config.seed);
    assert_eq!(tr.len() + te.len(), c.ratings.len());

    let mean = tr.iter().map(|t| t.rating as f64).sum::<f64>() / tr.len() as f64;
    let targets: Vec<f64> = te.iter().map(|t| t.rating as f64).collect();
    let baseline = Evaluation::from_predictions(&vec![mean; te.len()], &targets);

    let (towers, params) = init_params(&ModelConfig::default(), &c.vocab.counts(), config.seed).unwrap();
    let cat = Catalog::of(&c);
    let (params, log) = train(&towers, params, cat, &tr, &te, &config).unwrap();
    let result = evaluate(&towers, &params, cat, &te).unwrap();

    assert!(result.rmse < baseline.rmse, "model {} vs mean {}", result.rmse, baseline.rmse);
    assert!(result.rmse_clamped <= result.rmse);
    let last = log.test_rows().last().unwrap();
    assert_eq!(last.epoch, config.epochs);
    assert_eq!(last.split, Split::Test);
    assert_eq!(last.loss, result.mse);
}

#[test]
fn checkpoint_restores_an_identical_model() {
    let (dir, c) = corpus(SynthSpec { users: 40, movies: 30, ratings: 600, seed: 3 });
    let config = TrainConfig { epochs: 1, batch_size: 32, seed: 3, ..TrainConfig::default() };
    let (tr, te) = split_ratings(&c.ratings, config.test_fraction, config.seed);
    let model = ModelConfig::default().with_title_encoder(TitleEncoder::AttnCnn);
    let (towers, params) = init_params(&model, &c.vocab.counts(), 3).unwrap();
    let cat = Catalog::of(&c);
    let (mut params, _) = train(&towers, params, cat, &tr, &te, &config).unwrap();
    params.round_to_f32();

    let meta = CheckpointMeta {
        model,
        counts: c.vocab.counts(),
        data: Some(DataSource {
            data_dir: dir.path().display().to_string(),
            seed: 3,
            test_fraction: config.test_fraction,
            subsample: None,
        }),
    };
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &meta, &params).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.meta, meta);
    let (towers2, params2) = ck.restore().unwrap();

    assert_eq!(evaluate(&towers, &params, cat, &te).unwrap(), evaluate(&towers2, &params2, cat, &te).unwrap());
    let uid = c.users[1].user_id;
    let a = recommend(&towers, &params, &c.vocab, cat, &tr, uid, 5).unwrap();
    let b = recommend(&towers2, &params2, &c.vocab, cat, &tr, uid, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
}
