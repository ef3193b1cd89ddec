//! Splitting, the training loop, evaluation, metrics, checkpoints and
//! recommendation.

pub mod checkpoint;
pub mod metrics;
pub mod recommend;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autograd::{Adam, Graph, Mode, ParameterSet, TensorError};
use crate::ingest::{Corpus, EncodedMovie, EncodedUser, RatingTriple};
use crate::rng::{self, DEFAULT_SEED};
use crate::towers::{Example, Towers};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, DataSource};
pub use metrics::{MetricRow, MetricsLog, Split};
pub use recommend::{rank_candidates, recommend, Recommendation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("unknown user id {0}")]
    UnknownUser(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub shuffle: bool,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            seed: DEFAULT_SEED,
            test_fraction: 0.2,
            shuffle: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(TrainError::InvalidConfig(s));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction {} not in (0, 1)", self.test_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }
}

/// Encoded users and movies, indexed by user and movie index.
#[derive(Debug, Clone, Copy)]
pub struct Catalog<'a> {
    pub users: &'a [EncodedUser],
    pub movies: &'a [EncodedMovie],
}

impl<'a> Catalog<'a> {
    pub fn of(corpus: &'a Corpus) -> Self {
        Catalog { users: &corpus.encoded_users, movies: &corpus.encoded_movies }
    }

    fn example(&self, t: &RatingTriple) -> Example<'a> {
        Example { user: &self.users[t.user as usize], movie: &self.movies[t.movie as usize], rating: t.rating as f64 }
    }
}

/// Uniformly random split by record: `round(fraction * N)` records go to
/// the test set. Both halves keep the input order.
pub fn split_ratings(ratings: &[RatingTriple], fraction: f64, seed: u64) -> (Vec<RatingTriple>, Vec<RatingTriple>) {
    assert!((0.0..1.0).contains(&fraction), "split fraction {fraction} outside [0, 1)");
    let n = ratings.len();
    let n_test = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, 41));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (t, flag) in ratings.iter().zip(is_test) {
        if flag { test.push(*t) } else { train.push(*t) }
    }
    (train, test)
}

/// A seeded sample of `n` records (all of them if `n >= len`), in input order.
pub fn subsample(ratings: &[RatingTriple], n: usize, seed: u64) -> Vec<RatingTriple> {
    if n >= ratings.len() {
        return ratings.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut rng::derive(seed, 53), ratings.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| ratings[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub rmse: f64,
    /// RMSE with predictions clamped to `[1, 5]`.
    pub rmse_clamped: f64,
}

const EVAL_BATCH: usize = 1024;

/// Eval-mode MSE and RMSE over every record.
pub fn evaluate(towers: &Towers, params: &ParameterSet, catalog: Catalog<'_>, data: &[RatingTriple]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let users: Vec<_> = chunk.iter().map(|t| &catalog.users[t.user as usize]).collect();
        let movies: Vec<_> = chunk.iter().map(|t| &catalog.movies[t.movie as usize]).collect();
        preds.extend(towers.predict(params, &users, &movies)?);
    }
    let targets: Vec<f64> = data.iter().map(|t| t.rating as f64).collect();
    Ok(Evaluation::from_predictions(&preds, &targets))
}

impl Evaluation {
    /// Errors of `preds` against equally long, non-empty `targets`.
    pub fn from_predictions(preds: &[f64], targets: &[f64]) -> Self {
        assert!(preds.len() == targets.len() && !preds.is_empty());
        let (mut sq, mut sq_clamped) = (0.0, 0.0);
        for (p, y) in preds.iter().zip(targets) {
            sq += (p - y).powi(2);
            sq_clamped += (p.clamp(1.0, 5.0) - y).powi(2);
        }
        let n = preds.len() as f64;
        let mse = sq / n;
        Evaluation { mse, rmse: mse.sqrt(), rmse_clamped: (sq_clamped / n).sqrt() }
    }
}

/// Minibatch Adam over `train`, logging every step's training loss and,
/// after each epoch, the full test-set loss and RMSE.
///
/// With zero epochs a single epoch-0 test row records the initial model.
pub fn train(
    towers: &Towers,
    mut params: ParameterSet,
    catalog: Catalog<'_>,
    train: &[RatingTriple],
    test: &[RatingTriple],
    config: &TrainConfig,
) -> Result<(ParameterSet, MetricsLog)> {
    if config.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let mut log = MetricsLog::default();
    let mut adam = Adam::new(&params, config.lr);
    let mut shuffle_rng = rng::derive(config.seed, 43);
    let mut dropout_rng = rng::derive(config.seed, 47);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    let log_test = |log: &mut MetricsLog, params: &ParameterSet, epoch, step| -> Result<()> {
        if !test.is_empty() {
            let e = evaluate(towers, params, catalog, test)?;
            log.push(MetricRow { epoch, step, split: Split::Test, loss: e.mse, rmse: Some(e.rmse) });
        }
        Ok(())
    };

    if config.epochs == 0 {
        log_test(&mut log, &params, 0, 0)?;
    }
    for epoch in 1..=config.epochs {
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            step += 1;
            let examples: Vec<Example> = batch.iter().map(|&i| catalog.example(&train[i])).collect();
            let mut g = Graph::new();
            let loss = towers.model_loss(&mut g, &params, &examples, Mode::Train, &mut dropout_rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            g.backward(loss)?;
            params.zero_grads();
            g.accumulate_into(&mut params);
            adam.step(&mut params)?;
            log.push(MetricRow { epoch, step, split: Split::Train, loss: value, rmse: None });
        }
        log_test(&mut log, &params, epoch, step)?;
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Realizable, ToyData};
    use crate::towers::{init_params, ModelConfig};

    fn triples(n: usize) -> Vec<RatingTriple> {
        (0..n).map(|i| RatingTriple { user: i as u32, movie: 0, rating: 1.0 + (i % 5) as f32 }).collect()
    }

    #[test]
    fn split_sizes_and_membership() {
        let data = triples(101);
        let (train, test) = split_ratings(&data, 0.2, 7);
        assert_eq!(test.len(), 20);
        assert_eq!(train.len() + test.len(), 101);
        let mut all: Vec<u32> = train.iter().chain(&test).map(|t| t.user).collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_ratings(&data, 0.2, 7), (train, test));
        assert_ne!(split_ratings(&data, 0.2, 8).1, split_ratings(&data, 0.2, 7).1);
    }

    #[test]
    fn zero_fraction_gives_empty_test() {
        let (train, test) = split_ratings(&triples(10), 0.0, 1);
        assert!(test.is_empty());
        assert_eq!(train.len(), 10);
    }

    #[test]
    fn split_rounds_half_up() {
        assert_eq!(split_ratings(&triples(5), 0.5, 1).1.len(), 3);
        assert_eq!(split_ratings(&triples(3), 0.2, 1).1.len(), 1);
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let data = triples(50);
        let a = subsample(&data, 10, 3);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0].user < w[1].user));
        assert_eq!(a, subsample(&data, 10, 3));
        assert_eq!(subsample(&data, 80, 3), data);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(TrainConfig { test_fraction: f, ..Default::default() }.validate().is_err());
        }
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    fn toy_setup(seed: u64) -> (ToyData, Towers, ParameterSet) {
        let toy = ToyData::generate(seed);
        let (towers, params) = init_params(&ModelConfig::default(), &toy.counts, seed).unwrap();
        (toy, towers, params)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (toy, towers, params) = toy_setup(2);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 0.0, ..Default::default() };
        let (after, log) = train(&towers, params.clone(), cat, &toy.ratings, &toy.ratings[..4], &cfg).unwrap();
        assert_eq!(log.rows.iter().filter(|r| r.split == Split::Train).count(), 6);
        for ((_, a), (_, b)) in after.iter().zip(params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (toy, towers, params) = toy_setup(5);
            let cat = Catalog { users: &toy.users, movies: &toy.movies };
            let cfg = TrainConfig { epochs: 2, batch_size: 5, ..Default::default() };
            train(&towers, params, cat, &toy.ratings[4..], &toy.ratings[..4], &cfg).unwrap()
        };
        let ((pa, la), (pb, lb)) = (run(), run());
        assert_eq!(la.to_csv(), lb.to_csv());
        for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn metrics_bookkeeping() {
        let (toy, towers, params) = toy_setup(6);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let cfg = TrainConfig { epochs: 3, batch_size: 7, ..Default::default() };
        let (_, log) = train(&towers, params, cat, &toy.ratings[5..], &toy.ratings[..5], &cfg).unwrap();
        let tests: Vec<_> = log.rows.iter().filter(|r| r.split == Split::Test).collect();
        assert_eq!(tests.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(log.rows.windows(2).all(|w| w[0].epoch <= w[1].epoch));
        for r in tests {
            let rmse = r.rmse.unwrap();
            assert!((r.loss - rmse * rmse).abs() <= 1e-9);
        }
        // 19 training records in batches of 7: 3 steps per epoch.
        assert_eq!(log.rows.last().unwrap().step, 9);
    }

    #[test]
    fn zero_epochs_log_one_test_row() {
        let (toy, towers, params) = toy_setup(1);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (after, log) = train(&towers, params.clone(), cat, &toy.ratings, &toy.ratings, &cfg).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!((log.rows[0].epoch, log.rows[0].split), (0, Split::Test));
        let e = evaluate(&towers, &params, cat, &toy.ratings).unwrap();
        assert_eq!(log.rows[0].loss, e.mse);
        assert_eq!(after.iter().count(), params.iter().count());
    }

    #[test]
    fn max_steps_caps_training() {
        let (toy, towers, params) = toy_setup(1);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let cfg = TrainConfig { epochs: 5, batch_size: 4, max_steps: Some(8), ..Default::default() };
        let (_, log) = train(&towers, params, cat, &toy.ratings, &toy.ratings[..2], &cfg).unwrap();
        assert_eq!(log.rows.iter().filter(|r| r.split == Split::Train).count(), 8);
        assert_eq!(log.rows.iter().filter(|r| r.split == Split::Test).count(), 2);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut toy, towers, params) = toy_setup(1);
        toy.ratings[0].rating = f32::NAN;
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let cfg = TrainConfig { epochs: 1, batch_size: 4, shuffle: false, ..Default::default() };
        let err = train(&towers, params, cat, &toy.ratings, &[], &cfg).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 1, step: 1 }), "{err}");
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let (toy, towers, params) = toy_setup(1);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        assert!(matches!(
            train(&towers, params, cat, &[], &toy.ratings, &TrainConfig::default()),
            Err(TrainError::EmptyDataset(_))
        ));
    }

    /// Zeroing the user tower's final projection makes every prediction 0.
    fn zero_output_model(toy: &ToyData) -> (Towers, ParameterSet) {
        let (towers, mut params) = init_params(&ModelConfig::default(), &toy.counts, 0).unwrap();
        for name in ["user.fc.w", "user.fc.b"] {
            let id = params.id(name).unwrap();
            params.value_mut(id).data_mut().fill(0.0);
        }
        (towers, params)
    }

    #[test]
    fn evaluate_zero_predictor() {
        let toy = ToyData::generate(4);
        let (towers, params) = zero_output_model(&toy);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        let e = evaluate(&towers, &params, cat, &toy.ratings).unwrap();
        let want_mse = toy.ratings.iter().map(|t| (t.rating as f64).powi(2)).sum::<f64>() / toy.ratings.len() as f64;
        let want_clamped =
            (toy.ratings.iter().map(|t| (t.rating as f64 - 1.0).powi(2)).sum::<f64>() / toy.ratings.len() as f64).sqrt();
        assert!((e.mse - want_mse).abs() < 1e-12);
        assert!((e.rmse - want_mse.sqrt()).abs() < 1e-12);
        assert!((e.rmse_clamped - want_clamped).abs() < 1e-12);
        assert!(e.rmse_clamped <= e.rmse);
    }

    #[test]
    fn constant_three_on_uniform_targets() {
        let targets: Vec<f64> = (0..100).map(|i| (1 + i % 5) as f64).collect();
        let e = Evaluation::from_predictions(&vec![3.0; 100], &targets);
        assert!((e.rmse - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.rmse, e.rmse_clamped);
        let perfect = Evaluation::from_predictions(&targets, &targets);
        assert_eq!((perfect.mse, perfect.rmse, perfect.rmse_clamped), (0.0, 0.0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn clamping_never_increases_rmse(pairs in proptest::collection::vec((-10.0f64..10.0, 1u8..=5), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().map(|(p, t)| (p, t as f64)).unzip();
            let e = Evaluation::from_predictions(&p, &t);
            proptest::prop_assert!(e.rmse_clamped <= e.rmse + 1e-15);
        }
    }

    #[test]
    fn evaluate_rejects_empty() {
        let toy = ToyData::generate(4);
        let (towers, params) = zero_output_model(&toy);
        let cat = Catalog { users: &toy.users, movies: &toy.movies };
        assert!(evaluate(&towers, &params, cat, &[]).is_err());
    }

    #[test]
    fn realizable_fit_reaches_low_rmse() {
        let r = Realizable::generate(8, 8, 200, 11);
        let d = &r.data;
        let (towers, params) = init_params(&ModelConfig::default(), &d.counts, 11).unwrap();
        let cat = Catalog { users: &d.users, movies: &d.movies };
        let cfg = TrainConfig { epochs: 500, batch_size: 64, max_steps: Some(500), ..Default::default() };
        let (params, log) = train(&towers, params, cat, &d.ratings, &[], &cfg).unwrap();
        let e = evaluate(&towers, &params, cat, &d.ratings).unwrap();
        assert!(e.rmse < 0.1, "train rmse {}", e.rmse);
        let first = log.rows.first().unwrap().loss;
        let last = log.rows.last().unwrap().loss;
        assert!(last < first);
    }
}
