//! The dual-tower rating model.
//!
//! User tower: id, gender, age and occupation embeddings, each through its
//! own `dense → relu` layer, concatenated and projected to the feature
//! width with `tanh`.
//!
//! Movie tower: id embedding ‖ sum of genre embeddings ‖ title vector, then
//! `dense → tanh`. The title vector comes from a text CNN over word
//! embeddings (one filter bank per window size, max over time, dropout),
//! optionally preceded by a residual relative-attention block.
//!
//! The predicted rating is the inner product of the two feature vectors.
//! Row 0 of the genre and word tables is the `<PAD>` embedding; it is
//! pinned to zero and never updated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, ParamId, ParameterSet, Result, Tensor, TensorError, Var};
use crate::ingest::{EncodedMovie, EncodedUser, VocabCounts, AGE_BUCKETS, GENRE_LEN, PAD_CODE, TITLE_LEN};
use crate::relattn::{self, AttentionParams, HeadProjections, RelPosTables};
use crate::rng;

/// Width of both tower outputs.
pub const FEATURE_DIM: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TitleEncoder {
    Cnn,
    AttnCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub uid_dim: usize,
    pub mid_dim: usize,
    /// Width of the gender, age and occupation embeddings.
    pub side_dim: usize,
    pub genre_dim: usize,
    pub word_dim: usize,
    /// Output width of each per-field dense layer in the user tower.
    pub field_dim: usize,
    pub cnn_windows: Vec<usize>,
    pub cnn_filters_per_window: usize,
    pub feature_dim: usize,
    pub dropout_rate: f64,
    pub title_encoder: TitleEncoder,
    pub attn_heads: usize,
    pub attn_key_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            uid_dim: 32,
            mid_dim: 16,
            side_dim: 16,
            genre_dim: 32,
            word_dim: 32,
            field_dim: 32,
            cnn_windows: vec![3, 4, 5],
            cnn_filters_per_window: 8,
            feature_dim: FEATURE_DIM,
            dropout_rate: 0.5,
            title_encoder: TitleEncoder::Cnn,
            attn_heads: 2,
            attn_key_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn with_title_encoder(mut self, e: TitleEncoder) -> Self {
        self.title_encoder = e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.uid_dim,
            self.mid_dim,
            self.side_dim,
            self.genre_dim,
            self.word_dim,
            self.field_dim,
            self.cnn_filters_per_window,
            self.attn_heads,
            self.attn_key_dim,
        ];
        let bad = |d: String| Err(TensorError::ShapeMismatch { op: "model config", detail: d });
        if dims.contains(&0) || self.cnn_windows.is_empty() {
            return bad("all dimensions must be positive".into());
        }
        if self.feature_dim != FEATURE_DIM {
            return bad(format!("feature_dim must be {FEATURE_DIM}"));
        }
        if let Some(&w) = self.cnn_windows.iter().find(|&&w| w == 0 || w > TITLE_LEN) {
            return bad(format!("window {w} outside 1..={TITLE_LEN}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TensorError::InvalidRate(self.dropout_rate));
        }
        Ok(())
    }

    pub fn title_dim(&self) -> usize {
        self.cnn_windows.len() * self.cnn_filters_per_window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct AttnIds {
    params: AttentionParams<ParamId>,
    tables: Vec<RelPosTables<ParamId>>,
}

/// Model architecture: configuration plus the ids of its parameters inside
/// a [`ParameterSet`]. The parameter values themselves are passed to every
/// forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct Towers {
    pub config: ModelConfig,
    pub counts: VocabCounts,
    uid: ParamId,
    gender: ParamId,
    age: ParamId,
    occ: ParamId,
    uid_fc: Dense,
    gender_fc: Dense,
    age_fc: Dense,
    occ_fc: Dense,
    user_fc: Dense,
    mid: ParamId,
    genre: ParamId,
    word: ParamId,
    convs: Vec<Dense>,
    movie_fc: Dense,
    attn: Option<AttnIds>,
}

/// Every parameter name with its shape, in creation order.
fn layout(c: &ModelConfig, n: &VocabCounts) -> Vec<(String, Vec<usize>)> {
    let mut l: Vec<(String, Vec<usize>)> = vec![
        ("user.uid_embed".into(), vec![n.num_users, c.uid_dim]),
        ("user.gender_embed".into(), vec![2, c.side_dim]),
        ("user.age_embed".into(), vec![AGE_BUCKETS, c.side_dim]),
        ("user.occ_embed".into(), vec![n.num_occupations, c.side_dim]),
    ];
    for (name, fan_in) in [("uid", c.uid_dim), ("gender", c.side_dim), ("age", c.side_dim), ("occ", c.side_dim)] {
        l.push((format!("user.{name}_fc.w"), vec![fan_in, c.field_dim]));
        l.push((format!("user.{name}_fc.b"), vec![c.field_dim]));
    }
    l.push(("user.fc.w".into(), vec![4 * c.field_dim, c.feature_dim]));
    l.push(("user.fc.b".into(), vec![c.feature_dim]));
    l.push(("movie.mid_embed".into(), vec![n.num_movies, c.mid_dim]));
    l.push(("movie.genre_embed".into(), vec![n.num_genres + 1, c.genre_dim]));
    l.push(("movie.word_embed".into(), vec![n.vocab_size + 1, c.word_dim]));
    for &w in &c.cnn_windows {
        l.push((format!("movie.conv{w}.w"), vec![c.cnn_filters_per_window, w, c.word_dim]));
        l.push((format!("movie.conv{w}.b"), vec![c.cnn_filters_per_window]));
    }
    l.push(("movie.fc.w".into(), vec![c.mid_dim + c.genre_dim + c.title_dim(), c.feature_dim]));
    l.push(("movie.fc.b".into(), vec![c.feature_dim]));
    if c.title_encoder == TitleEncoder::AttnCnn {
        let dk = c.attn_key_dim;
        for h in 0..c.attn_heads {
            for p in ["wq", "wk", "wv"] {
                l.push((format!("movie.attn.h{h}.{p}"), vec![c.word_dim, dk]));
            }
        }
        l.push(("movie.attn.wo".into(), vec![c.attn_heads * dk, c.word_dim]));
        for h in 0..c.attn_heads {
            l.push((format!("movie.attn.h{h}.rel_w"), vec![2 * TITLE_LEN - 1, dk]));
            l.push((format!("movie.attn.h{h}.rel_h"), vec![1, dk]));
        }
    }
    l
}

/// Initializes all parameters from `seed`.
///
/// Embeddings and relative tables are uniform in `[-0.05, 0.05]`; dense,
/// convolution and attention projections (weights and biases) are uniform
/// in `±1/√fan_in`. `<PAD>` rows are zeroed and frozen.
pub fn init_params(config: &ModelConfig, counts: &VocabCounts, seed: u64) -> Result<(Towers, ParameterSet)> {
    config.validate()?;
    if counts.num_users == 0 || counts.num_movies == 0 || counts.num_occupations == 0 {
        return Err(TensorError::EmptyInput("vocabulary counts"));
    }
    let mut rng = rng::derive(seed, 1);
    let mut params = ParameterSet::new();
    let mut fan_in_of_weight = 0.0;
    for (name, shape) in layout(config, counts) {
        let t = if name.ends_with("_embed") || name.contains(".rel_") {
            Tensor::uniform(&shape, -0.05, 0.05, &mut rng)
        } else {
            // Biases reuse the fan-in of the weight created just before.
            if !name.ends_with(".b") {
                fan_in_of_weight = match shape.as_slice() {
                    [_, w, d] => (w * d) as f64,
                    [f, _] => *f as f64,
                    s => s[0] as f64,
                };
            }
            let bound = 1.0 / fan_in_of_weight.sqrt();
            Tensor::uniform(&shape, -bound, bound, &mut rng)
        };
        params.insert(&name, t);
    }
    for name in ["movie.genre_embed", "movie.word_embed"] {
        let id = params.id(name).expect("created above");
        params.freeze_row(id, PAD_CODE as usize);
    }
    let towers = Towers::from_params(config.clone(), *counts, &params)?;
    Ok((towers, params))
}

impl Towers {
    /// Resolves parameter ids by name and checks every shape.
    pub fn from_params(config: ModelConfig, counts: VocabCounts, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        for (name, shape) in layout(&config, &counts) {
            let p = params.by_name(&name).ok_or_else(|| TensorError::ShapeMismatch {
                op: "parameters",
                detail: format!("missing {name}"),
            })?;
            if p.value.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "parameters",
                    detail: format!("{name} has shape {:?}, expected {shape:?}", p.value.shape()),
                });
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let dense = |n: &str| Dense { w: id(&format!("{n}.w")), b: id(&format!("{n}.b")) };
        let attn = (config.title_encoder == TitleEncoder::AttnCnn).then(|| AttnIds {
            params: AttentionParams {
                heads: (0..config.attn_heads)
                    .map(|h| HeadProjections {
                        w_q: id(&format!("movie.attn.h{h}.wq")),
                        w_k: id(&format!("movie.attn.h{h}.wk")),
                        w_v: id(&format!("movie.attn.h{h}.wv")),
                    })
                    .collect(),
                w_o: id("movie.attn.wo"),
            },
            tables: (0..config.attn_heads)
                .map(|h| RelPosTables {
                    r_w: id(&format!("movie.attn.h{h}.rel_w")),
                    r_h: id(&format!("movie.attn.h{h}.rel_h")),
                })
                .collect(),
        });
        Ok(Towers {
            uid: id("user.uid_embed"),
            gender: id("user.gender_embed"),
            age: id("user.age_embed"),
            occ: id("user.occ_embed"),
            uid_fc: dense("user.uid_fc"),
            gender_fc: dense("user.gender_fc"),
            age_fc: dense("user.age_fc"),
            occ_fc: dense("user.occ_fc"),
            user_fc: dense("user.fc"),
            mid: id("movie.mid_embed"),
            genre: id("movie.genre_embed"),
            word: id("movie.word_embed"),
            convs: config.cnn_windows.iter().map(|w| dense(&format!("movie.conv{w}"))).collect(),
            movie_fc: dense("movie.fc"),
            attn,
            config,
            counts,
        })
    }

    /// Binds every parameter into `g`; the returned vector is indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph, params: &ParameterSet) -> Bound {
        Bound(params.iter().map(|(id, _)| g.param(params, id)).collect())
    }

    fn dense(&self, g: &mut Graph, b: &Bound, x: Var, d: Dense) -> Result<Var> {
        let y = g.matmul(x, b.get(d.w))?;
        g.add_row(y, b.get(d.b))
    }

    /// User features `[B, feature_dim]`.
    pub fn user_features(&self, g: &mut Graph, b: &Bound, users: &[&EncodedUser]) -> Result<Var> {
        let idx = |f: fn(&EncodedUser) -> u32| users.iter().map(|u| f(u) as usize).collect::<Vec<_>>();
        let fields = [
            (self.uid, self.uid_fc, idx(|u| u.user_index)),
            (self.gender, self.gender_fc, idx(|u| u.gender)),
            (self.age, self.age_fc, idx(|u| u.age_bucket)),
            (self.occ, self.occ_fc, idx(|u| u.occupation)),
        ];
        let mut parts = Vec::with_capacity(4);
        for (table, fc, indices) in fields {
            let e = g.embedding(b.get(table), &indices)?;
            let h = self.dense(g, b, e, fc)?;
            parts.push(g.relu(h));
        }
        let cat = g.concat(&parts)?;
        let out = self.dense(g, b, cat, self.user_fc)?;
        Ok(g.tanh(out))
    }

    /// Sum of genre embeddings per movie, `[B, genre_dim]`.
    pub fn genre_sum(&self, g: &mut Graph, b: &Bound, codes: &[&[u32]]) -> Result<Var> {
        let len = codes.first().map_or(0, |c| c.len());
        if codes.iter().any(|c| c.len() != len) {
            return Err(TensorError::ShapeMismatch { op: "genre_sum", detail: "ragged genre lists".into() });
        }
        let flat: Vec<usize> = codes.iter().flat_map(|c| c.iter().map(|&x| x as usize)).collect();
        let e = g.embedding(b.get(self.genre), &flat)?;
        g.segment_sum(e, len)
    }

    /// Title vectors `[B, title_dim]` before dropout.
    pub fn title_vectors(&self, g: &mut Graph, b: &Bound, titles: &[&[u32]]) -> Result<Var> {
        let len = titles.first().map_or(0, |t| t.len());
        if titles.iter().any(|t| t.len() != len) {
            return Err(TensorError::ShapeMismatch { op: "title_vectors", detail: "ragged titles".into() });
        }
        let word = b.get(self.word);
        let emb = match &self.attn {
            None => {
                let flat: Vec<usize> = titles.iter().flat_map(|t| t.iter().map(|&x| x as usize)).collect();
                g.embedding(word, &flat)?
            }
            Some(a) => {
                let params = a.params.map(|&id| b.get(id));
                let tables: Vec<_> = a.tables.iter().map(|t| t.map(|&id| b.get(id))).collect();
                let mut rows = Vec::with_capacity(titles.len());
                for t in titles {
                    let idx: Vec<usize> = t.iter().map(|&x| x as usize).collect();
                    let e = g.embedding(word, &idx)?;
                    rows.push(relattn::title_attention_encoder_in(g, e, &params, &tables)?);
                }
                g.concat_rows(&rows)?
            }
        };
        let seq = g.reshape(emb, &[titles.len(), len, self.config.word_dim])?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let c = g.conv_text_bank(seq, b.get(conv.w), b.get(conv.b))?;
            pooled.push(g.max_over_time_bank(c)?);
        }
        g.concat(&pooled)
    }

    /// Movie features `[B, feature_dim]`.
    pub fn movie_features(
        &self,
        g: &mut Graph,
        b: &Bound,
        movies: &[&EncodedMovie],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mids: Vec<usize> = movies.iter().map(|m| m.movie_index as usize).collect();
        let mid = g.embedding(b.get(self.mid), &mids)?;
        let genre_codes: Vec<&[u32]> = movies.iter().map(|m| &m.genre_codes[..]).collect();
        let genres = self.genre_sum(g, b, &genre_codes)?;
        let titles: Vec<&[u32]> = movies.iter().map(|m| &m.title_codes[..]).collect();
        let title = self.title_vectors(g, b, &titles)?;
        let title = g.dropout(title, self.config.dropout_rate, mode, rng)?;
        let cat = g.concat(&[mid, genres, title])?;
        let out = self.dense(g, b, cat, self.movie_fc)?;
        Ok(g.tanh(out))
    }

    /// Predicted ratings `[B]`.
    pub fn predict_batch(
        &self,
        g: &mut Graph,
        b: &Bound,
        users: &[&EncodedUser],
        movies: &[&EncodedMovie],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if users.len() != movies.len() || users.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "predict",
                detail: format!("{} users, {} movies", users.len(), movies.len()),
            });
        }
        let u = self.user_features(g, b, users)?;
        let m = self.movie_features(g, b, movies, mode, rng)?;
        g.row_dot(u, m)
    }

    /// Mean squared error of the predicted ratings over a batch.
    pub fn model_loss(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        batch: &[Example<'_>],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(TensorError::EmptyInput("model_loss"));
        }
        let b = self.bind(g, params);
        let users: Vec<&EncodedUser> = batch.iter().map(|e| e.user).collect();
        let movies: Vec<&EncodedMovie> = batch.iter().map(|e| e.movie).collect();
        let pred = self.predict_batch(g, &b, &users, &movies, mode, rng)?;
        let target = g.constant(Tensor::vector(batch.iter().map(|e| e.rating).collect()));
        g.mse_loss(pred, target)
    }

    /// Eval-mode predictions without recording gradients.
    pub fn predict(&self, params: &ParameterSet, users: &[&EncodedUser], movies: &[&EncodedMovie]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g, params);
        let p = self.predict_batch(&mut g, &b, users, movies, Mode::Eval, &mut rng::seeded(0))?;
        Ok(g.value(p).data().to_vec())
    }

    fn bind_constants(&self, g: &mut Graph, params: &ParameterSet) -> Bound {
        Bound(params.iter().map(|(_, p)| g.constant(p.value.clone())).collect())
    }

    pub fn user_feature(&self, params: &ParameterSet, u: &EncodedUser) -> Result<Tensor> {
        self.check_user(u)?;
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g, params);
        let f = self.user_features(&mut g, &b, &[u])?;
        g.value(f).clone().reshaped(&[self.config.feature_dim])
    }

    pub fn movie_feature(&self, params: &ParameterSet, m: &EncodedMovie, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
        self.check_movie(m)?;
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g, params);
        let f = self.movie_features(&mut g, &b, &[m], mode, rng)?;
        g.value(f).clone().reshaped(&[self.config.feature_dim])
    }

    /// Movie features for many movies at once, eval mode, `[N, feature_dim]`.
    pub fn movie_feature_matrix(&self, params: &ParameterSet, movies: &[&EncodedMovie]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g, params);
        let f = self.movie_features(&mut g, &b, movies, Mode::Eval, &mut rng::seeded(0))?;
        Ok(g.value(f).clone())
    }

    fn check_user(&self, u: &EncodedUser) -> Result<()> {
        let checks = [
            (u.user_index as usize, self.counts.num_users),
            (u.gender as usize, 2),
            (u.age_bucket as usize, AGE_BUCKETS),
            (u.occupation as usize, self.counts.num_occupations),
        ];
        for (index, len) in checks {
            if index >= len {
                return Err(TensorError::IndexOutOfRange { index, len });
            }
        }
        Ok(())
    }

    fn check_movie(&self, m: &EncodedMovie) -> Result<()> {
        let mut checks = vec![(m.movie_index as usize, self.counts.num_movies)];
        checks.extend(m.genre_codes.iter().map(|&c| (c as usize, self.counts.num_genres + 1)));
        checks.extend(m.title_codes.iter().map(|&c| (c as usize, self.counts.vocab_size + 1)));
        for (index, len) in checks {
            if index >= len {
                return Err(TensorError::IndexOutOfRange { index, len });
            }
        }
        Ok(())
    }
}

/// Parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub user: &'a EncodedUser,
    pub movie: &'a EncodedMovie,
    pub rating: f64,
}

/// Inner product of two feature vectors of equal length.
pub fn predict_rating(u: &Tensor, m: &Tensor) -> Result<f64> {
    if u.shape() != m.shape() || u.rank() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "predict_rating",
            detail: format!("{:?} vs {:?}", u.shape(), m.shape()),
        });
    }
    Ok(u.data().iter().zip(m.data()).map(|(a, b)| a * b).sum())
}

const _: () = assert!(GENRE_LEN == 18);
