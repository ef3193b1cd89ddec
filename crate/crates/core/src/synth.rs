//! Synthetic data: small encoded datasets for tests, and MovieLens-format
//! directories with latent user/movie structure.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ingest::{
    EncodedMovie, EncodedUser, RatingTriple, VocabCounts, AGE_BUCKETS, GENRE_LEN, MOVIES_FILE, PAD_CODE, RATINGS_FILE,
    TITLE_LEN, USERS_FILE,
};
use crate::rng;

pub const GENRES: [&str; 18] = [
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
    "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
];

pub const AGES: [u32; AGE_BUCKETS] = [1, 18, 25, 35, 45, 50, 56];

const LEXICON: [&str; 40] = [
    "the", "of", "a", "night", "day", "love", "war", "man", "woman", "story", "city", "dark", "last", "first",
    "little", "big", "house", "river", "star", "king", "queen", "dead", "life", "road", "summer", "winter",
    "blue", "red", "secret", "return", "game", "heart", "lost", "world", "ghost", "dream", "time", "island",
    "fire", "stone",
];

/// Random encoded users, movies and ratings over a tiny vocabulary.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub counts: VocabCounts,
    pub users: Vec<EncodedUser>,
    pub movies: Vec<EncodedMovie>,
    pub ratings: Vec<RatingTriple>,
}

impl ToyData {
    pub fn generate(seed: u64) -> Self {
        Self::with_counts(
            seed,
            VocabCounts { num_users: 5, num_movies: 4, num_genres: 5, vocab_size: 12, num_occupations: 3 },
            24,
        )
    }

    pub fn with_counts(seed: u64, counts: VocabCounts, num_ratings: usize) -> Self {
        let mut r = rng::derive(seed, 23);
        let users = (0..counts.num_users).map(|i| random_user(i as u32, &counts, &mut r)).collect();
        let movies = (0..counts.num_movies).map(|i| random_movie(i as u32, &counts, &mut r)).collect();
        let ratings = (0..num_ratings)
            .map(|_| RatingTriple {
                user: r.gen_range(0..counts.num_users as u32),
                movie: r.gen_range(0..counts.num_movies as u32),
                rating: r.gen_range(1..=5) as f32,
            })
            .collect();
        ToyData { counts, users, movies, ratings }
    }
}

pub fn random_user(index: u32, counts: &VocabCounts, r: &mut impl Rng) -> EncodedUser {
    EncodedUser {
        user_index: index,
        gender: r.gen_range(0..2),
        age_bucket: r.gen_range(0..AGE_BUCKETS as u32),
        occupation: r.gen_range(0..counts.num_occupations as u32),
    }
}

/// A movie with 1..=3 genres and 1..=6 title tokens, both PAD-filled.
pub fn random_movie(index: u32, counts: &VocabCounts, r: &mut impl Rng) -> EncodedMovie {
    let mut genre_codes = [PAD_CODE; GENRE_LEN];
    let n_genres = r.gen_range(1..=3.min(counts.num_genres).max(1));
    for slot in genre_codes.iter_mut().take(n_genres) {
        *slot = r.gen_range(1..=counts.num_genres as u32);
    }
    let mut title_codes = [PAD_CODE; TITLE_LEN];
    let n_words = r.gen_range(1..=6);
    for slot in title_codes.iter_mut().take(n_words) {
        *slot = r.gen_range(1..=counts.vocab_size as u32);
    }
    EncodedMovie { movie_index: index, genre_codes, title_codes }
}

/// Ratings that are exact inner products of fixed feature vectors with
/// entries in `[-0.5, 0.5]`, so a tanh-bounded model can represent them.
#[derive(Debug, Clone)]
pub struct Realizable {
    pub data: ToyData,
    pub user_features: Vec<Vec<f64>>,
    pub movie_features: Vec<Vec<f64>>,
}

impl Realizable {
    /// Every (user, movie) pair of an `n_users x n_movies` grid is rated.
    pub fn generate(n_users: usize, n_movies: usize, dim: usize, seed: u64) -> Self {
        let counts = VocabCounts {
            num_users: n_users,
            num_movies: n_movies,
            num_genres: 6,
            vocab_size: 20,
            num_occupations: 4,
        };
        let mut data = ToyData::with_counts(seed, counts, 0);
        let mut r = rng::derive(seed, 29);
        let mut feats = |n| -> Vec<Vec<f64>> { (0..n).map(|_| (0..dim).map(|_| r.gen_range(-0.5..0.5)).collect()).collect() };
        let user_features = feats(n_users);
        let movie_features = feats(n_movies);
        for (u, uf) in user_features.iter().enumerate() {
            for (m, mf) in movie_features.iter().enumerate() {
                let rating: f64 = uf.iter().zip(mf).map(|(a, b)| a * b).sum();
                data.ratings.push(RatingTriple { user: u as u32, movie: m as u32, rating: rating as f32 });
            }
        }
        Realizable { data, user_features, movie_features }
    }
}

/// Size of a synthetic MovieLens-format directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub users: usize,
    pub movies: usize,
    pub ratings: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { users: 200, movies: 150, ratings: 6000, seed: rng::DEFAULT_SEED }
    }
}

const LATENT: usize = 4;

/// Writes `users.dat`, `movies.dat` and `ratings.dat` to `dir`.
///
/// Ratings follow a low-rank latent model with user and movie biases,
/// rounded and clipped to 1..=5. Genres drive part of each movie's latent
/// vector and age/gender part of each user's, so side features carry signal.
pub fn write_movielens(dir: &Path, spec: SynthSpec) -> io::Result<()> {
    let mut r = rng::derive(spec.seed, 31);
    fs::create_dir_all(dir)?;
    let genre_latent: Vec<[f64; LATENT]> = (0..GENRES.len()).map(|_| latent(&mut r, 0.8)).collect();
    let age_latent: Vec<[f64; LATENT]> = (0..AGES.len()).map(|_| latent(&mut r, 0.5)).collect();

    let mut users = String::new();
    let mut user_latent = Vec::with_capacity(spec.users);
    for id in 1..=spec.users {
        let gender = if r.gen::<bool>() { 'M' } else { 'F' };
        // The first users cover every age bracket.
        let age = if id <= AGES.len() { id - 1 } else { r.gen_range(0..AGES.len()) };
        let occ = r.gen_range(0..=20);
        let mut z = latent(&mut r, 0.6);
        add(&mut z, &age_latent[age]);
        if gender == 'F' {
            z[0] += 0.3;
        }
        user_latent.push((z, r.gen_range(-0.4..0.4)));
        writeln!(users, "{id}::{gender}::{}::{occ}::{:05}", AGES[age], r.gen_range(0..100000)).unwrap();
    }

    let mut movies = String::new();
    let mut movie_latent = Vec::with_capacity(spec.movies);
    let mut genre_ids: Vec<usize> = (0..GENRES.len()).collect();
    for id in 1..=spec.movies {
        let n_words = r.gen_range(1..=5);
        let title: Vec<String> = (0..n_words)
            .map(|i| {
                let w = LEXICON[r.gen_range(0..LEXICON.len())];
                if i == 0 { capitalize(w) } else { w.to_string() }
            })
            .collect();
        let year = r.gen_range(1920..=2000);
        genre_ids.shuffle(&mut r);
        let gs = &genre_ids[..r.gen_range(1..=3)];
        let mut z = latent(&mut r, 0.4);
        for &g in gs {
            add(&mut z, &genre_latent[g]);
        }
        movie_latent.push((z, r.gen_range(-0.6..0.6)));
        let names: Vec<&str> = gs.iter().map(|&g| GENRES[g]).collect();
        writeln!(movies, "{id}::{} ({year})::{}", title.join(" "), names.join("|")).unwrap();
    }

    let mut ratings = String::new();
    for k in 0..spec.ratings {
        let u = r.gen_range(0..spec.users);
        let m = r.gen_range(0..spec.movies);
        let ((zu, bu), (zm, bm)) = (&user_latent[u], &movie_latent[m]);
        let dot: f64 = zu.iter().zip(zm).map(|(a, b)| a * b).sum();
        let noise: f64 = r.gen_range(-0.5..0.5);
        let score = (3.6 + bu + bm + dot + noise).round().clamp(1.0, 5.0) as u8;
        writeln!(ratings, "{}::{}::{score}::{}", u + 1, m + 1, 956_703_932 + k).unwrap();
    }

    fs::write(dir.join(USERS_FILE), users)?;
    fs::write(dir.join(MOVIES_FILE), movies)?;
    fs::write(dir.join(RATINGS_FILE), ratings)
}

fn latent(r: &mut impl Rng, scale: f64) -> [f64; LATENT] {
    std::array::from_fn(|_| r.gen_range(-scale..scale))
}

fn add(a: &mut [f64; LATENT], b: &[f64; LATENT]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}
