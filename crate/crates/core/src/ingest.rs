//! MovieLens-1M ingestion: parsing the three `::`-separated `.dat` files,
//! building vocabularies and encoding records into the fixed-length integer
//! forms the towers consume.
//!
//! All three files are decoded as Latin-1, so decoding never fails. Every
//! vocabulary reserves code 0 for `<PAD>` where padding applies, and assigns
//! the remaining codes in first-occurrence order over the input.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed length of every encoded genre list.
pub const GENRE_LEN: usize = 18;
/// Fixed length of every encoded title.
pub const TITLE_LEN: usize = 16;
/// Number of age buckets.
pub const AGE_BUCKETS: usize = 7;
pub const PAD_TOKEN: &str = "<PAD>";
pub const PAD_CODE: u32 = 0;

pub const USERS_FILE: &str = "users.dat";
pub const MOVIES_FILE: &str = "movies.dat";
pub const RATINGS_FILE: &str = "ratings.dat";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record ({reason})")]
    MalformedLine { line: usize, reason: String },
    #[error("line {0}: rating out of range 1..=5")]
    RatingOutOfRange(usize),
    #[error("line {0}: unknown gender token")]
    UnknownGender(usize),
    #[error("expected exactly {AGE_BUCKETS} distinct ages, found {0}")]
    TooManyAges(usize),
    #[error("movie list is empty")]
    NoMovies,
    #[error("user list is empty")]
    NoUsers,
    #[error("movie {movie_id} has {count} genres, more than {GENRE_LEN}")]
    TooManyGenres { movie_id: u32, count: usize },
    #[error("unknown genre {0:?}")]
    UnknownGenre(String),
    #[error("unknown title word {0:?}")]
    UnknownWord(String),
    #[error("unknown age {0}")]
    UnknownAge(u32),
    #[error("unknown occupation {0}")]
    UnknownOccupation(u32),
    #[error("unknown user id {0}")]
    UnknownUser(u32),
    #[error("unknown movie id {0}")]
    UnknownMovie(u32),
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{file}: {cause}")]
    InFile { file: String, cause: Box<IngestError> },
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RatingRecord {
    pub user_id: u32,
    pub movie_id: u32,
    pub rating: u8,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: u32,
    /// 0 for `F`, 1 for `M`.
    pub gender_code: u8,
    /// Raw age as written in the file; bucketed by [`Vocabularies`].
    pub age: u32,
    pub occupation: u32,
    /// Parsed but unused by the model.
    pub zip: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieRecord {
    pub movie_id: u32,
    /// Title with the trailing `(YYYY)` group removed.
    pub title: String,
    pub year: Option<u16>,
    pub genres: Vec<String>,
}

impl MovieRecord {
    /// Lowercased whitespace tokens of the year-stripped title.
    pub fn title_tokens(&self) -> Vec<String> {
        self.title.split_whitespace().map(str::to_lowercase).collect()
    }
}

fn latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

/// Yields `(1-based line number, decoded line)` for every non-empty line.
fn lines(bytes: &[u8]) -> impl Iterator<Item = (usize, String)> + '_ {
    bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            (i + 1, latin1(raw))
        })
        .filter(|(_, l)| !l.trim().is_empty())
}

fn fields(line: &str, line_no: usize, expected: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != expected {
        return Err(IngestError::MalformedLine {
            line: line_no,
            reason: format!("expected {expected} fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

fn int<T: std::str::FromStr>(field: &str, line_no: usize, name: &str) -> Result<T> {
    field.trim().parse().map_err(|_| IngestError::MalformedLine {
        line: line_no,
        reason: format!("{name} is not an integer: {field:?}"),
    })
}

fn read_all(mut stream: impl Read) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    stream.read_to_end(&mut buf)?;
    Ok(buf)
}

fn stream_err(e: std::io::Error) -> IngestError {
    IngestError::Io { path: PathBuf::from("<stream>"), cause: e }
}

/// Parses `UserID::MovieID::Rating::Timestamp` lines.
pub fn parse_ratings(stream: impl Read) -> Result<Vec<RatingRecord>> {
    let bytes = read_all(stream).map_err(stream_err)?;
    let mut out = Vec::with_capacity(bytes.len() / 24);
    for (line_no, line) in lines(&bytes) {
        let f = fields(&line, line_no, 4)?;
        let user_id: u32 = int(f[0], line_no, "UserID")?;
        let movie_id: u32 = int(f[1], line_no, "MovieID")?;
        let rating: i64 = int(f[2], line_no, "Rating")?;
        let timestamp: u64 = int(f[3], line_no, "Timestamp")?;
        if user_id == 0 || movie_id == 0 {
            return Err(IngestError::MalformedLine {
                line: line_no,
                reason: "ids must be nonzero".into(),
            });
        }
        if !(1..=5).contains(&rating) {
            return Err(IngestError::RatingOutOfRange(line_no));
        }
        out.push(RatingRecord { user_id, movie_id, rating: rating as u8, timestamp });
    }
    Ok(out)
}

/// Parses `UserID::Gender::Age::Occupation::Zip` lines.
pub fn parse_users(stream: impl Read) -> Result<Vec<UserRecord>> {
    let bytes = read_all(stream).map_err(stream_err)?;
    let mut out = Vec::new();
    for (line_no, line) in lines(&bytes) {
        let f = fields(&line, line_no, 5)?;
        let user_id: u32 = int(f[0], line_no, "UserID")?;
        let gender_code = match f[1].trim() {
            "F" => 0,
            "M" => 1,
            _ => return Err(IngestError::UnknownGender(line_no)),
        };
        let age = int(f[2], line_no, "Age")?;
        let occupation = int(f[3], line_no, "Occupation")?;
        out.push(UserRecord {
            user_id,
            gender_code,
            age,
            occupation,
            zip: f[4].trim().to_string(),
        });
    }
    Ok(out)
}

/// Splits a trailing `(YYYY)` group off a raw title.
fn split_year(raw: &str) -> (String, Option<u16>) {
    let t = raw.trim();
    if let Some(body) = t.strip_suffix(')') {
        if let Some(open) = body.rfind('(') {
            let digits = &body[open + 1..];
            if digits.len() == 4 && digits.bytes().all(|b| b.is_ascii_digit()) {
                return (body[..open].trim().to_string(), digits.parse().ok());
            }
        }
    }
    (t.to_string(), None)
}

/// Parses `MovieID::Title (YYYY)::Genre1|Genre2|...` lines.
pub fn parse_movies(stream: impl Read) -> Result<Vec<MovieRecord>> {
    let bytes = read_all(stream).map_err(stream_err)?;
    let mut out = Vec::new();
    for (line_no, line) in lines(&bytes) {
        let f = fields(&line, line_no, 3)?;
        let movie_id: u32 = int(f[0], line_no, "MovieID")?;
        let (title, year) = split_year(f[1]);
        let genres: Vec<String> = f[2]
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(String::from)
            .collect();
        if genres.is_empty() {
            return Err(IngestError::MalformedLine {
                line: line_no,
                reason: "empty genre list".into(),
            });
        }
        out.push(MovieRecord { movie_id, title, year, genres });
    }
    Ok(out)
}

/// A token vocabulary with `<PAD>` at code 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    codes: HashMap<String, u32>,
}

impl Vocab {
    fn with_pad() -> Self {
        let mut v = Vocab { names: Vec::new(), codes: HashMap::new() };
        v.insert(PAD_TOKEN);
        v
    }

    fn insert(&mut self, name: &str) -> u32 {
        if let Some(&c) = self.codes.get(name) {
            return c;
        }
        let c = self.names.len() as u32;
        self.names.push(name.to_string());
        self.codes.insert(name.to_string(), c);
        c
    }

    pub fn code(&self, name: &str) -> Option<u32> {
        self.codes.get(name).copied()
    }

    pub fn name(&self, code: u32) -> Option<&str> {
        self.names.get(code as usize).map(String::as_str)
    }

    /// Number of codes including `<PAD>`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Sizes reported for a set of vocabularies. Genre and word counts exclude `<PAD>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabCounts {
    pub num_users: usize,
    pub num_movies: usize,
    pub num_genres: usize,
    pub vocab_size: usize,
    pub num_occupations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub genres: Vocab,
    pub words: Vocab,
    /// Sorted distinct raw ages; the bucket of an age is its position.
    pub ages: Vec<u32>,
    /// Sorted distinct occupation ids; the code of an id is its position.
    pub occupations: Vec<u32>,
    /// User ids in first-occurrence order; the user index is the position.
    pub user_ids: Vec<u32>,
    /// Movie ids in first-occurrence order; the movie index is the position.
    pub movie_ids: Vec<u32>,
    user_index: HashMap<u32, u32>,
    movie_index: HashMap<u32, u32>,
}

fn index_of(ids: &[u32]) -> HashMap<u32, u32> {
    ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect()
}

fn first_occurrence(ids: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut seen = HashSet::new();
    ids.filter(|id| seen.insert(*id)).collect()
}

pub fn build_vocabularies(movies: &[MovieRecord], users: &[UserRecord]) -> Result<Vocabularies> {
    if movies.is_empty() {
        return Err(IngestError::NoMovies);
    }
    if users.is_empty() {
        return Err(IngestError::NoUsers);
    }
    let mut genres = Vocab::with_pad();
    let mut words = Vocab::with_pad();
    for m in movies {
        for g in &m.genres {
            genres.insert(g);
        }
        for w in m.title_tokens() {
            words.insert(&w);
        }
    }
    let mut ages: Vec<u32> = users.iter().map(|u| u.age).collect();
    ages.sort_unstable();
    ages.dedup();
    if ages.len() != AGE_BUCKETS {
        return Err(IngestError::TooManyAges(ages.len()));
    }
    let mut occupations: Vec<u32> = users.iter().map(|u| u.occupation).collect();
    occupations.sort_unstable();
    occupations.dedup();

    let user_ids = first_occurrence(users.iter().map(|u| u.user_id));
    let movie_ids = first_occurrence(movies.iter().map(|m| m.movie_id));
    Ok(Vocabularies {
        genres,
        words,
        ages,
        occupations,
        user_index: index_of(&user_ids),
        movie_index: index_of(&movie_ids),
        user_ids,
        movie_ids,
    })
}

impl Vocabularies {
    pub fn counts(&self) -> VocabCounts {
        VocabCounts {
            num_users: self.user_ids.len(),
            num_movies: self.movie_ids.len(),
            num_genres: self.genres.len() - 1,
            vocab_size: self.words.len() - 1,
            num_occupations: self.occupations.len(),
        }
    }

    pub fn age_bucket(&self, age: u32) -> Option<u32> {
        self.ages.binary_search(&age).ok().map(|b| b as u32)
    }

    pub fn occupation_code(&self, occupation: u32) -> Option<u32> {
        self.occupations.binary_search(&occupation).ok().map(|c| c as u32)
    }

    pub fn user_index(&self, user_id: u32) -> Option<u32> {
        self.user_index.get(&user_id).copied()
    }

    pub fn movie_index(&self, movie_id: u32) -> Option<u32> {
        self.movie_index.get(&movie_id).copied()
    }

    /// Serializes the vocabularies as the versioned metadata document
    /// written by `prepare`.
    pub fn to_metadata(&self) -> Metadata {
        Metadata {
            format: METADATA_FORMAT.to_string(),
            version: METADATA_VERSION,
            counts: self.counts(),
            genres: self.genres.names().to_vec(),
            words: self.words.names().to_vec(),
            ages: self.ages.clone(),
            occupations: self.occupations.clone(),
            user_ids: self.user_ids.clone(),
            movie_ids: self.movie_ids.clone(),
        }
    }
}

pub const METADATA_FORMAT: &str = "movierec-metadata";
pub const METADATA_VERSION: u32 = 1;

/// On-disk metadata layout (JSON). List positions are the codes:
/// `genres[0]` and `words[0]` are `<PAD>`, `ages[b]` is the raw age of
/// bucket `b`, `user_ids[i]` is the id of user index `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub format: String,
    pub version: u32,
    pub counts: VocabCounts,
    pub genres: Vec<String>,
    pub words: Vec<String>,
    pub ages: Vec<u32>,
    pub occupations: Vec<u32>,
    pub user_ids: Vec<u32>,
    pub movie_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedMovie {
    pub movie_index: u32,
    pub genre_codes: [u32; GENRE_LEN],
    pub title_codes: [u32; TITLE_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedUser {
    pub user_index: u32,
    pub gender: u32,
    pub age_bucket: u32,
    pub occupation: u32,
}

pub fn encode_movie(m: &MovieRecord, v: &Vocabularies) -> Result<EncodedMovie> {
    let movie_index = v.movie_index(m.movie_id).ok_or(IngestError::UnknownMovie(m.movie_id))?;
    if m.genres.len() > GENRE_LEN {
        return Err(IngestError::TooManyGenres { movie_id: m.movie_id, count: m.genres.len() });
    }
    let mut genre_codes = [PAD_CODE; GENRE_LEN];
    for (slot, g) in genre_codes.iter_mut().zip(&m.genres) {
        *slot = v.genres.code(g).ok_or_else(|| IngestError::UnknownGenre(g.clone()))?;
    }
    let mut title_codes = [PAD_CODE; TITLE_LEN];
    for (slot, w) in title_codes.iter_mut().zip(m.title_tokens()) {
        *slot = v.words.code(&w).ok_or(IngestError::UnknownWord(w))?;
    }
    Ok(EncodedMovie { movie_index, genre_codes, title_codes })
}

pub fn encode_user(u: &UserRecord, v: &Vocabularies) -> Result<EncodedUser> {
    Ok(EncodedUser {
        user_index: v.user_index(u.user_id).ok_or(IngestError::UnknownUser(u.user_id))?,
        gender: u.gender_code as u32,
        age_bucket: v.age_bucket(u.age).ok_or(IngestError::UnknownAge(u.age))?,
        occupation: v
            .occupation_code(u.occupation)
            .ok_or(IngestError::UnknownOccupation(u.occupation))?,
    })
}

/// A rating with user and movie resolved to model indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingTriple {
    pub user: u32,
    pub movie: u32,
    pub rating: f32,
}

/// The fully parsed and encoded dataset of one MovieLens directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pub movies: Vec<MovieRecord>,
    pub vocab: Vocabularies,
    /// Indexed by user index.
    pub encoded_users: Vec<EncodedUser>,
    /// Indexed by movie index.
    pub encoded_movies: Vec<EncodedMovie>,
    /// In file order.
    pub ratings: Vec<RatingTriple>,
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|cause| IngestError::Io { path: path.to_path_buf(), cause })
}

fn in_file<T>(file: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| IngestError::InFile { file: file.to_string(), cause: Box::new(e) })
}

impl Corpus {
    /// Loads `users.dat`, `movies.dat` and `ratings.dat` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let users_path = dir.join(USERS_FILE);
        let movies_path = dir.join(MOVIES_FILE);
        let ratings_path = dir.join(RATINGS_FILE);
        // Open all three up front so a missing file is reported before any parsing.
        let (uf, mf, rf) = (open(&users_path)?, open(&movies_path)?, open(&ratings_path)?);
        let users = in_file(USERS_FILE, parse_users(uf))?;
        let movies = in_file(MOVIES_FILE, parse_movies(mf))?;
        let ratings = in_file(RATINGS_FILE, parse_ratings(rf))?;
        Self::from_records(users, movies, &ratings)
    }

    pub fn from_records(
        users: Vec<UserRecord>,
        movies: Vec<MovieRecord>,
        ratings: &[RatingRecord],
    ) -> Result<Self> {
        let vocab = build_vocabularies(&movies, &users)?;
        let mut encoded_users = vec![None; vocab.user_ids.len()];
        for u in &users {
            let e = encode_user(u, &vocab)?;
            encoded_users[e.user_index as usize].get_or_insert(e);
        }
        let mut encoded_movies = vec![None; vocab.movie_ids.len()];
        for m in &movies {
            let e = encode_movie(m, &vocab)?;
            let slot = &mut encoded_movies[e.movie_index as usize];
            if slot.is_none() {
                *slot = Some(e);
            }
        }
        let ratings = ratings
            .iter()
            .map(|r| {
                Ok(RatingTriple {
                    user: vocab.user_index(r.user_id).ok_or(IngestError::UnknownUser(r.user_id))?,
                    movie: vocab
                        .movie_index(r.movie_id)
                        .ok_or(IngestError::UnknownMovie(r.movie_id))?,
                    rating: r.rating as f32,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            encoded_users: encoded_users.into_iter().map(Option::unwrap).collect(),
            encoded_movies: encoded_movies.into_iter().map(Option::unwrap).collect(),
            users,
            movies,
            vocab,
            ratings,
        })
    }

    /// The title with its release year, as written in `movies.dat`.
    pub fn movie_title(&self, movie_index: u32) -> Option<String> {
        let id = *self.vocab.movie_ids.get(movie_index as usize)?;
        let m = self.movies.iter().find(|m| m.movie_id == id)?;
        Some(match m.year {
            Some(y) => format!("{} ({y})", m.title),
            None => m.title.clone(),
        })
    }
}
