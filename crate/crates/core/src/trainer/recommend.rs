use std::cmp::Ordering;
use std::collections::HashSet;

use crate::autograd::{ParameterSet, Tensor};
use crate::ingest::{RatingTriple, Vocabularies};
use crate::towers::Towers;

use super::{Catalog, Result, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub movie_index: u32,
    pub movie_id: u32,
    pub score: f64,
}

/// Scores every movie `user_id` has not rated in `train` and returns the
/// best `k`, highest first, ties broken by ascending movie id.
pub fn recommend(
    towers: &Towers,
    params: &ParameterSet,
    vocab: &Vocabularies,
    catalog: Catalog<'_>,
    train: &[RatingTriple],
    user_id: u32,
    k: usize,
) -> Result<Vec<Recommendation>> {
    if k == 0 {
        return Err(TrainError::InvalidConfig("k must be at least 1".into()));
    }
    let user = vocab.user_index(user_id).ok_or(TrainError::UnknownUser(user_id))?;
    let rated: HashSet<u32> = train.iter().filter(|t| t.user == user).map(|t| t.movie).collect();
    let candidates: Vec<u32> = (0..catalog.movies.len() as u32).filter(|m| !rated.contains(m)).collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let u = towers.user_feature(params, &catalog.users[user as usize])?;
    let movies: Vec<_> = candidates.iter().map(|&m| &catalog.movies[m as usize]).collect();
    let feats = towers.movie_feature_matrix(params, &movies)?;
    let ids: Vec<u32> = candidates.iter().map(|&m| vocab.movie_ids[m as usize]).collect();
    let ranked = rank_candidates(&u, &feats, &ids, k)?;
    Ok(ranked
        .into_iter()
        .map(|(pos, score)| Recommendation { movie_index: candidates[pos], movie_id: ids[pos], score })
        .collect())
}

/// Scores each row of `movie_features` against `user_feature` and returns
/// `(row, score)` for the best `k` rows, highest score first, ties broken
/// by ascending `movie_ids[row]`.
pub fn rank_candidates(user_feature: &Tensor, movie_features: &Tensor, movie_ids: &[u32], k: usize) -> Result<Vec<(usize, f64)>> {
    let (n, d) = movie_features.dims2();
    if user_feature.len() != d || movie_ids.len() != n {
        return Err(crate::autograd::TensorError::ShapeMismatch {
            op: "rank_candidates",
            detail: format!("user {:?}, movies {:?}, {} ids", user_feature.shape(), movie_features.shape(), movie_ids.len()),
        }
        .into());
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|i| (i, movie_features.row(i).iter().zip(user_feature.data()).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(movie_ids[a.0].cmp(&movie_ids[b.0]))
    });
    scored.truncate(k);
    Ok(scored)
}
