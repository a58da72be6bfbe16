//! Loading model files and ranking unrated items for a new user.

use std::cmp::Ordering;
use std::path::Path;

use lfg_core::baselines::{self, BaselineModel};
use lfg_core::dataset::DatasetError;
use lfg_core::lfg::{LfgError, LfgModel, LFG_MAGIC};
use lfg_core::persist::{self, PersistError};
use lfg_core::{RATING_MAX, RATING_MIN};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("unknown occupation {0:?}")]
    UnknownOccupation(String),
    #[error("unknown gender {0:?} (expected M or F)")]
    UnknownGender(String),
    #[error("unknown item {0}")]
    UnknownItem(u32),
    #[error("rating {rating} for item {item} is outside [1, 5]")]
    RatingOutOfRange { item: u32, rating: f64 },
    #[error("item {0} is rated more than once")]
    DuplicateItem(u32),
    #[error("inference failed: {0}")]
    Internal(String),
}

impl RecommendError {
    /// Whether the request itself is unusable, as opposed to well-formed but
    /// semantically invalid.
    pub fn is_malformed(&self) -> bool {
        matches!(
            self,
            RecommendError::UnknownOccupation(_) | RecommendError::UnknownGender(_)
        )
    }
}

impl From<LfgError> for RecommendError {
    fn from(e: LfgError) -> Self {
        match e {
            LfgError::Dataset(DatasetError::UnknownOccupation(o)) => {
                RecommendError::UnknownOccupation(o)
            }
            LfgError::Dataset(DatasetError::UnknownGender(g)) => RecommendError::UnknownGender(g),
            LfgError::UnknownItem(i) => RecommendError::UnknownItem(i),
            LfgError::RatingOutOfRange { item, rating } => {
                RecommendError::RatingOutOfRange { item, rating }
            }
            other => RecommendError::Internal(other.to_string()),
        }
    }
}

/// A new user's request: ratings keyed by native item id plus demographics.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub ratings: Vec<(u32, f64)>,
    pub age: f64,
    pub gender: String,
    pub occupation: String,
    pub top_n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedModel {
    Lfg(LfgModel),
    Baseline {
        model: BaselineModel,
        item_ids: Vec<u32>,
    },
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Lfg(#[from] LfgError),
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        if bytes.starts_with(&LFG_MAGIC) {
            Ok(LoadedModel::Lfg(LfgModel::from_bytes(bytes)?))
        } else {
            let (model, item_ids) = baselines::from_bytes(bytes)?;
            Ok(LoadedModel::Baseline { model, item_ids })
        }
    }

    /// Loads a model and derives its version string from the file checksum.
    pub fn load(path: &Path) -> Result<(Self, String), LoadError> {
        let bytes = persist::read_file(path)?;
        let model = Self::from_bytes(&bytes)?;
        let version = version_of(&model, &bytes);
        Ok((model, version))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Lfg(_) => "lfg",
            LoadedModel::Baseline { model, .. } => model.flavor.name(),
        }
    }

    fn item_ids(&self) -> &[u32] {
        match self {
            LoadedModel::Lfg(m) => &m.item_ids,
            LoadedModel::Baseline { item_ids, .. } => item_ids,
        }
    }

    /// Predicted rating of every item, clamped to the rating scale. Baselines
    /// have no user factors for a new user and fall back to cold predictions.
    pub fn score_all(&self, query: &Query) -> Result<Vec<f64>, RecommendError> {
        let ids = self.item_ids();
        let mut seen = std::collections::HashSet::new();
        for &(item, rating) in &query.ratings {
            if ids.binary_search(&item).is_err() {
                return Err(RecommendError::UnknownItem(item));
            }
            if !(RATING_MIN..=RATING_MAX).contains(&rating) {
                return Err(RecommendError::RatingOutOfRange { item, rating });
            }
            if !seen.insert(item) {
                return Err(RecommendError::DuplicateItem(item));
            }
        }
        match self {
            LoadedModel::Lfg(m) => {
                Ok(m.infer_user_raw(&query.ratings, query.age, &query.gender, &query.occupation)?)
            }
            LoadedModel::Baseline { model, .. } => (0..ids.len())
                .map(|i| {
                    model
                        .predict_cold(i)
                        .map_err(|e| RecommendError::Internal(e.to_string()))
                })
                .collect(),
        }
    }

    /// Top `query.top_n` unrated items by score, ties by ascending item.
    pub fn recommend(&self, query: &Query) -> Result<Vec<(u32, f64)>, RecommendError> {
        let scores = self.score_all(query)?;
        let ids = self.item_ids();
        let rated: std::collections::HashSet<u32> = query.ratings.iter().map(|&(i, _)| i).collect();
        let mut ranked: Vec<(u32, f64)> = ids
            .iter()
            .zip(scores)
            .filter(|(id, _)| !rated.contains(id))
            .map(|(&id, s)| (id, s))
            .collect();
        ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        ranked.truncate(query.top_n);
        Ok(ranked)
    }
}

fn version_of(model: &LoadedModel, bytes: &[u8]) -> String {
    let tail: [u8; 8] = bytes[bytes.len() - 8..]
        .try_into()
        .expect("validated container");
    format!("{}-{:016x}", model.kind(), u64::from_le_bytes(tail))
}

/// Parses an `item=rating` pair.
pub fn parse_pair(s: &str) -> Result<(u32, f64), String> {
    let (item, rating) = s
        .split_once('=')
        .ok_or_else(|| format!("expected item=rating, got {s:?}"))?;
    let item = item
        .trim()
        .parse()
        .map_err(|_| format!("bad item id in {s:?}"))?;
    let rating: f64 = rating
        .trim()
        .parse()
        .map_err(|_| format!("bad rating in {s:?}"))?;
    if !rating.is_finite() {
        return Err(format!("bad rating in {s:?}"));
    }
    Ok((item, rating))
}
