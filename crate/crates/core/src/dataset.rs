//! MovieLens ingestion, demographic feature encoding, sparse rating matrices
//! and cross-validation fold plans.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::DenseMatrix;
use crate::{RATING_MAX, RATING_MIN};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing data file {0}")]
    MissingFile(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: rating {value} outside [1, 5]")]
    RatingOutOfRange {
        path: PathBuf,
        line: usize,
        value: f64,
    },
    #[error("duplicate rating for user {user}, item {item}")]
    DuplicateRating { user: u32, item: u32 },
    #[error("position ({user}, {item}) outside a {rows}x{cols} matrix")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        rows: usize,
        cols: usize,
    },
    #[error("no ratings to build a matrix from")]
    Empty,
    #[error("user {0} has ratings but no demographic record")]
    MissingUser(u32),
    #[error("unknown occupation {0:?}")]
    UnknownOccupation(String),
    #[error("unknown gender {0:?}")]
    UnknownGender(String),
    #[error("rating triple references user {user} / item {item} absent from the id map")]
    UnmappedId { user: u32, item: u32 },
    #[error("fold plan needs at least 2 folds, got {0}")]
    FoldCount(usize),
    #[error("fold plan was built for {expected} ratings over {users} users, matrix has {got}")]
    PlanMismatch {
        expected: usize,
        users: usize,
        got: usize,
    },
}

type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "ml100k")]
    Ml100k,
    #[serde(rename = "ml1m")]
    Ml1m,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Ml100k => "ml100k",
            DatasetKind::Ml1m => "ml1m",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingTriple {
    pub user_id: u32,
    pub item_id: u32,
    pub rating: f64,
    pub timestamp: i64,
}

/// Demographics as they appear in the user file. For ML-1m `age` is the
/// bucket code and `occupation` the integer code rendered as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawUser {
    pub user_id: u32,
    pub age: u32,
    pub gender: String,
    pub occupation: String,
}

/// Everything read from one MovieLens directory.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub kind: DatasetKind,
    pub triples: Vec<RatingTriple>,
    pub users: Vec<RawUser>,
    /// Occupation vocabulary in slot order.
    pub occupations: Vec<String>,
}

fn read_file(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("bad {what} {raw:?}")))
}

fn parse_ratings(path: &Path, sep: &str) -> Result<Vec<RatingTriple>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != 4 {
            return Err(malformed(
                path,
                lineno,
                format!(
                    "expected 4 {sep:?}-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let rating: f64 = parse_field(path, lineno, "rating", fields[2])?;
        if !(RATING_MIN..=RATING_MAX).contains(&rating) {
            return Err(DatasetError::RatingOutOfRange {
                path: path.to_path_buf(),
                line: lineno,
                value: rating,
            });
        }
        out.push(RatingTriple {
            user_id: parse_field(path, lineno, "user id", fields[0])?,
            item_id: parse_field(path, lineno, "item id", fields[1])?,
            rating,
            timestamp: parse_field(path, lineno, "timestamp", fields[3])?,
        });
    }
    Ok(out)
}

/// Reads `u.data`, `u.user` and `u.occupation` from an ML-100k directory.
pub fn parse_100k(data_dir: &Path) -> Result<RawDataset> {
    let triples = parse_ratings(&data_dir.join("u.data"), "\t")?;

    let user_path = data_dir.join("u.user");
    let mut users = Vec::new();
    for (idx, line) in read_file(&user_path)?.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 5 {
            return Err(malformed(
                &user_path,
                lineno,
                "expected user|age|gender|occupation|zip",
            ));
        }
        users.push(RawUser {
            user_id: parse_field(&user_path, lineno, "user id", fields[0])?,
            age: parse_field(&user_path, lineno, "age", fields[1])?,
            gender: fields[2].trim().to_string(),
            occupation: fields[3].trim().to_string(),
        });
    }

    let occupations = read_file(&data_dir.join("u.occupation"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();

    Ok(RawDataset {
        kind: DatasetKind::Ml100k,
        triples,
        users,
        occupations,
    })
}

/// Reads `ratings.dat` and `users.dat` from an ML-1m directory. The
/// occupation vocabulary is the sorted set of codes present in `users.dat`.
pub fn parse_1m(data_dir: &Path) -> Result<RawDataset> {
    let triples = parse_ratings(&data_dir.join("ratings.dat"), "::")?;

    let user_path = data_dir.join("users.dat");
    let mut users = Vec::new();
    let mut codes = BTreeSet::new();
    for (idx, line) in read_file(&user_path)?.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 5 {
            return Err(malformed(
                &user_path,
                lineno,
                "expected UserID::Gender::Age::Occupation::Zip",
            ));
        }
        let code: u32 = parse_field(&user_path, lineno, "occupation code", fields[3])?;
        codes.insert(code);
        users.push(RawUser {
            user_id: parse_field(&user_path, lineno, "user id", fields[0])?,
            gender: fields[1].trim().to_string(),
            age: parse_field(&user_path, lineno, "age", fields[2])?,
            occupation: code.to_string(),
        });
    }

    Ok(RawDataset {
        kind: DatasetKind::Ml1m,
        triples,
        users,
        occupations: codes.into_iter().map(|c| c.to_string()).collect(),
    })
}

pub fn parse(kind: DatasetKind, data_dir: &Path) -> Result<RawDataset> {
    match kind {
        DatasetKind::Ml100k => parse_100k(data_dir),
        DatasetKind::Ml1m => parse_1m(data_dir),
    }
}

/// Dense 0-based indices for native user and item ids, both assigned in
/// ascending native-id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    user_ids: Vec<u32>,
    item_ids: Vec<u32>,
    user_lookup: HashMap<u32, usize>,
    item_lookup: HashMap<u32, usize>,
}

impl IdMap {
    pub fn from_triples(triples: &[RatingTriple]) -> Self {
        let users: BTreeSet<u32> = triples.iter().map(|t| t.user_id).collect();
        let items: BTreeSet<u32> = triples.iter().map(|t| t.item_id).collect();
        Self::new(users.into_iter().collect(), items.into_iter().collect())
    }

    pub fn new(user_ids: Vec<u32>, item_ids: Vec<u32>) -> Self {
        let user_lookup = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_lookup = item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        Self {
            user_ids,
            item_ids,
            user_lookup,
            item_lookup,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_index(&self, user_id: u32) -> Option<usize> {
        self.user_lookup.get(&user_id).copied()
    }

    pub fn item_index(&self, item_id: u32) -> Option<usize> {
        self.item_lookup.get(&item_id).copied()
    }

    pub fn user_id(&self, index: usize) -> u32 {
        self.user_ids[index]
    }

    pub fn item_id(&self, index: usize) -> u32 {
        self.item_ids[index]
    }

    pub fn item_ids(&self) -> &[u32] {
        &self.item_ids
    }
}

/// Sparse m×n rating matrix.
///
/// Each user row holds `(item_index, rating)` pairs sorted by item index, so
/// the stored entries and the observed-position set `T` are the same object
/// and cannot disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    n_users: usize,
    n_items: usize,
    rows: Vec<Vec<(usize, f64)>>,
    len: usize,
}

impl RatingMatrix {
    /// Builds from `(user_index, item_index, rating)` triples. Duplicate
    /// positions and out-of-range indices are rejected.
    pub fn from_entries(
        n_users: usize,
        n_items: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_users];
        for (u, i, r) in entries {
            if u >= n_users || i >= n_items {
                return Err(DatasetError::IndexOutOfRange {
                    user: u,
                    item: i,
                    rows: n_users,
                    cols: n_items,
                });
            }
            rows[u].push((i, r));
        }
        let mut len = 0;
        for (u, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(i, _)| i);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(DatasetError::DuplicateRating {
                    user: u as u32,
                    item: w[0].0 as u32,
                });
            }
            len += row.len();
        }
        Ok(Self {
            n_users,
            n_items,
            rows,
            len,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// `|T|`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        let row = self.rows.get(user)?;
        row.binary_search_by_key(&item, |&(i, _)| i)
            .ok()
            .map(|p| row[p].1)
    }

    pub fn user_row(&self, user: usize) -> &[(usize, f64)] {
        &self.rows[user]
    }

    /// Observed positions in (user, item) order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(i, r)| (u, i, r)))
    }

    pub fn mean(&self) -> Option<f64> {
        if self.len == 0 {
            return None;
        }
        Some(self.observed().map(|(_, _, r)| r).sum::<f64>() / self.len as f64)
    }

    /// Keeps the entries for which `keep(user, position_in_row, item)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize, usize) -> bool) -> RatingMatrix {
        let mut len = 0;
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(u, row)| {
                let kept: Vec<(usize, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|&(p, &(i, _))| keep(u, p, i))
                    .map(|(_, &e)| e)
                    .collect();
                len += kept.len();
                kept
            })
            .collect();
        RatingMatrix {
            n_users: self.n_users,
            n_items: self.n_items,
            rows,
            len,
        }
    }

    /// Number of users with at least one rating.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.n_users)
            .filter(|&u| !self.rows[u].is_empty())
            .collect()
    }
}

/// Builds the rating matrix for `triples` under `ids`.
pub fn build_matrix(triples: &[RatingTriple], ids: &IdMap) -> Result<RatingMatrix> {
    if triples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut entries = Vec::with_capacity(triples.len());
    for t in triples {
        let (Some(u), Some(i)) = (ids.user_index(t.user_id), ids.item_index(t.item_id)) else {
            return Err(DatasetError::UnmappedId {
                user: t.user_id,
                item: t.item_id,
            });
        };
        entries.push((u, i, t.rating));
    }
    RatingMatrix::from_entries(ids.n_users(), ids.n_items(), entries).map_err(|e| match e {
        DatasetError::DuplicateRating { user, item } => DatasetError::DuplicateRating {
            user: ids.user_id(user as usize),
            item: ids.item_id(item as usize),
        },
        other => other,
    })
}

/// Gender slots of the one-hot encoding, in slot order.
pub const GENDERS: [&str; 2] = ["M", "F"];

/// Encoding metadata for demographic features: the age normalization range
/// and the occupation vocabulary. Stored with trained models so inference-time
/// users are encoded identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub age_min: f64,
    pub age_max: f64,
    pub occupations: Vec<String>,
}

impl FeatureCodec {
    /// `1 + 2 + |occupations|`.
    pub fn dim(&self) -> usize {
        1 + GENDERS.len() + self.occupations.len()
    }

    /// `[normalized age, gender one-hot, occupation one-hot]`. Ages outside the
    /// training range are clamped to `[0, 1]`.
    pub fn encode(&self, age: f64, gender: &str, occupation: &str) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.dim()];
        let span = self.age_max - self.age_min;
        row[0] = if span > 0.0 {
            ((age - self.age_min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let g = GENDERS
            .iter()
            .position(|&g| g.eq_ignore_ascii_case(gender.trim()))
            .ok_or_else(|| DatasetError::UnknownGender(gender.to_string()))?;
        row[1 + g] = 1.0;
        let o = self
            .occupations
            .iter()
            .position(|o| o == occupation.trim())
            .ok_or_else(|| DatasetError::UnknownOccupation(occupation.to_string()))?;
        row[1 + GENDERS.len() + o] = 1.0;
        Ok(row)
    }
}

/// Per-user demographic feature rows, indexed by dense user index.
#[derive(Clone, Debug, PartialEq)]
pub struct UserFeatures {
    pub codec: FeatureCodec,
    /// m×d_E.
    pub rows: DenseMatrix,
}

/// Encodes the demographics of every user in `ids`. Age is min-max normalized
/// over that population.
pub fn encode_features(raw: &RawDataset, ids: &IdMap) -> Result<UserFeatures> {
    let by_id: HashMap<u32, &RawUser> = raw.users.iter().map(|u| (u.user_id, u)).collect();
    let mut population = Vec::with_capacity(ids.n_users());
    for idx in 0..ids.n_users() {
        let id = ids.user_id(idx);
        population.push(*by_id.get(&id).ok_or(DatasetError::MissingUser(id))?);
    }
    let age_min = population.iter().map(|u| u.age).min().unwrap_or(0) as f64;
    let age_max = population.iter().map(|u| u.age).max().unwrap_or(0) as f64;
    let codec = FeatureCodec {
        age_min,
        age_max,
        occupations: raw.occupations.clone(),
    };
    let mut rows = DenseMatrix::zeros(ids.n_users(), codec.dim());
    for (idx, user) in population.iter().enumerate() {
        let row = codec.encode(user.age as f64, &user.gender, &user.occupation)?;
        rows.row_mut(idx).copy_from_slice(&row);
    }
    Ok(UserFeatures { codec, rows })
}

/// A parsed and encoded dataset ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub ids: IdMap,
    pub ratings: RatingMatrix,
    pub features: UserFeatures,
}

impl Dataset {
    pub fn load(kind: DatasetKind, data_dir: &Path) -> Result<Self> {
        Self::from_raw(&parse(kind, data_dir)?)
    }

    pub fn from_raw(raw: &RawDataset) -> Result<Self> {
        let ids = IdMap::from_triples(&raw.triples);
        let ratings = build_matrix(&raw.triples, &ids)?;
        let features = encode_features(raw, &ids)?;
        Ok(Self {
            kind: raw.kind,
            ids,
            ratings,
            features,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldMode {
    /// Every user's ratings are split across all folds.
    PerUserRatings,
    /// A fixed fifth of the users are held out as new users in every fold;
    /// the rest are split per user as in `PerUserRatings`.
    UserLevel,
    /// Users are dealt into folds; fold `f`'s users are the new users of fold
    /// `f` and every other user trains with all of their ratings.
    UserFolds,
}

/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 5;

/// Fold assignment for every observed rating of a matrix.
///
/// `assignment[u][p]` is the fold of the `p`-th entry of user `u`'s row. For
/// new users (user-level mode) the same dealing splits the ratings into an
/// inference-time history (folds `1..`) and a scored part (fold `0`).
/// `UserFolds` plans additionally deal users into folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub fold_count: usize,
    pub seed: u64,
    assignment: Vec<Vec<u8>>,
    new_users: Vec<bool>,
    user_folds: Vec<u8>,
    total: usize,
}

/// Number of users held out as new: `⌈m / 5⌉`.
pub fn new_user_count(n_users: usize) -> usize {
    n_users.div_ceil(5)
}

pub fn make_fold_plan(
    matrix: &RatingMatrix,
    mode: FoldMode,
    fold_count: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if !(2..=u8::MAX as usize).contains(&fold_count) {
        return Err(DatasetError::FoldCount(fold_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = matrix.n_users();

    let mut new_users = vec![false; m];
    let mut user_folds = Vec::new();
    match mode {
        FoldMode::PerUserRatings => {}
        FoldMode::UserLevel => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            for &u in &order[m - new_user_count(m)..] {
                new_users[u] = true;
            }
        }
        FoldMode::UserFolds => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            user_folds = vec![0u8; m];
            for (rank, &u) in order.iter().enumerate() {
                user_folds[u] = (rank % fold_count) as u8;
            }
        }
    }

    let mut sparse_users = 0usize;
    let mut assignment = Vec::with_capacity(m);
    for u in 0..m {
        let count = matrix.user_row(u).len();
        if count > 0 && count < fold_count && mode == FoldMode::PerUserRatings {
            sparse_users += 1;
        }
        let mut positions: Vec<usize> = (0..count).collect();
        positions.shuffle(&mut rng);
        let offset = rng.gen_range(0..fold_count);
        let mut folds = vec![0u8; count];
        for (rank, &p) in positions.iter().enumerate() {
            folds[p] = ((offset + rank) % fold_count) as u8;
        }
        assignment.push(folds);
    }
    if sparse_users > 0 {
        log::warn!("{sparse_users} users have fewer than {fold_count} ratings; some folds get none of theirs");
    }

    Ok(FoldPlan {
        mode,
        fold_count,
        seed,
        assignment,
        new_users,
        user_folds,
        total: matrix.len(),
    })
}

impl FoldPlan {
    fn check(&self, matrix: &RatingMatrix) -> Result<()> {
        if matrix.len() != self.total || matrix.n_users() != self.assignment.len() {
            return Err(DatasetError::PlanMismatch {
                expected: self.total,
                users: self.assignment.len(),
                got: matrix.len(),
            });
        }
        Ok(())
    }

    /// Fold of the `position`-th rating in user `user`'s row.
    pub fn fold_of(&self, user: usize, position: usize) -> usize {
        self.assignment[user][position] as usize
    }

    /// Whether `user` is a new (held-out) user in `fold`.
    pub fn is_new_user(&self, user: usize, fold: usize) -> bool {
        match self.mode {
            FoldMode::PerUserRatings => false,
            FoldMode::UserLevel => self.new_users[user],
            FoldMode::UserFolds => self.user_folds[user] as usize == fold,
        }
    }

    pub fn new_users(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&u| self.is_new_user(u, fold))
            .collect()
    }

    /// Training ratings of `fold`: existing users' ratings outside `fold`, or
    /// for `UserFolds` every rating of the users outside `fold`.
    pub fn train_matrix(&self, matrix: &RatingMatrix, fold: usize) -> Result<RatingMatrix> {
        self.check(matrix)?;
        Ok(match self.mode {
            FoldMode::UserFolds => matrix.filter(|u, _, _| !self.is_new_user(u, fold)),
            _ => matrix.filter(|u, p, _| !self.is_new_user(u, fold) && self.fold_of(u, p) != fold),
        })
    }

    /// Existing users' ratings in `fold` (empty for `UserFolds`).
    pub fn eval_matrix(&self, matrix: &RatingMatrix, fold: usize) -> Result<RatingMatrix> {
        self.check(matrix)?;
        Ok(match self.mode {
            FoldMode::UserFolds => matrix.filter(|_, _, _| false),
            _ => matrix.filter(|u, p, _| !self.is_new_user(u, fold) && self.fold_of(u, p) == fold),
        })
    }

    /// New users' ratings given to the model at inference time (≈80%).
    pub fn new_user_history(&self, matrix: &RatingMatrix, fold: usize) -> Result<RatingMatrix> {
        self.check(matrix)?;
        Ok(matrix.filter(|u, p, _| self.is_new_user(u, fold) && self.fold_of(u, p) != 0))
    }

    /// New users' ratings that are scored (≈20%).
    pub fn new_user_targets(&self, matrix: &RatingMatrix, fold: usize) -> Result<RatingMatrix> {
        self.check(matrix)?;
        Ok(matrix.filter(|u, p, _| self.is_new_user(u, fold) && self.fold_of(u, p) == 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) {
        let mut f = fs::File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn ml100k_fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "u.data",
            "1\t5\t4\t886397596\n2\t5\t3\t886397597\n1\t7\t1\t886397598\n",
        );
        write(
            dir.path(),
            "u.user",
            "1|24|M|technician|85711\n2|53|F|other|94043\n",
        );
        write(dir.path(), "u.occupation", "other\ntechnician\nwriter\n");
        dir
    }

    #[test]
    fn parses_100k_line() {
        let dir = ml100k_fixture();
        let raw = parse_100k(dir.path()).unwrap();
        assert_eq!(
            raw.triples[0],
            RatingTriple {
                user_id: 1,
                item_id: 5,
                rating: 4.0,
                timestamp: 886397596
            }
        );
        assert_eq!(raw.triples.len(), 3);
        assert_eq!(raw.users[1].occupation, "other");
        assert_eq!(raw.occupations, vec!["other", "technician", "writer"]);
    }

    #[test]
    fn reports_line_number_of_malformed_line() {
        let dir = ml100k_fixture();
        write(dir.path(), "u.data", "1\t5\t4\t886397596\n1\t6\t4\n");
        match parse_100k(dir.path()) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_rating() {
        let dir = ml100k_fixture();
        write(dir.path(), "u.data", "1\t5\t6\t886397596\n");
        assert!(matches!(
            parse_100k(dir.path()),
            Err(DatasetError::RatingOutOfRange { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = ml100k_fixture();
        fs::remove_file(dir.path().join("u.occupation")).unwrap();
        assert!(matches!(
            parse_100k(dir.path()),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn empty_ratings_fail_at_matrix_build() {
        let dir = ml100k_fixture();
        write(dir.path(), "u.data", "");
        let raw = parse_100k(dir.path()).unwrap();
        assert!(raw.triples.is_empty());
        assert!(matches!(Dataset::from_raw(&raw), Err(DatasetError::Empty)));
    }

    #[test]
    fn parses_1m_lines() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "ratings.dat",
            "1::1193::5::978300760\n2::1193::3::978300761\n",
        );
        write(
            dir.path(),
            "users.dat",
            "1::F::1::10::48067\n2::M::56::16::70072\n",
        );
        let raw = parse_1m(dir.path()).unwrap();
        assert_eq!(
            raw.triples[0],
            RatingTriple {
                user_id: 1,
                item_id: 1193,
                rating: 5.0,
                timestamp: 978300760
            }
        );
        assert_eq!(raw.occupations, vec!["10", "16"]);
        let ds = Dataset::from_raw(&raw).unwrap();
        assert_eq!(ds.features.rows.row(0)[0], 0.0);
        assert_eq!(ds.features.rows.row(1)[0], 1.0);
    }

    #[test]
    fn comma_separated_1m_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "ratings.dat", "1,1193,5,978300760\n");
        write(dir.path(), "users.dat", "1::F::1::10::48067\n");
        assert!(matches!(
            parse_1m(dir.path()),
            Err(DatasetError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn build_matrix_counts_and_rejects_duplicates() {
        let t = |u, i, r| RatingTriple {
            user_id: u,
            item_id: i,
            rating: r,
            timestamp: 0,
        };
        let triples = vec![t(10, 1, 4.0), t(10, 2, 3.0), t(20, 1, 5.0)];
        let ids = IdMap::from_triples(&triples);
        let m = build_matrix(&triples, &ids).unwrap();
        assert_eq!((m.n_users(), m.n_items(), m.len()), (2, 2, 3));
        assert_eq!(m.get(1, 0), Some(5.0));
        assert_eq!(m.get(1, 1), None);

        let dup = vec![t(10, 1, 4.0), t(10, 1, 3.0)];
        let ids = IdMap::from_triples(&dup);
        assert!(matches!(
            build_matrix(&dup, &ids),
            Err(DatasetError::DuplicateRating { user: 10, item: 1 })
        ));
    }

    #[test]
    fn feature_encoding_endpoints_and_determinism() {
        let codec = FeatureCodec {
            age_min: 7.0,
            age_max: 73.0,
            occupations: vec!["technician".into(), "writer".into()],
        };
        let row = codec.encode(24.0, "M", "technician").unwrap();
        assert!((row[0] - 17.0 / 66.0).abs() < 1e-15);
        assert_eq!(&row[1..], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(codec.encode(73.0, "F", "writer").unwrap()[0], 1.0);
        assert_eq!(row, codec.encode(24.0, "M", "technician").unwrap());
        assert!(matches!(
            codec.encode(30.0, "M", "astronaut"),
            Err(DatasetError::UnknownOccupation(_))
        ));
        assert!(matches!(
            codec.encode(30.0, "X", "writer"),
            Err(DatasetError::UnknownGender(_))
        ));
    }

    #[test]
    fn user_missing_demographics_is_an_error() {
        let dir = ml100k_fixture();
        write(dir.path(), "u.user", "1|24|M|technician|85711\n");
        let raw = parse_100k(dir.path()).unwrap();
        assert!(matches!(
            Dataset::from_raw(&raw),
            Err(DatasetError::MissingUser(2))
        ));
    }

    #[test]
    fn ten_ratings_give_two_per_fold() {
        let m = RatingMatrix::from_entries(1, 10, (0..10).map(|i| (0, i, 3.0))).unwrap();
        let plan = make_fold_plan(&m, FoldMode::PerUserRatings, 5, 3).unwrap();
        let mut counts = [0; 5];
        for p in 0..10 {
            counts[plan.fold_of(0, p)] += 1;
        }
        assert_eq!(counts, [2; 5]);
    }

    #[test]
    fn user_level_marks_a_fifth_as_new() {
        let m = RatingMatrix::from_entries(943, 3, (0..943).map(|u| (u, u % 3, 4.0))).unwrap();
        let plan = make_fold_plan(&m, FoldMode::UserLevel, 5, 11).unwrap();
        assert_eq!(plan.new_users(0).len(), 189);
        assert_eq!(plan.new_users(0), plan.new_users(3));
        assert_eq!(new_user_count(943), 189);
    }

    #[test]
    fn user_folds_rotate_new_users() {
        let m = RatingMatrix::from_entries(943, 3, (0..943).map(|u| (u, u % 3, 4.0))).unwrap();
        let plan = make_fold_plan(&m, FoldMode::UserFolds, 5, 11).unwrap();
        let mut seen = vec![0; 943];
        for f in 0..5 {
            let new = plan.new_users(f);
            assert!((188..=189).contains(&new.len()));
            new.iter().for_each(|&u| seen[u] += 1);
            let train = plan.train_matrix(&m, f).unwrap();
            assert_eq!(train.len(), 943 - new.len());
            assert!(new.iter().all(|&u| train.user_row(u).is_empty()));
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn fold_plans_are_deterministic() {
        let m = RatingMatrix::from_entries(
            20,
            30,
            (0..20).flat_map(|u| (0..(u + 3)).map(move |i| (u, i, 1.0 + (i % 5) as f64))),
        )
        .unwrap();
        let a = make_fold_plan(&m, FoldMode::UserLevel, 5, 99).unwrap();
        let b = make_fold_plan(&m, FoldMode::UserLevel, 5, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_fold_plan(&m, FoldMode::UserLevel, 5, 100).unwrap());
    }

    #[test]
    fn plan_rejects_foreign_matrix() {
        let m = RatingMatrix::from_entries(2, 2, [(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let plan = make_fold_plan(&m, FoldMode::PerUserRatings, 5, 0).unwrap();
        let other = RatingMatrix::from_entries(2, 2, [(0, 0, 1.0)]).unwrap();
        assert!(plan.train_matrix(&other, 0).is_err());
        assert!(make_fold_plan(&m, FoldMode::PerUserRatings, 1, 0).is_err());
    }
}
