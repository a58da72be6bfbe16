//! FunkSVD and BiasSVD trained by stochastic gradient descent on observed
//! ratings only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clamp_rating;
use crate::dataset::RatingMatrix;
use crate::matrix::DenseMatrix;
use crate::persist::{self, ContainerWriter, PersistError, SectionWriter};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("training diverged at epoch {epoch}: non-finite parameters")]
    Diverged { epoch: usize },
    #[error("learning rate and regularization must be positive (lr={lr}, reg={reg})")]
    BadHyperparameters { lr: f64, reg: f64 },
    #[error("cannot train on an empty rating matrix")]
    EmptyTraining,
    #[error("index ({user}, {item}) out of range for a {users}x{items} model")]
    OutOfRange {
        user: usize,
        item: usize,
        users: usize,
        items: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    /// `mu + pᵤ·qᵢ` (FunkSVD).
    Plain,
    /// `mu + buᵤ + biᵢ + pᵤ·qᵢ` (BiasSVD).
    Biased,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Plain => "funksvd",
            Flavor::Biased => "biassvd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    /// Standard deviation of the Normal(0, σ) factor initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            rank: 50,
            learning_rate: 0.005,
            regularization: 0.05,
            epochs: 30,
            init_std: 0.1,
            seed: 0,
        }
    }
}

/// A trained matrix-factorization model.
///
/// Item factors are stored one item per row (n×k), so `item_factors.row(i)`
/// is the factor vector of item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub flavor: Flavor,
    pub user_factors: DenseMatrix,
    pub item_factors: DenseMatrix,
    pub user_bias: Option<Vec<f64>>,
    pub item_bias: Option<Vec<f64>>,
    pub global_mean: f64,
}

/// Result of a training run: the model plus training RMSE before the first
/// epoch and after each epoch.
#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub model: BaselineModel,
    pub rmse_trace: Vec<f64>,
}

impl BaselineModel {
    pub fn rank(&self) -> usize {
        self.user_factors.cols()
    }

    pub fn n_users(&self) -> usize {
        self.user_factors.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_factors.rows()
    }

    fn raw_score(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self
            .user_factors
            .row(user)
            .iter()
            .zip(self.item_factors.row(item))
            .map(|(p, q)| p * q)
            .sum();
        let mut score = self.global_mean + dot;
        if let (Some(bu), Some(bi)) = (&self.user_bias, &self.item_bias) {
            score += bu[user] + bi[item];
        }
        score
    }

    /// Clamped prediction for a user seen in training.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64, BaselineError> {
        if user >= self.n_users() || item >= self.n_items() {
            return Err(BaselineError::OutOfRange {
                user,
                item,
                users: self.n_users(),
                items: self.n_items(),
            });
        }
        Ok(clamp_rating(self.raw_score(user, item)))
    }

    /// Prediction for a user absent from training: the global mean, plus the
    /// item bias for the biased flavor.
    pub fn predict_cold(&self, item: usize) -> Result<f64, BaselineError> {
        if item >= self.n_items() {
            return Err(BaselineError::OutOfRange {
                user: 0,
                item,
                users: self.n_users(),
                items: self.n_items(),
            });
        }
        let bias = self.item_bias.as_ref().map_or(0.0, |b| b[item]);
        Ok(clamp_rating(self.global_mean + bias))
    }

    fn is_finite(&self) -> bool {
        self.user_factors.is_finite()
            && self.item_factors.is_finite()
            && self.user_bias.iter().flatten().all(|v| v.is_finite())
            && self.item_bias.iter().flatten().all(|v| v.is_finite())
    }

    fn training_rmse(&self, train: &RatingMatrix) -> f64 {
        let sse: f64 = train
            .observed()
            .map(|(u, i, r)| (r - self.raw_score(u, i)).powi(2))
            .sum();
        (sse / train.len() as f64).sqrt()
    }
}

pub fn train_funksvd(
    train: &RatingMatrix,
    config: &SgdConfig,
) -> Result<BaselineFit, BaselineError> {
    train_sgd(train, config, Flavor::Plain)
}

pub fn train_biassvd(
    train: &RatingMatrix,
    config: &SgdConfig,
) -> Result<BaselineFit, BaselineError> {
    train_sgd(train, config, Flavor::Biased)
}

pub fn train_sgd(
    train: &RatingMatrix,
    config: &SgdConfig,
    flavor: Flavor,
) -> Result<BaselineFit, BaselineError> {
    let (lr, reg) = (config.learning_rate, config.regularization);
    if !(lr > 0.0 && reg > 0.0) {
        return Err(BaselineError::BadHyperparameters { lr, reg });
    }
    let global_mean = train.mean().ok_or(BaselineError::EmptyTraining)?;
    let (m, n, k) = (train.n_users(), train.n_items(), config.rank);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).expect("init_std is a valid deviation");
    let user_factors = DenseMatrix::from_fn(m, k, |_, _| normal.sample(&mut rng));
    let item_factors = DenseMatrix::from_fn(n, k, |_, _| normal.sample(&mut rng));
    let biased = flavor == Flavor::Biased;
    let mut model = BaselineModel {
        flavor,
        user_factors,
        item_factors,
        user_bias: biased.then(|| vec![0.0; m]),
        item_bias: biased.then(|| vec![0.0; n]),
        global_mean,
    };

    let mut order: Vec<(usize, usize, f64)> = train.observed().collect();
    let mut rmse_trace = vec![model.training_rmse(train)];
    let mut p_old = vec![0.0; k];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &(u, i, r) in &order {
            let e = r - model.raw_score(u, i);
            if let (Some(bu), Some(bi)) = (&mut model.user_bias, &mut model.item_bias) {
                bu[u] += lr * (e - reg * bu[u]);
                bi[i] += lr * (e - reg * bi[i]);
            }
            let pu = model.user_factors.row_mut(u);
            p_old.copy_from_slice(pu);
            let qi = model.item_factors.row(i);
            for (p, q) in pu.iter_mut().zip(qi) {
                *p += lr * (e * q - reg * *p);
            }
            let qi = model.item_factors.row_mut(i);
            for (q, p) in qi.iter_mut().zip(&p_old) {
                *q += lr * (e * p - reg * *q);
            }
        }
        if !model.is_finite() {
            return Err(BaselineError::Diverged { epoch: epoch + 1 });
        }
        rmse_trace.push(model.training_rmse(train));
    }
    Ok(BaselineFit { model, rmse_trace })
}

pub const BASELINE_MAGIC: [u8; 4] = *b"MFB1";

const TAG_FLAVOR: u32 = 1;
const TAG_ITEMS: u32 = 2;
const TAG_FACTORS: u32 = 3;
const TAG_BIASES: u32 = 4;

/// Serializes a baseline together with the native item id of each column.
pub fn to_bytes(model: &BaselineModel, item_ids: &[u32]) -> Vec<u8> {
    let mut w = ContainerWriter::new();
    let mut s = SectionWriter::new();
    s.u8(match model.flavor {
        Flavor::Plain => 0,
        Flavor::Biased => 1,
    });
    w.section(TAG_FLAVOR, s.take());
    s.u32s(item_ids);
    w.section(TAG_ITEMS, s.take());
    s.matrix(&model.user_factors).matrix(&model.item_factors);
    w.section(TAG_FACTORS, s.take());
    s.f64(model.global_mean);
    if let (Some(bu), Some(bi)) = (&model.user_bias, &model.item_bias) {
        s.f64s(bu).f64s(bi);
    }
    w.section(TAG_BIASES, s);
    w.finish(BASELINE_MAGIC)
}

pub fn from_bytes(bytes: &[u8]) -> persist::Result<(BaselineModel, Vec<u32>)> {
    let bad = |m: &str| PersistError::Malformed(m.to_string());
    let sections = persist::open_container(bytes, BASELINE_MAGIC)?;
    let mut s = persist::section(&sections, TAG_FLAVOR)?;
    let flavor = match s.u8()? {
        0 => Flavor::Plain,
        1 => Flavor::Biased,
        _ => return Err(bad("unknown flavor")),
    };
    s.end()?;
    let mut s = persist::section(&sections, TAG_ITEMS)?;
    let item_ids = s.u32s()?;
    s.end()?;
    let mut s = persist::section(&sections, TAG_FACTORS)?;
    let user_factors = s.matrix()?;
    let item_factors = s.matrix()?;
    s.end()?;
    let mut s = persist::section(&sections, TAG_BIASES)?;
    let global_mean = s.f64()?;
    let (user_bias, item_bias) = match flavor {
        Flavor::Plain => (None, None),
        Flavor::Biased => (Some(s.f64s()?), Some(s.f64s()?)),
    };
    s.end()?;

    let n = item_factors.rows();
    if user_factors.cols() != item_factors.cols()
        || item_ids.len() != n
        || user_bias
            .as_ref()
            .is_some_and(|b| b.len() != user_factors.rows())
        || item_bias.as_ref().is_some_and(|b| b.len() != n)
    {
        return Err(bad("baseline parameter shapes disagree"));
    }
    Ok((
        BaselineModel {
            flavor,
            user_factors,
            item_factors,
            user_bias,
            item_bias,
            global_mean,
        },
        item_ids,
    ))
}
