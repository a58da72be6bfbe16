//! The latent factor generator.
//!
//! A network maps `[demographics, masked centered rating row]` to `k` user
//! factors and one user bias (both through tanh). Ratings are reconstructed as
//! `U_G·M + bu_G + bi_T + μ`, where the item factors `M` start from the SVD
//! item split and, like the item biases, are trained jointly with the network.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, FeatureCodec, RatingMatrix};
use crate::matrix::{factor_split, gemm, DenseMatrix, MatrixError, Transpose, TruncatedSvd};
use crate::nnkernel::{
    Adam, AdamConfig, BatchNorm, Gradients, Layer, Linear, Mode, Network, NnError,
};
use crate::persist::{self, ContainerWriter, PersistError, SectionReader, SectionWriter};
use crate::{clamp_rating, RATING_MAX, RATING_MIN};

#[derive(Debug, Error)]
pub enum LfgError {
    #[error("svd rank {got} does not match configured rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask probability {0} outside [0, 1)")]
    MaskProbability(f64),
    #[error("batch has no observed ratings")]
    EmptyBatch,
    #[error("training has no users with ratings")]
    NoTrainingUsers,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("user {user} is excluded from training but was scheduled into a batch")]
    Leak { user: usize },
    #[error("unknown item id {0}")]
    UnknownItem(u32),
    #[error("item index {item} out of range for {n_items} items")]
    ItemOutOfRange { item: usize, n_items: usize },
    #[error("rating {rating} for item {item} outside [1, 5]")]
    RatingOutOfRange { item: u32, rating: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

type Result<T> = std::result::Result<T, LfgError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub rank: usize,
    /// Hidden layer widths. Batch normalization follows the first one.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub mask_p: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            rank: 50,
            hidden: vec![512, 256],
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            mask_p: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay. Applied to all network parameters each step,
    /// and to the item factors / biases of items rated in the current batch.
    pub weight_decay: f64,
    /// Drives batch shuffling.
    pub seed: u64,
    /// Drives input masking; derived from `seed` when absent.
    pub mask_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 10.0,
            seed: 0,
            mask_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn mask_seed(&self) -> u64 {
        self.mask_seed.unwrap_or(self.seed ^ 0x6d61_736b_5f73_6565)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfgModel {
    pub net: Network,
    /// k×n.
    pub item_factors: DenseMatrix,
    pub item_bias: Vec<f64>,
    pub global_mean: f64,
    pub rank: usize,
    pub mask_p: f64,
    pub codec: FeatureCodec,
    /// Native item id of each column.
    pub item_ids: Vec<u32>,
}

/// Rows with a random subset of their observed (non-zero) entries zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRows {
    pub values: DenseMatrix,
    /// Row-major b×n: `true` where an observed entry was zeroed.
    pub masked: Vec<bool>,
}

impl MaskedRows {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Output of the generator for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedFactors {
    /// b×k.
    pub user_factors: DenseMatrix,
    pub user_bias: Vec<f64>,
    /// b×n, unclamped.
    pub predictions: DenseMatrix,
}

/// Zeroes each observed entry independently with probability `p`. Zero
/// entries are unobserved: they draw nothing and are never counted as masked.
pub fn mask_rows(rows: &DenseMatrix, p: f64, rng: &mut impl Rng) -> Result<MaskedRows> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LfgError::MaskProbability(p));
    }
    let mut values = rows.clone();
    let mut masked = vec![false; rows.as_slice().len()];
    if p > 0.0 {
        for (v, m) in values.as_mut_slice().iter_mut().zip(masked.iter_mut()) {
            if *v != 0.0 && rng.gen::<f64>() < p {
                *v = 0.0;
                *m = true;
            }
        }
    }
    Ok(MaskedRows { values, masked })
}

/// `[features, ratings]` column-wise.
pub fn build_input(features: &DenseMatrix, ratings: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(features.hstack(ratings)?)
}

/// Subtracts `mu` from every non-zero entry, leaving unobserved zeros alone.
pub fn center_rows(rows: &DenseMatrix, mu: f64) -> DenseMatrix {
    let mut out = rows.clone();
    out.as_mut_slice()
        .iter_mut()
        .filter(|v| **v != 0.0)
        .for_each(|v| *v -= mu);
    out
}

/// `H_pred[u][i] = Σ_f U[u][f]·M[f][i] + bu[u] + bi[i] + mu`.
pub fn reconstruct(
    user_factors: &DenseMatrix,
    user_bias: &[f64],
    item_factors: &DenseMatrix,
    item_bias: &[f64],
    mu: f64,
) -> Result<DenseMatrix> {
    let (b, k) = user_factors.shape();
    let n = item_factors.cols();
    if item_factors.rows() != k || user_bias.len() != b || item_bias.len() != n {
        return Err(LfgError::Shape(format!(
            "U {b}×{k}, bu {}, M {}×{n}, bi {}",
            user_bias.len(),
            item_factors.rows(),
            item_bias.len()
        )));
    }
    let mut out = DenseMatrix::zeros(b, n);
    for (r, &bu) in user_bias.iter().enumerate() {
        for (v, bi) in out.row_mut(r).iter_mut().zip(item_bias) {
            *v = bu + bi + mu;
        }
    }
    gemm(
        1.0,
        user_factors,
        Transpose::No,
        item_factors,
        Transpose::No,
        1.0,
        &mut out,
    )?;
    Ok(out)
}

/// Mean squared error over the observed positions of each row, and its
/// gradient with respect to `pred` (zero at every unobserved position).
pub fn masked_loss(
    pred: &DenseMatrix,
    truth: &DenseMatrix,
    observed: &[Vec<usize>],
) -> Result<(f64, DenseMatrix)> {
    if pred.shape() != truth.shape() || observed.len() != pred.rows() {
        return Err(LfgError::Shape(format!(
            "pred {:?}, truth {:?}, observed rows {}",
            pred.shape(),
            truth.shape(),
            observed.len()
        )));
    }
    let count: usize = observed.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(LfgError::EmptyBatch);
    }
    let mut grad = DenseMatrix::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    let scale = 2.0 / count as f64;
    for (r, items) in observed.iter().enumerate() {
        let (p, t) = (pred.row(r), truth.row(r));
        let g = grad.row_mut(r);
        for &i in items {
            if i >= p.len() {
                return Err(LfgError::ItemOutOfRange {
                    item: i,
                    n_items: p.len(),
                });
            }
            let e = p[i] - t[i];
            sum += e * e;
            g[i] = scale * e;
        }
    }
    Ok((sum / count as f64, grad))
}

/// Dense rating rows and observed item lists for `users`.
pub fn batch_rows(ratings: &RatingMatrix, users: &[usize]) -> (DenseMatrix, Vec<Vec<usize>>) {
    let mut rows = DenseMatrix::zeros(users.len(), ratings.n_items());
    let mut observed = Vec::with_capacity(users.len());
    for (r, &u) in users.iter().enumerate() {
        let row = rows.row_mut(r);
        let entries = ratings.user_row(u);
        for &(i, v) in entries {
            row[i] = v;
        }
        observed.push(entries.iter().map(|&(i, _)| i).collect());
    }
    (rows, observed)
}

fn gather_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols());
    for (r, &src) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(src));
    }
    out
}

/// Builds the generator network: `[linear → leaky-ReLU (→ batch-norm after
/// the first)]* → linear(k+1) → tanh`.
pub fn build_network(input_dim: usize, arch: &ArchConfig, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut width = input_dim;
    for (j, &h) in arch.hidden.iter().enumerate() {
        layers.push(Layer::Linear(Linear::init(width, h, &mut rng)));
        layers.push(Layer::LeakyRelu {
            slope: arch.leaky_slope,
        });
        if j == 0 {
            layers.push(Layer::BatchNorm(BatchNorm::new(
                h,
                arch.bn_eps,
                arch.bn_momentum,
            )));
        }
        width = h;
    }
    layers.push(Layer::Linear(Linear::init(width, arch.rank + 1, &mut rng)));
    layers.push(Layer::Tanh);
    Ok(Network::new(layers)?)
}

/// Initializes a model from a rank-k SVD of the centered training matrix:
/// `M` is the item half of the factor split, item biases start at zero.
pub fn init_lfg(
    svd: &TruncatedSvd,
    global_mean: f64,
    codec: FeatureCodec,
    item_ids: Vec<u32>,
    arch: &ArchConfig,
    seed: u64,
) -> Result<LfgModel> {
    if svd.rank() != arch.rank {
        return Err(LfgError::RankMismatch {
            expected: arch.rank,
            got: svd.rank(),
        });
    }
    if !(0.0..1.0).contains(&arch.mask_p) {
        return Err(LfgError::MaskProbability(arch.mask_p));
    }
    let (_, item_factors) = factor_split(svd);
    let n = item_factors.cols();
    if item_ids.len() != n {
        return Err(LfgError::Shape(format!(
            "{} item ids for {n} items",
            item_ids.len()
        )));
    }
    let net = build_network(codec.dim() + n, arch, seed)?;
    let model = LfgModel {
        net,
        item_factors,
        item_bias: vec![0.0; n],
        global_mean,
        rank: arch.rank,
        mask_p: arch.mask_p,
        codec,
        item_ids,
    };
    model.validate()?;
    Ok(model)
}

/// Loss and gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub loss: f64,
    pub net: Gradients,
    /// k×n.
    pub item_factors: DenseMatrix,
    pub item_bias: Vec<f64>,
}

impl LossGradients {
    /// Network tensors followed by item factors and item biases, matching
    /// [`LfgModel::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.net.slices();
        out.push(self.item_factors.as_slice());
        out.push(&self.item_bias);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data masked loss before the first step (no input masking).
    pub initial_loss: f64,
    /// Per epoch, the observation-weighted mean of the batch losses.
    pub loss_trace: Vec<f64>,
    pub batches: usize,
}

impl LfgModel {
    pub fn n_items(&self) -> usize {
        self.item_factors.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.codec.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_items();
        let expect_in = self.feature_dim() + n;
        if self.net.input_dim() != Some(expect_in) {
            return Err(LfgError::Invalid(format!(
                "network input {:?}, expected {expect_in}",
                self.net.input_dim()
            )));
        }
        if self.net.output_dim() != Some(self.rank + 1) {
            return Err(LfgError::Invalid(format!(
                "network output {:?}, expected {}",
                self.net.output_dim(),
                self.rank + 1
            )));
        }
        if self.item_factors.rows() != self.rank
            || self.item_bias.len() != n
            || self.item_ids.len() != n
        {
            return Err(LfgError::Invalid("item parameter shapes disagree".into()));
        }
        if !(0.0..1.0).contains(&self.mask_p) {
            return Err(LfgError::MaskProbability(self.mask_p));
        }
        let finite = self
            .net
            .parameters()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
            && self.item_factors.is_finite()
            && self.item_bias.iter().all(|v| v.is_finite())
            && self.global_mean.is_finite();
        if !finite {
            return Err(LfgError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Network tensors, then item factors, then item biases.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.net.parameters_mut();
        out.push(self.item_factors.as_mut_slice());
        out.push(&mut self.item_bias);
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = self.net.parameters();
        out.push(self.item_factors.as_slice());
        out.push(&self.item_bias);
        out
    }

    /// Network input for raw rating rows (0 = unrated): `[features, centered
    /// ratings]`.
    pub fn input_for(&self, features: &DenseMatrix, rows: &DenseMatrix) -> Result<DenseMatrix> {
        build_input(features, &center_rows(rows, self.global_mean))
    }

    fn split_output(&self, out: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
        (out.columns(0, self.rank), out.column(self.rank))
    }

    fn generate(&self, out: &DenseMatrix) -> Result<GeneratedFactors> {
        let (user_factors, user_bias) = self.split_output(out);
        let predictions = reconstruct(
            &user_factors,
            &user_bias,
            &self.item_factors,
            &self.item_bias,
            self.global_mean,
        )?;
        Ok(GeneratedFactors {
            user_factors,
            user_bias,
            predictions,
        })
    }

    /// Loss over the observed positions of `truth`, plus the gradient with
    /// respect to the network output and the item parameters.
    fn head(
        &self,
        out: &DenseMatrix,
        truth: &DenseMatrix,
        observed: &[Vec<usize>],
    ) -> Result<(f64, DenseMatrix, DenseMatrix, Vec<f64>)> {
        let g = self.generate(out)?;
        let (loss, d_pred) = masked_loss(&g.predictions, truth, observed)?;
        let (b, k, n) = (out.rows(), self.rank, self.n_items());

        let mut d_items = DenseMatrix::zeros(k, n);
        gemm(
            1.0,
            &g.user_factors,
            Transpose::Yes,
            &d_pred,
            Transpose::No,
            0.0,
            &mut d_items,
        )?;
        let mut d_bias = vec![0.0; n];
        for r in 0..b {
            d_bias
                .iter_mut()
                .zip(d_pred.row(r))
                .for_each(|(s, v)| *s += v);
        }
        let mut d_user = DenseMatrix::zeros(b, k);
        gemm(
            1.0,
            &d_pred,
            Transpose::No,
            &self.item_factors,
            Transpose::Yes,
            0.0,
            &mut d_user,
        )?;
        let mut d_out = DenseMatrix::zeros(b, k + 1);
        for r in 0..b {
            let row = d_out.row_mut(r);
            row[..k].copy_from_slice(d_user.row(r));
            row[k] = d_pred.row(r).iter().sum();
        }
        Ok((loss, d_out, d_items, d_bias))
    }

    /// Loss and all gradients for a batch using batch statistics, without
    /// modifying the model.
    pub fn loss_and_gradients(
        &self,
        input: &DenseMatrix,
        truth: &DenseMatrix,
        observed: &[Vec<usize>],
    ) -> Result<LossGradients> {
        let (out, tape) = self.net.forward_pure(input, true)?;
        let (loss, d_out, item_factors, item_bias) = self.head(&out, truth, observed)?;
        let net = self
            .net
            .backward_params(&tape.expect("training pass"), &d_out)?;
        Ok(LossGradients {
            loss,
            net,
            item_factors,
            item_bias,
        })
    }

    /// Loss only, batch statistics, no side effects.
    pub fn batch_loss(
        &self,
        input: &DenseMatrix,
        truth: &DenseMatrix,
        observed: &[Vec<usize>],
    ) -> Result<f64> {
        let (out, _) = self.net.forward_pure(input, true)?;
        let g = self.generate(&out)?;
        Ok(masked_loss(&g.predictions, truth, observed)?.0)
    }

    /// Generator output for `input` rows in inference mode.
    pub fn generate_batch(&self, input: &DenseMatrix) -> Result<GeneratedFactors> {
        let out = self.net.infer(input)?;
        self.generate(&out)
    }

    /// Unclamped predictions for `users`, driven by their rows in `input`.
    pub fn predict_users(
        &self,
        input: &RatingMatrix,
        features: &DenseMatrix,
        users: &[usize],
    ) -> Result<DenseMatrix> {
        const CHUNK: usize = 256;
        let n = self.n_items();
        if input.n_items() != n {
            return Err(LfgError::Shape(format!(
                "{} items in input, model has {n}",
                input.n_items()
            )));
        }
        let mut out = DenseMatrix::zeros(users.len(), n);
        for (c, chunk) in users.chunks(CHUNK).enumerate() {
            let (rows, _) = batch_rows(input, chunk);
            let x = self.input_for(&gather_rows(features, chunk), &rows)?;
            let pred = self.generate_batch(&x)?.predictions;
            for r in 0..chunk.len() {
                out.row_mut(c * CHUNK + r).copy_from_slice(pred.row(r));
            }
        }
        Ok(out)
    }

    /// One forward pass for a single user given by dense item indices.
    /// Returns the full predicted row clamped to the rating scale.
    pub fn infer_user(&self, history: &[(usize, f64)], features: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_items();
        if features.len() != self.feature_dim() {
            return Err(LfgError::Shape(format!(
                "{} features, model expects {}",
                features.len(),
                self.feature_dim()
            )));
        }
        let mut row = DenseMatrix::zeros(1, n);
        for &(item, rating) in history {
            if item >= n {
                return Err(LfgError::ItemOutOfRange { item, n_items: n });
            }
            if !(RATING_MIN..=RATING_MAX).contains(&rating) {
                return Err(LfgError::RatingOutOfRange {
                    item: self.item_ids[item],
                    rating,
                });
            }
            row.set(0, item, rating);
        }
        let feats = DenseMatrix::from_vec(1, features.len(), features.to_vec())?;
        let x = self.input_for(&feats, &row)?;
        let pred = self.generate_batch(&x)?.predictions;
        Ok(pred.row(0).iter().map(|&v| clamp_rating(v)).collect())
    }

    /// [`LfgModel::infer_user`] with native item ids and raw demographics.
    pub fn infer_user_raw(
        &self,
        history: &[(u32, f64)],
        age: f64,
        gender: &str,
        occupation: &str,
    ) -> Result<Vec<f64>> {
        let features = self.codec.encode(age, gender, occupation)?;
        let dense = history
            .iter()
            .map(|&(id, r)| Ok((self.item_index(id).ok_or(LfgError::UnknownItem(id))?, r)))
            .collect::<Result<Vec<_>>>()?;
        self.infer_user(&dense, &features)
    }

    pub fn item_index(&self, item_id: u32) -> Option<usize> {
        self.item_ids.binary_search(&item_id).ok()
    }

    /// Trains in place on the observed ratings of `ratings`; `features` has one
    /// row per user. Users in `excluded` must never reach a batch.
    pub fn train(
        &mut self,
        ratings: &RatingMatrix,
        features: &DenseMatrix,
        config: &TrainConfig,
        excluded: &HashSet<usize>,
    ) -> Result<TrainReport> {
        let n = self.n_items();
        if ratings.n_items() != n
            || features.rows() != ratings.n_users()
            || features.cols() != self.feature_dim()
        {
            return Err(LfgError::Shape(format!(
                "ratings {}×{}, features {:?}, model items {n}, feature dim {}",
                ratings.n_users(),
                ratings.n_items(),
                features.shape(),
                self.feature_dim()
            )));
        }
        let users = ratings.active_users();
        if users.is_empty() {
            return Err(LfgError::NoTrainingUsers);
        }
        if let Some(&u) = users.iter().find(|u| excluded.contains(u)) {
            return Err(LfgError::Leak { user: u });
        }
        self.net.set_mode(Mode::Train);

        let initial_loss = {
            let (rows, observed) = batch_rows(ratings, &users);
            let x = self.input_for(&gather_rows(features, &users), &rows)?;
            self.batch_loss(&x, &rows, &observed)?
        };

        let adam = AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        let net_sizes: Vec<usize> = self.net.parameters().iter().map(|p| p.len()).collect();
        let mut net_opt = Adam::new(adam.clone(), &net_sizes);
        let k = self.rank;
        let mut item_opt = Adam::new(adam, &[k * n, n]);

        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(config.mask_seed());
        let mut order = users.clone();
        let mut trace = Vec::with_capacity(config.epochs);
        let mut batches = 0;
        for epoch in 0..config.epochs {
            order.shuffle(&mut order_rng);
            let mut total = 0.0;
            let mut weight = 0usize;
            for batch in batch_ranges(order.len(), config.batch_size.max(2)) {
                let batch = &order[batch];
                if let Some(&u) = batch.iter().find(|u| excluded.contains(u)) {
                    return Err(LfgError::Leak { user: u });
                }
                let (rows, observed) = batch_rows(ratings, batch);
                let masked = mask_rows(&rows, self.mask_p, &mut mask_rng)?;
                let x = self.input_for(&gather_rows(features, batch), &masked.values)?;

                let (out, tape) = self.net.forward_train(&x)?;
                let (loss, d_out, d_items, d_bias) = self.head(&out, &rows, &observed)?;
                if !loss.is_finite() {
                    return Err(LfgError::Diverged { epoch });
                }
                let grads = self.net.backward_params(&tape, &d_out)?;

                let mut seen = vec![false; n];
                observed.iter().flatten().for_each(|&i| seen[i] = true);
                let factor_mask: Vec<bool> = (0..k).flat_map(|_| seen.iter().copied()).collect();

                net_opt
                    .step(&mut self.net.parameters_mut(), &grads.slices(), None)
                    .map_err(|e| diverged(e, epoch))?;
                item_opt
                    .step(
                        &mut [self.item_factors.as_mut_slice(), &mut self.item_bias],
                        &[d_items.as_slice(), &d_bias],
                        Some(&[Some(&factor_mask), Some(&seen)]),
                    )
                    .map_err(|e| diverged(e, epoch))?;

                let count: usize = observed.iter().map(Vec::len).sum();
                total += loss * count as f64;
                weight += count;
                batches += 1;
            }
            let epoch_loss = total / weight as f64;
            log::debug!("epoch {epoch}: loss {epoch_loss:.5}");
            trace.push(epoch_loss);
        }
        self.net.set_mode(Mode::Infer);
        if self.validate().is_err() {
            return Err(LfgError::Diverged {
                epoch: config.epochs.saturating_sub(1),
            });
        }
        Ok(TrainReport {
            initial_loss,
            loss_trace: trace,
            batches,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ContainerWriter::new();
        let mut s = SectionWriter::new();

        s.f64(self.codec.age_min).f64(self.codec.age_max);
        s.u64(self.codec.occupations.len() as u64);
        for o in &self.codec.occupations {
            s.str(o);
        }
        s.u32s(&self.item_ids);
        w.section(TAG_CODEC, s.take());

        write_network(&mut s, &self.net);
        w.section(TAG_NET, s.take());

        s.matrix(&self.item_factors);
        w.section(TAG_ITEM_FACTORS, s.take());

        s.f64s(&self.item_bias);
        w.section(TAG_ITEM_BIAS, s.take());

        s.f64(self.global_mean)
            .u64(self.rank as u64)
            .f64(self.mask_p);
        w.section(TAG_SCALARS, s);

        w.finish(LFG_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = persist::open_container(bytes, LFG_MAGIC)?;

        let mut s = persist::section(&sections, TAG_CODEC)?;
        let age_min = s.f64()?;
        let age_max = s.f64()?;
        let count = s.len()?;
        let occupations = (0..count)
            .map(|_| s.str())
            .collect::<persist::Result<Vec<_>>>()?;
        let item_ids = s.u32s()?;
        s.end()?;
        if !item_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(LfgError::Invalid("item ids not strictly ascending".into()));
        }

        let mut s = persist::section(&sections, TAG_NET)?;
        let net = read_network(&mut s)?;
        s.end()?;

        let mut s = persist::section(&sections, TAG_ITEM_FACTORS)?;
        let item_factors = s.matrix()?;
        s.end()?;

        let mut s = persist::section(&sections, TAG_ITEM_BIAS)?;
        let item_bias = s.f64s()?;
        s.end()?;

        let mut s = persist::section(&sections, TAG_SCALARS)?;
        let global_mean = s.f64()?;
        let rank = s.usize()?;
        let mask_p = s.f64()?;
        s.end()?;

        let model = LfgModel {
            net,
            item_factors,
            item_bias,
            global_mean,
            rank,
            mask_p,
            codec: FeatureCodec {
                age_min,
                age_max,
                occupations,
            },
            item_ids,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(persist::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path)?)
    }
}

fn diverged(e: NnError, epoch: usize) -> LfgError {
    match e {
        NnError::NonFiniteGradient { .. } => LfgError::Diverged { epoch },
        other => other.into(),
    }
}

/// Consecutive `size`-wide ranges over `0..len`; a trailing single row is
/// merged into the previous range so batch statistics stay defined.
fn batch_ranges(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..len)
        .step_by(size)
        .map(|s| s..(s + size).min(len))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

pub const LFG_MAGIC: [u8; 4] = *b"LFG1";

const TAG_CODEC: u32 = 1;
const TAG_NET: u32 = 2;
const TAG_ITEM_FACTORS: u32 = 3;
const TAG_ITEM_BIAS: u32 = 4;
const TAG_SCALARS: u32 = 5;

const LAYER_LINEAR: u8 = 0;
const LAYER_LEAKY: u8 = 1;
const LAYER_BATCHNORM: u8 = 2;
const LAYER_TANH: u8 = 3;

fn write_network(s: &mut SectionWriter, net: &Network) {
    s.u8(match net.mode() {
        Mode::Train => 0,
        Mode::Infer => 1,
    });
    s.u64(net.layers().len() as u64);
    for layer in net.layers() {
        match layer {
            Layer::Linear(l) => {
                s.u8(LAYER_LINEAR).matrix(&l.weight).f64s(&l.bias);
            }
            Layer::LeakyRelu { slope } => {
                s.u8(LAYER_LEAKY).f64(*slope);
            }
            Layer::BatchNorm(b) => {
                s.u8(LAYER_BATCHNORM)
                    .f64s(&b.gamma)
                    .f64s(&b.beta)
                    .f64s(&b.running_mean)
                    .f64s(&b.running_var)
                    .f64(b.eps)
                    .f64(b.momentum);
            }
            Layer::Tanh => {
                s.u8(LAYER_TANH);
            }
        }
    }
}

fn read_network(s: &mut SectionReader) -> Result<Network> {
    let mode = match s.u8()? {
        0 => Mode::Train,
        1 => Mode::Infer,
        m => return Err(LfgError::Invalid(format!("network mode {m}"))),
    };
    let count = s.len()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = match s.u8()? {
            LAYER_LINEAR => {
                let weight = s.matrix()?;
                let bias = s.f64s()?;
                if bias.len() != weight.rows() {
                    return Err(LfgError::Invalid("linear bias width".into()));
                }
                Layer::Linear(Linear { weight, bias })
            }
            LAYER_LEAKY => Layer::LeakyRelu { slope: s.f64()? },
            LAYER_BATCHNORM => {
                let bn = BatchNorm {
                    gamma: s.f64s()?,
                    beta: s.f64s()?,
                    running_mean: s.f64s()?,
                    running_var: s.f64s()?,
                    eps: s.f64()?,
                    momentum: s.f64()?,
                };
                let f = bn.gamma.len();
                if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()] != [f; 3] {
                    return Err(LfgError::Invalid("batch-norm widths".into()));
                }
                Layer::BatchNorm(bn)
            }
            LAYER_TANH => Layer::Tanh,
            t => return Err(LfgError::Invalid(format!("layer kind {t}"))),
        };
        layers.push(layer);
    }
    let mut net = Network::new(layers).map_err(|e| LfgError::Invalid(e.to_string()))?;
    net.set_mode(mode);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{fill_and_center, truncated_svd};
    use crate::nnkernel::{finite_difference_check, GradCheckConfig};

    fn codec() -> FeatureCodec {
        FeatureCodec {
            age_min: 10.0,
            age_max: 60.0,
            occupations: vec!["a".into(), "b".into()],
        }
    }

    fn small_arch(rank: usize) -> ArchConfig {
        ArchConfig {
            rank,
            hidden: vec![16, 8],
            ..ArchConfig::default()
        }
    }

    /// Rank-2 plus bias ratings for 20 users × 10 items, every cell observed.
    #[allow(clippy::needless_range_loop)]
    fn synthetic() -> (RatingMatrix, DenseMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (20, 10);
        let a = DenseMatrix::from_fn(m, 2, |_, _| rng.gen_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0));
        let bu: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let bi: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let ab = a.matmul(&b).unwrap();
        let mut entries = Vec::new();
        for u in 0..m {
            for i in 0..n {
                let r = (3.0 + ab.get(u, i) + bu[u] + bi[i]).clamp(1.0, 5.0);
                entries.push((u, i, r));
            }
        }
        let ratings = RatingMatrix::from_entries(m, n, entries).unwrap();
        let c = codec();
        let features = DenseMatrix::from_fn(m, c.dim(), |u, j| match j {
            0 => (u as f64) / m as f64,
            1 => (u % 2) as f64,
            2 => 1.0 - (u % 2) as f64,
            3 => (u % 3 == 0) as u8 as f64,
            _ => (u % 3 != 0) as u8 as f64,
        });
        (ratings, features)
    }

    fn init_on(ratings: &RatingMatrix, arch: &ArchConfig, seed: u64) -> LfgModel {
        let mu = ratings.mean().unwrap();
        let svd = truncated_svd(&fill_and_center(ratings, mu), arch.rank, seed).unwrap();
        init_lfg(
            &svd,
            mu,
            codec(),
            (1..=ratings.n_items() as u32).collect(),
            arch,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn mask_extremes() {
        let rows = DenseMatrix::from_rows(&[vec![1.0, 0.0, 3.0], vec![0.0, 5.0, 2.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = mask_rows(&rows, 0.0, &mut rng).unwrap();
        assert_eq!(none.values, rows);
        assert_eq!(none.masked_count(), 0);
        let all = mask_rows(&rows, 1.0, &mut rng).unwrap();
        assert!(all.values.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(all.masked_count(), 4);
        assert!(mask_rows(&rows, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mask_rate_on_ten_thousand_entries() {
        let rows = DenseMatrix::from_fn(100, 100, |_, _| 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let frac = mask_rows(&rows, 0.1, &mut rng).unwrap().masked_count() as f64 / 1e4;
            assert!((0.08..=0.12).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn input_layout() {
        let e = DenseMatrix::from_fn(2, 3, |_, c| c as f64 + 10.0);
        let h = DenseMatrix::from_fn(2, 4, |_, c| c as f64);
        let x = build_input(&e, &h).unwrap();
        assert_eq!(x.shape(), (2, 7));
        assert_eq!(x.row(0), &[10.0, 11.0, 12.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            build_input(&DenseMatrix::zeros(1, 3), &DenseMatrix::zeros(1, 4)).unwrap(),
            DenseMatrix::zeros(1, 7)
        );
        assert!(build_input(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let zero = reconstruct(
            &DenseMatrix::zeros(2, 3),
            &[0.0; 2],
            &DenseMatrix::zeros(3, 4),
            &[0.0; 4],
            3.5,
        )
        .unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 3.5));

        let u = DenseMatrix::from_rows(&[vec![0.5]]).unwrap();
        let m = DenseMatrix::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let row = reconstruct(&u, &[0.1], &m, &[0.0, -0.2], 3.5).unwrap();
        assert!((row.get(0, 0) - 3.85).abs() < 1e-12);
        assert!((row.get(0, 1) - 3.9).abs() < 1e-12);

        let mut m2 = m.clone();
        m2.scale(2.0);
        let mut u2 = u.clone();
        u2.scale(0.5);
        assert_eq!(
            reconstruct(&u2, &[0.1], &m2, &[0.0, -0.2], 3.5).unwrap(),
            row
        );

        assert!(reconstruct(&u, &[0.1, 0.2], &m, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn masked_loss_examples() {
        let truth = DenseMatrix::from_rows(&[vec![3.0, 0.0, 4.0]]).unwrap();
        let (l, g) = masked_loss(&truth, &truth, &[vec![0, 2]]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        let pred = DenseMatrix::from_rows(&[vec![4.0, 9.0, 2.0]]).unwrap();
        let (l, g) = masked_loss(&pred, &truth, &[vec![0, 2]]).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.row(0), &[1.0, 0.0, -2.0]);

        assert!(matches!(
            masked_loss(&pred, &truth, &[vec![]]),
            Err(LfgError::EmptyBatch)
        ));
    }

    #[test]
    fn init_contract() {
        let (ratings, _) = synthetic();
        let arch = small_arch(3);
        let mu = ratings.mean().unwrap();
        let svd = truncated_svd(&fill_and_center(&ratings, mu), 3, 1).unwrap();
        let a = init_lfg(&svd, mu, codec(), (1..=10).collect(), &arch, 5).unwrap();
        let b = init_lfg(&svd, mu, codec(), (1..=10).collect(), &arch, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.item_bias.iter().all(|&v| v == 0.0));
        assert_eq!(a.item_factors, factor_split(&svd).1);
        assert_eq!(a.net.input_dim(), Some(codec().dim() + 10));
        assert_eq!(a.net.output_dim(), Some(4));
        assert!(matches!(
            init_lfg(&svd, mu, codec(), (1..=10).collect(), &small_arch(4), 5),
            Err(LfgError::RankMismatch {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn default_architecture_layout() {
        let net = build_network(30, &ArchConfig::default(), 0).unwrap();
        let kinds: Vec<&str> = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Linear(_) => "linear",
                Layer::LeakyRelu { .. } => "leaky",
                Layer::BatchNorm(_) => "bn",
                Layer::Tanh => "tanh",
            })
            .collect();
        assert_eq!(
            kinds,
            ["linear", "leaky", "bn", "linear", "leaky", "linear", "tanh"]
        );
        assert_eq!(net.output_dim(), Some(51));
    }

    #[test]
    fn gradients_including_item_parameters_match_finite_differences() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(3), 2);
        let users: Vec<usize> = (0..8).collect();
        let (rows, mut observed) = batch_rows(&ratings, &users);
        observed.iter_mut().for_each(|o| o.retain(|&i| i % 3 != 0));
        let x = model
            .input_for(&gather_rows(&features, &users), &rows)
            .unwrap();
        let grads = model.loss_and_gradients(&x, &rows, &observed).unwrap();
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let refs: Vec<&[f64]> = analytic.iter().map(Vec::as_slice).collect();
        let report = finite_difference_check(
            &mut model,
            &refs,
            |m| m.parameters_mut(),
            |m| m.batch_loss(&x, &rows, &observed).unwrap(),
            &GradCheckConfig {
                samples: 400,
                ..Default::default()
            },
        );
        assert!(report.passes(1e-3), "max rel {}", report.max_rel_error());

        // items never observed in the batch get exactly zero gradient
        for i in (0..10).step_by(3) {
            assert_eq!(grads.item_bias[i], 0.0);
            assert!((0..3).all(|f| grads.item_factors.get(f, i) == 0.0));
        }
    }

    #[test]
    fn fits_rank_two_synthetic_data() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let report = model
            .train(
                &ratings,
                &features,
                &TrainConfig {
                    epochs: 500,
                    batch_size: 8,
                    lr: 1e-2,
                    weight_decay: 0.0,
                    seed: 1,
                    mask_seed: None,
                },
                &HashSet::new(),
            )
            .unwrap();
        assert!(report.loss_trace.last().unwrap() < &report.initial_loss);
        let users: Vec<usize> = (0..20).collect();
        let pred = model.predict_users(&ratings, &features, &users).unwrap();
        let sse: f64 = ratings
            .observed()
            .map(|(u, i, r)| (clamp_rating(pred.get(u, i)) - r).powi(2))
            .sum();
        let rmse = (sse / ratings.len() as f64).sqrt();
        assert!(rmse < 0.15, "training rmse {rmse}");
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let before = model.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = model
            .train(&ratings, &features, &config, &HashSet::new())
            .unwrap();
        assert!(report.loss_trace.is_empty());
        assert_eq!(model.parameters(), before.parameters());
    }

    #[test]
    fn unrated_item_stays_at_initialization() {
        let (full, features) = synthetic();
        let ratings = full.filter(|_, _, i| i != 4);
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let before = model.clone();
        model
            .train(
                &ratings,
                &features,
                &TrainConfig {
                    epochs: 20,
                    batch_size: 8,
                    ..TrainConfig::default()
                },
                &HashSet::new(),
            )
            .unwrap();
        assert_eq!(model.item_bias[4], before.item_bias[4]);
        assert_eq!(model.item_factors.column(4), before.item_factors.column(4));
        assert_ne!(model.item_factors.column(3), before.item_factors.column(3));
    }

    #[test]
    fn mask_stream_is_irrelevant_at_zero_probability() {
        let (ratings, features) = synthetic();
        let arch = ArchConfig {
            mask_p: 0.0,
            ..small_arch(2)
        };
        let run = |mask_seed| {
            let mut model = init_on(&ratings, &arch, 4);
            let config = TrainConfig {
                epochs: 5,
                batch_size: 8,
                mask_seed: Some(mask_seed),
                ..TrainConfig::default()
            };
            model
                .train(&ratings, &features, &config, &HashSet::new())
                .unwrap();
            model
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn excluded_user_is_a_leak() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let err = model
            .train(
                &ratings,
                &features,
                &TrainConfig::default(),
                &HashSet::from([7]),
            )
            .unwrap_err();
        assert!(matches!(err, LfgError::Leak { user: 7 }));
    }

    #[test]
    fn batches_never_have_a_single_row() {
        assert_eq!(batch_ranges(65, 64), vec![0..65]);
        assert_eq!(batch_ranges(129, 64), vec![0..64, 64..129]);
        assert_eq!(batch_ranges(130, 64), vec![0..64, 64..128, 128..130]);
        assert_eq!(batch_ranges(128, 64), vec![0..64, 64..128]);
        assert_eq!(batch_ranges(1, 64), vec![0..1]);
    }

    #[test]
    fn inference_is_pure_bounded_and_tanh_limited() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        model
            .train(&ratings, &features, &config, &HashSet::new())
            .unwrap();
        let feats = model.codec.encode(30.0, "F", "b").unwrap();
        let a = model.infer_user(&[], &feats).unwrap();
        let b = model.infer_user(&[], &feats).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (1.0..=5.0).contains(v)));
        let c = model.infer_user_raw(&[(3, 5.0)], 30.0, "F", "b").unwrap();
        assert_eq!(c.len(), 10);
        assert!(matches!(
            model.infer_user_raw(&[], 30.0, "F", "pilot"),
            Err(LfgError::Dataset(DatasetError::UnknownOccupation(_)))
        ));
        assert!(matches!(
            model.infer_user_raw(&[(99, 4.0)], 30.0, "F", "b"),
            Err(LfgError::UnknownItem(99))
        ));
        assert!(matches!(
            model.infer_user(&[(0, 6.0)], &feats),
            Err(LfgError::RatingOutOfRange { .. })
        ));

        let x = model
            .input_for(
                &features,
                &batch_rows(&ratings, &(0..20).collect::<Vec<_>>()).0,
            )
            .unwrap();
        let g = model.generate_batch(&x).unwrap();
        assert!(g.user_factors.as_slice().iter().all(|v| v.abs() < 1.0));
        assert!(g.user_bias.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn persistence_round_trip_and_rejection() {
        let (ratings, features) = synthetic();
        let mut model = init_on(&ratings, &small_arch(2), 4);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        model
            .train(&ratings, &features, &config, &HashSet::new())
            .unwrap();
        let bytes = model.to_bytes();
        let back = LfgModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        let users: Vec<usize> = (0..20).collect();
        let p1 = model.predict_users(&ratings, &features, &users).unwrap();
        let p2 = back.predict_users(&ratings, &features, &users).unwrap();
        assert!(p1
            .as_slice()
            .iter()
            .zip(p2.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xff;
        assert!(matches!(
            LfgModel::from_bytes(&bad),
            Err(LfgError::Persist(PersistError::Checksum { .. }))
        ));
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(matches!(
            LfgModel::from_bytes(&future),
            Err(LfgError::Persist(PersistError::Version { found: 9, .. }))
        ));
        assert!(matches!(
            LfgModel::from_bytes(&bytes[..bytes.len() - 1]),
            Err(LfgError::Persist(PersistError::Truncated { .. }))
        ));
    }
}
