//! RMSE, the two cross-validated experiments, and report output.
//!
//! Experiment 1 splits every user's ratings across the folds and scores each
//! held-out fold. Experiment 2 holds out a fifth of the users as new users,
//! trains on the remaining users' folds, and scores the new users from
//! inference alone.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, BaselineModel, SgdConfig};
use crate::dataset::{
    make_fold_plan, Dataset, DatasetError, DatasetKind, FoldMode, FoldPlan, RatingMatrix,
};
use crate::lfg::{init_lfg, ArchConfig, LfgError, LfgModel, TrainConfig};
use crate::matrix::{fill_and_center, truncated_svd, MatrixError};
use crate::{clamp_rating, DenseMatrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rmse of an empty set")]
    Empty,
    #[error("fold {fold}: {count} positions appear in both training and evaluation")]
    Leakage { fold: usize, count: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Lfg(#[from] LfgError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, EvalError>;

/// `√(Σ (truth − prediction)² / N)`.
pub fn rmse(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, p) in pairs {
        sum += (t - p) * (t - p);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Rating prediction for existing users.
    Accuracy,
    /// New users scored by inference only.
    RealTime,
}

impl Experiment {
    pub fn number(self) -> u8 {
        match self {
            Experiment::Accuracy => 1,
            Experiment::RealTime => 2,
        }
    }
}

/// How Experiment 2 chooses its new users.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewUserPolicy {
    /// Users are dealt into folds and each fold's users are its new users, so
    /// every user is scored exactly once.
    #[default]
    Rotating,
    /// One fixed fifth of the users is new in every fold; the folds re-split
    /// the existing users' ratings.
    Fixed,
}

pub const MODEL_NAMES: [&str; 3] = ["funksvd", "biassvd", "lfg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub folds: usize,
    /// Fold plan seed; fold `f` trains with seed `seed + f`.
    pub seed: u64,
    pub sgd: SgdConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub new_users: NewUserPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            folds: crate::dataset::DEFAULT_FOLDS,
            seed: 42,
            sgd: SgdConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            new_users: NewUserPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// 0-based.
    pub fold: usize,
    pub train_ratings: usize,
    pub eval_ratings: usize,
    /// In [`MODEL_NAMES`] order.
    pub rmse: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: Experiment,
    pub dataset: DatasetKind,
    pub folds: Vec<FoldResult>,
    pub config: ExperimentConfig,
}

/// Counts `(user, item)` positions present in both matrices.
pub fn overlap(a: &RatingMatrix, b: &RatingMatrix) -> usize {
    let set: HashSet<(usize, usize)> = a.observed().map(|(u, i, _)| (u, i)).collect();
    b.observed()
        .filter(|(u, i, _)| set.contains(&(*u, *i)))
        .count()
}

fn score_baseline(model: &BaselineModel, eval: &RatingMatrix, cold: bool) -> Result<f64> {
    let preds = eval
        .observed()
        .map(|(u, i, r)| {
            let p = if cold {
                model.predict_cold(i)?
            } else {
                model.predict(u, i)?
            };
            Ok((r, p))
        })
        .collect::<Result<Vec<_>>>()?;
    rmse(preds)
}

fn score_lfg(
    model: &LfgModel,
    input: &RatingMatrix,
    features: &DenseMatrix,
    targets: &RatingMatrix,
) -> Result<f64> {
    let users = targets.active_users();
    let pred = model.predict_users(input, features, &users)?;
    let mut pairs = Vec::with_capacity(targets.len());
    for (row, &u) in users.iter().enumerate() {
        for &(i, r) in targets.user_row(u) {
            pairs.push((r, clamp_rating(pred.get(row, i))));
        }
    }
    rmse(pairs)
}

/// Trains the generator on `train`: SVD of the centered training matrix,
/// item-factor initialization, then joint training.
pub fn fit_lfg(
    dataset: &Dataset,
    train: &RatingMatrix,
    arch: &ArchConfig,
    train_config: &TrainConfig,
    excluded: &HashSet<usize>,
) -> std::result::Result<LfgModel, LfgError> {
    let mu = train.mean().ok_or(LfgError::NoTrainingUsers)?;
    let svd = truncated_svd(&fill_and_center(train, mu), arch.rank, train_config.seed)?;
    let mut model = init_lfg(
        &svd,
        mu,
        dataset.features.codec.clone(),
        dataset.ids.item_ids().to_vec(),
        arch,
        train_config.seed,
    )?;
    let report = model.train(train, &dataset.features.rows, train_config, excluded)?;
    log::info!(
        "lfg: loss {:.4} -> {:.4} over {} batches",
        report.initial_loss,
        report
            .loss_trace
            .last()
            .copied()
            .unwrap_or(report.initial_loss),
        report.batches
    );
    Ok(model)
}

fn fold_configs(config: &ExperimentConfig, fold: usize) -> (SgdConfig, TrainConfig) {
    let seed = config.seed.wrapping_add(fold as u64);
    let sgd = SgdConfig {
        rank: config.arch.rank,
        seed,
        ..config.sgd.clone()
    };
    let train = TrainConfig {
        seed,
        mask_seed: config.train.mask_seed.map(|s| s.wrapping_add(fold as u64)),
        ..config.train.clone()
    };
    (sgd, train)
}

pub fn run_experiment1(dataset: &Dataset, config: &ExperimentConfig) -> Result<EvalReport> {
    let plan = make_fold_plan(
        &dataset.ratings,
        FoldMode::PerUserRatings,
        config.folds,
        config.seed,
    )?;
    let mut folds = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let train = plan.train_matrix(&dataset.ratings, fold)?;
        let eval = plan.eval_matrix(&dataset.ratings, fold)?;
        let count = overlap(&train, &eval);
        if count > 0 {
            return Err(EvalError::Leakage { fold, count });
        }
        let (sgd, train_config) = fold_configs(config, fold);

        let funk = baselines::train_funksvd(&train, &sgd)?.model;
        let bias = baselines::train_biassvd(&train, &sgd)?.model;
        let lfg = fit_lfg(
            dataset,
            &train,
            &config.arch,
            &train_config,
            &HashSet::new(),
        )?;

        let result = FoldResult {
            fold,
            train_ratings: train.len(),
            eval_ratings: eval.len(),
            rmse: [
                score_baseline(&funk, &eval, false)?,
                score_baseline(&bias, &eval, false)?,
                score_lfg(&lfg, &train, &dataset.features.rows, &eval)?,
            ],
        };
        log::info!("experiment 1 fold {}: {:?}", fold + 1, result.rmse);
        folds.push(result);
    }
    Ok(EvalReport {
        experiment: Experiment::Accuracy,
        dataset: dataset.kind,
        folds,
        config: config.clone(),
    })
}

/// Checks that no new user contributes to `train` and that training and
/// scored positions are disjoint.
pub fn audit_new_users(
    plan: &FoldPlan,
    train: &RatingMatrix,
    history: &RatingMatrix,
    targets: &RatingMatrix,
    fold: usize,
) -> Result<()> {
    let leaked = plan
        .new_users(fold)
        .iter()
        .map(|&u| train.user_row(u).len())
        .sum::<usize>()
        + overlap(train, targets)
        + overlap(history, targets);
    if leaked > 0 {
        return Err(EvalError::Leakage {
            fold,
            count: leaked,
        });
    }
    Ok(())
}

pub fn run_experiment2(dataset: &Dataset, config: &ExperimentConfig) -> Result<EvalReport> {
    let mode = match config.new_users {
        NewUserPolicy::Rotating => FoldMode::UserFolds,
        NewUserPolicy::Fixed => FoldMode::UserLevel,
    };
    let plan = make_fold_plan(&dataset.ratings, mode, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let history = plan.new_user_history(&dataset.ratings, fold)?;
        let targets = plan.new_user_targets(&dataset.ratings, fold)?;
        let excluded: HashSet<usize> = plan.new_users(fold).into_iter().collect();
        let train = plan.train_matrix(&dataset.ratings, fold)?;
        audit_new_users(&plan, &train, &history, &targets, fold)?;
        let (sgd, train_config) = fold_configs(config, fold);

        let funk = baselines::train_funksvd(&train, &sgd)?.model;
        let bias = baselines::train_biassvd(&train, &sgd)?.model;
        let lfg = fit_lfg(dataset, &train, &config.arch, &train_config, &excluded)?;

        let result = FoldResult {
            fold,
            train_ratings: train.len(),
            eval_ratings: targets.len(),
            rmse: [
                score_baseline(&funk, &targets, true)?,
                score_baseline(&bias, &targets, true)?,
                score_lfg(&lfg, &history, &dataset.features.rows, &targets)?,
            ],
        };
        log::info!("experiment 2 fold {}: {:?}", fold + 1, result.rmse);
        folds.push(result);
    }
    Ok(EvalReport {
        experiment: Experiment::RealTime,
        dataset: dataset.kind,
        folds,
        config: config.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

impl EvalReport {
    /// Mean RMSE per model over the folds.
    pub fn averages(&self) -> [f64; 3] {
        let mut avg = [0.0; 3];
        for f in &self.folds {
            avg.iter_mut().zip(f.rmse).for_each(|(a, r)| *a += r);
        }
        avg.map(|a| a / self.folds.len().max(1) as f64)
    }

    /// `experiment,dataset,fold,model,rmse`; one row per fold and model, then
    /// one `average` row per model.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "dataset", "fold", "model", "rmse"])?;
        let exp = self.experiment.number().to_string();
        let ds = self.dataset.name();
        for f in &self.folds {
            let fold = (f.fold + 1).to_string();
            for (name, r) in MODEL_NAMES.iter().zip(f.rmse) {
                w.write_record([exp.as_str(), ds, &fold, name, &r.to_string()])?;
            }
        }
        for (name, r) in MODEL_NAMES.iter().zip(self.averages()) {
            w.write_record([exp.as_str(), ds, "average", name, &r.to_string()])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let (title, label) = match self.experiment {
            Experiment::Accuracy => ("Rating Prediction", "Eval"),
            Experiment::RealTime => ("Real-Time Recommendation", "Test"),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# LFG {title} {}-Fold Cross-Validation Results on {}\n",
            self.folds.len(),
            self.dataset
        );
        let _ = writeln!(
            s,
            "| Fold | Training Set | Evaluation Set | SVD {label} RMSE | BiasSVD {label} RMSE | LFG {label} RMSE |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let all: Vec<usize> = (1..=self.folds.len()).collect();
        for f in &self.folds {
            let training: Vec<String> = all
                .iter()
                .filter(|&&x| x != f.fold + 1)
                .map(|x| x.to_string())
                .collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                f.fold + 1,
                training.join(","),
                f.fold + 1,
                f.rmse[0],
                f.rmse[1],
                f.rmse[2]
            );
        }
        let avg = self.averages();
        let _ = writeln!(
            s,
            "| Average | | RMSE | {:.4} | {:.4} | {:.4} |",
            avg[0], avg[1], avg[2]
        );
        let _ = writeln!(s, "\n## Configuration\n\n```json");
        let _ = writeln!(
            s,
            "{}",
            serde_json::to_string_pretty(&self.config).expect("config serializes")
        );
        let _ = writeln!(s, "```");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Csv => self.to_csv()?,
            ReportFormat::Markdown => self.to_markdown(),
            ReportFormat::Json => self.to_json(),
        })
    }

    pub fn write(&self, format: ReportFormat, path: &Path) -> Result<()> {
        fs::write(path, self.render(format)?).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
