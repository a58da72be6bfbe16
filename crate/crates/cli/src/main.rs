use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lfg_cli::recommend::{parse_pair, LoadedModel, Query};
use lfg_cli::serve::{self, AppState};
use lfg_core::baselines::{self, SgdConfig};
use lfg_core::eval::{self, ExperimentConfig, NewUserPolicy, ReportFormat};
use lfg_core::lfg::{ArchConfig, TrainConfig};
use lfg_core::{Dataset, DatasetKind};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lfg", version, about = "Latent factor generator recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a 5-fold cross-validated experiment and write reports.
    Crossval(CrossvalArgs),
    /// Train a model on the full dataset and save it.
    Train(TrainArgs),
    /// Rank unrated items for a new user.
    Predict(PredictArgs),
    /// Serve recommendations over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Ml100k,
    Ml1m,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Ml100k => DatasetKind::Ml100k,
            DatasetArg::Ml1m => DatasetKind::Ml1m,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "ml100k")]
    dataset: DatasetArg,
    /// Directory holding the dataset files; defaults to data/ml-100k or data/ml-1m.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let kind = DatasetKind::from(self.dataset);
        let dir = self.data_dir.clone().unwrap_or_else(|| match kind {
            DatasetKind::Ml100k => PathBuf::from("data/ml-100k"),
            DatasetKind::Ml1m => PathBuf::from("data/ml-1m"),
        });
        let ds = Dataset::load(kind, &dir)
            .with_context(|| format!("loading {kind} from {}", dir.display()))?;
        tracing::info!(
            users = ds.ratings.n_users(),
            items = ds.ratings.n_items(),
            ratings = ds.ratings.len(),
            "dataset loaded"
        );
        Ok(ds)
    }
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Latent rank.
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Input mask probability during training.
    #[arg(long, default_value_t = 0.1)]
    mask_p: f64,
    /// Generator training epochs.
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Decoupled weight decay for the generator.
    #[arg(long, default_value_t = 10.0)]
    weight_decay: f64,
    /// Baseline SGD epochs.
    #[arg(long, default_value_t = 30)]
    sgd_epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    sgd_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    sgd_reg: f64,
}

impl HyperArgs {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_p) {
            bail!("--mask-p must be in [0, 1)");
        }
        if self.k == 0 || self.batch_size < 2 {
            bail!("--k must be positive and --batch-size at least 2");
        }
        Ok(())
    }

    fn arch(&self) -> ArchConfig {
        ArchConfig {
            rank: self.k,
            mask_p: self.mask_p,
            ..ArchConfig::default()
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            mask_seed: None,
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            rank: self.k,
            learning_rate: self.sgd_lr,
            regularization: self.sgd_reg,
            epochs: self.sgd_epochs,
            seed: self.seed,
            ..SgdConfig::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
    Json,
    All,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    experiment: u8,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..=255))]
    folds: u64,
    /// How experiment 2 picks new users: a different fifth per fold, or one fixed fifth.
    #[arg(long, value_enum, default_value = "rotating")]
    new_users: NewUsersArg,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum NewUsersArg {
    Rotating,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Lfg,
    Funksvd,
    Biassvd,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "lfg")]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model_file: PathBuf,
    /// Known ratings as item=rating pairs.
    #[arg(value_parser = parse_pair)]
    ratings: Vec<(u32, f64)>,
    #[arg(long)]
    age: u32,
    #[arg(long)]
    gender: String,
    #[arg(long)]
    occupation: String,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Crossval(a) => crossval(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn crossval(args: CrossvalArgs) -> Result<()> {
    args.hyper.validate()?;
    let dataset = args.data.load()?;
    let config = ExperimentConfig {
        folds: args.folds as usize,
        seed: args.hyper.seed,
        sgd: args.hyper.sgd(),
        arch: args.hyper.arch(),
        train: args.hyper.train(),
        new_users: match args.new_users {
            NewUsersArg::Rotating => NewUserPolicy::Rotating,
            NewUsersArg::Fixed => NewUserPolicy::Fixed,
        },
    };
    let report = match args.experiment {
        1 => eval::run_experiment1(&dataset, &config)?,
        _ => eval::run_experiment2(&dataset, &config)?,
    };
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let formats: &[ReportFormat] = match args.format {
        FormatArg::Csv => &[ReportFormat::Csv],
        FormatArg::Markdown => &[ReportFormat::Markdown],
        FormatArg::Json => &[ReportFormat::Json],
        FormatArg::All => &[
            ReportFormat::Csv,
            ReportFormat::Markdown,
            ReportFormat::Json,
        ],
    };
    let stem = format!("experiment{}_{}", args.experiment, dataset.kind.name());
    for &f in formats {
        let path = args.out_dir.join(format!("{stem}.{}", f.extension()));
        report.write(f, &path)?;
        tracing::info!(path = %path.display(), "report written");
    }
    print!("{}", report.to_markdown());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    args.hyper.validate()?;
    let dataset = args.data.load()?;
    let bytes = match args.model {
        ModelArg::Lfg => {
            let model = eval::fit_lfg(
                &dataset,
                &dataset.ratings,
                &args.hyper.arch(),
                &args.hyper.train(),
                &HashSet::new(),
            )?;
            model.to_bytes()
        }
        ModelArg::Funksvd | ModelArg::Biassvd => {
            let fit = if args.model == ModelArg::Funksvd {
                baselines::train_funksvd(&dataset.ratings, &args.hyper.sgd())?
            } else {
                baselines::train_biassvd(&dataset.ratings, &args.hyper.sgd())?
            };
            if let Some(last) = fit.rmse_trace.last() {
                tracing::info!(train_rmse = last, "baseline trained");
            }
            baselines::to_bytes(&fit.model, dataset.ids.item_ids())
        }
    };
    write_model(&args.out, &bytes)
}

fn write_model(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    tracing::info!(path = %path.display(), bytes = bytes.len(), "model saved");
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let (model, _) = LoadedModel::load(&args.model_file)
        .with_context(|| format!("loading {}", args.model_file.display()))?;
    let query = Query {
        ratings: args.ratings,
        age: args.age as f64,
        gender: args.gender,
        occupation: args.occupation,
        top_n: args.top_n,
    };
    let items = model.recommend(&query)?;
    if args.json {
        let items: Vec<_> = items
            .iter()
            .map(|(i, s)| json!({ "item": i, "score": s }))
            .collect();
        println!("{}", json!({ "items": items }));
    } else {
        for (rank, (item, score)) in items.iter().enumerate() {
            println!("{:>3}  item {:>5}  {:.4}", rank + 1, item, score);
        }
    }
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let (model, version) = LoadedModel::load(&args.model_file)
        .with_context(|| format!("loading {}", args.model_file.display()))?;
    tracing::info!(%version, "model loaded");
    let state = AppState::new(model, version, Some(args.model_file));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve::run(state, &args.bind))?;
    Ok(())
}
