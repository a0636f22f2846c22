//! `cel`: clustered embedding learning from the command line. Trains
//! offline and online models, retrains under fixed clusterings, builds
//! per-item personalized tables, evaluates and analyzes checkpoints, runs
//! reference baselines, and generates synthetic datasets.

mod artifacts;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use artifacts::{
    evaluate, mean_std, metrics_text, write_interactions_csv, write_maps, write_summary,
    FoldSummary, OutDir, TestReport, TrainSummary,
};
use cel_core::cluster::modulo_assign;
use cel_core::config::RunConfig;
use cel_core::dataset::{
    load_dataset, load_dataset_with_maps, load_genres, read_id_map, split_train_test,
    DataView, DatasetFormat, IdMaps, InteractionStore, SplitSpec,
};
use cel_core::eval::{genre_entropy, scattered_fraction, warmth_buckets, DEFAULT_BUCKET_EDGES};
use cel_core::model::{
    load_checkpoint, personalize, personalized_model, save_checkpoint, EmbeddingModel,
    InteractionScorer, NmfScorer,
};
use cel_core::trainer::{
    fold_seed, generate_synthetic, generate_synthetic_stream, retrain_fixed, target_clusters,
    train_cel, train_cel_lite, RunReport, TrainSchedule,
};

#[derive(Parser)]
#[command(name = "cel", version, about = "Clustered embedding learning for interaction data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a clustered embedding model with automatic top-down splitting.
    Train(TrainArgs),
    /// Train online from a replay stream, one gradient step per batch.
    Lite(TrainArgs),
    /// Retrain embeddings from scratch under a checkpoint's fixed clustering.
    Retrain(FromArgs),
    /// Fine-tune a checkpoint into per-item embeddings with a cluster pull-back.
    Personalize(PersonalizeArgs),
    /// Evaluate a checkpoint on a dataset (uses the ID-map sidecars beside it).
    Eval(EvalArgs),
    /// Report structure statistics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Train a reference baseline for comparison.
    Baseline(BaselineArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Interaction file.
    #[arg(long)]
    data: PathBuf,
    /// Input format: mldat (user::item::rating::timestamp) or csv.
    #[arg(long, default_value = "mldat")]
    format: String,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Fraction held out as the test set; 0 trains on everything [default: 0.2].
    #[arg(long)]
    holdout: Option<f64>,
    /// Cross-validate over this many folds instead of a single holdout.
    #[arg(long, conflicts_with = "holdout")]
    folds: Option<usize>,
    /// With --folds: train only this fold index.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// Optional key=value config file, applied before flag overrides.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Embedding dimension R [default: 64].
    #[arg(long)]
    dim: Option<usize>,
    /// Embedding steps; personalization fine-tune steps there [default: 2000; personalize 50].
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [default: 0.0001; lite 0.05].
    #[arg(long)]
    eta: Option<f64>,
    /// Norm-regularization weight [default: 1].
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Personalization pull-back weight [default: 50].
    #[arg(long)]
    lambda_p: Option<f64>,
    /// Steps between reassignment passes [default: 40; lite 1].
    #[arg(long)]
    t1: Option<usize>,
    /// Steps between split attempts [default: 10].
    #[arg(long)]
    t2: Option<usize>,
    /// Split score threshold [default: 0].
    #[arg(long)]
    delta: Option<f64>,
    /// Interaction-balance parameter for the online split strategies [default: 100].
    #[arg(long)]
    d: Option<u64>,
    /// Replay-buffer capacity per entity [default: 20].
    #[arg(long)]
    n: Option<usize>,
    /// Sampled candidate clusters per online reassignment [default: 10].
    #[arg(long)]
    m: Option<usize>,
    /// Online batch size [default: 2000].
    #[arg(long)]
    b: Option<usize>,
    /// Compression target M*/M [default: 1.0].
    #[arg(long)]
    ratio: Option<f64>,
    /// Initial cluster count [default: 1].
    #[arg(long)]
    m0: Option<usize>,
    /// Seed for all randomness [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Split-choice criterion: loss | mean-loss | members | interactions | grad-norm [default: interactions].
    #[arg(long)]
    criterion: Option<String>,
    /// Split method: gpca | random-projection | random [default: gpca].
    #[arg(long)]
    split_method: Option<String>,
    /// Scale cluster gradients by 1/member-count: true | false [default: true].
    #[arg(long)]
    averaging: Option<bool>,
    /// Nonnegativity projection: abs | clip | off [default: abs].
    #[arg(long)]
    nonneg: Option<String>,
    /// Worker threads; 0 uses every core [default: 0].
    #[arg(long)]
    threads: Option<usize>,
    /// Steps between logged loss samples [default: 100].
    #[arg(long)]
    log_every: Option<usize>,
    /// Stop offline training after this many validation checks (one per
    /// reassignment pass) without improvement, measured on a 10% carve-out
    /// of the training split; 0 trains for the full step budget [default: 0].
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalOpts {
    /// Rating at or above which a test row counts as a positive for AUC [default: 4].
    #[arg(long)]
    auc_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, logs, and the summary.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args, Debug)]
struct FromArgs {
    /// Source checkpoint (ID-map sidecars are read from its directory).
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, logs, and the summary.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args, Debug)]
struct PersonalizeArgs {
    /// Source checkpoint (ID-map sidecars are read from its directory).
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the personalized checkpoint and summary.
    #[arg(long)]
    out: PathBuf,
    /// Fraction held out as the test set; 0 personalizes on everything [default: 0.2].
    #[arg(long)]
    holdout: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Training file for the per-warmth bucket table (same format).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Comma-separated warmth bucket edges [default: 0,5,20,100,800,2000].
    #[arg(long)]
    buckets: Option<String>,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Checkpoint to analyze.
    #[arg(long)]
    model: PathBuf,
    /// Genre file (item::title::genre|genre) for cluster-entropy reporting.
    #[arg(long)]
    genres: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// Baseline method: modulo | random-split | random-projection.
    #[arg(long)]
    method: String,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, logs, and the summary.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Users in the clustered generator.
    #[arg(long, default_value_t = 60)]
    users: usize,
    /// Items in the clustered generator.
    #[arg(long, default_value_t = 80)]
    items: usize,
    /// True item clusters.
    #[arg(long, default_value_t = 6)]
    clusters: usize,
    /// Embedding dimension of the generator.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Rating noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fraction of the full rating matrix observed.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Generate a growth stream of this many interactions instead.
    #[arg(long)]
    stream: Option<usize>,
    /// Stream mode: interactions per new user.
    #[arg(long, default_value_t = 50)]
    users_per: usize,
    /// Stream mode: interactions per new item.
    #[arg(long, default_value_t = 100)]
    items_per: usize,
    /// Seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args, None),
        Command::Lite(args) => cmd_lite(args),
        Command::Retrain(args) => cmd_retrain(args),
        Command::Personalize(args) => cmd_personalize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Applies config-file keys and then flag overrides onto `rc`.
fn build_config(mut rc: RunConfig, h: &HyperArgs) -> Result<RunConfig> {
    if let Some(path) = &h.config {
        rc.apply_file(path)?;
    }
    if let Some(v) = h.dim {
        rc.dim = v;
    }
    if let Some(v) = h.steps {
        rc.steps = v;
    }
    if let Some(v) = h.threads {
        rc.threads = v;
    }
    if let Some(v) = h.log_every {
        rc.log_every = v;
    }
    if let Some(v) = h.patience {
        rc.patience = v;
    }
    if let Some(v) = h.eta {
        rc.hp.eta = v;
    }
    if let Some(v) = h.lambda_reg {
        rc.hp.lambda_reg = v;
    }
    if let Some(v) = h.lambda_p {
        rc.hp.lambda_p = v;
    }
    if let Some(v) = h.t1 {
        rc.hp.t1 = v;
    }
    if let Some(v) = h.t2 {
        rc.hp.t2 = v;
    }
    if let Some(v) = h.delta {
        rc.hp.delta = v;
    }
    if let Some(v) = h.d {
        rc.hp.d = v;
    }
    if let Some(v) = h.n {
        rc.hp.n = v;
    }
    if let Some(v) = h.m {
        rc.hp.m = v;
    }
    if let Some(v) = h.b {
        rc.hp.b = v;
    }
    if let Some(v) = h.ratio {
        rc.hp.target_ratio = v;
    }
    if let Some(v) = h.m0 {
        rc.hp.m0 = v;
    }
    if let Some(v) = h.seed {
        rc.hp.seed = v;
    }
    if let Some(v) = h.averaging {
        rc.hp.averaging = v;
    }
    if let Some(s) = &h.criterion {
        rc.criterion = s.parse::<cel_core::cluster::SplitCriterion>()?;
    }
    if let Some(s) = &h.split_method {
        rc.split_method = s.parse::<cel_core::cluster::SplitMethod>()?;
    }
    if let Some(s) = &h.nonneg {
        rc.hp.nonneg = s.parse::<cel_core::model::NonnegMode>()?;
    }
    Ok(rc)
}

fn init_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("sizing the worker pool")?;
    }
    Ok(())
}

enum SplitPlan {
    None,
    Holdout(f64),
    Folds { k: usize, only: Option<usize> },
}

impl SplitPlan {
    fn is_folds(&self) -> bool {
        matches!(self, SplitPlan::Folds { .. })
    }
}

fn split_plan(s: &SplitArgs) -> Result<SplitPlan> {
    if let Some(k) = s.folds {
        return Ok(SplitPlan::Folds { k, only: s.fold });
    }
    holdout_plan(s.holdout)
}

fn holdout_plan(holdout: Option<f64>) -> Result<SplitPlan> {
    let h = holdout.unwrap_or(0.2);
    if h == 0.0 {
        Ok(SplitPlan::None)
    } else if h > 0.0 && h < 1.0 {
        Ok(SplitPlan::Holdout(h))
    } else {
        bail!("--holdout must be in [0, 1), got {h}");
    }
}

/// The (fold, train, test) runs a split plan expands to.
fn make_splits(
    store: &InteractionStore,
    plan: &SplitPlan,
    seed: u64,
) -> Result<Vec<(usize, InteractionStore, Option<InteractionStore>)>> {
    match plan {
        SplitPlan::None => Ok(vec![(0, store.clone(), None)]),
        SplitPlan::Holdout(f) => {
            let (train, test) =
                split_train_test(store, SplitSpec::Holdout { fraction: *f, seed })?;
            Ok(vec![(0, train, Some(test))])
        }
        SplitPlan::Folds { k, only } => {
            let mut out = Vec::new();
            for fold in 0..*k {
                if only.is_some_and(|o| o != fold) {
                    continue;
                }
                let (train, test) =
                    split_train_test(store, SplitSpec::KFold { k: *k, fold, seed })?;
                out.push((fold, train, Some(test)));
            }
            if out.is_empty() {
                bail!("--fold {} out of range for --folds {k}", only.unwrap_or(0));
            }
            Ok(out)
        }
    }
}

/// Saves one fold's model, reloads it so every reported metric reflects the
/// on-disk (f32) checkpoint exactly, evaluates, and exports the evaluated
/// test rows.
#[allow(clippy::too_many_arguments)]
fn finish_fold<S: InteractionScorer>(
    out: &OutDir,
    scorer: &S,
    fold: usize,
    folds_mode: bool,
    model: &EmbeddingModel,
    report: &RunReport,
    train: &InteractionStore,
    test: Option<&InteractionStore>,
    auc_threshold: f64,
) -> Result<FoldSummary> {
    let (ckpt_name, csv_name) = if folds_mode {
        (format!("model_fold{fold}.cel"), format!("test_fold{fold}.csv"))
    } else {
        ("model.cel".to_string(), "test.csv".to_string())
    };
    let ckpt_path = out.path(&ckpt_name);
    save_checkpoint(model, &ckpt_path)?;
    let reloaded = load_checkpoint(&ckpt_path)?;

    let test_report = match test {
        None => None,
        Some(test_store) => {
            let (rep, kept) =
                evaluate(&reloaded, scorer, train, test_store.interactions(), auc_threshold)?;
            if rep.is_some() {
                write_interactions_csv(out, &csv_name, train, &kept)?;
            }
            rep
        }
    };

    Ok(FoldSummary {
        fold,
        checkpoint: ckpt_name,
        final_train_loss: report.final_train_loss,
        m_q: report.final_m_q,
        elapsed_ms: report.elapsed_ms,
        test: test_report,
    })
}

fn print_fold(f: &FoldSummary) {
    match &f.test {
        Some(t) => {
            let auc = t.auc.map_or("none".to_string(), |a| a.to_string());
            println!(
                "fold={} m_q={} train_loss={} test_mse={} test_auc={auc}",
                f.fold, f.m_q, f.final_train_loss, t.mse
            );
        }
        None => println!("fold={} m_q={} train_loss={}", f.fold, f.m_q, f.final_train_loss),
    }
}

/// Shared driver for the training-style commands: expands the split plan,
/// trains each fold through `train_one`, and writes all artifacts.
#[allow(clippy::too_many_arguments)]
fn run_training<F>(
    command: &'static str,
    method: Option<&'static str>,
    source_checkpoint: Option<String>,
    data: &DataArgs,
    store: &InteractionStore,
    out_path: &Path,
    plan: &SplitPlan,
    rc: &RunConfig,
    m_star: usize,
    auc_threshold: f64,
    mut train_one: F,
) -> Result<()>
where
    F: FnMut(usize, &InteractionStore) -> Result<(EmbeddingModel, RunReport)>,
{
    let out = OutDir::create(out_path)?;
    write_maps(&out, store)?;
    let splits = make_splits(store, plan, rc.hp.seed)?;
    let scorer = NmfScorer;

    let mut folds = Vec::new();
    let mut reports = Vec::new();
    for (fold, train, test) in &splits {
        let (model, report) = train_one(*fold, train)?;
        let summary = finish_fold(
            &out,
            &scorer,
            *fold,
            plan.is_folds(),
            &model,
            &report,
            train,
            test.as_ref(),
            auc_threshold,
        )?;
        print_fold(&summary);
        reports.push((*fold, report));
        folds.push(summary);
    }

    out.write("metrics.log", metrics_text(&reports).as_bytes())?;
    let mses: Vec<f64> = folds.iter().filter_map(|f| f.test.as_ref().map(|t| t.mse)).collect();
    let stats = mean_std(&mses);
    let summary = TrainSummary {
        command,
        method,
        source_checkpoint,
        data: data.data.display().to_string(),
        n_users: store.n_users(),
        n_items: store.n_items(),
        interactions: store.len(),
        m_star,
        config: rc,
        folds,
        mean_test_mse: stats.map(|(m, _)| m),
        std_test_mse: stats.map(|(_, s)| s),
    };
    write_summary(&out, &summary)?;
    if let Some((mean, std)) = stats {
        println!("mean_test_mse={mean} std_test_mse={std}");
    }
    println!("wrote {}", out.path("summary.json").display());
    Ok(())
}

fn cmd_train(args: TrainArgs, override_method: Option<cel_core::cluster::SplitMethod>) -> Result<()> {
    let mut rc = build_config(RunConfig::default_cel(), &args.hyper)?;
    if let Some(method) = override_method {
        rc.split_method = method;
    }
    init_threads(rc.threads)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let store = load_dataset(&args.data.data, format)?;
    let plan = split_plan(&args.split)?;
    let m_star = target_clusters(store.n_items(), rc.hp.target_ratio);
    let schedule = TrainSchedule {
        steps: rc.steps,
        m_star,
        criterion: rc.criterion,
        split_method: rc.split_method,
        log_every: rc.log_every,
        patience: rc.patience,
    };
    let auc_threshold = args.eval.auc_threshold.unwrap_or(4.0);
    let base_hp = rc.hp.clone();
    let command: &'static str =
        if override_method.is_some() { "baseline" } else { "train" };
    let method: Option<&'static str> = match override_method {
        Some(cel_core::cluster::SplitMethod::Random) => Some("random-split"),
        Some(cel_core::cluster::SplitMethod::RandomProjection) => Some("random-projection"),
        Some(cel_core::cluster::SplitMethod::Gpca) | None => None,
    };
    run_training(
        command,
        method,
        None,
        &args.data,
        &store,
        &args.out,
        &plan,
        &rc,
        m_star,
        auc_threshold,
        |fold, train| {
            let mut hp = base_hp.clone();
            hp.seed = fold_seed(base_hp.seed, fold);
            if schedule.patience > 0 {
                let (fit, val) = split_train_test(
                    train,
                    SplitSpec::Holdout { fraction: 0.1, seed: hp.seed },
                )?;
                train_cel(&fit, &NmfScorer, &hp, rc.dim, &schedule, Some(&val))
                    .map_err(anyhow::Error::from)
            } else {
                train_cel(train, &NmfScorer, &hp, rc.dim, &schedule, None)
                    .map_err(anyhow::Error::from)
            }
        },
    )
}

fn cmd_lite(args: TrainArgs) -> Result<()> {
    let rc = build_config(RunConfig::default_lite(), &args.hyper)?;
    init_threads(rc.threads)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let store = load_dataset(&args.data.data, format)?;
    let plan = split_plan(&args.split)?;
    let m_star = target_clusters(store.n_items(), rc.hp.target_ratio);
    let auc_threshold = args.eval.auc_threshold.unwrap_or(4.0);
    let base_hp = rc.hp.clone();
    run_training(
        "lite",
        None,
        None,
        &args.data,
        &store,
        &args.out,
        &plan,
        &rc,
        m_star,
        auc_threshold,
        |fold, train| {
            let mut hp = base_hp.clone();
            hp.seed = fold_seed(base_hp.seed, fold);
            train_cel_lite(train, &NmfScorer, &hp, rc.dim, Some(m_star), rc.log_every)
                .map_err(anyhow::Error::from)
        },
    )
}

/// Reads the `users.map` / `items.map` sidecars next to a checkpoint.
fn sidecar_maps(model_path: &Path) -> Result<Arc<IdMaps>> {
    let dir = model_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let users = read_id_map(dir.join("users.map"))
        .with_context(|| format!("reading users.map beside {}", model_path.display()))?;
    let items = read_id_map(dir.join("items.map"))
        .with_context(|| format!("reading items.map beside {}", model_path.display()))?;
    Ok(Arc::new(IdMaps { users, items }))
}

fn check_dims(model: &EmbeddingModel, store: &InteractionStore) -> Result<()> {
    if model.n_users() != store.n_users() || model.n_items() != store.n_items() {
        bail!(
            "checkpoint is {}x{} (users x items) but the ID maps cover {}x{}",
            model.n_users(),
            model.n_items(),
            store.n_users(),
            store.n_items()
        );
    }
    Ok(())
}

fn cmd_retrain(args: FromArgs) -> Result<()> {
    let rc = build_config(RunConfig::default_cel(), &args.hyper)?;
    init_threads(rc.threads)?;
    let base = load_checkpoint(&args.from)?;
    let maps = sidecar_maps(&args.from)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let (store, skipped) = load_dataset_with_maps(&args.data.data, format, maps)?;
    if skipped > 0 {
        println!("skipped_unmapped={skipped}");
    }
    check_dims(&base, &store)?;
    let plan = split_plan(&args.split)?;
    let auc_threshold = args.eval.auc_threshold.unwrap_or(4.0);
    let base_hp = rc.hp.clone();
    let assign = base.assign.clone();
    let m_q = base.m_q();
    let r = base.r();
    run_training(
        "retrain",
        None,
        Some(args.from.display().to_string()),
        &args.data,
        &store,
        &args.out,
        &plan,
        &rc,
        m_q,
        auc_threshold,
        |fold, train| {
            let mut hp = base_hp.clone();
            hp.seed = fold_seed(base_hp.seed, fold);
            retrain_fixed(train, &NmfScorer, &hp, r, assign.clone(), m_q, rc.steps, rc.log_every)
                .map_err(anyhow::Error::from)
        },
    )
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let train_args = TrainArgs {
        data: args.data,
        out: args.out,
        split: args.split,
        hyper: args.hyper,
        eval: args.eval,
    };
    match args.method.as_str() {
        "modulo" => cmd_baseline_modulo(train_args),
        "random-split" => cmd_train(train_args, Some(cel_core::cluster::SplitMethod::Random)),
        "random-projection" => {
            cmd_train(train_args, Some(cel_core::cluster::SplitMethod::RandomProjection))
        }
        other => bail!("unknown baseline method '{other}'"),
    }
}

fn cmd_baseline_modulo(args: TrainArgs) -> Result<()> {
    let rc = build_config(RunConfig::default_cel(), &args.hyper)?;
    init_threads(rc.threads)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let store = load_dataset(&args.data.data, format)?;
    let plan = split_plan(&args.split)?;
    let m_star = target_clusters(store.n_items(), rc.hp.target_ratio);
    let assign = modulo_assign(store.n_items(), m_star);
    let auc_threshold = args.eval.auc_threshold.unwrap_or(4.0);
    let base_hp = rc.hp.clone();
    run_training(
        "baseline",
        Some("modulo"),
        None,
        &args.data,
        &store,
        &args.out,
        &plan,
        &rc,
        m_star,
        auc_threshold,
        |fold, train| {
            let mut hp = base_hp.clone();
            hp.seed = fold_seed(base_hp.seed, fold);
            retrain_fixed(
                train,
                &NmfScorer,
                &hp,
                rc.dim,
                assign.clone(),
                m_star,
                rc.steps,
                rc.log_every,
            )
            .map_err(anyhow::Error::from)
        },
    )
}

/// `summary.json` payload for `personalize`.
#[derive(serde::Serialize)]
struct PersonalizeSummary<'a> {
    command: &'a str,
    source_checkpoint: String,
    data: String,
    steps: usize,
    lambda_p: f64,
    skipped_unmapped: usize,
    shared: Option<TestReport>,
    personalized: Option<TestReport>,
    shared_buckets: Vec<cel_core::eval::BucketRow>,
    personalized_buckets: Vec<cel_core::eval::BucketRow>,
}

fn cmd_personalize(args: PersonalizeArgs) -> Result<()> {
    let mut defaults = RunConfig::default_cel();
    defaults.steps = 50;
    let rc = build_config(defaults, &args.hyper)?;
    init_threads(rc.threads)?;
    let base = load_checkpoint(&args.from)?;
    let maps = sidecar_maps(&args.from)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let (store, skipped_unmapped) = load_dataset_with_maps(&args.data.data, format, maps)?;
    check_dims(&base, &store)?;
    let out = OutDir::create(&args.out)?;
    write_maps(&out, &store)?;

    let plan = holdout_plan(args.holdout)?;
    let mut splits = make_splits(&store, &plan, rc.hp.seed)?;
    let (_, train, test) = splits.remove(0);

    let scorer = NmfScorer;
    let table = personalize(&base, &scorer, DataView::Full(&train), &rc.hp, rc.steps);
    let personal = personalized_model(&base, &table);
    let ckpt_path = out.path("personalized.cel");
    save_checkpoint(&personal, &ckpt_path)?;
    let personal = load_checkpoint(&ckpt_path)?;

    let auc_threshold = args.eval.auc_threshold.unwrap_or(4.0);
    let mut shared_report = None;
    let mut personal_report = None;
    let mut shared_buckets = Vec::new();
    let mut personal_buckets = Vec::new();
    if let Some(test_store) = &test {
        let (shared, kept) =
            evaluate(&base, &scorer, &train, test_store.interactions(), auc_threshold)?;
        let (personalized, _) =
            evaluate(&personal, &scorer, &train, test_store.interactions(), auc_threshold)?;
        if !kept.is_empty() {
            write_interactions_csv(&out, "test.csv", &train, &kept)?;
            let degrees = train.item_degrees();
            shared_buckets = warmth_buckets(
                |u, j| base.predict(&scorer, u, j),
                &degrees,
                &kept,
                &DEFAULT_BUCKET_EDGES,
            );
            personal_buckets = warmth_buckets(
                |u, j| personal.predict(&scorer, u, j),
                &degrees,
                &kept,
                &DEFAULT_BUCKET_EDGES,
            );
        }
        shared_report = shared;
        personal_report = personalized;
    }

    if let (Some(s), Some(p)) = (&shared_report, &personal_report) {
        println!("shared_mse={} personalized_mse={}", s.mse, p.mse);
    }
    let summary = PersonalizeSummary {
        command: "personalize",
        source_checkpoint: args.from.display().to_string(),
        data: args.data.data.display().to_string(),
        steps: rc.steps,
        lambda_p: rc.hp.lambda_p,
        skipped_unmapped,
        shared: shared_report,
        personalized: personal_report,
        shared_buckets,
        personalized_buckets: personal_buckets,
    };
    write_summary(&out, &summary)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn parse_buckets(spec: Option<&str>) -> Result<Vec<u64>> {
    match spec {
        None => Ok(DEFAULT_BUCKET_EDGES.to_vec()),
        Some(s) => s
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u64>()
                    .with_context(|| format!("bad bucket edge '{tok}'"))
            })
            .collect(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let maps = sidecar_maps(&args.model)?;
    let format: DatasetFormat = args.data.format.parse()?;
    let (store, skipped_unmapped) =
        load_dataset_with_maps(&args.data.data, format, maps.clone())?;
    check_dims(&model, &store)?;
    let scorer = NmfScorer;
    let predict = |u: u32, j: u32| model.predict(&scorer, u, j);
    let rows = store.interactions();
    let mse = cel_core::eval::mse(&predict, rows)?;
    println!("evaluated={}", rows.len());
    println!("skipped_unmapped={skipped_unmapped}");
    println!("mse={mse}");
    let threshold = args.eval.auc_threshold.unwrap_or(4.0);
    match cel_core::eval::auc(&predict, rows, threshold) {
        Ok(a) => println!("auc={a}"),
        Err(cel_core::CelError::SingleClass) => println!("auc=none"),
        Err(e) => return Err(e.into()),
    }
    if let Some(train_path) = &args.train {
        let (train_store, _) = load_dataset_with_maps(train_path, format, maps)?;
        let degrees = train_store.item_degrees();
        let edges = parse_buckets(args.buckets.as_deref())?;
        for row in warmth_buckets(&predict, &degrees, rows, &edges) {
            let hi = row.hi.map_or("inf".to_string(), |h| h.to_string());
            let mse = row.mse.map_or("none".to_string(), |m| m.to_string());
            println!(
                "bucket lo={} hi={hi} mse={mse} items={} interactions={}",
                row.lo, row.items, row.interactions
            );
        }
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    println!("n_users={}", model.n_users());
    println!("n_items={}", model.n_items());
    println!("m_q={}", model.m_q());
    println!("compression_ratio={}", model.m_q() as f64 / model.n_items() as f64);
    let (frac, zero_rows) = scattered_fraction(&model.b_q);
    println!("scattered_fraction={frac}");
    println!("zero_rows={zero_rows}");
    let counts = model.member_counts();
    let min = counts.iter().min().copied().unwrap_or(0);
    let max = counts.iter().max().copied().unwrap_or(0);
    println!("members_min={min}");
    println!("members_max={max}");
    if let Some(genre_path) = &args.genres {
        let maps = sidecar_maps(&args.model)?;
        let table = load_genres(genre_path)?;
        let ge = genre_entropy(&model.assign, model.m_q(), &maps.items, &table);
        println!("genre_entropy={}", ge.value);
        println!("genre_entropy_magnitude={}", ge.magnitude);
        println!("genre_missing_items={}", ge.missing_items);
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let out = OutDir::create(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    match args.stream {
        Some(d_total) => {
            let store = generate_synthetic_stream(d_total, args.users_per, args.items_per, &mut rng);
            write_interactions_csv(&out, "ratings.csv", &store, store.interactions())?;
            println!(
                "wrote {} ({} interactions, {} users, {} items)",
                out.path("ratings.csv").display(),
                store.len(),
                store.n_users(),
                store.n_items()
            );
        }
        None => {
            let synth = generate_synthetic(
                args.users,
                args.items,
                args.clusters,
                args.dim,
                args.noise,
                args.fraction,
                &mut rng,
            )?;
            write_interactions_csv(&out, "ratings.csv", &synth.store, synth.store.interactions())?;
            let maps = synth.store.id_maps();
            let mut labels = String::new();
            for (j, &k) in synth.true_assign.iter().enumerate() {
                labels.push_str(&format!("{}\t{k}\n", maps.items.raw(j as u32)));
            }
            out.write("labels.tsv", labels.as_bytes())?;
            println!(
                "wrote {} ({} interactions, {} users, {} items, {} clusters)",
                out.path("ratings.csv").display(),
                synth.store.len(),
                synth.store.n_users(),
                synth.store.n_items(),
                args.clusters
            );
        }
    }
    Ok(())
}
