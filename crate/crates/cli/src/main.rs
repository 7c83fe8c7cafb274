mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fsml_core::diagnostics::{
    class_feature_report, metric_agreement, score_distribution_report, Binning, DEFAULT_BINS,
};
use fsml_core::episode::warn_ineligible;
use fsml_core::eval::{
    eval_inductive, eval_transductive, paired_difference, AccuracySummary, Classifier, EpisodeSettings,
    ImbalanceSettings,
};
use fsml_core::fusion::{collect_scores, fit_fusion, FusionModel, MetricStores};
use fsml_core::metrics::{Metric, DEFAULT_LAMBDA_MAX_EVAL};
use fsml_core::store::{load_store, EmbeddingStore, SplitManifest};
use fsml_core::synthetic::{generate, SyntheticSpec};
use fsml_core::transductive::{QueryAggregate, TransductiveConfig, DEFAULT_ETA, DEFAULT_ITERS};

use report::{emit, write_atomic, RunReport, Timing};

#[derive(Debug, Parser)]
#[command(name = "fsml", version, about = "Few-shot evaluation over pre-extracted embeddings")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, env = "FSML_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inductive accuracy of one or more metrics on balanced episodes.
    Eval(EvalArgs),
    /// Inductive MLL against transductive refinement on Dirichlet-imbalanced episodes.
    Transductive(TransductiveArgs),
    /// Fit the Gaussian score-fusion model on validation episodes.
    FitFusion(FitFusionArgs),
    /// Feature histograms against exponential fits, or score distributions, as CSV.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic exponential store and its true rates.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct StoreArgs {
    /// FSEM store used for every metric without a dedicated store.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    euc_store: Option<PathBuf>,
    #[arg(long)]
    cos_store: Option<PathBuf>,
    #[arg(long)]
    mll_store: Option<PathBuf>,
    /// Split manifest; without one the whole store is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_MAX_EVAL)]
    lambda_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Euclid,
    Cosine,
    Mll,
    Combined,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Comma-separated list of metrics.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mll")]
    metric: Vec<MetricArg>,
    /// Queries per class.
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Fusion model, required for `combined`.
    #[arg(long)]
    fusion: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    report_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AggregateArg {
    Weighted,
    RawSum,
}

#[derive(Debug, Args, Serialize)]
struct TransductiveArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = 2.0)]
    dirichlet_a: f64,
    #[arg(long, default_value_t = 75)]
    query_total: usize,
    /// How assigned queries are pooled into a class's update target.
    #[arg(long, value_enum, default_value = "weighted")]
    aggregate: AggregateArg,
    #[serde(skip)]
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    report_timing: bool,
}

#[derive(Debug, Args, Serialize)]
struct FitFusionArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 2000)]
    fit_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_MAX_EVAL)]
    lambda_max: f64,
    /// Where the model JSON is written.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    stores: StoreArgs,
    /// Report score distributions over sampled episodes instead of one feature.
    #[arg(long, conflicts_with_all = ["class", "feature", "bin_size"])]
    scores: bool,
    #[arg(long, required_unless_present = "scores")]
    class: Option<u32>,
    #[arg(long, required_unless_present = "scores")]
    feature: Option<usize>,
    /// Number of bins over the observed range.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Explicit bin width; overrides --bins.
    #[arg(long)]
    bin_size: Option<f64>,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_MAX_EVAL)]
    lambda_max: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, visible_alias = "samples-per-class", default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda_lo: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store path; true rates go to `<stem>.truth.json` beside it.
    #[arg(long)]
    out: PathBuf,
}

/// Stores for the three metrics, each restricted to the requested split.
struct LoadedStores {
    euclid: Option<EmbeddingStore>,
    cosine: Option<EmbeddingStore>,
    mll: Option<EmbeddingStore>,
    shared: Option<EmbeddingStore>,
}

impl LoadedStores {
    fn load(args: &StoreArgs, default_split: &str) -> Result<Self> {
        let manifest = args
            .manifest
            .as_ref()
            .map(|p| SplitManifest::load(p).with_context(|| format!("loading manifest {}", p.display())))
            .transpose()?;
        let split = args.split.as_deref().unwrap_or(default_split);
        let open = |path: &Option<PathBuf>| -> Result<Option<EmbeddingStore>> {
            let Some(path) = path else { return Ok(None) };
            let store = load_store(path).with_context(|| format!("loading store {}", path.display()))?;
            let store = match &manifest {
                Some(m) => {
                    m.validate_against(&store)?;
                    store.restrict_to_split(m, split)?
                }
                None => store,
            };
            Ok(Some(store))
        };
        let loaded = Self {
            euclid: open(&args.euc_store)?,
            cosine: open(&args.cos_store)?,
            mll: open(&args.mll_store)?,
            shared: open(&args.store)?,
        };
        for (metric, slot) in [
            (Metric::Euclid, &loaded.euclid),
            (Metric::Cosine, &loaded.cosine),
            (Metric::Mll, &loaded.mll),
        ] {
            if slot.is_none() && loaded.shared.is_none() {
                bail!("no store for metric {metric}: pass --store or a per-metric store");
            }
        }
        Ok(loaded)
    }

    fn views(&self) -> MetricStores<'_> {
        fn pick<'s>(own: &'s Option<EmbeddingStore>, shared: &'s Option<EmbeddingStore>) -> &'s EmbeddingStore {
            own.as_ref().or(shared.as_ref()).expect("checked at load")
        }
        MetricStores {
            euclid: pick(&self.euclid, &self.shared),
            cosine: pick(&self.cosine, &self.shared),
            mll: pick(&self.mll, &self.shared),
        }
    }
}

fn single_store(args: &StoreArgs, default_split: &str) -> Result<EmbeddingStore> {
    let mut loaded = LoadedStores::load(args, default_split)?;
    Ok(loaded.mll.take().or(loaded.shared.take()).expect("checked at load"))
}

#[derive(Debug, Serialize)]
struct MetricResult {
    metric: MetricArg,
    #[serde(flatten)]
    summary: AccuracySummary,
}

fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let settings = episode_settings(&args.episode)?;
    ensure!(!args.metric.is_empty(), "at least one metric is required");
    let fusion = if args.metric.contains(&MetricArg::Combined) {
        let path = args.fusion.as_ref().context("metric `combined` requires --fusion")?;
        let model = FusionModel::load(path).with_context(|| format!("loading fusion model {}", path.display()))?;
        Some(model.classifier()?)
    } else {
        None
    };
    let loaded = LoadedStores::load(&args.stores, "test")?;
    let stores = loaded.views();
    warn_ineligible(stores.mll, settings.k_shot, args.queries);

    let mut results = Vec::new();
    for &metric in &args.metric {
        let classifier = match metric {
            MetricArg::Euclid => Classifier::Single(Metric::Euclid),
            MetricArg::Cosine => Classifier::Single(Metric::Cosine),
            MetricArg::Mll => Classifier::Single(Metric::Mll),
            MetricArg::Combined => Classifier::Combined(fusion.as_ref().expect("loaded above")),
        };
        let accuracies = eval_inductive(&stores, classifier, &settings, args.queries, args.episode.lambda_max)?;
        results.push(MetricResult {
            metric,
            summary: AccuracySummary::from_episodes(&accuracies),
        });
    }
    let elapsed = start.elapsed();
    eprintln!(
        "eval: {} episodes x {} metrics in {:.2?} on {threads} threads",
        settings.episodes,
        results.len(),
        elapsed
    );
    let report = RunReport {
        command: "eval",
        config: args,
        seed: settings.seed,
        results,
        timing: args.report_timing.then(|| Timing::new(elapsed, threads)),
    };
    emit(args.out.as_deref(), &report.to_json()?)
}

#[derive(Debug, Serialize)]
struct TransductiveResults {
    inductive_mll: AccuracySummary,
    transductive: AccuracySummary,
    mean_gain: f64,
    gain_standard_error: f64,
    max_count_deviation: f64,
}

fn cmd_transductive(args: &TransductiveArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let settings = episode_settings(&args.episode)?;
    let store = single_store(&args.stores, "test")?;
    // per-episode needs vary with the Dirichlet draw; warn at the balanced share
    warn_ineligible(&store, settings.k_shot, args.query_total.div_ceil(settings.n_way));
    let config = TransductiveConfig {
        lambda_max: args.episode.lambda_max,
        iters: args.iters,
        eta: args.eta,
        aggregate: match args.aggregate {
            AggregateArg::Weighted => QueryAggregate::WeightedAverage,
            AggregateArg::RawSum => QueryAggregate::RawSum,
        },
    };
    let imbalance = ImbalanceSettings {
        query_total: args.query_total,
        dirichlet_a: args.dirichlet_a,
    };
    let outcome = eval_transductive(&store, &settings, &imbalance, config)?;
    let (mean_gain, gain_standard_error) = paired_difference(&outcome.transductive, &outcome.inductive);
    let results = TransductiveResults {
        inductive_mll: AccuracySummary::from_episodes(&outcome.inductive),
        transductive: AccuracySummary::from_episodes(&outcome.transductive),
        mean_gain,
        gain_standard_error,
        max_count_deviation: outcome.max_count_deviation,
    };
    let elapsed = start.elapsed();
    eprintln!(
        "transductive: {} episodes in {:.2?} on {threads} threads",
        settings.episodes, elapsed
    );
    let report = RunReport {
        command: "transductive",
        config: args,
        seed: settings.seed,
        results,
        timing: args.report_timing.then(|| Timing::new(elapsed, threads)),
    };
    emit(args.out.as_deref(), &report.to_json()?)
}

fn cmd_fit_fusion(args: &FitFusionArgs) -> Result<()> {
    ensure!(args.fit_episodes > 0, "--fit-episodes must be positive");
    let loaded = LoadedStores::load(&args.stores, "val")?;
    let stores = loaded.views();
    warn_ineligible(stores.mll, args.k_shot, args.queries);
    let collected = collect_scores(
        &stores,
        args.n_way,
        args.k_shot,
        args.queries,
        args.fit_episodes,
        args.lambda_max,
        args.seed,
    )?;
    let mut model = fit_fusion(&collected.samples).context("fitting fusion model")?;
    model.degraded = stores.is_degraded();
    if model.degraded {
        log::warn!("all three metrics share one store; the fusion model is degraded");
    }
    let [euc, cos, mll] = &collected.predictions;
    let agreement = metric_agreement([euc, cos, mll])?;
    write_atomic(&args.out, model.to_json()?.as_bytes())?;
    eprintln!("{}", serde_json::to_string(&agreement)?);
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    if args.scores {
        return diagnose_scores(args);
    }
    let (class, feature) = match (args.class, args.feature) {
        (Some(c), Some(f)) => (c, f),
        _ => bail!("--class and --feature are required for a feature report"),
    };
    ensure!(args.bins > 0, "--bins must be positive");
    let store = single_store(&args.stores, "test")?;
    let binning = match args.bin_size {
        Some(b) => Binning::Width(b),
        None => Binning::Count(args.bins),
    };
    // the store is already split-restricted
    let report = class_feature_report(&store, None, class, feature, binning)?;
    emit(args.out.as_deref(), &report.to_csv())?;
    eprintln!("{}", serde_json::to_string(&report.fit)?);
    Ok(())
}

fn diagnose_scores(args: &DiagnoseArgs) -> Result<()> {
    ensure!(args.episodes > 0, "--episodes must be positive");
    let loaded = LoadedStores::load(&args.stores, "val")?;
    warn_ineligible(loaded.views().mll, args.k_shot, args.queries);
    let collected = collect_scores(
        &loaded.views(),
        args.n_way,
        args.k_shot,
        args.queries,
        args.episodes,
        args.lambda_max,
        args.seed,
    )?;
    let report = score_distribution_report(&collected.samples)?;
    emit(args.out.as_deref(), &report.to_csv())?;
    let [euc, cos, mll] = &collected.predictions;
    eprintln!("{}", serde_json::to_string(&metric_agreement([euc, cos, mll])?)?);
    Ok(())
}

fn truth_path(store_path: &Path) -> PathBuf {
    let stem = store_path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    let mut name = stem;
    name.push(".truth.json");
    store_path.with_file_name(name)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class,
        lambda_lo: args.lambda_lo,
        lambda_hi: args.lambda_hi,
        seed: args.seed,
    };
    let (store, truth) = generate(&spec)?;
    let truth_json = serde_json::to_string_pretty(&truth)?;
    let truth_out = truth_path(&args.out);
    write_atomic(&args.out, &store.to_bytes())?;
    if let Err(e) = write_atomic(&truth_out, truth_json.as_bytes()) {
        let _ = std::fs::remove_file(&args.out);
        return Err(e);
    }
    eprintln!(
        "synth: {} samples, dim {}, {} classes -> {}",
        store.len(),
        store.dim(),
        store.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn episode_settings(args: &EpisodeArgs) -> Result<EpisodeSettings> {
    let settings = EpisodeSettings {
        n_way: args.n_way,
        k_shot: args.k_shot,
        episodes: args.episodes,
        seed: args.seed,
    };
    settings.validate()?;
    ensure!(args.lambda_max > 0.0, "--lambda-max must be positive");
    Ok(settings)
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    let threads = pool.current_num_threads();
    pool.install(|| match &cli.command {
        Command::Eval(args) => cmd_eval(args, threads),
        Command::Transductive(args) => cmd_transductive(args, threads),
        Command::FitFusion(args) => cmd_fit_fusion(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Synth(args) => cmd_synth(args),
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_file_sits_next_to_store() {
        assert_eq!(truth_path(Path::new("/d/syn.fsem")), PathBuf::from("/d/syn.truth.json"));
        assert_eq!(truth_path(Path::new("plain")), PathBuf::from("plain.truth.json"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn metric_list_parses() {
        let cli = Cli::try_parse_from(["fsml", "eval", "--store", "s", "--metric", "euclid,mll"]).unwrap();
        let Command::Eval(args) = cli.command else {
            panic!("wrong command")
        };
        assert_eq!(args.metric, vec![MetricArg::Euclid, MetricArg::Mll]);
        assert_eq!(args.episode.episodes, 10_000);
        assert_eq!(args.episode.lambda_max, 40.0);
    }
}
