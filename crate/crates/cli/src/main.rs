use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itemkc::bkt::{generate_dataset, manifest_json, truth_csv, SimConfig};
use itemkc::clusterkit::{item_distance, kmeans_cluster, ward_cluster, DistanceMatrix, FeatureMatrix, KMeansOptions, Method, Metric};
use itemkc::dataset::{filter_learners, load_labels, load_responses, load_truth, Granularity, OrderMode};
use itemkc::evaluation::{ari, gap_statistic, select_k, wss, GapAlgorithm, GapOptions, GapRule};
use itemkc::io::{config_hash, write_with_header};
use itemkc::pipeline::{run_gap, run_pipeline, Combination, ConfigError, PipelineConfig, PipelineError};
use itemkc::similarity::{build_similarity_matrix, Measure, SimilarityMatrix, DEFAULT_MIN_SUPPORT};
use itemkc::Clustering;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const OUT_ENV: &str = "ITEMKC_OUTPUT_DIR";
const DEFAULT_OUT: &str = "itemkc-out";

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

type Outcome = Result<(), Failure>;

/// Item similarity, clustering and KC discovery from learner responses.
#[derive(Debug, Parser)]
#[command(name = "itemkc", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic response dataset with known KCs.
    Simulate(SimulateArgs),
    /// Build an item-by-item similarity matrix from responses.
    Similarity(SimilarityArgs),
    /// Turn a similarity matrix into an item distance matrix.
    Distance(DistanceArgs),
    /// Cluster the items of a similarity matrix.
    Cluster(ClusterArgs),
    /// Score a clustering against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Estimate the number of clusters with the Gap statistic.
    Gap(GapArgs),
    /// Run the full study described by a config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Pipeline config whose [simulation] section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learners: Option<usize>,
    #[arg(long)]
    kcs: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    contiguous_items: Option<usize>,
    #[arg(long)]
    shuffle_kc_order: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimilarityArgs {
    /// Response CSV: learner_id,item_id,position,correct.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long, default_value = "fixed")]
    order_mode: OrderMode,
    #[arg(long, default_value = "kappa_learning")]
    measure: Measure,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    min_support: u64,
    /// Drop learners with fewer attempts than this.
    #[arg(long, default_value_t = 0)]
    min_items: usize,
    /// Drop learners whose success rate is below this.
    #[arg(long, default_value_t = 0.0)]
    min_success: f64,
    /// Output CSV (defaults to similarity_<measure>.csv in the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistanceArgs {
    /// Similarity matrix CSV.
    #[arg(long)]
    similarity: PathBuf,
    #[arg(long, default_value = "pearson")]
    metric: Metric,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Similarity matrix CSV.
    #[arg(long)]
    similarity: PathBuf,
    /// ward-pearson, ward-euclidean or kmeans-euclidean.
    #[arg(long, default_value = "ward-pearson")]
    clustering: Combination,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = itemkc::clusterkit::DEFAULT_RESTARTS)]
    restarts: usize,
    /// Required for K-means.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV: item_id,cluster.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Clustering CSV: item_id,cluster.
    #[arg(long)]
    clustering: PathBuf,
    /// Truth CSV: item_id,kc.
    #[arg(long, conflicts_with = "labels")]
    truth: Option<PathBuf>,
    /// Expert label CSV, read at --granularity.
    #[arg(long, requires = "granularity")]
    labels: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Distance matrix CSV; adds the clustering's WSS to the output.
    #[arg(long)]
    distance: Option<PathBuf>,
    #[arg(long, default_value = "pearson")]
    metric: Metric,
}

#[derive(Debug, Args)]
struct GapArgs {
    /// Pipeline config; computes the Gap statistic for each configured measure.
    #[arg(long, conflicts_with = "similarity")]
    config: Option<PathBuf>,
    /// A single similarity matrix CSV instead of a config.
    #[arg(long)]
    similarity: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    references: Option<usize>,
    #[arg(long)]
    clustering: Option<Combination>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag, then config, then the environment, then the built-in default.
fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn args_hash(args: &impl std::fmt::Debug) -> String {
    config_hash(&BTreeMap::from([("args", format!("{args:?}"))]))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, hash: &str, body: &str) -> Outcome {
    write_with_header(path, hash, body).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_similarity(path: &Path) -> Result<SimilarityMatrix, Failure> {
    // The measure is not recorded in the CSV; it does not affect clustering.
    SimilarityMatrix::from_csv(&read(path)?, Measure::KappaLearning).map_err(data_err)
}

fn simulate(args: SimulateArgs) -> Outcome {
    let cfg = args.config.as_deref().map(PipelineConfig::load).transpose()?;
    let seed = args
        .seed
        .or(cfg.as_ref().and_then(|c| c.seed))
        .ok_or_else(|| Failure::Config("a seed is required (--seed or `seed` in the config)".into()))?;
    let mut sc = match cfg.as_ref().and_then(|c| c.simulation.as_ref()) {
        Some(s) => s.sim_config(seed),
        None => SimConfig::with_seed(seed),
    };
    if let Some(v) = args.learners {
        sc.learners = v;
    }
    if let Some(v) = args.kcs {
        sc.kcs = v;
    }
    if let Some(v) = args.items {
        sc.items = v;
    }
    if let Some(v) = args.contiguous_items {
        sc.contiguous_items = v;
    }
    sc.shuffle_kc_order |= args.shuffle_kc_order;
    sc.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let sim = generate_dataset(&sc).map_err(|e| Failure::Config(e.to_string()))?;
    let dir = output_dir(args.out.as_deref(), cfg.as_ref().and_then(|c| c.output_dir.as_deref()));
    let hash = config_hash(&sc);
    write(&dir.join("responses.csv"), &hash, &sim.dataset.to_csv_string())?;
    write(&dir.join("truth.csv"), &hash, &truth_csv(&sim.truth))?;
    std::fs::write(dir.join("manifest.json"), manifest_json(&sc)).map_err(data_err)?;
    println!("{} learners × {} items written to {}", sc.learners, sc.items, dir.display());
    Ok(())
}

fn similarity(args: SimilarityArgs) -> Outcome {
    let raw = load_responses(&args.responses, args.order_mode).map_err(data_err)?;
    let ds = filter_learners(&raw, args.min_items, args.min_success);
    let m1 = build_similarity_matrix(&ds, args.measure, args.min_support);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_dir(None, None).join(format!("similarity_{}.csv", args.measure)));
    if m1.undefined_count() > 0 {
        log::warn!("{} item pairs below min_support {}", m1.undefined_count() / 2, args.min_support);
    }
    write(&out, &args_hash(&args), &m1.to_csv())
}

fn distance(args: DistanceArgs) -> Outcome {
    let m1 = load_similarity(&args.similarity)?;
    let d = item_distance(&m1, args.metric);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_dir(None, None).join(format!("distance_{}.csv", args.metric)));
    write(&out, &args_hash(&args), &d.to_csv())
}

fn cluster(args: ClusterArgs) -> Outcome {
    let m1 = load_similarity(&args.similarity)?;
    if args.k == 0 || args.k > m1.n() {
        return Err(Failure::Config(format!("k = {} outside 1..={}", args.k, m1.n())));
    }
    let hash = args_hash(&args);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_dir(None, None).join(format!("clusters_{}.csv", args.clustering)));
    let c = match args.clustering.method {
        Method::Ward => ward_cluster(&item_distance(&m1, args.clustering.metric), args.k).map_err(data_err)?,
        Method::Kmeans => {
            let seed = args.seed.ok_or_else(|| Failure::Config("K-means needs --seed".into()))?;
            if args.restarts == 0 {
                return Err(Failure::Config("--restarts must be positive".into()));
            }
            let x = FeatureMatrix::from_similarity(&m1);
            let c = kmeans_cluster(m1.items.clone(), &x, args.k, &KMeansOptions::new(args.restarts, seed)).map_err(data_err)?;
            let mut runs = String::from("restart,wss,iterations\n");
            for r in &c.restarts {
                runs.push_str(&format!("{},{:?},{}\n", r.restart, r.wss, r.iterations));
            }
            write(&out.with_extension("restarts.csv"), &hash, &runs)?;
            c
        }
    };
    write(&out, &hash, &c.to_csv())
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    let truth = match (&args.truth, &args.labels, args.granularity) {
        (Some(t), _, _) => load_truth(t).map_err(data_err)?,
        (None, Some(l), Some(g)) => load_labels(l).map_err(data_err)?.prune_singletons().labels(g).clone(),
        _ => return Err(Failure::Config("give --truth, or --labels with --granularity".into())),
    };
    let c = Clustering::from_csv(&read(&args.clustering)?, Method::Ward).map_err(data_err)?;
    println!("ari={:?}", ari(&truth, &c).map_err(data_err)?);
    if let Some(path) = &args.distance {
        let d = DistanceMatrix::from_csv(&read(path)?, args.metric).map_err(data_err)?;
        if d.items != c.items {
            return Err(Failure::Data("distance matrix and clustering list different items".into()));
        }
        println!("wss={:?}", wss(&d, &c.assignment));
    }
    Ok(())
}

fn gap(args: GapArgs) -> Outcome {
    if let Some(path) = &args.config {
        let mut cfg = PipelineConfig::load(path)?;
        if let Some(s) = args.seed {
            cfg.seed = Some(s);
        }
        if let Some(v) = args.k_max {
            cfg.gap.k_max = v;
        }
        if let Some(v) = args.references {
            cfg.gap.references = v;
        }
        if let Some(c) = args.clustering {
            cfg.clusterings = vec![c];
        }
        let (report, files) = run_gap(&cfg)?;
        let dir = output_dir(args.out.as_deref(), cfg.output_dir.as_deref());
        std::fs::create_dir_all(&dir).map_err(data_err)?;
        for (name, body) in &files {
            if name.ends_with(".csv") {
                write(&dir.join(name), &report.config_hash, body)?;
            } else {
                std::fs::write(dir.join(name), body).map_err(data_err)?;
            }
        }
        print!("{}", files["gap_selection.csv"]);
        return Ok(());
    }
    let Some(path) = &args.similarity else {
        return Err(Failure::Config("give --config or --similarity".into()));
    };
    let seed = args.seed.ok_or_else(|| Failure::Config("the Gap statistic needs --seed".into()))?;
    let m1 = load_similarity(path)?;
    let combo = args.clustering.unwrap_or(Combination::WARD_PEARSON);
    let k_max = args.k_max.unwrap_or(70).min(m1.n());
    if k_max < 2 {
        return Err(Failure::Config("--k-max must be at least 2".into()));
    }
    let references = args.references.unwrap_or(100);
    if references < 2 {
        return Err(Failure::Config("--references must be at least 2".into()));
    }
    let mut opts = GapOptions::new(k_max, references, seed);
    opts.algorithm = match combo.method {
        Method::Ward => GapAlgorithm::Ward { metric: combo.metric },
        Method::Kmeans => GapAlgorithm::Kmeans { restarts: 10 },
    };
    let profile = gap_statistic(&m1, &opts).map_err(data_err)?;
    let out = args.out.clone().unwrap_or_else(|| output_dir(None, None).join("gap.csv"));
    write(&out, &args_hash(&args), &profile.to_csv())?;
    for rule in GapRule::ALL {
        println!("{rule}={}", select_k(&profile, rule));
    }
    Ok(())
}

fn pipeline(args: PipelineArgs) -> Outcome {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(k) = args.k {
        cfg.k = Some(k);
        cfg.granularity = None;
        cfg.gap_rule = None;
    }
    if let Some(r) = args.restarts {
        cfg.restarts = r;
    }
    if let Some(r) = args.repetitions {
        match cfg.simulation.as_mut() {
            Some(s) => s.repetitions = r,
            None => return Err(Failure::Config("--repetitions applies to simulation configs only".into())),
        }
    }
    let dir = output_dir(args.out.as_deref(), cfg.output_dir.as_deref());
    let artifacts = run_pipeline(&cfg)?;
    artifacts.write(&dir).map_err(data_err)?;
    print!("{}", artifacts.files["ari_table.csv"]);
    log::info!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Similarity(a) => similarity(a),
        Command::Distance(a) => distance(a),
        Command::Cluster(a) => cluster(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gap(a) => gap(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
