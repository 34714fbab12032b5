use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cald_core::consistency::{EmptyImagePolicy, MetricVariant};
use cald_core::distribution::CountMode;
use cald_core::io::{parse_labels, parse_predictions, write_scores, write_selection, DatasetManifest};
use cald_core::pipeline::{score_images, PoolState, SelectionConfig, SelectionError};
use cald_core::sim::{run_experiment, ExperimentConfig, SimError, Strategy};
use cald_core::ImageId;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const FILE_FORMATS: &str = "\
File formats (one JSON object per line unless noted):
  manifest.json (single JSON object)
    {\"class_names\": [\"car\", \"person\"], \"image_ids\": [\"img1\", ...],
     \"augmentations\": {\"D\": {\"ratio\": 0.8}, \"R\": {\"degrees\": 5}}}
    image_ids is optional; augmentations overrides per-tag parameters
    (tags: F flip, C cutout, D downsize, R rotation, G gaussian noise, S salt-pepper).
  predictions.jsonl
    {\"image_id\": \"img1\", \"augmentation\": \"original\" | \"F\" | \"C\" | ...,
     \"width\": 640, \"height\": 480,
     \"detections\": [{\"box\": [x_min, y_min, x_max, y_max], \"scores\": {\"car\": 0.9}}]}
    boxes are in the frame of that augmented image; absent classes score 0.
  labels.jsonl
    {\"image_id\": \"img1\", \"objects\": [{\"class\": \"car\", \"box\": [10, 20, 50, 60]}]}
  scores.jsonl (written by `score`, ascending by metric_M, ties by image_id)
    {\"image_id\": \"img1\", \"metric_M\": 0.12, \"no_references\": false,
     \"per_augmentation\": {\"F\": 0.1, \"C\": 0.14}}
  selection.jsonl (written by `select`)
    header: {\"format\": \"cald-selection\", \"version\": 1, \"fields\": [...]}
    rows:   {\"cycle\": 1, \"rank\": 1, \"image_id\": \"img7\", \"metric_M\": 0.05,
             \"js_mutual\": 0.31, \"stage\": \"initial\" | \"final\"}
  metrics CSV (written by `simulate`)
    strategy,seed,cycle,mean_error,balance_js,mean_M_selected,mean_M_labeled

Config file (--config, TOML; flags given on the command line win):
  beta = 1.3
  expansion_ratio = 0.2
  budget_per_cycle = 500
  cycles = 1
  retention_threshold = 0.1
  metric_variant = \"min\"            # or \"mean\"
  default_m_policy = \"beta\"         # or \"zero\"
  count_mode = \"raw_counts\"         # or \"normalized_counts\"
  augmentations = \"FCDR\"

Exit codes: 0 success, 1 usage or configuration error, 2 data error.";

#[derive(Parser, Debug)]
#[command(name = "cald", version, about = "Consistency-based sample selection for object detection")]
#[command(after_long_help = FILE_FORMATS)]
struct Cli {
    /// TOML file with selection settings
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for scoring and simulation (output does not depend on it)
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every image in a predictions file and write per-image metrics
    #[command(after_long_help = FILE_FORMATS)]
    Score(ScoreArgs),
    /// Run one two-stage selection over the unlabeled images
    #[command(after_long_help = FILE_FORMATS)]
    Select(SelectArgs),
    /// Run selection strategies on the synthetic world and report metrics
    #[command(after_long_help = FILE_FORMATS)]
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Min,
    Mean,
}

impl From<Variant> for MetricVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Min => MetricVariant::Min,
            Variant::Mean => MetricVariant::Mean,
        }
    }
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// Base point the consistency is compared against, in (0, 2) [default: 1.3]
    #[arg(long)]
    beta: Option<f64>,

    /// How per-prediction distances combine within an augmentation [default: min]
    #[arg(long, value_enum)]
    variant: Option<Variant>,

    /// Augmentation tags to use, e.g. FCDR [default: FCDR]
    #[arg(long, value_name = "TAGS")]
    augmentations: Option<String>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Dataset manifest (JSON)
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Detector predictions (JSON lines)
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,

    #[command(flatten)]
    scoring: ScoringArgs,

    /// Output file; standard output when omitted
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Dataset manifest (JSON)
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Detector predictions (JSON lines)
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,

    /// Labels of the already-labeled images (JSON lines); every other image is unlabeled
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,

    /// Images to select [default: 500]
    #[arg(long)]
    budget: Option<usize>,

    /// Extra fraction of the budget kept by the first stage [default: 0.2]
    #[arg(long)]
    expansion: Option<f64>,

    #[command(flatten)]
    scoring: ScoringArgs,

    /// Output file; standard output when omitted
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// cald, random, cald_mean_variant or cald_beta:<beta>
    #[arg(long, default_value = "cald")]
    strategy: String,

    /// Selection cycles per seed [default: 2]
    #[arg(long)]
    cycles: Option<usize>,

    /// Images selected per cycle [default: 100]
    #[arg(long)]
    budget: Option<usize>,

    /// Extra fraction of the budget kept by the first stage [default: 0.2]
    #[arg(long)]
    expansion: Option<f64>,

    /// Number of seeds to run, starting at --seed
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,

    /// First seed
    #[arg(long, env = "CALD_SEED", default_value_t = 0)]
    seed: u64,

    /// Images in the synthetic world
    #[arg(long, default_value_t = 2000)]
    images: usize,

    /// Classes in the synthetic world
    #[arg(long, default_value_t = 20)]
    classes: usize,

    /// Class frequencies fall off as rank^-imbalance
    #[arg(long, default_value_t = 1.0)]
    imbalance: f64,

    /// Randomly chosen images labeled before the first cycle
    #[arg(long, default_value_t = 100)]
    initial: usize,

    /// Per-seed metrics as CSV
    #[arg(long, value_name = "PATH")]
    out_csv: Option<PathBuf>,
}

/// Keys accepted in a `--config` file. Augmentations are given as tag letters.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    beta: Option<f64>,
    expansion_ratio: Option<f64>,
    budget_per_cycle: Option<usize>,
    cycles: Option<usize>,
    augmentations: Option<String>,
    retention_threshold: Option<f64>,
    metric_variant: Option<MetricVariant>,
    default_m_policy: Option<EmptyImagePolicy>,
    count_mode: Option<CountMode>,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome<T> = Result<T, Failure>;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn selection_failure(e: SelectionError) -> Failure {
    match e {
        SelectionError::InvalidConfig(_)
        | SelectionError::InsufficientCandidates { .. }
        | SelectionError::Geometry(_) => usage(e),
        _ => data(e),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Selection(e) => selection_failure(e),
        SimError::InvalidParameter(_) | SimError::UnknownStrategy(_) => usage(e),
        _ => data(e),
    }
}

fn parse_tags(tags: &str) -> Outcome<Vec<cald_core::AugmentationSpec>> {
    cald_core::AugmentationSpec::parse_combination(tags)
        .map_err(|e| usage(anyhow!("--augmentations {tags:?}: {e}")))
}

fn load_config(path: Option<&Path>) -> Outcome<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    toml::from_str(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)
}

impl ConfigFile {
    /// `base` with every key present in the file replaced.
    fn over(&self, mut config: SelectionConfig) -> Outcome<SelectionConfig> {
        if let Some(v) = self.beta {
            config.beta = v;
        }
        if let Some(v) = self.expansion_ratio {
            config.expansion_ratio = v;
        }
        if let Some(v) = self.budget_per_cycle {
            config.budget_per_cycle = v;
        }
        if let Some(v) = self.cycles {
            config.cycles = v;
        }
        if let Some(v) = &self.augmentations {
            config.augmentations = parse_tags(v)?;
        }
        if let Some(v) = self.retention_threshold {
            config.retention_threshold = v;
        }
        if let Some(v) = self.metric_variant {
            config.metric_variant = v;
        }
        if let Some(v) = self.default_m_policy {
            config.default_m_policy = v;
        }
        if let Some(v) = self.count_mode {
            config.count_mode = v;
        }
        Ok(config)
    }
}

fn apply_scoring(config: &mut SelectionConfig, args: &ScoringArgs) -> Outcome<()> {
    if let Some(beta) = args.beta {
        config.beta = beta;
    }
    if let Some(variant) = args.variant {
        config.metric_variant = variant.into();
    }
    if let Some(tags) = &args.augmentations {
        config.augmentations = parse_tags(tags)?;
    }
    Ok(())
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(data)
}

fn read_manifest(path: &Path) -> Outcome<DatasetManifest> {
    DatasetManifest::from_reader(open(path)?)
        .with_context(|| path.display().to_string())
        .map_err(data)
}

/// Writes to `path` or standard output. The file is only created once the
/// content is ready, so failed runs leave nothing behind.
fn emit(path: Option<&Path>, content: &[u8]) -> Outcome<()> {
    match path {
        Some(path) => {
            let mut out = BufWriter::new(
                File::create(path)
                    .with_context(|| format!("creating {}", path.display()))
                    .map_err(data)?,
            );
            out.write_all(content)
                .and_then(|_| out.flush())
                .with_context(|| format!("writing {}", path.display()))
                .map_err(data)
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(content).and_then(|_| out.flush()).map_err(data)
        }
    }
}

fn cmd_score(args: &ScoreArgs, file: &ConfigFile) -> Outcome<()> {
    let mut config = file.over(SelectionConfig::default())?;
    apply_scoring(&mut config, &args.scoring)?;
    config.validate().map_err(selection_failure)?;
    let manifest = read_manifest(&args.manifest)?;
    let predictions = parse_predictions(open(&args.predictions)?, &manifest)
        .with_context(|| args.predictions.display().to_string())
        .map_err(data)?;
    let ids: Vec<ImageId> = predictions.keys().cloned().collect();
    let scored = score_images(&ids, &predictions, manifest.num_classes(), &config).map_err(selection_failure)?;
    let infos: Vec<_> = scored.into_iter().map(|s| s.information).collect();
    let mut buf = Vec::new();
    write_scores(&mut buf, &infos).map_err(data)?;
    emit(args.out.as_deref(), &buf)
}

fn cmd_select(args: &SelectArgs, file: &ConfigFile) -> Outcome<()> {
    let mut config = file.over(SelectionConfig::default())?;
    apply_scoring(&mut config, &args.scoring)?;
    if let Some(budget) = args.budget {
        config.budget_per_cycle = budget;
    }
    if let Some(expansion) = args.expansion {
        config.expansion_ratio = expansion;
    }
    config.validate().map_err(selection_failure)?;

    let manifest = read_manifest(&args.manifest)?;
    let predictions = parse_predictions(open(&args.predictions)?, &manifest)
        .with_context(|| args.predictions.display().to_string())
        .map_err(data)?;
    let labels = match &args.labels {
        Some(path) => parse_labels(open(path)?, &manifest)
            .with_context(|| path.display().to_string())
            .map_err(data)?,
        None => Default::default(),
    };

    let universe: Vec<ImageId> = if manifest.image_ids.is_empty() {
        predictions.keys().chain(labels.keys()).cloned().collect()
    } else {
        if let Some(stray) = labels.keys().find(|id| !manifest.image_ids.contains(id)) {
            return Err(data(anyhow!("labeled image {stray} is not listed in the manifest")));
        }
        manifest.image_ids.clone()
    };
    let unlabeled = universe.into_iter().filter(|id| !labels.contains_key(id));
    let pool = PoolState::new(manifest.num_classes(), labels.clone(), unlabeled).map_err(selection_failure)?;
    if config.budget_per_cycle > pool.unlabeled().len() {
        return Err(selection_failure(SelectionError::InsufficientCandidates {
            budget: config.budget_per_cycle,
            available: pool.unlabeled().len(),
        }));
    }
    let report = pool.plan_cycle(&predictions, &config).map_err(selection_failure)?;
    let mut buf = Vec::new();
    write_selection(&mut buf, std::slice::from_ref(&report)).map_err(data)?;
    emit(args.out.as_deref(), &buf)
}

fn cmd_simulate(args: &SimulateArgs, file: &ConfigFile) -> Outcome<()> {
    let strategy: Strategy = args.strategy.parse().map_err(sim_failure)?;
    let defaults = ExperimentConfig::default();
    let mut config = file.over(defaults.selection.clone())?;
    if let Some(cycles) = args.cycles {
        config.cycles = cycles;
    }
    if let Some(budget) = args.budget {
        config.budget_per_cycle = budget;
    }
    if let Some(expansion) = args.expansion {
        config.expansion_ratio = expansion;
    }
    let experiment = ExperimentConfig {
        num_images: args.images,
        num_classes: args.classes,
        imbalance_exponent: args.imbalance,
        initial_labeled: args.initial,
        selection: config,
        ..defaults
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed.wrapping_add(i)).collect();
    let table = run_experiment(strategy, &experiment, &seeds).map_err(sim_failure)?;

    if let Some(path) = &args.out_csv {
        let mut buf = Vec::new();
        table.write_csv(&mut buf).map_err(sim_failure)?;
        emit(Some(path), &buf)?;
    }
    let mut text = format!(
        "{:<18} {:>5} {:>5}  {:<16}  {:<16}  {:<16}  {}\n",
        "strategy", "cycle", "seeds", "mean_error", "balance_js", "mean_M_selected", "mean_M_labeled"
    );
    for s in table.summary() {
        text.push_str(&format!(
            "{:<18} {:>5} {:>5}  {}  {}  {}  {}\n",
            s.strategy, s.cycle, s.seeds, s.mean_error, s.balance_js, s.mean_m_selected, s.mean_m_labeled
        ));
    }
    emit(None, text.as_bytes())
}

fn run(cli: Cli) -> Outcome<()> {
    let config = load_config(cli.config.as_deref())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        pool = pool.num_threads(jobs as usize);
    }
    let pool = pool.build().map_err(usage)?;
    pool.install(|| match &cli.command {
        Command::Score(args) => cmd_score(args, &config),
        Command::Select(args) => cmd_select(args, &config),
        Command::Simulate(args) => cmd_simulate(args, &config),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
