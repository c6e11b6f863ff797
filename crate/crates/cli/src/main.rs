use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zonefuse::config::PipelineConfig;
use zonefuse::pipeline::{Pipeline, Stage, StageOutcome};
use zonefuse::synth::{gen_synthetic_city, synthetic_config_text, SynthCitySpec};
use zonefuse::{Error, Result};

#[derive(Parser)]
#[command(name = "zonefuse", version, about = "Discover urban functional zones from GPS trajectories and POIs")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded numeric paths for reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config file (flat `key = value`).
    #[arg(long)]
    config: PathBuf,

    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Override any config key, e.g. `--set beta=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Recompute even if artifacts are current.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    level: Option<usize>,
}

#[derive(Args)]
struct GpsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    gps: Option<PathBuf>,
    /// Stay radius in meters.
    #[arg(long)]
    stay_radius_m: Option<f64>,
    /// Minimum stay duration in seconds.
    #[arg(long)]
    stay_seconds: Option<i64>,
}

#[derive(Args)]
struct PoiArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pois: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    common: Common,
    /// `crf` or `kmeans`.
    #[arg(long)]
    method: Option<String>,
    /// `raw_poi`, `tfidf`, `svd_poi`, `latent_v` or `latent_z`.
    #[arg(long)]
    feature: Option<String>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for gps.csv, pois.csv, categories.csv, truth_labels.csv and config.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    /// Fraction of regions that receive POIs.
    #[arg(long, default_value_t = 0.1)]
    obs_rate: f64,
    /// Simulated weekdays.
    #[arg(long, default_value_t = 10)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate the geohash grid (cells.csv).
    Segment(SegmentArgs),
    /// Detect stays and build the activity pattern matrix (hap.coo, hap.json).
    IngestGps(GpsArgs),
    /// Count POIs per region and category (poi.coo, poi.json).
    IngestPoi(PoiArgs),
    /// Learn latent region representations (factors/, trace.csv).
    Fit(FitArgs),
    /// Group regions into zones (labels.csv, model.json, zones.geojson).
    Cluster(ClusterArgs),
    /// Rank distinguishing POI categories per zone (report.csv, report.txt).
    Annotate(Common),
    /// All stages in order.
    Run(Common),
    /// Generate a synthetic city with planted zones.
    Synth(SynthArgs),
}

fn load_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(&common.config)?;
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    if let Some(out) = &common.output {
        overrides.push(("output".into(), out.display().to_string()));
    }
    for (k, v) in overrides {
        let is_path = matches!(k.as_str(), "gps" | "pois" | "categories" | "output");
        if is_path && PathBuf::from(&v).is_relative() {
            cfg.set(&k, &cwd.join(&v).display().to_string())?;
        } else {
            cfg.set(&k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(common: &Common, stage: Stage, extra: &[(&str, Option<String>)]) -> Result<()> {
    let cfg = load_config(common, extra)?;
    let mut p = Pipeline::new(cfg)?.force(common.force);
    let outcome = p.run_stage(stage)?;
    match outcome {
        StageOutcome::Ran => println!("{stage}: done ({})", p.output_dir().display()),
        StageOutcome::Reused => println!("{stage}: up to date ({})", p.output_dir().display()),
    }
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SynthCitySpec::four_zone(args.width, args.height, args.users, args.obs_rate, args.seed);
    spec.days = args.days;
    let city = gen_synthetic_city(&spec)?;
    city.write(&args.out)?;
    let cfg_path = args.out.join("config.txt");
    std::fs::write(&cfg_path, synthetic_config_text(&spec)?).map_err(|e| Error::io(&cfg_path, e))?;
    println!(
        "synthetic city: {} regions, {} GPS rows, {} POIs in {} regions -> {}",
        city.grid.len(),
        city.gps.len(),
        city.pois.len(),
        city.observed_count(),
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Segment(a) => run_stage(&a.common, Stage::Segment, &[("level", opt(&a.level))]),
        Command::IngestGps(a) => run_stage(
            &a.common,
            Stage::IngestGps,
            &[
                ("gps", path(&a.gps)),
                ("stay_radius_m", opt(&a.stay_radius_m)),
                ("stay_seconds", opt(&a.stay_seconds)),
            ],
        ),
        Command::IngestPoi(a) => run_stage(
            &a.common,
            Stage::IngestPoi,
            &[("pois", path(&a.pois)), ("categories", path(&a.categories))],
        ),
        Command::Fit(a) => run_stage(
            &a.common,
            Stage::Fit,
            &[
                ("k", opt(&a.k)),
                ("alpha0", opt(&a.alpha0)),
                ("max_iter", opt(&a.max_iter)),
                ("seed", opt(&a.seed)),
            ],
        ),
        Command::Cluster(a) => run_stage(
            &a.common,
            Stage::Cluster,
            &[
                ("method", a.method.clone()),
                ("feature", a.feature.clone()),
                ("c", opt(&a.c)),
                ("beta", opt(&a.beta)),
            ],
        ),
        Command::Annotate(common) => run_stage(common, Stage::Annotate, &[]),
        Command::Run(common) => {
            let cfg = load_config(common, &[])?;
            let mut p = Pipeline::new(cfg)?.force(common.force);
            p.run_all()?;
            println!("run complete ({})", p.output_dir().display());
            Ok(())
        }
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
