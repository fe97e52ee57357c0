use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use ctxdbn_core::features::{ensembles_to_json, read_feature_csv, train_classifier_bank};
use ctxdbn_core::harness::*;
use ctxdbn_core::inference::viterbi_decode;
use ctxdbn_core::learning::{
    annotations_from_json, annotations_to_json, drop_labels, em_train, expand_annotations,
    initialize_params, EmConfig, ScheduleKind, TrainingTrace,
};
use ctxdbn_core::simulator::{generate_dataset, truth_to_json, write_trace_csv, SimConfig};
use ctxdbn_core::{BuildingMap, Error, FactorMask, Model, ModelParams};

#[derive(Parser)]
#[command(name = "ctxdbn", version, about = "Activity, environment and location estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and labeled traces.
    Simulate(SimulateArgs),
    /// Fit model parameters on a labeled dataset.
    Train(TrainArgs),
    /// Viterbi-decode one trace.
    Decode(DecodeArgs),
    /// Score decoded paths against ground truth.
    Evaluate(EvaluateArgs),
    /// Leave-one-out comparison of model degenerations.
    Ablate(AblateArgs),
    /// Accuracy against dropped labels for each virtual-evidence schedule.
    VeCurve(VeCurveArgs),
    /// Draw a decoded path with GPS fixes and buildings.
    Plot(PlotArgs),
    /// Train one-vs-rest boosted stump classifiers from a feature table.
    Boost(BoostArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Factors {
    Full,
    NoMap,
    MsbOnly,
}

impl Factors {
    fn mask(self) -> FactorMask {
        match self {
            Factors::Full => FactorMask::FULL,
            Factors::NoMap => FactorMask::NO_MAP,
            Factors::MsbOnly => FactorMask::MSB_ONLY,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    traces: usize,
    #[arg(long, default_value_t = 2400)]
    frames: usize,
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `simulate` (or laid out the same way).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train with EM on partial labels of this schedule instead of hard labels.
    #[arg(long, value_parser = parse_kind)]
    schedule: Option<ScheduleKind>,
    /// Percentage of each label span to drop before training with `--schedule`.
    #[arg(long, default_value_t = 0)]
    drop_percent: u32,
    #[arg(long, value_enum, default_value = "full")]
    factors: Factors,
    #[arg(long)]
    em_iters: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    factors: Factors,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Decoded path CSVs.
    #[arg(long, num_args = 1.., required = true)]
    decoded: Vec<PathBuf>,
    /// Label files (annotation JSON) in the same order.
    #[arg(long, num_args = 1.., required = true)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VeCurveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    percents: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Option<Vec<ScheduleKind>>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    decoded: PathBuf,
    #[arg(long)]
    svg: PathBuf,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct BoostArgs {
    /// CSV of numeric features with label_state and label_env columns.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<ScheduleKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown schedule `{s}`"))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = read(p)?;
            Ok(serde_json::from_str(&text).map_err(Error::from).with_context(|| p.display().to_string())?)
        }
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write(p: &Path, contents: &str) -> Result<()> {
    fs::write(p, contents).with_context(|| format!("writing {}", p.display()))
}

struct Dataset {
    map: BuildingMap,
    traces: Vec<LabeledTrace>,
}

fn trace_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".csv")
                .filter(|s| s.starts_with("trace_"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    Ok(stems)
}

fn load_map(p: &Path) -> Result<BuildingMap> {
    Ok(BuildingMap::from_json(&read(p)?).with_context(|| p.display().to_string())?)
}

fn load_frames(p: &Path, map: &BuildingMap) -> Result<Vec<ctxdbn_core::Frame>> {
    let file = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    let got = ingest_trace(file, map).with_context(|| p.display().to_string())?;
    if got.out_of_bounds + got.unmatched > 0 {
        log::warn!(
            "{}: dropped {} fixes outside the world and {} unmatched fixes",
            p.display(),
            got.out_of_bounds,
            got.unmatched
        );
    }
    Ok(got.frames)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let map = load_map(&dir.join("map.json"))?;
    let mut traces = Vec::new();
    for stem in trace_stems(dir)? {
        let frames = load_frames(&dir.join(format!("{stem}.csv")), &map)?;
        let label_path = dir.join(format!("{stem}.labels.json"));
        let spans = annotations_from_json(&read(&label_path)?).with_context(|| label_path.display().to_string())?;
        traces.push(LabeledTrace { frames, spans });
    }
    if traces.is_empty() {
        bail!(Error::InvalidArgument(format!("no trace_*.csv files in {}", dir.display())));
    }
    Ok(Dataset { map, traces })
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg: SimConfig = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let (world, traces) = generate_dataset(&cfg, args.traces, args.frames)?;
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("map.json"), &world.to_json())?;
    for (i, t) in traces.iter().enumerate() {
        let mut csv = Vec::new();
        write_trace_csv(&t.frames, &mut csv)?;
        fs::write(args.out.join(format!("trace_{i:03}.csv")), csv)?;
        write(&args.out.join(format!("trace_{i:03}.labels.json")), &annotations_to_json(&t.spans))?;
        write(&args.out.join(format!("trace_{i:03}.truth.json")), &truth_to_json(&t.truth))?;
    }
    Ok(())
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(&args.common)?;
    if let Some(n) = args.em_iters {
        cfg.em_iters = n;
    }
    let data = load_dataset(&args.data)?;
    let params = match args.schedule {
        None | Some(ScheduleKind::HardLabels) if args.drop_percent == 0 => {
            let refs: Vec<&LabeledTrace> = data.traces.iter().collect();
            train_supervised(&refs, &data.map, &cfg)?
        }
        None => bail!(Error::InvalidArgument("--drop-percent needs --schedule".into())),
        Some(kind) => {
            let training: Vec<TrainingTrace> = data
                .traces
                .iter()
                .map(|t| {
                    let kept = drop_labels(&t.spans, args.drop_percent)?;
                    Ok(TrainingTrace {
                        frames: t.frames.clone(),
                        ve: Some(expand_annotations(&kept, t.frames.len(), kind)?),
                    })
                })
                .collect::<ctxdbn_core::Result<_>>()?;
            let em = EmConfig {
                max_iters: cfg.em_iters.max(1),
                dirichlet_smoothing: cfg.smoothing,
                beam: cfg.beam,
                ..Default::default()
            };
            let init = initialize_params(cfg.seed, 1.0);
            let report = em_train(&training, &data.map, args.factors.mask(), &init, &em)?;
            report.params
        }
    };
    write(&args.out, &params.to_json())
}

fn decode(args: DecodeArgs) -> Result<()> {
    let cfg = experiment_config(&args.common)?;
    let map = load_map(&args.map)?;
    let params = ModelParams::from_json(&read(&args.params)?).with_context(|| args.params.display().to_string())?;
    let frames = load_frames(&args.trace, &map)?;
    let model = Model::new(&params, &map, args.factors.mask())?;
    let decoded = viterbi_decode(&frames, &model, &cfg.beam, None)?;
    write(&args.out, &path_to_csv(&decoded.path))
}

fn read_path(p: &Path) -> Result<Vec<ctxdbn_core::JointState>> {
    let file = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(path_from_csv(file).with_context(|| p.display().to_string())?)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    if args.decoded.len() != args.labels.len() {
        bail!(Error::InvalidArgument(format!(
            "{} decoded files for {} label files",
            args.decoded.len(),
            args.labels.len()
        )));
    }
    let mut decoded = Vec::new();
    let mut truth = Vec::new();
    for (d, l) in args.decoded.iter().zip(&args.labels) {
        let path = read_path(d)?;
        let spans = annotations_from_json(&read(l)?).with_context(|| l.display().to_string())?;
        truth.push(labels_from_spans(&spans, path.len())?);
        decoded.push(path_labels(&path));
    }
    let acc = evaluate_accuracy(&decoded, &truth)?;
    let mut out = String::from("trace,state_accuracy,env_accuracy\n");
    for (i, (s, e)) in acc.state.values.iter().zip(&acc.env.values).enumerate() {
        out += &format!("{i},{s:.6},{e:.6}\n");
    }
    out += &format!("mean,{:.6},{:.6}\n", acc.state.mean, acc.env.mean);
    out += &format!("ci95,{:.6},{:.6}\n", acc.state.ci, acc.env.ci);
    write(&args.out, &out)
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = experiment_config(&args.common)?;
    let data = load_dataset(&args.data)?;
    let table = run_ablation(&data.traces, &data.map, &AblationRow::ALL, &cfg)?;
    write(&args.out, &table.to_csv())
}

fn ve_curve(args: VeCurveArgs) -> Result<()> {
    let mut cfg: VeExperimentConfig = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.percents {
        cfg.percents = p;
    }
    if let Some(k) = args.kinds {
        cfg.kinds = k;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    let data = load_dataset(&args.data)?;
    let points = run_ve_experiment(&data.traces, &data.map, &cfg)?;
    write(&args.out, &curve_csv(&points))
}

fn plot(args: PlotArgs) -> Result<()> {
    let map = load_map(&args.map)?;
    let frames = load_frames(&args.trace, &map)?;
    let path = read_path(&args.decoded)?;
    let (svg, csv) = emit_trace_plot(&path, &frames, &map)?;
    write(&args.svg, &svg)?;
    write(&args.csv, &csv)
}

fn boost(args: BoostArgs) -> Result<()> {
    let file = fs::File::open(&args.features).with_context(|| format!("opening {}", args.features.display()))?;
    let table = read_feature_csv(file)?;
    let bank = train_classifier_bank(&table, args.rounds)?;
    write(&args.out, &ensembles_to_json(&bank))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::VeCurve(a) => ve_curve(a),
        Command::Plot(a) => plot(a),
        Command::Boost(a) => boost(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InferenceCollapse { .. } | Error::TraceCollapse { .. }) => 3,
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
