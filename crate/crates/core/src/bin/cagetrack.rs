use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use cagetrack::config::{self, ConfigError, Layers};
use cagetrack::io::{self, DetectionReader, FrameGrouper, ParseError};
use cagetrack::metrics::{evaluate, Hypotheses, MetricsError};
use cagetrack::mousemap::identify;
use cagetrack::simulator::{InvalidConfig, SceneConfig, SceneGenerator};
use cagetrack::tracker::{Tracker, TrackerError};

/// Mouse tracking and identification pipeline.
///
/// Any config key can be overridden with a flag of the same name,
/// e.g. `--assoc.lambda 1.0` (scene keys for `simulate`).
#[derive(Debug, Parser)]
#[command(name = "cagetrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Link detections into tracklets.
    Track {
        /// Detection files; pair each with an --out.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long = "out", required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of input files processed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Assign identities to tracklets.
    Identify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// 0 solves the whole recording at once.
        #[arg(long)]
        window_minutes: Option<f64>,
    },
    /// Score tracklets against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic scene.
    Simulate {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Writes <prefix>.detections.jsonl and <prefix>.gt.jsonl.
        #[arg(long)]
        out_prefix: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Scene(#[from] InvalidConfig),
    #[error("{0}")]
    Contract(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(ParseError::Io(_)) | CliError::Io { .. } => 1,
            CliError::Parse(ParseError::Contract { .. }) | CliError::Parse(ParseError::FrameOrder { .. }) => 4,
            CliError::Parse(_) => 2,
            CliError::Config(_) | CliError::Scene(_) => 3,
            CliError::Contract(_) => 4,
        }
    }
}

impl From<TrackerError> for CliError {
    fn from(e: TrackerError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Contract(e.to_string())
    }
}

fn io_err(context: impl FnOnce() -> String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io {
        context: context(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(io_err(|| format!("cannot open {}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_err(|| format!("cannot create {}", path.display())))
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let value = it.next().ok_or_else(|| {
                CliError::Config(ConfigError::InvalidValue {
                    key: flag.to_string(),
                    message: "missing value".into(),
                })
            })?;
            overrides.push((flag.to_string(), value));
        }
    }
    Ok((rest, overrides))
}

fn track_file(cfg: &config::Config, input: &Path, output: &Path) -> Result<usize, CliError> {
    let reader = DetectionReader::new(open(input)?, cfg.stream.embedding_dim);
    let mut tracker = Tracker::new(cfg.tracker_config());
    for group in FrameGrouper::new(reader) {
        let (frame, detections) = group?;
        tracker.step(&detections, frame)?;
    }
    let tracklets = tracker.finalize();
    let mut out = create(output)?;
    io::write_tracklets(&mut out, &tracklets, &[])
        .and_then(|_| out.flush())
        .map_err(io_err(|| format!("cannot write {}", output.display())))?;
    Ok(tracklets.len())
}

fn run_track(cfg: &config::Config, inputs: &[PathBuf], outputs: &[PathBuf], jobs: usize) -> Result<(), CliError> {
    if inputs.len() != outputs.len() {
        return Err(CliError::Contract(format!("{} inputs but {} outputs", inputs.len(), outputs.len())));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<usize, CliError>>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, inputs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= inputs.len() {
                    break;
                }
                let r = track_file(cfg, &inputs[k], &outputs[k]);
                results.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    for (k, r) in results.into_inner().expect("worker panicked").into_iter().enumerate() {
        match r.expect("every input is processed") {
            Ok(n) => log::info!("{}: {n} tracklets", inputs[k].display()),
            Err(e) => {
                eprintln!("while tracking {}:", inputs[k].display());
                return Err(e);
            }
        }
    }
    Ok(())
}

fn run_identify(cfg: &config::Config, input: &Path, output: &Path) -> Result<(), CliError> {
    let (tracklets, _) = io::read_tracklets(open(input)?)?;
    let result = identify(&tracklets, &cfg.mousemap, cfg.stream.fps);
    let mut out = create(output)?;
    io::write_tracklets(&mut out, &result.tracklets, &result.identities)
        .and_then(|_| out.flush())
        .map_err(io_err(|| format!("cannot write {}", output.display())))?;
    eprintln!("objective = {}", result.objective);
    if result.presolved {
        eprintln!("presolve reduced {} tracklets to {}", tracklets.len(), result.tracklets.len());
    }
    Ok(())
}

fn run_eval(cfg: &config::Config, gt_path: &Path, hyp_path: &Path, out_path: Option<&Path>) -> Result<(), CliError> {
    let gt = io::read_ground_truth(open(gt_path)?)?;
    let (tracklets, identities) = io::read_tracklets(open(hyp_path)?)?;
    let hyps = Hypotheses::from_tracklets(&tracklets, &identities);
    let span = match (gt.first_frame(), gt.last_frame()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    };
    let minutes = span as f64 / cfg.stream.fps / 60.0;
    let report = evaluate(&gt, &hyps, minutes, cfg.eval.iou_threshold)?;
    let mut stdout = std::io::stdout().lock();
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(stdout, "{report}");
    if let Some(p) = out_path {
        let mut out = create(p)?;
        serde_json::to_writer_pretty(&mut out, &report)
            .map_err(std::io::Error::from)
            .and_then(|_| out.write_all(b"\n"))
            .and_then(|_| out.flush())
            .map_err(io_err(|| format!("cannot write {}", p.display())))?;
    }
    Ok(())
}

fn run_simulate(scene: Option<&Path>, prefix: &str, seed: Option<u64>, overrides: &[(String, String)]) -> Result<(), CliError> {
    let mut layers = Layers::new();
    if let Some(p) = scene {
        layers.merge_file(p)?;
    }
    for (k, v) in overrides {
        layers.set(k, v)?;
    }
    let mut cfg: SceneConfig = layers.build()?;
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    let generator = SceneGenerator::new(cfg.clone())?;
    let det_path = PathBuf::from(format!("{prefix}.detections.jsonl"));
    let gt_path = PathBuf::from(format!("{prefix}.gt.jsonl"));
    let mut dets = create(&det_path)?;
    let mut gt = create(&gt_path)?;
    let header = format!(
        "# seed={} n_mice={} fps={} frames={}\n",
        cfg.scene.seed,
        cfg.scene.n_mice,
        cfg.scene.fps,
        cfg.frame_count()
    );
    let write = |dets: &mut BufWriter<File>, gt: &mut BufWriter<File>| -> std::io::Result<()> {
        dets.write_all(header.as_bytes())?;
        gt.write_all(header.as_bytes())?;
        for f in generator {
            for d in &f.detections {
                io::write_detection(dets, d)?;
            }
            io::write_gt_frame(gt, f.frame, &f.truth)?;
        }
        dets.flush()?;
        gt.flush()
    };
    write(&mut dets, &mut gt).map_err(io_err(|| format!("cannot write scene files with prefix {prefix}")))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    match cli.command {
        Command::Track {
            inputs,
            outputs,
            config,
            jobs,
        } => {
            let cfg = config::load(config.as_deref(), &overrides)?;
            run_track(&cfg, &inputs, &outputs, jobs)
        }
        Command::Identify {
            input,
            out,
            config,
            window_minutes,
        } => {
            let mut overrides = overrides;
            if let Some(w) = window_minutes {
                overrides.push(("mousemap.window_minutes".into(), w.to_string()));
            }
            let cfg = config::load(config.as_deref(), &overrides)?;
            run_identify(&cfg, &input, &out)
        }
        Command::Eval {
            gt,
            hyp,
            iou_threshold,
            out,
            config,
        } => {
            let mut overrides = overrides;
            if let Some(t) = iou_threshold {
                overrides.push(("eval.iou_threshold".into(), t.to_string()));
            }
            let cfg = config::load(config.as_deref(), &overrides)?;
            run_eval(&cfg, &gt, &hyp, out.as_deref())
        }
        Command::Simulate { scene, out_prefix, seed } => run_simulate(scene.as_deref(), &out_prefix, seed, &overrides),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
