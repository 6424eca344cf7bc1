//! `edgespotter` command-line driver: generate, train, eval, bench, plot.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgespotter::bench::{self, Mechanism};
use edgespotter::metrics::DEFAULT_IOU_THRESHOLD;
use edgespotter::model::{
    checkpoint_model_config, draw_overlay, evaluate, image_tensor, prepare_targets,
    InferenceOptions, Spotter, SpotterConfig, StepRecord, TrainConfig, Trainer, Variant,
};
use edgespotter::plot;
use edgespotter::synth::{
    generate_scenes, load_dataset, write_dataset, DatasetManifest, SceneConfig,
};
use edgespotter::tensor::{load_checkpoint, save_checkpoint, Tensor};
use edgespotter::{Error, ErrorKind};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "EDGESPOTTER_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "edgespotter",
    version,
    about = "Desk-scale text spotting toolkit"
)]
struct Cli {
    /// Root directory for default output paths.
    #[arg(long, env = OUT_ENV, default_value = "out", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a spotter on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time the token mixers over a sweep of token counts.
    Bench(BenchArgs),
    /// Render a bench CSV as SVG or a density CSV as PGM.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scene preset: dense, overfit or compact.
    #[arg(long, default_value = "dense")]
    preset: String,
    /// JSON scene configuration replacing the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory [default: <out-root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path [default: <out-root>/model.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON-lines log [default: checkpoint path with `.jsonl`].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Total number of steps, counting any resumed ones.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Cosine decay length [default: --steps].
    #[arg(long)]
    decay_steps: Option<usize>,
    /// full, fscrs-only or baseline.
    #[arg(long, default_value = "full")]
    variant: String,
    /// JSON model configuration; image size defaults to the dataset's.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Leave wall-clock time out of the log so reruns are byte-identical.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics JSON [default: <out-root>/eval.json].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = InferenceOptions::default().score_threshold)]
    score_threshold: f64,
    #[arg(long, default_value_t = InferenceOptions::default().nms_iou)]
    nms_iou: f64,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    /// Directory for per-image PGM overlays.
    #[arg(long)]
    overlays: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "em,softmax")]
    mechanisms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = bench::MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path [default: <out-root>/bench.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Bench CSV or density-grid CSV.
    #[arg(long)]
    input: PathBuf,
    /// Output file [default: <out-root>/plot.svg or plot.pgm].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit class.
struct Failure {
    kind: ErrorKind,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: ErrorKind::Usage,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, tag) = match f.kind {
                ErrorKind::Usage => (2, "E_USAGE"),
                ErrorKind::Data => (3, "E_DATA"),
                ErrorKind::Numeric => (4, "E_NUMERIC"),
            };
            eprintln!("error[{tag}]: {}", f.message.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let root = cli.out_root;
    match cli.command {
        Command::Generate(a) => generate(a, &root),
        Command::Train(a) => train(a, &root),
        Command::Eval(a) => eval(a, &root),
        Command::Bench(a) => bench_cmd(a, &root),
        Command::Plot(a) => plot_cmd(a, &root),
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> CliResult<D> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a directory", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a file", path.display())))
    }
}

/// Creates the parent directory of an output file.
fn prepare_output(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        return Err(usage(format!("output {} is a directory", path.display())));
    }
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_failure(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn generate(a: GenerateArgs, root: &Path) -> CliResult<()> {
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let scene = match &a.config {
        Some(p) => {
            require_file(p)?;
            read_json::<SceneConfig>(p)?
        }
        None => SceneConfig::preset(&a.preset)?,
    };
    scene.validate()?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if out.is_file() {
        return Err(usage(format!("output {} is a file", out.display())));
    }
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let scenes = generate_scenes(&scene, a.seed, a.count)?;
    let manifest = DatasetManifest {
        base_seed: a.seed,
        count: a.count,
        scene,
    };
    write_dataset(&out, &scenes, Some(&manifest))?;
    let stats =
        edgespotter::synth::DatasetStats::from_annotations(scenes.iter().map(|s| &s.annotation));
    println!("{}", serde_json::to_string(&stats).map_err(Error::from)?);
    Ok(())
}

fn train(a: TrainArgs, root: &Path) -> CliResult<()> {
    require_dir(&a.data)?;
    let ckpt_path = a.out.clone().unwrap_or_else(|| root.join("model.ckpt"));
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| ckpt_path.with_extension("jsonl"));
    prepare_output(&ckpt_path)?;
    prepare_output(&log_path)?;
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    if let Some(p) = &a.model_config {
        require_file(p)?;
    }

    let data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let mut trainer = match &a.resume {
        Some(r) => {
            let t = Trainer::<f32>::from_checkpoint(&load_checkpoint(r)?, Some(a.steps))?;
            if t.step >= a.steps {
                return Err(usage(format!(
                    "checkpoint is already at step {}, not below --steps {}",
                    t.step, a.steps
                )));
            }
            t
        }
        None => {
            let mut model: SpotterConfig = match &a.model_config {
                Some(p) => read_json(p)?,
                None => {
                    let first = &data.scenes[0].image;
                    SpotterConfig {
                        image_size: [first.width, first.height],
                        ..Default::default()
                    }
                }
            };
            model.variant = Variant::parse(&a.variant)?;
            let mut tc = TrainConfig {
                seed: a.seed,
                steps: a.steps,
                batch_size: a.batch_size,
                ..Default::default()
            };
            tc.optimizer.lr = a.lr;
            tc.optimizer.warmup_steps = a.warmup;
            tc.optimizer.weight_decay = a.weight_decay;
            tc.optimizer.grad_clip = a.grad_clip;
            tc.optimizer.decay_steps = a.decay_steps.unwrap_or(a.steps);
            Trainer::new(model, tc)?
        }
    };
    let cfg = trainer.model.config.clone();
    let images: Vec<Tensor<f32>> = data.scenes.iter().map(|s| image_tensor(&s.image)).collect();
    if let Some(s) = data
        .scenes
        .iter()
        .find(|s| [s.image.width, s.image.height] != cfg.image_size)
    {
        return Err(Error::Shape(format!(
            "image {} is {}x{}, model expects {}x{}",
            s.annotation.image_id,
            s.image.width,
            s.image.height,
            cfg.image_size[0],
            cfg.image_size[1]
        ))
        .into());
    }
    let targets = data
        .scenes
        .iter()
        .map(|s| prepare_targets(&s.annotation, &cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    let mut last: Option<StepRecord> = None;
    while trainer.step < a.steps {
        let record = match trainer.train_step(&images, &targets) {
            Ok(r) => r,
            Err(e) => {
                dump_failure(&ckpt_path, &trainer, last.as_ref(), &e);
                return Err(e.into());
            }
        };
        let mut line = serde_json::to_value(&record).map_err(Error::from)?;
        if a.no_wall_time {
            line.as_object_mut()
                .expect("record object")
                .remove("wall_time");
        }
        writeln!(log, "{line}").map_err(|e| io_failure(&log_path, e))?;
        if a.checkpoint_every
            .is_some_and(|k| k > 0 && trainer.step % k == 0)
            && trainer.step < a.steps
        {
            save_checkpoint(&ckpt_path, &trainer.checkpoint()?)?;
        }
        last = Some(record);
    }
    save_checkpoint(&ckpt_path, &trainer.checkpoint()?)?;
    if let Some(r) = last {
        println!("step {} loss {:.6}", r.step, r.loss.total);
    }
    Ok(())
}

/// Writes the failing state next to the checkpoint for inspection.
fn dump_failure(ckpt: &Path, trainer: &Trainer<f32>, last: Option<&StepRecord>, error: &Error) {
    let dump = serde_json::json!({
        "error": error.to_string(),
        "step": trainer.step,
        "last_record": last,
        "model": trainer.model.config,
    });
    let path = ckpt.with_extension("failure.json");
    let _ = fs::write(&path, format!("{dump:#}\n"));
    if let Ok(c) = trainer.checkpoint() {
        let _ = save_checkpoint(&ckpt.with_extension("failure.ckpt"), &c);
    }
}

fn eval(a: EvalArgs, root: &Path) -> CliResult<()> {
    require_dir(&a.data)?;
    require_file(&a.checkpoint)?;
    let out = a.out.unwrap_or_else(|| root.join("eval.json"));
    prepare_output(&out)?;
    if let Some(d) = &a.overlays {
        fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut model = Spotter::<f32>::new(checkpoint_model_config(&ckpt)?, 0)?;
    ckpt.apply_to(&mut model)?;
    let data = load_dataset(&a.data)?;
    let options = InferenceOptions {
        score_threshold: a.score_threshold,
        nms_iou: a.nms_iou,
    };
    let (result, detections) = evaluate(&model, &data.scenes, &options, a.iou)?;
    let json = result.to_json()?;
    write_file(&out, format!("{json}\n").as_bytes())?;
    if let Some(d) = &a.overlays {
        for (scene, dets) in data.scenes.iter().zip(&detections) {
            let p = d.join(format!("{}.pgm", scene.annotation.image_id));
            write_file(&p, &draw_overlay(&scene.image, dets).to_pgm())?;
        }
    }
    println!("{}", edgespotter::metrics::EvalResult::CSV_HEADER);
    println!("{}", result.csv_line());
    Ok(())
}

fn bench_cmd(a: BenchArgs, root: &Path) -> CliResult<()> {
    let out = a.out.unwrap_or_else(|| root.join("bench.csv"));
    let mechanisms = a
        .mechanisms
        .iter()
        .map(|m| Mechanism::parse(m))
        .collect::<Result<Vec<_>, _>>()?;
    bench::validate_sizes(&a.sizes)?;
    if a.channels == 0 {
        return Err(usage("--channels must be positive"));
    }
    prepare_output(&out)?;
    let records = bench::run_sweep(&mechanisms, &a.sizes, a.channels, a.reps, a.seed)?;
    let csv = bench::to_csv(&records)?;
    write_file(&out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn plot_cmd(a: PlotArgs, root: &Path) -> CliResult<()> {
    require_file(&a.input)?;
    let text = fs::read_to_string(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let is_bench = text
        .lines()
        .next()
        .is_some_and(|l| l.trim() == bench::CSV_HEADER);
    let (bytes, default) = if is_bench {
        let records = bench::parse_csv(&text, &a.input)?;
        (plot::bench_svg(&records)?.into_bytes(), "plot.svg")
    } else {
        (plot::density_pgm(&text, &a.input)?, "plot.pgm")
    };
    let out = a.out.unwrap_or_else(|| root.join(default));
    prepare_output(&out)?;
    write_file(&out, &bytes)?;
    println!("{}", out.display());
    Ok(())
}
