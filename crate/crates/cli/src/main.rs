use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use jcrnn::dataset::{self, normalize_frame, SkeletonSequence};
use jcrnn::evaluation::EvalReport;
use jcrnn::inference::{Detector, StreamLine};
use jcrnn::network::Model;
use jcrnn::parallel::Execution;
use jcrnn::pipeline::{self, RunConfig};
use jcrnn::training::Stage;
use jcrnn::Error;

/// Online action detection on skeleton streams.
#[derive(Parser)]
#[command(name = "jcrnn", version)]
struct Cli {
    /// Run config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into <out>/train and <out>/test.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train stage 1 then stage 2; writes checkpoints and train_log.csv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after the classification stage.
        #[arg(long)]
        stage1_only: bool,
        /// Feed FC2 straight into FC3.
        #[arg(long)]
        no_soft_selector: bool,
    },
    /// Run the detector over test sequences and write the report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root (uses <data>/test when present) or a directory of sequences.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Print one JSON line per frame of a frames file.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Pace output at this many frames per second.
        #[arg(long)]
        realtime: Option<f64>,
    },
    /// Write the forecast precision/recall CSV of a report.
    PrCurve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure per-frame inference latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> jcrnn::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen { out } => gen(&cfg, out.as_deref().unwrap_or(&cfg.paths.data_dir)),
        Command::Train {
            data,
            out,
            stage1_only,
            no_soft_selector,
        } => {
            let mut cfg = cfg.clone();
            if no_soft_selector {
                cfg.model.use_soft_selector = false;
            }
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            train(&cfg, &data, &out, stage1_only)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            oracle,
        } => {
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.run_dir.join("model.json"));
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.join("eval"));
            eval(&cfg, &checkpoint, &data, &out, oracle)
        }
        Command::Stream {
            checkpoint,
            frames,
            realtime,
        } => stream(&cfg, &checkpoint, &frames, realtime),
        Command::PrCurve { report, out } => pr_curve(&report, out.as_deref()),
        Command::Bench {
            checkpoint,
            frames,
            runs,
        } => bench(&checkpoint, &frames, runs),
    }
}

fn write(path: &Path, text: &str) -> jcrnn::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::io(path, source)
}

fn gen(cfg: &RunConfig, out: &Path) -> jcrnn::Result<()> {
    let (train, test) = pipeline::generate_split(cfg, Execution::Parallel)?;
    dataset::save_dir(&out.join("train"), &train)?;
    dataset::save_dir(&out.join("test"), &test)?;
    let frames: usize = train.iter().chain(&test).map(|s| s.len()).sum();
    println!(
        "wrote {} train and {} test sequences ({frames} frames) to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, stage1_only: bool) -> jcrnn::Result<()> {
    let dir = if data.join("train").is_dir() { data.join("train") } else { data.to_path_buf() };
    let seqs = dataset::load_dir(&dir)?;
    let every = cfg.train.checkpoint_every;
    let mut hook = |stage: Stage, epoch: usize, model: &Model| -> jcrnn::Result<()> {
        let last = match stage {
            Stage::Classification => cfg.train.epochs_stage1,
            Stage::Joint => cfg.train.epochs_stage2,
        };
        if epoch == last || (every > 0 && epoch % every == 0) {
            model.save(&out.join(format!("{}-{epoch}.json", stage.tag())))?;
        }
        eprintln!("{} epoch {epoch}/{last}", stage.tag());
        Ok(())
    };
    let trained = pipeline::train_from_scratch(cfg, &seqs, stage1_only, &mut hook)?;
    trained.model.save(&out.join("model.json"))?;
    write(&out.join("train_log.csv"), &trained.log.to_csv())?;
    write(&out.join("config.json"), &cfg.to_json())?;
    println!(
        "trained on {} sequences for {} epochs; model at {}",
        seqs.len(),
        trained.log.entries.len(),
        out.join("model.json").display()
    );
    Ok(())
}

fn load_test(data: &Path) -> jcrnn::Result<Vec<SkeletonSequence>> {
    let dir = if data.join("test").is_dir() { data.join("test") } else { data.to_path_buf() };
    dataset::load_dir(&dir)
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, oracle: bool) -> jcrnn::Result<()> {
    let seqs = load_test(data)?;
    let (report, runs) = if oracle {
        let num_outputs = seqs.iter().map(|s| s.num_classes).max().unwrap_or(0) + 1;
        let runs = pipeline::oracle_runs(&seqs, num_outputs, &cfg.targets)?;
        (pipeline::evaluate_runs(&seqs, &runs, num_outputs, &cfg.eval)?, runs)
    } else {
        let model = Model::load(checkpoint)?;
        pipeline::evaluate_model(&model, &seqs, &cfg.detector, &cfg.eval, Execution::Parallel)?
    };
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("pr.csv"), &report.pr_csv())?;
    write(&out.join("confusion.csv"), &report.confusion_csv())?;
    for (s, run) in seqs.iter().zip(&runs) {
        let mut text = String::new();
        for line in run.lines() {
            text.push_str(&line.to_json());
            text.push('\n');
        }
        write(&out.join("frames").join(format!("{}.jsonl", s.name)), &text)?;
    }
    println!(
        "{} sequences: average F1 {:.4}, SL {:.4}, EL {:.4}, action F1 {:.4}; report in {}",
        report.num_sequences,
        report.average_f1,
        report.sl_score,
        report.el_score,
        report.action_f1.f1,
        out.display()
    );
    Ok(())
}

fn stream(cfg: &RunConfig, checkpoint: &Path, frames: &Path, realtime: Option<f64>) -> jcrnn::Result<()> {
    if let Some(fps) = realtime {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument("--realtime needs a positive frame rate".into()));
        }
    }
    let model = Model::load(checkpoint)?;
    let frames = dataset::load_frames(frames)?;
    let mut det = Detector::new(&model, cfg.detector.clone())?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let started = Instant::now();
    for (t, mut frame) in frames.into_iter().enumerate() {
        normalize_frame(&mut frame);
        let (output, events) = det.step(&frame.features())?;
        let line = StreamLine::new(t, &output, events).to_json();
        writeln!(out, "{line}").map_err(|e| io_err(Path::new("<stdout>"), e))?;
        if let Some(fps) = realtime {
            out.flush().map_err(|e| io_err(Path::new("<stdout>"), e))?;
            let due = started + Duration::from_secs_f64((t + 1) as f64 / fps);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    out.flush().map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn pr_curve(report: &Path, out: Option<&Path>) -> jcrnn::Result<()> {
    let text = fs::read_to_string(report).map_err(|e| io_err(report, e))?;
    let csv = EvalReport::from_json(&text)?.pr_csv();
    match out {
        Some(path) => write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn bench(checkpoint: &Path, frames: &Path, runs: usize) -> jcrnn::Result<()> {
    if runs < 3 {
        return Err(Error::InvalidArgument("bench needs at least 3 runs".into()));
    }
    let model = Model::load(checkpoint)?;
    let frames: Vec<Vec<f64>> = dataset::load_frames(frames)?
        .into_iter()
        .map(|mut f| {
            normalize_frame(&mut f);
            f.features()
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::Data("no frames to benchmark".into()));
    }
    let once = || -> jcrnn::Result<f64> {
        let mut state = model.initial_state();
        let started = Instant::now();
        for f in &frames {
            model.step(&mut state, f)?;
        }
        Ok(started.elapsed().as_secs_f64())
    };
    once()?;
    let mut rates = Vec::with_capacity(runs);
    for i in 0..runs {
        let secs = once()?.max(1e-9);
        let fps = frames.len() as f64 / secs;
        println!("run {}: {:.1} frames/s", i + 1, fps);
        rates.push(fps);
    }
    let mean_fps = rates.iter().sum::<f64>() / runs as f64;
    println!(
        "{} parameters, {} frames: mean latency {:.1} us/frame, throughput {:.1} frames/s",
        model.num_parameters(),
        frames.len(),
        1e6 / mean_fps,
        mean_fps
    );
    Ok(())
}
