use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use csctrack::checkpoint::{load_model, save_model};
use csctrack::config::RunConfig;
use csctrack::experiment::{ablate, evaluate_model, train_model, AblationAxis};
use csctrack::harness::{read_sequence_dir, write_sequence_dir, NoiseConfig};
use csctrack::metrics::{evaluate_sequence, EvalReport};
use csctrack::mot::{read_mot, write_mot, MotKind};
use csctrack::Error;

#[derive(Parser)]
#[command(name = "csctrack", version, about = "Synthetic multi-object tracking with hierarchical appearance tokens")]
struct Cli {
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured train and test sequences to `<out>/train` and `<out>/test`.
    Synth,
    /// Train a model and write `<out>/checkpoint.json` and `<out>/train_log.csv`.
    Train {
        /// Dataset directory from `synth`; overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Track one sequence directory and write `<out>/<sequence>.txt`.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Overrides `tracker.beta`.
        #[arg(long)]
        beta: Option<f64>,
        /// Overrides `tracker.window`.
        #[arg(long)]
        window: Option<usize>,
        /// TOML noise settings applied to the detections; overrides `[noise]`
        /// and switches `track_noise` on.
        #[arg(long)]
        noise_config: Option<PathBuf>,
    },
    /// Score a result file against a sequence directory's ground truth.
    Eval {
        #[arg(long)]
        result: PathBuf,
        /// Sequence directory or a `gt.txt` file.
        #[arg(long)]
        gt: PathBuf,
        /// Overrides `eval.iou_threshold`.
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Train and evaluate the settings of one axis and print the comparison.
    Ablate {
        /// levels, fusion, train_len, infer_len or noise
        #[arg(long)]
        axis: String,
    },
    /// Repeat the run recorded in a manifest, writing to `--out` (default: the
    /// recorded output directory).
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: Vec<String>,
    seed: u64,
    config_file: PathBuf,
    config: String,
    checkpoint: Option<PathBuf>,
    output_dir: PathBuf,
    outputs: Vec<PathBuf>,
    started_unix: u64,
    finished_unix: u64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_text(path: &Path, text: &str) -> csctrack::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(cli: &Cli) -> csctrack::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Command::Ablate { axis } = &cli.command {
        axis.parse::<AblationAxis>().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(cli, manifest);
    }
    let started = now();
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outputs = Vec::new();
    let mut checkpoint = None;

    match &cli.command {
        Command::Synth => {
            let split = cfg.data.generate(cfg.seed)?;
            for (part, seqs) in [("train", &split.train), ("test", &split.test)] {
                for seq in seqs.iter() {
                    let dir = out.join(part).join(&seq.name);
                    write_sequence_dir(seq, &dir)?;
                    outputs.push(dir);
                }
            }
            println!("wrote {} sequences to {}", outputs.len(), out.display());
        }
        Command::Train { data, steps } => {
            if let Some(d) = data {
                cfg.data.dir = Some(d.clone());
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            cfg.validate()?;
            let split = cfg.data.load_or_generate(cfg.seed)?;
            let log_path = out.join("train_log.csv");
            let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let (model, losses) = train_model(&cfg, &split.train, Some(&mut log))?;
            let ck = out.join("checkpoint.json");
            save_model(&ck, &model, &cfg.tracker)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!(
                    "trained {} steps: assoc loss {:.4} -> {:.4}",
                    losses.len(),
                    first.assoc,
                    last.assoc
                );
            } else {
                println!("saved untrained model");
            }
            outputs.extend([ck.clone(), log_path]);
            checkpoint = Some(ck);
        }
        Command::Track {
            checkpoint: ck,
            sequence,
            beta,
            window,
            noise_config,
        } => {
            let (model, ck_tracker) = load_model(ck)?;
            let mut tracker = if cli.config.is_some() { cfg.tracker.clone() } else { ck_tracker };
            tracker.seed = cfg.seed;
            if let Some(b) = beta {
                tracker.beta = *b;
            }
            if let Some(w) = window {
                tracker.window = *w;
            }
            tracker.validate()?;
            if let Some(p) = noise_config {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                cfg.noise = toml::from_str::<NoiseConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg.track_noise = true;
            }
            cfg.tracker = tracker.clone();
            let seq = read_sequence_dir(sequence)?;
            let noise = cfg.track_noise.then_some(&cfg.noise);
            let (report, sets) = evaluate_model(
                &model,
                std::slice::from_ref(&seq),
                &tracker,
                noise,
                cfg.seed,
                cfg.eval.iou_threshold,
            )?;
            let path = out.join(format!("{}.txt", seq.name));
            write_mot(&path, &sets[0])?;
            println!("wrote {} records to {}", sets[0].len(), path.display());
            if !seq.gt.is_empty() {
                print!("{}", report.to_table());
            }
            outputs.push(path);
            checkpoint = Some(ck.clone());
        }
        Command::Eval { result, gt, iou } => {
            if let Some(t) = iou {
                cfg.eval.iou_threshold = *t;
            }
            let gt_file = if gt.is_dir() { gt.join("gt").join("gt.txt") } else { gt.clone() };
            let pred = read_mot(result, MotKind::GroundTruth)?;
            let truth = read_mot(&gt_file, MotKind::GroundTruth)?;
            let name = result.file_stem().map_or("sequence".into(), |s| s.to_string_lossy().into_owned());
            let report = EvalReport::combine(vec![evaluate_sequence(&name, &pred, &truth, cfg.eval.iou_threshold)?]);
            print!("{}", report.to_table());
            let csv = out.join("eval.csv");
            write_text(&csv, &report.to_csv())?;
            let json = out.join("eval.json");
            write_text(
                &json,
                &serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
            )?;
            outputs.extend([csv, json]);
        }
        Command::Rerun { .. } => unreachable!(),
        Command::Ablate { axis: axis_name } => {
            let axis: AblationAxis = axis_name.parse()?;
            let table = ablate(&cfg, axis, Some(&mut std::io::stderr()))?;
            print!("{}", table.to_table());
            let csv = out.join(format!("ablate_{}.csv", axis_name.replace('-', "_")));
            write_text(&csv, &table.to_csv())?;
            outputs.push(csv);
        }
    }

    let config_file = out.join("config.toml");
    let config = cfg.to_toml()?;
    write_text(&config_file, &config)?;
    let manifest = RunManifest {
        command: std::env::args().collect(),
        seed: cfg.seed,
        config_file,
        config,
        checkpoint,
        output_dir: out.clone(),
        outputs,
        started_unix: started,
        finished_unix: now(),
    };
    let path = out.join("manifest.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(())
}

/// Recorded arguments without the global flags, which the manifest replaces.
fn strip_globals(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if ["--config", "--out", "--seed"].contains(&a.as_str()) {
            it.next();
        } else if !["--config=", "--out=", "--seed="].iter().any(|p| a.starts_with(p)) {
            out.push(a.clone());
        }
    }
    out
}

fn rerun(cli: &Cli, manifest: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let recorded: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
    let out = if std::env::args().any(|a| a == "--out" || a.starts_with("--out=")) {
        cli.out.clone()
    } else {
        recorded.output_dir.clone()
    };
    let config = out.join("config.toml");
    write_text(&config, &recorded.config)?;
    let mut args = strip_globals(&recorded.command);
    if matches!(args.get(1).map(String::as_str), Some("rerun")) || args.is_empty() {
        return Err(Failure::Usage("manifest does not record a runnable command".into()));
    }
    args.extend(["--config".into(), config.display().to_string(), "--out".into(), out.display().to_string()]);
    let cli = Cli::try_parse_from(&args).map_err(|e| Failure::Usage(first_line(&e.to_string())))?;
    run(&cli)
}

fn first_line(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    line.trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: usage: {}", first_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
