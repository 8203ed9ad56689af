//! `nfad`: synthesize, featurize, train, score and evaluate from the command line.
//!
//! A run directory given by `--out` collects every artifact:
//!
//! ```text
//! out/
//!   data/            WAV clips and manifest.json        (synth)
//!   features/        train.nfft, test.nfft               (featurize)
//!   checkpoints/     <model>.nfad, <model>.loss.csv      (train)
//!   scores/          <model>.scores.csv                  (score)
//!   eval/            table.csv, table.txt, plot data     (eval)
//!   velocity/        <model>.velocity.csv                (velocity)
//!   report.txt                                           (report)
//!   config.<subcommand>.json                              resolved configuration
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nfad::checkpoint::{Architecture, Checkpoint};
use nfad::config::{Preset, RunConfig};
use nfad::eval::{
    compare_methods, default_velocity_sets, format_table, score_glow, score_vae, velocity_report,
    write_glow_scores_csv, write_score_plots, write_table_csv, write_vae_scores_csv,
    write_velocity_csv, EvalReport, Method,
};
use nfad::features::{featurize_manifest, read_cache, write_cache, ClipFeatures};
use nfad::prior::PriorConfig;
use nfad::synth::{make_dataset, DatasetManifest, MANIFEST_FILE};
use nfad::train::{train, write_loss_csv, CheckpointSink, ModelKind, TrainingSet};
use nfad::Error;

#[derive(Parser, Debug)]
#[command(
    name = "nfad",
    version,
    about = "Flow-based anomalous sound detection with a velocity-aware prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run directory for every artifact.
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; defaults to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    GlowMulti,
    GlowSingle,
    Vae,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset as WAV files plus a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Clips per parameter set.
        #[arg(long)]
        clips_per_set: Option<usize>,
    },
    /// Extract log-mel patch caches for the train and test splits.
    Featurize {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on the training features.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Velocity-conditioned prior (glow) or velocity loss (vae). Glow
        /// follows the configuration when neither flag is given; vae
        /// trains without the velocity loss.
        #[arg(long, conflicts_with = "unconstrained")]
        constrained: bool,
        #[arg(long)]
        unconstrained: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Save a checkpoint every N epochs.
        #[arg(long)]
        checkpoint_interval: Option<usize>,
    },
    /// Write per-clip scores of one checkpoint on the test features.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare every trained method and write the AUC table.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Velocity estimates of a constrained checkpoint on unseen velocities.
    Velocity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Eval plus velocity report and the proposed-vs-conventional margins.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Featurize { .. } => "featurize",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::Velocity { .. } => "velocity",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Featurize { common }
            | Command::Train { common, .. }
            | Command::Score { common, .. }
            | Command::Eval { common }
            | Command::Velocity { common, .. }
            | Command::Report { common } => common,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(
                Error::Param(_) | Error::Config(_) | Error::Json { .. } | Error::Contract(_),
            ) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(files) => {
            let list: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
            println!("produced: {}", list.join(" "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nfad {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(match common.preset {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }),
    };
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn require(path: &Path, produced_by: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{} not found; run `nfad {produced_by}` first",
            path.display()
        )))
    }
}

fn test_features(out: &Path) -> CliResult<Vec<ClipFeatures>> {
    let path = out.join("features").join("test.nfft");
    require(&path, "featurize")?;
    Ok(read_cache(&path)?)
}

fn checkpoint_name(model: ModelKind, constrained: bool) -> &'static str {
    let method = match (model, constrained) {
        (ModelKind::GlowMulti, true) => Method::GlowMultiProposed,
        (ModelKind::GlowMulti, false) => Method::GlowMultiNll,
        (ModelKind::GlowSingle, true) => Method::GlowSingleProposed,
        (ModelKind::GlowSingle, false) => Method::GlowSingleNll,
        (ModelKind::Vae, true) => Method::SupervisedVaeKld,
        (ModelKind::Vae, false) => Method::VaeRecon,
    };
    method.checkpoint_file()
}

fn run(cmd: &Command) -> CliResult<Vec<PathBuf>> {
    let common = cmd.common();
    let mut cfg = resolve(common)?;
    let out = common.out.clone();
    mkdir(&out)?;
    let mut produced = Vec::new();

    match cmd {
        Command::Synth { clips_per_set, .. } => {
            if let Some(n) = clips_per_set {
                cfg.dataset.clips_per_set = *n;
            }
            let data = out.join("data");
            let manifest = make_dataset(&data, &cfg.dataset)?;
            log::info!(
                "{} clips written to {}",
                manifest.entries.len(),
                data.display()
            );
            produced.push(data.join(MANIFEST_FILE));
        }
        Command::Featurize { .. } => {
            let data = out.join("data");
            let manifest_path = data.join(MANIFEST_FILE);
            require(&manifest_path, "synth")?;
            let manifest = DatasetManifest::load(&manifest_path)?;
            let (train_clips, test_clips) = featurize_manifest(&data, &manifest, &cfg.features)?;
            let dir = out.join("features");
            mkdir(&dir)?;
            for (name, clips) in [("train.nfft", &train_clips), ("test.nfft", &test_clips)] {
                let p = dir.join(name);
                write_cache(&p, clips)?;
                produced.push(p);
            }
        }
        Command::Train {
            model,
            constrained,
            unconstrained,
            epochs,
            lr,
            batch_size,
            checkpoint_interval,
            ..
        } => {
            let t = &mut cfg.train;
            if let Some(m) = model {
                t.model = match m {
                    ModelArg::GlowMulti => ModelKind::GlowMulti,
                    ModelArg::GlowSingle => ModelKind::GlowSingle,
                    ModelArg::Vae => ModelKind::Vae,
                };
            }
            if t.model == ModelKind::Vae {
                if !*constrained {
                    t.gamma = 0.0;
                }
            } else if *constrained {
                t.prior = PriorConfig::constrained(t.prior.k);
            } else if *unconstrained {
                t.prior = PriorConfig::unconstrained();
            }
            if let Some(e) = epochs {
                t.epochs = *e;
            }
            if let Some(lr) = lr {
                t.lr = *lr;
            }
            if let Some(b) = batch_size {
                t.batch_size = *b;
            }
            if checkpoint_interval.is_some() {
                t.checkpoint_interval = *checkpoint_interval;
            }
            cfg.validate()?;
            let train_path = out.join("features").join("train.nfft");
            require(&train_path, "featurize")?;
            let clips = read_cache(&train_path)?;
            let data = TrainingSet::from_clips(&clips)?;
            let is_constrained = match cfg.train.model {
                ModelKind::Vae => cfg.train.gamma > 0.0,
                _ => cfg.train.prior.constrained,
            };
            let dir = out.join("checkpoints");
            mkdir(&dir)?;
            let ck_path = dir.join(checkpoint_name(cfg.train.model, is_constrained));
            let sink = CheckpointSink {
                path: Some(ck_path.clone()),
            };
            let outcome = train(&data, &cfg.train, &sink)?;
            let loss_path = ck_path.with_extension("loss.csv");
            write_loss_csv(&loss_path, &outcome.curve)?;
            produced.push(ck_path);
            produced.push(loss_path);
        }
        Command::Score { checkpoint, .. } => {
            require(checkpoint, "train")?;
            let ck = Checkpoint::load(checkpoint)?;
            let clips = test_features(&out)?;
            let dir = out.join("scores");
            mkdir(&dir)?;
            let stem = checkpoint
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model");
            let p = dir.join(format!("{stem}.scores.csv"));
            match ck.arch {
                Architecture::Glow { .. } => {
                    write_glow_scores_csv(&p, &score_glow(&ck, &clips, cfg.aggregation)?)?
                }
                Architecture::Vae(_) => {
                    write_vae_scores_csv(&p, &score_vae(&ck, &clips, cfg.aggregation)?)?
                }
            }
            produced.push(p);
        }
        Command::Eval { .. } => {
            let (_, files) = evaluate(&out, &cfg)?;
            produced.extend(files);
        }
        Command::Velocity { checkpoint, .. } => {
            let path = checkpoint.clone().unwrap_or_else(|| {
                out.join("checkpoints")
                    .join(Method::GlowMultiProposed.checkpoint_file())
            });
            produced.push(velocity(&out, &path)?.1);
        }
        Command::Report { .. } => {
            let (report, files) = evaluate(&out, &cfg)?;
            produced.extend(files);
            let mut text = format_table(&report);
            text.push('\n');
            for (proposed, conventional) in [
                (Method::GlowMultiProposed, Method::GlowMultiNll),
                (Method::GlowSingleProposed, Method::GlowSingleNll),
            ] {
                if let (Some(p), Some(c)) = (report.auc(proposed), report.auc(conventional)) {
                    let _ = writeln!(
                        text,
                        "{} minus {}: all {:+.1}, unseen {:+.1}, seen {:+.1} points",
                        proposed.label(),
                        conventional.label(),
                        100.0 * (p.all - c.all),
                        100.0 * (p.unseen - c.unseen),
                        100.0 * (p.seen - c.seen),
                    );
                }
            }
            let ck = out
                .join("checkpoints")
                .join(Method::GlowMultiProposed.checkpoint_file());
            if ck.exists() {
                let (r, p) = velocity(&out, &ck)?;
                produced.push(p);
                match r {
                    Some(r) => {
                        let _ = writeln!(
                            text,
                            "velocity estimate Pearson r on unseen velocities: {r:.3}"
                        );
                    }
                    None => {
                        text.push_str("velocity estimate Pearson r: undefined (zero variance)\n")
                    }
                }
            }
            let p = out.join("report.txt");
            write_text(&p, &text)?;
            print!("{text}");
            produced.push(p);
        }
    }

    let snapshot = out.join(format!("config.{}.json", cmd.name()));
    cfg.save(&snapshot)?;
    produced.push(snapshot);
    Ok(produced)
}

fn evaluate(out: &Path, cfg: &RunConfig) -> CliResult<(EvalReport, Vec<PathBuf>)> {
    let ck_dir = out.join("checkpoints");
    let clips = test_features(out)?;
    let (seen, unseen) = default_velocity_sets();
    let report = compare_methods(&ck_dir, &clips, &seen, &unseen, cfg.aggregation)?;
    if report.rows.iter().all(|r| r.auc.is_none()) {
        let list: Vec<String> = report
            .missing()
            .iter()
            .map(|p| format!("  {}", p.display()))
            .collect();
        return Err(CliError::Validation(format!(
            "no checkpoints found; missing:\n{}",
            list.join("\n")
        )));
    }
    for p in report.missing() {
        log::warn!("absent row: {}", p.display());
    }
    let dir = out.join("eval");
    mkdir(&dir)?;
    let mut files = Vec::new();
    let csv = dir.join("table.csv");
    write_table_csv(&csv, &report)?;
    files.push(csv);
    let txt = dir.join("table.txt");
    let table = format_table(&report);
    write_text(&txt, &table)?;
    eprint!("{table}");
    files.push(txt);
    files.extend(write_score_plots(&dir, &report)?);
    Ok((report, files))
}

fn velocity(out: &Path, checkpoint: &Path) -> CliResult<(Option<f64>, PathBuf)> {
    require(checkpoint, "train --constrained")?;
    let ck = Checkpoint::load(checkpoint)?;
    let clips = test_features(out)?;
    let (_, unseen) = default_velocity_sets();
    let report = velocity_report(&ck, &clips, &unseen)?;
    let dir = out.join("velocity");
    mkdir(&dir)?;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let p = dir.join(format!("{stem}.velocity.csv"));
    write_velocity_csv(&p, &report)?;
    Ok((report.pearson, p))
}
