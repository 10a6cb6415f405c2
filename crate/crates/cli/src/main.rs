use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvrecon_core::data::{task_at, Split};
use mvrecon_core::eval::{
    ablation_table, calibrate, emit_comparison_grid, emit_report, prepare_task, reconstruct, run_sweep, Mode,
    ReportFormat,
};
use mvrecon_core::metrics::{psnr, ssim};
use mvrecon_core::training::{loss_history_csv, train_bank, SourceModelBank};
use mvrecon_core::{Config, Error, FusionWeights, SourceTag};

#[derive(Parser)]
#[command(name = "mvrecon", version, about = "Missing-frame reconstruction for multi-camera video")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct BankArgs {
    /// Directory of per-source checkpoints.
    #[arg(long)]
    bank: PathBuf,
    /// Fusion weights CSV.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-camera scene to frame directories.
    SynthData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Load, synchronize and split a dataset, then write it back normalized.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one source model or all of them.
    Train {
        /// `past`, `future`, `ref_<id>` or `all`.
        #[arg(long, default_value = "all")]
        source: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit per-gap fusion weights on the validation split.
    Calibrate {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct one missing frame.
    Reconstruct {
        #[command(flatten)]
        bank: BankArgs,
        /// Task as `i=<index>,k=<gap>`.
        #[arg(long, value_parser = parse_task)]
        task: (i64, usize),
        #[arg(long, default_value = "multi", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long, default_value = "fused.png")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Gap sweep over the test split in one mode.
    Evaluate {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long, default_value = "multi", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Also write the markdown table here.
        #[arg(long)]
        markdown: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Single-view vs. multi-view sweeps with a delta table.
    Ablate {
        #[command(flatten)]
        bank: BankArgs,
        /// Directory for single.csv, multi.csv and ablation.md.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Labeled comparison strip for one task.
    Grid {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long, value_parser = parse_task)]
        task: (i64, usize),
        #[arg(long, default_value = "multi", value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_task(s: &str) -> Result<(i64, usize), String> {
    let (mut i, mut k) = (None, None);
    for part in s.split(',') {
        match part.trim().split_once('=') {
            Some(("i", v)) => i = Some(v.parse::<i64>().map_err(|e| format!("i: {e}"))?),
            Some(("k", v)) => k = Some(v.parse::<usize>().map_err(|e| format!("k: {e}"))?),
            _ => return Err(format!("unexpected task field {part:?}")),
        }
    }
    match (i, k) {
        (Some(i), Some(k)) if k > 0 => Ok((i, k)),
        (Some(_), Some(_)) => Err("k must be at least 1".into()),
        _ => Err("expected i=<index>,k=<gap>".into()),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure tagged with the stage that produced it.
struct Failure {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for mvrecon_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            error: e.into(),
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).stage("io::write")?;
    }
    fs::write(path, contents).map_err(|e| Failure {
        stage: "io::write",
        error: Error::UnwritablePath {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    })
}

/// Explicit `--config`, else the copy saved next to the bank, else defaults.
fn load_config(args: &ConfigArgs, bank: Option<&Path>) -> Result<Config, Failure> {
    let saved = bank.map(|b| b.join("config.toml")).filter(|p| p.exists());
    let path = args.config.clone().or(saved);
    Config::load_with_overrides(path.as_deref(), &args.overrides).stage("config::load")
}

fn load_bank(args: &BankArgs) -> Result<(SourceModelBank, FusionWeights), Failure> {
    let bank = SourceModelBank::load(&args.bank).stage("training::load_bank")?;
    let text = fs::read_to_string(&args.weights).map_err(|e| Failure {
        stage: "fusion::load_weights",
        error: Error::Parse(format!("{}: {e}", args.weights.display())),
    })?;
    let weights = FusionWeights::from_csv(&text).stage("fusion::load_weights")?;
    Ok((bank, weights))
}

/// Writes the store's frames plus a config that reads them back.
fn export_dataset(cfg: &Config, out: &Path) -> Result<(), Failure> {
    let store = cfg.load_store().stage("data::load")?;
    store.write_png_dirs(out).stage("data::write")?;
    let mut exported = cfg.clone();
    exported.rig = Some(store.rig().clone());
    exported.data.frames_dir = Some(PathBuf::from("."));
    write_file(&out.join("config.toml"), &exported.to_toml())?;
    let mut split = String::from("index,split\n");
    for i in store.target_indices() {
        split.push_str(&format!("{i},{}\n", store.split_of(i).expect("every index is split")));
    }
    write_file(&out.join("split.csv"), &split)?;
    let count = |s| store.indices_in(s).count();
    println!(
        "{} cameras, {} frames each (train {}, val {}, test {})",
        store.rig().cameras().len(),
        store.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData { seed, out, config } => {
            let mut cfg = load_config(&config, None)?;
            if cfg.frames_dir().is_some() {
                return Err(Failure {
                    stage: "data::synthesize",
                    error: Error::Config("synth-data needs a config without data.frames_dir".into()),
                });
            }
            if let Some(seed) = seed {
                cfg.synth.seed = seed;
            }
            export_dataset(&cfg, &out)
        }
        Command::Ingest { out, config } => {
            let cfg = load_config(&config, None)?;
            export_dataset(&cfg.detached().stage("config::load")?, &out)
        }
        Command::Train { source, out, config } => {
            let cfg = load_config(&config, None)?;
            let store = cfg.load_store().stage("data::load")?;
            let sources: Option<Vec<SourceTag>> = match source.as_str() {
                "all" => None,
                tag => Some(vec![tag.parse::<SourceTag>().stage("training::train")?]),
            };
            let trained =
                train_bank(&store, store.rig(), &cfg.model, &cfg.train, sources.as_deref()).stage("training::train")?;
            trained.bank.save(&out).stage("training::save")?;
            for (tag, history) in &trained.histories {
                write_file(&out.join(format!("{tag}_loss.csv")), &loss_history_csv(history))?;
                if let Some(last) = history.last() {
                    println!(
                        "{tag}: {} steps, d_loss {:.4}, g_loss {:.4}, l1 {:.4}",
                        history.len(),
                        last.d_loss,
                        last.g_loss,
                        last.l1
                    );
                }
            }
            write_file(&out.join("config.toml"), &cfg.detached().stage("config::load")?.to_toml())
        }
        Command::Calibrate { bank, out, config } => {
            let cfg = load_config(&config, Some(&bank))?;
            let store = cfg.load_store().stage("data::load")?;
            let models = SourceModelBank::load(&bank).stage("training::load_bank")?;
            let gating = cfg.gating(&store);
            let weights =
                calibrate(&models, &store, &cfg.eval.gaps, &gating, cfg.eval.grid_step).stage("fusion::calibrate")?;
            let csv = weights.to_csv();
            print!("{csv}");
            write_file(&out, &csv)
        }
        Command::Reconstruct {
            bank,
            task,
            mode,
            out,
            config,
        } => {
            let cfg = load_config(&config, Some(&bank.bank))?;
            let (models, weights) = load_bank(&bank)?;
            let store = cfg.load_store().stage("data::load")?;
            let t = task_at(&store, task.0, task.1).stage("data::task")?;
            let t = prepare_task(t, &store, mode, &cfg.gating(&store));
            let truth = t.ground_truth.clone();
            let rec = reconstruct(t, &models, &weights).stage("fusion::fuse")?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).stage("io::write")?;
            }
            rec.fused.to_rgb8().save(&out).map_err(|e| Failure {
                stage: "io::write",
                error: Error::UnwritablePath {
                    path: out.clone(),
                    reason: e.to_string(),
                },
            })?;
            println!("sources: {:?}", rec.candidates.tags().iter().map(|t| t.to_string()).collect::<Vec<_>>());
            if let Some(truth) = truth {
                let p = psnr(&rec.fused, &truth).stage("metrics::psnr")?;
                let s = ssim(&rec.fused, &truth).stage("metrics::ssim")?;
                println!("psnr {p:.4} dB, ssim {s:.4}");
            }
            Ok(())
        }
        Command::Evaluate {
            bank,
            mode,
            out,
            markdown,
            config,
        } => {
            let cfg = load_config(&config, Some(&bank.bank))?;
            let (models, weights) = load_bank(&bank)?;
            let store = cfg.load_store().stage("data::load")?;
            let report = run_sweep(
                &models,
                &weights,
                &store,
                &cfg.eval.gaps,
                mode,
                &cfg.gating(&store),
                &cfg.dataset_id(),
                &cfg.digest(),
            )
            .stage("eval::run_sweep")?;
            let md = emit_report(&report, ReportFormat::Markdown);
            print!("{md}");
            write_file(&out, &emit_report(&report, ReportFormat::Csv))?;
            if let Some(path) = markdown {
                write_file(&path, &md)?;
            }
            Ok(())
        }
        Command::Ablate { bank, out, config } => {
            let cfg = load_config(&config, Some(&bank.bank))?;
            let (models, weights) = load_bank(&bank)?;
            let store = cfg.load_store().stage("data::load")?;
            let gating = cfg.gating(&store);
            let sweep = |mode| {
                run_sweep(
                    &models,
                    &weights,
                    &store,
                    &cfg.eval.gaps,
                    mode,
                    &gating,
                    &cfg.dataset_id(),
                    &cfg.digest(),
                )
                .stage("eval::run_sweep")
            };
            let single = sweep(Mode::SingleView)?;
            let multi = sweep(Mode::MultiView)?;
            let table = ablation_table(&single, &multi);
            print!("{table}");
            if let Some(dir) = out {
                write_file(&dir.join("single.csv"), &emit_report(&single, ReportFormat::Csv))?;
                write_file(&dir.join("multi.csv"), &emit_report(&multi, ReportFormat::Csv))?;
                write_file(&dir.join("ablation.md"), &table)?;
            }
            Ok(())
        }
        Command::Grid {
            bank,
            task,
            mode,
            out,
            config,
        } => {
            let cfg = load_config(&config, Some(&bank.bank))?;
            let (models, weights) = load_bank(&bank)?;
            let store = cfg.load_store().stage("data::load")?;
            let t = task_at(&store, task.0, task.1).stage("data::task")?;
            let t = prepare_task(t, &store, mode, &cfg.gating(&store));
            let Some(truth) = t.ground_truth.clone() else {
                return Err(Failure {
                    stage: "eval::grid",
                    error: Error::InvalidValue("task has no ground truth".into()),
                });
            };
            let rec = reconstruct(t, &models, &weights).stage("fusion::fuse")?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).stage("io::write")?;
            }
            let layout = emit_comparison_grid(&rec.task, &rec.candidates, &rec.fused, &truth, &out)
                .stage("eval::emit_comparison_grid")?;
            println!("{} tiles -> {}", layout.tiles, out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.error);
            ExitCode::from(1)
        }
    }
}
