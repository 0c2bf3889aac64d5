mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csipred::channel::{load_dataset, save_dataset, Dataset};
use csipred::models::checkpoint::{load_checkpoint, save_checkpoint};
use csipred::models::{audit_parameters, gradcheck_family, Family};
use csipred::train_eval::{
    evaluate, fit_family, sweep_to_csv, write_records, ExperimentRecord, PreparedData, Score, SweepConfig,
};

use config::{parse_lengths, FileConfig};

/// Gradient-check tolerance (max relative error).
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "csipred", version, about = "Multi-step channel prediction experiments")]
struct Cli {
    /// TOML configuration with optional [scenario], [train] and [sweep] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every output artifact.
    #[arg(long, global = true, env = "CSIPRED_OUT_DIR", default_value = "csipred-out")]
    out_dir: PathBuf,
    /// Seed for the scenario and for training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training history length.
    #[arg(long)]
    l: Option<usize>,
    /// Training horizon.
    #[arg(long)]
    delta: Option<usize>,
    /// Frames to simulate when no dataset file is given.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it with a JSON sidecar.
    Generate {
        #[arg(long)]
        frames: Option<usize>,
        /// Dataset path (default: <out-dir>/dataset.bin).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one model at one SNR and save the best-validation checkpoint.
    Train {
        family: Family,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint on the test split at one or more L:DELTA pairs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_lengths, default_value = "16:4")]
        lengths: Vec<(usize, usize)>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train every model at every SNR and score it at every length pair.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<Family>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_lengths)]
        lengths: Option<Vec<(usize, usize)>>,
        /// Leave out the last-value-hold rows.
        #[arg(long)]
        no_hold: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Per-block parameter counts and the difference to reference totals.
    Paramcount {
        /// A family id or "all".
        model: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        l: usize,
        #[arg(long, default_value_t = 4)]
        delta: usize,
    },
    /// Finite-difference gradient check of a tiny model in 64-bit arithmetic.
    Gradcheck {
        /// A neural family id or "all".
        model: String,
    },
}

fn families_arg(model: &str, neural_only: bool) -> Result<Vec<Family>> {
    if model == "all" {
        return Ok(Family::ALL.into_iter().filter(|f| !neural_only || f.is_neural()).collect());
    }
    let f: Family = model.parse()?;
    if neural_only && !f.is_neural() {
        bail!("{f} has no trainable gradient");
    }
    Ok(vec![f])
}

impl Cli {
    fn resolve(&self, overrides: &TrainOverrides) -> Result<FileConfig> {
        let mut c = FileConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.scenario.seed = s;
            c.train.seed = s;
        }
        let t = &mut c.train;
        t.epochs = overrides.epochs.unwrap_or(t.epochs);
        t.batch_size = overrides.batch_size.unwrap_or(t.batch_size);
        t.lr = overrides.lr.unwrap_or(t.lr);
        t.l = overrides.l.unwrap_or(t.l);
        t.delta = overrides.delta.unwrap_or(t.delta);
        t.frames = overrides.frames.unwrap_or(t.frames);
        c.validate()?;
        Ok(c)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}

fn dataset(path: Option<&Path>, cfg: &FileConfig) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?;
            eprintln!("loaded {} frames from {}", ds.frames.len(), p.display());
            Ok(ds)
        }
        None => {
            eprintln!("simulating {} frames (seed {})", cfg.train.frames, cfg.scenario.seed);
            Ok(Dataset::generate(cfg.scenario, cfg.train.frames)?)
        }
    }
}

fn describe(score: &Score) -> String {
    match score {
        Score::Nmse(v) => format!("{v:.6} ({:.2} dB)", 10.0 * v.log10()),
        Score::Unsupported(why) => format!("unsupported: {why}"),
        Score::Failed(why) => format!("failed: {why}"),
    }
}

fn cmd_generate(cli: &Cli, frames: Option<usize>, output: Option<PathBuf>, force: bool) -> Result<()> {
    let mut cfg = cli.resolve(&TrainOverrides::default())?;
    cfg.train.frames = frames.unwrap_or(cfg.train.frames);
    if cfg.train.frames == 0 {
        bail!("--frames must be positive");
    }
    let path = match output {
        Some(p) => p,
        None => cli.out("dataset.bin")?,
    };
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let t0 = Instant::now();
    let ds = Dataset::generate(cfg.scenario, cfg.train.frames)?;
    save_dataset(&path, &ds)?;
    let side = ds.sidecar();
    cfg.snapshot(&cli.out("generate.resolved.toml")?, &[format!("dataset = {}", path.display())])?;
    println!(
        "wrote {} ({} frames: train {}, validation {}, test {}{}) in {:.1}s",
        path.display(),
        side.frames,
        side.train,
        side.validation,
        side.test,
        if side.stratified { "" } else { ", unstratified" },
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, family: Family, dataset_path: Option<&Path>, snr: Option<f64>, o: &TrainOverrides) -> Result<()> {
    let mut cfg = cli.resolve(o)?;
    cfg.train.snr_db = snr.unwrap_or(cfg.train.snr_db);
    let ds = dataset(dataset_path, &cfg)?;
    let data = PreparedData::new(&ds, cfg.train.snr_db)?;
    let stem = format!("{}_snr{}_seed{}", family.id(), cfg.train.snr_db, cfg.train.seed);
    let t0 = Instant::now();
    let (bundle, history) = fit_family(family, &data, &cfg.train)?;
    let ckpt = cli.out(&format!("{stem}.ckpt"))?;
    save_checkpoint(&ckpt, &bundle)?;
    let mut notes = vec![format!("command = train {}", family.id()), format!("checkpoint = {}", ckpt.display())];
    if let Some(p) = dataset_path {
        notes.push(format!("dataset = {}", p.display()));
    }
    cfg.snapshot(&cli.out(&format!("{stem}.resolved.toml"))?, &notes)?;
    if let Some(h) = &history {
        std::fs::write(cli.out(&format!("{stem}_history.json"))?, serde_json::to_string_pretty(h)?)?;
        std::fs::write(cli.out(&format!("{stem}_history.dat"))?, plot::history_table(h))?;
        println!(
            "{family}: best epoch {} of {}, validation nmse {:.6}",
            h.best_epoch + 1,
            h.val_nmse.len(),
            h.best_val_nmse
        );
    }
    let score = evaluate(&bundle, &data, cfg.train.l, cfg.train.delta)?;
    println!(
        "{family}: test nmse {} at l={} delta={}; {} parameters; {:.1}s; checkpoint {}",
        describe(&score),
        cfg.train.l,
        cfg.train.delta,
        bundle.num_params(),
        t0.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(
    cli: &Cli,
    checkpoint: &Path,
    dataset_path: Option<&Path>,
    snr: Option<f64>,
    lengths: &[(usize, usize)],
    frames: Option<usize>,
) -> Result<()> {
    let mut cfg = cli.resolve(&TrainOverrides {
        frames,
        ..TrainOverrides::default()
    })?;
    cfg.train.snr_db = snr.unwrap_or(cfg.train.snr_db);
    let bundle = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = dataset(dataset_path, &cfg)?;
    if bundle.config().input_dim() != ds.scenario.real_dim() {
        bail!(
            "checkpoint expects snapshots of width {}, dataset has {}",
            bundle.config().input_dim(),
            ds.scenario.real_dim()
        );
    }
    let data = PreparedData::new(&ds, cfg.train.snr_db)?;
    let mut records = Vec::new();
    for &(l, delta) in lengths {
        let t0 = Instant::now();
        let score = evaluate(&bundle, &data, l, delta)?;
        println!("{} l={l} delta={delta}: {}", bundle.family(), describe(&score));
        records.push(ExperimentRecord {
            model: bundle.family().id().to_string(),
            snr_db: cfg.train.snr_db,
            l,
            delta,
            score,
            seed: cfg.train.seed,
            runtime_s: t0.elapsed().as_secs_f64(),
            checkpoint: Some(checkpoint.to_path_buf()),
        });
    }
    let csv = cli.out("evaluate.csv")?;
    write_records(std::fs::File::create(&csv)?, &records)?;
    cfg.snapshot(
        &cli.out("evaluate.resolved.toml")?,
        &[format!("command = evaluate {}", checkpoint.display())],
    )?;
    println!("wrote {}", csv.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cli: &Cli,
    dataset_path: Option<&Path>,
    families: Option<Vec<Family>>,
    snr: Option<Vec<f64>>,
    lengths: Option<Vec<(usize, usize)>>,
    no_hold: bool,
    o: &TrainOverrides,
) -> Result<()> {
    let mut cfg = cli.resolve(o)?;
    let s = &mut cfg.sweep;
    s.families = families.unwrap_or(std::mem::take(&mut s.families));
    s.snr_grid = snr.unwrap_or(std::mem::take(&mut s.snr_grid));
    s.lengths = lengths.unwrap_or(std::mem::take(&mut s.lengths));
    s.include_hold &= !no_hold;
    let ds = dataset(dataset_path, &cfg)?;
    let sweep_cfg = SweepConfig {
        families: cfg.sweep.families.clone(),
        snr_grid: cfg.sweep.snr_grid.clone(),
        lengths: cfg.sweep.lengths.clone(),
        include_hold: cfg.sweep.include_hold,
        train: cfg.train.clone(),
        checkpoint_dir: Some(cli.out("checkpoints")?),
    };
    cfg.snapshot(&cli.out("sweep.resolved.toml")?, &["command = sweep".to_string()])?;
    let csv = cli.out("sweep.csv")?;
    let records = sweep_to_csv(&ds, &sweep_cfg, &csv)?;
    for r in &records {
        println!("{} snr={} l={} delta={}: {}", r.model, r.snr_db, r.l, r.delta, describe(&r.score));
    }
    std::fs::write(cli.out("sweep.dat")?, plot::nmse_table(&records))?;
    println!("wrote {} ({} records)", csv.display(), records.len());
    let failed = records.iter().filter(|r| matches!(r.score, Score::Failed(_))).count();
    if failed > 0 {
        bail!("{failed} sweep cells failed");
    }
    Ok(())
}

fn cmd_paramcount(model: &str, dim: usize, l: usize, delta: usize) -> Result<()> {
    for f in families_arg(model, false)? {
        let audit = audit_parameters(&f.config(dim, l, delta))?;
        println!("{f}");
        for (block, n) in &audit.blocks {
            println!("  {block:<24} {n:>9}");
        }
        print!("  {:<24} {:>9}", "total", audit.total);
        match (audit.reference, audit.delta()) {
            (Some(r), Some(d)) => println!(
                "   reference {r}, delta {d:+} ({:+.3}%)",
                100.0 * d as f64 / r as f64
            ),
            _ => println!("   (no reference)"),
        }
    }
    Ok(())
}

fn cmd_gradcheck(model: &str) -> Result<()> {
    let mut failed = Vec::new();
    for f in families_arg(model, true)? {
        let r = gradcheck_family(f, 4, 2, 5)?;
        let ok = r.max_rel_error < GRADCHECK_TOL;
        println!(
            "{f}: max relative error {:.3e} over {} probes: {}",
            r.max_rel_error,
            r.probes,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(f.id());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { frames, output, force } => cmd_generate(cli, *frames, output.clone(), *force),
        Command::Train {
            family,
            dataset,
            snr,
            overrides,
        } => cmd_train(cli, *family, dataset.as_deref(), *snr, overrides),
        Command::Evaluate {
            checkpoint,
            dataset,
            snr,
            lengths,
            frames,
        } => cmd_evaluate(cli, checkpoint, dataset.as_deref(), *snr, lengths, *frames),
        Command::Sweep {
            dataset,
            families,
            snr,
            lengths,
            no_hold,
            overrides,
        } => cmd_sweep(
            cli,
            dataset.as_deref(),
            families.clone(),
            snr.clone(),
            lengths.clone(),
            *no_hold,
            overrides,
        ),
        Command::Paramcount { model, dim, l, delta } => cmd_paramcount(model, *dim, *l, *delta),
        Command::Gradcheck { model } => cmd_gradcheck(model),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
