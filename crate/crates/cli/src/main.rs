mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gca_core::checkpoint::{content_hash, ModelSpec};
use gca_core::dataio::Partitions;
use gca_core::experiment::{
    load_series, model_config, run_task, select_pair, simulate_family, transfer_data,
    transfer_matrix,
};
use gca_core::ledger::{
    data_hash, read_run_ledger, versioned_dir, write_json, write_jsonl, LEDGER_SCHEMA_VERSION,
};
use gca_core::synthgen::write_dataset;
use gca_core::trainer::evaluate;
use gca_core::{
    Checkpoint, Domain, ExperimentConfig, GcaError, MatrixLedger, RawSeries, Result, RunLedger,
    SeriesWindow, TransferData, Variant,
};

#[derive(Parser)]
#[command(
    name = "gca",
    version,
    about = "Granger causality alignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; a numbered sibling is used if it already exists.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for scripting; every run is already deterministic.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the `[synthgen]` domains into a dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one transfer task and write checkpoint, logs and ledger.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gca", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Score a checkpoint on the target test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed the checkpoint was trained with; selects the same split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Seed sweeps of each variant over every ordered domain pair.
    TransferMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "gca,gca-r,gca-e,gca-s,gca-alpha", value_parser = parse_variant)]
        variants: Vec<Variant>,
        /// Add an LSTM_S+T column.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Render curves and structure heatmaps from run ledgers.
    Plot {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: GcaError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &GcaError) -> u8 {
    match e {
        GcaError::Config { .. } | GcaError::InvalidArgument(_) | GcaError::MissingField(_) => 2,
        GcaError::NonFinite(_) | GcaError::Divergence { .. } => 3,
        GcaError::Io { .. }
        | GcaError::Parse { .. }
        | GcaError::Json(_)
        | GcaError::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common } => simulate(&common),
        Command::Train {
            common,
            seed,
            variant,
        } => train(&common, seed, variant),
        Command::Evaluate {
            common,
            checkpoint,
            seed,
            horizon,
        } => evaluate_checkpoint(&common, &checkpoint, seed, horizon),
        Command::TransferMatrix {
            common,
            seeds,
            mut variants,
            with_baseline,
        } => {
            if with_baseline && !variants.contains(&Variant::LstmSt) {
                variants.push(Variant::LstmSt);
            }
            matrix(&common, &seeds, &variants)
        }
        Command::Plot { ledgers, out } => {
            let out = versioned_dir(&out.unwrap_or_else(|| PathBuf::from("runs/plots")));
            let runs = ledgers
                .iter()
                .map(|p| read_run_ledger(p))
                .collect::<Result<Vec<RunLedger>>>()?;
            for (i, (run, path)) in runs.iter().zip(&ledgers).enumerate() {
                let prefix = if runs.len() == 1 {
                    String::new()
                } else {
                    format!("run{}_", i + 1)
                };
                for file in plot::render_all(run, &out, &prefix)? {
                    println!("{} <- {}", file.display(), path.display());
                }
            }
            Ok(())
        }
    }
}

fn output_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = versioned_dir(common.out.as_deref().unwrap_or(Path::new(default)));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn io_error(path: &Path, source: std::io::Error) -> GcaError {
    GcaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let s = cfg
        .synthgen
        .as_ref()
        .ok_or_else(|| GcaError::MissingField("synthgen".into()))?;
    let family = simulate_family(&cfg)?;
    let dir = output_dir(common, "data/synthetic")?;
    for path in write_dataset(&dir, &family, s.structure_jitter, s.seed)? {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    domain: &'a str,
    train: Vec<usize>,
    labeled: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl<'a> SplitRecord<'a> {
    fn of(domain: &'a str, p: &Partitions) -> Self {
        let starts = |ws: &[SeriesWindow]| ws.iter().map(|w| w.start).collect::<Vec<_>>();
        SplitRecord {
            domain,
            train: starts(&p.train),
            labeled: p
                .train
                .iter()
                .filter(|w| w.labeled)
                .map(|w| w.start)
                .collect(),
            val: starts(&p.val),
            test: starts(&p.test),
        }
    }
}

fn task_data(
    cfg: &ExperimentConfig,
    source: &RawSeries,
    target: &RawSeries,
    variant: Variant,
    seed: u64,
) -> Result<TransferData> {
    let t_in = model_config(cfg, source, target, variant)?.t_in();
    transfer_data(cfg, source, target, t_in, seed)
}

fn train(common: &Common, seed: u64, variant: Variant) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let series = load_series(&cfg)?;
    let (source, target) = select_pair(&cfg, &series)?;
    let dir = output_dir(common, "runs/train")?;

    let task = run_task(&cfg, source, target, variant, seed)?;
    let ckpt = dir.join("best.ckpt");
    task.outcome.best.save(&ckpt)?;
    let mut ledger = RunLedger::from_task(&task, source, target)?;
    ledger.checkpoint = Some(PathBuf::from("best.ckpt"));
    write_json(&dir.join("ledger.json"), &ledger)?;
    write_jsonl(&dir.join("train_log.jsonl"), &task.outcome.log.steps)?;
    write_jsonl(&dir.join("epochs.jsonl"), &task.outcome.log.epochs)?;
    let toml = cfg.to_toml_string()?;
    fs::write(dir.join("config.toml"), toml).map_err(|e| io_error(&dir.join("config.toml"), e))?;

    let data = task_data(&cfg, source, target, variant, seed)?;
    let splits = [
        SplitRecord::of(&source.domain_id, &data.source.partitions),
        SplitRecord::of(&target.domain_id, &data.target.partitions),
    ];
    write_json(&dir.join("splits.json"), &splits)?;

    let m = &ledger.metrics;
    print!(
        "{} {}→{} seed {seed}: test RMSE {:.4} MAE {:.4}",
        variant, ledger.source, ledger.target, m.test_rmse, m.test_mae
    );
    if let (Some(s), Some(t)) = (m.auprc_source, m.auprc_target) {
        print!(", AUPRC source {s:.3} target {t:.3}");
    }
    println!("\n{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    source: String,
    target: String,
    checkpoint_epoch: usize,
    horizon: usize,
    windows: usize,
    test_rmse: f64,
    test_mae: f64,
    data_hash: String,
}

fn evaluate_checkpoint(
    common: &Common,
    path: &Path,
    seed: u64,
    horizon: Option<usize>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let ckpt = Checkpoint::load(path)?;
    let series = load_series(&cfg)?;
    let (source, target) = select_pair(&cfg, &series)?;
    let t_in = match &ckpt.spec {
        ModelSpec::Gca(m) => m.t_in(),
        ModelSpec::Lstm(_) => model_config(&cfg, source, target, Variant::LstmSt)?.t_in(),
    };
    let data = transfer_data(&cfg, source, target, t_in, seed)?;
    let model = ckpt.restore()?;
    let horizon = horizon.unwrap_or(cfg.data.horizon);
    let test = &data.target.partitions.test;
    let result = evaluate(&model, test, Domain::Target, horizon)?;

    let dir = output_dir(common, "runs/eval")?;
    let report = EvalReport {
        source: source.domain_id.clone(),
        target: target.domain_id.clone(),
        checkpoint_epoch: ckpt.epoch,
        horizon,
        windows: test.len(),
        test_rmse: result.rmse,
        test_mae: result.mae,
        data_hash: data_hash(&[source, target]),
    };
    write_json(&dir.join("metrics.json"), &report)?;

    // forecasts in the target's original units
    let norm = ckpt.norm_target.as_ref().unwrap_or(&data.target.norm);
    let csv_path = dir.join("forecasts.csv");
    let mut out = String::from("window_start,step");
    let dims = target.values.cols();
    for kind in ["pred", "true"] {
        for d in 0..dims {
            out.push_str(&format!(",{kind}_{d}"));
        }
    }
    out.push('\n');
    for ((w, f), y) in test.iter().zip(&result.forecasts).zip(&result.targets) {
        let (f, y) = (norm.invert(f), norm.invert(y));
        for step in 0..f.rows() {
            out.push_str(&format!("{},{}", w.start, step + 1));
            for x in f.row(step).iter().chain(y.row(step)) {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
    }
    let mut file = fs::File::create(&csv_path).map_err(|e| io_error(&csv_path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| io_error(&csv_path, e))?;
    println!(
        "test RMSE {:.4} MAE {:.4} over {} windows\n{}",
        result.rmse,
        result.mae,
        test.len(),
        dir.display()
    );
    Ok(())
}

fn matrix(common: &Common, seeds: &[u64], variants: &[Variant]) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let series = load_series(&cfg)?;
    let dir = output_dir(common, "runs/matrix")?;
    let table = transfer_matrix(&cfg, &series, variants, seeds, |r| {
        eprintln!(
            "{}→{} {} seed {}: test RMSE {:.4}",
            r.source_id, r.target_id, r.variant, r.seed, r.test_rmse
        );
    })?;
    let rendered = table.render();
    let refs: Vec<_> = series.iter().collect();
    let ledger = MatrixLedger {
        schema_version: LEDGER_SCHEMA_VERSION,
        config_hash: content_hash(&cfg)?,
        data_hash: data_hash(&refs),
        seeds: seeds.to_vec(),
        table,
        rendered: rendered.clone(),
    };
    write_json(&dir.join("matrix.json"), &ledger)?;
    let table_path = dir.join("table.txt");
    fs::write(&table_path, &rendered).map_err(|e| io_error(&table_path, e))?;
    print!("{rendered}");
    println!("{}", dir.display());
    Ok(())
}
