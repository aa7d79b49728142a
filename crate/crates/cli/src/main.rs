use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eagle_core::checkpoint;
use eagle_core::config::TrainConfig;
use eagle_core::data::{self, Dataset};
use eagle_core::eval::{drift_report, EvalReport};
use eagle_core::train::{self, MetricsRow, Trainer, METRICS_HEADER};
use eagle_core::Error;

#[derive(Parser)]
#[command(name = "eagle", version, about = "Grounded fine-tuning of a toy dual-encoder vision-language model")]
struct Cli {
    /// Config file (`key = value` lines). Defaults to the toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic segmentation corpus to `data_dir`.
    GenData,
    /// Contrastive pretraining; writes `out_dir/pretrain.ckpt`.
    Pretrain,
    /// Grounded tuning from the pretrain checkpoint.
    Tune {
        /// Starting checkpoint (default `out_dir/pretrain.ckpt`).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Resume from a tuning checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Zero-shot and FP@K evaluation on the val split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also run linear probes.
        #[arg(long)]
        probe: bool,
        /// Report file (printed only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe accuracy of the CLS and sequence features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full objective's gradients.
    CheckGrad {
        /// Parameters to check (default: a fresh init).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tunes under every optimizer × supervision cell.
    Ablate {
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(code) = configure_threads() {
        return code;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { step, .. } = &e {
                eprintln!("numerical failure at step {step}");
            }
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<(), ExitCode> {
    let Ok(v) = std::env::var("EAGLE_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            eprintln!("error: EAGLE_THREADS must be a positive integer, got `{v}`");
            return Err(ExitCode::from(2));
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        eprintln!("error: cannot size the worker pool: {e}");
        return Err(ExitCode::from(2));
    }
    Ok(())
}

fn resolve(cli: &Cli) -> eagle_core::Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> eagle_core::Result<ExitCode> {
    let cfg = resolve(&cli)?;
    println!("# resolved config");
    print!("{}", cfg.serialize());
    println!("# seed {}", cfg.seed);
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Pretrain => pretrain(&cfg),
        Command::Tune { init, resume } => tune(&cfg, init, resume),
        Command::Eval { checkpoint, probe, out } => eval(&cfg, &checkpoint, probe, out),
        Command::Probe { checkpoint } => probe(&cfg, &checkpoint),
        Command::CheckGrad { checkpoint } => check_grad(&cfg, checkpoint),
        Command::Ablate { init } => ablate(&cfg, init),
    }
}

fn write_file(path: &Path, text: &str) -> eagle_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_model(cfg: &TrainConfig, dataset: &Dataset, path: &Path) -> eagle_core::Result<eagle_core::encoders::Model> {
    let vocab = train::vocab_for(dataset)?;
    train::model_from_checkpoint(cfg, &vocab, checkpoint::load(path)?)
}

fn gen_data(cfg: &TrainConfig) -> eagle_core::Result<ExitCode> {
    data::generate(&cfg.generate_config(), &cfg.data_dir, &train::root_rng(cfg).split("data"))?;
    let dataset = data::load(&cfg.data_dir)?;
    let counts = dataset.class_counts(&dataset.indices(data::Split::Train));
    println!(
        "wrote {} images ({} train, {} val) to {}",
        dataset.images.len(),
        dataset.indices(data::Split::Train).len(),
        dataset.indices(data::Split::Val).len(),
        cfg.data_dir.display()
    );
    for (name, n) in dataset.class_names().iter().zip(counts) {
        println!("  {name:<10} {n} train masks");
    }
    Ok(ExitCode::SUCCESS)
}

fn pretrain(cfg: &TrainConfig) -> eagle_core::Result<ExitCode> {
    let dataset = data::load(&cfg.data_dir)?;
    let (model, log) = train::pretrain(cfg, &dataset)?;
    let path = cfg.pretrain_checkpoint();
    checkpoint::save(&path, &train::model_checkpoint(&model))?;
    println!("pretrained {} steps, final loss {:.4}", log.losses.len(), log.losses.last().copied().unwrap_or(f64::NAN));
    let report = train::evaluate_model(cfg, &model, &dataset, false)?;
    write_file(&cfg.out_dir.join("report_pretrain.txt"), &report.to_kv())?;
    print!("{}", report.to_kv());
    println!("checkpoint {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Rows of an existing metrics file up to and including `step`.
fn kept_metrics(path: &Path, step: u64) -> eagle_core::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "unexpected metrics header".into(),
        });
    }
    Ok(lines
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(str::to_string)
        .collect())
}

fn tune(cfg: &TrainConfig, init: Option<PathBuf>, resume: Option<PathBuf>) -> eagle_core::Result<ExitCode> {
    let dataset = data::load(&cfg.data_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let (mut trainer, kept) = match resume {
        Some(path) => {
            let t = Trainer::resume(cfg, &dataset, checkpoint::load(&path)?)?;
            let kept = if metrics_path.exists() {
                kept_metrics(&metrics_path, t.step_count())?
            } else {
                Vec::new()
            };
            println!("resuming at step {} from {}", t.step_count(), path.display());
            (t, kept)
        }
        None => {
            let path = init.unwrap_or_else(|| cfg.pretrain_checkpoint());
            let model = load_model(cfg, &dataset, &path)?;
            let before = train::evaluate_model(cfg, &model, &dataset, false)?;
            write_file(&cfg.out_dir.join("report_before.txt"), &before.to_kv())?;
            (Trainer::new(cfg, &dataset, model)?, Vec::new())
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let file = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |line: &str| writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| io_err(&metrics_path, e));
    put(METRICS_HEADER)?;
    for line in &kept {
        put(line)?;
    }
    let every = cfg.checkpoint_every;
    let out_dir = cfg.out_dir.clone();
    trainer.run(|t, row: &MetricsRow| {
        put(&row.csv())?;
        if every > 0 && row.step.is_multiple_of(every) {
            checkpoint::save(&out_dir.join(format!("step{:06}.ckpt", row.step)), &t.checkpoint())?;
        }
        Ok(())
    })?;

    checkpoint::save(&cfg.out_dir.join("tuned.ckpt"), &trainer.checkpoint())?;
    let report = train::evaluate_model(cfg, &trainer.model, &dataset, false)?;
    write_file(&cfg.out_dir.join("report.txt"), &report.to_kv())?;
    print!("{}", report.to_kv());
    let before_path = cfg.out_dir.join("report_before.txt");
    if let Ok(text) = fs::read_to_string(&before_path) {
        let before = EvalReport::from_kv(&text)?;
        let d = drift_report(&before, &report);
        let mut s = format!("cls_delta={}\nseq_delta={}\n", d.cls_delta, d.seq_delta);
        for (k, v) in &d.fp_deltas {
            s.push_str(&format!("fp@{k}_delta={v}\n"));
        }
        write_file(&cfg.out_dir.join("drift.txt"), &s)?;
        print!("{s}");
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &TrainConfig, path: &Path, probe: bool, out: Option<PathBuf>) -> eagle_core::Result<ExitCode> {
    let dataset = data::load(&cfg.data_dir)?;
    let model = load_model(cfg, &dataset, path)?;
    let report = train::evaluate_model(cfg, &model, &dataset, probe)?;
    if let Some(out) = out {
        write_file(&out, &report.to_kv())?;
    }
    print!("{}", report.to_kv());
    Ok(ExitCode::SUCCESS)
}

fn probe(cfg: &TrainConfig, path: &Path) -> eagle_core::Result<ExitCode> {
    use eagle_core::eval::{linear_probe, ProbeMode};
    let dataset = data::load(&cfg.data_dir)?;
    let model = load_model(cfg, &dataset, path)?;
    let cls = linear_probe(&model, &cfg.arch, &dataset, ProbeMode::Cls, &cfg.probe)?;
    let seq = linear_probe(&model, &cfg.arch, &dataset, ProbeMode::Seq, &cfg.probe)?;
    println!("probe_cls_acc={cls}\nprobe_seq_acc={seq}");
    Ok(ExitCode::SUCCESS)
}

fn check_grad(cfg: &TrainConfig, path: Option<PathBuf>) -> eagle_core::Result<ExitCode> {
    let dataset = train::in_memory_dataset(cfg)?;
    let model = match path {
        Some(p) => load_model(cfg, &dataset, &p)?,
        None => train::init_model(cfg, &train::vocab_for(&dataset)?)?,
    };
    let report = train::gradient_check(cfg, &dataset, &model)?;
    println!("{report}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn ablate(cfg: &TrainConfig, init: Option<PathBuf>) -> eagle_core::Result<ExitCode> {
    let dataset = data::load(&cfg.data_dir)?;
    let start = load_model(cfg, &dataset, &init.unwrap_or_else(|| cfg.pretrain_checkpoint()))?;
    let dir = cfg.out_dir.join("ablate");
    let baseline = train::evaluate_model(cfg, &start, &dataset, false)?;
    write_file(&dir.join("baseline.txt"), &baseline.to_kv())?;
    println!("{:<12} {:>8} {:>8} {:>8}", "cell", "cls_acc", "seq_acc", "fp@1");
    let fp1 = |r: &EvalReport| r.fp(1).map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("{:<12} {:>8.4} {:>8.4} {:>8}", "baseline", baseline.cls_acc, baseline.seq_acc, fp1(&baseline));
    for (cell, report) in train::ablate(cfg, &dataset, &start)? {
        write_file(&dir.join(format!("{}.txt", cell.name())), &report.to_kv())?;
        println!("{:<12} {:>8.4} {:>8.4} {:>8}", cell.name(), report.cls_acc, report.seq_acc, fp1(&report));
    }
    Ok(ExitCode::SUCCESS)
}
