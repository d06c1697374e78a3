use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lwta_icp::config::RunConfigFile;
use lwta_icp::data::{ingest, load_file, load_preset, DatasetBundle, PRESETS};
use lwta_icp::eval::{feature_map_export, probe_report, sparsity_report};
use lwta_icp::gradcheck::run_suite;
use lwta_icp::lwta::WinnerMode;
use lwta_icp::train::{accuracy, compress, predict, prediction_rng, sweep, train, Checkpoint};
use lwta_icp::Error;

#[derive(Parser)]
#[command(name = "lwta-icp", version, about = "Stochastic LWTA networks trained with a competing-information objective")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration file (TOML); see `defaults`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Gate removal threshold on inclusion probability.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Posterior samples averaged at prediction time.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Dataset preset or file, overriding the config.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Competitors per block.
    #[arg(long, global = true, value_parser = ["2", "4"])]
    u: Option<String>,
    /// Winner selection: stochastic, max or relu.
    #[arg(long, global = true)]
    winner: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and metrics.
    Train,
    /// Accuracy, Bayesian-averaging and sparsity metrics of a checkpoint.
    Eval { checkpoint: PathBuf },
    /// Class probabilities for a dataset file or preset.
    Predict {
        checkpoint: PathBuf,
        /// Dataset to predict on; defaults to the configured test split.
        #[arg(long)]
        input: Option<String>,
    },
    /// Remove low-utility components and report the compression ratio.
    Compress { checkpoint: PathBuf },
    /// Linear probes on the frozen ζ, y, concatenated and conv representations.
    Probe { checkpoint: PathBuf },
    /// Write feature maps of one conv LWTA layer for a test image.
    ExportMaps {
        checkpoint: PathBuf,
        /// Index among the backbone LWTA layers.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Test-split image index.
        #[arg(long, default_value_t = 0)]
        image: usize,
    },
    /// Train k seeds and report best, mean and std test accuracy.
    Sweep { k: usize },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Print the default configuration.
    Defaults,
}

// ── Setup ──────────────────────────────────────────────────────────────────

fn resolve_config(g: &Global) -> Result<RunConfigFile> {
    let mut cfg = match &g.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.display().to_string();
    }
    if let Some(t) = g.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(n) = g.samples {
        cfg.eval.n_samples = n;
    }
    if let Some(p) = &g.preset {
        cfg.dataset = p.clone();
    }
    if let Some(u) = &g.u {
        cfg.train.competitors = u.parse().map_err(|_| Error::config(format!("invalid --u {u}")))?;
    }
    if let Some(w) = &g.winner {
        cfg.train.winner = w.parse::<WinnerMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LWTA_ICP_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("LWTA_ICP_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(())
}

/// Creates `<out>/<command>-NNNN`, the first index not already taken.
fn new_run_dir(out: &str, command: &str) -> Result<PathBuf> {
    let root = Path::new(out);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0..100_000 {
        let dir = root.join(format!("{command}-{i:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e).into()),
        }
    }
    Err(Error::config(format!("no free run directory under {out}")).into())
}

/// Appends lines to `dir/name` and echoes them to stdout.
fn emit(dir: &Path, name: &str, lines: &[String]) -> Result<()> {
    let path = dir.join(name);
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
        println!("{l}");
    }
    Ok(())
}

fn load_data(cfg: &RunConfigFile) -> Result<DatasetBundle> {
    Ok(ingest(&cfg.dataset, cfg.data_seed, cfg.test_fraction)?)
}

fn write_config(dir: &Path, cfg: &RunConfigFile) -> Result<()> {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

// ── Commands ───────────────────────────────────────────────────────────────

fn cmd_train(cfg: &RunConfigFile) -> Result<()> {
    let data = load_data(cfg)?;
    let dir = new_run_dir(&cfg.out, "train")?;
    write_config(&dir, cfg)?;
    println!("run_dir={}", dir.display());
    let ckpt = match train(&cfg.train, &data) {
        Ok(c) => c,
        Err(e) => {
            if let Some(last) = e.last_good {
                last.save(&dir.join("last_good.ckpt"))?;
                emit(&dir, "metrics.txt", &[format!("last_good={}", dir.join("last_good.ckpt").display())])?;
            }
            return Err(e.error.into());
        }
    };
    let path = dir.join("model.ckpt");
    ckpt.save(&path)?;
    let history: Vec<String> = ckpt
        .history
        .iter()
        .flat_map(|m| m.lines().into_iter().skip(1).map(move |l| format!("epoch{}.{l}", m.epoch)))
        .collect();
    let hist_path = dir.join("history.txt");
    fs::write(&hist_path, history.join("\n") + "\n").map_err(|e| Error::io(&hist_path, e))?;
    let n = cfg.eval.n_samples;
    let mut rng = prediction_rng(cfg.train.seed);
    let train_acc = accuracy(&predict(&ckpt.model, &data.train.x, n, &mut rng)?, &data.train.labels);
    let test_acc = accuracy(&predict(&ckpt.model, &data.test.x, n, &mut rng)?, &data.test.labels);
    let mut lines = vec![
        format!("checkpoint={}", path.display()),
        format!("epochs={}", ckpt.history.len()),
        format!("train_acc={train_acc}"),
        format!("test_acc={test_acc}"),
        format!("n_samples={n}"),
    ];
    if let Some(last) = ckpt.history.last() {
        lines.extend(last.lines().into_iter().skip(1).map(|l| format!("final.{l}")));
    }
    emit(&dir, "metrics.txt", &lines)
}

fn cmd_eval(cfg: &RunConfigFile, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let data = load_data(cfg)?;
    let dir = new_run_dir(&cfg.out, "eval")?;
    let n = cfg.eval.n_samples;
    let mut rng = prediction_rng(ckpt.config.seed);
    let p1 = predict(&ckpt.model, &data.test.x, 1, &mut rng)?;
    let pn = predict(&ckpt.model, &data.test.x, n, &mut rng)?;
    let (removed, total) = ckpt.model.component_counts();
    let mut lines = vec![
        format!("checkpoint={}", path.display()),
        format!("test_acc_1={}", accuracy(&p1, &data.test.labels)),
        format!("test_acc_{n}={}", accuracy(&pn, &data.test.labels)),
        format!("removed_components={removed}"),
        format!("total_components={total}"),
        format!("mean_inclusion={}", ckpt.model.mean_inclusion()),
    ];
    let sample: Vec<usize> = (0..data.test.len().min(100)).collect();
    lines.extend(sparsity_report(&ckpt.model, &data.test.x.select_rows(&sample), 1, &mut rng)?.lines());
    emit(&dir, "metrics.txt", &lines)
}

fn cmd_predict(cfg: &RunConfigFile, path: &Path, input: Option<&str>) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let (x, labels) = match input {
        Some(src) => {
            let raw = if PRESETS.contains(&src) { load_preset(src, cfg.data_seed)? } else { load_file(Path::new(src))? };
            let x = match &ckpt.normalization {
                Some(norm) => norm.apply(&raw.x)?,
                None => raw.x,
            };
            (x, raw.labels)
        }
        None => {
            let data = load_data(cfg)?;
            (data.test.x, data.test.labels)
        }
    };
    let dir = new_run_dir(&cfg.out, "predict")?;
    let n = cfg.eval.n_samples;
    let probs = predict(&ckpt.model, &x, n, &mut prediction_rng(ckpt.config.seed))?;
    let t = probs.shape()[1];
    let mut csv = String::from("index,label,pred");
    for c in 0..t {
        csv.push_str(&format!(",p{c}"));
    }
    csv.push('\n');
    for (i, row) in probs.rows().enumerate() {
        let pred = row.iter().enumerate().fold(0, |b, (j, &p)| if p > row[b] { j } else { b });
        csv.push_str(&format!("{i},{},{pred}", labels[i]));
        for p in row {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    let out = dir.join("predictions.csv");
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    emit(
        &dir,
        "metrics.txt",
        &[
            format!("predictions={}", out.display()),
            format!("rows={}", labels.len()),
            format!("accuracy={}", accuracy(&probs, &labels)),
            format!("n_samples={n}"),
        ],
    )
}

fn cmd_compress(cfg: &RunConfigFile, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let data = load_data(cfg)?;
    let dir = new_run_dir(&cfg.out, "compress")?;
    let (small, ratio) = compress(&ckpt, cfg.eval.threshold)?;
    let n = cfg.eval.n_samples;
    let before = accuracy(&predict(&ckpt.model, &data.test.x, n, &mut prediction_rng(ckpt.config.seed))?, &data.test.labels);
    let after = accuracy(&predict(&small.model, &data.test.x, n, &mut prediction_rng(ckpt.config.seed))?, &data.test.labels);
    let out = dir.join("compressed.ckpt");
    small.save(&out)?;
    let (removed, total) = small.model.component_counts();
    emit(
        &dir,
        "metrics.txt",
        &[
            format!("checkpoint={}", out.display()),
            format!("threshold={}", cfg.eval.threshold),
            format!("compression_ratio={ratio}"),
            format!("removed_components={removed}"),
            format!("total_components={total}"),
            format!("test_acc_before={before}"),
            format!("test_acc_after={after}"),
        ],
    )
}

fn cmd_probe(cfg: &RunConfigFile, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let data = load_data(cfg)?;
    let dir = new_run_dir(&cfg.out, "probe")?;
    let report = probe_report(&ckpt.model, &data, cfg.eval.n_samples, &mut prediction_rng(ckpt.config.seed))?;
    emit(&dir, "metrics.txt", &report.lines())
}

fn cmd_export_maps(cfg: &RunConfigFile, path: &Path, layer: usize, image: usize) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let data = load_data(cfg)?;
    if image >= data.test.len() {
        return Err(Error::config(format!("image {image} out of range ({} test images)", data.test.len())).into());
    }
    let dir = new_run_dir(&cfg.out, "maps")?;
    let x = data.test.x.select_rows(&[image]);
    let maps = feature_map_export(&ckpt.model, &x, layer, Some(&dir), &mut prediction_rng(ckpt.config.seed))?;
    let mut lines = vec![
        format!("layer={}", maps.layer),
        format!("image={image}"),
        format!("label={}", data.test.labels[image]),
        format!("maps={}", maps.blocks * maps.competitors),
        format!("overlap_count={}", maps.overlap_count),
    ];
    lines.extend(maps.files.iter().map(|f| format!("file={}", f.display())));
    emit(&dir, "metrics.txt", &lines)
}

fn cmd_sweep(cfg: &RunConfigFile, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("sweep needs k >= 1").into());
    }
    let data = load_data(cfg)?;
    let dir = new_run_dir(&cfg.out, "sweep")?;
    write_config(&dir, cfg)?;
    let rep = sweep(&cfg.train, &data, k, cfg.eval.n_samples)?;
    let mut lines: Vec<String> =
        rep.seeds.iter().zip(&rep.accuracies).map(|(s, a)| format!("seed{s}.test_acc={a}")).collect();
    lines.extend([
        format!("runs={k}"),
        format!("best={}", rep.best),
        format!("best_seed={}", rep.best_seed),
        format!("mean={}", rep.mean),
        format!("std={}", rep.std),
    ]);
    emit(&dir, "metrics.txt", &lines)
}

fn cmd_gradcheck() -> Result<()> {
    let start = std::time::Instant::now();
    let report = run_suite()?;
    for l in report.lines() {
        println!("{l}");
    }
    println!("gradcheck_seconds={:.3}", start.elapsed().as_secs_f64());
    if !report.passed() {
        let w = report.worst().map(|w| w.name.clone()).unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient check failed, worst: {w}")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    if let Command::Defaults = cli.command {
        print!("{}", RunConfigFile::default().to_toml()?);
        return Ok(());
    }
    if let Command::Gradcheck = cli.command {
        return cmd_gradcheck();
    }
    let cfg = resolve_config(&cli.global).context("resolving configuration")?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
        Command::Predict { checkpoint, input } => cmd_predict(&cfg, checkpoint, input.as_deref()),
        Command::Compress { checkpoint } => cmd_compress(&cfg, checkpoint),
        Command::Probe { checkpoint } => cmd_probe(&cfg, checkpoint),
        Command::ExportMaps { checkpoint, layer, image } => cmd_export_maps(&cfg, checkpoint, *layer, *image),
        Command::Sweep { k } => cmd_sweep(&cfg, *k),
        Command::Gradcheck | Command::Defaults => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Error>() {
                Some(err) => (err.kind(), err.exit_code()),
                None => ("config", 2),
            };
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            let message = message.replace('\n', " ");
            eprintln!("error kind={kind} code={code} message={message:?}");
            ExitCode::from(code as u8)
        }
    }
}
