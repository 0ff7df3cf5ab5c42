//! `rudd`: distill a dataset into a `.rudd` stream, account for its bits, and
//! evaluate or sweep it.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage or config errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rudd::codec::bitstream::{decode_dataset, BitAllocation};
use rudd::config::RunConfig;
use rudd::data::LabeledImageSet;
use rudd::distill::{decode_content, evaluate_images, run_algorithm1, write_metrics, DistillConfig, EvalReport, RunOutput};

#[derive(Parser)]
#[command(name = "rudd", version, about = "Rate-utility dataset distillation")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RUDD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all three phases and write distilled.rudd, metrics.csv and allocation.json.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the bits-per-class of a stream and where its bits go.
    Bpc {
        file: PathBuf,
        /// Print the allocation as JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Train classifiers on a decoded stream and report test accuracy.
    Eval {
        file: PathBuf,
        /// Config naming the test data and the classifier.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill once per final rate-utility weight and tabulate bpc against accuracy.
    Curve {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated second-stage lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<rudd::Error> for Failure {
    fn from(e: rudd::Error) -> Self {
        match e {
            rudd::Error::Config { .. } | rudd::Error::MissingKey(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = match RunConfig::load(path) {
        Err(rudd::Error::Io(e)) => return Err(usage(anyhow!("cannot read config {}: {e}", path.display()))),
        other => other?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.out = out;
    }
    Ok(cfg)
}

fn distill_config(cfg: &RunConfig, data: &LabeledImageSet) -> Result<DistillConfig, Failure> {
    cfg.distill_config(data.num_classes, data.height, data.width).map_err(usage)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out.clone().ok_or_else(|| usage(anyhow!("no output directory: pass --out or set `out` in the config")))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_outputs(dir: &Path, run: &RunOutput) -> anyhow::Result<()> {
    std::fs::write(dir.join("distilled.rudd"), &run.stream)?;
    write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    let json = serde_json::to_string_pretty(&run.allocation.to_json())?;
    std::fs::write(dir.join("allocation.json"), json + "\n")?;
    Ok(())
}

fn cmd_distill(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, seed, out)?;
    let dir = out_dir(&cfg)?;
    let (train, _) = cfg.load_data()?;
    let dc = distill_config(&cfg, &train)?;
    let run = run_algorithm1(&dc, &train, Some(&dir))?;
    write_outputs(&dir, &run)?;
    println!("{}", summary_line(&run.allocation));
    println!("wrote {}", dir.join("distilled.rudd").display());
    Ok(())
}

fn summary_line(a: &BitAllocation) -> String {
    format!("bpc {:.1} ({} bits, {} classes)", a.bpc(), a.total_bits, a.num_classes)
}

fn allocation_table(a: &BitAllocation) -> String {
    let pct = |b: u64| 100.0 * b as f64 / a.total_bits.max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, "bpc            {:.2}", a.bpc());
    let _ = writeln!(s, "classes        {}", a.num_classes);
    let _ = writeln!(s, "total bits     {}", a.total_bits);
    let _ = writeln!(s, "explicit bits  {:>10} {:6.2}%  latent codes", a.explicit_bits, pct(a.explicit_bits));
    let _ = writeln!(s, "implicit bits  {:>10} {:6.2}%  networks", a.implicit_bits, pct(a.implicit_bits));
    let _ = writeln!(s, "  entropy nets {:>10}", a.implicit_entropy_bits);
    let _ = writeln!(s, "  decoders     {:>10}", a.implicit_decoder_bits);
    let _ = writeln!(s, "label bits     {:>10} {:6.2}%", a.label_bits, pct(a.label_bits));
    let _ = write!(s, "header bits    {:>10} {:6.2}%", a.header_bits, pct(a.header_bits));
    s
}

fn cmd_bpc(file: &Path, json: bool) -> CmdResult {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let (_, alloc) = decode_dataset(&bytes)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&alloc.to_json()).map_err(anyhow::Error::from)?);
    } else {
        println!("{}", allocation_table(&alloc));
    }
    Ok(())
}

fn test_set(cfg: &RunConfig) -> Result<LabeledImageSet, Failure> {
    let (_, test) = cfg.load_data()?;
    test.ok_or_else(|| usage(anyhow!("evaluation needs test data: set `test_dir` in the config")))
}

fn report_line(name: &str, r: &EvalReport) -> String {
    format!("{name:<10} mean {:.4} std {:.4} over {} trials", r.mean, r.std, r.accuracies.len())
}

fn cmd_eval(file: &Path, config: &Path, trials: Option<usize>, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed, None)?;
    let test = test_set(&cfg)?;
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let (content, _) = decode_dataset(&bytes)?;
    if (content.num_classes, content.height, content.width) != (test.num_classes, test.height, test.width) {
        return Err(usage(anyhow!(
            "stream holds {} classes of {}x{} images but the test data has {} classes of {}x{}",
            content.num_classes,
            content.height,
            content.width,
            test.num_classes,
            test.height,
            test.width
        )));
    }
    let dc = distill_config(&cfg, &test)?;
    let trials = trials.unwrap_or(cfg.eval_trials);
    let (images, labels) = decode_content(&content)?;
    let report = evaluate_images(&images, &labels, &test, &dc.classifier, &cfg.train, trials, cfg.seed)?;
    for (t, a) in report.accuracies.iter().enumerate() {
        println!("trial {t}: {a:.4}");
    }
    println!("{}", report_line("distilled", &report));
    // sanity row: fresh uniform labels per trial carry no information, so the
    // expected accuracy is exactly chance
    let k = test.num_classes as u32;
    let mut random_acc = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t));
        let noise: Vec<u32> = labels.iter().map(|_| rng.random_range(0..k)).collect();
        let r = evaluate_images(&images, &noise, &test, &dc.classifier, &cfg.train, 1, cfg.seed.wrapping_add(t))?;
        random_acc.push(r.mean);
    }
    println!("{}", report_line("random", &EvalReport::from_accuracies(random_acc)));
    println!("chance     {:.4}", 1.0 / test.num_classes as f64);
    Ok(())
}

/// One row of the rate-utility table.
struct CurvePoint {
    lambda: f64,
    bpc: f64,
    report: EvalReport,
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("lambda,bpc,mean_acc,std_acc\n");
    for p in points {
        let _ = writeln!(s, "{},{:.3},{:.6},{:.6}", p.lambda, p.bpc, p.report.mean, p.report.std);
    }
    s
}

fn cmd_curve(config: &Path, lambdas: &[f64], seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, seed, out)?;
    let dir = out_dir(&cfg)?;
    let (train, test) = cfg.load_data()?;
    let test = test.ok_or_else(|| usage(anyhow!("the curve needs test data: set `test_dir` in the config")))?;
    let base = distill_config(&cfg, &train)?;
    let mut lambdas = lambdas.to_vec();
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(usage(anyhow!("lambda values must be finite")));
    }
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut configs = Vec::new();
    for &lambda in &lambdas {
        let mut c = base.clone();
        c.lambda_lo = lambda;
        c.validate().map_err(usage)?;
        configs.push(c);
    }
    let mut points = Vec::new();
    for (lambda, c) in lambdas.iter().zip(&configs) {
        let sub = dir.join(format!("lambda_{lambda}"));
        std::fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        let run = run_algorithm1(c, &train, Some(&sub))?;
        write_outputs(&sub, &run)?;
        let (images, labels) = decode_content(&run.content)?;
        let report = evaluate_images(&images, &labels, &test, &c.classifier, &cfg.train, cfg.eval_trials, cfg.seed)?;
        log::info!("lambda {lambda}: {}, accuracy {:.4}", summary_line(&run.allocation), report.mean);
        points.push(CurvePoint { lambda: *lambda, bpc: run.allocation.bpc(), report });
    }
    let csv = curve_csv(&points);
    std::fs::write(dir.join("curve.csv"), &csv).context("writing curve.csv")?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(anyhow::Error::from)?;
    }
    match cli.command {
        Command::Distill { config, seed, out } => cmd_distill(&config, seed, out),
        Command::Bpc { file, json } => cmd_bpc(&file, json),
        Command::Eval { file, config, trials, seed } => cmd_eval(&file, &config, trials, seed),
        Command::Curve { config, lambdas, seed, out } => cmd_curve(&config, &lambdas, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
