//! Command implementations behind the `cbnn` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{self, DatasetKind, RunConfig};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::net::{
    load_checkpoint, save_checkpoint, train, Checkpoint, LayerParams, LogRow, Network,
};
use crate::predict::{self, Evaluation};
use crate::verify::{self, Check};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_ERROR: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cbnn",
    version,
    about = "Bayesian neural networks with correlated Gaussian posteriors"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "CBNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, env = "CBNN_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network described by a config file (or a bundled config name).
    Train {
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint: error rate, certainty tables, per-example reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config that names the dataset and test subset.
        #[arg(long)]
        config: String,
        /// Predictive draws per image (default from the config).
        #[arg(long)]
        samples: Option<usize>,
        /// Interval coverage levels (default from the config).
        #[arg(long, value_delimiter = ',')]
        coverage: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Raw N×C matrix of predictive softmax outputs for one test image.
    Boxdata {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = predict::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the numerical verification suites.
    Verify {
        #[arg(value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the pass/fail CSV here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a bundled config (or list them when no name is given).
    Config { name: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradients,
    Kl,
    Cholesky,
    Sampling,
    All,
}

/// Reads `spec` as a path, falling back to a bundled config of that name.
pub fn load_config(spec: &str) -> Result<RunConfig> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return config::parse(&text);
    }
    match config::bundled(spec) {
        Some(text) => config::parse(text),
        None => Err(Error::InvalidArgument(format!(
            "{spec:?} is neither a file nor a bundled config"
        ))),
    }
}

fn reshape(mut d: Dataset, cfg: &RunConfig) -> Result<Dataset> {
    if d.shape.len() != cfg.arch.input.len() {
        return Err(Error::ShapeMismatch(format!(
            "dataset images are {} but the network expects {}",
            d.shape, cfg.arch.input
        )));
    }
    d.shape = cfg.arch.input;
    Ok(d)
}

/// Training and test sets as described by the config.
pub fn load_datasets(cfg: &RunConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = data_dir.join("mnist");
            (
                data::load_mnist_dir(&dir, Split::Train)?,
                data::load_mnist_dir(&dir, Split::Test)?,
            )
        }
        DatasetKind::Cifar10 => {
            let dir = data_dir.join("cifar-10-batches-bin");
            (
                data::load_cifar10_dir(&dir, Split::Train)?,
                data::load_cifar10_dir(&dir, Split::Test)?,
            )
        }
        DatasetKind::Blobs {
            per_class,
            separation,
        } => {
            let dims = cfg.arch.input.len();
            let seed = cfg.train.seed;
            (
                data::synthetic_blobs(cfg.arch.classes, per_class, dims, separation, seed)?,
                data::synthetic_blobs(
                    cfg.arch.classes,
                    per_class,
                    dims,
                    separation,
                    seed.wrapping_add(1),
                )?,
            )
        }
    };
    let train = match cfg.train_per_class {
        Some(k) => train.first_k_per_class(k),
        None => train,
    };
    let test = match cfg.test_per_class {
        Some(k) => test.first_k_per_class(k),
        None => test,
    };
    Ok((reshape(train, cfg)?, reshape(test, cfg)?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Per-layer `τ, ρ` of weights and biases.
pub fn write_param_summary<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    writeln!(w, "layer,kind,weights,biases,tau_w,tau_b,rho_w,rho_b")?;
    for (j, (shape, p)) in net.shapes.iter().zip(&net.layers).enumerate() {
        if let LayerParams::Bayes(s) = p {
            writeln!(
                w,
                "{j},{},{},{},{},{},{},{}",
                shape.kind.name(),
                s.weights.len(),
                s.biases.len(),
                s.weights.tau(),
                s.biases.tau(),
                s.weights.rho(),
                s.biases.rho()
            )?;
        }
    }
    Ok(())
}

pub fn write_eval_summary<W: Write>(w: &mut W, evals: &[Evaluation]) -> Result<()> {
    writeln!(
        w,
        "coverage,samples,error_rate,correct_certain,correct_uncertain,wrong_certain,wrong_uncertain"
    )?;
    for e in evals {
        let t = e.table;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.coverage,
            e.samples,
            e.error_rate,
            t.correct_certain,
            t.correct_uncertain,
            t.wrong_certain,
            t.wrong_uncertain
        )?;
    }
    Ok(())
}

pub fn write_boxdata<W: Write>(w: &mut W, rows: &[Vec<f64>]) -> Result<()> {
    let c = rows.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("sample".to_string())
        .chain((0..c).map(|k| format!("p_{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (s, r) in rows.iter().enumerate() {
        let vals: Vec<String> = r.iter().map(f64::to_string).collect();
        writeln!(w, "{s},{}", vals.join(","))?;
    }
    Ok(())
}

/// Paths written by `train` for run id `name`.
pub fn run_paths(out_dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join(format!("{name}.ckpt")),
        out_dir.join(format!("{name}_train.csv")),
        out_dir.join(format!("{name}_params.csv")),
    )
}

pub fn cmd_train(cfg: &mut RunConfig, out_dir: &Path, data_dir: &Path) -> Result<Checkpoint> {
    let (train_set, test_set) = load_datasets(cfg, data_dir)?;
    let net = Network::init(cfg.arch.clone(), cfg.mode, cfg.train.seed)?;
    let mut ck = Checkpoint::new(net, cfg.train.seed);
    let (ck_path, log_path, param_path) = run_paths(out_dir, &cfg.name);
    let mut log = create(&log_path)?;
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let started = Instant::now();
    let mut io_err = None;
    let result = train(&mut ck, &train_set, Some(&test_set), &cfg.train, |row| {
        if let Err(e) = writeln!(log, "{}", row.csv_row()) {
            io_err.get_or_insert(e);
        }
        if let Some(err) = row.approx_test_error {
            eprintln!(
                "[{:>7.1}s] iteration {:>6}  loss {:.5}  approx test error {:.4}",
                started.elapsed().as_secs_f64(),
                row.iteration,
                row.loss,
                err
            );
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    result?;
    save_checkpoint(&ck_path, &ck)?;
    write_param_summary(&mut create(&param_path)?, &ck.net)?;
    eprintln!(
        "wrote {}, {}, {}",
        ck_path.display(),
        log_path.display(),
        param_path.display()
    );
    Ok(ck)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ck: &Checkpoint,
    samples: usize,
    coverage: &[f64],
    seed: u64,
    out_dir: &Path,
    data_dir: &Path,
) -> Result<Vec<Evaluation>> {
    let (_, test) = load_datasets(cfg, data_dir)?;
    check_fit(cfg, ck)?;
    let evals = predict::evaluate_levels(&ck.net, &test, samples, coverage, seed)?;
    let name = &cfg.name;
    write_eval_summary(
        &mut create(&out_dir.join(format!("{name}_eval.csv")))?,
        &evals,
    )?;
    for e in &evals {
        let tag = format!("{}", e.coverage * 100.0).replace('.', "_");
        predict::write_report_csv(
            &mut create(&out_dir.join(format!("{name}_report_{tag}.csv")))?,
            e,
        )?;
    }
    write_param_summary(
        &mut create(&out_dir.join(format!("{name}_params.csv")))?,
        &ck.net,
    )?;
    Ok(evals)
}

fn check_fit(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    if ck.net.arch.input.len() != cfg.arch.input.len() || ck.net.arch.classes != cfg.arch.classes {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} inputs and {} classes, dataset provides {} and {}",
            ck.net.arch.input.len(),
            ck.net.arch.classes,
            cfg.arch.input.len(),
            cfg.arch.classes
        )));
    }
    Ok(())
}

pub fn cmd_boxdata(
    cfg: &RunConfig,
    ck: &Checkpoint,
    index: usize,
    samples: usize,
    seed: u64,
    data_dir: &Path,
) -> Result<Vec<Vec<f64>>> {
    let (_, test) = load_datasets(cfg, data_dir)?;
    check_fit(cfg, ck)?;
    if index >= test.len() {
        return Err(Error::IndexOutOfBounds {
            index: vec![index],
            shape: vec![test.len()],
        });
    }
    let (x, _) = test.batch(&[index]);
    let draws = predict::predictive_samples(&ck.net, &x, samples, seed)?;
    Ok(draws.iter().map(|d| d.row(0).to_vec()).collect())
}

/// Runs the selected verification suites at their acceptance sizes.
pub fn cmd_verify(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Cholesky {
        checks.extend(verify::cholesky_suite(seed, 50)?);
    }
    if all || suite == Suite::Gradients {
        checks.extend(verify::gradient_suite(
            seed,
            20,
            verify::DEFAULT_STEP,
            verify::DEFAULT_TOLERANCE,
        )?);
    }
    if all || suite == Suite::Kl {
        checks.extend(verify::kl_suite(seed, &[2, 4, 8], 10, 1_000_000)?);
    }
    if all || suite == Suite::Sampling {
        let m = [0.8, -1.1, 0.5, 1.7, -0.3, 0.9, -1.4, 0.6];
        let (zm, zc) = verify::sampling_law(&m, 0.4, -0.35, 1_000_000, seed)?;
        checks.push(Check {
            suite: "sampling",
            name: "n=8 mean z-score".into(),
            value: zm,
            tolerance: 4.0,
            passed: zm <= 4.0,
        });
        checks.push(Check {
            suite: "sampling",
            name: "n=8 lag-1 covariance z-score".into(),
            value: zc,
            tolerance: 4.0,
            passed: zc <= 4.0,
        });
    }
    Ok(checks)
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train {
            config,
            out_dir,
            iterations,
            seed,
            data,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_train(&mut cfg, &out_dir, &data.data_dir)?;
        }
        Command::Eval {
            checkpoint,
            config,
            samples,
            coverage,
            seed,
            out_dir,
            data,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(c) = coverage {
                cfg.coverage = c;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let n = samples.unwrap_or(cfg.samples);
            let evals = cmd_eval(
                &cfg,
                &ck,
                n,
                &cfg.coverage,
                seed.unwrap_or(ck.seed),
                &out_dir,
                &data.data_dir,
            )?;
            write_eval_summary(&mut std::io::stdout().lock(), &evals)?;
        }
        Command::Boxdata {
            checkpoint,
            config,
            index,
            samples,
            seed,
            out,
            data,
        } => {
            let cfg = load_config(&config)?;
            let ck = load_checkpoint(&checkpoint)?;
            let rows = cmd_boxdata(
                &cfg,
                &ck,
                index,
                samples,
                seed.unwrap_or(ck.seed),
                &data.data_dir,
            )?;
            match out {
                Some(p) => write_boxdata(&mut create(&p)?, &rows)?,
                None => write_boxdata(&mut std::io::stdout().lock(), &rows)?,
            }
        }
        Command::Verify { suite, seed, out } => {
            let checks = cmd_verify(suite, seed)?;
            let mut text = format!("{}\n", Check::csv_header());
            for c in &checks {
                text.push_str(&c.csv_row());
                text.push('\n');
            }
            print!("{text}");
            if let Some(p) = out {
                create(&p)?.write_all(text.as_bytes())?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            eprintln!("{} checks, {failed} failed", checks.len());
            return Ok(if failed == 0 {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            });
        }
        Command::Config { name } => match name {
            Some(n) => print!(
                "{}",
                config::bundled(&n)
                    .ok_or_else(|| Error::InvalidArgument(format!("no bundled config {n:?}")))?
            ),
            None => {
                for (n, _) in config::BUNDLED {
                    println!("{n}");
                }
            }
        },
    }
    Ok(EXIT_OK)
}
