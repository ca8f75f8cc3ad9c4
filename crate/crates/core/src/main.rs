use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dibc::artifacts::{classify_points, write_fit, write_json, DataSource, FitManifest};
use dibc::estimate::Loss;
use dibc::eval::{
    compute_metrics, generate_synthetic, load_csv, read_labels, write_points, CsvSchema,
};
use dibc::kernels::stream_rng;
use dibc::params::{posterior_predictive_sample, PosteriorDraws};
use dibc::runtime::{run_pipeline, serve, Endpoint, PipelineConfig, TcpTransport, TransportChoice};
use dibc::{Error, Result};

#[derive(Parser)]
#[command(name = "dibc", version, about = "Distributed Bayesian clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the four-cluster benchmark.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write its artifacts.
    Fit(FitArgs),
    /// Score predicted labels against true labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred_column: Option<String>,
        #[arg(long)]
        truth_column: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign new points to fitted clusters.
    Classify {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Coordinate columns, by default every column except `label`.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        log_columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate from the posterior predictive.
    Predict {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve one master connection.
    Worker {
        #[arg(long)]
        listen: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    /// Rerun the fit recorded in a manifest.
    #[arg(long, conflicts_with = "data")]
    manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
    /// Label column, used for metrics only. Defaults to `label` when present.
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long, value_delimiter = ',')]
    log_columns: Vec<String>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    l: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long, default_value_t = 100)]
    refine_samples: usize,
    #[arg(long, default_value_t = 20)]
    candidates: usize,
    #[arg(long, default_value_t = 2000)]
    param_iters: usize,
    #[arg(long, default_value_t = 1000)]
    param_burn_in: usize,
    #[arg(long, default_value_t = 1.0)]
    refine_alpha: f64,
    #[arg(long, default_value = "vi")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: TransportArg,
    /// Remote workers for the tcp transport; loopback workers otherwise.
    #[arg(long, value_delimiter = ',')]
    worker_addrs: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// `DIBC_SEED` takes precedence over `--seed`.
fn seed(flag: u64) -> Result<u64> {
    match std::env::var("DIBC_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::Config(format!("DIBC_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(flag),
    }
}

fn has_column(path: &Path, name: &str) -> Result<bool> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(headers.iter().any(|h| h.trim() == name))
}

fn fit(args: FitArgs) -> Result<()> {
    let (source, cfg) = match &args.manifest {
        Some(m) => {
            let manifest = FitManifest::load(m)?;
            (manifest.data, manifest.config)
        }
        None => {
            let path = args
                .data
                .clone()
                .expect("clap requires --data without --manifest");
            let path = std::fs::canonicalize(&path).unwrap_or(path);
            let label = match args.label_column.clone() {
                Some(l) => Some(l),
                None if has_column(&path, "label")? => Some("label".to_string()),
                None => None,
            };
            let transport = match args.transport {
                TransportArg::Inproc => TransportChoice::InProc,
                TransportArg::Tcp => TransportChoice::Tcp {
                    addrs: args.worker_addrs.clone(),
                },
            };
            let cfg = PipelineConfig {
                workers: args.workers,
                clusters: args.k,
                subcomponents: args.l,
                n_iters: args.iters,
                burn_in: args.burn_in,
                refine_samples: args.refine_samples,
                candidates: args.candidates,
                param_iters: args.param_iters,
                param_burn_in: args.param_burn_in,
                seed: seed(args.seed)?,
                loss: args.loss.parse::<Loss>()?,
                refine_alpha: args.refine_alpha,
                transport,
                ..Default::default()
            };
            let source = DataSource {
                path,
                columns: args.columns.clone(),
                label,
                log_columns: args.log_columns.clone(),
            };
            (source, cfg)
        }
    };
    cfg.validate()?;
    let schema = CsvSchema {
        columns: source.columns.clone(),
        label: source.label.clone(),
        log_columns: source.log_columns.clone(),
    };
    let data = load_csv(&source.path, &schema)?;
    info!(
        "fitting {} rows in {} dimensions",
        data.points.len(),
        data.points.dim()
    );
    let result = run_pipeline(&cfg, &data.points)?;
    let metrics = write_fit(&args.out_dir, source, &result, data.labels.as_deref())?;
    let found = result.diagnostics.cluster_sizes.len();
    match metrics {
        Some(m) => println!(
            "{found} clusters; accuracy {:.4}, ARI {:.4}, F {:.4}",
            m.accuracy, m.ari, m.f_measure
        ),
        None => println!("{found} clusters"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, seed: s, out } => {
            let data = generate_synthetic(n, &mut stream_rng(seed(s)?, 0))?;
            write_points(&out, &data.points, Some(("label", &data.labels)))
        }
        Command::Fit(args) => fit(args),
        Command::Evaluate {
            pred,
            truth,
            pred_column,
            truth_column,
            out,
        } => {
            let p = read_labels(&pred, pred_column.as_deref())?;
            let t = read_labels(&truth, truth_column.as_deref())?;
            let report = compute_metrics(&t, &p)?;
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| Error::Data(e.to_string()))?
                ),
            }
            Ok(())
        }
        Command::Classify {
            draws,
            data,
            columns,
            log_columns,
            out,
        } => {
            let draws = PosteriorDraws::load(&draws)?;
            let label = has_column(&data, "label")?.then(|| "label".to_string());
            let schema = CsvSchema {
                columns,
                label,
                log_columns,
            };
            let loaded = load_csv(&data, &schema)?;
            let assigned = classify_points(&draws, &loaded.points)?;
            let mut w = csv::Writer::from_path(&out)
                .map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
            let err = |e: csv::Error| Error::Data(format!("{}: {e}", out.display()));
            let mut header = vec!["row".to_string(), "cluster".to_string()];
            header.extend(draws.labels.iter().map(|l| format!("p{}", l + 1)));
            w.write_record(&header).map_err(err)?;
            for (i, (label, probs)) in assigned.iter().enumerate() {
                let mut rec = vec![i.to_string(), label.to_string()];
                rec.extend(probs.iter().map(|p| format!("{p:?}")));
                w.write_record(&rec).map_err(err)?;
            }
            w.flush()
                .map_err(|e| Error::io(out.display().to_string(), e))
        }
        Command::Predict {
            draws,
            n,
            seed: s,
            out,
        } => {
            let draws = PosteriorDraws::load(&draws)?;
            let (points, tags) =
                posterior_predictive_sample(&draws, n, &mut stream_rng(seed(s)?, 0))?;
            let tags: Vec<usize> = tags.iter().map(|t| t + 1).collect();
            write_points(&out, &points, Some(("cluster", &tags)))
        }
        Command::Worker { listen } => {
            let listener = TcpListener::bind(&listen)
                .map_err(|e| Error::Transport(format!("binding {listen}: {e}")))?;
            info!("worker listening on {listen}");
            serve(&mut Endpoint::new(TcpTransport::accept(&listener)?))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
