//! `msun`: train, evaluate and analyse multi-scale unified networks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure (non-finite values), 4 I/O failure while writing outputs.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msun_core::analysis::{
    collect_taps, count_flops, default_taps, grad_cam, layerwise_cka_pair, pca_csv, pca_project, write_pgm, Tap,
};
use msun_core::data::{write_idx, Dataset};
use msun_core::experiments::{
    ablation_grid, eval_multiscale, load_checkpoint, save_checkpoint, train, DataSource, Method, ABLATION_HEADER,
};
use msun_core::model::{build_vanilla, transform_to_msun};
use msun_core::{Error, MsunModel, Rng};

use config::{parse_list, Config};

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Io(m) => m,
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

/// Errors while computing or reading inputs: non-finite values are
/// numeric failures, everything else (including unreadable inputs) is a
/// usage/configuration error.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_out(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(e: Error) -> Failure {
    match e {
        Error::Io { .. } => Failure::Io(e.to_string()),
        other => other.into(),
    }
}

#[derive(Parser)]
#[command(name = "msun", version, about = "Multi-scale unified networks on a CPU autograd engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling (overrides train.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set train.epochs=3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        c.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            c.set("train.seed", &s.to_string())?;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a vanilla, multi-scale-trained or multi-scale unified model
    Train {
        /// vanilla | mst | msun
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for model.ckpt, train_log.csv and resolved-config.txt
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Accuracy and FLOPs across input sizes
    Eval {
        /// Checkpoint written by `msun train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated ascending sizes (default: eval.sizes)
        #[arg(long)]
        sizes: Option<String>,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-wise CKA between two input sizes
    Cka {
        /// Checkpoint written by `msun train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Two sizes `a,b` (default: smallest and largest model scale)
        #[arg(long)]
        scales: Option<String>,
        /// Comma-separated taps: blockN, pool, logits (default: every block)
        #[arg(long)]
        taps: Option<String>,
        /// Number of test samples to probe
        #[arg(long, default_value_t = 256)]
        probe: usize,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer inference FLOPs at one input size
    Flops {
        /// Trained model; without it the architecture comes from the config
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture to build when no checkpoint is given
        #[arg(long, default_value = "msun")]
        method: Method,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side length (default: the model's canonical size)
        #[arg(long)]
        size: Option<usize>,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM map of one test image as an ASCII PGM
    Gradcam {
        /// Checkpoint written by `msun train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target class
        #[arg(long)]
        class: usize,
        /// Input side length
        #[arg(long)]
        size: usize,
        /// Index into the test set
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// PGM destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-component PCA of test-set features
    Pca {
        /// Checkpoint written by `msun train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side length
        #[arg(long)]
        size: usize,
        /// Feature tap (default: pool)
        #[arg(long, default_value = "pool")]
        tap: String,
        /// Number of test samples
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured dataset as IDX files
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Image size (default: the largest configured scale)
        #[arg(long)]
        size: Option<usize>,
    },
    /// Grid over subnet depth B and scale count S
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subnet depths
        #[arg(long = "B")]
        blocks: String,
        /// Comma-separated scale counts
        #[arg(long = "S")]
        scales: String,
        /// CSV destination (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn list_arg(flag: &str, s: &str) -> Result<Vec<usize>> {
    parse_list(s).map_err(|e| Failure::Usage(format!("--{flag}: {e}")))
}

fn open_checkpoint(path: &Path) -> Result<(Method, MsunModel)> {
    let c = load_checkpoint(path).map_err(|e| Failure::Usage(format!("cannot load checkpoint: {e}")))?;
    Ok((c.method, c.model))
}

/// Test set of the configured data at the model's canonical size.
fn test_data(cfg: &Config, model: &MsunModel) -> Result<(DataSource, Dataset)> {
    let src = cfg.data_source()?;
    let (_, test) = src.load(model.spec.input_size)?;
    if test.num_classes() != model.spec.num_classes {
        return Err(Failure::Usage(format!(
            "configured data has {} classes but the checkpoint {}",
            test.num_classes(),
            model.spec.num_classes
        )));
    }
    Ok((src, test))
}

fn first_n(ds: &Dataset, n: usize) -> Dataset {
    ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { method, cfg, out } => {
            let cfg = cfg.resolve()?;
            let src = cfg.data_source()?;
            let input = cfg.scales()?.into_iter().max().unwrap_or(0);
            let (train_set, test) = src.load(input)?;
            let spec = cfg.experiment(method, Some(train_set.num_classes()))?;
            spec.validate()?;
            fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
            write_out(&out.join("resolved-config.txt"), cfg.resolved())?;
            let result = train(&spec, &train_set, Some(&test))?;
            write_out(&out.join("train_log.csv"), result.log_csv())?;
            save_checkpoint(&result.model, method, &out.join("model.ckpt")).map_err(io_error)?;
            eprintln!(
                "{method}: {} parameters, final test accuracy {}",
                result.model.num_params(),
                result.final_test_accuracy().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            cfg,
            sizes,
            out,
        } => {
            let (_, model) = open_checkpoint(&checkpoint)?;
            let cfg = cfg.resolve()?;
            let sizes = match sizes {
                Some(s) => list_arg("sizes", &s)?,
                None => parse_list(cfg.get("eval.sizes")).map_err(Failure::Usage)?,
            };
            if let Some(&s) = sizes.iter().find(|&&s| s < 8) {
                return Err(Failure::Usage(format!("evaluation size {s} is below the minimum of 8")));
            }
            let (src, test) = test_data(&cfg, &model)?;
            let report = eval_multiscale(&model, &sizes, |s| src.test_at(&test, s))?;
            emit(out.as_deref(), &report.to_csv()?)
        }
        Command::Cka {
            checkpoint,
            cfg,
            scales,
            taps,
            probe,
            out,
        } => {
            let (_, model) = open_checkpoint(&checkpoint)?;
            let cfg = cfg.resolve()?;
            let (a, b) = match scales {
                Some(s) => match list_arg("scales", &s)?[..] {
                    [a, b] => (a, b),
                    _ => return Err(Failure::Usage("--scales takes exactly two sizes".into())),
                },
                None => (model.scales.get(0), model.scales.largest()),
            };
            let taps: Vec<Tap> = match taps {
                Some(t) => t.split(',').map(|s| s.trim().parse()).collect::<msun_core::Result<_>>()?,
                None => default_taps(&model),
            };
            if probe < 2 {
                return Err(Failure::Usage("--probe needs at least 2 samples".into()));
            }
            let (src, test) = test_data(&cfg, &model)?;
            let p = first_n(&test, probe);
            let xa = src.test_at(&p, a)?;
            let xb = src.test_at(&p, b)?;
            let report = layerwise_cka_pair(&model, &xa.images, &xb.images, &taps)?;
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Flops {
            checkpoint,
            method,
            cfg,
            size,
            out,
        } => {
            let model = match checkpoint {
                Some(p) => open_checkpoint(&p)?.1,
                None => {
                    let cfg = cfg.resolve()?;
                    let spec = cfg.experiment(method, None)?;
                    spec.validate()?;
                    let mut rng = Rng::new(spec.train.seed);
                    match method {
                        Method::Msun => transform_to_msun(&spec.backbone, spec.subnet_blocks, &spec.scale_set()?, &mut rng)?,
                        _ => build_vanilla(&spec.backbone, &mut rng)?,
                    }
                }
            };
            let size = size.unwrap_or(model.spec.input_size);
            emit(out.as_deref(), &count_flops(&model, size)?.to_csv())
        }
        Command::Gradcam {
            checkpoint,
            cfg,
            class,
            size,
            index,
            out,
        } => {
            let (_, model) = open_checkpoint(&checkpoint)?;
            let cfg = cfg.resolve()?;
            let (src, test) = test_data(&cfg, &model)?;
            if index >= test.len() {
                return Err(Failure::Usage(format!("--index {index} beyond {} test samples", test.len())));
            }
            let one = src.test_at(&test.subset(&[index]), size)?;
            let cam = grad_cam(&model, &one.images, class)?;
            write_out(&out, write_pgm(&cam.map, cam.width, cam.height))
        }
        Command::Pca {
            checkpoint,
            cfg,
            size,
            tap,
            n,
            out,
        } => {
            let (_, model) = open_checkpoint(&checkpoint)?;
            let cfg = cfg.resolve()?;
            let tap: Tap = tap.parse()?;
            let (src, test) = test_data(&cfg, &model)?;
            let p = src.test_at(&first_n(&test, n), size)?;
            let feats = collect_taps(&model, &p.images, &[tap])?.remove(0);
            let proj = pca_project(&feats, 2)?;
            if proj.rank_deficient {
                eprintln!("warning: features have rank below 2; the second component is zero");
            }
            emit(out.as_deref(), &pca_csv(&proj, &p.ids, &p.labels))
        }
        Command::GenData { cfg, out, size } => {
            let cfg = cfg.resolve()?;
            let size = match size {
                Some(s) => s,
                None => cfg.scales()?.into_iter().max().unwrap_or(0),
            };
            let (train_set, test) = cfg.data_source()?.load(size)?;
            fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
            write_idx(&train_set, &out.join("train-images.idx"), &out.join("train-labels.idx")).map_err(io_error)?;
            write_idx(&test, &out.join("test-images.idx"), &out.join("test-labels.idx")).map_err(io_error)?;
            Ok(())
        }
        Command::Ablation {
            cfg,
            blocks,
            scales,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let b_list = list_arg("B", &blocks)?;
            let s_list = list_arg("S", &scales)?;
            let src = cfg.data_source()?;
            let input = cfg.scales()?.into_iter().max().unwrap_or(0);
            let (train_set, test) = src.load(input)?;
            // Each cell substitutes its own scale set for the configured one.
            let spec = cfg.experiment(Method::Msun, Some(train_set.num_classes()))?;
            let rows = ablation_grid(&spec, &b_list, &s_list, &train_set, |s| src.test_at(&test, s))?;
            let mut csv = format!("{ABLATION_HEADER}\n");
            for r in rows {
                csv.push_str(&r.to_csv_line());
                csv.push('\n');
            }
            emit(out.as_deref(), &csv)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
