use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::cloud::{read_cloud, write_cloud};
use super::config::RunConfig;
use crate::diffcore::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::geometry::{grid_sample, Perturbation, PointCloud};
use crate::network::Model;
use crate::training::{argmax_rows, format_row, robustness_eval, synth_scene, train_toy, SynthSpec};
use crate::verify::{bench_memory, gradcheck_suite, oracle_compare, skewed_cloud};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stratformer", version, about = "Stratified window attention for point-cloud segmentation")]
struct Cli {
    /// Worker threads for internal parallelism; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset when no config file is given.
    #[arg(long, default_value = "toy")]
    preset: String,
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => RunConfig::from_preset(&self.preset),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference checks of every op and of a small end-to-end model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Random attention instances against the padded masked-softmax oracle.
    OracleCompare {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Ragged vs padded attention buffer counts on a cloud (default: skewed synthetic preset).
    BenchMemory {
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a synthetic scene; writes metrics.csv, model.stw and summary.json.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        /// Synthetic scene: two_class, shapes or long_range.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Label a cloud with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-point gradient saliency of one point's decoder feature.
    Erf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU under the standard test-time perturbations.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Labelled cloud; defaults to the configured synthetic scene.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_model(checkpoint: &Path, cfg: &RunConfig) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(cfg.model.clone(), 0)?;
    model.params.load_records(&load_checkpoint(checkpoint)?)?;
    Ok(model)
}

fn load_input(path: &Path, cfg: &RunConfig) -> Result<PointCloud> {
    let cloud = read_cloud(path)?;
    if cfg.grid_size > 0.0 {
        grid_sample(&cloud, cfg.grid_size)
    } else {
        Ok(cloud)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cmd {
        Command::Gradcheck { seed, tol } => {
            let results = gradcheck_suite(seed, tol)?;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                writeln!(out, "{:<28} max_rel_err {:.3e}  checked {:>4}  {status}", r.name, r.max_error, r.checked).map_err(io)?;
                if let Some(f) = &r.failure {
                    writeln!(out, "  {f}").map_err(io)?;
                }
            }
            let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
            writeln!(out, "max error {worst:.3e} (tol {tol:e})").map_err(io)?;
            Ok(if results.iter().all(|r| r.passed()) {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            })
        }
        Command::OracleCompare { trials, seed, tol } => {
            let r = oracle_compare(trials, seed)?;
            writeln!(out, "trials {}  max deviation {:.3e}  (tol {tol:e})", r.trials, r.max_deviation).map_err(io)?;
            Ok(if r.max_deviation <= tol { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::BenchMemory { cloud, model, seed } => {
            let cfg = model.resolve()?;
            let cloud = match cloud {
                Some(p) => load_input(&p, &cfg)?,
                None => skewed_cloud(cfg.model.s_win0, seed),
            };
            let f = bench_memory(&cloud, &cfg.model)?;
            writeln!(out, "points {}", cloud.len()).map_err(io)?;
            writeln!(
                out,
                "attention gather-scatter {}  padded {}  ratio {:.4}",
                f.gather_attn,
                f.padded_attn,
                f.attn_ratio()
            )
            .map_err(io)?;
            writeln!(
                out,
                "total gather-scatter {}  padded {}  ratio {:.4}",
                f.gather_scatter,
                f.padded,
                f.ratio()
            )
            .map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::TrainToy {
            model,
            scene,
            steps,
            seed,
            lr,
            out: dir,
        } => {
            let mut cfg = model.resolve()?;
            if let Some(s) = scene {
                cfg.scene = s;
            }
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.validate()?;
            let spec = SynthSpec::preset(&cfg.scene, cfg.train.seed)?;
            if spec.num_classes() > cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "scene `{}` has {} classes but the model predicts {}",
                    cfg.scene,
                    spec.num_classes(),
                    cfg.model.num_classes
                )));
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let outcome = train_toy(&cfg.model, &spec, &cfg.train)?;
            write_file(&dir.join("metrics.csv"), outcome.metrics_csv().as_bytes())?;
            save_checkpoint(&outcome.model.params, dir.join("model.stw"))?;
            write_file(&dir.join("summary.json"), outcome.summary_json(&cfg.train).as_bytes())?;
            if let Some(last) = outcome.records.last() {
                writeln!(
                    out,
                    "step {}  loss {:.6}  oa {:.4}  macc {:.4}  miou {:.4}",
                    last.step, last.loss, last.metrics.oa, last.metrics.macc, last.metrics.miou
                )
                .map_err(io)?;
            }
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Infer {
            checkpoint,
            model,
            cloud,
            out: path,
        } => {
            let cfg = model.resolve()?;
            let mut cloud = load_input(&cloud, &cfg)?;
            let model = load_model(&checkpoint, &cfg)?;
            let pred = argmax_rows(&model.predict(&cloud)?);
            cloud.labels = Some(pred);
            write_cloud(&cloud, &path)?;
            writeln!(out, "labelled {} points -> {}", cloud.len(), path.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Erf {
            checkpoint,
            model,
            cloud,
            target,
            out: path,
        } => {
            let cfg = model.resolve()?;
            let cloud = load_input(&cloud, &cfg)?;
            let model = load_model(&checkpoint, &cfg)?;
            let sal = model.erf_saliency(&cloud, target)?;
            let result = PointCloud::new(cloud.positions.clone(), sal, 1, cloud.labels.clone())?;
            write_cloud(&result, &path)?;
            writeln!(out, "saliency of point {target} over {} points -> {}", cloud.len(), path.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Robustness {
            checkpoint,
            model,
            cloud,
            seed,
        } => {
            let cfg = model.resolve()?;
            let cloud = match cloud {
                Some(p) => load_input(&p, &cfg)?,
                None => synth_scene(&SynthSpec::preset(&cfg.scene, seed)?)?,
            };
            let model = load_model(&checkpoint, &cfg)?;
            let rows = robustness_eval(&model, &cloud, &Perturbation::standard_suite(seed))?;
            write!(out, "{}", format_row(&rows)).map_err(io)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `argv` (including the program name) and runs one command, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit status:
/// 0 on success, 1 on a failed check or runtime error, 2 on bad usage or an
/// invalid configuration.
pub fn run_command_to<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(err, "error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return EXIT_CHECK_FAILED;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| run(cli.command, &mut buf));
    let _ = out.write_all(&buf);
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_CHECK_FAILED
            }
        }
    }
}

/// [`run_command_to`] on the process's stdout and stderr.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command_to(argv, &mut stdout.lock(), &mut stderr.lock())
}
