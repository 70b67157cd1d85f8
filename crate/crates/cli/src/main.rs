use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use dreamguider::harness::gradcheck::{run_gradcheck, GradcheckRow};
use dreamguider::harness::image_io::write_pnm;
use dreamguider::harness::{
    ablate, default_sweep_grid, generate_dataset, run_classifier_job, run_denoiser_job, run_with_models, sweep,
    write_rows_csv, AblationAxis, ClassifierJob, DenoiserJob, ExperimentConfig, Models,
};
use dreamguider::guidance::ScaleMode;

#[derive(Parser)]
#[command(name = "dreamguider", version, about = "Zeroth-order guided diffusion sampling on a toy shapes corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set guidance.method="mgd"` or `--set K=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural shapes dataset as PPM files plus labels.csv.
    GenData {
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the noise predictor.
    TrainDenoiser(ConfigArgs),
    /// Train the shape classifier used for nonlinear guidance.
    TrainClassifier(ConfigArgs),
    /// Run a restoration or classifier-guidance experiment.
    Run(ConfigArgs),
    /// Vary one setting (K, T, components or scale) with all else fixed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Manual (c, d) grid; defaults to decades around the auto scales.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        c: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        d: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("{key}: {part} is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides.
fn load<T: DeserializeOwned + Serialize + Default>(args: &ConfigArgs) -> CliResult<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = &args.config {
        let file: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        merge(&mut value, file);
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k, parsed)?;
    }
    Ok(serde_json::from_value(value)?)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn gen_data(n: usize, seed: u64, out: &Path) -> CliResult<()> {
    let data = generate_dataset(n, seed)?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("labels.csv"))?;
    w.write_record(["file", "label", "class"])?;
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("{i:05}.ppm");
        write_pnm(img, &out.join(&name))?;
        w.write_record([name, label.to_string(), dreamguider::harness::CLASS_NAMES[label].to_string()])?;
    }
    w.flush()?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn print_gradcheck(rows: &[GradcheckRow]) -> bool {
    println!("{:<28} {:>9} {:>12}  result", "check", "instances", "max_rel_err");
    for r in rows {
        println!("{:<28} {:>9} {:>12.3e}  {}", r.name, r.instances, r.max_rel_err, if r.pass { "pass" } else { "FAIL" });
    }
    rows.iter().all(|r| r.pass)
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::GenData { n, seed, out } => gen_data(n, seed, &out)?,
        Command::TrainDenoiser(args) => {
            let job: DenoiserJob = load(&args)?;
            let trained = run_denoiser_job(&job)?;
            for r in &trained.curve {
                println!("epoch {:>3}  loss {:.5}  val_mse {:.5}", r.epoch, r.loss, r.metric);
            }
            println!("weights written to {}", job.out.display());
        }
        Command::TrainClassifier(args) => {
            let job: ClassifierJob = load(&args)?;
            let trained = run_classifier_job(&job)?;
            for r in &trained.curve {
                println!("epoch {:>3}  loss {:.5}  val_acc {:.4}", r.epoch, r.loss, r.metric);
            }
            println!("weights written to {}", job.out.display());
        }
        Command::Run(args) => {
            let config: ExperimentConfig = load(&args)?;
            let models = Models::load(&config)?;
            let out = run_with_models(&config, &models)?;
            for r in &out.records {
                println!(
                    "seed {:>4}  {}  psnr {:.2}  ssim {:.3}  residual {:.5}",
                    r.seed, r.status, r.psnr, r.ssim, r.residual
                );
            }
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Ablate { cfg, axis, out } => {
            let config: ExperimentConfig = load(&cfg)?;
            let models = Models::load(&config)?;
            let rows = ablate(&config, axis, &models)?;
            write_rows_csv(&rows, &out)?;
            for r in &rows {
                println!("{}={:<28} psnr {:.2}  residual {:.5}", r.axis, r.value, r.psnr_mean, r.residual_mean);
            }
        }
        Command::Gradcheck { instances, seed } => return Ok(print_gradcheck(&run_gradcheck(instances, seed)?)),
        Command::Sweep { cfg, c, d, out } => {
            let config: ExperimentConfig = load(&cfg)?;
            let models = Models::load(&config)?;
            let (c, d) = if c.is_empty() || d.is_empty() {
                let mut auto = config.clone();
                auto.guidance.scale_mode = ScaleMode::Auto;
                auto.out_dir = None;
                let (gc, gd) = default_sweep_grid(&run_with_models(&auto, &models)?);
                (if c.is_empty() { gc } else { c }, if d.is_empty() { gd } else { d })
            } else {
                (c, d)
            };
            let rows = sweep(&config, &c, &d, &models)?;
            write_rows_csv(&rows, &out)?;
            for r in &rows {
                println!("{:<28} psnr {:.2}  residual {:.5}", r.value, r.psnr_mean, r.residual_mean);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
