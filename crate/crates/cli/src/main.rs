//! `nib` command-line tool.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error (bad flag, unknown method).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nib_core::baselines::{attribute, MethodParams};
use nib_core::dataset::{toy_dataset, TOY_DATASET_SIZE};
use nib_core::eval::{beta_sweep, evaluate, relative_spread, BetaRow, MetricReport};
use nib_core::heatmap::write_heatmap;
use nib_core::manifest::{load_dataset, load_model_with_manifest, save_dataset, save_model};
use nib_core::verify::{run_verify, VerifyConfig};
use nib_core::{DualEncoderModel, MethodId, Modality, ModelConfig, Sample};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "nib",
    version,
    about = "Narrowing-bottleneck attribution for dual image-text encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded toy model and a 64-pair dataset.
    InitToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; defaults to the model seed.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, default_value_t = TOY_DATASET_SIZE)]
        samples: usize,
    },
    /// Write a PGM, CSV and JSON heatmap for every sample.
    Attribute {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "nib")]
        method: MethodId,
        #[arg(long, default_value = "image")]
        modality: Modality,
        /// Bottleneck layer; defaults to the manifest's `bottleneck_layer`,
        /// the toy analogue of layer 9 in a 12-layer encoder.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 10)]
        num_steps: usize,
        /// Seed for stochastic methods.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence Drop / Increase for each method, as a JSON array.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "nib,random")]
        methods: Vec<MethodId>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 10)]
        num_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also time image attributions; makes the report non-reproducible.
        #[arg(long)]
        fps: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite; exits 1 if any check fails.
    Verify {
        /// Model manifest; a seed-0 toy model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the checks as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// M2IB-lite metrics across β values.
    SweepBeta {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5")]
        betas: Vec<f64>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Inputs {
    /// Model manifest (`model.json`).
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (`dataset.json`).
    #[arg(long)]
    dataset: PathBuf,
}

impl Inputs {
    fn load(&self) -> anyhow::Result<(DualEncoderModel, usize, Vec<Sample>)> {
        let (model, manifest) = load_model_with_manifest(&self.model)
            .with_context(|| format!("loading model {}", self.model.display()))?;
        let samples = load_dataset(&self.dataset, model.config())
            .with_context(|| format!("loading dataset {}", self.dataset.display()))?;
        Ok((model, manifest.bottleneck_layer, samples))
    }
}

fn params(model: &DualEncoderModel, layer: usize, num_steps: usize, seed: u64) -> MethodParams {
    let mut p = MethodParams::for_model(model).with_seed(seed);
    p.layer = layer;
    p.num_steps = num_steps;
    p
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::InitToy {
            seed,
            out,
            data_seed,
            samples,
        } => {
            let model = DualEncoderModel::init_toy(seed, ModelConfig::default())?;
            let data = toy_dataset(&model, data_seed.unwrap_or(seed), samples)?;
            let m = save_model(&model, &out)?;
            let d = save_dataset(&data, &out)?;
            println!("model   {}", m.display());
            println!("dataset {} ({} pairs)", d.display(), data.len());
        }
        Command::Attribute {
            inputs,
            method,
            modality,
            layer,
            num_steps,
            seed,
            out,
        } => {
            let (model, default_layer, samples) = inputs.load()?;
            let p = params(&model, layer.unwrap_or(default_layer), num_steps, seed);
            std::fs::create_dir_all(&out)?;
            for s in &samples {
                let map = attribute(&model, s, modality, method, &p)
                    .with_context(|| format!("sample {}", s.id))?;
                let stem = format!("{}.{}.{}", s.id, method, modality);
                write_heatmap(&model, &map, &s.id, &out, &stem)?;
            }
            println!("{} heatmaps in {}", samples.len(), out.display());
        }
        Command::Evaluate {
            inputs,
            methods,
            layer,
            num_steps,
            seed,
            fps,
            out,
        } => {
            let (model, default_layer, samples) = inputs.load()?;
            let p = params(&model, layer.unwrap_or(default_layer), num_steps, seed);
            let reports = methods
                .iter()
                .map(|&m| evaluate(&model, &samples, m, &p, fps))
                .collect::<nib_core::Result<Vec<MetricReport>>>()?;
            for r in &reports {
                println!(
                    "{:<8} img drop {:>8.3} incr {:>6.2} | text drop {:>8.3} incr {:>6.2}",
                    r.method.name(),
                    r.img_conf_drop,
                    r.img_conf_incr,
                    r.text_conf_drop,
                    r.text_conf_incr
                );
            }
            write_json(&out, &reports)?;
        }
        Command::Verify { model, out } => {
            let model = match model {
                Some(path) => {
                    load_model_with_manifest(&path)
                        .with_context(|| format!("loading model {}", path.display()))?
                        .0
                }
                None => DualEncoderModel::init_toy(0, ModelConfig::default())?,
            };
            let checks = run_verify(&model, &VerifyConfig::default())?;
            for c in &checks {
                println!(
                    "{} {:<26} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if let Some(path) = out {
                write_json(&path, &checks)?;
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::SweepBeta {
            inputs,
            betas,
            layer,
            seed,
            out,
        } => {
            if betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                bail!("every beta must be positive and finite");
            }
            let (model, default_layer, samples) = inputs.load()?;
            let p = params(&model, layer.unwrap_or(default_layer), 10, seed);
            let rows: Vec<BetaRow> = beta_sweep(&model, &samples, &betas, &p)?;
            for r in &rows {
                println!(
                    "beta {:<8} img drop {:>8.3} text drop {:>8.3}",
                    r.beta, r.report.img_conf_drop, r.report.text_conf_drop
                );
            }
            let img: Vec<f64> = rows.iter().map(|r| r.report.img_conf_drop).collect();
            let text: Vec<f64> = rows.iter().map(|r| r.report.text_conf_drop).collect();
            println!(
                "relative spread: image {:.4}, text {:.4}",
                relative_spread(&img),
                relative_spread(&text)
            );
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let code = e
                .downcast_ref::<nib_core::Error>()
                .or_else(|| e.chain().find_map(|c| c.downcast_ref::<nib_core::Error>()))
                .map_or("failure", |err| err.code());
            eprintln!("error[{code}]: {e:#}");
            ExitCode::from(1)
        }
    }
}
