use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use shvit::bench::{self, MixerBench};
use shvit::gradcheck;
use shvit::io;
use shvit::model::{macro_cost_compare, Model, ModelConfig};
use shvit::nn::Module;
use shvit::redundancy::{self, Sweep};
use shvit::rng::Rng;
use shvit::tensor::no_grad;
use shvit::train::{self, BlobStyle, DataParams, Optimizer, TrainConfig};

const REPORT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "shvit", version, about = "Single-head vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a model from a config and write its weights.
    Create {
        /// Config JSON path, or one of the built-ins: ref, tiny, four-stage.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure inference throughput.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        single_thread: bool,
        /// Run twice and fail if the medians differ by more than 10%.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
    },
    /// Per-op runtime breakdown of one forward pass.
    Profile {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Fold normalization layers before profiling.
        #[arg(long)]
        fuse: bool,
        #[arg(long)]
        json: bool,
    },
    /// Parameters, MACs and memory traffic per layer.
    Cost {
        #[arg(long)]
        config: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long)]
        json: bool,
    },
    /// Compare the cost totals of two layouts.
    CompareMacro {
        #[arg(long)]
        config_a: String,
        #[arg(long)]
        config_b: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long)]
        json: bool,
    },
    /// Compare a layout without attention, with single-head and with
    /// multi-head attention.
    CompareMixers {
        #[arg(long)]
        config: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Fail when the measured throughput order is violated.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
    },
    /// Train on synthetic blobs and write the weights and loss curve.
    TrainToy(TrainArgs),
    /// Attention head redundancy analysis.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Also check every layer and the whole tiny network.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
    /// Predict classes for a tensor file of images.
    Classify {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OptKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Colored,
    Positional,
}

#[derive(Args)]
struct DataArgs {
    /// Pixel noise of the synthetic images.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Style::Colored)]
    style: Style,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = OptKind::Sgd)]
    optimizer: OptKind,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    OneHot,
    LeaveOneOut,
    Similarity,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Head similarity or head-ablation sweep of one attention layer.
    Heads {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = SweepArg::Similarity)]
        sweep: SweepArg,
        /// Seed of the synthetic evaluation images.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(cfg) = ModelConfig::named(spec) {
            return Ok(cfg);
        }
    }
    ModelConfig::load(path).with_context(|| format!("loading config {spec}"))
}

fn load_weights(path: &Path, res: Option<usize>) -> Result<Model> {
    let m = io::load_model(path).with_context(|| format!("loading weights {}", path.display()))?;
    Ok(match res {
        Some(r) if r != m.config.input_resolution => m.at_resolution(r)?,
        _ => m,
    })
}

/// Prints `value` as JSON, adding `report_version` when the type lacks it.
fn print_json(value: &impl Serialize) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.entry("report_version").or_insert(REPORT_VERSION.into());
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
    Ok(())
}

fn data_params(cfg: &ModelConfig, data: &DataArgs, train_size: usize, eval_size: usize, seed: u64) -> DataParams {
    let k = cfg.num_classes;
    let round = |n: usize| n.div_ceil(k) * k;
    DataParams {
        classes: k,
        resolution: cfg.input_resolution,
        train_size: round(train_size),
        eval_size: round(eval_size),
        sigma: data.sigma,
        jitter: 2,
        style: match data.style {
            Style::Colored => BlobStyle::Colored,
            Style::Positional => BlobStyle::Positional,
        },
        seed,
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Create { config, seed, out } => {
            let cfg = load_config(&config)?;
            let m = Model::build(&cfg, &mut Rng::new(seed))?;
            io::save_model(&m, &out)?;
            println!("wrote {} ({} parameters)", out.display(), m.param_count());
        }
        Cmd::Bench {
            weights,
            res,
            batch,
            warmup,
            iters,
            single_thread,
            strict,
            json,
        } => {
            let m = load_weights(&weights, res)?;
            let r = m.config.input_resolution;
            let a = bench::bench_throughput(&m, batch, r, warmup, iters, single_thread)?;
            if json {
                print_json(&a)?;
            } else {
                println!(
                    "{:.2} images/s  batch {batch}  res {r}  median {:.3} ms  p10 {:.3} ms  p90 {:.3} ms",
                    a.images_per_sec,
                    a.median_s * 1e3,
                    a.p10_s * 1e3,
                    a.p90_s * 1e3
                );
            }
            if strict {
                let b = bench::bench_throughput(&m, batch, r, warmup, iters, single_thread)?;
                let drift = (a.median_s - b.median_s).abs() / a.median_s.min(b.median_s);
                if drift > 0.10 {
                    eprintln!("unstable: consecutive medians differ by {:.1}%", 100.0 * drift);
                    return Ok(false);
                }
            }
        }
        Cmd::Profile {
            weights,
            res,
            batch,
            fuse,
            json,
        } => {
            let mut m = load_weights(&weights, res)?;
            if fuse && !m.is_fused() {
                m = m.fuse_all_bn()?;
            }
            let r = m.config.input_resolution;
            let x = Rng::new(0).normal_tensor(&[batch, 3, r, r], 1.0);
            let report = bench::profile_ops(&m, &x)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_text());
            }
        }
        Cmd::Cost { config, res, batch, json } => {
            let cfg = load_config(&config)?;
            let r = res.unwrap_or(cfg.input_resolution);
            let m = Model::build(&cfg.with_resolution(r), &mut Rng::new(0))?;
            let report = m.cost_report(batch, r)?;
            if json {
                print_json(&report)?;
            } else {
                println!("{:<36} {:>12} {:>15} {:>15}", "layer", "params", "macs", "mem_access");
                for l in &report.layers {
                    println!("{:<36} {:>12} {:>15} {:>15}", l.name, l.params, l.macs, l.mem_access);
                }
                println!(
                    "{:<36} {:>12} {:>15} {:>15}",
                    "total", report.total_params, report.total_macs, report.total_mem_access
                );
            }
        }
        Cmd::CompareMacro {
            config_a,
            config_b,
            res,
            batch,
            json,
        } => {
            let c = macro_cost_compare(&load_config(&config_a)?, &load_config(&config_b)?, res, batch)?;
            if json {
                print_json(&c)?;
            } else {
                println!("{:<4} {:>12} {:>15} {:>15}", "", "params", "macs", "mem_access");
                for (name, r) in [("a", &c.a), ("b", &c.b)] {
                    println!(
                        "{name:<4} {:>12} {:>15} {:>15}",
                        r.total_params, r.total_macs, r.total_mem_access
                    );
                }
            }
        }
        Cmd::CompareMixers {
            config,
            res,
            batch,
            heads,
            runs,
            strict,
            json,
        } => {
            let cfg = load_config(&config)?;
            let r = res.unwrap_or(cfg.input_resolution);
            let opts = MixerBench {
                batch,
                mhsa_heads: heads,
                runs,
                ..MixerBench::default()
            };
            let c = bench::compare_token_mixers(&cfg, r, &opts)?;
            if json {
                print_json(&c)?;
            } else {
                print!("{}", c.to_text());
            }
            if !c.params_ordered {
                eprintln!("parameter order none < shsa < mhsa violated");
                return Ok(false);
            }
            if !c.throughput_ordered {
                eprintln!("warning: measured throughput order none >= shsa >= mhsa not observed");
                if strict {
                    return Ok(false);
                }
            }
        }
        Cmd::TrainToy(a) => {
            let cfg = load_config(&a.config)?;
            let data = train::gen_dataset(&data_params(&cfg, &a.data, 256, 128, a.seed))?;
            let optimizer = match a.optimizer {
                OptKind::Sgd => Optimizer::sgd(),
                OptKind::Adamw => Optimizer::adamw(),
            };
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                steps: a.steps,
                batch_size: a.batch,
                lr: a.lr.unwrap_or(match a.optimizer {
                    OptKind::Sgd => defaults.lr,
                    OptKind::Adamw => 2e-3,
                }),
                weight_decay: match a.optimizer {
                    OptKind::Sgd => defaults.weight_decay,
                    OptKind::Adamw => 0.05,
                },
                optimizer,
                seed: a.seed,
                ..defaults
            };
            let mut m = Model::build(&cfg, &mut Rng::new(a.seed))?;
            let report = train::train(&mut m, &data, &tc)?;
            io::save_model(&m, &a.out)?;
            if let Some(p) = &a.curve {
                io::write_atomic(p, report.to_csv().as_bytes())?;
            }
            if a.json {
                print_json(&report)?;
            } else {
                println!(
                    "loss {:.4} -> {:.4}  eval accuracy {:.4}  eval loss {:.4}",
                    report.initial_loss(),
                    report.final_loss(),
                    report.final_eval.accuracy,
                    report.final_eval.loss
                );
                println!("wrote {}", a.out.display());
            }
        }
        Cmd::Analyze {
            what:
                AnalyzeCmd::Heads {
                    weights,
                    layer,
                    sweep,
                    data_seed,
                    samples,
                    data,
                    json,
                },
        } => {
            let m = load_weights(&weights, None)?;
            let layers = m.attention_layers();
            let Some(info) = layers.iter().find(|l| l.id == layer) else {
                bail!(
                    "no attention layer {layer}; the model has ids {:?}",
                    layers.iter().map(|l| l.id).collect::<Vec<_>>()
                );
            };
            if info.kind != "mhsa" {
                bail!("layer {layer} is single-head; head analysis needs a multi-head layer");
            }
            let eval = train::gen_dataset(&data_params(&m.config, &data, 1, samples, data_seed))?.eval;
            match sweep {
                SweepArg::Similarity => {
                    let r = {
                        let _g = no_grad();
                        redundancy::layer_similarity(&m, layer, &eval.images)?
                    };
                    if json {
                        print_json(&r)?;
                    } else {
                        print!("{}", r.to_text());
                    }
                }
                SweepArg::OneHot | SweepArg::LeaveOneOut => {
                    let kind = match sweep {
                        SweepArg::OneHot => Sweep::OneHot,
                        _ => Sweep::LeaveOneOut,
                    };
                    let r = redundancy::sweep(&m, layer, kind, &eval)?;
                    if json {
                        print_json(&r)?;
                    } else {
                        print!("{}", r.to_text());
                    }
                }
            }
        }
        Cmd::Gradcheck { tol, seeds, all, json } => {
            let prims: Vec<String> = gradcheck::primitive_names();
            let report = gradcheck::run_filtered(&seeds, tol, gradcheck::EPS, |n| all || prims.iter().any(|p| p == n))?;
            if json {
                print_json(&report)?;
            } else {
                for c in &report.cases {
                    let verdict = if c.rel_err < tol { "ok  " } else { "FAIL" };
                    println!(
                        "{verdict} {:<28} seed {:<3} rel_err {:.3e}  coords {:<4} kinks {}",
                        c.name, c.seed, c.rel_err, c.coords, c.kinks_skipped
                    );
                }
            }
            if !report.passed() {
                let worst = report.worst().expect("at least one case");
                eprintln!("gradient check failed: worst {} (seed {}) {:.3e}", worst.name, worst.seed, worst.rel_err);
                return Ok(false);
            }
        }
        Cmd::Classify { weights, input, json } => {
            let x = io::load_tensor(&input).with_context(|| format!("loading input {}", input.display()))?;
            let x = match x.rank() {
                3 => {
                    let s = x.shape().to_vec();
                    x.reshape(&[1, s[0], s[1], s[2]])?
                }
                _ => x,
            };
            let (_, _, h, _) = x.dims4()?;
            let m = load_weights(&weights, Some(h))?;
            let logits = {
                let _g = no_grad();
                m.forward(&x)?
            };
            let classes = logits.argmax_rows()?;
            let k = m.config.num_classes;
            let rows: Vec<Vec<f64>> = logits.to_vec_f64().chunks(k).map(<[f64]>::to_vec).collect();
            if json {
                #[derive(Serialize)]
                struct Out {
                    report_version: u32,
                    classes: Vec<usize>,
                    logits: Vec<Vec<f64>>,
                }
                print_json(&Out {
                    report_version: REPORT_VERSION,
                    classes,
                    logits: rows,
                })?;
            } else {
                for (i, c) in classes.iter().enumerate() {
                    println!("{i}\t{c}\t{:.4}", rows[i][*c]);
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
