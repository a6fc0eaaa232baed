//! Command-line entry point: data generation, training, evaluation,
//! spectral analysis, attention benchmarking, and parameter counting.
//! Every experiment is reproducible from its resolved config and seed;
//! `SPIKEPOOL_SEED` overrides all seeds globally.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use spikepool_core::attention::{bench_attention, AttentionKind, AttentionVariant, BenchShape};
use spikepool_core::events::{
    gen_synthetic, read_dataset, write_dataset, ClassSpec, SynthConfig,
};
use spikepool_core::model::{Model, ModelConfig};
use spikepool_core::spectral::{layer_rla_over_batches, write_layer_rla_csv};
use spikepool_core::train::{
    evaluate, robustness_sweep, train, write_perturb_csv, Dataset,
};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "spikepool",
    about = "Desk-scale spiking-transformer laboratory: pooling attention vs spiking self attention",
    version
)]
struct Cli {
    /// Base directory for all relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event dataset (EVTS files + index).
    GenData {
        /// Class family: bars4 or dots<k> (e.g. dots3).
        #[arg(long, default_value = "bars4")]
        spec: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (class-balanced round robin).
        #[arg(long)]
        n: usize,
        /// Background noise rate in events/pixel/bin.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: u16,
        #[arg(long, default_value_t = 64)]
        height: u16,
        #[arg(long, default_value_t = 100_000)]
        duration_us: u32,
        /// Time bins assumed when scaling the noise budget.
        #[arg(long, default_value_t = 16)]
        time_bins: usize,
    },
    /// Train a model from an experiment config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: run_<model>_seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Confusion matrix CSV (default: confusion.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer-wise relative log amplitude profile of a trained model.
    Rla {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        radii: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Also dump the tapped feature maps of the first batch as
        /// binary tensor files into this directory.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Accuracy under band-limited frequency noise.
    PerturbSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated band centers in units of pi.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        bands: String,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.05)]
        half_width: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Output CSV (default: perturb_sweep.csv in the workdir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock comparison of two attention variants.
    BenchAttn {
        /// Token count (power of two).
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value = "ssa")]
        variant_a: String,
        #[arg(long, default_value = "pool-max2d")]
        variant_b: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Learnable-parameter count of a named preset.
    ParamCount {
        #[arg(long)]
        preset: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// `SPIKEPOOL_SEED` overrides every seed when set.
fn seed_override(seed: u64) -> u64 {
    match std::env::var("SPIKEPOOL_SEED") {
        Ok(v) => v.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let workdir = &cli.workdir;
    match cli.command {
        Command::GenData {
            spec,
            out,
            n,
            noise,
            seed,
            width,
            height,
            duration_us,
            time_bins,
        } => {
            let class_spec = ClassSpec::parse(&spec).map_err(|e| anyhow!(e.to_string()))?;
            let cfg = SynthConfig {
                spec: class_spec,
                width,
                height,
                duration_us,
                noise_rate: noise,
                noise_bins: time_bins,
            };
            let seed = seed_override(seed);
            let streams = gen_synthetic(&cfg, n, seed).map_err(|e| anyhow!(e.to_string()))?;
            let out = resolve(workdir, &out);
            write_dataset(&out, &streams).map_err(|e| anyhow!(e.to_string()))?;
            let events: usize = streams.iter().map(|s| s.events.len()).sum();
            println!(
                "wrote {} samples ({} events, {} classes, seed {seed}) to {}",
                streams.len(),
                events,
                class_spec.num_classes(),
                out.display()
            );
            Ok(())
        }

        Command::Train { config, out } => {
            let config_path = resolve(workdir, &config);
            let mut exp = ExperimentConfig::parse_file(&config_path)?;
            exp.train.seed = seed_override(exp.train.seed);
            exp.data.seed = seed_override(exp.data.seed);

            let (train_set, test_set) = load_or_generate(workdir, &exp)?;
            if train_set.num_classes > exp.model.num_classes {
                bail!(
                    "dataset has {} classes but the model head has {}",
                    train_set.num_classes,
                    exp.model.num_classes
                );
            }
            let run_dir = resolve(
                workdir,
                &out.unwrap_or_else(|| {
                    PathBuf::from(format!(
                        "run_{}_seed{}",
                        exp.model.name, exp.train.seed
                    ))
                }),
            );
            std::fs::create_dir_all(&run_dir)?;
            std::fs::write(run_dir.join("resolved_config.ini"), exp.resolved())?;

            let mut model = Model::new(exp.model.clone(), exp.train.seed)
                .map_err(|e| anyhow!(e.to_string()))?;
            println!(
                "training {} ({} params) on {} samples, testing on {}",
                exp.model.name,
                model.num_params(),
                train_set.len(),
                test_set.as_ref().map_or(0, |t| t.len())
            );
            let record = train(
                &mut model,
                &train_set,
                test_set.as_ref(),
                &exp.train,
                Some(&run_dir),
            )
            .map_err(|e| anyhow!(e.to_string()))?;
            for e in &record.epochs {
                println!(
                    "epoch {:>3}: loss {:.4} train_acc {:.3} test_acc {:.3} iter {:.0} ms",
                    e.epoch, e.train_loss, e.train_acc, e.test_acc, e.iter_time_ms
                );
            }
            if let Some(ms) = record.mean_iter_time_ms {
                println!("mean iteration time {ms:.1} ms (after 5 warmup iterations)");
            }
            println!("run directory: {}", run_dir.display());
            Ok(())
        }

        Command::Eval {
            checkpoint,
            data,
            batch,
            out,
        } => {
            let ckpt_path = resolve(workdir, &checkpoint);
            let (model, _) = Model::load(&ckpt_path).map_err(|e| anyhow!(e.to_string()))?;
            let dataset = load_dataset(workdir, &data, &model.config)?;
            let result =
                evaluate(&model, &dataset, batch).map_err(|e| anyhow!(e.to_string()))?;
            let correct = (result.accuracy * result.n as f64).round() as usize;
            println!("accuracy {:.4} ({}/{})", result.accuracy, correct, result.n);
            let out = out.map(|p| resolve(workdir, &p)).unwrap_or_else(|| {
                ckpt_path
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("confusion.csv")
            });
            result
                .write_confusion_csv(&out)
                .map_err(|e| anyhow!(e.to_string()))?;
            println!("confusion matrix: {}", out.display());
            Ok(())
        }

        Command::Rla {
            checkpoint,
            data,
            out,
            radii,
            batch,
            dump_features,
        } => {
            let (model, _) =
                Model::load(&resolve(workdir, &checkpoint)).map_err(|e| anyhow!(e.to_string()))?;
            let dataset = load_dataset(workdir, &data, &model.config)?;
            let indices: Vec<usize> = (0..dataset.len()).collect();
            let batches: Vec<_> = indices
                .chunks(batch.max(1))
                .map(|ch| dataset.batch(ch).map(|(x, _)| x))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| anyhow!(e.to_string()))?;
            if let Some(dump_dir) = dump_features {
                let dump_dir = resolve(workdir, &dump_dir);
                std::fs::create_dir_all(&dump_dir)?;
                let tape = spikepool_core::tensor::Tape::inference();
                let mut taps = Vec::new();
                model
                    .forward_with_taps(&tape, &batches[0], false, &mut taps)
                    .map_err(|e| anyhow!(e.to_string()))?;
                for tap in &taps {
                    let path = dump_dir.join(format!("layer_{:02}_{}.tnsr", tap.index, tap.tag));
                    let mut f = std::fs::File::create(&path)?;
                    spikepool_core::tensor::write_tensor(&mut f, &tap.feature)
                        .map_err(|e| anyhow!(e.to_string()))?;
                }
                println!("dumped {} feature maps to {}", taps.len(), dump_dir.display());
            }
            let rows = layer_rla_over_batches(&model, batches, radii)
                .map_err(|e| anyhow!(e.to_string()))?;
            for r in &rows {
                println!(
                    "layer {:>2} {:<6} mean_rla {:>8.4} std {:>7.4}",
                    r.layer, r.tag, r.mean_rla, r.std_rla
                );
            }
            let out = resolve(workdir, &out);
            write_layer_rla_csv(&out, &rows).map_err(|e| anyhow!(e.to_string()))?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::PerturbSweep {
            checkpoint,
            data,
            bands,
            sigma,
            half_width,
            seed,
            batch,
            out,
        } => {
            let (model, _) =
                Model::load(&resolve(workdir, &checkpoint)).map_err(|e| anyhow!(e.to_string()))?;
            let dataset = load_dataset(workdir, &data, &model.config)?;
            let bands: Vec<f64> = bands
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .context("bad --bands list")?;
            let seed = seed_override(seed);
            let rows = robustness_sweep(&model, &dataset, &bands, half_width, sigma, seed, batch)
                .map_err(|e| anyhow!(e.to_string()))?;
            for r in &rows {
                println!(
                    "band {:.2}pi sigma {:.3}: accuracy {:.4}",
                    r.band_center, r.sigma, r.accuracy
                );
            }
            let out = resolve(
                workdir,
                &out.unwrap_or_else(|| PathBuf::from("perturb_sweep.csv")),
            );
            write_perturb_csv(&out, &rows).map_err(|e| anyhow!(e.to_string()))?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::BenchAttn {
            n,
            d,
            t,
            trials,
            variant_a,
            variant_b,
            seed,
        } => {
            let a = AttentionVariant::of_kind(
                AttentionKind::parse(&variant_a).map_err(|e| anyhow!(e.to_string()))?,
            );
            let b = AttentionVariant::of_kind(
                AttentionKind::parse(&variant_b).map_err(|e| anyhow!(e.to_string()))?,
            );
            let report = bench_attention(&a, &b, BenchShape { n, d, t }, trials, seed)
                .map_err(|e| anyhow!(e.to_string()))?;
            print!("{report}");
            Ok(())
        }

        Command::ParamCount { preset } => {
            let cfg = ModelConfig::preset(&preset).map_err(|e| anyhow!(e.to_string()))?;
            let count = cfg.count_params();
            println!(
                "{preset}: {count} learnable parameters ({:.2}M)",
                count as f64 / 1e6
            );
            Ok(())
        }
    }
}

/// Loads the configured dataset pair, generating synthetic data when no
/// directory is given.
fn load_or_generate(
    workdir: &Path,
    exp: &ExperimentConfig,
) -> Result<(Dataset, Option<Dataset>)> {
    let t_bins = exp.model.timesteps;
    if let Some(dir) = &exp.data.dir {
        let train_set = load_dataset(workdir, dir, &exp.model)?;
        let test_set = match &exp.data.test_dir {
            Some(td) => Some(load_dataset(workdir, td, &exp.model)?),
            None => None,
        };
        return Ok((train_set, test_set));
    }
    let spec = ClassSpec::parse(&exp.data.spec).map_err(|e| anyhow!(e.to_string()))?;
    let cfg = SynthConfig {
        spec,
        width: exp.model.width as u16,
        height: exp.model.height as u16,
        duration_us: exp.data.duration_us,
        noise_rate: exp.data.noise,
        noise_bins: t_bins,
    };
    let train_streams =
        gen_synthetic(&cfg, exp.data.n_train, exp.data.seed).map_err(|e| anyhow!(e.to_string()))?;
    let test_streams = gen_synthetic(
        &cfg,
        exp.data.n_test,
        exp.data.seed.wrapping_add(0x9E37_79B9),
    )
    .map_err(|e| anyhow!(e.to_string()))?;
    let train_set =
        Dataset::from_streams(&train_streams, t_bins, true).map_err(|e| anyhow!(e.to_string()))?;
    let test_set = if exp.data.n_test > 0 {
        Some(
            Dataset::from_streams(&test_streams, t_bins, true)
                .map_err(|e| anyhow!(e.to_string()))?,
        )
    } else {
        None
    };
    Ok((train_set, test_set))
}

fn load_dataset(workdir: &Path, dir: &Path, model_cfg: &ModelConfig) -> Result<Dataset> {
    let dir = resolve(workdir, dir);
    let streams = read_dataset(&dir)
        .map_err(|e| anyhow!("cannot load dataset {}: {e}", dir.display()))?;
    for s in &streams {
        if s.width as usize != model_cfg.width || s.height as usize != model_cfg.height {
            bail!(
                "dataset sensor {}x{} does not match model input {}x{}",
                s.width,
                s.height,
                model_cfg.width,
                model_cfg.height
            );
        }
    }
    Dataset::from_streams(&streams, model_cfg.timesteps, true).map_err(|e| anyhow!(e.to_string()))
}
