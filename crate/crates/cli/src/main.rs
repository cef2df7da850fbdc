use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use histosynth::balance::{mix_real_synthetic, MixSpec, SamplingKind};
use histosynth::data::dataset::read_rgb_png;
use histosynth::data::{generate_phantom_dataset, load_dataset, split_items, DatasetItem, Method, PhantomDatasetConfig, SplitName};
use histosynth::diffusion::{encode_latents, train_autoencoder, train_ldm, AutoencoderConfig, LdmConfig};
use histosynth::eval::{evaluate_segmenter, EvalConfig};
use histosynth::gan::{train_gan, GanConfig};
use histosynth::harness::{
    emit_report, file_digest, load_records, plan_runs, read_latest, state_counts, synthesize_items, write_pool, DiffusionPair,
    ExperimentSpec, Generators, Harness, RunState, LEDGER_FILE,
};
use histosynth::segmentation::{train_segmenter, SegConfig};
use histosynth::{LabeledPatch, LatentDiffusion32, Segmenter32, SpadeGan32, VqAutoencoder32, DATA_ROOT_ENV};
use log::info;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "histosynth", version, about = "Synthetic data pipeline for subtype-balanced tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset on disk.
    MakePhantom {
        #[arg(long)]
        out: PathBuf,
        /// JSON phantom layout; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the mask-conditioned GAN on the train split.
    TrainGan {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train the vector-quantized autoencoder used by latent diffusion.
    TrainLdmAe {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train the latent diffusion model over a trained autoencoder.
    TrainLdm {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Synthesize images for randomized train-split masks.
    Generate {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, value_enum)]
        method: GenerateMethod,
    },
    /// Resynthesize the tumor regions of train-split patches under randomized masks.
    Inpaint {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, value_enum, default_value = "diffusion")]
        method: InpaintMethod,
    },
    /// Train a segmenter on the train split, optionally mixed with a pool.
    TrainSeg {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_enum)]
        sampling: Option<Sampling>,
        /// Synthetic pool directory written by `generate` or `inpaint`.
        #[arg(long, requires = "ratio")]
        pool: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Write the binary tumor mask of one image as a PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a segmenter on the test split and print the report as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
    /// Build the summary bundle from a finished experiment directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to `<runs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Two condition labels for the confusion-row figure.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<String>>,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Execute every planned run that has no stored result.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Retrain runs that already have a record.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Show the ledger state of every planned run.
    Status {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    /// GAN or diffusion checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Autoencoder checkpoint, required for diffusion.
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenerateMethod {
    Gan,
    Diffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum InpaintMethod {
    Diffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    TumorSampled,
    SubtypeSampled,
}

impl From<Sampling> for SamplingKind {
    fn from(s: Sampling) -> Self {
        match s {
            Sampling::TumorSampled => SamplingKind::TumorSampled,
            Sampling::SubtypeSampled => SamplingKind::SubtypeSampled,
        }
    }
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(C::default()),
    }
}

fn split(data: &Path, which: SplitName) -> Result<Vec<DatasetItem>> {
    let (manifest, items) = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let picked = split_items(&manifest, &items, which);
    if picked.is_empty() {
        bail!("{} has no {which:?} patches", data.display());
    }
    Ok(picked)
}

fn state_name(state: RunState) -> &'static str {
    match state {
        RunState::Pending => "pending",
        RunState::Running => "running",
        RunState::Done => "done",
        RunState::Failed => "failed",
    }
}

fn patches(items: Vec<DatasetItem>) -> Vec<LabeledPatch> {
    items.into_iter().map(|i| i.patch).collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakePhantom { out, config, seed } => {
            let mut config: PhantomDatasetConfig = read_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let data = generate_phantom_dataset(&config)?;
            let manifest = data.write(&out)?;
            println!("wrote {} patches from {} slides to {}", manifest.patches.len(), manifest.slides.len(), out.display());
        }
        Command::TrainGan { common } => {
            let mut config: GanConfig = read_config(common.config.as_deref())?;
            config.steps = common.steps.unwrap_or(config.steps);
            let train = patches(split(&common.data, SplitName::Train)?);
            let trainer = train_gan::<f32>(&train, config, common.seed)?;
            trainer.save(&common.out)?;
            if let Some(last) = trainer.history.last() {
                println!("step {}: generator {:.4}, discriminator {:.4}", last.step, last.generator, last.discriminator);
            }
        }
        Command::TrainLdmAe { common } => {
            let mut config: AutoencoderConfig = read_config(common.config.as_deref())?;
            config.steps = common.steps.unwrap_or(config.steps);
            let images: Vec<_> = patches(split(&common.data, SplitName::Train)?).into_iter().map(|p| p.image).collect();
            let trainer = train_autoencoder::<f32>(&images, config, common.seed)?;
            trainer.save(&common.out)?;
            if let Some(last) = trainer.history.last() {
                println!("{last:?}");
            }
        }
        Command::TrainLdm { common, ae } => {
            let mut config: LdmConfig = read_config(common.config.as_deref())?;
            config.steps = common.steps.unwrap_or(config.steps);
            let ae = VqAutoencoder32::load(&ae)?;
            let set = encode_latents(&ae, &patches(split(&common.data, SplitName::Train)?))?;
            let trainer = train_ldm(&set, config, &ae, common.seed)?;
            trainer.save(&common.out)?;
            if let Some(last) = trainer.history.last() {
                println!("step {}: loss {:.5}", last.step, last.loss);
            }
        }
        Command::Generate { synth, method } => {
            let method = match method {
                GenerateMethod::Gan => Method::Gan,
                GenerateMethod::Diffusion => Method::Diffusion,
            };
            synthesize(&synth, method)?;
        }
        Command::Inpaint { synth, method } => {
            let InpaintMethod::Diffusion = method;
            synthesize(&synth, Method::Inpaint)?;
        }
        Command::TrainSeg {
            common,
            sampling,
            pool,
            ratio,
        } => {
            let mut config: SegConfig = read_config(common.config.as_deref())?;
            config.steps = common.steps.unwrap_or(config.steps);
            if let Some(s) = sampling {
                config.sampling = s.into();
            }
            let real = split(&common.data, SplitName::Train)?;
            let val = load_dataset(&common.data)
                .map(|(m, items)| patches(split_items(&m, &items, SplitName::Val)))
                .unwrap_or_default();
            let train = match (pool, ratio) {
                (Some(pool), Some(ratio)) => {
                    let (_, synthetic) = load_dataset(&pool)?;
                    let Some(first) = synthetic.first() else {
                        bail!("pool {} is empty", pool.display());
                    };
                    let spec = MixSpec {
                        ratio,
                        method: first.provenance.method,
                        seed: common.seed,
                    };
                    mix_real_synthetic(&real, &synthetic, &spec)?
                }
                _ => real,
            };
            info!("training on {} patches", train.len());
            let run = train_segmenter::<f32>(&patches(train), &val, config, common.seed)?;
            run.save(&common.out)?;
            let best = &run.history[run.best_epoch];
            println!("best epoch {} (step {}): val dice {:.4}", run.best_epoch, best.step, best.val_dice);
        }
        Command::Predict { checkpoint, image, out } => {
            let model = Segmenter32::load(&checkpoint)?;
            let pred = model.predict(&read_rgb_png(&image)?)?;
            let (w, h) = pred.binary.dims();
            let raw: Vec<u8> = pred.binary.pixels().iter().map(|&v| v * 255).collect();
            image::GrayImage::from_raw(w as u32, h as u32, raw)
                .context("prediction buffer size")?
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Evaluate { checkpoint, data, config } => {
            let config: EvalConfig = read_config(config.as_deref())?;
            let model = Segmenter32::load(&checkpoint)?;
            let report = evaluate_segmenter(&model, &patches(split(&data, SplitName::Test)?), config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Experiment { action } => match action {
            ExperimentAction::Run { spec, force, workers } => {
                let mut spec = ExperimentSpec::load(&spec)?;
                if let Some(w) = workers {
                    spec.workers = w;
                }
                let mut harness = Harness::open(spec)?;
                let outcome = harness.run_all(force)?;
                println!("{} runs done, {} failed", outcome.records.len(), outcome.failures.len());
                for f in &outcome.failures {
                    println!("  {}#{}: {}", f.label, f.rep, f.error);
                }
                if !outcome.failures.is_empty() {
                    bail!("{} runs failed", outcome.failures.len());
                }
            }
            ExperimentAction::Status { spec } => {
                let spec = ExperimentSpec::load(&spec)?;
                let latest = read_latest(&spec.output_dir.join(LEDGER_FILE))?;
                for d in plan_runs(&spec)? {
                    let state = latest.get(&d.key()).map_or(RunState::Pending, |e| e.state);
                    println!("{:<32} rep {}  {}", d.label, d.rep, state_name(state));
                }
                let counts: Vec<String> = state_counts(&latest).iter().map(|(s, n)| format!("{n} {}", state_name(*s))).collect();
                println!("ledger: {}", counts.join(", "));
            }
        },
        Command::Report { runs, out, compare } => {
            let records = load_records(&runs)?;
            let out = out.unwrap_or_else(|| runs.join("report"));
            let pair = compare.as_ref().map(|c| (c[0].as_str(), c[1].as_str()));
            let bundle = emit_report(&records, &out, pair)?;
            print!("{}", std::fs::read_to_string(&bundle.files["summary.txt"])?);
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn synthesize(args: &SynthArgs, method: Method) -> Result<()> {
    let mut generators = Generators::default();
    let digest = file_digest(&args.checkpoint)?;
    if method == Method::Gan {
        generators.gan = Some((SpadeGan32::load(&args.checkpoint)?, digest));
    } else {
        let Some(ae) = &args.ae else {
            bail!("--ae is required for diffusion");
        };
        generators.diffusion = Some(DiffusionPair {
            ae: VqAutoencoder32::load(ae)?,
            ldm: LatentDiffusion32::load(&args.checkpoint)?,
            digest,
        });
    }
    let sources = patches(split(&args.data, SplitName::Train)?);
    let items = synthesize_items(method, &generators, &sources, args.count, args.seed)?;
    write_pool(&args.out, method, &items)?;
    println!("wrote {} {} items to {}", items.len(), method.name(), args.out.display());
    Ok(())
}
