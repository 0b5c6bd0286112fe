use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sto2::dataset::{self, DatasetManifest, PhantomSpec, Sample};
use sto2::experiment::{self, BundleConfig, ExperimentConfig, ManifestSource, Provenance};
use sto2::fibre::{self, SparseHypercube};
use sto2::gan::{self, InferenceModel, TrainState};
use sto2::hypercube::{self, Hypercube};
use sto2::nn::gradcheck::kernel_suite;
use sto2::oximetry::{self, StO2Map};

/// StO2 estimation from RGB and sparse fibre-probe spectra.
#[derive(Parser, Debug)]
#[command(name = "sto2", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// CoD threshold for the regression map.
    #[arg(long, global = true)]
    cod_threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct BundleArgs {
    /// Fibre count preset (0, 121, 171, 300) or target count with --r/--d.
    #[arg(long)]
    n_spot: Option<usize>,
    #[arg(long, requires = "d")]
    r: Option<f64>,
    #[arg(long, requires = "r")]
    d: Option<f64>,
    #[arg(long)]
    bundle_radius: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom hypercube and its true StO2 map.
    Phantom {
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Project a hypercube to RGB.
    SynthRgb {
        #[arg(long)]
        cube: PathBuf,
    },
    /// Regression StO2 map and exclusion mask of a hypercube.
    Sto2Oracle {
        #[arg(long)]
        cube: PathBuf,
    },
    /// Fibre footprint mask for an image size.
    Mask {
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 192)]
        height: usize,
    },
    /// Sparse hyperspectral image of a hypercube under a fibre bundle.
    Shsi {
        #[arg(long)]
        cube: PathBuf,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// Build the phantom suite's acquisitions and an augmentation manifest.
    Augment {
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long)]
        train_acquisitions: Option<usize>,
        #[arg(long)]
        test_acquisitions: Option<usize>,
    },
    /// Train on a manifest's training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the StO2 map of one saved sample.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
    },
    /// Score a checkpoint on a manifest's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference checks of every kernel and the generator losses.
    Gradcheck,
    /// Fibre-count ablation over presets and seeds.
    Ablation {
        #[arg(long, value_delimiter = ',')]
        presets: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        steps: Option<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::SynthRgb { .. } => "synth-rgb",
            Command::Sto2Oracle { .. } => "sto2-oracle",
            Command::Mask { .. } => "mask",
            Command::Shsi { .. } => "shsi",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck => "gradcheck",
            Command::Ablation { .. } => "ablation",
        }
    }
}

fn bundle(cfg: &ExperimentConfig, args: &BundleArgs) -> BundleConfig {
    let mut b = cfg.bundle.clone();
    if let Some(n) = args.n_spot {
        b.n_spot = n;
    }
    if args.r.is_some() {
        b.r = args.r;
        b.d = args.d;
    }
    if args.bundle_radius.is_some() {
        b.bundle_radius = args.bundle_radius;
    }
    b
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(c) = cli.cod_threshold {
        cfg.oximetry.cod_threshold = c;
    }
    match &cli.command {
        Command::Mask { bundle: b, .. } | Command::Shsi { bundle: b, .. } => {
            cfg.bundle = bundle(&cfg, b)
        }
        Command::Augment {
            bundle: b,
            train_acquisitions,
            test_acquisitions,
        } => {
            cfg.bundle = bundle(&cfg, b);
            if let Some(n) = train_acquisitions {
                cfg.suite.train_acquisitions = *n;
            }
            if let Some(n) = test_acquisitions {
                cfg.suite.test_acquisitions = *n;
            }
        }
        Command::Train { steps: Some(s), .. } => cfg.train.max_steps = Some(*s),
        Command::Ablation {
            presets,
            seeds,
            steps,
        } => {
            if let Some(p) = presets {
                cfg.ablation.presets = p.clone();
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s.clone();
            }
            if let Some(s) = steps {
                cfg.train.max_steps = Some(*s);
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_map(map: &StO2Map, dir: &Path, name: &str) -> Result<()> {
    map.save(&dir.join(format!("{name}.oxc")))?;
    map.save_png(&dir.join(format!("{name}.png")))?;
    map.mask.save_png(&dir.join(format!("{name}_mask.png")))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out.clone();
    create(&out)?;
    let mut seeds = vec![cfg.seed];
    let res = cfg.resources()?;
    match &cli.command {
        Command::Phantom { width, height } => {
            let spec = PhantomSpec {
                seed: cfg.seed,
                width: width.unwrap_or(cfg.suite.base.width),
                height: height.unwrap_or(cfg.suite.base.height),
                ..cfg.suite.base.clone()
            };
            let (cube, truth) = dataset::phantom(&spec, &res.table)?;
            hypercube::save_cube(&cube, &out.join("cube.oxc"))?;
            save_map(&truth, &out, "truth")?;
            std::fs::write(
                out.join("phantom.json"),
                serde_json::to_string_pretty(&spec)?,
            )?;
        }
        Command::SynthRgb { cube } => {
            let cube = hypercube::load_cube(cube)?;
            let rgb = hypercube::synthesize_rgb(&cube, &res.response)?;
            let grid = hypercube::WavelengthGrid::new(0.0, 1.0, 3)?;
            hypercube::save_cube(
                &Hypercube::new(rgb.width(), rgb.height(), grid, rgb.0.data.clone())?,
                &out.join("rgb.oxc"),
            )?;
            rgb.save_png(&out.join("rgb.png"))?;
        }
        Command::Sto2Oracle { cube } => {
            let cube = hypercube::load_cube(cube)?;
            let map =
                oximetry::estimate_sto2_map(&cube, &res.white_ref, &res.table, res.cod_threshold)?;
            save_map(&map, &out, "sto2")?;
            let counts = map.mask.counts();
            std::fs::write(
                out.join("mask_counts.json"),
                serde_json::to_string_pretty(&counts)?,
            )?;
            println!(
                "effective pixels: {} of {}",
                map.n_effective(),
                counts.total()
            );
        }
        Command::Mask { width, height, .. } => {
            let mask = cfg.bundle.mask(*width, *height)?;
            mask.save_csv(&out.join("fibres.csv"))?;
            mask.save_png(&out.join("fibres.png"))?;
            println!("fibres: {}", mask.len());
        }
        Command::Shsi { cube, .. } => {
            let cube = hypercube::load_cube(cube)?;
            let mask = cfg.bundle.mask(cube.width(), cube.height())?;
            let shsi: SparseHypercube = fibre::apply_mask(&cube, &mask)?;
            shsi.save(&out.join("shsi.oxc"))?;
            mask.save_csv(&out.join("fibres.csv"))?;
        }
        Command::Augment { .. } => {
            let manifest = experiment::build_dataset(&cfg, &out)?;
            println!(
                "acquisitions: {}, training samples: {}, test samples: {}",
                manifest.acquisitions.len(),
                manifest.train.len(),
                manifest.test.len()
            );
        }
        Command::Train {
            manifest, resume, ..
        } => {
            let base = manifest.parent().unwrap_or(Path::new("."));
            let source = ManifestSource::load(DatasetManifest::load(manifest)?, base)?;
            let mut state = match resume {
                Some(p) => TrainState::load(p)?,
                None => TrainState::new(&cfg.generator, &cfg.discriminator, cfg.seed)?,
            };
            seeds = vec![state.seed];
            gan::train(&mut state, &source, &cfg.train, Some(&out))?;
            if let Some(last) = state.history.last() {
                println!(
                    "step {}: loss_d {:.4} loss_g {:.4}",
                    last.step, last.loss_d, last.loss_g
                );
            }
        }
        Command::Infer { checkpoint, sample } => {
            let model = InferenceModel::load(checkpoint)?;
            let sample = Sample::load(sample)?;
            let (map, elapsed) = gan::infer(&model, &sample)?;
            save_map(&map, &out, "prediction")?;
            println!("inference: {:.1} ms", elapsed.as_secs_f64() * 1e3);
        }
        Command::Evaluate {
            checkpoint,
            manifest,
        } => {
            let model = InferenceModel::load(checkpoint)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let report = experiment::evaluate_manifest(
                &model,
                &DatasetManifest::load(manifest)?,
                base,
                &cfg.metrics,
            )?;
            report.save(&out)?;
            println!(
                "SSIM {:.3} ± {:.3}, e_bar {:.4} ± {:.4}, p_HAP {:.3} ± {:.3}",
                report.ssim.mean,
                report.ssim.std,
                report.e_bar.mean,
                report.e_bar.std,
                report.p_hap.mean,
                report.p_hap.std
            );
        }
        Command::Gradcheck => {
            let mut reports = kernel_suite(cfg.seed)?;
            reports.extend(gan::gradcheck::end_to_end_suite(cfg.seed)?);
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{} {:<50} max rel err {:.3e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Ablation { .. } => {
            seeds = cfg.ablation.seeds.clone();
            let report = experiment::run_ablation(&cfg, Some(&out))?;
            print!("{}", report.table());
        }
    }
    let args = std::env::args().skip(1).collect();
    Provenance::new(cli.command.name(), args, &cfg, seeds).save(&out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
