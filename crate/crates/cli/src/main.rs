use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sacrfp::convert::{self, VERIFY_INPUTS, VERIFY_TOLERANCE};
use sacrfp::gradcheck::{self, CheckOptions, LayerKind};
use sacrfp::harness::{self, TrainConfig};
use sacrfp::{Checkpoint, DenseModel, Error, LoadMode};

#[derive(Parser)]
#[command(name = "sacrfp", version, about = "Switchable atrous convolution and recursive feature pyramids")]
struct Cli {
    /// Overrides the seed of the config (training, scenes, probe inputs).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes; writes metrics.txt and model.rfpk.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-level IoU of a checkpoint on held-out synthetic scenes.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Convert every 3x3 conv of a checkpoint to SAC.
    ///
    /// With --verify, 10 seeded random images go through the plain and the
    /// converted model and the largest output difference must be at most
    /// 1e-5: ten times the f32 accumulation error seen through the default
    /// model's depth.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Central-difference gradient checks of every layer type in f64.
    Gradcheck {
        /// Restrict to these layer types (conv, ops, sac, aspp, fusion, fpn,
        /// backbone, rfp, model).
        #[arg(long = "layer")]
        layers: Vec<String>,
        /// Perturb analytic gradients by 1%; the suite must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write one PGM switch map per SAC layer.
    VizSwitch {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Binary PGM/PPM input; defaults to a synthetic scene.
        #[arg(long, conflicts_with = "scene_seed")]
        image: Option<PathBuf>,
        #[arg(long)]
        scene_seed: Option<u64>,
        /// Only layers whose path contains this string.
        #[arg(long)]
        layer: Option<String>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Defaults to `checkpoint_in` of the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// JSON config: training settings plus file locations. Unknown keys fail.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    train: TrainConfig,
    checkpoint_in: Option<PathBuf>,
    checkpoint_out: Option<PathBuf>,
    output_dir: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => train(&config, cli.seed),
        Command::Eval { model } => eval(&model, cli.seed),
        Command::Convert {
            input,
            output,
            verify,
            config,
        } => convert(&input, &output, verify, config.as_deref(), cli.seed),
        Command::Gradcheck { layers, inject_fault } => gradcheck(&layers, inject_fault, cli.seed),
        Command::VizSwitch {
            model,
            out_dir,
            image,
            scene_seed,
            layer,
        } => viz_switch(&model, &out_dir, image.as_deref(), scene_seed, layer.as_deref(), cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<CliConfig, Failure> {
    let mut cfg = match path {
        None => CliConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::new(EXIT_USAGE, format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", path.display())))
}

/// The configured model with the checkpoint's weights. Whether it is SAC is
/// read from the checkpoint.
fn load_model(args: &ModelArgs, cfg: &CliConfig) -> Result<DenseModel<f32>, Failure> {
    let path = args
        .checkpoint
        .as_ref()
        .or(cfg.checkpoint_in.as_ref())
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no checkpoint given (--checkpoint or checkpoint_in)"))?;
    let ckpt = load_checkpoint(path)?;
    let mut spec = cfg.train.spec();
    spec.variant.use_sac = ckpt.has_sac();
    let mut model = DenseModel::new(&spec, 0)?;
    ckpt.apply_to(&mut model, LoadMode::Strict)?;
    Ok(model)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn train(config: &Path, seed: Option<u64>) -> Outcome {
    let cfg = load_config(Some(config), seed)?;
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let metrics_path = out_dir.join("metrics.txt");
    let ckpt_path = cfg
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| out_dir.join("model.rfpk"));
    let start = cfg.checkpoint_in.as_deref().map(load_checkpoint).transpose()?;

    let total = cfg.train.total_steps();
    let mut losses = Vec::with_capacity(total);
    let result = harness::train_with(&cfg.train, start.as_ref(), &mut |step, loss| {
        losses.push(loss);
        if step % 10 == 0 || step == total {
            eprintln!("step {step}/{total} loss {loss:.5}");
        }
    });
    match result {
        Ok(trained) => {
            write_file(&metrics_path, trained.metrics.to_text().as_bytes())?;
            let bytes = Checkpoint::from_module(&trained.model).to_bytes()?;
            write_file(&ckpt_path, &bytes)?;
            println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
            Ok(())
        }
        Err(Error::NonFinite { step }) => {
            let partial = harness::Metrics {
                loss: losses,
                iou: Vec::new(),
                non_finite: true,
            };
            write_file(&metrics_path, partial.to_text().as_bytes())?;
            Err(Error::NonFinite { step }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(args: &ModelArgs, seed: Option<u64>) -> Outcome {
    let cfg = load_config(args.config.as_deref(), seed)?;
    let model = load_model(args, &cfg)?;
    let t = &cfg.train;
    let scenes = harness::gen_dataset(
        t.seed ^ harness::EVAL_STREAM,
        t.eval_size.max(1),
        t.image_size,
        &t.architecture,
    )?;
    let metrics = harness::evaluate(&model, &scenes)?;
    for (i, v) in metrics.iou.iter().enumerate() {
        println!("iou level {i}: {v:.4}");
    }
    if let Some(m) = metrics.mean_iou() {
        println!("mean iou: {m:.4}");
    }
    if metrics.non_finite {
        return Err(Failure::new(EXIT_NUMERIC, "non-finite logits"));
    }
    Ok(())
}

fn convert(input: &Path, output: &Path, verify: bool, config: Option<&Path>, seed: Option<u64>) -> Outcome {
    let cfg = load_config(config, seed)?;
    let ckpt = load_checkpoint(input)?;
    let conv = convert::convert_checkpoint(&ckpt, &cfg.train.spec())?;
    if conv.was_sac {
        println!("{} already holds SAC layers; written unchanged", input.display());
    }
    let bytes = Checkpoint::from_module(&conv.sac).to_bytes()?;
    write_file(output, &bytes)?;
    println!(
        "wrote {} ({} SAC layers)",
        output.display(),
        conv.sac.sac_layers().len()
    );
    if verify {
        let t = &cfg.train;
        let images = convert::probe_images(t.seed, VERIFY_INPUTS, t.architecture.in_channels, t.image_size);
        let diff = convert::max_output_diff(&conv.plain, &conv.sac, &images)?;
        if diff <= VERIFY_TOLERANCE {
            println!("max diff {diff:.3e} <= {VERIFY_TOLERANCE:e} over {VERIFY_INPUTS} inputs");
        } else {
            return Err(Failure::new(
                EXIT_VERIFY,
                format!("max diff {diff:.3e} exceeds {VERIFY_TOLERANCE:e}"),
            ));
        }
    }
    Ok(())
}

fn gradcheck(layers: &[String], inject_fault: bool, seed: Option<u64>) -> Outcome {
    let kinds = if layers.is_empty() {
        LayerKind::ALL.to_vec()
    } else {
        layers
            .iter()
            .map(|l| {
                LayerKind::parse(l).ok_or_else(|| Failure::new(EXIT_USAGE, format!("unknown layer type {l:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let opts = CheckOptions {
        seed: seed.unwrap_or(0),
        corrupt_analytic: inject_fault,
        ..CheckOptions::default()
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<10} {:>7} {:>8} {:>6} {:>12}  status", "layer", "params", "samples", "kinks", "worst_rel");
    let mut failing = Vec::new();
    for kind in kinds {
        let report = gradcheck::check_layer::<f64>(kind, &opts)?;
        let samples: usize = report.params.iter().map(|p| p.checked).sum();
        let kinks: usize = report.params.iter().map(|p| p.kinks).sum();
        let status = if report.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>8} {:>6} {:>12.3e}  {status}",
            kind.name(),
            report.params.len(),
            samples,
            kinks,
            report.worst()
        );
        if report.usable_fraction() < report.min_usable {
            failing.push(format!("{kind}: too few usable samples"));
        }
        for p in report.failures() {
            failing.push(format!("{kind}: {} ({:.3e})", p.name, p.worst));
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!(
                "relative error above {:e}:\n  {}",
                opts.tolerance,
                failing.join("\n  ")
            ),
        ))
    }
}

fn viz_switch(
    args: &ModelArgs,
    out_dir: &Path,
    image: Option<&Path>,
    scene_seed: Option<u64>,
    layer: Option<&str>,
    seed: Option<u64>,
) -> Outcome {
    let cfg = load_config(args.config.as_deref(), seed)?;
    let model = load_model(args, &cfg)?;
    if model.sac_layers().is_empty() {
        return Err(Failure::new(EXIT_USAGE, "checkpoint has no SAC layers"));
    }
    let t = &cfg.train;
    let input = match image {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", p.display())))?;
            let pnm = harness::read_pnm(&bytes)?;
            let m = t.architecture.backbone().max_stride();
            if pnm.width % m != 0 || pnm.height % m != 0 {
                return Err(Failure::new(
                    EXIT_USAGE,
                    format!("image is {}x{}; sides must be multiples of {m}", pnm.width, pnm.height),
                ));
            }
            pnm.to_tensor(t.architecture.in_channels)?
        }
        None => {
            let s = scene_seed.unwrap_or(t.seed);
            harness::gen_dataset(s, 1, t.image_size, &t.architecture)?.remove(0).image
        }
    };
    let written = harness::export_switch_maps(&model, &input, layer, out_dir)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
