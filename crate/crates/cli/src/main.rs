//! `handik`: data generation, IK training, evaluation and the geometric solvers.
//!
//! Any subcommand accepts `--config file.json`. Each key of the JSON object is
//! read as the long flag of the same name (underscores become dashes). Flags
//! given on the command line take precedence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use handik::archive::{load_samples, save_samples};
use handik::detcodec::{recover_translation, solve_root_depth, Intrinsics};
use handik::evalmetrics::{align, auc, default_thresholds, evaluate_ik, pck, AlignMode, PckCurve, AUC_HI, AUC_LO};
use handik::handmodel::{load_model, save_model, synth_model, Frame, JointSet, KinematicModel};
use handik::ikengine::{load_mlp, save_mlp, train_with, LossWeights, Mlp, TrainConfig, DEFAULT_DEPTH, DEFAULT_HIDDEN};
use handik::mocapgen::{gen_samples, synth_pose_library, AugmentConfig, NoiseModel, PoseLibrary, SampleKind};
use handik::rotmath::Vec3;
use handik::shapefit::{bone_lengths, fit_shape, ShapeFitConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const DEFAULT_SEED: u64 = 0;
const DEFAULT_LIBRARY_SIZE: usize = 1554;

#[derive(Parser)]
#[command(name = "handik", version, about = "Hand kinematics toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic kinematic hand model.
    #[command(args_override_self = true)]
    SynthModel {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Drop the mesh block.
        #[arg(long)]
        no_mesh: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic pose library.
    #[command(args_override_self = true)]
    SynthLibrary {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LIBRARY_SIZE)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an augmented sample archive.
    #[command(args_override_self = true)]
    GenData {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "synth")]
        library: Option<PathBuf>,
        /// Use a synthetic library drawn from the seed.
        #[arg(long)]
        synth: bool,
        #[arg(long, default_value_t = DEFAULT_LIBRARY_SIZE)]
        library_size: usize,
        #[arg(long)]
        count: usize,
        /// Joint noise std in reference-bone units; 0 gives only rotation-labeled samples.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of noisy samples when `--noise` is positive.
        #[arg(long, default_value_t = 0.5)]
        noisy_share: f64,
        #[arg(long, default_value_t = AugmentConfig::default().shape_std)]
        shape_std: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an IK network on a sample archive.
    #[command(args_override_self = true)]
    TrainIk {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss table; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        learning_rate: f64,
        #[arg(long, default_value_t = TrainConfig::default().lr_decay)]
        lr_decay: f64,
        #[arg(long, default_value_t = TrainConfig::default().rotation_share)]
        rotation_share: f64,
        #[arg(long, default_value_t = DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = DEFAULT_DEPTH)]
        depth: usize,
        #[arg(long, value_enum, default_value_t = LossSet::Full)]
        loss: LossSet,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Evaluate a network: mean errors, PCK table and AUC.
    #[command(args_override_self = true)]
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the PCK table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Fit shape coefficients to bone lengths or joint positions.
    #[command(args_override_self = true)]
    FitShape {
        #[arg(long)]
        model: Option<PathBuf>,
        /// JSON array of bone lengths, ordered by child joint.
        #[arg(long, required_unless_present = "joints", conflicts_with = "joints")]
        lengths: Option<PathBuf>,
        /// JSON array of `[x, y, z]` joint positions.
        #[arg(long)]
        joints: Option<PathBuf>,
        #[arg(long, default_value_t = ShapeFitConfig::default().lambda_beta)]
        lambda: f64,
        #[arg(long, default_value_t = ShapeFitConfig::default().max_iters)]
        max_iters: usize,
        /// Result JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover root depth and camera-space translation from 2D joints.
    #[command(args_override_self = true)]
    SolveTranslation {
        #[arg(long)]
        fx: f64,
        #[arg(long)]
        fy: f64,
        #[arg(long)]
        cx: f64,
        #[arg(long)]
        cy: f64,
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        /// Root joint pixel, `u,v`.
        #[arg(long, value_parser = parse_pair)]
        uv_root: [f64; 2],
        /// Wrist joint pixel, `u,v`.
        #[arg(long, value_parser = parse_pair)]
        uv_wrist: [f64; 2],
        /// Wrist depth relative to the root, in reference-bone units.
        #[arg(long, allow_negative_numbers = true)]
        wrist_depth: f64,
        /// Absolute reference-bone length.
        #[arg(long)]
        ref_length: f64,
    },
    /// Write a PCK curve as SVG plus a two-column table.
    #[command(args_override_self = true)]
    PlotPck {
        /// Plot an existing table instead of evaluating a network.
        #[arg(long, conflicts_with_all = ["net", "samples"])]
        from_table: Option<PathBuf>,
        #[command(flatten)]
        eval: OptEvalArgs,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value = "3D PCK")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossSet {
    Full,
    XyzOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    Root,
    FingertipCentroid,
    None,
}

impl From<Align> for AlignMode {
    fn from(a: Align) -> Self {
        match a {
            Align::Root => AlignMode::Root,
            Align::FingertipCentroid => AlignMode::FingertipCentroid,
            Align::None => AlignMode::None,
        }
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Align::Root)]
    align: Align,
    /// Reference-bone length in mm; defaults to the model's mean-shape length.
    #[arg(long)]
    bone_mm: Option<f64>,
}

#[derive(clap::Args)]
struct OptEvalArgs {
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Align::Root)]
    align: Align,
    #[arg(long)]
    bone_mm: Option<f64>,
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?]),
        _ => Err(format!("expected `u,v`, got {s:?}")),
    }
}

/// Splice `--config` contents into the arguments right after the subcommand.
fn expand_config(mut args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => {
            let p = p.to_string();
            args.remove(pos);
            p
        }
        None => {
            ensure!(pos + 1 < args.len(), "--config needs a path");
            args.remove(pos);
            args.remove(pos)
        }
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {path}"))?
    else {
        bail!("config {path} must be a JSON object");
    };
    let mut extra = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => bail!("config key {key:?} has an unsupported value"),
        };
        match &value {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) => {}
            Value::Array(items) => {
                let joined: Result<Vec<String>> = items.iter().map(scalar).collect();
                extra.push(format!("{flag}={}", joined?.join(",")));
            }
            v => extra.push(format!("{flag}={}", scalar(v)?)),
        }
    }
    let at = 2.min(args.len());
    args.splice(at..at, extra);
    Ok(args)
}

fn model_or_default(path: &Option<PathBuf>) -> Result<KinematicModel> {
    match path {
        Some(p) => load_model(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(synth_model(DEFAULT_SEED)),
    }
}

fn write_output(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist", dir.display())
        }
        _ => Ok(()),
    }
}

fn synth_library(model: &KinematicModel, count: usize, seed: u64) -> Result<PoseLibrary> {
    Ok(synth_pose_library(count, model, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

struct Report {
    curve: PckCurve,
    auc: f64,
    samples: usize,
    position_error: f64,
    position_error_mm: f64,
    input_error: f64,
    rotation_error: Option<f64>,
}

fn evaluate(
    net: &Path,
    samples: &Path,
    model: &Option<PathBuf>,
    mode: AlignMode,
    bone_mm: Option<f64>,
) -> Result<Report> {
    let model = model_or_default(model)?;
    let net = load_mlp(net).with_context(|| format!("loading network {}", net.display()))?;
    let samples = load_samples(samples).with_context(|| format!("loading samples {}", samples.display()))?;
    let eval = evaluate_ik(&net, &samples, &model)?;
    let mm = match bone_mm {
        Some(v) => v,
        None => JointSet::new(model.rest_joints0().to_vec(), Frame::Absolute).reference_length(&model),
    };
    ensure!(mm > 0.0, "--bone-mm must be positive");
    let (pred, gt): (Vec<_>, Vec<_>) = eval
        .predicted
        .iter()
        .zip(&eval.targets)
        .map(|(p, g)| {
            let (p, g) = (p.scaled(mm), g.scaled(mm));
            (align(&p, &g, mode, &model), g)
        })
        .unzip();
    let curve = pck(&pred, &gt, &default_thresholds())?;
    Ok(Report {
        auc: auc(&curve, AUC_LO, AUC_HI)?,
        curve,
        samples: samples.len(),
        position_error: eval.position_error,
        position_error_mm: handik::evalmetrics::mean_error(&pred, &gt)?,
        input_error: eval.input_error,
        rotation_error: eval.rotation_error,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthModel { seed, no_mesh, out } => {
            require_parent(&out)?;
            let model = synth_model(seed);
            save_model(&if no_mesh { model.without_mesh() } else { model }, &out)?;
            eprintln!("wrote model to {}", out.display());
        }
        Command::SynthLibrary { model, count, seed, out } => {
            ensure!(count > 0, "--count must be positive");
            require_parent(&out)?;
            let model = model_or_default(&model)?;
            synth_library(&model, count, seed)?.save(&out)?;
            eprintln!("wrote {count} poses to {}", out.display());
        }
        Command::GenData { model, library, synth, library_size, count, noise, noisy_share, shape_std, seed, out } => {
            ensure!(count > 0, "--count must be positive");
            ensure!(noise >= 0.0, "--noise must be non-negative");
            ensure!((0.0..=1.0).contains(&noisy_share), "--noisy-share must lie in [0, 1]");
            require_parent(&out)?;
            let model = model_or_default(&model)?;
            let lib = match (library, synth) {
                (Some(p), _) => PoseLibrary::load(&p).with_context(|| format!("loading library {}", p.display()))?,
                (None, true) => synth_library(&model, library_size, seed)?,
                (None, false) => bail!("pass --library or --synth"),
            };
            let cfg = AugmentConfig { shape_std, seed, ..AugmentConfig::default() };
            let noisy = if noise > 0.0 { (count as f64 * noisy_share).round() as usize } else { 0 };
            let mut samples = gen_samples(&lib, &model, &cfg, None, 0, count - noisy)?;
            let nm = NoiseModel { std: noise, ..NoiseModel::default() };
            samples.extend(gen_samples(&lib, &model, &cfg, Some(&nm), 0, noisy)?);
            save_samples(&samples, &out)?;
            let mocap = samples.iter().filter(|s| s.kind == SampleKind::Mocap).count();
            println!("mocap\t{mocap}\nnoisy\t{}", samples.len() - mocap);
        }
        Command::TrainIk {
            samples,
            model,
            out,
            log,
            epochs,
            batch_size,
            learning_rate,
            lr_decay,
            rotation_share,
            hidden,
            depth,
            loss,
            seed,
        } => {
            require_parent(&out)?;
            let model = model_or_default(&model)?;
            let data = load_samples(&samples).with_context(|| format!("loading samples {}", samples.display()))?;
            ensure!(!data.is_empty(), "sample archive is empty");
            let joints = data[0].positions.len();
            ensure!(joints == model.joint_count(), "samples have {joints} joints, model has {}", model.joint_count());
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate,
                lr_decay,
                rotation_share,
                seed,
                weights: match loss {
                    LossSet::Full => LossWeights::default(),
                    LossSet::XyzOnly => LossWeights::xyz_only(),
                },
                ..TrainConfig::default()
            };
            let mut net = Mlp::with_hidden(12 * joints, hidden, depth, 4 * joints, seed)?;
            let history = train_with(&mut net, data.as_slice(), &model, &cfg, |s| {
                eprintln!("epoch {} loss {:.6}", s.epoch, s.loss);
            })?;
            save_mlp(&net, &out)?;
            let mut table = String::from("epoch\tlearning_rate\tloss\tcos\tl2\txyz\tnorm\n");
            for s in &history.epochs {
                table += &format!(
                    "{}\t{:e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\n",
                    s.epoch, s.learning_rate, s.loss, s.cos, s.l2, s.xyz, s.norm
                );
            }
            write_output(&log, &table)?;
        }
        Command::Eval { eval, table } => {
            let r = evaluate(&eval.net, &eval.samples, &eval.model, eval.align.into(), eval.bone_mm)?;
            let mut text = format!(
                "samples\t{}\nmean_error\t{:.6}\nmean_error_mm\t{:.4}\ninput_error\t{:.6}\n",
                r.samples, r.position_error, r.position_error_mm, r.input_error
            );
            if let Some(e) = r.rotation_error {
                text += &format!("rotation_error_rad\t{e:.6}\n");
            }
            text += &format!("auc_{AUC_LO}_{AUC_HI}\t{:.6}\n\n{}", r.auc, r.curve.to_table());
            print!("{text}");
            if let Some(p) = table {
                fs::write(&p, r.curve.to_table()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::FitShape { model, lengths, joints, lambda, max_iters, out } => {
            let model = model_or_default(&model)?;
            let lengths: Vec<f64> = match (lengths, joints) {
                (Some(p), _) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing lengths {}", p.display()))?,
                (None, Some(p)) => {
                    let pts: Vec<[f64; 3]> = serde_json::from_str(&fs::read_to_string(&p)?)
                        .with_context(|| format!("parsing joints {}", p.display()))?;
                    ensure!(
                        pts.len() == model.joint_count(),
                        "expected {} joints, got {}",
                        model.joint_count(),
                        pts.len()
                    );
                    let js = JointSet::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), Frame::Absolute);
                    bone_lengths(&js, &model)
                }
                (None, None) => bail!("pass --lengths or --joints"),
            };
            ensure!(
                lengths.len() == model.bones().len(),
                "expected {} bone lengths, got {}",
                model.bones().len(),
                lengths.len()
            );
            let reference = lengths[model.reference_bone()];
            ensure!(reference > 0.0, "reference bone has zero length");
            let ratios: Vec<f64> = lengths.iter().map(|l| l / reference).collect();
            let cfg = ShapeFitConfig { lambda_beta: lambda, max_iters, ..ShapeFitConfig::default() };
            let r = fit_shape(&ratios, &model, &cfg)?;
            let report = json!({
                "beta": r.beta.beta,
                "beta_norm": r.beta.norm(),
                "residual": r.residual,
                "iterations": r.iterations,
                "converged": r.converged,
            });
            write_output(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::SolveTranslation { fx, fy, cx, cy, skew, uv_root, uv_wrist, wrist_depth, ref_length } => {
            let k = Intrinsics::with_skew(fx, fy, cx, cy, skew)?;
            let z = solve_root_depth(&k, uv_root, uv_wrist, wrist_depth, ref_length)?;
            let t = recover_translation(&k, uv_root, z)?;
            println!("{}", json!({ "depth": z, "translation": [t.x, t.y, t.z] }));
        }
        Command::PlotPck { from_table, eval, svg, table, title } => {
            require_parent(&svg)?;
            let curve = match (from_table, eval.net, eval.samples) {
                (Some(p), _, _) => PckCurve::from_table(&fs::read_to_string(&p)?)?,
                (None, Some(net), Some(samples)) => {
                    evaluate(&net, &samples, &eval.model, eval.align.into(), eval.bone_mm)?.curve
                }
                _ => bail!("pass --from-table or both --net and --samples"),
            };
            ensure!(!curve.thresholds.is_empty(), "PCK table is empty");
            fs::write(&svg, curve.to_svg(&title)).with_context(|| format!("writing {}", svg.display()))?;
            write_output(&table, &curve.to_table())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    match run(Cli::parse_from(args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
