//! Command-line frontend: simulate scenes, run the fusion pipeline, train
//! and evaluate at toy scale, and verify gradients.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tacood::evalkit::{evaluate, inject_latency, mean_center_error};
use tacood::fusion::{ModelConfig, ModelParams, TimestampMode};
use tacood::gradcheck::{check_all, mutation_detected, op_graph_max_rel_err, CORRUPTIBLE_OPS, GRAD_TOL};
use tacood::pipeline::{Pipeline, Variant};
use tacood::scene::{build_scene, gt_boxes_at, make_async_frame, Frame, Scene, ScenarioConfig};
use tacood::train::{eval_center_error, train_toy, EvalHead, TrainConfig};
use tacood::{Error, Result};

#[derive(Parser)]
#[command(name = "tacood", version, about = "Time-aligned cooperative object detection, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Decoder feature dimension.
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    k_roi_local: usize,
    #[arg(long, default_value_t = 32)]
    k_roi_global: usize,
    #[arg(long, default_value_t = 24)]
    k_q: usize,
    #[arg(long, default_value_t = 4)]
    t_window: usize,
    /// Per-point timestamps ("pointwise") or per-scan ("framewise").
    #[arg(long, default_value = "pointwise")]
    timestamp_mode: String,
    /// Use the naive azimuth metric when retrieving query timestamps.
    #[arg(long)]
    naive_azimuth: bool,
    /// Leave position embeddings out of attention key rows.
    #[arg(long)]
    no_pos_emb_keys: bool,
    /// Ablation variant.
    #[arg(long, default_value = "full")]
    variant: String,
}

impl ModelArgs {
    fn model(&self) -> Result<ModelConfig> {
        let timestamp_mode = match self.timestamp_mode.as_str() {
            "pointwise" => TimestampMode::Pointwise,
            "framewise" => TimestampMode::Framewise,
            other => {
                return Err(Error::Config(format!(
                    "timestamp_mode: expected pointwise or framewise, got {other:?}"
                )))
            }
        };
        let config = ModelConfig {
            d: self.d,
            k_roi_local: self.k_roi_local,
            k_roi_global: self.k_roi_global,
            k_q: self.k_q,
            t_window: self.t_window,
            timestamp_mode,
            eq1_wrap: !self.naive_azimuth,
            pos_emb_in_keys: !self.no_pos_emb_keys,
        };
        config.validate()?;
        Ok(config)
    }

    fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write it as a frame directory tree.
    Simulate {
        /// Scenario config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the fusion pipeline over a simulated dataset and write
    /// detections as JSON lines.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained parameter file; a seeded initialization is used if absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cooperative latency in frames.
        #[arg(long, default_value_t = 0)]
        latency: usize,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate pipeline detections against the simulated ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        latency: usize,
        /// IoU threshold for a true positive.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 31)]
        seed: u64,
        #[arg(long, default_value_t = GRAD_TOL)]
        tol: f64,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Also verify that corrupting each op's backward pass is detected.
        #[arg(long)]
        mutations: bool,
    },
    /// Train on a built-in toy scenario and save the parameters.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        steps: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Ablation table: variant x latency, mean gated center error.
    Ablate {
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn load_scenario(path: Option<&PathBuf>) -> Result<ScenarioConfig> {
    let config = match path {
        None => ScenarioConfig::default(),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
    };
    config.validate()?;
    Ok(config)
}

fn load_dataset(root: &PathBuf, latency: usize) -> Result<(Scene, Vec<Frame>)> {
    let scene = tacood::io::read_scene(root)?;
    let n = tacood::io::count_frames(root)?;
    if n == 0 {
        return Err(Error::InvalidInput(format!("no frames under {}", root.display())));
    }
    let frames: Vec<Frame> = (0..n).map(|j| tacood::io::read_frame(root, j)).collect::<Result<_>>()?;
    inject_latency(&frames, scene.ego_id, latency).map(|f| (scene, f))
}

fn load_params(path: Option<&PathBuf>, model: &ModelConfig, seed: u64) -> Result<ModelParams> {
    match path {
        Some(p) => {
            let params = ModelParams::load(p)?;
            if params.d != model.d {
                return Err(Error::Config(format!(
                    "parameter file has d = {}, model expects {}",
                    params.d, model.d
                )));
            }
            Ok(params)
        }
        None => ModelParams::init(model, seed),
    }
}

/// Built-in toy scenario for train-toy and ablate.
fn toy_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        duration: 1.6,
        num_agents: 2,
        num_objects: 2,
        seed,
        angular_resolution_deg: 1.0,
        ..ScenarioConfig::default()
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out, seed } => {
            let mut scenario = load_scenario(config.as_ref())?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let scene = build_scene(&scenario, scenario.seed)?;
            let frames: Vec<Frame> =
                (0..scene.n_frames()).map(|j| make_async_frame(&scene, j)).collect::<Result<_>>()?;
            tacood::io::write_dataset(&out, &scene, &frames)?;
            println!(
                "wrote {} frames ({} agents, {} objects) to {}",
                frames.len(),
                scene.agents.len(),
                scene.objects.len(),
                out.display()
            );
        }
        Command::Fuse { data, out, params, seed, latency, model } => {
            let config = model.model()?;
            let variant = model.variant()?;
            let (scene, frames) = load_dataset(&data, latency)?;
            let params = load_params(params.as_ref(), &config, seed)?;
            let mut pipe = Pipeline::new(params, config, variant)?;
            let mut per_frame = Vec::new();
            for frame in &frames {
                let o = pipe.process_frame(&scene, frame, None)?;
                per_frame.push((frame.index, o.fused_detections));
            }
            tacood::io::write_detections_jsonl(&out, &per_frame)?;
            let n: usize = per_frame.iter().map(|(_, d)| d.len()).sum();
            println!("wrote {n} detections over {} frames to {}", frames.len(), out.display());
        }
        Command::Eval { data, params, seed, latency, iou, model } => {
            let config = model.model()?;
            let variant = model.variant()?;
            let (scene, frames) = load_dataset(&data, latency)?;
            let params = load_params(params.as_ref(), &config, seed)?;
            let mut pipe = Pipeline::new(params, config, variant)?;
            let (mut ap_sum, mut err_sum, mut n) = (0.0, 0.0, 0usize);
            for frame in &frames {
                let o = pipe.process_frame(&scene, frame, None)?;
                let gts: Vec<_> =
                    gt_boxes_at(&scene, frame.t_aligned)?.into_iter().map(|(_, b)| b).collect();
                if gts.is_empty() {
                    continue;
                }
                let r = evaluate(&o.fused_detections, &gts, iou)?;
                ap_sum += r.ap;
                err_sum += mean_center_error(&o.fused_detections, &gts, 5.0)?;
                n += 1;
            }
            if n == 0 {
                return Err(Error::Verification("no frames with ground truth".into()));
            }
            println!(
                "frames {n}  latency {latency}  mean AP@{iou:.2} {:.4}  mean center err {:.3} m",
                ap_sum / n as f64,
                err_sum / n as f64
            );
        }
        Command::Gradcheck { seed, tol, variant, mutations } => {
            let variant: Variant = variant.parse()?;
            let op_err = op_graph_max_rel_err(seed, None)?;
            println!("op graph max rel err {op_err:.3e}");
            let report = check_all(variant, seed, tol)?;
            println!("{report}");
            let mut failed = op_err >= tol || !report.passed();
            if mutations {
                for op in CORRUPTIBLE_OPS {
                    let caught = mutation_detected(op, 1.05, seed)?;
                    println!("mutation {op:?}: {}", if caught { "detected" } else { "MISSED" });
                    failed |= !caught;
                }
            }
            if failed {
                return Err(Error::Verification("gradient check failed".into()));
            }
        }
        Command::TrainToy { out, steps, lr, seed, model } => {
            let config = model.model()?;
            let variant = model.variant()?;
            let scenario = toy_scenario(seed);
            let scene = build_scene(&scenario, scenario.seed)?;
            let frames: Vec<Frame> =
                (0..scene.n_frames()).map(|j| make_async_frame(&scene, j)).collect::<Result<_>>()?;
            let tc = TrainConfig { steps, lr, seed, ..TrainConfig::default() };
            let r = train_toy(&scene, &frames, &config, variant, &tc)?;
            if r.diverged {
                eprintln!("warning: training diverged after {} steps", r.losses.len());
            }
            let err = eval_center_error(
                &r.params, &config, variant, &scene, &frames, 0, 5.0, EvalHead::Fused,
            )?;
            r.params.save(&out)?;
            let first = r.losses.first().copied().unwrap_or(f64::NAN);
            let last = r.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "steps {}  loss {first:.4} -> {last:.4}  center err {err:.3} m  params {}",
                r.losses.len(),
                out.display()
            );
        }
        Command::Ablate { steps, seed, model } => {
            let config = model.model()?;
            let scenario = toy_scenario(seed);
            let scene = build_scene(&scenario, scenario.seed)?;
            let frames: Vec<Frame> =
                (0..scene.n_frames()).map(|j| make_async_frame(&scene, j)).collect::<Result<_>>()?;
            let latencies = [0usize, 1, 2];
            println!("{:<24} {:>10} {:>10} {:>10}", "variant", "lat 0", "lat 1", "lat 2");
            for variant in Variant::ALL {
                let tc = TrainConfig { steps, seed, lr: 2e-3, ..TrainConfig::default() };
                let r = train_toy(&scene, &frames, &config, variant, &tc)?;
                let mut row = format!("{:<24}", variant.to_string());
                for k in latencies {
                    let e = eval_center_error(
                        &r.params, &config, variant, &scene, &frames, k, 5.0, EvalHead::Fused,
                    )?;
                    row.push_str(&format!(" {e:>9.3}m"));
                }
                println!("{row}");
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
