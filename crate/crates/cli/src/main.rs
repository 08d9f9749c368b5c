//! `mvseg`: data generation, training, evaluation, ablations, batch
//! prediction and the interactive service.

mod config;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mvseg_core::ablation::{run_ablation, AblationConfig, Suite};
use mvseg_core::bundle_io::{encode_mask_png, load_bundle, save_bundle};
use mvseg_core::checkpoint::{load_checkpoint, save_checkpoint};
use mvseg_core::eval::{evaluate, EvalReport};
use mvseg_core::model::{Model, SceneContext};
use mvseg_core::rle::EncodedMask;
use mvseg_core::scenegen::{corrupt_pointmap, generate_scene, SceneBundle};
use mvseg_core::training::{single_view_samples, train_with};
use mvseg_core::{rng, Error};
use mvseg_service::{MaskResponse, PromptRequest};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mvseg", version, about = "Promptable multi-view segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; also replaces the training and prompt-sampling seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic multi-view scene bundles.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Train a model on single-view samples and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Number of generated training scenes.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of scene bundles; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use only the first N views of every scene.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        svg: bool,
    },
    /// Run one ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
        /// Comma-separated cells; the suite's defaults when absent.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
        /// Trained model reused by suites that do not retrain.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
    /// Segment one scene from a prompt file and write per-view mask PNGs.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene bundle directory.
        #[arg(long)]
        scene: PathBuf,
        /// JSON `{prompts: [{view, row, col, polarity}]}`.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the interactive HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

/// A runtime failure reported as one line.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<String> for Failure {
    fn from(e: String) -> Self {
        Failure(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.protocol.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| Failure(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("config.json"), cfg.to_json())
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { common, out, count, views, noise_scale } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = count {
                cfg.scenes.count = n;
            }
            if let Some(v) = views {
                cfg.scenes.scene.views = v;
            }
            if let Some(s) = noise_scale {
                cfg.scenes.noise_scale = s;
            }
            prepare_out(&out, &cfg)?;
            gen_data(&cfg, &out)
        }
        Command::Train { common, out, steps, batch_size, learning_rate, scenes } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(n) = scenes {
                cfg.data.scenes = n;
            }
            cfg.validate()?;
            prepare_out(&out, &cfg)?;
            train(&cfg, &out)
        }
        Command::Eval { common, checkpoint, out, data, frames, svg } => {
            let mut cfg = load_config(&common)?;
            if frames.is_some() {
                cfg.protocol.frames = frames;
            }
            let (model, _) = load_checkpoint(&checkpoint)?;
            let scenes = match &data {
                Some(dir) => load_scene_dir(dir)?,
                None => cfg.eval.scenes()?,
            };
            prepare_out(&out, &cfg)?;
            let report = evaluate(&model, &scenes, &cfg.protocol)?;
            log::info!("mIoU {:.4} mAcc {:.4} over {} objects", report.miou(), report.macc(), report.rows.len());
            write_report(&report, &out, svg.then_some("eval"))
        }
        Command::Ablate { common, suite, cells, checkpoint, out, svg } => {
            let cfg = load_config(&common)?;
            let suite: Suite = suite.parse()?;
            let cells = cells.unwrap_or_else(|| suite.default_cells());
            let base = match &checkpoint {
                Some(dir) => {
                    let (model, manifest) = load_checkpoint(dir)?;
                    if manifest.train.as_ref().is_some_and(|t| *t != cfg.train) {
                        log::warn!("checkpoint was trained with a different train config; it is reused as the base model");
                    }
                    Some(model)
                }
                None => None,
            };
            let mut ab = AblationConfig {
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                data: cfg.data.clone(),
                eval: cfg.eval.clone(),
                protocol: cfg.protocol.clone(),
                seed: cfg.seed,
            };
            if let Some(m) = &base {
                ab.model = m.config.clone();
            }
            prepare_out(&out, &cfg)?;
            let report = run_ablation(suite, &cells, &ab, base.as_ref())?;
            for c in report.cells() {
                log::info!("{} {}: mIoU {:.4} mAcc {:.4}", c.suite, c.cell, c.miou, c.macc);
            }
            write_report(&report, &out, svg.then_some(suite.name()))
        }
        Command::Predict { common, checkpoint, scene, prompts, out } => {
            let cfg = load_config(&common)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let bundle = load_bundle(&scene)?;
            let text = fs::read_to_string(&prompts).map_err(|e| Failure(format!("cannot read {}: {e}", prompts.display())))?;
            let req: PromptRequest =
                serde_json::from_str(&text).map_err(|e| Failure(format!("invalid prompt file {}: {e}", prompts.display())))?;
            prepare_out(&out, &cfg)?;
            predict(&model, &bundle, &req, &out)
        }
        Command::Serve { common, port, data_dir, checkpoint_dir } => {
            let cfg = load_config(&common)?;
            let service = cfg.service.clone().with_overrides(port, data_dir, checkpoint_dir);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure(e.to_string()))?;
            rt.block_on(mvseg_service::serve(service)).map_err(|e| Failure(format!("server failed: {e}")))
        }
    }
}

/// Scenes are a pure function of the config and seed, so repeated runs
/// produce identical trees.
fn gen_data(cfg: &RunConfig, out: &Path) -> CmdResult {
    let g = &cfg.scenes;
    for i in 0..g.count {
        let seed = rng::derive(cfg.seed, i as u64);
        let clean = generate_scene(&g.scene, seed)?;
        let bundle = corrupt_pointmap(&clean, g.noise_scale, g.low_conf_fraction, rng::derive(seed, u64::MAX))?;
        save_bundle(&bundle, &out.join(&bundle.scene_id))?;
    }
    log::info!("wrote {} scenes to {}", g.count, out.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> CmdResult {
    let start = Instant::now();
    let samples = single_view_samples(&cfg.data, cfg.seed)?;
    log::info!("{} training samples", samples.len());
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train_with(model, &samples, &cfg.train, |step, _, loss| {
        if (step + 1) % every == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
        ControlFlow::Continue(())
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&out.join("loss.csv"), csv)?;
    save_checkpoint(out, &outcome.model, Some(&cfg.train), outcome.steps, cfg.seed)?;
    log::info!("trained {} steps in {:.1}s", outcome.steps, start.elapsed().as_secs_f64());
    Ok(())
}

fn load_scene_dir(dir: &Path) -> Result<Vec<SceneBundle>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure(format!("cannot read {}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure(format!("no scene bundles under {}", dir.display())));
    }
    Ok(dirs.iter().map(|d| load_bundle(d)).collect::<Result<_, _>>()?)
}

fn write_report(report: &EvalReport, out: &Path, svg_title: Option<&str>) -> CmdResult {
    write(&out.join("report.csv"), report.to_csv())?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    write(&out.join("report.json"), json)?;
    if let Some(title) = svg_title {
        write(&out.join("report.svg"), report.to_svg(title))?;
    }
    Ok(())
}

fn predict(model: &Model, bundle: &SceneBundle, req: &PromptRequest, out: &Path) -> CmdResult {
    let ctx = SceneContext::new(model, &bundle.views)?;
    let preds = model.predict(&ctx, &req.prompts)?;
    let mut masks = Vec::with_capacity(preds.len());
    for (v, p) in preds.iter().enumerate() {
        write(&out.join(format!("mask_v{v}.png")), encode_mask_png(&p.binary)?)?;
        masks.push(EncodedMask::new(v, &p.binary));
    }
    let json = serde_json::to_string_pretty(&MaskResponse { masks }).expect("masks serialize");
    write(&out.join("masks.json"), json)
}
