//! `ted4`: scene synthesis, training, coding, rendering, evaluation, RD
//! sweeps and bitstream statistics for the anchor-based dynamic splat codec.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ted4::coder::{container_stats, read_container, write_container};
use ted4::error::Error as TedError;
use ted4::model::{Model, PriorKind, QuantizedModel};
use ted4::raster::RenderSettings;
use ted4::scene::{load_scene, save_scene, synth_scene, SCENE_NAMES};
use ted4::temporal::duration_histogram;
use ted4::train::{bd_rate, rd_sweep, train, TrainConfig};

#[derive(Parser)]
#[command(name = "ted4", version, about = "Temporally activated anchor-splat codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Hyper,
    Factorized,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera scene directory.
    Synth {
        /// One of: static-room, slider, occluder.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model on a scene directory and write a checkpoint.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// TOML or JSON training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the tuned preset for a shipped scene name.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda_rate: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        prior: Option<PriorArg>,
        /// Ablation: disable temporal activation entirely.
        #[arg(long, default_value_t = false)]
        no_temporal_activation: bool,
    },
    /// Quantize a checkpoint and write the bitstream container.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a container and dump the decoder-visible state as JSON.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view of a decoded container to an image.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        frame: Option<usize>,
        /// Normalized time in [0,1]; defaults to frame 0's timestamp.
        #[arg(long)]
        time: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode, render every frame and report quality metrics as JSON.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/encode/evaluate one model per rate point; write CSV and JSON.
    RdSweep {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the tuned preset for a shipped scene name.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated rate-control factors.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prior: Option<PriorArg>,
        /// Ablation: disable temporal activation entirely.
        #[arg(long, default_value_t = false)]
        no_temporal_activation: bool,
        /// A previously written sweep CSV to compute a BD-rate against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Per-section byte breakdown and temporal-duration histogram.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(ted) = err.downcast_ref::<TedError>() {
        return match ted {
            TedError::Io(_) | TedError::Image(_) => 3,
            TedError::Format(_) | TedError::Json(_) => 4,
            TedError::Diverged(_) | TedError::NonFiniteLoss { .. } => 5,
            _ => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    4
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("TED4_SEED").ok().and_then(|v| v.parse().ok())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).context("parsing JSON config")?
    } else {
        toml::from_str(&text).context("parsing TOML config")?
    };
    Ok(cfg)
}

fn apply_overrides(
    cfg: &mut TrainConfig,
    seed: Option<u64>,
    lambda_rate: Option<f64>,
    iterations: Option<usize>,
    prior: Option<PriorArg>,
    no_temporal_activation: bool,
) {
    if let Some(s) = seed.or_else(env_seed) {
        cfg.seed = s;
    }
    if let Some(l) = lambda_rate {
        cfg.weights.lambda_rate = l;
    }
    if let Some(i) = iterations {
        cfg.iterations = i;
    }
    if let Some(p) = prior {
        cfg.model.prior = match p {
            PriorArg::Hyper => PriorKind::Hyper,
            PriorArg::Factorized => PriorKind::Factorized,
        };
    }
    if no_temporal_activation {
        cfg.model.temporal_ablation = true;
    }
}

fn read_model(path: &Path) -> anyhow::Result<QuantizedModel> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading container {}", path.display()))?;
    Ok(read_container(&bytes)?)
}

fn histogram_json(qm: &QuantizedModel) -> serde_json::Value {
    let windows = qm.windows();
    let h = duration_histogram(&windows, &qm.temporal_mask);
    let n_static = qm.temporal_mask.iter().filter(|d| !**d).count();
    serde_json::json!({
        "short": h.short,
        "medium": h.medium,
        "long": h.long,
        "dynamic": h.total(),
        "static": n_static,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { scene, out, seed } => {
            if !SCENE_NAMES.contains(&scene.as_str()) {
                bail!(TedError::UnknownScene(scene));
            }
            let seed = env_seed().unwrap_or(seed);
            let data = synth_scene(&scene, seed)?;
            save_scene(&out, &data)?;
            println!(
                "wrote scene `{scene}` ({} cameras, {} frames) to {}",
                data.scene.cameras.len(),
                data.scene.frame_count(),
                out.display()
            );
        }
        Command::Train {
            scene,
            config,
            preset,
            out,
            log,
            seed,
            lambda_rate,
            iterations,
            prior,
            no_temporal_activation,
        } => {
            let data = load_scene(&scene)?;
            let mut cfg = match preset {
                Some(name) => TrainConfig::preset(&name)?,
                None => load_config(config.as_deref())?,
            };
            apply_overrides(&mut cfg, seed, lambda_rate, iterations, prior, no_temporal_activation);
            let (model, logs) = train(&data, &cfg)?;
            model.save_checkpoint(&out)?;
            if let Some(log_path) = log {
                let mut text = String::new();
                for entry in &logs {
                    text.push_str(&serde_json::to_string(entry)?);
                    text.push('\n');
                }
                std::fs::write(&log_path, text)?;
            }
            let last = logs.last();
            println!(
                "trained {} iterations, {} anchors, final loss {:.5}; checkpoint {}",
                logs.len(),
                model.n_anchors,
                last.map_or(f64::NAN, |l| l.loss),
                out.display()
            );
        }
        Command::Encode { checkpoint, out } => {
            let model = Model::load_checkpoint(&checkpoint)?;
            let qm = model.finalize()?;
            let bytes = write_container(&qm)?;
            std::fs::write(&out, &bytes)?;
            println!("encoded {} anchors into {} bytes at {}", qm.n_anchors, bytes.len(), out.display());
        }
        Command::Decode { input, out } => {
            let qm = read_model(&input)?;
            let dump = serde_json::json!({
                "n_anchors": qm.n_anchors,
                "frame_count": qm.frame_count,
                "lambda_rate": qm.lambda_rate,
                "voxel_size": qm.voxel_size,
                "positions": qm.positions,
                "attributes": qm.attributes,
                "offset_mask": qm.offset_mask,
                "temporal_mask": qm.temporal_mask,
                "alpha_sums": qm.decoded_alpha_sums(),
                "duration_histogram": histogram_json(&qm),
            });
            std::fs::write(&out, serde_json::to_string_pretty(&dump)?)?;
            println!("decoded {} anchors to {}", qm.n_anchors, out.display());
        }
        Command::Render { input, scene, camera, frame, time, out } => {
            let qm = read_model(&input)?;
            let data = load_scene(&scene)?;
            if camera >= data.scene.cameras.len() {
                bail!("camera index {camera} out of range");
            }
            let t = match (frame, time) {
                (Some(f), None) => *data
                    .scene
                    .timestamps
                    .get(f)
                    .with_context(|| format!("frame {f} out of range"))?,
                (None, Some(t)) => t,
                (None, None) => data.scene.timestamps[0],
                (Some(_), Some(_)) => bail!("pass either --frame or --time, not both"),
            };
            let img = qm.render(&data.scene.cameras[camera], t, &RenderSettings::default())?;
            img.save(&out)?;
            println!("rendered camera {camera} at t={t:.4} to {}", out.display());
        }
        Command::Eval { input, scene, out } => {
            let qm = read_model(&input)?;
            let data = load_scene(&scene)?;
            let size = std::fs::metadata(&input)?.len();
            let (psnr, ssim) = qm.eval_scene(&data.scene, &RenderSettings::default())?;
            let report = serde_json::json!({
                "psnr_db": psnr,
                "ssim": ssim,
                "size_bytes": size,
                "n_anchors": qm.n_anchors,
                "duration_histogram": histogram_json(&qm),
            });
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            println!("{text}");
        }
        Command::RdSweep {
            scene,
            config,
            preset,
            out_dir,
            lambdas,
            seed,
            prior,
            no_temporal_activation,
            compare,
        } => {
            let data = load_scene(&scene)?;
            let mut cfg = match preset {
                Some(name) => TrainConfig::preset(&name)?,
                None => load_config(config.as_deref())?,
            };
            apply_overrides(&mut cfg, seed, None, None, prior, no_temporal_activation);
            let lambdas: Vec<f64> = match lambdas {
                Some(list) => list
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().context("parsing --lambdas"))
                    .collect::<anyhow::Result<_>>()?,
                None => cfg.lambda_sweep.clone(),
            };
            std::fs::create_dir_all(&out_dir)?;
            let (points, containers) = rd_sweep(&data, &cfg, &lambdas)?;
            let mut csv = String::from("lambda_rate,bytes,psnr,ssim\n");
            for p in &points {
                csv.push_str(&format!("{},{},{},{}\n", p.lambda_rate, p.bytes, p.psnr, p.ssim));
            }
            std::fs::write(out_dir.join("sweep.csv"), &csv)?;
            std::fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&points)?)?;
            for (p, bytes) in points.iter().zip(&containers) {
                std::fs::write(out_dir.join(format!("model_{}.ted4", p.lambda_rate)), bytes)?;
            }
            println!("{csv}");
            if let Some(other) = compare {
                let base = read_sweep_csv(&other)?;
                let ours: Vec<(f64, f64)> =
                    points.iter().map(|p| (p.bytes as f64, p.psnr)).collect();
                match bd_rate(&base, &ours) {
                    Some(delta) => println!("bd-rate vs {}: {delta:.2}%", other.display()),
                    None => println!("bd-rate unavailable (need two points per curve)"),
                }
            }
        }
        Command::Stats { input, out_json, out_csv } => {
            let bytes = std::fs::read(&input)?;
            let stats = container_stats(&bytes)?;
            let qm = read_container(&bytes)?;
            let hist = histogram_json(&qm);
            let report = serde_json::json!({
                "total_bytes": stats.total_bytes,
                "header_bytes": stats.header_bytes,
                "sections": stats.sections.iter().map(|(n, b)| serde_json::json!({"name": n, "bytes": b})).collect::<Vec<_>>(),
                "attribute_bits_per_anchor": if qm.n_anchors > 0 {
                    stats.sections[3].1 as f64 * 8.0 / qm.n_anchors as f64
                } else { 0.0 },
                "duration_histogram": hist,
            });
            let json_text = serde_json::to_string_pretty(&report)?;
            let mut csv = String::from("section,bytes\n");
            csv.push_str(&format!("header,{}\n", stats.header_bytes));
            for (name, b) in &stats.sections {
                csv.push_str(&format!("{name},{b}\n"));
            }
            if let Some(path) = out_json {
                std::fs::write(&path, &json_text)?;
            }
            if let Some(path) = out_csv {
                std::fs::write(&path, &csv)?;
            }
            println!("{json_text}");
        }
    }
    Ok(())
}

fn read_sweep_csv(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let mut it = line.split(',');
        let _lambda = it.next();
        let bytes: f64 = it.next().context("csv bytes")?.trim().parse()?;
        let psnr: f64 = it.next().context("csv psnr")?.trim().parse()?;
        out.push((bytes, psnr));
    }
    Ok(out)
}
