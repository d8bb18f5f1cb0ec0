use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nicegan::analysis::{self, Direction};
use nicegan::checkpoint::{load_checkpoint, LoadOptions};
use nicegan::config::{apply_overrides, from_map, parse_map, ExperimentConfig, ExtractorKind, Variant};
use nicegan::data::{
    make_synthetic_domains, open_unpaired_dataset, prepare_eval, resize_bilinear, write_unpaired_dataset, ImageSample,
    Split, SyntheticSpec,
};
use nicegan::metrics::{self, Extractor, MetricKind, MetricReport};
use nicegan::networks::Scale;
use nicegan::training::{run_training, train, ModelState, RunLayout};

#[derive(Parser)]
#[command(name = "nicegan", version, about = "Unpaired image translation with encoder-sharing discriminators")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; missing keys take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set image_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes config.json, log.jsonl and checkpoints/ under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Load a checkpoint whose config hash differs from --config.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Translate one image or a directory of images.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "x2y")]
        direction: String,
        /// Output PNG (file input) or directory (directory input).
        #[arg(long, alias = "out")]
        output: PathBuf,
    },
    /// KID / FID per direction and latent MMD; appends to <out>/metrics.jsonl.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root containing testA/testB (or trainA/trainB).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "kid,fid,latent_mmd")]
        metrics: String,
        /// identity | random_conv | external_adapter (default: from the checkpoint config).
        #[arg(long)]
        extractor: Option<String>,
        /// Program for the external_adapter extractor.
        #[arg(long)]
        extractor_command: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Decode linear mixes of the two domains' latents; writes grid.png and heat-maps.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_x: PathBuf,
        #[arg(long)]
        image_y: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export pooled latents of both domains to <out>/latents.csv.
    Latents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Loss-curve PNGs from one log, or overlays from several.
    Plot {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Train and evaluate one run per ablation cell under --out.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated axes: nice, ra, scales, depth, variant.
        #[arg(long, default_value = "nice,ra,scales,depth,variant")]
        axes: String,
        /// Only write the cell configs.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a synthetic hue-swap dataset (trainA/trainB/testA/testB).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_train: usize,
        #[arg(long, default_value_t = 16)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        hue_x: f32,
        #[arg(long, default_value_t = 0.5)]
        hue_y: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut map = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_map(&text)?
        }
        None => serde_json::Map::new(),
    };
    apply_overrides(&mut map, &args.set)?;
    Ok(from_map(map)?)
}

fn load_model(checkpoint: &Path) -> Result<ModelState> {
    load_checkpoint(checkpoint, LoadOptions::default())
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!(nicegan::Error::Parameter(format!("split must be train or test, got `{other}`"))),
    }
}

fn translate_file(state: &ModelState, input: &Path, dir: Direction, output: &Path) -> Result<()> {
    let img = ImageSample::load(input)?;
    let (h, w) = (img.height(), img.width());
    let x = prepare_eval(&img, state.cfg.image_size).as_batch();
    let out = analysis::translate(state, &x, dir)?.translated;
    let c = out.shape()[1];
    let s = state.cfg.image_size;
    let plane = out.clone().reshape(&[c, s, s])?;
    let resized = if (h, w) == (s, s) { plane } else { resize_bilinear(&plane, h, w)? };
    ImageSample::from_tensor(&resized)?.save_png(output)?;
    Ok(())
}

fn cmd_train(cfg: ConfigArgs, out: Option<PathBuf>, checkpoint: Option<PathBuf>, allow: bool) -> Result<()> {
    let mut cfg = load_config(&cfg)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let state = match checkpoint {
        None => {
            let outcome = train(&cfg, &mut ())?;
            outcome.state
        }
        Some(ck) => {
            let mut state = load_checkpoint(
                &ck,
                LoadOptions {
                    expected: Some(&cfg),
                    allow_config_mismatch: allow,
                },
            )?;
            state.cfg.out_dir = cfg.out_dir.clone();
            state.cfg.dataset_root = cfg.dataset_root.clone();
            info!("resuming at iteration {}", state.iteration);
            let (dx, dy) = open_unpaired_dataset(&cfg.dataset_root, Split::Train)?;
            let layout = RunLayout::new(&cfg.out_dir);
            run_training(&mut state, &dx, &dy, cfg.iterations, Some(&layout), &mut ())?;
            state
        }
    };
    info!("finished at iteration {} in {}", state.iteration, cfg.out_dir.display());
    Ok(())
}

fn cmd_translate(checkpoint: &Path, input: &Path, direction: &str, output: &Path) -> Result<()> {
    let state = load_model(checkpoint)?;
    let dir: Direction = direction.parse()?;
    if input.is_dir() {
        fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        let ds = nicegan::data::Dataset::open_dir(dir.source(), input)?;
        for p in ds.paths().into_iter().flatten() {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            translate_file(&state, p, dir, &output.join(format!("{name}.png")))?;
        }
    } else {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        translate_file(&state, input, dir, output)?;
    }
    Ok(())
}

fn parse_extractor(s: &str) -> Result<ExtractorKind> {
    Ok(serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| nicegan::Error::Parameter(format!("unknown extractor `{s}`")))?)
}

fn append_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    which: &str,
    extractor: Option<String>,
    command: Option<String>,
    out: &Path,
) -> Result<()> {
    let state = load_model(checkpoint)?;
    let (dx, dy) = open_unpaired_dataset(dataset, parse_split(split)?)?;
    let kinds = which
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse::<MetricKind>)
        .collect::<nicegan::Result<Vec<_>>>()?;
    let kind = match extractor {
        Some(s) => parse_extractor(&s)?,
        None => state.cfg.extractor,
    };
    let ex = Extractor::from_kind(kind, command.or_else(|| state.cfg.extractor_command.clone()));
    let reports = metrics::evaluate(&state, &dx, &dy, &kinds, &ex)?;
    fs::create_dir_all(out)?;
    append_reports(&out.join("metrics.jsonl"), &reports)?;
    for r in &reports {
        println!("{} = {:.6} ({})", r.name, r.value, r.extractor_id);
    }
    Ok(())
}

fn cmd_interpolate(checkpoint: &Path, image_x: &Path, image_y: &Path, steps: usize, out: &Path) -> Result<()> {
    let state = load_model(checkpoint)?;
    if steps < 2 {
        bail!(nicegan::Error::Parameter("interpolation needs at least 2 steps".into()));
    }
    let s = state.cfg.image_size;
    let x = prepare_eval(&ImageSample::load(image_x)?, s).as_batch();
    let y = prepare_eval(&ImageSample::load(image_y)?, s).as_batch();
    let ts: Vec<f32> = (0..steps).map(|i| i as f32 / (steps - 1) as f32).collect();
    let grid = analysis::interpolate(&state, &x, &y, &ts)?;
    let tiles: Vec<_> = grid
        .iter()
        .flat_map(|r| [r.generated_x.clone(), r.generated_y.clone()])
        .collect();
    fs::create_dir_all(out)?;
    let img = analysis::image_grid(&tiles, 2)?;
    let (_, c, h, w) = img.dims4()?;
    ImageSample::from_tensor(&img.reshape(&[c, h, w])?)?.save_png(&out.join("grid.png"))?;
    for (name, domain, batch) in [("x", nicegan::params::Domain::X, &x), ("y", nicegan::params::Domain::Y, &y)] {
        let map = analysis::latent_heatmap(&state.encode(domain, batch)?)?;
        analysis::save_heatmap_png(&map, 4, &out.join(format!("heatmap_{name}.png")))?;
    }
    Ok(())
}

fn cmd_latents(checkpoint: &Path, dataset: &Path, split: &str, out: &Path) -> Result<()> {
    let state = load_model(checkpoint)?;
    let (dx, dy) = open_unpaired_dataset(dataset, parse_split(split)?)?;
    let path = out.join("latents.csv");
    let rows = analysis::export_latents(&state, &[&dx, &dy], &path)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

fn cmd_plot(logs: &[PathBuf], out: &Path) -> Result<()> {
    let res = analysis::plot_curves(logs, out)?;
    if let Some(n) = res.notice {
        println!("{n}");
    }
    for f in res.files {
        println!("{}", f.display());
    }
    Ok(())
}

/// `(name, config)` per grid cell; every axis varies one factor of the base run.
fn ablation_cells(base: &ExperimentConfig, axes: &[&str]) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut cells = vec![("base".to_string(), base.clone())];
    for axis in axes {
        match *axis {
            "nice" => {
                let mut c = base.clone();
                c.nice = !base.nice;
                cells.push((format!("nice_{}", c.nice), c));
            }
            "ra" => {
                let mut c = base.clone();
                c.ra_enabled = !base.ra_enabled;
                cells.push((format!("ra_{}", c.ra_enabled), c));
            }
            "scales" => {
                for mask in 1..8u8 {
                    let scales: Vec<Scale> = Scale::ALL
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, s)| *s)
                        .collect();
                    if scales == base.scales_enabled {
                        continue;
                    }
                    let name = scales.iter().map(|s| s.name()).collect::<Vec<_>>().join("");
                    let mut c = base.clone();
                    c.scales_enabled = scales;
                    cells.push((format!("scales_{name}"), c));
                }
            }
            "depth" => {
                for d in [base.shared_depth.wrapping_sub(1), base.shared_depth + 1] {
                    if (1..=4).contains(&d) {
                        let mut c = base.clone();
                        c.shared_depth = d;
                        cells.push((format!("depth_{d}"), c));
                    }
                }
            }
            "variant" => {
                for v in [Variant::Nice, Variant::Joint, Variant::GenCoupled] {
                    if v != base.variant {
                        let mut c = base.clone();
                        c.variant = v;
                        cells.push((format!("variant_{}", v.name().to_ascii_lowercase()), c));
                    }
                }
            }
            other => bail!(nicegan::Error::Parameter(format!(
                "unknown ablation axis `{other}` (expected nice, ra, scales, depth, variant)"
            ))),
        }
    }
    Ok(cells)
}

fn cmd_ablate(cfg: ConfigArgs, out: &Path, axes: &str, dry_run: bool) -> Result<()> {
    let base = load_config(&cfg)?;
    let axes: Vec<&str> = axes.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
    let cells = ablation_cells(&base, &axes)?;
    fs::create_dir_all(out)?;
    let summary = out.join("ablation.jsonl");
    let _ = fs::remove_file(&summary);
    for (i, (name, mut c)) in cells.into_iter().enumerate() {
        c.seed = base.seed + i as u64;
        c.out_dir = out.join(&name);
        fs::create_dir_all(&c.out_dir)?;
        fs::write(c.out_dir.join("config.json"), c.to_json())?;
        let mut record = serde_json::json!({ "cell": name, "seed": c.seed });
        if !dry_run {
            info!("ablation cell {name}");
            match run_cell(&c) {
                Ok(reports) => {
                    record["status"] = "ok".into();
                    record["metrics"] = serde_json::to_value(reports)?;
                }
                Err(e) => {
                    warn!("cell {name} failed: {e:#}");
                    record["status"] = "error".into();
                    record["error"] = format!("{e:#}").into();
                }
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&summary)?;
        writeln!(f, "{record}")?;
    }
    Ok(())
}

fn run_cell(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let outcome = train(cfg, &mut ())?;
    let test = open_unpaired_dataset(&cfg.dataset_root, Split::Test);
    let (dx, dy) = match test {
        Ok(t) => t,
        Err(e) => {
            warn!("no test split for evaluation: {e}");
            return Ok(vec![]);
        }
    };
    let ex = Extractor::from_config(cfg);
    let reports = metrics::evaluate(&outcome.state, &dx, &dy, &[MetricKind::Kid, MetricKind::Fid, MetricKind::LatentMmd], &ex)?;
    append_reports(&cfg.out_dir.join("metrics.jsonl"), &reports)?;
    Ok(reports)
}

fn cmd_synth(out: &Path, n_train: usize, n_test: usize, size: usize, hue_x: f32, hue_y: f32, seed: u64) -> Result<()> {
    let spec = |n| SyntheticSpec { n, size, hue_x, hue_y };
    let train = make_synthetic_domains(spec(n_train), seed)?;
    let test = make_synthetic_domains(spec(n_test), seed.wrapping_add(1))?;
    write_unpaired_dataset(out, (&train.0, &train.1), (&test.0, &test.1))?;
    println!("wrote {} + {} images per domain to {}", n_train, n_test, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train {
            cfg,
            out,
            checkpoint,
            allow_config_mismatch,
        } => cmd_train(cfg, out, checkpoint, allow_config_mismatch),
        Cmd::Translate {
            checkpoint,
            input,
            direction,
            output,
        } => cmd_translate(&checkpoint, &input, &direction, &output),
        Cmd::Evaluate {
            checkpoint,
            dataset,
            split,
            metrics,
            extractor,
            extractor_command,
            out,
        } => cmd_evaluate(&checkpoint, &dataset, &split, &metrics, extractor, extractor_command, &out),
        Cmd::Interpolate {
            checkpoint,
            image_x,
            image_y,
            steps,
            out,
        } => cmd_interpolate(&checkpoint, &image_x, &image_y, steps, &out),
        Cmd::Latents {
            checkpoint,
            dataset,
            split,
            out,
        } => cmd_latents(&checkpoint, &dataset, &split, &out),
        Cmd::Plot { logs, out } => cmd_plot(&logs, &out),
        Cmd::Ablate {
            cfg,
            out,
            axes,
            dry_run,
        } => cmd_ablate(cfg, &out, &axes, dry_run),
        Cmd::Synth {
            out,
            n_train,
            n_test,
            size,
            hue_x,
            hue_y,
            seed,
        } => cmd_synth(&out, n_train, n_test, size, hue_x, hue_y, seed),
    }
}

/// 3 for config problems, 4 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use nicegan::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::ConfigKey { .. } | E::ConfigInvalid(_) | E::Configuration(_) | E::ConfigHashMismatch { .. }) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if nicegan::exec::configure_from_env() {
        info!("deterministic mode: sequential kernels");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
