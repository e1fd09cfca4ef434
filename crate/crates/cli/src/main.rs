use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ems_core::blocks::{BlockFamily, Network};
use ems_core::detection::{write_detections_jsonl, DetectionRecord};
use ems_core::encoding::{
    bin_events, open_rgb, preview_frames, read_events, synth_dataset, write_dataset, BinMode, BinSpec, EventFormat, Sample,
    SampleInput, SynthConfig, SynthMode,
};
use ems_core::energy::{count_ops, estimate_energy, measure_firing, EnergyOptions};
use ems_core::gne::{gne_report, GneConfig};
use ems_core::train::{
    batch_input, evaluate, load_split, metrics_csv, predict, train, Checkpoint, EpochMetrics, PreparedInput,
    PreparedSet, RunConfig,
};
use ems_core::{Error, Result};

mod svg;

/// Overrides the default output directory; `--out` still wins.
const OUT_DIR_ENV: &str = "EMS_OUT_DIR";

#[derive(Parser)]
#[command(name = "ems", version, about = "Train, evaluate and profile full-spike residual SNN detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Output directory [default: $EMS_OUT_DIR, else ./ems-out]
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutDir {
    fn resolve(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ems-out"));
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector; writes checkpoint.ckpt, metrics.csv, config.json and curves.svg.
    Train {
        /// Run configuration (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Evaluate a checkpoint; writes metrics.json and detections.jsonl.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file or dataset directory [default: the checkpoint's evaluation split]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Time steps at evaluation [default: the trained T]
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Detect objects in one image or event stream; prints JSON lines.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG image, or event stream (.evs binary, .csv text)
        #[arg(long)]
        input: PathBuf,
        /// Sensor width, for event streams
        #[arg(long)]
        width: Option<usize>,
        /// Sensor height, for event streams
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-layer energy estimate; writes energy.json and energy.csv.
    Energy {
        /// Trained checkpoint; without it a fresh network is built from --config.
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Block family of a fresh network
        #[arg(long, value_enum, requires = "config")]
        family: Option<Family>,
        /// Probe data [default: the evaluation split]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of probe images
        #[arg(long, default_value_t = 16)]
        images: usize,
        /// Leave the encoding convolution out of the totals
        #[arg(long)]
        exclude_encode: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Gradient-norm-equality diagnostics on a fresh network; writes gne.json.
    Gne {
        /// Run configuration providing the neuron and BN settings
        #[arg(long)]
        config: Option<PathBuf>,
        /// Diagnostic settings (JSON)
        #[arg(long)]
        gne: Option<PathBuf>,
        /// Skip the BN initialization (control run)
        #[arg(long)]
        no_init: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Bin an event stream into frames; writes one PNG preview per step.
    Encode {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Bin width in microseconds
        #[arg(long, default_value_t = 1000)]
        dt: u64,
        /// Start of the first bin in microseconds
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Count events per pixel instead of marking presence
        #[arg(long)]
        count: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Generate the synthetic shapes dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = Mode::Frames)]
        mode: Mode,
        /// Motion micro-frames per event sample
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        dt: u64,
        #[command(flatten)]
        out: OutDir,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Ems,
    Ms,
    Sew,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Frames,
    Events,
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p).map_err(|e| io_error(p, e))?),
    }
}

/// Evaluation samples: an explicit dataset, or the split named by the config.
fn eval_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data {
        Some(p) => ems_core::encoding::load_dataset(p, cfg.data.classes),
        None => Ok(load_split(cfg)?.1),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let dir = out.resolve()?;
            let outcome = train(&cfg, &mut |m: &EpochMetrics, took| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}  fr {:.4}  ({:.1}s)",
                    m.epoch,
                    m.loss,
                    m.map50,
                    m.map50_95,
                    m.firing_rate,
                    took.as_secs_f64()
                );
            })?;
            outcome.checkpoint.save(&dir.join("checkpoint.ckpt"))?;
            write(&dir.join("metrics.csv"), &metrics_csv(&outcome.epochs))?;
            write(&dir.join("config.json"), &cfg.to_json())?;
            if !outcome.epochs.is_empty() {
                write(&dir.join("curves.svg"), &svg::curves(&outcome.epochs))?;
            }
            println!("{}", dir.join("checkpoint.ckpt").display());
        }
        Command::Eval { checkpoint, data, steps, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.meta.config;
            let steps = steps.unwrap_or(cfg.model.steps);
            let samples = eval_samples(cfg, data.as_deref())?;
            let set = PreparedSet::new(&samples, steps, cfg.data.dt)?;
            let mut net = ck.network()?;
            let evaluation = evaluate(&mut net, &ck.meta.anchors, &set, steps, &cfg.eval)?;
            let dir = out.resolve()?;
            let metrics = serde_json::to_string_pretty(&evaluation.metrics).expect("metrics serialize");
            write(&dir.join("metrics.json"), &metrics)?;
            write(&dir.join("detections.jsonl"), &write_detections_jsonl(&evaluation.detections))?;
            println!("{metrics}");
        }
        Command::Detect { checkpoint, input, width, height, steps } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.meta.config;
            let steps = steps.unwrap_or(cfg.model.steps);
            let id = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
            let sample_input = match input.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                Some("png") => SampleInput::Image(open_rgb(&input)?),
                _ => {
                    let (Some(width), Some(height)) = (width, height) else {
                        return Err(Error::Config("event input needs --width and --height".into()));
                    };
                    SampleInput::Events { events: read_events(&input, EventFormat::from_path(&input))?, width, height }
                }
            };
            let sample = Sample { image_id: id.clone(), input: sample_input, boxes: Vec::new() };
            let set = PreparedSet::new(std::slice::from_ref(&sample), steps, cfg.data.dt)?;
            if set.channels() != ck.meta.network.in_channels {
                return Err(Error::Data(format!(
                    "input has {} channels, the checkpoint expects {}",
                    set.channels(),
                    ck.meta.network.in_channels
                )));
            }
            let mut net = ck.network()?;
            let items: Vec<&PreparedInput> = set.inputs.iter().collect();
            let p = predict(&mut net, &ck.meta.anchors, &batch_input(&items)?, 1, steps, &cfg.eval)?;
            let records: Vec<DetectionRecord> = p.detections[0].iter().map(|d| DetectionRecord::new(&id, d)).collect();
            print!("{}", write_detections_jsonl(&records));
        }
        Command::Energy { checkpoint, config, family, data, images, exclude_encode, out } => {
            let (cfg, mut net) = match &checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let net = ck.network()?;
                    (ck.meta.config, net)
                }
                None => {
                    let mut cfg = read_config(config.as_deref())?;
                    if let Some(f) = family {
                        cfg.model.family = match f {
                            Family::Ems => BlockFamily::Ems,
                            Family::Ms => BlockFamily::Ms,
                            Family::Sew => BlockFamily::Sew,
                        };
                    }
                    let channels = if cfg.data.train.is_none() && cfg.data.synth.mode == SynthMode::Events { 2 } else { 3 };
                    let spec = cfg.model.network_spec(channels, cfg.data.classes);
                    let net = Network::new(&spec, cfg.model.lif(), cfg.model.bn(), cfg.training.seed)?;
                    (cfg, net)
                }
            };
            if images == 0 {
                return Err(Error::Config("--images must be at least 1".into()));
            }
            let steps = cfg.model.steps;
            let mut samples = eval_samples(&cfg, data.as_deref())?;
            samples.truncate(images);
            let set = PreparedSet::new(&samples, steps, cfg.data.dt)?;
            let batches = set
                .inputs
                .chunks(cfg.eval.batch_size)
                .map(|c| batch_input(&c.iter().collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let stats = measure_firing(&mut net, &batches, steps)?;
            let counts = count_ops(&net, set.height, set.width)?;
            let report = estimate_energy(&counts, &stats, steps, &EnergyOptions { exclude_encode })?;
            let dir = out.resolve()?;
            write(&dir.join("energy.json"), &report.to_json())?;
            write(&dir.join("energy.csv"), &report.to_csv())?;
            let ratio = report.ratio.map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
            println!("snn_total_pj {} ann_total_pj {} ratio {ratio}", report.total_pj, report.ann_total_pj);
        }
        Command::Gne { config, gne, no_init, out } => {
            let run_cfg = read_config(config.as_deref())?;
            let mut gcfg = match &gne {
                None => GneConfig::default(),
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
            };
            if no_init {
                gcfg.init = false;
            }
            let report = gne_report(&gcfg, run_cfg.model.lif(), run_cfg.model.bn())?;
            let dir = out.resolve()?;
            write(&dir.join("gne.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!("all_pass {}", report.all_pass);
        }
        Command::Encode { events, width, height, steps, dt, start, count, out } => {
            let stream = read_events(&events, EventFormat::from_path(&events))?;
            let spec = BinSpec { steps, dt, height, width, start };
            let seq = bin_events(&stream, &spec, if count { BinMode::Count } else { BinMode::Presence })?;
            let dir = out.resolve()?;
            for (t, frame) in preview_frames(&seq)?.iter().enumerate() {
                let path = dir.join(format!("frame_{t:03}.png"));
                frame.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
            let active = seq.frames.data().iter().filter(|&&v| v > 0.0).count();
            println!("{} events, {steps} frames of {dt} us, {active} active bins", stream.len());
        }
        Command::Synth { seed, images, size, mode, steps, dt, out } => {
            let mode = match mode {
                Mode::Frames => SynthMode::Frames,
                Mode::Events => SynthMode::Events,
            };
            let samples = synth_dataset(&SynthConfig { seed, images, size, mode, steps, dt })?;
            let path = write_dataset(&out.resolve()?, &samples)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("E_CONFIG: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("{}: {msg}", class.tag());
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
