//! `dualmotion`: dataset generation, training, prediction, evaluation,
//! probing and flow visualization for the dual motion GAN.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualmotion::data_io::{
    flow_to_color, load_sequence_dir, make_dataset, read_flo, save_frame, write_flo, DatasetManifest, DatasetPlan,
    FrameSequence, SceneSampler, Split, MANIFEST_FILE,
};
use dualmotion::evaluation::{evaluate_dataset, representation_probe, ProbeSettings};
use dualmotion::training::{samples_from, Checkpoint, PredictionMode, Trainer};
use dualmotion::{Ablation, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "dualmotion",
    version,
    about = "Dual motion GAN for video frame and flow prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shapes dataset (PNG frames, .flo flows, manifest).
    MakeDataset(MakeDatasetArgs),
    /// Train on the train split of a dataset manifest.
    Train(Box<TrainArgs>),
    /// Predict the next frames of a frame folder from a checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint against CopyLast on a dataset split.
    Evaluate(EvaluateArgs),
    /// Linear probe of the motion encoder on labeled sequences.
    Probe(ProbeArgs),
    /// Color-code a .flo file as a PNG.
    FlowViz(FlowVizArgs),
    /// Summarize a checkpoint: step, configuration and parameter shapes.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total number of sequences.
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    /// Sequences reserved for the validation split.
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Sequences reserved for the test split (taken from the end).
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Shapes per scene.
    #[arg(long, default_value_t = 2)]
    shapes: usize,
    /// Canvas height and width.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Smallest and largest box side, e.g. `10,16`.
    #[arg(long, default_value = "10,16", value_parser = parse_pair::<usize>)]
    shape_size: (usize, usize),
    /// Per-axis speed along one of the 8 compass directions.
    #[arg(long, default_value_t = 2)]
    speed: i64,
    /// Fixed velocity `dx,dy` for every shape; overrides directions.
    #[arg(long, value_parser = parse_pair::<i64>)]
    velocity: Option<(i64, i64)>,
    /// Move sequence i along direction i mod 8 and label it with it.
    #[arg(long)]
    direction_labels: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest file or the directory holding `manifest.txt`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the log, config and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// TOML config with a `[train]` section; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint (config comes from the checkpoint; `--steps` may extend it).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Default)]
struct ConfigOverrides {
    /// Weight of both adversarial terms [default: 0.001]
    #[arg(long)]
    lambda: Option<f64>,
    /// RMSprop learning rate [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Critic updates per generator update [default: 5]
    #[arg(long)]
    critic_steps: Option<usize>,
    /// Critic weight clip bound [default: 0.01]
    #[arg(long)]
    clip_bound: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Generator updates [default: 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset: full, flow_off, frame_off, gan_off, frame_gan_off, flow_gan_off, no_motion_encoder [default: full]
    #[arg(long)]
    ablation: Option<String>,
    /// Checkpoint every N steps, 0 for only the final one [default: 500]
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Input frames per prediction [default: 4]
    #[arg(long)]
    window: Option<usize>,
    /// Multiplier on the KL term [default: 1]
    #[arg(long)]
    kl_weight: Option<f64>,
    /// [default: 0.99]
    #[arg(long)]
    rms_decay: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    rms_eps: Option<f64>,
    /// Encoder widths `w1,w2,w3` [default: 64,64,64]
    #[arg(long, value_parser = parse_triple)]
    conv_widths: Option<[usize; 3]>,
    /// Latent channels [default: 64]
    #[arg(long)]
    latent_channels: Option<usize>,
    /// ConvLSTM kernel [default: 4]
    #[arg(long)]
    lstm_kernel: Option<usize>,
    /// First critic width [default: 64]
    #[arg(long)]
    critic_base: Option<usize>,
}

impl ConfigOverrides {
    fn apply(&self, c: &mut TrainingConfig) -> Result<()> {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            lambda => lambda,
            learning_rate => learning_rate,
            critic_steps => critic_steps_per_gen_step,
            clip_bound => clip_bound,
            batch_size => batch_size,
            steps => steps,
            seed => seed,
            checkpoint_interval => checkpoint_interval,
            window => window,
            kl_weight => kl_weight,
            rms_decay => rms_decay,
            rms_eps => rms_eps,
            conv_widths => model.conv_widths,
            latent_channels => model.latent_channels,
            lstm_kernel => model.lstm_kernel,
            critic_base => model.critic_base,
        );
        if let Some(name) = &self.ablation {
            c.ablation = Ablation::preset(name)?;
        }
        c.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Folder of frame images; its last `window` frames are the input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// fused, frame_only or flow_only [default: per ablation]
    #[arg(long)]
    mode: Option<PredictionMode>,
    /// Number of future frames.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Also write color-coded flow PNGs.
    #[arg(long)]
    flow_images: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest file or its directory.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated horizons, e.g. `1,2,3,4,5`.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    horizons: Vec<usize>,
    /// Prediction modes to score [default: all]
    #[arg(long, value_delimiter = ',')]
    modes: Vec<PredictionMode>,
    /// Directory for metrics.txt, metrics.json and curve files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset; the probe fits on `--fit-split` and scores on `--score-split`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    fit_split: Split,
    #[arg(long, default_value = "test")]
    score_split: Split,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    /// Seed of the randomly initialized baseline encoder.
    #[arg(long, default_value_t = 0x5eed)]
    random_seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlowVizArgs {
    #[arg(long)]
    flo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Magnitude mapped to full saturation [default: largest in the field]
    #[arg(long)]
    max_magnitude: Option<f64>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|_| format!("bad number `{a}`"))?,
            b.parse().map_err(|_| format!("bad number `{b}`"))?,
        )),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number `{p}`")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn make_dataset_cmd(a: MakeDatasetArgs) -> Result<()> {
    let plan = DatasetPlan {
        sampler: SceneSampler {
            canvas: [a.size, a.size],
            num_frames: a.frames,
            num_shapes: a.shapes,
            size_range: a.shape_size,
            speed: a.speed,
            velocity: a.velocity.map(|(x, y)| [x, y]),
            direction: None,
        },
        sequences: a.sequences,
        val: a.val,
        test: a.test,
        direction_labels: a.direction_labels,
    };
    let m = make_dataset(&a.out, &plan, a.seed)?;
    println!("wrote {} sequences to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&manifest_path(&a.data))?;
    let sequences = manifest.load_split(Split::Train)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if let Some(steps) = a.overrides.steps {
                ckpt.config.steps = steps;
            }
            let samples = sequences
                .iter()
                .flat_map(|s| samples_from(s, ckpt.config.window))
                .collect();
            Trainer::from_checkpoint(ckpt, samples)?
        }
        None => {
            let mut config = match &a.config {
                Some(p) => TrainingConfig::load(p)?,
                None => TrainingConfig::default(),
            };
            a.overrides.apply(&mut config)?;
            let samples = sequences.iter().flat_map(|s| samples_from(s, config.window)).collect();
            Trainer::new(config, samples)?
        }
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.config.to_toml_string())?;
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(a.out.join("train.log"))?;
    let mut log = BufWriter::new(log_file);
    let start = trainer.step;
    let records = trainer.run(&mut log, Some(&a.out))?;
    if let Some(last) = records.last() {
        println!("trained steps {}..{}: {}", start + 1, trainer.step, last.losses);
    } else {
        println!("nothing to do: checkpoint already at step {}", trainer.step);
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let loaded = load_sequence_dir(&a.input)?;
    let window = ckpt.config.window;
    let frames = loaded.frames.frames();
    if frames.len() < window {
        bail!(
            "{} has {} frames; the checkpoint needs {window}",
            a.input.display(),
            frames.len()
        );
    }
    let input = FrameSequence::window(
        frames[frames.len() - window..].to_vec(),
        loaded.frames.source_id.clone(),
    )?;
    let mode = a
        .mode
        .unwrap_or_else(|| PredictionMode::default_for(&ckpt.config.ablation));
    let out = dualmotion::training::predict_multi(&ckpt.model, &input, a.steps, mode)?;
    fs::create_dir_all(&a.out)?;
    for (k, (frame, flow)) in out.frames.iter().zip(&out.flows).enumerate() {
        save_frame(frame, &a.out.join(format!("pred_{:03}.png", k + 1)))?;
        write_flo(flow, &a.out.join(format!("flow_{:03}.flo", k + 1)))?;
        if a.flow_images {
            flow_to_color(flow, None).save(a.out.join(format!("flow_{:03}.png", k + 1)))?;
        }
    }
    println!(
        "wrote {} prediction(s) ({mode}) to {}",
        out.frames.len(),
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&manifest_path(&a.manifest))?;
    let sequences = manifest.load_split(a.split)?;
    let modes = if a.modes.is_empty() {
        PredictionMode::ALL.to_vec()
    } else {
        a.modes
    };
    let report = evaluate_dataset(&ckpt.model, &sequences, ckpt.config.window, &a.horizons, &modes)?;
    print!("{}", report.to_table());
    if let Some(dir) = &a.out {
        report.write_files(dir)?;
    }
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&manifest_path(&a.manifest))?;
    let fit = manifest.load_split(a.fit_split)?;
    let score = manifest.load_split(a.score_split)?;
    let settings = ProbeSettings {
        window: ckpt.config.window,
        iterations: a.iterations,
        learning_rate: a.lr,
        l2: a.l2,
        random_seed: a.random_seed,
    };
    let r = representation_probe(&ckpt.model, &fit, &score, &settings)?;
    println!(
        "classes={} train_examples={} test_examples={} accuracy={:.4} random_init_accuracy={:.4}",
        r.classes, r.train_examples, r.test_examples, r.accuracy, r.random_init_accuracy
    );
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn flow_viz_cmd(a: FlowVizArgs) -> Result<()> {
    let flow = read_flo(&a.flo)?;
    flow_to_color(&flow, a.max_magnitude)
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "step {}", ckpt.step)?;
    writeln!(
        out,
        "updates generator={} critic={} frame_critic={} flow_critic={}",
        ckpt.counts.generator, ckpt.counts.critic, ckpt.counts.frame_critic, ckpt.counts.flow_critic
    )?;
    writeln!(out, "parameters {}", ckpt.model.num_scalars())?;
    for (group, params) in ckpt.model.groups() {
        writeln!(out, "[{group}] {} scalars", params.num_scalars())?;
        for (name, t) in params.iter() {
            writeln!(out, "  {name} {:?}", t.dims())?;
        }
    }
    writeln!(out, "\n{}", ckpt.config.to_toml_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeDataset(a) => make_dataset_cmd(a),
        Command::Train(a) => train_cmd(*a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::FlowViz(a) => flow_viz_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
