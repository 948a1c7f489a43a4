//! dilseg: build, train, run and score the dilated segmentation network.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure during training.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dilseg_core::inference::{ensemble_std, fuse_and_segment, InferenceError};
use dilseg_core::metrics::{evaluate, MetricsError, MetricsReport};
use dilseg_core::mhd::{read_volume, write_volume, MhdError};
use dilseg_core::network::{
    load_weights, parameter_count, receptive_field, save_weights, NetworkConfig, NetworkError,
    WeightFileError,
};
use dilseg_core::optim::{train, AdamHyper, OptimError, TrainPlan, TrainingPair};
use dilseg_core::phantom::{generate, PhantomSpec};
use dilseg_core::pixmap::{export_slice_pixmap, PixmapError};
use dilseg_core::volume::{
    augment_rotations, normalize_intensity, resample_labels_nearest, resample_trilinear, Volume,
    VolumeError, AXES,
};

#[derive(Parser)]
#[command(name = "dilseg", version, about = "Dilated-convolution volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the architecture table: kernel, dilation, field, channels, parameters
    Inspect(InspectArgs),
    /// Generate a synthetic phantom dataset
    Synth(SynthArgs),
    /// Train on an image/label directory and write a weight file
    Train(TrainArgs),
    /// Segment a volume with a trained weight file
    Segment(SegmentArgs),
    /// Score predicted labels against reference labels
    Evaluate(EvaluateArgs),
    /// Voxelwise std of a class probability across several weight files
    EnsembleStd(EnsembleStdArgs),
}

#[derive(Debug)]
enum CmdError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Data(_) => 2,
            CmdError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Usage(m) | CmdError::Data(m) | CmdError::Numeric(m) => f.write_str(m),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CmdError {
            fn from(e: $t) -> Self {
                CmdError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    MhdError,
    WeightFileError,
    NetworkError,
    VolumeError,
    InferenceError,
    MetricsError,
    PixmapError,
    config::ConfigError,
    std::io::Error
);

impl From<OptimError> for CmdError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFiniteLoss { .. } => CmdError::Numeric(e.to_string()),
            OptimError::BadCrop { .. } => CmdError::Usage(e.to_string()),
            other => CmdError::Data(other.to_string()),
        }
    }
}

/// Architecture selection shared by inspect and train.
#[derive(Args)]
struct NetFlags {
    /// Architecture file; defaults to the published 10-layer network
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature width of the built-in architecture
    #[arg(long)]
    channels: Option<usize>,
    /// Collapse every dilation to 1 (receptive field 17, same parameters)
    #[arg(long)]
    no_dilation: bool,
}

impl NetFlags {
    fn build(&self) -> Result<NetworkConfig, CmdError> {
        let mut config = match (&self.config, self.channels) {
            (Some(_), Some(_)) => {
                return Err(CmdError::Usage(
                    "--channels conflicts with --config".into(),
                ))
            }
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)?;
                config::parse_config(&text)?
            }
            (None, width) => NetworkConfig::with_width(width.unwrap_or(32)),
        };
        if self.no_dilation {
            config = config.without_dilation();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    net: NetFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for imageNNN/labelsNNN pairs
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic phantom extent in voxels
    #[arg(long, default_value_t = 96)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetFlags,
    /// Directory of imageNNN.mhd / labelsNNN.mhd pairs
    #[arg(long)]
    data: PathBuf,
    /// Weight file to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10000)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 201)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Loss log path; defaults to <out>.loss
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Resample to the isotropic grid before normalizing instead of after
    #[arg(long)]
    resample_first: bool,
    /// Skip right-angle rotation augmentation
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Trained weight file
    #[arg(long)]
    weights: PathBuf,
    /// Input intensity volume (.mhd)
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label volume (.mhd)
    #[arg(long)]
    out: PathBuf,
    /// Also write per-class probability volumes <prefix>0..2.mhd
    #[arg(long)]
    probs: Option<String>,
    /// Write mid-slice pixmaps with label overlay into this directory
    #[arg(long)]
    export_slices: Option<PathBuf>,
    /// Print the wall-clock segmentation time
    #[arg(long)]
    time: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label volume (.mhd)
    #[arg(long)]
    pred: PathBuf,
    /// Reference label volume (.mhd)
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct EnsembleStdArgs {
    /// Two or more trained weight files
    #[arg(long, num_args = 2.., required = true)]
    weights: Vec<PathBuf>,
    /// Input intensity volume (.mhd)
    #[arg(long = "in")]
    input: PathBuf,
    /// Class whose probability spread is measured (0 background, 1 myocardium, 2 blood pool)
    #[arg(long, default_value_t = 2)]
    class: usize,
    /// Output std volume (.mhd)
    #[arg(long)]
    out: PathBuf,
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CmdError> {
    let config = args.net.build()?;
    let fields = receptive_field(&config);
    let (params, total) = parameter_count(&config);
    println!("layer  kernel  dilation  field  channels  parameters");
    for (i, layer) in config.layers.iter().enumerate() {
        println!(
            "{:>5}  {:>6}  {:>8}  {:>5}  {:>8}  {:>10}",
            i + 1,
            layer.kernel,
            layer.dilation,
            fields[i],
            layer.out_channels,
            params[i]
        );
    }
    println!("total parameters: {total}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CmdError> {
    std::fs::create_dir_all(&args.out)?;
    for i in 0..args.count {
        let spec = PhantomSpec {
            size: args.size,
            seed: args.seed.wrapping_add(i as u64),
            ..PhantomSpec::default()
        };
        let phantom = generate(&spec);
        let image = args.out.join(format!("image{i:03}.mhd"));
        let labels = args.out.join(format!("labels{i:03}.mhd"));
        write_volume(&phantom.image, &image)?;
        write_volume(&phantom.labels, &labels)?;
        println!("wrote {} {}", image.display(), labels.display());
    }
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<(String, Volume<f32>, Volume<u8>)>, CmdError> {
    let mut suffixes = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(suffix) = name
            .strip_prefix("image")
            .and_then(|s| s.strip_suffix(".mhd"))
        {
            suffixes.push(suffix.to_string());
        }
    }
    suffixes.sort();
    if suffixes.is_empty() {
        return Err(CmdError::Data(format!(
            "no image*.mhd volumes in {}",
            dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for suffix in suffixes {
        let image = read_volume(dir.join(format!("image{suffix}.mhd")))?.into_intensity();
        let labels = read_volume(dir.join(format!("labels{suffix}.mhd")))?.into_labels()?;
        if image.dims != labels.dims || image.spacing != labels.spacing {
            return Err(CmdError::Data(format!(
                "image{suffix}.mhd ({:?} at {:?}) does not match labels{suffix}.mhd ({:?} at {:?})",
                image.dims, image.spacing, labels.dims, labels.spacing
            )));
        }
        pairs.push((suffix, image, labels));
    }
    Ok(pairs)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CmdError> {
    let config = args.net.build()?;
    // Banner goes out before the (slow) dataset load so runs are attributable
    // immediately.
    println!(
        "train: steps={} batch={} crop={} seed={}",
        args.steps, args.batch, args.crop, args.seed
    );
    let raw = load_pairs(&args.data)?;

    // Isotropic target: the smallest voxel dimension present in the dataset.
    let iso = raw
        .iter()
        .map(|(_, v, _)| v.spacing.0.min(v.spacing.1).min(v.spacing.2))
        .fold(f64::INFINITY, f64::min);
    let target = (iso, iso, iso);

    let mut dataset: Vec<TrainingPair> = Vec::new();
    for (_, image, labels) in &raw {
        let image = if args.resample_first {
            normalize_intensity(&resample_trilinear(image, target))?
        } else {
            resample_trilinear(&normalize_intensity(image)?, target)
        };
        let labels = resample_labels_nearest(labels, target);
        if args.no_augment {
            dataset.push((image, labels));
        } else {
            dataset.extend(augment_rotations(&image).into_iter().zip(augment_rotations(&labels)));
        }
    }

    let plan = TrainPlan {
        steps: args.steps,
        batch_size: args.batch,
        crop_size: args.crop,
        seed: args.seed,
        hyper: AdamHyper {
            lr: args.lr,
            ..AdamHyper::default()
        },
        dropout_rate: args.dropout,
    };
    let (weights, log) = train(&config, &dataset, &plan)?;
    save_weights(&config, &weights, &args.out)?;

    let log_path = args.loss_log.clone().unwrap_or_else(|| {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".loss");
        PathBuf::from(name)
    });
    let mut text = String::new();
    for (step, loss) in &log {
        let _ = writeln!(text, "{step}\t{loss}");
    }
    std::fs::write(&log_path, text)?;

    if let Some((step, loss)) = log.last() {
        println!("final: step={step} loss={loss}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_segment(args: &SegmentArgs) -> Result<(), CmdError> {
    let (config, weights) = load_weights(&args.weights)?;
    let input = read_volume(&args.input)?.into_intensity();
    let result = fuse_and_segment(&config, &weights, &input)?;
    write_volume(&result.labels, &args.out)?;
    if let Some(prefix) = &args.probs {
        for (class, map) in result.class_probs.iter().enumerate() {
            write_volume(map, format!("{prefix}{class}.mhd"))?;
        }
    }
    if let Some(dir) = &args.export_slices {
        std::fs::create_dir_all(dir)?;
        for (axis, name) in AXES.into_iter().zip(["x", "y", "z"]) {
            let index = input.extent_along(axis) / 2;
            export_slice_pixmap(
                &input,
                axis,
                index,
                Some(&result.labels),
                dir.join(format!("slice_{name}.ppm")),
            )?;
        }
    }
    if args.time {
        println!("seconds={}", result.timing_seconds);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!(
        "{:<12} {:>8} {:>10} {:>14}",
        "class", "dice", "adb_mm", "hausdorff_mm"
    );
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    for (name, _, m) in report.rows() {
        println!(
            "{:<12} {:>8.4} {:>10} {:>14}",
            name,
            m.dice,
            cell(m.adb_mm),
            cell(m.hausdorff_mm)
        );
    }
    for (name, _, m) in report.rows() {
        println!("{name}\tdice\t{}", m.dice);
        if let Some(v) = m.adb_mm {
            println!("{name}\tadb_mm\t{v}");
        }
        if let Some(v) = m.hausdorff_mm {
            println!("{name}\thausdorff_mm\t{v}");
        }
        if m.empty_prediction {
            println!("{name}\tempty_prediction\t1");
        }
        if m.empty_reference {
            println!("{name}\tempty_reference\t1");
        }
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CmdError> {
    let pred = read_volume(&args.pred)?.into_labels()?;
    let reference = read_volume(&args.reference)?.into_labels()?;
    let report = evaluate(&pred, &reference)?;
    print_report(&report);
    Ok(())
}

fn cmd_ensemble_std(args: &EnsembleStdArgs) -> Result<(), CmdError> {
    let input = read_volume(&args.input)?.into_intensity();
    let mut maps = Vec::new();
    for path in &args.weights {
        let (config, weights) = load_weights(path)?;
        maps.push(fuse_and_segment(&config, &weights, &input)?.class_probs);
    }
    let spread = ensemble_std(&maps, args.class)?;
    write_volume(&spread, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Inspect(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::EnsembleStd(a) => cmd_ensemble_std(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
