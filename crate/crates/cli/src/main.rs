//! Command-line interface: train, evaluate, verify, and diagnose positive
//! concave deep equilibrium models.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use pcdeq_core::activations::ActivationKind;
use pcdeq_core::data::{self, DatasetHandle};
use pcdeq_core::equilibrium::{EquilibriumLayer, SolverSettings};
use pcdeq_core::error::Error as CoreError;
use pcdeq_core::model::{
    build_pcdeq_l, build_pcdeq_sc, checkpoint_load, checkpoint_save, diagnose, evaluate, train,
    InputShape, Network, TrainConfig, Variant,
};
use pcdeq_core::numeric::{Matrix, Rng, Vector};
use pcdeq_core::verifier;

#[derive(Parser)]
#[command(name = "pcdeq", version, about = "Positive concave deep equilibrium models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the training CSV and a final checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the mapping-property verification suites.
    Verify(VerifyArgs),
    /// Emit per-batch forward/backward iteration counts.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Architecture: pcdeq1-l | pcdeq2-l | pcdeq1-sc | pcdeq2-sc
    #[arg(long)]
    arch: Option<String>,
    /// Equilibrium activation: relu6 | tanh | softsign | sigmoid
    #[arg(long)]
    act: Option<String>,
    /// Layer variant (1 or 2); must agree with --arch when both are given
    #[arg(long)]
    variant: Option<u8>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_step: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fixed-point solver tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Fixed-point solver iteration cap
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory with the MNIST IDX files (PCDEQ_DATA_DIR is the fallback)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use the synthetic dataset instead of MNIST
    #[arg(long)]
    synthetic: bool,
    /// Training-log CSV path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Flat `key = value` config file; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Samples per property check
    #[arg(long)]
    samples: Option<usize>,
    /// State dimension of the sampled layers
    #[arg(long)]
    dim: Option<usize>,
    /// Random starts for the uniqueness probe
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the adversarial mappings that must fail
    #[arg(long)]
    self_test: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Checkpoint to diagnose; a fresh network is initialized when absent
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    act: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    /// Per-batch CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Config(_) | CoreError::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Flat `key = value` config file. Flags beat file values, file values beat
/// defaults; unknown keys are rejected by name.
struct FileConfig {
    values: HashMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "arch", "act", "variant", "channels", "epochs", "lr", "lr-decay-step", "lr-decay-factor",
    "weight-decay", "batch-size", "tol", "max-iters", "seed", "data-dir", "synthetic", "out",
    "checkpoint", "samples", "dim", "starts", "batches",
];

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CoreError> {
        let mut values = HashMap::new();
        let Some(path) = path else {
            return Ok(Self { values });
        };
        let text = std::fs::read_to_string(path)?;
        let known: HashSet<&str> = KNOWN_KEYS.iter().copied().collect();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !known.contains(key.as_str()) {
                return Err(CoreError::Config(format!(
                    "{}: unknown config key `{key}`",
                    path.display()
                )));
            }
            if values.insert(key, value).is_some() {
                return Err(CoreError::Config(format!("{}: duplicate config key", path.display())));
            }
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CoreError> {
        match self.get_opt(key, flag)? {
            Some(v) => Ok(v),
            None => Ok(default),
        }
    }

    fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CoreError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CoreError::Config(format!("config key `{key}` has unparseable value `{raw}`"))),
            None => Ok(None),
        }
    }
}

#[derive(Clone, Copy)]
struct Arch {
    variant: Variant,
    convolutional: bool,
}

fn parse_arch(name: &str) -> Result<Arch, CoreError> {
    match name {
        "pcdeq1-l" => Ok(Arch { variant: Variant::One, convolutional: false }),
        "pcdeq2-l" => Ok(Arch { variant: Variant::Two, convolutional: false }),
        "pcdeq1-sc" => Ok(Arch { variant: Variant::One, convolutional: true }),
        "pcdeq2-sc" => Ok(Arch { variant: Variant::Two, convolutional: true }),
        other => Err(CoreError::Config(format!(
            "unknown architecture `{other}`; expected pcdeq1-l, pcdeq2-l, pcdeq1-sc, or pcdeq2-sc"
        ))),
    }
}

fn parse_act(name: &str) -> Result<ActivationKind, CoreError> {
    match ActivationKind::from_name(name) {
        Some(k) if ActivationKind::LAYER_KINDS.contains(&k) => Ok(k),
        _ => Err(CoreError::Config(format!(
            "unknown activation `{name}`; expected relu6, tanh, softsign, or sigmoid"
        ))),
    }
}

fn default_act(arch: Arch) -> &'static str {
    match arch.variant {
        Variant::One => "tanh",
        Variant::Two => "sigmoid",
    }
}

/// Load MNIST or the synthetic fallback. Returns `(train, test)`.
fn load_data(
    synthetic: bool,
    data_dir: Option<&Path>,
    seed: u64,
) -> Result<(DatasetHandle, DatasetHandle), CoreError> {
    if synthetic {
        let mut rng = Rng::new(seed ^ 0x5EED_DA7A);
        let train = data::synthetic(4096, 64, 10, &mut rng);
        let test = data::synthetic(1024, 64, 10, &mut rng);
        return Ok((train, test));
    }
    let dir = data::resolve_data_dir(data_dir).ok_or_else(|| {
        CoreError::Config("no data source: pass --data-dir, set PCDEQ_DATA_DIR, or use --synthetic".into())
    })?;
    data::load_mnist(&dir)
}

fn input_shape_for(arch: Arch, data: &DatasetHandle) -> Result<InputShape, CoreError> {
    if !arch.convolutional {
        return Ok(InputShape::Features(data.features()));
    }
    if data.height > 1 && data.width > 1 {
        return Ok(InputShape::Image { channels: data.channels, height: data.height, width: data.width });
    }
    // Synthetic data is flat; fold a perfect square into a one-channel image.
    let side = (data.features() as f64).sqrt() as usize;
    if side * side == data.features() {
        Ok(InputShape::Image { channels: 1, height: side, width: side })
    } else {
        Err(CoreError::Config(format!(
            "convolutional architecture needs image-shaped data, got {} flat features",
            data.features()
        )))
    }
}

fn classes_in(data: &DatasetHandle) -> usize {
    data.labels.iter().copied().max().unwrap_or(0) as usize + 1
}

fn build_network(
    arch: Arch,
    act: ActivationKind,
    channels: usize,
    input: InputShape,
    classes: usize,
    solver: SolverSettings,
    seed: u64,
) -> Result<Network, CoreError> {
    let mut rng = Rng::new(seed);
    if arch.convolutional {
        build_pcdeq_sc(arch.variant, act, channels, input, classes, solver, &mut rng)
    } else {
        build_pcdeq_l(arch.variant, act, channels, input, classes, solver, &mut rng)
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, CoreError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let arch_name = file.get("arch", args.arch, "pcdeq1-l".to_string())?;
    let arch = parse_arch(&arch_name)?;
    let act_name = file.get("act", args.act, default_act(arch).to_string())?;
    let act = parse_act(&act_name)?;
    if let Some(v) = file.get_opt("variant", args.variant)? {
        if Variant::from_index(v) != Some(arch.variant) {
            return Err(CoreError::Config(format!("--variant {v} contradicts --arch {arch_name}")));
        }
    }
    let default_channels = if arch.convolutional { 82 } else { 80 };
    let default_lr = match (arch.convolutional, arch.variant) {
        (false, _) => 1e-3,
        (true, Variant::One) => 7e-4,
        (true, Variant::Two) => 2e-4,
    };
    let max_iters = file.get("max-iters", args.max_iters, 300)?;
    let cfg = TrainConfig {
        epochs: file.get("epochs", args.epochs, 40)?,
        lr: file.get("lr", args.lr, default_lr)?,
        lr_decay_step: file.get("lr-decay-step", args.lr_decay_step, 30)?,
        lr_decay_factor: file.get("lr-decay-factor", args.lr_decay_factor, 0.1)?,
        weight_decay: file.get("weight-decay", args.weight_decay, 0.02)?,
        batch_size: file.get("batch-size", args.batch_size, 64)?,
        channels: file.get("channels", args.channels, default_channels)?,
        seed: file.get("seed", args.seed, 1)?,
        solver: SolverSettings {
            tolerance: file.get("tol", args.tol, 1e-4)?,
            max_iters,
            backward_max_iters: max_iters,
        },
    };
    cfg.validate()?;
    let data_dir = file.get_opt("data-dir", args.data_dir)?;
    let synthetic = args.synthetic || file.get("synthetic", None::<bool>, false)?;
    let out = file.get("out", args.out, PathBuf::from("pcdeq_train.csv"))?;
    let ckpt = file.get("checkpoint", args.checkpoint, PathBuf::from("pcdeq_model.pcdq"))?;

    let (train_data, test_data) = load_data(synthetic, data_dir.as_deref(), cfg.seed)?;
    let input = input_shape_for(arch, &train_data)?;
    let classes = classes_in(&train_data).max(classes_in(&test_data));
    let mut network = build_network(arch, act, cfg.channels, input, classes, cfg.solver, cfg.seed)?;
    eprintln!(
        "training {arch_name} ({act_name}), {} parameters, {} train / {} test samples",
        network.parameter_count(),
        train_data.len(),
        test_data.len()
    );
    let log = train(&mut network, &train_data, &test_data, &cfg)?;
    std::fs::write(&out, log.to_csv())?;
    checkpoint_save(&network, &ckpt)?;
    let final_acc = log.epochs.last().map(|e| e.test_acc).unwrap_or(0.0);
    println!("final test accuracy: {final_acc:.4}");
    eprintln!("wrote {} and {}", out.display(), ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CoreError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let Some(ckpt) = file.get_opt("checkpoint", args.checkpoint)? else {
        return Err(CoreError::Config("--checkpoint is required".into()));
    };
    let data_dir = file.get_opt("data-dir", args.data_dir)?;
    let seed = file.get("seed", args.seed, 1)?;
    if !args.synthetic && data::resolve_data_dir(data_dir.as_deref()).is_none() {
        return Err(CoreError::Config(
            "no data source: pass --data-dir, set PCDEQ_DATA_DIR, or use --synthetic".into(),
        ));
    }
    let network = checkpoint_load(&ckpt)?;
    let (_, test_data) = load_data(args.synthetic, data_dir.as_deref(), seed)?;
    let acc = evaluate(&network, &test_data)?;
    println!("{acc:.4}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, CoreError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let samples = file.get("samples", args.samples, 1000)?;
    let dim = file.get("dim", args.dim, 12)?;
    let starts = file.get("starts", args.starts, 20)?;
    let seed = file.get("seed", args.seed, 1)?;
    if samples == 0 || dim == 0 || starts < 2 {
        return Err(CoreError::Config("--samples and --dim must be >= 1, --starts >= 2".into()));
    }
    let mut rng = Rng::new(seed);
    let mut all_pass = true;
    let lambdas = [1.5, 2.0, 10.0];
    for act in ActivationKind::LAYER_KINDS {
        let layer = EquilibriumLayer::random_dense(dim, act, SolverSettings::default(), &mut rng)?;
        let x = Vector::from_vec((0..dim).map(|_| rng.uniform(0.1, 1.0)).collect());
        let reports = [
            verifier::check_monotone(&layer, &x, samples, &mut rng)?,
            verifier::check_scalable(&layer, &x, samples, &lambdas, &mut rng)?,
            verifier::check_concave(&layer, &x, samples, &mut rng)?,
            verifier::probe_uniqueness(
                &layer,
                &Matrix::from_vec(1, dim, x.as_slice().to_vec())?,
                starts,
                &mut rng,
            )?,
            verifier::check_asymptotic_decay(&layer, &x, samples.min(50), &mut rng)?,
        ];
        for r in reports {
            println!("{r}");
            all_pass &= r.passed();
        }
    }

    // The beyond-contraction case: Lipschitz bound 1.5, still a unique fixed point.
    let wide = EquilibriumLayer::dense(
        Matrix::from_vec(dim, dim, vec![1.0; dim * dim])?,
        Vector::filled(dim, 1.5 / (dim as f64).sqrt()),
        ActivationKind::Sigmoid,
        SolverSettings::default(),
    )?;
    let bound = verifier::lipschitz_bound(&[wide.effective_weight()])?;
    let x = Matrix::from_vec(1, dim, (0..dim).map(|_| rng.uniform(0.0, 0.5)).collect())?;
    let report = verifier::probe_uniqueness(&wide, &x, starts, &mut rng)?;
    println!("{report} lipschitz_bound={bound:.4}");
    all_pass &= report.passed() && bound >= 1.5 - 1e-9;

    if args.self_test {
        let layer =
            EquilibriumLayer::random_dense(dim, ActivationKind::Sigmoid, SolverSettings::default(), &mut rng)?;
        let x = Vector::from_vec((0..dim).map(|_| rng.uniform(0.1, 1.0)).collect());
        let expected_failures = [
            verifier::check_monotone_map(
                "selftest-negated-monotone",
                verifier::adversarial_negated(&layer, &x),
                dim,
                samples,
                &mut rng,
            ),
            verifier::check_scalable_map(
                "selftest-identity-scalable",
                verifier::identity_map(),
                dim,
                samples,
                &lambdas,
                &mut rng,
            ),
            verifier::check_concave_map("selftest-square-concave", verifier::square_map(), dim, samples, &mut rng),
        ];
        for r in expected_failures {
            println!("{r} expected=fail");
            // An adversarial map slipping through means the checks are blunt.
            all_pass &= !r.passed();
        }
    }

    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<ExitCode, CoreError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = file.get("seed", args.seed, 1)?;
    let max_batches = file.get("batches", args.batches, 100)?;
    let batch_size = file.get("batch-size", args.batch_size, 64)?;
    let out = file.get("out", args.out, PathBuf::from("pcdeq_diagnose.csv"))?;
    let data_dir = file.get_opt("data-dir", args.data_dir)?;
    let (train_data, _) = load_data(args.synthetic, data_dir.as_deref(), seed)?;

    let mut network = match file.get_opt("checkpoint", args.checkpoint)? {
        Some(path) => checkpoint_load(&path)?,
        None => {
            let arch = parse_arch(&file.get("arch", args.arch, "pcdeq1-l".to_string())?)?;
            let act = parse_act(&file.get("act", args.act, default_act(arch).to_string())?)?;
            let channels = file.get("channels", args.channels, if arch.convolutional { 82 } else { 80 })?;
            let solver = SolverSettings {
                tolerance: file.get("tol", args.tol, 1e-4)?,
                max_iters: file.get("max-iters", args.max_iters, 300)?,
                backward_max_iters: 300,
            };
            let input = input_shape_for(arch, &train_data)?;
            build_network(arch, act, channels, input, classes_in(&train_data), solver, seed)?
        }
    };

    let rows = diagnose(&mut network, &train_data, max_batches, batch_size, seed)?;
    let mut csv = String::from("batch,fwd_iters,bwd_iters\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.batch, r.fwd_iters, r.bwd_iters));
    }
    std::fs::write(&out, csv)?;

    let mut fwd: Vec<usize> = rows.iter().map(|r| r.fwd_iters).collect();
    fwd.sort_unstable();
    let median = fwd.get(fwd.len() / 2).copied().unwrap_or(0);
    let mean = fwd.iter().sum::<usize>() as f64 / fwd.len().max(1) as f64;
    let sn = pcdeq_core::numeric::spectral_norm_default(&network.equilibrium().effective_weight());
    println!(
        "batches={} fwd_median={} fwd_mean={:.2} spectral_norm={:.4}",
        rows.len(),
        median,
        mean,
        sn
    );
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
