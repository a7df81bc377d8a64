//! `imse-lab`: batch experiments for self-supervised multi-modal registration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use imse_core::benchmark::{run_benchmark, EvaluatorSet, SuiteConfig, SyntheticSuite};
use imse_core::evaluation::{dice, field_smoothness, hd95, imse_alignment_score, correlation_experiment, BinaryMask, MaskedPair};
use imse_core::evaluator::{init_evaluator, train_evaluator, EvaluatorConfig, EvaluatorModel};
use imse_core::io;
use imse_core::nn::unet::UNetArch;
use imse_core::phantom::{generate_ground_truth_pair, generate_phantom, ModalityMap};
use imse_core::registration::{
    register_iterative, register_with_network, train_registration_network, NetworkTrainingConfig,
    RegistrationConfig, RegistrationNetwork,
};
use imse_core::remap::{apply_remap, bezier_shift, sample_remap, RemapSpec, DEFAULT_N_MAX, DEFAULT_N_MIN};
use imse_core::rng::SeedStream;
use imse_core::transforms::{DeformationConfig, NoiseMode};
use imse_core::{Error, Image, Result};

const THREADS_ENV: &str = "IMSE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "imse-lab", version, about = "Self-supervised multi-modal registration lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-modal registration pairs with ground truth.
    GenData(GenDataArgs),
    /// Apply a Shuffle Remap (or Bezier histogram shift) to one image.
    RemapDemo(RemapDemoArgs),
    /// Train a spatial evaluator on single-modality images.
    TrainEvaluator(TrainEvaluatorArgs),
    /// Register a moving image to a target image.
    Register(RegisterArgs),
    /// Re-express a source image in the distribution of a reference image.
    Translate(TranslateArgs),
    /// Score a registration result against masks.
    Evaluate(EvaluateArgs),
    /// Correlate evaluator alignment scores with Dice under random transforms.
    Correlate(CorrelateArgs),
    /// Compare registration losses on a synthetic suite.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Multiplier on the default deformation ranges (0 gives aligned pairs).
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    seed: u64,
    count: usize,
    size: usize,
    classes: usize,
    deformation: DeformationConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 10,
            size: 64,
            classes: 4,
            deformation: DeformationConfig::default(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    ShuffleRemap,
    Bezier,
    None,
}

impl From<NoiseArg> for NoiseMode {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::ShuffleRemap => NoiseMode::ShuffleRemap,
            NoiseArg::Bezier => NoiseMode::Bezier,
            NoiseArg::None => NoiseMode::None,
        }
    }
}

#[derive(Args)]
struct RemapDemoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input image (`.raw` with JSON sidecar, or `.pgm`).
    #[arg(long)]
    input: PathBuf,
    /// Explicit remap spec as JSON `{control_points, permutation}`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RemapDemoConfig {
    seed: u64,
    noise: NoiseMode,
    n_min: usize,
    n_max: usize,
    spec: Option<RemapSpec>,
}

impl Default for RemapDemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: NoiseMode::ShuffleRemap,
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
            spec: None,
        }
    }
}

#[derive(Args)]
struct TrainEvaluatorArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `gen-data`; its target images are the sources.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Iterative,
    Network,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Which evaluator input gets the warped image: `target` or `warped`.
    #[arg(long)]
    imse_reference: Option<String>,
    #[arg(long)]
    evaluator: Option<PathBuf>,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Trained registration network checkpoint (network method).
    #[arg(long)]
    network: Option<PathBuf>,
    /// Dataset directory to train a network on first (network method).
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Mask directories for Dice / HD95 reporting.
    #[arg(long, requires = "masks_target")]
    masks_moving: Option<PathBuf>,
    #[arg(long, requires = "masks_moving")]
    masks_target: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RegisterConfig {
    method: Method,
    registration: RegistrationConfig,
    network: NetworkTrainingConfig,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            method: Method::Iterative,
            registration: RegistrationConfig::default(),
            network: NetworkTrainingConfig::default(),
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    evaluator: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory written by `register` (reads `field.raw`).
    #[arg(long)]
    result: PathBuf,
    /// Mask directory holding `moving_<name>.pgm` / `target_<name>.pgm`.
    #[arg(long)]
    masks: PathBuf,
    /// With `--target`: also report the evaluator alignment score.
    #[arg(long, requires = "target")]
    evaluator: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    evaluator: PathBuf,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    transforms: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorrelateConfig {
    seed: u64,
    transforms: usize,
    deformation: DeformationConfig,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            transforms: 50,
            deformation: DeformationConfig {
                deformation_strength: 2.0,
                ..DeformationConfig::default()
            },
        }
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Suite configuration JSON (defaults apply to missing keys).
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::BadConfig(format!("{}: {e}", p.display())))
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_image(path: &Path, image: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => io::write_pgm(path, image, true),
        _ => io::write_image_raw(&path.with_extension("raw"), image),
    }
}

fn pair_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(data).map_err(|e| Error::Io {
        path: data.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("pair_")?.parse().ok()?;
            Some((k, e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

/// Masks saved as `<prefix>_<name>.pgm`, sorted by name.
fn read_masks(dir: &Path, prefix: &str) -> Result<Vec<(String, BinaryMask)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for e in entries.filter_map(|e| e.ok()) {
        let name = e.file_name().into_string().unwrap_or_default();
        if let Some(stem) = name.strip_prefix(&format!("{prefix}_")).and_then(|s| s.strip_suffix(".pgm")) {
            out.push((stem.to_string(), io::read_mask_pgm(&e.path())?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(args.config.as_deref())?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.count = args.count.unwrap_or(cfg.count);
    cfg.size = args.size.unwrap_or(cfg.size);
    cfg.classes = args.classes.unwrap_or(cfg.classes);
    if let Some(s) = args.strength {
        cfg.deformation.deformation_strength = s;
    }
    if cfg.count == 0 {
        return Err(Error::BadConfig("count must be at least 1".into()));
    }
    create_out(&args.out)?;
    let (ma, mb) = (ModalityMap::modality_a(cfg.classes), ModalityMap::modality_b(cfg.classes));
    for k in 0..cfg.count {
        let mut stream = SeedStream::derive(cfg.seed, &[k as u64]);
        let phantom = generate_phantom::<f32>(&mut stream, cfg.size, cfg.classes)?;
        let pair = generate_ground_truth_pair(&phantom, (&ma, &mb), &cfg.deformation, &mut stream)?;
        let dir = args.out.join(format!("pair_{k}"));
        io::write_image_raw(&dir.join("moving.raw"), &pair.moving)?;
        io::write_image_raw(&dir.join("target.raw"), &pair.target)?;
        io::write_pgm(&dir.join("moving.pgm"), &pair.moving, false)?;
        io::write_pgm(&dir.join("target.pgm"), &pair.target, false)?;
        io::write_field_raw(&dir.join("true_field.raw"), &pair.true_field)?;
        for ((name, m), (_, t)) in pair.masks_moving.iter().zip(&pair.masks_target) {
            io::write_mask_pgm(&dir.join("masks").join(format!("moving_{name}.pgm")), m)?;
            io::write_mask_pgm(&dir.join("masks").join(format!("target_{name}.pgm")), t)?;
        }
    }
    io::write_json(&args.out.join("resolved_config.json"), &cfg)?;
    eprintln!("wrote {} pairs to {}", cfg.count, args.out.display());
    Ok(())
}

fn remap_demo(args: RemapDemoArgs) -> Result<()> {
    let mut cfg: RemapDemoConfig = load_config(args.config.as_deref())?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.noise = args.noise.map(Into::into).unwrap_or(cfg.noise);
    cfg.n_min = args.n_min.unwrap_or(cfg.n_min);
    cfg.n_max = args.n_max.unwrap_or(cfg.n_max);
    if let Some(p) = &args.spec {
        cfg.spec = Some(io::read_json(p)?);
    }
    let input: Image = io::read_image(&args.input)?;
    let mut stream = SeedStream::new(cfg.seed);
    let output = match (&cfg.spec, cfg.noise) {
        (Some(spec), _) => {
            spec.validate()?;
            apply_remap(&input, spec)?
        }
        (None, NoiseMode::ShuffleRemap) => {
            let spec = sample_remap(&mut stream, cfg.n_min, cfg.n_max)?;
            cfg.spec = Some(spec.clone());
            apply_remap(&input, &spec)?
        }
        (None, NoiseMode::Bezier) => bezier_shift(&input, &mut stream)?,
        (None, NoiseMode::None) => input.clone(),
    };
    write_image(&args.out, &output)?;
    let dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    io::write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}

fn train_evaluator_cmd(args: TrainEvaluatorArgs) -> Result<()> {
    let mut cfg: EvaluatorConfig = load_config(args.config.as_deref())?;
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.pairs.noise = args.noise.map(Into::into).unwrap_or(cfg.pairs.noise);
    cfg.pairs.n_min = args.n_min.unwrap_or(cfg.pairs.n_min);
    cfg.pairs.n_max = args.n_max.unwrap_or(cfg.pairs.n_max);
    cfg.learning_rate = args.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let sources = pair_dirs(&args.data)?
        .iter()
        .map(|d| io::read_image_raw(&d.join("target.raw")))
        .collect::<Result<Vec<Image>>>()?;
    create_out(&args.out)?;
    io::write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let mut model: EvaluatorModel<f32> = init_evaluator(&cfg)?;
    let every = (cfg.steps / 20).max(1);
    let trace = train_evaluator(&mut model, &sources, &cfg, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step}: loss {loss:.5}");
        }
    })?;
    io::save_evaluator(&args.out.join("evaluator.ckpt"), &model)?;
    io::write_trace_csv(&args.out.join("loss.csv"), &trace)?;
    Ok(())
}

#[derive(Serialize)]
struct StructureScore {
    name: String,
    dice: f64,
    hd95: f64,
}

#[derive(Serialize)]
struct MetricsReport {
    smoothness: f64,
    mean_dice: Option<f64>,
    mean_hd95: Option<f64>,
    structures: Vec<StructureScore>,
    alignment_score: Option<f64>,
}

fn score_masks(
    field: &imse_core::Field,
    moving: &[(String, BinaryMask)],
    target: &[(String, BinaryMask)],
) -> Result<MetricsReport> {
    let mut structures = Vec::new();
    for (name, m) in moving {
        let Some((_, t)) = target.iter().find(|(n, _)| n == name) else {
            continue;
        };
        let warped = m.warp_nearest(field)?;
        structures.push(StructureScore {
            name: name.clone(),
            dice: dice(&warped, t)?,
            hd95: hd95(&warped, t)?,
        });
    }
    let n = structures.len() as f64;
    let mean = |f: fn(&StructureScore) -> f64| (n > 0.0).then(|| structures.iter().map(f).sum::<f64>() / n);
    Ok(MetricsReport {
        smoothness: field_smoothness(field),
        mean_dice: mean(|s| s.dice),
        mean_hd95: mean(|s| s.hd95),
        structures,
        alignment_score: None,
    })
}

fn register_cmd(args: RegisterArgs) -> Result<()> {
    let mut cfg: RegisterConfig = load_config(args.config.as_deref())?;
    cfg.method = args.method.unwrap_or(cfg.method);
    if let Some(l) = &args.loss {
        cfg.registration.loss = l.clone();
    }
    if let Some(l) = args.lambda {
        cfg.registration.lambda = l;
        cfg.network.lambda = l;
    }
    cfg.registration.iterations = args.iters.unwrap_or(cfg.registration.iterations);
    if let Some(lr) = args.lr {
        match cfg.method {
            Method::Iterative => cfg.registration.learning_rate = lr,
            Method::Network => cfg.network.learning_rate = lr,
        }
    }
    if let Some(r) = &args.imse_reference {
        cfg.registration.imse_reference = r.parse()?;
    }
    cfg.network.steps = args.steps.unwrap_or(cfg.network.steps);
    if let Some(s) = args.seed {
        cfg.registration.seed = s;
        cfg.network.seed = s;
    }
    cfg.registration.validate()?;
    let evaluator: Option<EvaluatorModel<f32>> = args.evaluator.as_deref().map(io::load_evaluator).transpose()?;
    let moving: Image = io::read_image(&args.moving)?;
    let target: Image = io::read_image(&args.target)?;
    create_out(&args.out)?;
    io::write_json(&args.out.join("resolved_config.json"), &cfg)?;

    let result = match cfg.method {
        Method::Iterative => register_iterative(&moving, &target, &cfg.registration, evaluator.as_ref())?,
        Method::Network => {
            let network = match (&args.network, &args.train_data) {
                (Some(p), _) => io::load_registration_network(p)?,
                (None, Some(data)) => {
                    let pairs = pair_dirs(data)?
                        .iter()
                        .map(|d| Ok((io::read_image_raw(&d.join("moving.raw"))?, io::read_image_raw(&d.join("target.raw"))?)))
                        .collect::<Result<Vec<(Image, Image)>>>()?;
                    let similarity = cfg.registration.similarity(evaluator.as_ref())?;
                    let arch = UNetArch {
                        base_channels: cfg.network.base_channels,
                    };
                    let mut net = RegistrationNetwork::new(arch, cfg.network.seed);
                    let every = (cfg.network.steps / 20).max(1);
                    let trace = train_registration_network(&mut net, &pairs, &similarity, &cfg.network, |s, l| {
                        if s % every == 0 {
                            eprintln!("step {s}: loss {l:.5}");
                        }
                    })?;
                    io::save_registration_network(&args.out.join("network.ckpt"), &net)?;
                    io::write_trace_csv(&args.out.join("network_loss.csv"), &trace)?;
                    net
                }
                (None, None) => {
                    return Err(Error::BadConfig(
                        "network registration needs --network or --train-data".into(),
                    ))
                }
            };
            register_with_network(&network, &moving, &target)?
        }
    };
    io::write_field_raw(&args.out.join("field.raw"), &result.field)?;
    io::write_image_raw(&args.out.join("warped.raw"), &result.warped)?;
    io::write_pgm(&args.out.join("warped.pgm"), &result.warped, false)?;
    io::write_trace_csv(&args.out.join("trace.csv"), &result.trace)?;
    let report = match (&args.masks_moving, &args.masks_target) {
        (Some(mm), Some(mt)) => score_masks(&result.field, &read_masks(mm, "moving")?, &read_masks(mt, "target")?)?,
        _ => score_masks(&result.field, &[], &[])?,
    };
    io::write_json(&args.out.join("metrics.json"), &report)?;
    Ok(())
}

fn translate_cmd(args: TranslateArgs) -> Result<()> {
    let model: EvaluatorModel<f32> = io::load_evaluator(&args.evaluator)?;
    let reference: Image = io::read_image(&args.reference)?;
    let source: Image = io::read_image(&args.source)?;
    let out = model.translate(&reference, &source)?;
    write_image(&args.out, &out)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let field: imse_core::Field = io::read_field_raw(&args.result.join("field.raw"))?;
    let moving = read_masks(&args.masks, "moving")?;
    let target = read_masks(&args.masks, "target")?;
    let mut report = score_masks(&field, &moving, &target)?;
    if let (Some(ev), Some(t)) = (&args.evaluator, &args.target) {
        let model: EvaluatorModel<f32> = io::load_evaluator(ev)?;
        let target_image: Image = io::read_image(t)?;
        let warped: Image = io::read_image_raw(&args.result.join("warped.raw"))?;
        let (h, w) = target_image.shape();
        let mut union_m = BinaryMask::from_fn(h, w, |_, _| false);
        let mut union_t = union_m.clone();
        for (name, m) in &moving {
            union_m = union_m.union(&m.warp_nearest(&field)?)?;
            if let Some((_, t)) = target.iter().find(|(n, _)| n == name) {
                union_t = union_t.union(t)?;
            }
        }
        report.alignment_score = Some(imse_alignment_score(&model, &warped, &target_image, &union_m, &union_t)?);
    }
    io::write_json(&args.out, &report)
}

fn correlate_cmd(args: CorrelateArgs) -> Result<()> {
    let mut cfg: CorrelateConfig = load_config(args.config.as_deref())?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.transforms = args.transforms.unwrap_or(cfg.transforms);
    let model: EvaluatorModel<f32> = io::load_evaluator(&args.evaluator)?;
    let mut pairs = Vec::new();
    for dir in pair_dirs(&args.pairs)? {
        let moving = read_masks(&dir.join("masks"), "moving")?;
        let target = read_masks(&dir.join("masks"), "target")?;
        let Some(largest) = (0..target.len()).max_by_key(|&i| target[i].1.count()) else {
            continue;
        };
        pairs.push(MaskedPair {
            moving: io::read_image_raw(&dir.join("moving.raw"))?,
            target: io::read_image_raw(&dir.join("target.raw"))?,
            mask_moving: moving[largest].1.clone(),
            mask_target: target[largest].1.clone(),
        });
    }
    let report = correlation_experiment(&model, &pairs, cfg.transforms, &cfg.deformation, cfg.seed)?;
    create_out(&args.out)?;
    io::write_json(&args.out.join("resolved_config.json"), &cfg)?;
    report.write_json(&args.out.join("report.json"))?;
    write_text(&args.out.join("scatter.csv"), &report.to_csv())?;
    report.write_scatter_png(&args.out.join("scatter.png"))?;
    eprintln!("spearman {:.4}, pearson {:.4}", report.spearman, report.pearson);
    Ok(())
}

fn benchmark_cmd(args: BenchmarkArgs) -> Result<()> {
    let mut cfg: SuiteConfig = load_config(args.suite.as_deref())?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    create_out(&args.out)?;
    io::write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let suite = SyntheticSuite::<f32>::generate(&cfg)?;
    let report = run_benchmark(&cfg, &suite, &mut EvaluatorSet::default(), &mut |msg| eprintln!("{msg}"))?;
    write_text(&args.out.join("results.csv"), &report.to_csv())?;
    write_text(&args.out.join("results.md"), &report.to_markdown())?;
    io::write_json(&args.out.join("report.json"), &report)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::BadConfig(format!("{THREADS_ENV} must be a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::BadConfig(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::RemapDemo(a) => remap_demo(a),
        Command::TrainEvaluator(a) => train_evaluator_cmd(a),
        Command::Register(a) => register_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Correlate(a) => correlate_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
