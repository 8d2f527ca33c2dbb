//! `viewfuse` command line: mapping, depth export, benchmarking, aggregation
//! checks, toy training, batch planning, ablations and synthetic scenes.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewfuse::aggregation::{
    descriptor_sensitivity, forward, grad_check, init_params, load_checkpoint, save_checkpoint,
    AggregationParams, Fault, GradCheckConfig, ViewBatch, TENSOR_NAMES,
};
use viewfuse::batch::{plan_batch, BatchConfig};
use viewfuse::fusion::{train_toy, FusionMode, ToyConfig};
use viewfuse::geometry::{CONDITION_NAMES, N_CONDITIONS};
use viewfuse::pipeline::{compute_mapping, MappingParams};
use viewfuse::scene_io::{
    read_point_cloud, read_pose_manifest, save_png, write_depth_map, write_point_cloud,
    write_pose_manifest, EngineConfig, PlyEncoding, PoseEntry, PoseManifest,
};
use viewfuse::synth::{box_room, textured_room, BoxRoomSpec, TexturedRoomSpec};
use viewfuse::visibility::{build_zbuffer, SplatParams};
use viewfuse::{CameraView, MultiViewMapping, PointCloud};

#[derive(Parser)]
#[command(name = "viewfuse", version, about = "Multi-view point-image mapping and aggregation")]
struct Cli {
    /// TOML file overriding the engine defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores). `bench` accepts a list such
    /// as `1,8` and times each.
    #[arg(long, global = true, value_delimiter = ',')]
    threads: Vec<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the point-image mapping of a cloud and writes it as MVMP.
    Map(MapArgs),
    /// Writes the Z-buffer depth map of one image as PFM.
    Depth(DepthArgs),
    /// Times the mapping stages at several thread counts.
    Bench(BenchArgs),
    /// Runs the view aggregation head, its gradient check or its sensitivity.
    Aggregate(AggregateArgs),
    /// Trains the toy fusion model on the synthetic textured room.
    TrainToy(TrainToyArgs),
    /// Plans one dynamic-size image batch for a point sample.
    BatchPlan(BatchPlanArgs),
    /// Mapping ablations: depth thresholds and condition averaging.
    Ablate(AblateArgs),
    /// Writes a seeded synthetic scene (cloud, poses, images).
    Synth(SynthArgs),
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Maximum mapping distance in meters.
    #[arg(long)]
    rmax: Option<f64>,
    /// Splat swell factor.
    #[arg(long)]
    swell: Option<f64>,
    /// Cloud resolution in meters (default: from the PLY header).
    #[arg(long)]
    resolution: Option<f64>,
    #[arg(long)]
    knn: Option<usize>,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DepthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    image_id: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct AggregateArgs {
    /// Mapping to aggregate over; without it a random instance is used.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Parameters to load instead of a seeded initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    /// Pooled features, one point per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Points in the gradient check instance.
    #[arg(long, default_value_t = 3)]
    points: usize,
    #[arg(long)]
    grad_check: bool,
    /// Corrupts one analytic gradient: `tensor:index:delta`.
    #[arg(long, requires = "grad_check")]
    inject_fault: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long)]
    sensitivity: bool,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value = "early")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// TOML file with toy settings.
    #[arg(long)]
    toy_config: Option<PathBuf>,
    /// Line-delimited JSON records (epoch, loss, accuracy).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct BatchPlanArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    mapping: PathBuf,
    /// Number of mapped points to sample (default: all mapped points).
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<u32>,
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    mapping: PathBuf,
    /// Depth thresholds; prints the entry count kept at each.
    #[arg(long, value_delimiter = ',')]
    max_depth: Vec<f64>,
    /// Condition to replace by its dataset average (name or index).
    #[arg(long)]
    condition: Option<String>,
    /// Ablated mapping output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    BoxRoom,
    Textured,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SceneKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    equirect: bool,
}

enum Outcome {
    Ok,
    Failed(String),
}

/// Error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    if cli.threads.contains(&0) {
        bail!("--threads must be positive");
    }
    let bench = matches!(cli.command, Command::Bench(_));
    if let (Some(&n), false) = (cli.threads.first(), bench) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match cli.command {
        Command::Map(a) => cmd_map(&cfg, a),
        Command::Depth(a) => cmd_depth(&cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a, &cli.threads),
        Command::Aggregate(a) => cmd_aggregate(&cfg, a),
        Command::TrainToy(a) => cmd_train_toy(&cfg, a),
        Command::BatchPlan(a) => cmd_batch_plan(&cfg, a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn header(command: &str, cfg: &EngineConfig) {
    println!(
        "# viewfuse {command} R_max={} swell_k={} knn_k={} margin={} lambda={} C={} K={} M={} seed={} threads={}",
        cfg.r_max,
        cfg.swell_k,
        cfg.knn_k,
        cfg.margin,
        cfg.lambda,
        cfg.channels,
        cfg.blocks,
        cfg.embedding,
        cfg.seed,
        rayon::current_num_threads()
    );
}

struct Scene {
    cloud: PointCloud,
    manifest: PoseManifest,
    params: MappingParams,
}

fn load_scene(cfg: &EngineConfig, a: &SceneArgs) -> Result<Scene> {
    let manifest = read_pose_manifest(&a.poses)
        .with_context(|| format!("poses {}", a.poses.display()))?;
    let mut cloud =
        read_point_cloud(&a.cloud).with_context(|| format!("cloud {}", a.cloud.display()))?;
    if let Some(r) = a.resolution {
        cloud.resolution = r;
    }
    let splat = SplatParams::new(
        cloud.resolution,
        a.swell.unwrap_or(cfg.swell_k),
        a.rmax.unwrap_or(cfg.r_max),
    )?;
    let mut params = MappingParams::new(splat);
    params.knn_k = a.knn.unwrap_or(cfg.knn_k);
    if params.knn_k == 0 {
        bail!("--knn must be positive");
    }
    Ok(Scene {
        cloud,
        manifest,
        params,
    })
}

fn cmd_map(cfg: &EngineConfig, a: MapArgs) -> Result<Outcome> {
    header("map", cfg);
    let scene = load_scene(cfg, &a.scene)?;
    let start = Instant::now();
    let (mapping, timings) =
        compute_mapping(&scene.cloud, &scene.manifest.views(), &scene.params)?;
    let wall = start.elapsed();
    mapping
        .serialize(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("points {}", mapping.n_points());
    println!("images {}", scene.manifest.entries.len());
    println!("entries {}", mapping.n_entries());
    println!("mean_views_per_point {:.4}", mapping.mean_views_per_seen_point());
    println!(
        "time visibility={:.3}s geometry={:.3}s conditions={:.3}s csr={:.3}s wall={:.3}s",
        timings.visibility.as_secs_f64(),
        timings.geometry.as_secs_f64(),
        timings.conditions.as_secs_f64(),
        timings.csr.as_secs_f64(),
        wall.as_secs_f64()
    );
    Ok(Outcome::Ok)
}

fn cmd_depth(cfg: &EngineConfig, a: DepthArgs) -> Result<Outcome> {
    header("depth", cfg);
    let scene = load_scene(cfg, &a.scene)?;
    let Some(entry) = scene.manifest.get(a.image_id) else {
        bail!("image id {} not in {}", a.image_id, a.scene.poses.display());
    };
    let zb = build_zbuffer(&scene.cloud, &entry.view(), &scene.params.splat);
    let depth = zb.depth_raster();
    write_depth_map(&a.out, &depth).with_context(|| format!("writing {}", a.out.display()))?;
    let covered = depth.data().iter().filter(|d| d.is_finite()).count();
    let min = depth.data().iter().copied().fold(f32::INFINITY, f32::min);
    println!("covered_pixels {covered}");
    println!("min_depth {min}");
    Ok(Outcome::Ok)
}

fn cmd_bench(cfg: &EngineConfig, a: BenchArgs, threads: &[usize]) -> Result<Outcome> {
    header("bench", cfg);
    let default = [rayon::current_num_threads()];
    let threads = if threads.is_empty() { &default[..] } else { threads };
    let scene = load_scene(cfg, &a.scene)?;
    let views = scene.manifest.views();
    let mut reference: Option<Vec<u8>> = None;
    let mut identical = true;
    for &n in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("thread pool")?;
        let start = Instant::now();
        let (mapping, t) = pool.install(|| compute_mapping(&scene.cloud, &views, &scene.params))?;
        let wall = start.elapsed();
        println!(
            "threads={n} entries={} visibility={:.3}s geometry={:.3}s conditions={:.3}s csr={:.3}s wall={:.3}s",
            mapping.n_entries(),
            t.visibility.as_secs_f64(),
            t.geometry.as_secs_f64(),
            t.conditions.as_secs_f64(),
            t.csr.as_secs_f64(),
            wall.as_secs_f64()
        );
        let bytes = mapping.to_bytes();
        match &reference {
            None => reference = Some(bytes),
            Some(r) => identical &= *r == bytes,
        }
    }
    println!("identical_across_threads {identical}");
    Ok(if identical {
        Outcome::Ok
    } else {
        Outcome::Failed("mapping differs between thread counts".into())
    })
}

fn parse_fault(s: &str) -> Result<Fault> {
    let parts: Vec<&str> = s.split(':').collect();
    let [tensor, index, delta] = parts[..] else {
        bail!("fault must look like tensor:index:delta, got {s:?}");
    };
    if tensor != "features" && tensor != "conditions" && !TENSOR_NAMES.contains(&tensor) {
        bail!("unknown tensor {tensor:?}");
    }
    Ok(Fault {
        tensor: tensor.to_string(),
        index: index.parse().context("fault index")?,
        delta: delta.parse().context("fault delta")?,
    })
}

/// Fixed pseudo-random image feature per (point, image): the mapping carries
/// no pixels, so this stands in for sampled CNN features.
fn entry_feature(seed: u64, point: u32, image: u32, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((point as u64) << 32 | image as u64));
    out.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
}

fn random_batch(c: usize, n_points: usize, rng: &mut ChaCha8Rng) -> Result<ViewBatch<f64>> {
    let mut offsets = vec![0];
    let mut ids = Vec::new();
    for _ in 0..n_points {
        let n = rng.gen_range(1..=6u32);
        ids.extend(0..n);
        offsets.push(ids.len());
    }
    let e = ids.len();
    let features = (0..e * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let conditions = (0..e * N_CONDITIONS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(ViewBatch::new(c, N_CONDITIONS, offsets, ids, features, conditions)?)
}

/// The first `n` points of `full` that have at least one view.
fn head_points(full: &ViewBatch<f64>, n: usize) -> Result<ViewBatch<f64>> {
    let (c, d) = (full.c(), full.d());
    let mut offsets = vec![0];
    let (mut ids, mut features, mut conditions) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..full.n_points() {
        if offsets.len() > n {
            break;
        }
        let r = full.views(p);
        if r.is_empty() {
            continue;
        }
        for e in r {
            ids.push(full.image_ids()[e]);
            features.extend_from_slice(full.feature(e));
            conditions.extend_from_slice(full.condition(e));
        }
        offsets.push(ids.len());
    }
    if offsets.len() == 1 {
        bail!("mapping has no mapped points");
    }
    Ok(ViewBatch::new(c, d, offsets, ids, features, conditions)?)
}

fn cmd_aggregate(cfg: &EngineConfig, a: AggregateArgs) -> Result<Outcome> {
    header("aggregate", cfg);
    let seed = a.seed.unwrap_or(cfg.seed);
    let params: AggregationParams<f64> = match &a.checkpoint {
        Some(path) => load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?,
        None => init_params(cfg.channels, cfg.blocks, cfg.embedding, seed)?,
    };
    if params.d() != N_CONDITIONS {
        bail!("checkpoint expects {} conditions, mappings carry {N_CONDITIONS}", params.d());
    }
    let c = params.c();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = match &a.mapping {
        Some(path) => {
            let mapping = MultiViewMapping::deserialize(path)
                .with_context(|| format!("mapping {}", path.display()))?;
            ViewBatch::from_mapping(&mapping, c, None, |p, e, out| {
                entry_feature(seed, p, e.image_id, out)
            })
        }
        None => random_batch(c, a.points, &mut rng)?,
    };
    if let Some(path) = &a.save_checkpoint {
        save_checkpoint(path, &params).with_context(|| format!("writing {}", path.display()))?;
    }

    let mut outcome = Outcome::Ok;
    if a.grad_check {
        let small = head_points(&batch, a.points)?;
        let upstream: Vec<f64> = (0..small.n_points() * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let config = GradCheckConfig {
            tolerance: a.tolerance,
            fault: a.inject_fault.as_deref().map(parse_fault).transpose()?,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&params, &small, &upstream, &config)?;
        for t in &report.tensors {
            println!(
                "grad {:<16} max_rel_error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                t.name, t.max_rel_error, t.worst_index, t.analytic, t.numeric
            );
        }
        println!("grad_check {}", if report.passed() { "PASS" } else { "FAIL" });
        if !report.passed() {
            outcome = Outcome::Failed(format!("gradient mismatch in {}", report.failures().join(", ")));
        }
    }
    if a.sensitivity {
        let s = descriptor_sensitivity(&batch, &params)?;
        for (name, pct) in CONDITION_NAMES.iter().zip(&s.percent) {
            println!("sensitivity {name:<16} {pct:6.2}%");
        }
        if s.degenerate {
            println!("sensitivity degenerate: all derivatives are zero");
        }
    }
    if let Some(path) = &a.out {
        let pooled = forward(&batch, &params)?;
        let mut text = String::new();
        for p in 0..pooled.n_points() {
            let row: Vec<String> = pooled.point(p).iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("pooled_points {}", pooled.n_points());
    }
    Ok(outcome)
}

fn cmd_train_toy(cfg: &EngineConfig, a: TrainToyArgs) -> Result<Outcome> {
    header("train-toy", cfg);
    let mut toy = match &a.toy_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("toy config {}", path.display()))?;
            toml::from_str::<ToyConfig>(&text).with_context(|| format!("toy config {}", path.display()))?
        }
        None => ToyConfig::default(),
    };
    toy.seed = a.seed.unwrap_or(toy.seed);
    toy.scene.seed = toy.seed;
    if let Some(e) = a.epochs {
        toy.epochs = e;
    }
    if let Some(lr) = a.lr {
        toy.lr = lr;
    }
    let mode: FusionMode = a.mode.parse()?;
    let start = Instant::now();
    let report = train_toy(&toy, mode)?;
    if let Some(path) = &a.metrics {
        fs::write(path, report.metrics_lines()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("mode {mode}");
    println!("epochs {}", toy.epochs);
    println!("final_loss {:.6}", report.final_loss);
    println!("accuracy {:.4}", report.accuracy);
    println!("time {:.3}s", start.elapsed().as_secs_f64());
    Ok(Outcome::Ok)
}

fn cmd_batch_plan(cfg: &EngineConfig, a: BatchPlanArgs) -> Result<Outcome> {
    header("batch-plan", cfg);
    let manifest = read_pose_manifest(&a.poses).with_context(|| format!("poses {}", a.poses.display()))?;
    let cloud = read_point_cloud(&a.cloud).with_context(|| format!("cloud {}", a.cloud.display()))?;
    let mapping = MultiViewMapping::deserialize(&a.mapping)
        .with_context(|| format!("mapping {}", a.mapping.display()))?;
    if mapping.n_points() != cloud.len() {
        bail!("mapping has {} points, cloud has {}", mapping.n_points(), cloud.len());
    }
    let views: Vec<CameraView> = manifest.views();
    let full_area = views
        .iter()
        .map(|v| v.size().0 as u64 * v.size().1 as u64)
        .max()
        .unwrap_or(0);
    let mut engine = cfg.clone();
    engine.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(l) = a.lambda {
        engine.lambda = l;
    }
    if let Some(m) = a.margin {
        engine.margin = m;
    }
    let mut config = BatchConfig::from_engine(&engine, full_area)?;
    if let Some(b) = a.budget {
        config.budget = b;
    }
    config.max_images = a.max_images;

    let mapped: Vec<u32> = (0..mapping.n_points() as u32)
        .filter(|&p| mapping.views_of(p as usize).is_ok_and(|v| !v.is_empty()))
        .collect();
    let sample_ids: Vec<u32> = match a.sample {
        Some(n) if n < mapped.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(engine.seed);
            let mut idx = sample(&mut rng, mapped.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| mapped[i]).collect()
        }
        _ => mapped,
    };
    let plan = plan_batch(&sample_ids, &cloud, &views, &mapping, &config)?;
    println!("sample {}", sample_ids.len());
    println!("budget {}", config.budget);
    println!("spent {}", plan.spent);
    println!("chosen {}", plan.chosen.len());
    for b in &plan.buckets {
        println!("bucket {}x{} {:?}", b.size.0, b.size.1, b.image_ids);
    }
    let dump = plan.dump();
    print!("{dump}");
    if let Some(path) = &a.out {
        fs::write(path, &dump).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome::Ok)
}

fn parse_condition(s: &str) -> Result<usize> {
    if let Ok(i) = s.parse::<usize>() {
        if i < N_CONDITIONS {
            return Ok(i);
        }
        bail!("condition index {i} out of range 0..{N_CONDITIONS}");
    }
    CONDITION_NAMES
        .iter()
        .position(|&n| n == s)
        .with_context(|| format!("unknown condition {s:?}; expected one of {CONDITION_NAMES:?}"))
}

fn cmd_ablate(a: AblateArgs) -> Result<Outcome> {
    let mapping = MultiViewMapping::deserialize(&a.mapping)
        .with_context(|| format!("mapping {}", a.mapping.display()))?;
    println!("entries_full {}", mapping.n_entries());
    let mut outcome = Outcome::Ok;
    if !a.max_depth.is_empty() {
        let mut thresholds = a.max_depth.clone();
        if thresholds.iter().any(|d| !(*d > 0.0)) {
            bail!("depth thresholds must be positive");
        }
        thresholds.sort_by(|x, y| y.total_cmp(x));
        let mut prev = usize::MAX;
        for d in thresholds {
            let n = mapping.filter_by_depth(d).n_entries();
            println!("max_depth {d} entries {n}");
            if n > prev {
                outcome = Outcome::Failed(format!("entry count grew at threshold {d}"));
            }
            prev = n;
        }
    }
    if let Some(name) = &a.condition {
        let field = parse_condition(name)?;
        let ablated = mapping.ablate_condition(field)?;
        println!("ablated {}", CONDITION_NAMES[field]);
        if let Some(path) = &a.out {
            ablated
                .serialize(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(outcome)
}

fn write_manifest(dir: &Path, views: &[CameraView], rasters: Option<&[PathBuf]>) -> Result<()> {
    let entries = views
        .iter()
        .enumerate()
        .map(|(i, v)| PoseEntry {
            image_id: v.image_id,
            raster: rasters.map(|r| r[i].clone()),
            model: v.model,
            rotation: v.pose.rotation,
            translation: v.pose.position,
        })
        .collect();
    let path = dir.join("poses.txt");
    write_pose_manifest(&path, &PoseManifest { entries })
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<Outcome> {
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let cloud_path = a.out_dir.join("cloud.ply");
    match a.kind {
        SceneKind::BoxRoom => {
            let mut spec = BoxRoomSpec::default();
            spec.seed = a.seed.unwrap_or(spec.seed);
            spec.n_points = a.points.or(spec.n_points);
            spec.n_cameras = a.cameras.unwrap_or(spec.n_cameras);
            spec.image_size = a.image_size.unwrap_or(spec.image_size);
            spec.equirectangular = a.equirect;
            let room = box_room(&spec);
            write_point_cloud(&cloud_path, &room.cloud, PlyEncoding::BinaryLittleEndian)?;
            write_manifest(&a.out_dir, &room.views, None)?;
            println!("points {}", room.cloud.len());
            println!("cameras {}", room.views.len());
        }
        SceneKind::Textured => {
            let mut spec = TexturedRoomSpec::default();
            spec.seed = a.seed.unwrap_or(spec.seed);
            spec.n_cameras = a.cameras.unwrap_or(spec.n_cameras);
            spec.image_height = a.image_size.unwrap_or(spec.image_height);
            let room = textured_room(&spec);
            write_point_cloud(&cloud_path, &room.cloud, PlyEncoding::BinaryLittleEndian)?;
            let mut rasters = Vec::new();
            for (view, img) in room.views.iter().zip(&room.images) {
                let name = PathBuf::from(format!("image_{:03}.png", view.image_id));
                save_png(a.out_dir.join(&name), img)?;
                rasters.push(name);
            }
            write_manifest(&a.out_dir, &room.views, Some(&rasters))?;
            println!("points {}", room.cloud.len());
            println!("cameras {}", room.views.len());
        }
    }
    Ok(Outcome::Ok)
}
