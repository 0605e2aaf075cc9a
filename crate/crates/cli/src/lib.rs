//! Command-line front end. [`run`] parses arguments, runs one subcommand
//! and maps the outcome to an exit code: 0 on success, 1 on usage or
//! configuration errors, 2 on runtime failures. Usage errors are detected
//! before anything is written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use splatroom_core::config::apply_file;
use splatroom_core::diagnostics::{run_equivalence_suite, run_gradient_suite, OracleReport};
use splatroom_core::eval::evaluate_meshes;
use splatroom_core::io::dataset::{load_dataset, save_dataset};
use splatroom_core::io::ply::{read_ply, write_mesh};
use splatroom_core::io::synthetic::{generate_synthetic_room, SyntheticRoomSpec};
use splatroom_core::io::{pfm, png};
use splatroom_core::meshing::reconstruct_mesh;
use splatroom_core::scene::{filter_points, point_bounds, random_seeds, voxelize_seeds};
use splatroom_core::trainer::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use splatroom_core::trainer::run as run_trainer;
use splatroom_core::{render, Dataset, Error, PipelineConfig, Scene, TrainOptions, TrainState, Trainer};

#[derive(Parser, Debug)]
#[command(name = "splatroom", version, about = "Seed-guided surfel reconstruction of indoor scenes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic room dataset from a `key = value` spec file
    /// (or `default`).
    Synth {
        spec: String,
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the initial seed scene from a dataset's point cloud.
    Init {
        manifest: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        epsilon: Option<u32>,
        #[arg(long)]
        k: Option<usize>,
        /// Place seeds uniformly in the point bounding box instead of on
        /// the points.
        #[arg(long)]
        random: bool,
        /// Output checkpoint (default: `init.bin` next to the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a scene against a dataset.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        iters: Option<u32>,
        /// Starting checkpoint; resumes when it has completed iterations.
        /// Its stored configuration is the base for `--config` and `--set`.
        /// Without it the scene is initialized from the point cloud.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Disable seed growth and pruning.
        #[arg(long)]
        no_densify: bool,
    },
    /// Render color, depth and normals of stored cameras.
    Render {
        checkpoint: PathBuf,
        /// Camera id, or `all`.
        camera: String,
        out_dir: PathBuf,
    },
    /// Fuse rendered depth into a TSDF and extract a mesh.
    Mesh {
        checkpoint: PathBuf,
        manifest: PathBuf,
        out: PathBuf,
        #[arg(long)]
        voxel: Option<f64>,
        /// Truncation as a multiple of the voxel size.
        #[arg(long)]
        trunc: Option<f64>,
    },
    /// Compare two meshes and print accuracy, completion, precision,
    /// recall and F-score as JSON.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the gradient and equivalence suites.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, e.g. `--set loss.lambda_d=0`; repeatable and applied
    /// after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(format!("invalid configuration: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, out)),
            Err(e) => Err(Failure::Runtime(e.to_string())),
        },
        None => dispatch(cli.command, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send)) -> Outcome {
    match command {
        Command::Synth { spec, out_dir, seed } => synth(&spec, &out_dir, seed, out),
        Command::Init {
            manifest,
            common,
            delta,
            epsilon,
            k,
            random,
            out: path,
        } => {
            let mut cfg = pipeline_config(PipelineConfig::default(), &common)?;
            if let Some(d) = delta {
                cfg.seeds.delta = d;
            }
            if let Some(e) = epsilon {
                cfg.seeds.epsilon = e;
            }
            if let Some(k) = k {
                cfg.seeds.k = k;
            }
            cfg.validate()?;
            init(&manifest, cfg, random, path, out)
        }
        Command::Train {
            manifest,
            common,
            iters,
            init,
            out: dir,
            no_densify,
        } => {
            let adjust = |cfg: &mut PipelineConfig| {
                if let Some(n) = iters {
                    cfg.train.total_iters = n;
                }
                if no_densify {
                    cfg.densify.enabled = false;
                }
            };
            // Reject bad flags before touching any file.
            let mut cfg = pipeline_config(PipelineConfig::default(), &common)?;
            adjust(&mut cfg);
            cfg.validate()?;
            let resumed = match init {
                Some(path) => {
                    let ck = read_checkpoint(&path)?;
                    let mut cfg = pipeline_config(ck.config.clone(), &common)?;
                    adjust(&mut cfg);
                    cfg.validate()?;
                    Some((ck, cfg))
                }
                None => None,
            };
            train(&manifest, cfg, resumed, &dir, out)
        }
        Command::Render { checkpoint, camera, out_dir } => render_views(&checkpoint, &camera, &out_dir, out),
        Command::Mesh {
            checkpoint,
            manifest,
            out: path,
            voxel,
            trunc,
        } => mesh(&checkpoint, &manifest, &path, voxel, trunc, out),
        Command::Eval {
            pred,
            gt,
            threshold,
            samples,
            seed,
            json,
        } => eval(&pred, &gt, threshold, samples, seed, json.as_deref(), out),
        Command::Verify { seed, json } => verify(seed, json.as_deref(), out),
    }
}

/// `base` with the config file, `--set` overrides and seed applied.
fn pipeline_config(mut cfg: PipelineConfig, args: &ConfigArgs) -> std::result::Result<PipelineConfig, Failure> {
    if let Some(path) = &args.config {
        apply_file(&mut cfg, path).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Usage(other.to_string()),
        })?;
    }
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(key.trim(), value.trim()).map_err(Failure::Usage)?;
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(spec_arg: &str, dir: &Path, seed: Option<u64>, out: &mut (dyn Write + Send)) -> Outcome {
    let mut spec = SyntheticRoomSpec::default();
    if spec_arg != "default" {
        apply_file(&mut spec, Path::new(spec_arg)).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Usage(other.to_string()),
        })?;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let room = generate_synthetic_room(&spec)?;
    let manifest = save_dataset(&room.dataset, dir)?;
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, splatroom_core::config::to_text(&spec)).map_err(|e| Failure::Runtime(format!("{}: {e}", spec_path.display())))?;
    say(out, format!("wrote {} views to {}", room.dataset.len(), manifest.display()))
}

/// Seed scene for a dataset: voxelized from the filtered points, or with
/// `random` the same number of seeds placed uniformly in their bounds.
pub fn initial_scene(dataset: &Dataset, cfg: &PipelineConfig, random: bool) -> splatroom_core::Result<Scene> {
    let points = filter_points(&dataset.points, cfg.seeds.epsilon);
    let guided = voxelize_seeds(&points, &cfg.seeds)?;
    match point_bounds(&points) {
        Some((lo, hi)) if random => random_seeds(&lo, &hi, guided.seeds.len(), &cfg.seeds),
        _ => Ok(guided),
    }
}

fn init(manifest: &Path, cfg: PipelineConfig, random: bool, path: Option<PathBuf>, out: &mut (dyn Write + Send)) -> Outcome {
    let dataset = load_dataset(manifest)?;
    let scene = initial_scene(&dataset, &cfg, random)?;
    let path = path.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("init.bin"));
    let ck = Checkpoint {
        state: TrainState::new(&scene, cfg.train.seed),
        cameras: dataset.named_cameras(),
        config: cfg,
        scene,
    };
    write_checkpoint(&path, &ck)?;
    say(
        out,
        format!("{} seeds, {} surfels -> {}", ck.scene.active_seed_count(), ck.scene.surfels.len(), path.display()),
    )
}

fn train(
    manifest: &Path,
    cfg: PipelineConfig,
    start: Option<(Checkpoint, PipelineConfig)>,
    dir: &Path,
    out: &mut (dyn Write + Send),
) -> Outcome {
    let dataset = load_dataset(manifest)?;
    let trainer = match start {
        Some((ck, cfg)) if ck.state.iteration > 0 => Trainer::resume(ck.scene, ck.state, &dataset, cfg)?,
        Some((ck, cfg)) => Trainer::new(ck.scene, &dataset, cfg)?,
        None => {
            let scene = initial_scene(&dataset, &cfg, false)?;
            Trainer::new(scene, &dataset, cfg)?
        }
    };
    let options = TrainOptions {
        checkpoint_dir: Some(dir.to_path_buf()),
        loss_log: Some(dir.join("loss.csv")),
    };
    let fit = run_trainer(trainer, &options)?;
    let last = fit.reports.last();
    say(
        out,
        format!(
            "trained to iteration {} (loss {}), {} seeds -> {}",
            fit.state.iteration,
            last.map_or("n/a".into(), |r| format!("{:.5}", r.total)),
            fit.scene.active_seed_count(),
            dir.join("final.bin").display()
        ),
    )
}

fn render_views(checkpoint: &Path, camera: &str, dir: &Path, out: &mut (dyn Write + Send)) -> Outcome {
    let ck = read_checkpoint(checkpoint)?;
    let chosen: Vec<_> = ck.cameras.iter().filter(|(id, _)| camera == "all" || id == camera).collect();
    if chosen.is_empty() {
        let known: Vec<&str> = ck.cameras.iter().map(|(id, _)| id.as_str()).collect();
        return Err(Failure::Runtime(format!("no camera `{camera}` in checkpoint (have: {})", known.join(", "))));
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    for (id, cam) in &chosen {
        let r = render(&ck.scene, cam, &ck.config.raster);
        png::write_rgb(&dir.join(format!("{id}.png")), &r.color)?;
        pfm::write_pfm_scalar(&dir.join(format!("{id}_depth.pfm")), &r.depth)?;
        pfm::write_pfm_rgb(&dir.join(format!("{id}_normal.pfm")), &r.normal)?;
        pfm::write_pfm_scalar(&dir.join(format!("{id}_alpha.pfm")), &r.alpha)?;
    }
    say(out, format!("rendered {} view(s) to {}", chosen.len(), dir.display()))
}

fn mesh(checkpoint: &Path, manifest: &Path, path: &Path, voxel: Option<f64>, trunc: Option<f64>, out: &mut (dyn Write + Send)) -> Outcome {
    let ck = read_checkpoint(checkpoint)?;
    let mut tsdf = ck.config.tsdf;
    if let Some(v) = voxel {
        tsdf.voxel_size = v;
    }
    if let Some(t) = trunc {
        tsdf.truncation_factor = t;
    }
    tsdf.validate()?;
    let dataset = load_dataset(manifest)?;
    let mesh = reconstruct_mesh(&ck.scene, &dataset.cameras(), &ck.config.raster, &tsdf)?;
    write_mesh(path, &mesh)?;
    say(out, format!("{} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), path.display()))
}

fn eval(
    pred: &Path,
    gt: &Path,
    threshold: Option<f64>,
    samples: Option<usize>,
    seed: Option<u64>,
    json: Option<&Path>,
    out: &mut (dyn Write + Send),
) -> Outcome {
    let mut cfg = PipelineConfig::default().eval;
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    if let Some(n) = samples {
        cfg.n_samples = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let a = read_ply(pred)?.into_mesh();
    let b = read_ply(gt)?.into_mesh();
    let metrics = evaluate_meshes(&a, &b, &cfg)?;
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = json {
        fs::write(path, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    say(out, text)
}

fn verify(seed: u64, json: Option<&Path>, out: &mut (dyn Write + Send)) -> Outcome {
    let mut reports: Vec<OracleReport> = run_gradient_suite(seed);
    reports.extend(run_equivalence_suite(seed));
    for r in &reports {
        say(out, r.to_string())?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    say(out, format!("{} checks, {} failed", reports.len(), failed))?;
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} verification check(s) failed")));
    }
    Ok(())
}

fn say(out: &mut (dyn Write + Send), line: impl AsRef<str>) -> Outcome {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Failure::Runtime(e.to_string()))
}
