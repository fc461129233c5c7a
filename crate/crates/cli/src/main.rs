mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use segdistill::data::{
    class_distribution_csv, dataset_read, dataset_write, gen_dense_scene, gen_sparse_scene, gen_test_scene, gen_unlabeled_scene,
    Domain, Sample, SceneParams, OBJECT_CLASSES,
};
use segdistill::distill::{distill, teacher_predict_cache, transfer_report, Method, TeacherCache, TransferSet, CACHE_INDEX};
use segdistill::metrics::{metrics, Metrics};
use segdistill::model::{build_ensemble, build_model, load_checkpoint, save_checkpoint, Model};
use segdistill::train::{evaluate, train, RunStatus, Strategy, TrainData, TrainOutcome};
use segdistill::{Error, RngState};
use sha2::{Digest, Sha256};

use config::{RunConfig, EFFECTIVE_CONFIG};

const PALETTE_FILE: &str = "palette.txt";
const STATUS_FILE: &str = "status.txt";
const METRICS_FILE: &str = "metrics.csv";
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(name = "segdistill", version, about = "Synthetic street-scene segmentation: training, distillation, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model with one of the multi-domain strategies.
    Train(TrainArgs),
    /// Transfer a teacher's knowledge into a compact student.
    Distill(DistillArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Merge finished runs into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_dense: Option<usize>,
    #[arg(long)]
    num_sparse: Option<usize>,
    #[arg(long)]
    num_unlabeled: Option<usize>,
    /// Labeled test scenes, written to `test/` under the output.
    #[arg(long)]
    num_test: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Palette size: 8 or 11.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// e2e_dense, e2e_sparse, e2e_mixed, bgc, flying_cars or ensemble_fusion.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One checkpoint, or dense and sparse base checkpoints separated by a
    /// comma to assemble and fuse an ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    teacher: Vec<PathBuf>,
    /// tk-l, tk-smp, tk-smp-drop or tk-smp-wce.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run the deltas are taken against; defaults to the first completed
    /// run by name.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parameter(_) => Failure::Usage(e.to_string()),
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Dimension(_) => Failure::Data(e.to_string()),
            Error::NumericFault(_) | Error::Contract(_) => Failure::Other(e.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn write(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    RunConfig::load(path).map_err(Failure::Usage)
}

fn read_palette(dir: &Path) -> CmdResult<Vec<String>> {
    let path = dir.join(PALETTE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect())
}

fn write_palette(dir: &Path, palette: &[String]) -> CmdResult {
    write(&dir.join(PALETTE_FILE), &format!("{}\n", palette.join("\n")))
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    let d = &mut cfg.data;
    let overrides = [
        (&mut d.num_dense, args.num_dense),
        (&mut d.num_sparse, args.num_sparse),
        (&mut d.num_unlabeled, args.num_unlabeled),
        (&mut d.num_test, args.num_test),
        (&mut d.width, args.width),
        (&mut d.height, args.height),
        (&mut d.classes, args.classes),
    ];
    for (slot, flag) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(s) = args.seed {
        d.seed = s;
    }
    let d = cfg.data.clone();
    if d.num_dense + d.num_sparse + d.num_unlabeled == 0 {
        return Err(Failure::Usage("nothing to generate: dense, sparse and unlabeled counts are all zero".into()));
    }
    if d.width == 0 || d.height == 0 || d.width % 16 != 0 || d.height % 16 != 0 {
        return Err(Failure::Usage(format!("width and height must be positive multiples of 16, got {}×{}", d.width, d.height)));
    }
    let params = SceneParams { width: d.width, height: d.height, ..SceneParams::with_classes(d.classes)? };
    let root = RngState::new(d.seed);
    type Gen = fn(&mut RngState, &SceneParams) -> segdistill::Result<Sample>;
    let gen = |stream: u64, n: usize, f: Gen| -> segdistill::Result<Vec<Sample>> {
        (0..n as u64).into_par_iter().map(|i| f(&mut root.split(stream).split(i), &params)).collect()
    };
    let mut samples = gen(1, d.num_dense, gen_dense_scene)?;
    samples.extend(gen(2, d.num_sparse, gen_sparse_scene)?);
    samples.extend(gen(4, d.num_unlabeled, gen_unlabeled_scene)?);
    let test = gen(3, d.num_test, gen_test_scene)?;

    dataset_write(&samples, &args.out)?;
    write_palette(&args.out, &params.palette)?;
    write(&args.out.join("stats.csv"), &class_distribution_csv(&samples, &params.palette))?;
    write(&args.out.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    if !test.is_empty() {
        let dir = args.out.join(&cfg.eval.test_dir);
        dataset_write(&test, &dir)?;
        write_palette(&dir, &params.palette)?;
    }
    log::info!("wrote {} samples and {} test scenes to {}", samples.len(), test.len(), args.out.display());
    Ok(())
}

struct Pools {
    all: Vec<Sample>,
    dense: Vec<Sample>,
    sparse: Vec<Sample>,
    test: Vec<Sample>,
    palette: Vec<String>,
}

fn load_pools(data: &Path, cfg: &RunConfig) -> CmdResult<Pools> {
    let all = dataset_read(data)?;
    let palette = read_palette(data)?;
    let of = |d: Domain| all.iter().filter(|s| s.domain == d).cloned().collect::<Vec<_>>();
    let (dense, sparse) = (of(Domain::Dense), of(Domain::Sparse));
    let test_dir = data.join(&cfg.eval.test_dir);
    let test = if cfg.eval.test_dir.is_empty() || !test_dir.join(segdistill::data::MANIFEST_FILE).exists() {
        Vec::new()
    } else {
        dataset_read(&test_dir)?.into_iter().filter(|s| s.labels.is_some()).collect()
    };
    Ok(Pools { all, dense, sparse, test, palette })
}

/// True when every output channel is the palette class of the same index.
fn palette_aligned(model: &Model<f32>, classes: usize) -> bool {
    model.num_classes() == classes && model.config().alignment().iter().enumerate().all(|(i, a)| *a == Some(i as u8))
}

fn metrics_table(name: &str, palette: &[String], m: &Metrics) -> String {
    format!("model,{}\n{name},{}\n", Metrics::table_header(palette), m.table_row())
}

fn score(model: &Model<f32>, samples: &[Sample]) -> CmdResult<Metrics> {
    Ok(metrics(&evaluate(model, samples)?)?)
}

fn write_status(out: &Path, outcome: &TrainOutcome) -> CmdResult {
    let mut text = format!("{}\n", outcome.status.as_str());
    if let Some(r) = &outcome.reason {
        text.push_str(r);
        text.push('\n');
    }
    write(&out.join(STATUS_FILE), &text)
}

fn load_model(path: &Path) -> CmdResult<Model<f32>> {
    Ok(load_checkpoint::<f32>(path)?)
}

fn fuse(bases: &[PathBuf], cfg: &RunConfig) -> CmdResult<Model<f32>> {
    let [dense, sparse] = bases else {
        return Err(Failure::Usage(format!("an ensemble needs exactly 2 base checkpoints, got {}", bases.len())));
    };
    let mut rng = RngState::new(cfg.train.seed).split(12);
    Ok(build_ensemble(load_model(dense)?, load_model(sparse)?, &cfg.model.fusion_maps, &mut rng)?)
}

fn check_pools(strategy: Strategy, cfg: &RunConfig, pools: &Pools, data: &Path) -> CmdResult {
    let plan_sparse = cfg.train.batch.n_sparse > 0;
    let needs_dense = strategy != Strategy::E2eSparse;
    let needs_sparse = match strategy {
        Strategy::E2eSparse | Strategy::E2eMixed | Strategy::FlyingCars => true,
        Strategy::Bgc | Strategy::EnsembleFusion => plan_sparse,
        Strategy::E2eDense => false,
    };
    for (needed, pool, name) in [(needs_dense, &pools.dense, "dense"), (needs_sparse, &pools.sparse, "sparse")] {
        if needed && pool.is_empty() {
            return Err(Failure::Usage(format!("strategy {strategy} needs {name} samples but {} has none", data.display())));
        }
    }
    Ok(())
}

/// Trains with `cfg.train` and writes checkpoint, log, status and config.
fn run_training(model: &mut Model<f32>, pools: &Pools, cfg: &RunConfig, out: &Path, ckpt: &str) -> CmdResult<TrainOutcome> {
    let data = TrainData { dense: &pools.dense, sparse: &pools.sparse, eval: &pools.test };
    let outcome = train(model, data, &cfg.train)?;
    save_checkpoint(model, &out.join(ckpt))?;
    write(&out.join("log.csv"), &outcome.log.to_csv())?;
    Ok(outcome)
}

fn cmd_train(args: TrainArgs) -> CmdResult<RunStatus> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = &args.strategy {
        cfg.train.strategy = s.parse().map_err(Failure::Usage)?;
    }
    cfg.train.validate()?;
    let strategy = cfg.train.strategy;
    let pools = load_pools(&args.data, &cfg)?;
    check_pools(strategy, &cfg, &pools, &args.data)?;
    let classes = pools.palette.len();
    let mut rng = RngState::new(cfg.train.seed).split(10);
    let mut model = match strategy {
        Strategy::EnsembleFusion => {
            let bases: Vec<PathBuf> = cfg.model.bases.iter().map(PathBuf::from).collect();
            fuse(&bases, &cfg)?
        }
        Strategy::E2eSparse => {
            // one catch-all channel plus the object classes of the palette
            let objects: Vec<Option<u8>> = pools
                .palette
                .iter()
                .enumerate()
                .filter(|(_, n)| OBJECT_CLASSES.contains(&n.as_str()))
                .map(|(i, _)| Some(i as u8))
                .collect();
            let mut mc = cfg.model.model_config(objects.len() + 1);
            mc.class_alignment = std::iter::once(None).chain(objects).collect();
            build_model(&mc, &mut rng)?
        }
        _ => build_model(&cfg.model.model_config(classes), &mut rng)?,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write(&args.out.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;
    let outcome = run_training(&mut model, &pools, &cfg, &args.out, "model.sdnc")?;
    write_status(&args.out, &outcome)?;
    if outcome.status == RunStatus::Completed && !pools.test.is_empty() && palette_aligned(&model, classes) {
        let m = score(&model, &pools.test)?;
        write(&args.out.join(METRICS_FILE), &metrics_table(strategy.as_str(), &pools.palette, &m))?;
    }
    Ok(outcome.status)
}

/// Checksum of the teacher weights and every image of the transfer set.
fn cache_key(teacher: &Model<f32>, samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for (name, t) in teacher.named_tensors() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(format!("{:?}", teacher.config()).as_bytes());
    for s in samples {
        h.update(s.id.as_bytes());
        h.update(s.domain.as_str().as_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn cmd_distill(args: DistillArgs) -> CmdResult<RunStatus> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.method {
        cfg.distill.method = m.parse::<Method>().map_err(Failure::Usage)?;
    }
    cfg.distill.validate()?;
    let pools = load_pools(&args.data, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write(&args.out.join(EFFECTIVE_CONFIG), &cfg.to_toml())?;

    let teacher = match args.teacher.as_slice() {
        [one] => load_model(one)?,
        bases @ [_, _] => {
            cfg.train.strategy = Strategy::EnsembleFusion;
            cfg.train.validate()?;
            check_pools(Strategy::EnsembleFusion, &cfg, &pools, &args.data)?;
            let mut ensemble = fuse(bases, &cfg)?;
            log::info!("training the fusion head of the assembled ensemble");
            let fused = run_training(&mut ensemble, &pools, &cfg, &args.out, "teacher.sdnc")?;
            if fused.status == RunStatus::Diverged {
                write_status(&args.out, &fused)?;
                return Ok(RunStatus::Diverged);
            }
            ensemble
        }
        other => return Err(Failure::Usage(format!("expected 1 or 2 teacher checkpoints, got {}", other.len()))),
    };
    if !palette_aligned(&teacher, pools.palette.len()) {
        return Err(Failure::Data(format!("teacher does not predict the {} palette classes of the dataset", pools.palette.len())));
    }

    let key = cache_key(&teacher, &pools.all);
    let cache_root = if cfg.data.cache_dir.is_empty() { args.data.join("teacher-cache") } else { PathBuf::from(&cfg.data.cache_dir) };
    let dir = cache_root.join(&key[..16]);
    let cache = if dir.join(CACHE_INDEX).exists() {
        let cache = TeacherCache::load(&dir)?;
        if cache.key() != key {
            return Err(Failure::Data(format!("teacher cache {} belongs to another teacher or dataset", dir.display())));
        }
        log::info!("reusing teacher cache {}", dir.display());
        cache
    } else {
        log::info!("caching teacher predictions in {}", dir.display());
        teacher_predict_cache(&teacher, &pools.all, Some(&dir), &key)?
    };

    let set = TransferSet::from_samples(&pools.all)?;
    let mut student = build_model::<f32>(&cfg.model.model_config(teacher.num_classes()), &mut RngState::new(cfg.distill.seed).split(10))?;
    let result = distill(&mut student, &cache, &set, &cfg.distill)?;
    save_checkpoint(&student, &args.out.join("student.sdnc"))?;
    write(&args.out.join("log.csv"), &result.outcome.log.to_csv())?;
    write_status(&args.out, &result.outcome)?;
    if result.outcome.status == RunStatus::Completed && !pools.test.is_empty() {
        let report = transfer_report(&student, &teacher, &pools.test)?;
        write(&args.out.join("report.csv"), &report.to_csv(&pools.palette))?;
        write(&args.out.join(METRICS_FILE), &metrics_table(cfg.distill.method.as_str(), &pools.palette, &report.student))?;
    }
    Ok(result.outcome.status)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let samples: Vec<Sample> = dataset_read(&args.data)?.into_iter().filter(|s| s.labels.is_some()).collect();
    if samples.is_empty() {
        return Err(Failure::Data(format!("{} has no labeled samples", args.data.display())));
    }
    let palette = read_palette(&args.data)?;
    if !palette_aligned(&model, palette.len()) {
        return Err(Failure::Data(format!(
            "model predicts {} classes, dataset {} has {}",
            model.num_classes(),
            args.data.display(),
            palette.len()
        )));
    }
    let name = args.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write(&args.report, &metrics_table(&name, &palette, &score(&model, &samples)?))
}

struct Run {
    name: String,
    status: String,
    /// Header and value row of the run's metrics table.
    metrics: Option<(Vec<String>, Vec<String>)>,
}

fn read_run(dir: &Path) -> CmdResult<Run> {
    let name = fs::canonicalize(dir)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    let status_path = dir.join(STATUS_FILE);
    let status = fs::read_to_string(&status_path).map_err(|e| Error::Io { path: status_path, source: e })?;
    let status = status.lines().next().unwrap_or("").trim().to_string();
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = match fs::read_to_string(&metrics_path) {
        Ok(text) => {
            let lines: Vec<&str> = text.lines().collect();
            let [header, row, ..] = lines.as_slice() else {
                return Err(Failure::Data(format!("{}: expected a header and one row", metrics_path.display())));
            };
            let cols = |l: &str| l.split(',').skip(1).map(str::to_string).collect::<Vec<_>>();
            Some((cols(header), cols(row)))
        }
        Err(_) => None,
    };
    Ok(Run { name, status, metrics })
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let mut runs = args.runs.iter().map(|d| read_run(d)).collect::<CmdResult<Vec<_>>>()?;
    runs.sort_by(|a, b| a.name.cmp(&b.name));
    let done = |r: &Run| r.status == RunStatus::Completed.as_str() && r.metrics.is_some();
    let Some(first) = runs.iter().find(|r| done(r)) else {
        return Err(Failure::Usage("no completed run with metrics among --runs".into()));
    };
    let header = first.metrics.as_ref().expect("completed").0.clone();
    let baseline = match &args.baseline {
        None => first,
        Some(b) => runs
            .iter()
            .find(|r| &r.name == b && done(r))
            .ok_or_else(|| Failure::Usage(format!("baseline run {b:?} is not among the completed runs")))?,
    };
    let value = |row: &[String], col: &str| -> Option<f64> {
        header.iter().position(|h| h == col).and_then(|i| row.get(i)).and_then(|v| v.parse().ok())
    };
    let base_row = &baseline.metrics.as_ref().expect("completed").1;
    let mut out = format!("run,status,{},delta per-class,delta global\n", header.join(","));
    for r in &runs {
        match (&r.metrics, r.status.as_str()) {
            (Some((h, row)), "completed") => {
                if *h != header {
                    return Err(Failure::Data(format!("run {} reports different columns", r.name)));
                }
                let delta = |col: &str| match (value(row, col), value(base_row, col)) {
                    (Some(a), Some(b)) => format!("{:+.2}", a - b),
                    _ => String::new(),
                };
                out.push_str(&format!("{},completed,{},{},{}\n", r.name, row.join(","), delta("per-class"), delta("global")));
            }
            (_, "diverged") => {
                out.push_str(&format!("{},training diverged{}\n", r.name, ",".repeat(header.len() + 2)));
            }
            _ => out.push_str(&format!("{},{}{}\n", r.name, r.status, ",".repeat(header.len() + 2))),
        }
    }
    write(&args.out, &out)
}

fn set_threads() -> CmdResult {
    let Ok(v) = std::env::var("SEGDISTILL_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Usage(format!("SEGDISTILL_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Other(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = set_threads().and_then(|()| match cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|()| RunStatus::Completed),
        Command::Train(a) => cmd_train(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a).map(|()| RunStatus::Completed),
        Command::Report(a) => cmd_report(a).map(|()| RunStatus::Completed),
    });
    match result {
        Ok(RunStatus::Completed) => ExitCode::SUCCESS,
        Ok(RunStatus::Diverged) => {
            eprintln!("training diverged");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Data(m) => (EXIT_DATA, m),
                Failure::Other(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
