//! `bevkd`: data generation, teacher training, caching, student training,
//! evaluation, ablation sweeps, reports, self-tests and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use bevkd::diffcore::Tensor;
use bevkd::distill::Variant;
use bevkd::experiment::{self, RunConfig};
use bevkd::metrics::AblationReport;
use bevkd::nets::{load_checkpoint, save_checkpoint, BevNet};
use bevkd::synthworld::{parse_manifest, read_cache, write_cache, Dataset};
use bevkd::trainer;

#[derive(Parser)]
#[command(name = "bevkd", version, about = "Camera-only BEV planning with teacher-student distillation")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Student variant: s0, s1, s2 or s3.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Epochs for both teacher and student training.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Dotted `KEY=VALUE` config override, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and eval scene manifests.
    GenData,
    /// Train the teacher; writes its checkpoint and loss history.
    TeacherTrain,
    /// Run the trained teacher over the training scenes and store its outputs.
    Cache,
    /// Train one student variant.
    Train,
    /// Evaluate a trained student (or the teacher) on the held-out scenes.
    Eval {
        #[arg(long)]
        teacher: bool,
    },
    /// Teacher, cache and S0 to S3 on one dataset and seed.
    Ablate,
    /// Recompute relative changes from a results CSV.
    Report { csv: PathBuf },
    /// Gradient, KL, lift/splat, reduction and optimizer oracles.
    Selftest,
    /// Parameter counts and mean forward latency.
    Bench {
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: bevkd::distill::DistillError| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(v) = cli.variant {
        overrides.push(format!("train.variant=\"{}\"", v.to_string().to_lowercase()));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={:?}", o.display().to_string()));
    }
    if let Some(e) = cli.epochs {
        overrides.push(format!("train.optim.epochs={e}"));
        overrides.push(format!("teacher_optim.epochs={e}"));
    }
    Ok(RunConfig::from_toml(&text, &overrides)?)
}

struct Paths {
    dir: PathBuf,
}

impl Paths {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(Self {
            dir: cfg.out_dir.clone(),
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn student(&self, v: Variant) -> PathBuf {
        self.file(&format!("student_{}.ckpt", v.to_string().to_lowercase()))
    }

    fn history(&self, v: Variant) -> PathBuf {
        self.file(&format!("history_{}.csv", v.to_string().to_lowercase()))
    }

    fn epoch_evals(&self, name: &str) -> PathBuf {
        self.file(&format!("epochs_{name}.csv"))
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {}; run `bevkd {produced_by}` first", path.display());
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = parse_manifest(&text).with_context(|| format!("parsing {}", path.display()))?;
    Dataset::from_manifest(&entries, &cfg.world, &cfg.rig()?, &cfg.grid()?)
        .with_context(|| format!("rebuilding scenes from {}", path.display()))
}

/// Training and eval scenes: from manifests when present, else regenerated
/// from the seed.
fn load_datasets(cfg: &RunConfig, paths: &Paths) -> Result<(Dataset, Dataset)> {
    let train_manifest = cfg.train.manifest.clone().unwrap_or_else(|| paths.file("train.manifest"));
    let eval_manifest = paths.file("eval.manifest");
    if train_manifest.exists() && eval_manifest.exists() {
        return Ok((load_manifest(&train_manifest, cfg)?, load_manifest(&eval_manifest, cfg)?));
    }
    if cfg.train.manifest.is_some() {
        require(&train_manifest, "gen-data")?;
    }
    Ok(experiment::datasets(cfg)?)
}

fn load_net(cfg: &RunConfig, teacher: bool, path: &Path) -> Result<BevNet<f32>> {
    let spec = if teacher { &cfg.teacher } else { &cfg.student };
    let mut net = experiment::init_net(cfg, spec)?;
    let params = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    net.load_params(&params)
        .with_context(|| format!("{} does not match the configured network", path.display()))?;
    Ok(net)
}

fn cache_path(cfg: &RunConfig, paths: &Paths) -> PathBuf {
    cfg.train.cache.clone().unwrap_or_else(|| paths.file("teacher.cache"))
}

fn epochs_csv(history: &trainer::TrainHistory) -> String {
    let mut s = String::from("epoch,map,min_ade,l2_at_3s,collision_rate\n");
    for (i, e) in history.epochs.iter().enumerate() {
        s += &format!("{},{:.6},{:.6},{:.6},{:.6}\n", i + 1, e.map, e.min_ade, e.l2_at_3s, e.collision_rate);
    }
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn gen_data(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let (train, eval) = experiment::datasets(cfg)?;
    write(&paths.file("train.manifest"), train.manifest())?;
    write(&paths.file("eval.manifest"), eval.manifest())?;
    write(&paths.file("config.toml"), cfg.to_toml())?;
    println!("wrote {} train and {} eval scenes to {}", train.len(), eval.len(), paths.dir.display());
    Ok(())
}

fn teacher_train(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let (train, eval) = load_datasets(cfg, paths)?;
    let net = experiment::init_net(cfg, &cfg.teacher)?;
    let settings = cfg.eval.settings();
    let (net, history) = trainer::train_teacher(net, &train, &cfg.teacher_optim, cfg.seed, Some((&eval, &settings)))?;
    save_checkpoint(&paths.file("teacher.ckpt"), &net.params)?;
    write(&paths.file("history_teacher.csv"), history.to_csv())?;
    write(&paths.epoch_evals("teacher"), epochs_csv(&history))?;
    if let Some(e) = history.epochs.last() {
        println!("teacher: {e:?}");
    }
    Ok(())
}

fn cache(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let ckpt = paths.file("teacher.ckpt");
    require(&ckpt, "teacher-train")?;
    let teacher = load_net(cfg, true, &ckpt)?;
    let (train, _) = load_datasets(cfg, paths)?;
    let c = trainer::build_cache(&teacher, &train, cfg.cache.threshold, cfg.cache.max_agents, cfg.eval.batch_size)?;
    let out = cache_path(cfg, paths);
    write_cache(&out, &c)?;
    println!("cached {} samples to {}", c.samples.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let variant = cfg.train.variant;
    let teacher_cache = if variant.uses_teacher() {
        let p = cache_path(cfg, paths);
        require(&p, "cache")?;
        Some(read_cache(&p).with_context(|| format!("reading {}", p.display()))?)
    } else {
        None
    };
    let (train, eval) = load_datasets(cfg, paths)?;
    let settings = cfg.eval.settings();
    let net = experiment::init_net(cfg, &cfg.student)?;
    let vc = cfg.variant_config(variant);
    let (net, history) = trainer::train_variant(&vc, net, &train, teacher_cache.as_ref(), Some((&eval, &settings)))?;
    save_checkpoint(&paths.student(variant), &net.params)?;
    write(&paths.history(variant), history.to_csv())?;
    write(&paths.epoch_evals(&variant.to_string().to_lowercase()), epochs_csv(&history))?;
    if let Some(e) = history.epochs.last() {
        println!("{variant}: {e:?}");
    }
    Ok(())
}

fn eval(cfg: &RunConfig, paths: &Paths, teacher: bool) -> Result<()> {
    let (name, ckpt, producer) = if teacher {
        ("teacher".to_string(), paths.file("teacher.ckpt"), "teacher-train")
    } else {
        let v = cfg.train.variant;
        (v.to_string(), paths.student(v), "train")
    };
    require(&ckpt, producer)?;
    let net = load_net(cfg, teacher, &ckpt)?;
    let (_, eval) = load_datasets(cfg, paths)?;
    let result = trainer::evaluate(&net, &eval, &cfg.eval.settings())?;
    let csv = AblationReport::new(vec![(name.clone(), result)]).to_csv();
    write(&paths.file(&format!("eval_{}.csv", name.to_lowercase())), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let start = Instant::now();
    let run = experiment::run_ablation(cfg, |msg| eprintln!("[{:>6.1}s] {msg}", start.elapsed().as_secs_f64()))?;
    let (train, eval) = experiment::datasets(cfg)?;
    let mut artifacts: Vec<(PathBuf, Vec<u8>)> = vec![
        (paths.file("train.manifest"), train.manifest().into_bytes()),
        (paths.file("eval.manifest"), eval.manifest().into_bytes()),
        (paths.file("teacher.ckpt"), bevkd::nets::encode_checkpoint(&run.teacher.net.params)),
        (paths.file("teacher.cache"), run.teacher.cache.encode()),
        (paths.file("history_teacher.csv"), run.teacher.history.to_csv().into_bytes()),
    ];
    for v in &run.variants {
        artifacts.push((paths.student(v.variant), bevkd::nets::encode_checkpoint(&v.net.params)));
        artifacts.push((paths.history(v.variant), v.history.to_csv().into_bytes()));
    }
    let csv = run.report.to_csv();
    artifacts.push((paths.file("ablation.csv"), csv.clone().into_bytes()));
    let teacher_csv = AblationReport::new(vec![("teacher".into(), run.teacher.eval)]).to_csv();
    artifacts.push((paths.file("eval_teacher.csv"), teacher_csv.into_bytes()));

    let mut hashes = String::new();
    for (path, bytes) in &artifacts {
        write(path, bytes)?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        hashes += &format!("{}  {name}\n", sha256_hex(bytes));
    }
    write(&paths.file("sha256.txt"), &hashes)?;
    write(&paths.file("config.toml"), cfg.to_toml())?;
    print!("{csv}");
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn report(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = AblationReport::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", parsed.to_csv());
    Ok(())
}

fn selftest() -> bool {
    let checks = bevkd::selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    failed == 0
}

fn mean_latency_ms(net: &BevNet<f32>, images: &Tensor<f32>, runs: usize) -> Result<f64> {
    net.forward(images)?;
    let start = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(net.forward(images)?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / runs as f64)
}

fn bench(cfg: &RunConfig, runs: usize) -> Result<()> {
    if runs == 0 {
        bail!("--runs must be positive");
    }
    let student = experiment::init_net(cfg, &cfg.student)?;
    let teacher = experiment::init_net(cfg, &cfg.teacher)?;
    let rig = cfg.rig()?;
    let data = Dataset::generate(cfg.seed, trainer::streams::EVAL_DATA, 1, &cfg.world, &rig, &cfg.grid()?)?;
    let images = data.batch_images(&[0]);
    let (ps, pt) = (student.count_params(), teacher.count_params());
    let ls = mean_latency_ms(&student, &images, runs)?;
    let lt = mean_latency_ms(&teacher, &images, runs)?;
    println!("student_params={ps}");
    println!("teacher_params={pt}");
    println!("param_ratio={:.4}", ps as f64 / pt as f64);
    println!("student_latency_ms={ls:.3}");
    println!("teacher_latency_ms={lt:.3}");
    println!("runs={runs}");
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Report { csv } => report(csv)?,
        Command::Selftest => return Ok(selftest()),
        Command::Bench { runs } => bench(&cfg, *runs)?,
        cmd => {
            let paths = Paths::new(&cfg)?;
            match cmd {
                Command::GenData => gen_data(&cfg, &paths)?,
                Command::TeacherTrain => teacher_train(&cfg, &paths)?,
                Command::Cache => cache(&cfg, &paths)?,
                Command::Train => train(&cfg, &paths)?,
                Command::Eval { teacher } => eval(&cfg, &paths, *teacher)?,
                Command::Ablate => ablate(&cfg, &paths)?,
                Command::Report { .. } | Command::Selftest | Command::Bench { .. } => unreachable!(),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // typed errors often embed their source in their own message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg += ": ";
                    }
                    msg += &cause;
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
