//! Command-line front end: `score`, `train`, `patches`, `info` and `eval`.
//!
//! Exit codes: 0 on success, 2 for I/O, parse and validation failures, 3 for
//! weight files that are corrupt or do not match the config.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{csv_err, read_pairs_csv, scatter_csv, CvReport, EvalReport};
use crate::network::{forward, param_count, param_table, Mode, ModelConfig, ModelWeights, PredictionBundle};
use crate::patching::extract_patches;
use crate::pointcloud::{load_ply, normalize, LabeledSample};
use crate::training::{fit_patches, make_splits, predict, prepare_patches, LossConfig, ScheduleConfig, SplitScheme};

pub const EXIT_IO: i32 = 2;
pub const EXIT_WEIGHTS: i32 = 3;

/// Everything a run needs besides data; every field has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_text(path.as_ref())?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// A training run description. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub config_path: Option<PathBuf>,
    pub dataset_root: PathBuf,
    /// CSV with columns `path,mos,content_id,distortion_tag`.
    pub label_file: PathBuf,
    #[serde(default = "default_split")]
    pub split: SplitScheme,
    /// JSON file holding a fixed split; overrides `split` when set.
    #[serde(default)]
    pub split_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many epochs; 0 disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_split() -> SplitScheme {
    SplitScheme::LeaveOneContentOut
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.dataset_root);
        fix(&mut m.label_file);
        fix(&mut m.output_dir);
        m.config_path.as_mut().map(fix);
        m.split_file.as_mut().map(fix);
        Ok(m)
    }

    /// Every referenced input path must exist.
    pub fn validate(&self) -> Result<()> {
        let inputs = [Some(&self.dataset_root), Some(&self.label_file), self.config_path.as_ref(), self.split_file.as_ref()];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", p.display()),
                )));
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<SplitScheme> {
        match &self.split_file {
            None => Ok(self.split.clone()),
            Some(p) => {
                let text = read_text(p)?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Reads a label CSV and loads every referenced PLY under `root`.
pub fn read_labels(label_file: &Path, root: &Path) -> Result<Vec<LabeledSample>> {
    #[derive(Deserialize)]
    struct Row {
        path: PathBuf,
        mos: f64,
        content_id: String,
        distortion_tag: String,
    }
    let mut r = csv::Reader::from_path(label_file).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(csv_err)?;
        let cloud = load_ply(root.join(&row.path))?;
        out.push(LabeledSample::new(cloud, row.mos, row.content_id, row.distortion_tag)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!("{} lists no samples", label_file.display())));
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "pcqa", about = "No-reference point cloud quality assessment")]
struct Cli {
    /// JSON run config with optional `model`, `loss` and `schedule` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config or manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Score one PLY file with trained weights.
    Score { weights: PathBuf, ply: PathBuf },
    /// Train from a run manifest.
    Train { manifest: PathBuf },
    /// Extract and save the patch set of one PLY file.
    Patches { ply: PathBuf },
    /// Print the parameter table.
    Info,
    /// Recompute metrics from a `predicted,ground_truth` CSV.
    Eval { pairs: PathBuf },
}

/// A failure with its exit code.
struct Failure(i32, Error);

trait Code<T> {
    fn code(self, code: i32) -> std::result::Result<T, Failure>;
}

impl<T> Code<T> for Result<T> {
    fn code(self, code: i32) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure(code, e))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_IO } else { 0 };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(Failure(code, e)) => {
            let _ = writeln!(err, "error: {e}");
            code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), Failure> {
    match &cli.cmd {
        Cmd::Score { weights, ply } => cmd_score(cli, weights, ply, out),
        Cmd::Train { manifest } => cmd_train(cli, manifest, out, err),
        Cmd::Patches { ply } => cmd_patches(cli, ply, out),
        Cmd::Info => cmd_info(cli, out),
        Cmd::Eval { pairs } => cmd_eval(cli, pairs, out),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn io<T>(r: std::io::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure(EXIT_IO, Error::Io(e)))
}

#[derive(Serialize)]
struct ScoreJson<'a> {
    seed: u64,
    #[serde(flatten)]
    bundle: &'a PredictionBundle,
}

fn cmd_score(cli: &Cli, weights: &Path, ply: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref(), cli.seed).code(EXIT_IO)?;
    let w = ModelWeights::load_for(weights, &cfg.model).map_err(|e| match e {
        Error::Io(_) => Failure(EXIT_IO, e),
        e => Failure(EXIT_WEIGHTS, e),
    })?;
    let cloud = load_ply(ply).code(EXIT_IO)?;
    let ps = extract_patches(&normalize(&cloud), &cfg.model.patch_config()).code(EXIT_IO)?;
    let bundle = forward(&ps, &cfg.model, &w, Mode::Eval).code(EXIT_IO)?;
    if cli.json {
        let j = serde_json::to_string(&ScoreJson {
            seed: cfg.model.seed,
            bundle: &bundle,
        })
        .map_err(|e| Failure(EXIT_IO, Error::Format(e.to_string())))?;
        io(writeln!(out, "{j}"))?;
    } else {
        io(writeln!(out, "score: {}", bundle.global_score))?;
        for (i, (w, s)) in bundle.patch_weights.iter().zip(&bundle.patch_scores).enumerate() {
            io(writeln!(out, "patch {i} weight {w} score {s}"))?;
        }
    }
    Ok(())
}

fn cmd_patches(cli: &Cli, ply: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref(), cli.seed).code(EXIT_IO)?;
    let target = cli
        .out
        .clone()
        .ok_or_else(|| Failure(EXIT_IO, Error::InvalidConfig("patches needs --out".into())))?;
    let cloud = load_ply(ply).code(EXIT_IO)?;
    let ps = extract_patches(&normalize(&cloud), &cfg.model.patch_config()).code(EXIT_IO)?;
    ps.save(&target).code(EXIT_IO)?;
    io(writeln!(
        out,
        "wrote {} (K={} Np={} seed={})",
        target.display(),
        ps.k(),
        ps.np(),
        cfg.model.seed
    ))
}

#[derive(Serialize)]
struct InfoJson {
    layers: Vec<(String, usize)>,
    total: usize,
}

fn cmd_info(cli: &Cli, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref(), cli.seed).code(EXIT_IO)?;
    let layers = param_table(&cfg.model);
    let total = param_count(&cfg.model);
    if cli.json {
        let j = serde_json::to_string(&InfoJson { layers, total })
            .map_err(|e| Failure(EXIT_IO, Error::Format(e.to_string())))?;
        return io(writeln!(out, "{j}"));
    }
    let width = layers.iter().map(|l| l.0.len()).max().unwrap_or(0);
    for (name, n) in &layers {
        io(writeln!(out, "{name:<width$}  {n:>9}"))?;
    }
    io(writeln!(out, "{:<width$}  {total:>9}", "total"))
}

fn cmd_eval(cli: &Cli, pairs: &Path, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let pairs = read_pairs_csv(pairs).code(EXIT_IO)?;
    let report = EvalReport::from_pairs(pairs).code(EXIT_IO)?;
    if cli.json {
        let j = serde_json::to_string(&report).map_err(|e| Failure(EXIT_IO, Error::Format(e.to_string())))?;
        io(writeln!(out, "{j}"))
    } else {
        io(write!(out, "{}", report.to_kv()))
    }
}

fn cmd_train(cli: &Cli, manifest: &Path, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<(), Failure> {
    let m = RunManifest::load(manifest).code(EXIT_IO)?;
    m.validate().code(EXIT_IO)?;
    let config_path = cli.config.clone().or(m.config_path.clone());
    let seed = cli.seed.or(m.seed);
    let cfg = load_config(config_path.as_deref(), seed).code(EXIT_IO)?;
    let seed = cfg.model.seed;
    let out_dir = cli.out.clone().unwrap_or(m.output_dir.clone());
    let samples = read_labels(&m.label_file, &m.dataset_root).code(EXIT_IO)?;
    let plans = make_splits(&samples, &m.scheme().code(EXIT_IO)?).code(EXIT_IO)?;

    io(fs::create_dir_all(&out_dir))?;
    let run_json = serde_json::json!({ "seed": seed, "config": cfg, "folds": plans.len() });
    io(fs::write(out_dir.join("run.json"), format!("{run_json:#}\n")))?;
    let sets = prepare_patches(&samples, &cfg.model, Some(&out_dir.join("cache"))).code(EXIT_IO)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();

    let mut fold_pairs = Vec::new();
    for plan in &plans {
        let dir = out_dir.join(format!("fold{}", plan.fold_index));
        let result = (|| -> Result<Vec<(f64, f64)>> {
            fs::create_dir_all(&dir)?;
            let mut log = fs::File::create(dir.join("log.txt"))?;
            writeln!(log, "seed={seed}")?;
            let fit = fit_patches(
                &sets,
                &labels,
                &plan.train,
                &cfg.model,
                &cfg.loss,
                &cfg.schedule,
                seed,
                |rec, w| {
                    writeln!(log, "{rec}")?;
                    if m.checkpoint_every > 0 && (rec.epoch + 1) % m.checkpoint_every == 0 {
                        w.save(dir.join(format!("checkpoint_{:04}.pstw", rec.epoch + 1)))?;
                    }
                    Ok(())
                },
            )?;
            if fit.log.diverged {
                writeln!(log, "diverged: non-finite loss")?;
            }
            fit.weights.save(dir.join("weights.pstw"))?;
            let scaler = serde_json::json!({ "seed": seed, "min": fit.scaler.min, "max": fit.scaler.max });
            fs::write(dir.join("scaler.json"), format!("{scaler:#}\n"))?;
            let test_sets: Vec<_> = plan.test.iter().map(|&i| sets[i].clone()).collect();
            let pred = predict(&test_sets, &cfg.model, &fit.weights, &fit.scaler)?;
            let pairs: Vec<(f64, f64)> = pred.into_iter().zip(plan.test.iter().map(|&i| labels[i])).collect();
            let report = EvalReport::from_pairs(pairs.clone());
            let mut text = format!("seed={seed}\nfold={}\n", plan.fold_index);
            match &report {
                Ok(r) => {
                    let r = r.clone().with_scaler(fit.scaler);
                    text.push_str(&r.to_kv());
                    scatter_csv(&r, dir.join("scatter.csv"))?;
                }
                Err(e) => text.push_str(&format!("error={e}\n")),
            }
            fs::write(dir.join("report.txt"), text)?;
            Ok(pairs)
        })();
        match result {
            Ok(pairs) => {
                let _ = writeln!(out, "fold {} done: {} test samples", plan.fold_index, pairs.len());
                fold_pairs.push((plan.fold_index, pairs));
            }
            Err(e) => {
                let _ = writeln!(err, "fold {} failed: {e}", plan.fold_index);
            }
        }
    }
    if fold_pairs.is_empty() {
        return Err(Failure(EXIT_IO, Error::InvalidConfig("every fold failed".into())));
    }
    match CvReport::new(&fold_pairs) {
        Ok(cv) => {
            let text = format!("seed={seed}\n{}", cv.to_kv());
            io(fs::write(out_dir.join("report.txt"), &text))?;
            io(write!(out, "{text}"))
        }
        Err(e) => {
            let text = format!("seed={seed}\nerror={e}\n");
            io(fs::write(out_dir.join("report.txt"), &text))?;
            io(write!(out, "{text}"))
        }
    }
}
