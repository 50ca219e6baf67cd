//! The `biqt` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod config;
mod export;

pub use config::{EvalConfig, ExportConfig, ExportFormat, GenConfig, GradcheckConfig, RunConfig, SrConfig, TrainCmdConfig};
pub use export::{export_slice, slice};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{
    audit_positive_definite, block_mean_downsample, generate_phantom, load_volume, provenance_path, save_volume, Volume,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, region_masks, to_jsonl};
use crate::gradsuite::run_gradient_suite;
use crate::hash::sha256_hex;
use crate::infer::{ensemble_combine, mc_predict, scalar_map_propagate, McOptions, PredictiveResult, ScalarMap};
use crate::model::checkpoint;
use crate::model::Variant;
use crate::par::Parallelism;
use crate::trainer::{sample_training_set, train, train_ensemble, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::NotVariational(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Undefined(_) => EXIT_NUMERIC,
        Error::Shape { .. }
        | Error::TooSmall { .. }
        | Error::NotEnoughPatches { .. }
        | Error::EmptyRegion(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "biqt", version, about = "Bayesian image quality transfer for 3D multi-channel volumes")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads. 1 runs serially and is bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom volumes.
    Gen(GenArgs),
    /// Train one model on HR volumes.
    Train(TrainArgs),
    /// Train an ensemble on independently drawn patch sets.
    TrainEnsemble(TrainArgs),
    /// Super-resolve an LR volume, optionally with Monte Carlo uncertainty.
    Sr(SrArgs),
    /// Compare a reconstruction with ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// HR grid size D H W.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Build generic channels instead of 6-channel tensors.
    #[arg(long)]
    pub no_tensor: bool,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write block-mean LR volumes for this factor.
    #[arg(long)]
    pub r: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// HR training volume (repeatable).
    #[arg(long = "volume")]
    pub volumes: Vec<PathBuf>,
    /// Checkpoint path, or output directory for `train-ensemble`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patches_per_volume: Option<usize>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    /// Checkpoint (repeat to fuse an ensemble).
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Monte Carlo sample count.
    #[arg(long)]
    pub mc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub variance_output: Option<PathBuf>,
    /// Propagate uncertainty to MD or FA.
    #[arg(long)]
    pub map: Option<ScalarMap>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub variance: Option<PathBuf>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub per_channel: bool,
    /// Write slice images of prediction, truth, error (and variance) here.
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub export_format: Option<ExportFormat>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

fn config_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", p.display())))
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn require(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| config_err(format!("missing {what}")))
}

fn check_input(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(config_err(format!("input {} does not exist", p.display())));
    }
    Ok(())
}

fn check_output(p: &Path) -> Result<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(config_err(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn config_hash<T: Serialize>(section: &T) -> String {
    sha256_hex(&serde_json::to_vec(section).expect("serializable"))
}

fn provenance(command: &str, hash: &str, seeds: Value, extra: Value) -> Value {
    let mut p = json!({
        "tool": "biqt",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": hash,
        "seeds": seeds,
    });
    if let (Some(map), Value::Object(extra)) = (p.as_object_mut(), extra) {
        map.extend(extra);
    }
    p
}

fn file_sha(p: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(p)?))
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Parses the command line and runs it; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let par = Parallelism::from_threads(cli.threads);
    match cli.command {
        Command::Gen(a) => {
            let g = &mut cfg.gen;
            set(&mut g.out_dir, a.out_dir.map(Some));
            set(&mut g.count, a.count);
            set(&mut g.phantom.seed, a.seed);
            if let Some(d) = a.dims {
                g.phantom.dims = [d[0], d[1], d[2]];
            }
            set(&mut g.phantom.c, a.channels);
            set(&mut g.phantom.noise_amplitude, a.noise);
            if a.no_tensor {
                g.phantom.tensor_mode = false;
            }
            set(&mut g.r, a.r.map(Some));
            cmd_gen(&cfg.gen)
        }
        Command::Train(a) => {
            apply_train_args(&mut cfg.train, a, par);
            cmd_train(&cfg.train)
        }
        Command::TrainEnsemble(a) => {
            apply_train_args(&mut cfg.train, a, par);
            cmd_train_ensemble(&cfg.train)
        }
        Command::Sr(a) => {
            let s = &mut cfg.sr;
            if !a.checkpoints.is_empty() {
                s.checkpoints = a.checkpoints;
            }
            set(&mut s.input, a.input.map(Some));
            set(&mut s.output, a.output.map(Some));
            set(&mut s.mc, a.mc.map(Some));
            set(&mut s.seed, a.seed);
            set(&mut s.tile, a.tile);
            set(&mut s.variance_output, a.variance_output.map(Some));
            set(&mut s.map, a.map.map(Some));
            cmd_sr(&cfg.sr, par)
        }
        Command::Eval(a) => {
            let e = &mut cfg.eval;
            set(&mut e.prediction, a.prediction.map(Some));
            set(&mut e.truth, a.truth.map(Some));
            set(&mut e.variance, a.variance.map(Some));
            set(&mut e.margin, a.margin.map(Some));
            set(&mut e.r, a.r);
            set(&mut e.output, a.output.map(Some));
            e.per_channel |= a.per_channel;
            if a.export_dir.is_some() || a.export_format.is_some() {
                let mut x = e.export.clone().unwrap_or_default();
                set(&mut x.dir, a.export_dir);
                set(&mut x.format, a.export_format);
                e.export = Some(x);
            }
            cmd_eval(&cfg.eval)
        }
        Command::Gradcheck(a) => {
            set(&mut cfg.gradcheck.seed, a.seed);
            cmd_gradcheck(&cfg.gradcheck)
        }
    }
}

fn apply_train_args(t: &mut TrainCmdConfig, a: TrainArgs, par: Parallelism) {
    if !a.volumes.is_empty() {
        t.volumes = a.volumes;
    }
    set(&mut t.out, a.out.map(Some));
    set(&mut t.log, a.log.map(Some));
    let o = &mut t.options;
    set(&mut o.variant, a.variant);
    set(&mut o.r, a.r);
    set(&mut o.epochs, a.epochs);
    set(&mut o.batch_size, a.batch_size);
    set(&mut o.lr, a.lr);
    set(&mut o.seed, a.seed);
    set(&mut o.patches_per_volume, a.patches_per_volume);
    set(&mut o.ensemble_size, a.ensemble_size);
    o.parallelism = par;
}

/// Writes phantoms (and LR versions) plus `manifest.json`; prints the
/// manifest.
pub fn cmd_gen(g: &GenConfig) -> Result<()> {
    let dir = require(&g.out_dir, "gen.out_dir")?;
    g.phantom.validate().map_err(|e| config_err(e.to_string()))?;
    if g.count == 0 {
        return Err(config_err("gen.count must be at least 1"));
    }
    if let Some(r) = g.r {
        if r == 0 || g.phantom.dims.iter().any(|d| d % r != 0) {
            return Err(config_err(format!("dims {:?} are not divisible by r = {r}", g.phantom.dims)));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    let hash = config_hash(g);
    let mut files = Vec::new();
    for k in 0..g.count {
        let spec = crate::data::PhantomSpec {
            seed: g.phantom.seed + k as u64,
            ..g.phantom.clone()
        };
        let vol = generate_phantom(&spec)?;
        if spec.tensor_mode {
            let bad = audit_positive_definite(&vol)?;
            if bad > 0 {
                return Err(Error::NonFinite {
                    context: format!("positive-definiteness audit: {bad} masked voxels failed"),
                    index: 0,
                });
            }
        }
        let name = format!("phantom_{k:03}.vxl");
        let path = dir.join(&name);
        let prov = provenance("gen", &hash, json!([spec.seed]), json!({"role": "hr", "phantom": spec, "r": g.r}));
        let sha = save_volume(&path, &vol, Some(&prov))?;
        files.push(json!({"path": name, "role": "hr", "seed": spec.seed, "sha256": sha}));
        if let Some(r) = g.r {
            let lr = block_mean_downsample(&vol, r)?;
            let name = format!("phantom_{k:03}_lr.vxl");
            let prov = provenance("gen", &hash, json!([spec.seed]), json!({"role": "lr", "r": r, "source": files.last().unwrap()["sha256"]}));
            let sha = save_volume(dir.join(&name), &lr, Some(&prov))?;
            files.push(json!({"path": name, "role": "lr", "seed": spec.seed, "r": r, "sha256": sha}));
        }
    }
    let manifest = json!({
        "tool": "biqt",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "files": files,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    emit(&(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Option<Value> {
    let text = fs::read_to_string(provenance_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

fn load_training_volumes(t: &TrainCmdConfig) -> Result<(Vec<Volume>, Vec<String>)> {
    if t.volumes.is_empty() {
        return Err(config_err("train.volumes is empty"));
    }
    t.volumes.iter().try_for_each(|p| check_input(p))?;
    let r = t.options.r;
    let mut vols = Vec::new();
    let mut shas = Vec::new();
    for p in &t.volumes {
        if let Some(side) = read_sidecar(p) {
            if side["role"] == "lr" {
                return Err(config_err(format!("{} is an LR volume; training needs HR volumes", p.display())));
            }
            if let Some(dr) = side["r"].as_u64() {
                if dr as usize != r {
                    return Err(config_err(format!(
                        "{} was generated for r = {dr}, config asks for r = {r}",
                        p.display()
                    )));
                }
            }
        }
        let v = load_volume(p)?;
        if v.dims().iter().any(|d| d % r != 0) {
            return Err(config_err(format!("{} has dims {:?}, not divisible by r = {r}", p.display(), v.dims())));
        }
        if v.mask().is_none() {
            return Err(Error::Format(format!("{} has no foreground mask", p.display())));
        }
        shas.push(file_sha(p)?);
        vols.push(v);
    }
    Ok((vols, shas))
}

fn checkpoint_manifest(t: &TrainCmdConfig, out: &TrainOutcome, shas: &[String], seed: u64) -> Value {
    json!({
        "tool": "biqt",
        "version": env!("CARGO_PKG_VERSION"),
        "variant": t.options.variant.as_str(),
        "config_hash": config_hash(t),
        "train": &t.options,
        "seed": seed,
        "volumes": shas,
        "best_epoch": out.best_epoch,
        "best_valid": out.best_valid,
        "epochs_run": out.log.len(),
        "n_train": out.n_train,
        "n_valid": out.n_valid,
        "diverged": out.diverged,
    })
}

fn write_log(path: &Path, out: &TrainOutcome, manifest: &Value) -> Result<()> {
    let mut text = serde_json::to_string(&json!({"provenance": manifest}))? + "\n";
    text.push_str(&out.log_jsonl());
    fs::write(path, text)?;
    Ok(())
}

fn report_divergence(out: &TrainOutcome) -> Result<()> {
    match &out.diverged {
        Some(reason) => Err(Error::Diverged {
            epoch: out.log.len(),
            reason: format!("{reason}; last good checkpoint was written"),
        }),
        None => Ok(()),
    }
}

pub fn cmd_train(t: &TrainCmdConfig) -> Result<()> {
    t.options.validate()?;
    let out_path = require(&t.out, "train.out")?;
    check_output(&out_path)?;
    if let Some(l) = &t.log {
        check_output(l)?;
    }
    let (vols, shas) = load_training_volumes(t)?;
    let pairs = sample_training_set(&t.options, &vols, t.options.seed)?;
    let out = train(&t.options, &pairs)?;
    let manifest = checkpoint_manifest(t, &out, &shas, t.options.seed);
    let sum = checkpoint::save(&out_path, &out.params, &manifest)?;
    if let Some(l) = &t.log {
        write_log(l, &out, &manifest)?;
    }
    emit(&format!(
        "{}\n",
        json!({"checkpoint": out_path, "sha256": sum, "best_epoch": out.best_epoch, "best_valid": out.best_valid})
    ))?;
    report_divergence(&out)
}

pub fn cmd_train_ensemble(t: &TrainCmdConfig) -> Result<()> {
    t.options.validate()?;
    let dir = require(&t.out, "train.out (ensemble directory)")?;
    let (vols, shas) = load_training_volumes(t)?;
    fs::create_dir_all(&dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    let members = train_ensemble(&t.options, &vols)?;
    let mut listing = Vec::new();
    for (k, out) in members.iter().enumerate() {
        let seed = crate::trainer::member_seed(t.options.seed, k);
        let manifest = checkpoint_manifest(t, out, &shas, seed);
        let path = dir.join(format!("member_{k:03}.ckpt"));
        let sum = checkpoint::save(&path, &out.params, &manifest)?;
        write_log(&dir.join(format!("member_{k:03}.log.jsonl")), out, &manifest)?;
        listing.push(json!({"checkpoint": path, "sha256": sum, "seed": seed, "best_valid": out.best_valid}));
    }
    emit(&(serde_json::to_string_pretty(&json!({"members": listing}))? + "\n"))?;
    members.iter().try_for_each(report_divergence)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.vxl"))
}

pub fn cmd_sr(s: &SrConfig, par: Parallelism) -> Result<()> {
    if s.checkpoints.is_empty() {
        return Err(config_err("sr.checkpoints is empty"));
    }
    let input = require(&s.input, "sr.input")?;
    let output = require(&s.output, "sr.output")?;
    s.checkpoints.iter().try_for_each(|p| check_input(p))?;
    check_input(&input)?;
    check_output(&output)?;
    if s.mc == Some(0) {
        return Err(config_err("--mc needs at least one sample"));
    }
    let models = s
        .checkpoints
        .iter()
        .map(checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    for m in &models {
        if !m.params.arch.variant.is_variational() && s.mc.is_some_and(|t| t > 1) {
            return Err(config_err(format!(
                "--mc {} needs a variational variant; {} is deterministic (use --mc 1)",
                s.mc.unwrap(),
                m.params.arch.variant
            )));
        }
    }
    if s.map.is_some() && s.mc.is_none() {
        return Err(config_err("--map needs --mc"));
    }
    let lr = load_volume(&input)?;
    let opts = McOptions {
        tile: s.tile,
        parallelism: par,
        baseline_sigma2: None,
    };
    let samples = s.mc.unwrap_or(1);
    let results = models
        .iter()
        .map(|m| {
            let t = if m.params.arch.variant.is_variational() { samples } else { 1 };
            mc_predict(&m.params, &lr, t, s.seed, opts)
        })
        .collect::<Result<Vec<PredictiveResult>>>()?;
    let fused = if results.len() == 1 {
        results.into_iter().next().unwrap()
    } else {
        ensemble_combine(&results)?
    };
    let hash = config_hash(s);
    let prov = provenance(
        "sr",
        &hash,
        json!([s.seed]),
        json!({
            "input_sha256": file_sha(&input)?,
            "model_checksums": fused.provenance.model_checksums,
            "variant": fused.provenance.variant,
            "samples": fused.provenance.samples,
            "clamped": fused.provenance.clamped,
        }),
    );
    save_volume(&output, &fused.mean, Some(&prov))?;
    let wants_var = s.mc.is_some() || models.len() > 1 || models.iter().any(|m| m.params.arch.variant.is_hetero());
    if wants_var || s.variance_output.is_some() {
        let vpath = s.variance_output.clone().unwrap_or_else(|| sibling(&output, "var"));
        save_volume(&vpath, &fused.variance, Some(&prov))?;
    }
    if let Some(map) = s.map {
        if models.len() != 1 {
            return Err(config_err("--map supports a single checkpoint"));
        }
        let (mean, var) = scalar_map_propagate(&models[0].params, &lr, samples, s.seed, map, opts)?;
        let tag = match map {
            ScalarMap::Md => "md",
            ScalarMap::Fa => "fa",
        };
        save_volume(sibling(&output, &format!("{tag}.mean")), &mean, Some(&prov))?;
        save_volume(sibling(&output, &format!("{tag}.var")), &var, Some(&prov))?;
    }
    Ok(())
}

pub fn cmd_eval(e: &EvalConfig) -> Result<()> {
    let pred_path = require(&e.prediction, "eval.prediction")?;
    let truth_path = require(&e.truth, "eval.truth")?;
    check_input(&pred_path)?;
    check_input(&truth_path)?;
    if let Some(v) = &e.variance {
        check_input(v)?;
    }
    if let Some(o) = &e.output {
        check_output(o)?;
    }
    let pred = load_volume(&pred_path)?;
    let truth = load_volume(&truth_path)?;
    pred.same_grid(&truth, "eval")?;
    let mask = truth
        .mask()
        .ok_or_else(|| Error::Format(format!("{} has no foreground mask", truth_path.display())))?;
    let margin = e.margin.unwrap_or(2 * e.r);
    let regions = region_masks(mask, truth.dims(), margin)?;
    let variance = e.variance.as_ref().map(load_volume).transpose()?;
    let records = evaluate(&pred, &truth, &regions, variance.as_ref(), e.per_channel)?;
    let text = to_jsonl(&records);
    match &e.output {
        Some(o) => {
            fs::write(o, &text)?;
            let prov = provenance(
                "eval",
                &config_hash(e),
                json!([]),
                json!({"prediction_sha256": file_sha(&pred_path)?, "truth_sha256": file_sha(&truth_path)?, "margin": margin}),
            );
            write_json(&provenance_path(o), &prov)?;
        }
        None => emit(&text)?,
    }
    if let Some(x) = &e.export {
        fs::create_dir_all(&x.dir).map_err(|err| config_err(format!("cannot create {}: {err}", x.dir.display())))?;
        let err = crate::eval::squared_error(&pred, &truth)?;
        let abs = Volume::new(
            err.channels(),
            err.dims(),
            err.data().iter().map(|v| v.sqrt()).collect(),
            None,
        )?;
        let mut items = vec![("prediction", &pred), ("truth", &truth), ("abs_error", &abs)];
        if let Some(v) = &variance {
            items.push(("variance", v));
        }
        let note = format!("biqt {} eval config {}", env!("CARGO_PKG_VERSION"), config_hash(e));
        for (name, vol) in items {
            export_slice(vol, x, &x.dir.join(name), &note)?;
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(g: &GradcheckConfig) -> Result<()> {
    let report = run_gradient_suite(g.seed)?;
    for e in &report.entries {
        let worst = e
            .report
            .tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
        emit(&format!(
            "{}\n",
            json!({
                "check": e.name,
                "passed": e.passed(),
                "tol": e.report.tol,
                "max_rel_err": e.report.max_error(),
                "worst_tensor": worst.map(|t| t.name.clone()),
                "failures": e.report.failures(),
            })
        ))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "gradient suite failed".into(),
            index: 0,
        })
    }
}
