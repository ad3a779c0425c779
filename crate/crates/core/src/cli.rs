//! Command-line front end: a flat `key = value` config file mirrored 1:1 by
//! `--key value` flags (flags win), five subcommands, and JSON/CSV outputs under
//! one output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, SuiteSummary};
use crate::datagen::{self, Encounter, ShiftSpec, SynthConfig};
use crate::engine::{self, EngineConfig, EpochLog, Evaluation, Method, Mode, RunSummary};
use crate::experiment;
use crate::metrics::MetricsReport;
use crate::persist::ModelFile;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ADATTT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "adattt-out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("bound violation: {0}")]
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Violation(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cmd {
    Synth,
    Pretrain,
    Adapt,
    Bounds,
    Sweep,
}

impl Cmd {
    const ALL: [Cmd; 5] = [Cmd::Synth, Cmd::Pretrain, Cmd::Adapt, Cmd::Bounds, Cmd::Sweep];

    fn name(self) -> &'static str {
        match self {
            Cmd::Synth => "synth",
            Cmd::Pretrain => "pretrain",
            Cmd::Adapt => "adapt",
            Cmd::Bounds => "bounds",
            Cmd::Sweep => "sweep",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Cmd::Synth => "Generate a synthetic source/target pair with a manifest",
            Cmd::Pretrain => "Pretrain on a source CSV and write a model file",
            Cmd::Adapt => "Score a target CSV with or without test-time adaptation",
            Cmd::Bounds => "Check the information-theoretic error bounds on random joints",
            Cmd::Sweep => "Hyperparameter sensitivity grids (pretrain + adapt per cell)",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

const SY: u8 = 1;
const PR: u8 = 2;
const AD: u8 = 4;
const BO: u8 = 8;
const SW: u8 = 16;
const ALL: u8 = SY | PR | AD | BO | SW;

struct Key {
    name: &'static str,
    cmds: u8,
    help: &'static str,
}

const fn key(name: &'static str, cmds: u8, help: &'static str) -> Key {
    Key { name, cmds, help }
}

const KEYS: &[Key] = &[
    key("out_dir", ALL, "output directory [default: $ADATTT_OUT_DIR or ./adattt-out]"),
    key("seed", ALL, "seed for data generation, training, adaptation or sampling"),
    key("n_source", SY, "source encounters"),
    key("n_target", SY, "target encounters"),
    key("features", SY, "time-varying features"),
    key("statics", SY | PR | SW, "trailing one-hot static columns"),
    key("prevalence", SY, "source prevalence"),
    key("min_hours", SY, "shortest encounter in hours"),
    key("max_hours", SY, "longest encounter in hours"),
    key("base_missingness", SY, "per-value missingness in both domains"),
    key("ar_coef", SY, "within-patient AR(1) coefficient"),
    key("shift", SY, "shift preset: none | standard"),
    key("shift_scale", SY, "per-feature scale, comma list (one value broadcasts)"),
    key("shift_offset", SY, "per-feature offset, comma list (one value broadcasts)"),
    key("prior_ratio", SY, "target prevalence / source prevalence"),
    key("missingness", SY, "extra target missingness"),
    key("noise", SY, "extra target noise in feature sd units"),
    key("shift_seed", SY, "seed stored in the shift spec"),
    key("source", PR | SW, "source CSV"),
    key("target", AD | SW, "target CSV"),
    key("model", AD, "model file written by pretrain"),
    key("site", AD | SW, "site label for reports"),
    key("method", PR | AD | SW, "TEST | TTT | PriTTT | DynTTT | AdaTTT"),
    key("epochs", PR | SW, "pretraining epochs"),
    key("batch_size", PR | SW, "pretraining batch size"),
    key("lr", PR | SW, "pretraining step size"),
    key("momentum", PR | SW, "pretraining momentum"),
    key("early_stopping", PR | SW, "keep the epoch with the best validation AUC"),
    key("grad_clip", PR | SW, "global gradient-norm clip (0 disables)"),
    key("warmup_epochs", PR | SW, "epochs of prior masking before relevance masking"),
    key("prior", PR | AD | SW, "prior masking probability"),
    key("k", PR | SW, "number of prototypes"),
    key("lambda_recon", PR | AD | SW, "reconstruction weight"),
    key("lambda_proto", PR | AD | SW, "prototype weight"),
    key("lambda_reg", PR | AD | SW, "balance weight"),
    key("lambda_ot", PR | AD | SW, "transport weight"),
    key("temperature", PR | SW, "soft-assignment temperature"),
    key("hidden", PR | SW, "encoder hidden widths, comma list"),
    key("embed_dim", PR | SW, "embedding width"),
    key("relevance_samples", PR | SW, "training instances used per relevance refresh"),
    key("steps", AD | SW, "test-time gradient steps per instance"),
    key("ttt_lr", AD | SW, "test-time step size"),
    key("mode", AD | SW, "reset | sequential"),
    key("seed_count", AD | SW, "independent evaluation runs"),
    key("parallel", AD | SW, "score instances in parallel (reset mode)"),
    key("epsilon", AD | SW, "entropic regularization"),
    key("sinkhorn_max_iter", AD | SW, "Sinkhorn iteration cap"),
    key("sinkhorn_tol", AD | SW, "Sinkhorn marginal tolerance"),
    key("freeze_duplicates", AD | SW, "draw transport duplicates once per instance"),
    key("traces", AD, "write per-instance traces"),
    key("n", BO, "joints per family"),
    key("non_markov", BO, "also report the non-Markov negative control"),
    key("sweep_params", SW, "families to sweep: k,lambda,warmup"),
    key("sweep_k", SW, "prototype counts"),
    key("sweep_lambda", SW, "values for each loss weight, varied one at a time"),
    key("sweep_warmup", SW, "warm-up epochs"),
];

fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Fully parsed invocation. Built before any computation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Cmd,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub site: String,
    pub synth: SynthConfig,
    pub shift: ShiftSpec,
    pub engine: EngineConfig,
    /// Engine keys given explicitly, re-applied on top of a loaded model's config.
    pub engine_overrides: Vec<(String, String)>,
    pub traces: bool,
    pub n: usize,
    pub non_markov: bool,
    pub sweep_params: Vec<String>,
    pub sweep_k: Vec<usize>,
    pub sweep_lambda: Vec<f64>,
    pub sweep_warmup: Vec<usize>,
}

impl RunConfig {
    pub fn defaults(command: Cmd) -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Self {
            command,
            out_dir,
            seed: 0,
            source: None,
            target: None,
            model: None,
            site: "target".into(),
            synth: SynthConfig::default(),
            shift: experiment::standard_shift(SynthConfig::default().features, 0),
            engine: EngineConfig::default(),
            engine_overrides: Vec::new(),
            traces: true,
            n: 1000,
            non_markov: false,
            sweep_params: vec!["k".into(), "lambda".into(), "warmup".into()],
            sweep_k: vec![2, 4, 8, 16],
            sweep_lambda: vec![0.1, 0.5, 1.0],
            sweep_warmup: vec![0, 5, 10, 20],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(usage(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Apply one engine key. Returns `Ok(false)` if `key` is not an engine key.
pub fn apply_engine_key(cfg: &mut EngineConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "method" => cfg.method = v.trim().parse::<Method>().map_err(usage)?,
        "mode" => cfg.mode = v.trim().parse::<Mode>().map_err(usage)?,
        "steps" => cfg.ttt_steps = parse(key, v)?,
        "ttt_lr" => cfg.ttt_lr = parse(key, v)?,
        "seed_count" => cfg.runs = parse(key, v)?,
        "parallel" => cfg.parallel = parse_bool(key, v)?,
        "epochs" => cfg.epochs = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "lr" => cfg.lr = parse(key, v)?,
        "momentum" => cfg.momentum = parse(key, v)?,
        "early_stopping" => cfg.early_stopping = parse_bool(key, v)?,
        "grad_clip" => cfg.grad_clip = parse(key, v)?,
        "warmup_epochs" => cfg.warmup_epochs = parse(key, v)?,
        "prior" => cfg.prior = parse(key, v)?,
        "k" => cfg.k = parse(key, v)?,
        "lambda_recon" => cfg.weights.recon = parse(key, v)?,
        "lambda_proto" => cfg.weights.proto = parse(key, v)?,
        "lambda_reg" => cfg.weights.reg = parse(key, v)?,
        "lambda_ot" => cfg.weights.ot = parse(key, v)?,
        "temperature" => cfg.temperature = parse(key, v)?,
        "hidden" => cfg.hidden = parse_list(key, v)?,
        "embed_dim" => cfg.embed_dim = parse(key, v)?,
        "relevance_samples" => cfg.relevance_samples = parse(key, v)?,
        "epsilon" => cfg.epsilon = parse(key, v)?,
        "sinkhorn_max_iter" => cfg.sinkhorn_max_iter = parse(key, v)?,
        "sinkhorn_tol" => cfg.sinkhorn_tol = parse(key, v)?,
        "freeze_duplicates" => cfg.freeze_duplicates = parse_bool(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn per_feature(key: &str, v: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = parse_list(key, v)?;
    if vals.is_empty() {
        return Err(usage(format!("{key}: empty list")));
    }
    Ok(vals)
}

fn set(rc: &mut RunConfig, key: &str, v: &str, explicit_shift: &mut Vec<(String, String)>) -> Result<()> {
    if apply_engine_key(&mut rc.engine, key, v)? {
        rc.engine_overrides.push((key.to_string(), v.to_string()));
        return Ok(());
    }
    match key {
        "out_dir" => rc.out_dir = PathBuf::from(v.trim()),
        "seed" => {
            rc.seed = parse(key, v)?;
            rc.engine.seed = rc.seed;
            rc.engine_overrides.push(("seed".into(), v.to_string()));
        }
        "source" => rc.source = Some(PathBuf::from(v.trim())),
        "target" => rc.target = Some(PathBuf::from(v.trim())),
        "model" => rc.model = Some(PathBuf::from(v.trim())),
        "site" => rc.site = v.trim().to_string(),
        "n_source" => rc.synth.n_source = parse(key, v)?,
        "n_target" => rc.synth.n_target = parse(key, v)?,
        "features" => rc.synth.features = parse(key, v)?,
        "statics" => rc.synth.statics = parse(key, v)?,
        "prevalence" => rc.synth.prevalence = parse(key, v)?,
        "min_hours" => rc.synth.min_hours = parse(key, v)?,
        "max_hours" => rc.synth.max_hours = parse(key, v)?,
        "base_missingness" => rc.synth.base_missingness = parse(key, v)?,
        "ar_coef" => rc.synth.ar_coef = parse(key, v)?,
        "shift" | "shift_scale" | "shift_offset" | "prior_ratio" | "missingness" | "noise" | "shift_seed" => {
            // resolved once the feature count is known
            explicit_shift.push((key.to_string(), v.to_string()));
        }
        "traces" => rc.traces = parse_bool(key, v)?,
        "n" => rc.n = parse(key, v)?,
        "non_markov" => rc.non_markov = parse_bool(key, v)?,
        "sweep_params" => rc.sweep_params = parse_list(key, v)?,
        "sweep_k" => rc.sweep_k = parse_list(key, v)?,
        "sweep_lambda" => rc.sweep_lambda = parse_list(key, v)?,
        "sweep_warmup" => rc.sweep_warmup = parse_list(key, v)?,
        _ => return Err(usage(format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn resolve_shift(rc: &mut RunConfig, keys: &[(String, String)]) -> Result<()> {
    let d = rc.synth.features;
    let mut shift = experiment::standard_shift(d, 0);
    for (k, v) in keys.iter().filter(|(k, _)| k == "shift") {
        shift = match v.trim() {
            "none" => ShiftSpec::identity(0),
            "standard" => experiment::standard_shift(d, 0),
            other => return Err(usage(format!("{k}: unknown preset {other:?} (none, standard)"))),
        };
    }
    shift.seed = rc.seed;
    for (k, v) in keys.iter().filter(|(k, _)| k != "shift") {
        match k.as_str() {
            "shift_scale" | "shift_offset" => {
                let mut vals = per_feature(k, v)?;
                if vals.len() == 1 {
                    vals = vec![vals[0]; d];
                } else if vals.len() != d {
                    return Err(usage(format!("{k}: {} values for {d} features", vals.len())));
                }
                if k == "shift_scale" {
                    shift.scale = vals;
                } else {
                    shift.offset = vals;
                }
            }
            "prior_ratio" => shift.prior_ratio = parse(k, v)?,
            "missingness" => shift.missingness = parse(k, v)?,
            "noise" => shift.noise = parse(k, v)?,
            "shift_seed" => shift.seed = parse(k, v)?,
            _ => unreachable!("filtered above"),
        }
    }
    shift.validate().map_err(|e| usage(e.to_string()))?;
    rc.shift = shift;
    Ok(())
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Merge file entries and flag entries (flags last) into a validated config.
pub fn build_config(cmd: Cmd, file: &[(String, String)], flags: &[(String, String)]) -> Result<RunConfig> {
    let mut rc = RunConfig::defaults(cmd);
    let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (k, v) in file.iter().chain(flags) {
        let known = find_key(k).ok_or_else(|| usage(format!("unknown key {k:?}")))?;
        if known.cmds & cmd.bit() == 0 {
            return Err(usage(format!("key {k:?} does not apply to {}", cmd.name())));
        }
        if merged.insert(k, v).is_none() {
            order.push(k);
        }
    }
    // seed first so later keys (shift_seed, engine) see it
    order.sort_by_key(|k| *k != "seed");
    let mut shift_keys = Vec::new();
    for k in order {
        set(&mut rc, k, merged[k], &mut shift_keys)?;
    }
    resolve_shift(&mut rc, &shift_keys)?;
    rc.engine.validate().map_err(|e| usage(e.to_string()))?;
    match cmd {
        Cmd::Synth => {
            if rc.synth.min_hours == 0 || rc.synth.min_hours > rc.synth.max_hours {
                return Err(usage("need 0 < min_hours <= max_hours"));
            }
            if !(0.0..=1.0).contains(&rc.synth.prevalence) {
                return Err(usage("prevalence must be in [0, 1]"));
            }
        }
        Cmd::Pretrain => {
            rc.source.as_ref().ok_or_else(|| usage("pretrain needs source"))?;
        }
        Cmd::Adapt => {
            rc.model.as_ref().ok_or_else(|| usage("adapt needs model"))?;
            rc.target.as_ref().ok_or_else(|| usage("adapt needs target"))?;
        }
        Cmd::Bounds => {
            if rc.n == 0 {
                return Err(usage("n must be >= 1"));
            }
        }
        Cmd::Sweep => {
            rc.source.as_ref().ok_or_else(|| usage("sweep needs source"))?;
            rc.target.as_ref().ok_or_else(|| usage("sweep needs target"))?;
            for p in &rc.sweep_params {
                if !["k", "lambda", "warmup"].contains(&p.as_str()) {
                    return Err(usage(format!("sweep_params: unknown family {p:?}")));
                }
            }
            if rc.sweep_k.iter().any(|&k| k < 2) {
                return Err(usage("sweep_k values must be >= 2"));
            }
            if rc.sweep_lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return Err(usage("sweep_lambda values must be finite and >= 0"));
            }
        }
    }
    Ok(rc)
}

fn cli_command() -> Command {
    let mut root = Command::new("adattt")
        .about("Adaptive test-time training for clinical risk models under domain shift")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Cmd::ALL {
        let mut sub = Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value config file; flags override it"),
        );
        for k in KEYS.iter().filter(|k| k.cmds & cmd.bit() != 0) {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(k.name.replace('_', "-"))
                    .value_name("VALUE")
                    .help(k.help)
                    .action(ArgAction::Set),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn flags_of(m: &ArgMatches, cmd: Cmd) -> Vec<(String, String)> {
    KEYS.iter()
        .filter(|k| k.cmds & cmd.bit() != 0)
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect()
}

/// Why argv did not produce a config.
#[derive(Debug)]
pub enum ArgsError {
    /// Help, version, or a malformed command line as reported by clap.
    Clap(clap::Error),
    Config(CliError),
}

/// Parse argv into a config without running anything.
pub fn parse_args<I, T>(args: I) -> std::result::Result<RunConfig, ArgsError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli_command().try_get_matches_from(args).map_err(ArgsError::Clap)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = Cmd::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("registered subcommand");
    let file = match sub.get_one::<String>("config") {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| ArgsError::Config(usage(format!("cannot read config {p}: {e}"))))?;
            parse_config_text(&text).map_err(ArgsError::Config)?
        }
        None => Vec::new(),
    };
    build_config(cmd, &file, &flags_of(sub, cmd)).map_err(ArgsError::Config)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(args).and_then(|rc| run(&rc).map_err(ArgsError::Config));
    match result {
        Ok(()) => 0,
        Err(ArgsError::Clap(e)) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            }
        }
        Err(ArgsError::Config(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(rc: &RunConfig) -> Result<()> {
    fs::create_dir_all(&rc.out_dir).map_err(|e| data_err(format!("{}: {e}", rc.out_dir.display())))?;
    match rc.command {
        Cmd::Synth => cmd_synth(rc).map(|_| ()),
        Cmd::Pretrain => cmd_pretrain(rc).map(|_| ()),
        Cmd::Adapt => cmd_adapt(rc).map(|_| ()),
        Cmd::Bounds => cmd_bounds(rc).map(|_| ()),
        Cmd::Sweep => cmd_sweep(rc).map(|_| ()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(data_err).map(|mut s| {
        s.push('\n');
        s
    })
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r).map_err(data_err)?);
        out.push('\n');
    }
    Ok(out)
}

/// FNV-1a of a byte string as 16 hex digits.
pub fn file_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub encounters: usize,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub synth: SynthConfig,
    pub shift: ShiftSpec,
    pub source: FileEntry,
    pub target: FileEntry,
}

fn csv_bytes(encounters: &[Encounter]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    datagen::write_csv(encounters, &mut buf).map_err(data_err)?;
    Ok(buf)
}

/// Regenerate the datasets a manifest describes.
pub fn regenerate(manifest: &SynthManifest) -> Result<(Vec<u8>, Vec<u8>)> {
    let (s, t) = datagen::synth_generate(&manifest.synth, &manifest.shift, manifest.seed).map_err(data_err)?;
    Ok((csv_bytes(&s)?, csv_bytes(&t)?))
}

pub fn cmd_synth(rc: &RunConfig) -> Result<SynthManifest> {
    let (source, target) = datagen::synth_generate(&rc.synth, &rc.shift, rc.seed).map_err(data_err)?;
    let entry = |name: &str, enc: &[Encounter]| -> Result<FileEntry> {
        let bytes = csv_bytes(enc)?;
        write_file(&rc.out_dir.join(name), &bytes)?;
        Ok(FileEntry {
            path: name.to_string(),
            encounters: enc.len(),
            hash: file_hash(&bytes),
        })
    };
    let manifest = SynthManifest {
        seed: rc.seed,
        synth: rc.synth.clone(),
        shift: rc.shift.clone(),
        source: entry("source.csv", &source)?,
        target: entry("target.csv", &target)?,
    };
    write_file(&rc.out_dir.join("manifest.json"), to_json(&manifest)?.as_bytes())?;
    eprintln!(
        "synth: {} source / {} target encounters -> {}",
        source.len(),
        target.len(),
        rc.out_dir.display()
    );
    Ok(manifest)
}

fn load_encounters(path: &Path, site: &str) -> Result<Vec<Encounter>> {
    let ing = datagen::ingest_csv_file(path, site).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    for r in &ing.rejected {
        eprintln!("warning: {}: rejected encounter {}: {}", path.display(), r.id, r.reason);
    }
    if ing.encounters.is_empty() {
        return Err(data_err(format!("{}: no usable encounters", path.display())));
    }
    Ok(ing.encounters)
}

/// Fit preprocessing and pretrain from encounters; shared by pretrain and sweep.
pub fn pretrain_encounters(
    source: &[Encounter],
    statics: usize,
    cfg: &EngineConfig,
) -> Result<(ModelFile, Vec<EpochLog>)> {
    let bench = experiment::prepare_source(source, statics, cfg.seed).map_err(data_err)?;
    let pre = experiment::pretrain(&bench, cfg, |e| {
        eprintln!(
            "epoch {:>3} {:?} loss {:.5} val_auc {}",
            e.epoch,
            e.phase,
            e.loss,
            e.auc.map_or("-".into(), |a| format!("{a:.4}"))
        )
    })
    .map_err(data_err)?;
    let log = pre.log.clone();
    Ok((ModelFile::new(cfg, &bench.pre, &pre), log))
}

pub fn cmd_pretrain(rc: &RunConfig) -> Result<ModelFile> {
    let source = load_encounters(rc.source.as_deref().expect("checked"), "source")?;
    let (file, log) = pretrain_encounters(&source, rc.synth.statics, &rc.engine)?;
    write_file(&rc.out_dir.join("model.json"), file.to_json().map_err(data_err)?.as_bytes())?;
    write_file(&rc.out_dir.join("train_log.jsonl"), jsonl(&log)?.as_bytes())?;
    eprintln!(
        "pretrain: best epoch {} val_auc {} -> {}",
        file.best_epoch,
        file.val_auc.map_or("-".into(), |a| format!("{a:.4}")),
        rc.out_dir.join("model.json").display()
    );
    Ok(file)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub report: MetricsReport,
    pub ttt_steps: usize,
    pub mode: Mode,
    pub runs: Vec<RunSummary>,
}

/// Score target encounters with a loaded model; shared by adapt and sweep.
pub fn adapt_encounters(file: &ModelFile, target: &[Encounter], cfg: &EngineConfig, site: &str) -> Result<Evaluation> {
    let samples =
        experiment::target_samples(&file.preprocessor, &file.model.feature_stats, target).map_err(data_err)?;
    engine::evaluate_method(&file.model, &samples, cfg, file.threshold, site).map_err(data_err)
}

/// Engine config for adaptation: the model's training config with the run's
/// explicit keys applied and the architecture taken from the model.
pub fn adapt_config(file: &ModelFile, rc: &RunConfig) -> Result<EngineConfig> {
    let mut cfg = file.config.clone();
    for (k, v) in &rc.engine_overrides {
        if k == "seed" {
            cfg.seed = parse(k, v)?;
        } else {
            apply_engine_key(&mut cfg, k, v)?;
        }
    }
    cfg.k = file.model.arch.k;
    cfg.hidden = file.model.arch.hidden.clone();
    cfg.embed_dim = file.model.arch.embed_dim;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn metrics_file(eval: &Evaluation, cfg: &EngineConfig) -> MetricsFile {
    MetricsFile {
        report: eval.report.clone(),
        ttt_steps: cfg.effective_steps(),
        mode: cfg.mode,
        runs: eval.runs.clone(),
    }
}

/// Per-step AUC table: row `s` is the AUC of the scores after `s` updates.
pub fn step_table(runs: &[RunSummary]) -> Result<String> {
    let steps = runs.iter().map(|r| r.step_auc.len()).min().unwrap_or(0);
    let mut out = String::from("steps,auc_mean,auc_se,runs\n");
    for s in 0..steps {
        let a = crate::metrics::aggregate(&runs.iter().map(|r| r.step_auc[s]).collect::<Vec<_>>())
            .map_err(data_err)?;
        let _ = writeln!(out, "{s},{:?},{:?},{}", a.mean, a.se, a.runs);
    }
    Ok(out)
}

pub fn cmd_adapt(rc: &RunConfig) -> Result<MetricsFile> {
    let file = ModelFile::load(rc.model.as_deref().expect("checked")).map_err(data_err)?;
    let cfg = adapt_config(&file, rc)?;
    let target = load_encounters(rc.target.as_deref().expect("checked"), &rc.site)?;
    let eval = adapt_encounters(&file, &target, &cfg, &rc.site)?;
    let out = metrics_file(&eval, &cfg);
    write_file(&rc.out_dir.join("metrics.json"), to_json(&out)?.as_bytes())?;
    write_file(&rc.out_dir.join("step_auc.csv"), step_table(&eval.runs)?.as_bytes())?;
    if rc.traces {
        write_file(&rc.out_dir.join("traces.jsonl"), jsonl(&eval.first_run)?.as_bytes())?;
    }
    if let Some(cum) = &eval.cumulative {
        let mut csv = String::from("encounters,timestamps,auc\n");
        for p in cum {
            let auc = p.auc.map(|a| format!("{a:?}")).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{auc}", p.encounters, p.timestamps);
        }
        write_file(&rc.out_dir.join("cumulative_auc.csv"), csv.as_bytes())?;
    }
    eprintln!(
        "adapt: {} AUC {:.4} ± {:.4}, Brier {:.4} ± {:.4} over {} run(s)",
        out.report.method,
        out.report.auc_mean,
        out.report.auc_se,
        out.report.brier_mean,
        out.report.brier_se,
        out.report.runs
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n: usize,
    pub seed: u64,
    pub summary: SuiteSummary,
    pub flip_example: bounds::Theorem1Report,
    pub violations: usize,
}

pub fn cmd_bounds(rc: &RunConfig) -> Result<BoundsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let mut records = Vec::new();
    let summary = bounds::run_suite(rc.n, rc.non_markov, &mut rng, |r| records.push(r)).map_err(data_err)?;
    let flip = bounds::check_theorem1(&bounds::flip_example(0.1), true).map_err(data_err)?;
    let violations = summary.violations() + usize::from(!flip.holds);
    let report = BoundsReport {
        n: rc.n,
        seed: rc.seed,
        summary,
        flip_example: flip,
        violations,
    };
    write_file(&rc.out_dir.join("bounds.json"), to_json(&report)?.as_bytes())?;
    write_file(&rc.out_dir.join("bounds.jsonl"), jsonl(&records)?.as_bytes())?;
    let s = &report.summary;
    eprintln!(
        "bounds: binary sandwich {}/{} data processing {}/{} multiclass {}/{} hold",
        s.theorem1_checked - s.theorem1_violations,
        s.theorem1_checked,
        s.lemma1_checked - s.lemma1_violations,
        s.lemma1_checked,
        s.multiclass_checked - s.multiclass_violations,
        s.multiclass_checked
    );
    if let Some(c) = &s.non_markov_counterexample {
        eprintln!(
            "bounds: non-Markov control: I(Z;Y_m) = {:.4} vs I(Y_s;Y_m) = {:.4} bits, data-processing violated: {}",
            c.i_z_ym,
            c.i_ys_ym,
            !c.holds
        );
    }
    if violations > 0 {
        return Err(CliError::Violation(format!("{violations} bound check(s) failed")));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub auc_mean: f64,
    pub auc_se: f64,
    pub brier_mean: f64,
    pub brier_se: f64,
    pub val_auc: Option<f64>,
}

fn sweep_cell(
    source: &[Encounter],
    target: &[Encounter],
    rc: &RunConfig,
    cfg: &EngineConfig,
    parameter: &str,
    value: f64,
) -> Result<SweepRow> {
    eprintln!("sweep: {parameter} = {value}");
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (file, _) = pretrain_encounters(source, rc.synth.statics, cfg)?;
    let eval = adapt_encounters(&file, target, cfg, &rc.site)?;
    Ok(SweepRow {
        parameter: parameter.to_string(),
        value,
        auc_mean: eval.report.auc_mean,
        auc_se: eval.report.auc_se,
        brier_mean: eval.report.brier_mean,
        brier_se: eval.report.brier_se,
        val_auc: file.val_auc,
    })
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,value,auc_mean,auc_se,brier_mean,brier_se,val_auc\n");
    for r in rows {
        let val = r.val_auc.map(|a| format!("{a:?}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{val}",
            r.parameter, r.value, r.auc_mean, r.auc_se, r.brier_mean, r.brier_se
        );
    }
    out
}

/// Grids over `k`, each loss weight (one at a time, others at their configured
/// values) and warm-up length. Every cell pretrains and evaluates from scratch.
pub fn cmd_sweep(rc: &RunConfig) -> Result<BTreeMap<String, Vec<SweepRow>>> {
    let source = load_encounters(rc.source.as_deref().expect("checked"), "source")?;
    let target = load_encounters(rc.target.as_deref().expect("checked"), &rc.site)?;
    let mut tables = BTreeMap::new();
    for family in &rc.sweep_params {
        let mut rows = Vec::new();
        match family.as_str() {
            "k" => {
                for &k in &rc.sweep_k {
                    let cfg = EngineConfig { k, ..rc.engine.clone() };
                    rows.push(sweep_cell(&source, &target, rc, &cfg, "k", k as f64)?);
                }
            }
            "lambda" => {
                for name in ["lambda_recon", "lambda_proto", "lambda_reg", "lambda_ot"] {
                    for &l in &rc.sweep_lambda {
                        let mut cfg = rc.engine.clone();
                        apply_engine_key(&mut cfg, name, &format!("{l:?}"))?;
                        rows.push(sweep_cell(&source, &target, rc, &cfg, name, l)?);
                    }
                }
            }
            "warmup" => {
                for &w in &rc.sweep_warmup {
                    let cfg = EngineConfig {
                        warmup_epochs: w,
                        ..rc.engine.clone()
                    };
                    rows.push(sweep_cell(&source, &target, rc, &cfg, "warmup_epochs", w as f64)?);
                }
            }
            _ => unreachable!("validated in build_config"),
        }
        write_file(&rc.out_dir.join(format!("sweep_{family}.csv")), sweep_csv(&rows).as_bytes())?;
        tables.insert(family.clone(), rows);
    }
    Ok(tables)
}
