//! Command-line front end. Every command reads one TOML experiment config
//! (defaults, then the file, then `--set key=value` overrides) and stamps its
//! artifacts with the SHA-256 of the effective config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contrastive::LossVariant;
use crate::datagen::{self, Dataset, DatasetSpec, Paradigm, Split};
use crate::eval::{self, Prop1Config, Regime, Scene};
use crate::models::ModelConfig;
use crate::planner::{self, GoalDomain, PlanConfig};
use crate::renderer::{self, TextureFamily};
use crate::training::{self, Model, TrainConfig};
use crate::worldsim::SceneConfig;

pub const CONFIG_ENV: &str = "CDR_CONFIG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{what} was produced by config {found}, current config is {expected}; pass --allow-hash-mismatch to proceed")]
    HashMismatch { what: String, expected: String, found: String },
    #[error(transparent)]
    Data(#[from] datagen::DatagenError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Plan(#[from] planner::PlanError),
    #[error(transparent)]
    Render(#[from] renderer::RenderError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::HashMismatch { .. } => "hash_mismatch",
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Plan(_) => "plan",
            CliError::Render(_) => "render",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error kind=<kind> message="<single line>"`
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ").replace('"', "'");
        format!("error kind={} message=\"{}\"", self.kind(), msg.trim())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenes {
    pub uncontrolled: SceneConfig,
    pub controlled: SceneConfig,
}

impl Default for Scenes {
    fn default() -> Self {
        Self {
            uncontrolled: SceneConfig::uncontrolled_default(),
            controlled: SceneConfig::controlled_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RendererConfig {
    /// Texture families withheld from training for out-of-distribution queries.
    pub holdout_families: usize,
    pub family_split_seed: u64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            holdout_families: 2,
            family_split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub uncontrolled_episodes: usize,
    pub uncontrolled_frames: usize,
    pub controlled_episodes: usize,
    pub controlled_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            uncontrolled_episodes: 2000,
            uncontrolled_frames: 30,
            controlled_episodes: 2000,
            controlled_frames: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub pool_size: usize,
    pub queries: usize,
    pub invariance_pairs: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            pool_size: 2000,
            queries: 200,
            invariance_pairs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: Scenes,
    pub renderer: RendererConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub evaluation: EvaluationConfig,
    pub planning: PlanConfig,
    pub prop1: Prop1Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: Scenes::default(),
            renderer: RendererConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
            evaluation: EvaluationConfig::default(),
            planning: PlanConfig::default(),
            prop1: Prop1Config::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_override(assignment: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for p in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` is not a section")))?;
        node = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::Config(format!("cannot set `{}`", path.join("."))))?
        .insert(last.clone(), value);
    Ok(())
}

/// Builds the effective config from an optional file plus leaf overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = toml::Value::try_from(ExperimentConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(file));
    }
    for o in overrides {
        let (key, v) = parse_override(o)?;
        set_path(&mut value, &key, v)?;
    }
    let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let bad = |m: String| Err(CliError::Config(m));
    for scene in [&cfg.scene.uncontrolled, &cfg.scene.controlled] {
        scene.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if !renderer::SUPPORTED_RESOLUTIONS.contains(&cfg.model.resolution) {
        return bad(format!("model.resolution {} is not one of {:?}", cfg.model.resolution, renderer::SUPPORTED_RESOLUTIONS));
    }
    if cfg.renderer.holdout_families == 0 || cfg.renderer.holdout_families >= TextureFamily::ALL.len() {
        return bad("renderer.holdout_families must leave both pools non-empty".into());
    }
    let d = &cfg.data;
    if d.uncontrolled_episodes == 0 || d.controlled_episodes == 0 {
        return bad("data episode counts must be positive".into());
    }
    let e = &cfg.evaluation;
    if e.pool_size == 0 || e.queries == 0 || e.invariance_pairs == 0 {
        return bad("evaluation sizes must be positive".into());
    }
    cfg.planning.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

/// SHA-256 over the canonical TOML rendering of the effective config.
pub fn config_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    let text = toml::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes()).into()
}

fn check_hash(what: &str, expected: &str, found: &str, allow: bool) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    if allow {
        eprintln!("warning: {what} config hash {found} differs from {expected}");
        return Ok(());
    }
    Err(CliError::HashMismatch {
        what: what.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ParadigmArg {
    Uncontrolled,
    Controlled,
}

impl From<ParadigmArg> for Paradigm {
    fn from(p: ParadigmArg) -> Self {
        match p {
            ParadigmArg::Uncontrolled => Paradigm::Uncontrolled,
            ParadigmArg::Controlled => Paradigm::Controlled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Cdr,
    Naive,
    #[value(name = "same-domain")]
    SameDomain,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Cdr => LossVariant::Cdr,
            LossArg::Naive => LossVariant::Naive,
            LossArg::SameDomain => LossVariant::SameDomain,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuerySplit {
    In,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Indep,
    Dep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GoalArg {
    Same,
    Different,
}

#[derive(Debug, Parser)]
#[command(name = "cdr", version, about = "Contrastive domain randomization experiments")]
pub struct Cli {
    /// Experiment config (TOML). Falls back to $CDR_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config leaf, e.g. --set training.epochs=5 (repeatable, any position)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Accept inputs whose recorded config hash differs from the current one.
    #[arg(long, global = true)]
    pub allow_hash_mismatch: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired-domain dataset.
    GenData {
        #[arg(long, value_enum)]
        paradigm: ParadigmArg,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Added to the first episode seed, for disjoint datasets of one split.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and predictor; writes a checkpoint and `<out>.metrics`.
    Train {
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbor retrieval of query frames against a pool of frames.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_enum)]
        split: QuerySplit,
    },
    /// Latent agreement of one state rendered under two domains.
    EvalInvariance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Separable-encoder experiment on synthetic data.
    Prop1 {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Latent one-step MPC toward goal images.
    Plan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        goal_domain: GoalArg,
    },
}

/// Parses `args` (including the program name) and runs the command, writing
/// reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    // clap keeps only the last group of a repeated global, so collect every
    // --set here, wherever it appears
    let mut rest: Vec<std::ffi::OsString> = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().map(Into::into);
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--set") => match it.next() {
                Some(v) => overrides.push(v.to_string_lossy().into_owned()),
                None => return Err(CliError::Usage("--set needs KEY=VALUE".into())),
            },
            Some(s) if s.starts_with("--set=") => overrides.push(s["--set=".len()..].to_string()),
            _ => rest.push(a),
        }
    }
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(io_err(Path::new("<stdout>")))?;
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = load_config(path.as_deref(), &overrides)?;
    let ctx = Ctx {
        hash: hex::encode(config_hash(&cfg)),
        cfg,
        allow: cli.allow_hash_mismatch,
    };
    let mut emit = |line: String| writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")));
    match cli.command {
        Command::GenData {
            paradigm,
            episodes,
            split,
            seed_offset,
            out,
        } => {
            let ds = ctx.gen_data(paradigm.into(), episodes, split, seed_offset)?;
            write_file(&out, |w| Ok(ds.save(w)?))?;
            emit(format!(
                "dataset paradigm={} split={} episodes={} frames={} config_hash={}",
                ds.paradigm.name(),
                ds.split.name(),
                ds.episodes.len(),
                ds.frames(),
                ctx.hash
            ))?;
        }
        Command::Train { loss, dataset, out } => {
            let ds = ctx.load_dataset(&dataset)?;
            let mut cfg = ctx.cfg.training.clone();
            cfg.loss = loss.into();
            let (train, val) = ds.split_validation(cfg.validation_fraction)?;
            let mut lines = Vec::new();
            let outcome = training::train(&cfg, &ctx.cfg.model, &train, &val, &mut |m| {
                eprintln!("{m}");
                lines.push(m.deterministic_part());
            })?;
            write_file(&out, |w| Ok(outcome.model.save(&ctx.hash, w)?))?;
            let metrics_path = metrics_path(&out);
            write_file(&metrics_path, |w| {
                writeln!(w, "config_hash={}", ctx.hash).map_err(io_err(&metrics_path))?;
                for l in &lines {
                    writeln!(w, "{l}").map_err(io_err(&metrics_path))?;
                }
                Ok(())
            })?;
            emit(format!(
                "trained loss={} best_epoch={} best_val_loss={} epochs_run={} stopped_early={} config_hash={}",
                cfg.loss.name(),
                outcome.best_epoch,
                outcome.best_val_loss,
                outcome.epochs_run,
                outcome.stopped_early,
                ctx.hash
            ))?;
        }
        Command::EvalRetrieval {
            checkpoint,
            pool,
            queries,
            split,
        } => {
            let model = ctx.load_model(&checkpoint)?;
            let pool = ctx.load_dataset(&pool)?;
            let queries = ctx.load_dataset(&queries)?;
            let report = ctx.retrieval(&model, &pool, &queries, split)?;
            emit(format!("config_hash={}", ctx.hash))?;
            emit(report.to_string())?;
            emit(report.metric_line())?;
        }
        Command::EvalInvariance { checkpoint, pairs } => {
            let model = ctx.load_model(&checkpoint)?;
            let report = ctx.invariance(&model, pairs.unwrap_or(ctx.cfg.evaluation.invariance_pairs))?;
            emit(format!("config_hash={}", ctx.hash))?;
            emit(report.to_string())?;
            emit(report.metric_line())?;
        }
        Command::Prop1 { regime, trials } => {
            let mut p = ctx.cfg.prop1.clone();
            if let Some(t) = trials {
                p.trials = t;
            }
            let regime = match regime {
                RegimeArg::Indep => Regime::Independent,
                RegimeArg::Dep => Regime::Dependent,
            };
            let report = eval::prop1_experiment(&p, regime)?;
            emit(format!("config_hash={}", ctx.hash))?;
            for l in report.metric_lines() {
                emit(l)?;
            }
        }
        Command::Plan {
            checkpoint,
            episodes,
            goal_domain,
        } => {
            let model = ctx.load_model(&checkpoint)?;
            if model.paradigm != Paradigm::Controlled {
                return Err(CliError::Usage("planning needs a controlled checkpoint".into()));
            }
            let mut p = ctx.cfg.planning.clone();
            if let Some(n) = episodes {
                p.episodes = n;
            }
            let goal = match goal_domain {
                GoalArg::Same => GoalDomain::Same,
                GoalArg::Different => GoalDomain::Different,
            };
            let (pool, _) = ctx.family_pools()?;
            let (report, _) = planner::run_planning(&model, &ctx.cfg.scene.controlled, &pool, goal, &p)?;
            emit(format!("config_hash={}", ctx.hash))?;
            emit(report.to_string())?;
            emit(report.metric_line())?;
        }
    }
    Ok(())
}

pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".metrics");
    PathBuf::from(s)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w)?;
    w.flush().map_err(io_err(path))
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    allow: bool,
}

impl Ctx {
    fn family_pools(&self) -> Result<(Vec<TextureFamily>, Vec<TextureFamily>)> {
        Ok(renderer::split_families(
            &TextureFamily::ALL,
            self.cfg.renderer.holdout_families,
            self.cfg.renderer.family_split_seed,
        )?)
    }

    fn scene(&self, paradigm: Paradigm) -> &SceneConfig {
        match paradigm {
            Paradigm::Uncontrolled => &self.cfg.scene.uncontrolled,
            Paradigm::Controlled => &self.cfg.scene.controlled,
        }
    }

    fn frames(&self, paradigm: Paradigm) -> usize {
        match paradigm {
            Paradigm::Uncontrolled => self.cfg.data.uncontrolled_frames,
            Paradigm::Controlled => self.cfg.data.controlled_frames,
        }
    }

    fn gen_data(&self, paradigm: Paradigm, episodes: Option<usize>, split: SplitArg, offset: u64) -> Result<Dataset> {
        let (pool, _) = self.family_pools()?;
        let split = match split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        let episodes = episodes.unwrap_or(match paradigm {
            Paradigm::Uncontrolled => self.cfg.data.uncontrolled_episodes,
            Paradigm::Controlled => self.cfg.data.controlled_episodes,
        });
        let mut hash = [0u8; 32];
        hex::decode_to_slice(&self.hash, &mut hash).expect("hash is hex");
        Ok(Dataset::generate(&DatasetSpec {
            paradigm,
            split,
            scene: self.scene(paradigm),
            family_pool: &pool,
            frames: self.frames(paradigm),
            episodes,
            first_seed: datagen::split_seed_base(self.cfg.seed, split) + offset,
            config_hash: hash,
        })?)
    }

    fn load_dataset(&self, path: &Path) -> Result<Dataset> {
        let ds = Dataset::load(BufReader::new(File::open(path).map_err(io_err(path))?))?;
        check_hash(&path.display().to_string(), &self.hash, &hex::encode(ds.config_hash), self.allow)?;
        Ok(ds)
    }

    fn load_model(&self, path: &Path) -> Result<Model> {
        let file = File::open(path).map_err(io_err(path))?;
        let (model, hash) = Model::load(&self.cfg.model, BufReader::new(file))?;
        check_hash(&path.display().to_string(), &self.hash, &hash, self.allow)?;
        Ok(model)
    }

    /// Pool frames keep their recorded domain; queries are re-rendered under
    /// fresh domains from the training or held-out families.
    fn retrieval(&self, model: &Model, pool: &Dataset, queries: &Dataset, split: QuerySplit) -> Result<eval::RetrievalReport> {
        let pool_seeds: std::collections::BTreeSet<u64> = pool.seeds().into_iter().collect();
        if queries.seeds().iter().any(|s| pool_seeds.contains(s)) {
            return Err(CliError::Usage("query and pool datasets share episodes".into()));
        }
        let ev = &self.cfg.evaluation;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(0x7265_7472);
        let pool_frames = datagen::sample_frames(pool, &mut rng, ev.pool_size)?;
        let pool_scenes: Vec<Scene> = pool_frames
            .iter()
            .map(|&(e, t)| Scene {
                state: pool.episodes[e].states[t].clone(),
                domain: pool.episodes[e].domain_a.clone(),
            })
            .collect();
        let (train_families, ood_families) = self.family_pools()?;
        let families = match split {
            QuerySplit::In => &train_families,
            QuerySplit::Ood => &ood_families,
        };
        let query_frames = datagen::sample_frames(queries, &mut rng, ev.queries)?;
        let bodies = queries.body_count();
        let query_scenes = query_frames
            .iter()
            .map(|&(e, t)| {
                Ok(Scene {
                    state: queries.episodes[e].states[t].clone(),
                    domain: renderer::sample_domain(&mut rng, families, bodies)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let name = match split {
            QuerySplit::In => "in",
            QuerySplit::Ood => "ood",
        };
        Ok(eval::retrieval_eval(model, name, &query_scenes, &pool_scenes)?)
    }

    /// States come from fresh test-split episodes; each is rendered under two
    /// independently drawn training-family domains.
    fn invariance(&self, model: &Model, pairs: usize) -> Result<eval::InvarianceReport> {
        let paradigm = model.paradigm;
        let (pool, _) = self.family_pools()?;
        let scene = self.scene(paradigm);
        let frames = self.frames(paradigm);
        let base = datagen::split_seed_base(self.cfg.seed, Split::Test) + (1 << 31);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(0x696e_7661);
        let mut states = Vec::with_capacity(pairs);
        let mut domains = Vec::with_capacity(pairs);
        for i in 0..pairs as u64 {
            let ep = datagen::gen_episode(paradigm, scene, &pool, base + i, frames)?;
            let t = rand::Rng::random_range(&mut rng, 0..frames);
            states.push(ep.states[t].clone());
            let a = renderer::sample_domain(&mut rng, &pool, scene.body_count)?;
            let b = renderer::sample_domain(&mut rng, &pool, scene.body_count)?;
            domains.push((a, b));
        }
        Ok(eval::invariance_eval(model, &states, &domains)?)
    }
}
