//! Batch commands behind the `kappa` binary: gen, train, eval, parse, ablate.
//!
//! Every command takes a TOML run config plus flag overrides, and every file
//! it writes embeds the resolved config and its hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use kappa::{
    ablation_suite, evaluate, generate_dataset, parse_trajectory, supervised_init, train, CaseRecord, LabeledCase,
    NormMode, PolicyParams, RewardMode, RewardRecord, RunConfig, TrainContext, TrajectoryRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an invalid config.
    Usage(String),
    /// Unreadable or malformed input, unwritable output.
    Data(String),
    /// A `--check` assertion failed.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "kappa", version, about = "Consensus-calibrated GRPO on a synthetic zoom-then-diagnose task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic case file.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of cases (overrides world.n_cases).
        #[arg(long)]
        n_cases: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-start and train one arm, writing a checkpoint and a JSONL trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Held-out cases for periodic evaluation (needs train.eval_every > 0).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint path; the trace goes next to it as `<stem>.trace.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Also log every rollout and its reward as JSONL.
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        rewards: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `<out>.json` and `<out>.txt`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lint a JSONL file of trajectory records.
    Parse { file: PathBuf },
    /// Three-arm ablation: no RL, accuracy-only RL, uncertainty RL.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        /// Output directory for ablation.txt and ablation.json.
        #[arg(long)]
        out: PathBuf,
        /// Exit with status 3 when a directional claim does not hold.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardModeArg {
    Uncertainty,
    AccuracyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormModeArg {
    PerGroup,
    PerBatch,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run, training and evaluation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub reward_mode: Option<RewardModeArg>,
    #[arg(long, value_enum)]
    pub norm_mode: Option<NormModeArg>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Config after file loading and flag overrides.
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
    pub overrides: Vec<String>,
}

impl Resolved {
    fn header(&self, kind: &str) -> Value {
        json!({ "kind": kind, "config_hash": self.hash, "overrides": self.overrides, "config": self.config })
    }

    fn text_header(&self) -> String {
        let mut s = format!("# config_hash {}\n", self.hash);
        if !self.overrides.is_empty() {
            s.push_str(&format!("# overrides {}\n", self.overrides.join(" ")));
        }
        s
    }
}

pub fn resolve(common: &Common) -> Result<Resolved> {
    let mut config = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        config.seed = s;
        config.train.seed = s;
        config.eval.seed = s;
        overrides.push(format!("seed={s}"));
    }
    if let Some(m) = common.reward_mode {
        config.reward.reward_mode = match m {
            RewardModeArg::Uncertainty => RewardMode::Uncertainty,
            RewardModeArg::AccuracyOnly => RewardMode::AccuracyOnly,
        };
        overrides.push(format!("reward.reward_mode={}", m.to_possible_value().unwrap().get_name()));
    }
    if let Some(m) = common.norm_mode {
        config.reward.norm_mode = match m {
            NormModeArg::PerGroup => NormMode::PerGroup,
            NormModeArg::PerBatch => NormMode::PerBatch,
        };
        overrides.push(format!("reward.norm_mode={}", m.to_possible_value().unwrap().get_name()));
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let hash = config.hash();
    Ok(Resolved { config, hash, overrides })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseFile {
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub loc_weights: Vec<f64>,
    pub cls_weights: Vec<Vec<f64>>,
    pub step: usize,
    pub config_hash: String,
    #[serde(default)]
    pub config: Value,
}

impl Checkpoint {
    fn new(p: &PolicyParams, step: usize, r: &Resolved) -> Self {
        Checkpoint {
            loc_weights: p.loc_weights.to_vec(),
            cls_weights: p.cls_weights.iter().map(|w| w.to_vec()).collect(),
            step,
            config_hash: r.hash.clone(),
            config: serde_json::to_value(&r.config).expect("config serializes"),
        }
    }

    pub fn params(&self) -> std::result::Result<PolicyParams, String> {
        let row = |v: &Vec<f64>| -> std::result::Result<[f64; 4], String> {
            v.as_slice().try_into().map_err(|_| format!("weight row of length {} (expected 4)", v.len()))
        };
        Ok(PolicyParams {
            loc_weights: row(&self.loc_weights)?,
            cls_weights: self.cls_weights.iter().map(row).collect::<std::result::Result<_, _>>()?,
        })
    }
}

fn data_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| data_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(contents.as_bytes()).and_then(|_| w.flush()).map_err(|e| data_err(path, e))
}

struct Jsonl {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl Jsonl {
    fn open(path: &Path, header: &Value) -> Result<Self> {
        let mut j = Jsonl { path: path.to_path_buf(), w: create(path)? };
        j.line(header)?;
        Ok(j)
    }

    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, v)
            .map_err(|e| data_err(&self.path, e))
            .and_then(|_| writeln!(self.w).map_err(|e| data_err(&self.path, e)))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| data_err(&self.path, e))
    }
}

pub fn load_cases(path: &Path, cfg: &RunConfig) -> Result<Vec<LabeledCase>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let file: CaseFile = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
    let cases = file
        .cases
        .into_iter()
        .map(|r| r.into_case(&cfg.world))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| data_err(path, e))?;
    if let Some(c) = cases.iter().find(|c| cfg.world.class_index(&c.label).is_none()) {
        return Err(data_err(path, format!("case {}: unknown label {:?}", c.id, c.label)));
    }
    if let Some(c) = cases.iter().find(|c| (c.image.width, c.image.height) != (cfg.world.width, cfg.world.height)) {
        return Err(data_err(path, format!("case {}: image size differs from world config", c.id)));
    }
    Ok(cases)
}

/// Counts per (class, confidence), in class-name order.
pub fn case_counts(cases: &[LabeledCase]) -> BTreeMap<(String, u8), usize> {
    let mut m = BTreeMap::new();
    for c in cases {
        *m.entry((c.label.clone(), c.confidence)).or_insert(0) += 1;
    }
    m
}

pub fn cmd_gen(r: &Resolved, n_cases: Option<usize>, out: &Path) -> Result<String> {
    let mut world = r.config.world.clone();
    if let Some(n) = n_cases {
        world.n_cases = n;
    }
    let cases = generate_dataset(&world, r.config.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut config = serde_json::to_value(&r.config).expect("config serializes");
    config["world"] = serde_json::to_value(&world).expect("config serializes");
    let file = CaseFile {
        config,
        config_hash: r.hash.clone(),
        seed: r.config.seed,
        cases: cases.iter().map(CaseRecord::from).collect(),
    };
    write_file(out, &serde_json::to_string(&file).expect("case file serializes"))?;

    let confident = cases.iter().filter(|c| c.confidence == 1).count();
    let mut s = format!(
        "{} cases: {} confident / {} ambiguous (seed {})\n",
        cases.len(),
        confident,
        cases.len() - confident,
        r.config.seed
    );
    for ((label, c), n) in case_counts(&cases) {
        s.push_str(&format!("  {label:<12} c={c}  {n}\n"));
    }
    Ok(s)
}

pub struct TrainPaths<'a> {
    pub data: &'a Path,
    pub eval_data: Option<&'a Path>,
    pub out: &'a Path,
    pub rollouts: Option<&'a Path>,
    pub rewards: Option<&'a Path>,
}

pub fn trace_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
    ckpt.with_file_name(format!("{stem}.trace.jsonl"))
}

pub fn cmd_train(r: &Resolved, paths: &TrainPaths<'_>) -> Result<String> {
    let cfg = &r.config;
    let cases = load_cases(paths.data, cfg)?;
    let held = paths.eval_data.map(|p| load_cases(p, cfg)).transpose()?;
    let policy = cfg.policy();
    let init = supervised_init(&cases, &policy, &cfg.init, cfg.reward.temperature)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let header = r.header("trace");
    let mut trace_out = Jsonl::open(&trace_path(paths.out), &header)?;
    let mut rollouts = paths.rollouts.map(|p| Jsonl::open(p, &r.header("rollouts"))).transpose()?;
    let mut rewards = paths.rewards.map(|p| Jsonl::open(p, &r.header("rewards"))).transpose()?;
    let mut log_err: Option<CliError> = None;
    let mut sink = |_step: usize, groups: &[kappa::trainer::ScoredGroup]| {
        for g in groups {
            for (i, ro) in g.rollouts.iter().enumerate() {
                let res = rollouts
                    .as_mut()
                    .map(|j| j.line(&TrajectoryRecord::new(&g.case_id, i, &ro.trajectory)))
                    .transpose()
                    .and_then(|_| rewards.as_mut().map(|j| j.line(&RewardRecord::new(&g.case_id, i, &ro.reward))).transpose());
                if let (Err(e), None) = (res, &log_err) {
                    log_err = Some(e);
                }
            }
        }
    };
    let ctx = TrainContext {
        policy: &policy,
        reward: &cfg.reward,
        train: &cfg.train,
        monitor: held.as_deref().map(|h| (h, &cfg.eval)),
    };
    let logging = paths.rollouts.is_some() || paths.rewards.is_some();
    let (params, trace) = train(&cases, init, &ctx, if logging { Some(&mut sink) } else { None })
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(e) = log_err {
        return Err(e);
    }
    for rec in &trace {
        trace_out.line(rec)?;
    }
    trace_out.finish()?;
    for j in [rollouts, rewards].into_iter().flatten() {
        j.finish()?;
    }
    let ckpt = Checkpoint::new(&params, trace.len(), r);
    write_file(paths.out, &serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes"))?;

    let last = trace.last();
    Ok(format!(
        "trained {} steps ({:?} reward, {:?} normalization); final mean reward {}\ncheckpoint {}\n",
        trace.len(),
        cfg.reward.reward_mode,
        cfg.reward.norm_mode,
        last.map(|t| format!("{:.4}", t.mean_reward)).unwrap_or_else(|| "n/a".into()),
        paths.out.display()
    ))
}

pub fn load_checkpoint(path: &Path, r: &Resolved) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
    let params = ck.params().map_err(|e| data_err(path, e))?;
    r.config.policy().check_params(&params).map_err(|e| data_err(path, e))?;
    if ck.config_hash != r.hash {
        eprintln!("note: checkpoint was trained under config {} (current {})", ck.config_hash, r.hash);
    }
    Ok(params)
}

pub fn cmd_eval(r: &Resolved, data: &Path, ckpt: &Path, out: &Path) -> Result<String> {
    let cfg = &r.config;
    let cases = load_cases(data, cfg)?;
    let params = load_checkpoint(ckpt, r)?;
    let (samples, report) = evaluate(&cases, &params, &cfg.policy(), &cfg.eval, &cfg.reward.target_attribute);
    let mut doc = r.header("eval");
    doc["report"] = serde_json::to_value(&report).expect("report serializes");
    doc["samples"] = serde_json::to_value(&samples).expect("samples serialize");
    let table = format!("{}{}", r.text_header(), kappa::render_table(&[("policy", &report)]));
    write_file(&out.with_extension("json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    write_file(&out.with_extension("txt"), &table)?;
    Ok(table)
}

#[derive(Deserialize)]
struct RawLine {
    raw: String,
}

pub struct LintReport {
    pub trajectories: usize,
    pub errors: Vec<(usize, String)>,
}

impl fmt::Display for LintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (line, reason) in &self.errors {
            writeln!(f, "line {line}: {reason}")?;
        }
        writeln!(f, "{} trajectories, {} errors", self.trajectories, self.errors.len())
    }
}

/// Each non-blank line is a trajectory record; only its `raw` text is
/// checked. Lines that hold a header (no `raw` key) are skipped.
pub fn lint(text: &str) -> LintReport {
    let mut rep = LintReport { trajectories: 0, errors: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                rep.trajectories += 1;
                rep.errors.push((i + 1, format!("not a JSON record ({e})")));
                continue;
            }
        };
        if v.get("raw").is_none() && v.get("config_hash").is_some() {
            continue;
        }
        rep.trajectories += 1;
        match serde_json::from_value::<RawLine>(v) {
            Ok(r) => {
                if let kappa::ParseStatus::Malformed(reason) = parse_trajectory(&r.raw).parse_status {
                    rep.errors.push((i + 1, format!("Malformed: {reason}")));
                }
            }
            Err(e) => rep.errors.push((i + 1, format!("bad record ({e})"))),
        }
    }
    rep
}

pub fn cmd_parse(file: &Path) -> Result<(String, bool)> {
    let bytes = fs::read(file).map_err(|e| data_err(file, e))?;
    let text = String::from_utf8(bytes).map_err(|e| data_err(file, e))?;
    let rep = lint(&text);
    Ok((rep.to_string(), rep.errors.is_empty()))
}

pub fn cmd_ablate(r: &Resolved, data: &Path, eval_data: &Path, out: &Path, check: bool) -> Result<String> {
    let cfg = &r.config;
    let train_cases = load_cases(data, cfg)?;
    let eval_cases = load_cases(eval_data, cfg)?;
    let rep = ablation_suite(
        &train_cases,
        &eval_cases,
        &cfg.policy(),
        &cfg.reward,
        &cfg.init,
        &cfg.train,
        &cfg.eval,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let checks = rep.checks(0.10, 0.02);
    let mut text = format!("{}{}", r.text_header(), rep.table());
    for c in &checks {
        text.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    let mut doc = r.header("ablation");
    doc["arms"] = serde_json::to_value(&rep.arms).expect("report serializes");
    doc["checks"] = serde_json::to_value(&checks).expect("checks serialize");
    fs::create_dir_all(out).map_err(|e| data_err(out, e))?;
    write_file(&out.join("ablation.txt"), &text)?;
    write_file(&out.join("ablation.json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    if check {
        if let Some(c) = checks.iter().find(|c| !c.passed) {
            print!("{text}");
            return Err(CliError::Check(format!("check {} failed: {}", c.name, c.detail)));
        }
    }
    Ok(text)
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::Gen { common, n_cases, out } => resolve(common).and_then(|r| cmd_gen(&r, *n_cases, out)),
        Command::Train { common, data, eval_data, out, rollouts, rewards } => resolve(common).and_then(|r| {
            cmd_train(
                &r,
                &TrainPaths {
                    data,
                    eval_data: eval_data.as_deref(),
                    out,
                    rollouts: rollouts.as_deref(),
                    rewards: rewards.as_deref(),
                },
            )
        }),
        Command::Eval { common, data, ckpt, out } => resolve(common).and_then(|r| cmd_eval(&r, data, ckpt, out)),
        Command::Parse { file } => match cmd_parse(file) {
            Ok((text, true)) => Ok(text),
            Ok((text, false)) => {
                print!("{text}");
                return EXIT_DATA;
            }
            Err(e) => Err(e),
        },
        Command::Ablate { common, data, eval_data, out, check } => {
            resolve(common).and_then(|r| cmd_ablate(&r, data, eval_data, out, *check))
        }
    };
    match res {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
