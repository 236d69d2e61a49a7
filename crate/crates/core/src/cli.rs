//! Command-line driver: `volterra-net <config.json> [--key=value ...] [--threads N] [--force]`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{DeepOnetConfig, DeepOnetModel, NeuralSdeModel};
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate, generate_dataset, train, Benchmark, ExperimentSpec, InitialLaw, TrainConfig, HORIZON,
    KERNEL_WIDTH, LATENT_DIM, STEP,
};
use crate::model::{AnyModel, ModelKind};
use crate::neural_sve::NeuralSveModel;
use crate::paths::{BrownianPath, PathDataset, TimeGrid};
use crate::stability::{stability_scan, Channel, PerturbationPlan};

pub const OUT_ENV: &str = "VOLTERRA_NET_OUT";
const MODEL_STEM: &str = "model";
/// Initial value used for DeepONet runs, whose input is the noise alone.
const DEEPONET_START: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Generate,
    Train,
    Eval,
    Stability,
    Simulate,
}

fn default_experiment() -> Benchmark {
    Benchmark::Pendulum
}
fn default_model() -> ModelKind {
    ModelKind::Nsve
}
fn default_n() -> usize {
    100
}
fn default_width() -> usize {
    LATENT_DIM
}
fn default_kernel_width() -> usize {
    KERNEL_WIDTH
}
fn default_channel() -> Channel {
    Channel::Drift
}
fn default_p() -> f64 {
    2.0
}
fn default_n_mc() -> usize {
    10_000
}
fn default_dumps() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default = "default_experiment")]
    pub experiment: Benchmark,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_width")]
    pub d_h: usize,
    #[serde(rename = "d_K", default = "default_kernel_width")]
    pub d_k: usize,
    #[serde(default)]
    pub deeponet: Option<DeepOnetConfig>,
    /// Output root; falls back to `$VOLTERRA_NET_OUT`, then `runs`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Run directory name under the output root.
    #[serde(default)]
    pub name: Option<String>,
    /// Directory holding a saved model, for `eval`.
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    #[serde(default = "default_channel")]
    pub channel: Channel,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    /// Number of test-set prediction/target pairs written after training.
    #[serde(default = "default_dumps")]
    pub dump_paths: usize,
}

impl RunConfig {
    /// Parse a JSON object and apply `--key=value` overrides. Values are read
    /// as JSON when possible and as plain strings otherwise.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config {
            key: String::new(),
            msg: format!("invalid JSON: {e}"),
        })?;
        let obj = value.as_object_mut().ok_or_else(|| Error::Config {
            key: String::new(),
            msg: "configuration must be a JSON object".into(),
        })?;
        for (k, v) in overrides {
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
            obj.insert(k.clone(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or_default()
                .to_string();
            Error::Config { key, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = match self.experiment {
            Benchmark::Ou2d => &[ModelKind::Nsve][..],
            Benchmark::PathDependent => &[ModelKind::Nsve, ModelKind::Nsde][..],
            _ => &[ModelKind::Nsve, ModelKind::Nsde, ModelKind::Deeponet][..],
        };
        if !allowed.contains(&self.model) {
            return Err(Error::Config {
                key: "model".into(),
                msg: format!(
                    "model `{}` is not used for experiment `{}`",
                    self.model.as_str(),
                    self.experiment.as_str()
                ),
            });
        }
        if self.command == Command::Eval && self.model_dir.is_none() {
            return Err(Error::Config {
                key: "model_dir".into(),
                msg: "eval needs `model_dir`".into(),
            });
        }
        if let Some(dir) = &self.model_dir {
            if self.command == Command::Eval && !dir.join(format!("{MODEL_STEM}.json")).is_file() {
                return Err(Error::Config {
                    key: "model_dir".into(),
                    msg: format!("no saved model in {}", dir.display()),
                });
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon.unwrap_or(HORIZON), self.dt.unwrap_or(STEP))
    }

    pub fn spec(&self) -> ExperimentSpec {
        let spec = ExperimentSpec::new(self.experiment);
        if self.model == ModelKind::Deeponet {
            spec.with_deterministic_start(DEEPONET_START)
        } else {
            spec
        }
    }

    fn deeponet_config(&self) -> DeepOnetConfig {
        self.deeponet.clone().unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::for_size(self.n, self.seed);
        if self.model == ModelKind::Deeponet {
            let don = self.deeponet_config();
            cfg.lr = don.lr;
            cfg.epochs *= don.epoch_multiplier;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg
    }

    pub fn build_model(&self, grid: TimeGrid) -> Result<AnyModel> {
        let spec = self.spec();
        let (d, m) = (spec.problem.d, spec.problem.m);
        Ok(match self.model {
            ModelKind::Nsve => AnyModel::Nsve(NeuralSveModel::new(d, m, self.d_h, self.d_k, self.seed)?),
            ModelKind::Nsde => AnyModel::Nsde(NeuralSdeModel::new(d, m, self.d_h, self.d_k, self.seed)?),
            ModelKind::Deeponet => {
                AnyModel::Deeponet(DeepOnetModel::new(grid, d, m, self.deeponet_config(), self.seed)?)
            }
        })
    }

    fn default_name(&self) -> String {
        let cmd = serde_json::to_value(self.command)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!(
            "{cmd}-{}-{}-n{}-s{}",
            self.experiment.as_str(),
            self.model.as_str(),
            self.n,
            self.seed
        )
    }

    /// Output root: `out`, then `$VOLTERRA_NET_OUT`, then `./runs`.
    pub fn run_dir(&self) -> PathBuf {
        let root = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.name.clone().unwrap_or_else(|| self.default_name()))
    }
}

/// Parsed command line.
#[derive(Debug, Clone)]
pub struct Args {
    pub config: PathBuf,
    pub overrides: Vec<(String, String)>,
    pub threads: Option<usize>,
    pub force: bool,
}

pub const USAGE: &str = "usage: volterra-net <config.json> [--key=value ...] [--threads N] [--force]";

impl Args {
    pub fn parse<I: IntoIterator<Item = String>>(args: I) -> Result<Self> {
        let usage = |msg: String| Error::Config {
            key: String::new(),
            msg: format!("{msg}\n{USAGE}"),
        };
        let mut config = None;
        let mut overrides = Vec::new();
        let mut threads = None;
        let mut force = false;
        let mut it = args.into_iter();
        while let Some(a) = it.next() {
            if a == "--force" {
                force = true;
            } else if a == "--threads" || a.starts_with("--threads=") {
                let v = match a.strip_prefix("--threads=") {
                    Some(v) => v.to_string(),
                    None => it.next().ok_or_else(|| usage("--threads needs a value".into()))?,
                };
                let n: usize = v.parse().map_err(|_| Error::Config {
                    key: "threads".into(),
                    msg: format!("invalid thread count `{v}`"),
                })?;
                if n == 0 {
                    return Err(Error::Config {
                        key: "threads".into(),
                        msg: "thread count must be positive".into(),
                    });
                }
                threads = Some(n);
            } else if let Some(kv) = a.strip_prefix("--") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage(format!("expected --key=value, got `{a}`")))?;
                overrides.push((k.to_string(), v.to_string()));
            } else if config.is_none() {
                config = Some(PathBuf::from(a));
            } else {
                return Err(usage(format!("unexpected argument `{a}`")));
            }
        }
        Ok(Self {
            config: config.ok_or_else(|| usage("missing configuration file".into()))?,
            overrides,
            threads,
            force,
        })
    }
}

/// Process exit status for an error: 2 configuration, 3 numerical, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. }
        | Error::Validation(_)
        | Error::BadDims(_)
        | Error::DimMismatch(_)
        | Error::GridMismatch
        | Error::IncommensurateGrid { .. }
        | Error::IndivisibleFactor { .. }
        | Error::NonPositiveInput(_) => 2,
        Error::NonFinitePath { .. }
        | Error::DivergedLoss { .. }
        | Error::DegenerateFit(_)
        | Error::ZeroTargetNorm { .. }
        | Error::SingularAtZero
        | Error::NonScalarLoss(_)
        | Error::ShapeMismatch(_) => 3,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => 4,
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config {
                key: "name".into(),
                msg: format!("{} exists; pass --force to overwrite", dir.display()),
            });
        }
        if occupied {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

fn write_dataset(dir: &Path, data: &PathDataset) -> Result<()> {
    let w = width(data.len());
    for (i, r) in data.records().iter().enumerate() {
        r.path.write_csv(csv_writer(&dir.join(format!("path_{i:0w$}.csv")))?)?;
        r.noise.write_csv(csv_writer(&dir.join(format!("noise_{i:0w$}.csv")))?)?;
    }
    let xi: Vec<&Vec<f64>> = data.records().iter().map(|r| &r.xi).collect();
    write_json(
        &dir.join("dataset.json"),
        &serde_json::json!({
            "xi": xi,
            "train": data.train_indices(),
            "test": data.test_indices(),
        }),
    )
}

fn echo(cfg: &RunConfig, spec: &ExperimentSpec) -> Value {
    serde_json::json!({
        "config": cfg,
        "experiment": spec,
        "initial_law_convention": InitialLaw::CONVENTION,
    })
}

/// Execute one run and return its output directory.
pub fn run(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    prepare_dir(&dir, force)?;
    let spec = cfg.spec();
    let grid = cfg.grid()?;
    write_json(&dir.join("config.json"), cfg)?;
    match cfg.command {
        Command::Simulate => {
            let w = width(cfg.n);
            for i in 0..cfg.n {
                let noise = BrownianPath::sample_indexed(grid, spec.problem.m, cfg.seed, i as u64)?;
                let xi = spec.initial.sample(cfg.seed, i as u64);
                let path = spec.problem.solve(&xi, &noise).map_err(|e| e.at_sample(i))?;
                path.write_csv(csv_writer(&dir.join(format!("path_{i:0w$}.csv")))?)?;
            }
            write_json(&dir.join("report.json"), &echo(cfg, &spec))?;
        }
        Command::Generate => {
            let data = generate_dataset(&spec, grid, cfg.n, cfg.seed)?;
            write_dataset(&dir, &data)?;
            write_json(&dir.join("report.json"), &echo(cfg, &spec))?;
        }
        Command::Train => {
            let data = generate_dataset(&spec, grid, cfg.n, cfg.seed)?;
            let mut model = cfg.build_model(grid)?;
            let report = train(model.as_dyn_mut(), &data, &cfg.train_config())?;
            report.write_losses_csv(csv_writer(&dir.join("losses.csv"))?)?;
            model.save(&dir, MODEL_STEM)?;
            let test = data.test();
            let shown = &test[..cfg.dump_paths.min(test.len())];
            let preds = model.as_dyn().predict_many(shown)?;
            for (k, (p, r)) in preds.iter().zip(shown).enumerate() {
                p.write_csv(csv_writer(&dir.join(format!("pred_{k}.csv")))?)?;
                r.path.write_csv(csv_writer(&dir.join(format!("target_{k}.csv")))?)?;
            }
            let mut out = echo(cfg, &spec);
            out["train_config"] = serde_json::to_value(&report.config)?;
            out["report"] = serde_json::to_value(&report)?;
            write_json(&dir.join("report.json"), &out)?;
        }
        Command::Eval => {
            let model_dir = cfg.model_dir.as_deref().unwrap_or(Path::new("."));
            let model = AnyModel::load(model_dir, MODEL_STEM)?;
            let data = generate_dataset(&spec, grid, cfg.n, cfg.seed)?;
            let (train_loss, test_loss) = evaluate(model.as_dyn(), &data)?;
            let mut out = echo(cfg, &spec);
            out["metrics"] = serde_json::json!({ "train_loss": train_loss, "test_loss": test_loss });
            write_json(&dir.join("report.json"), &out)?;
        }
        Command::Stability => {
            let mut plan = match cfg.channel {
                Channel::G => PerturbationPlan::g_shift(cfg.n_mc),
                c => PerturbationPlan::new(PerturbationPlan::lipschitz_ou(), c, cfg.n_mc),
            };
            plan.p = cfg.p;
            plan.grid = grid;
            if let Some(eps) = &cfg.eps {
                plan.eps = eps.clone();
            }
            let res = stability_scan(&plan, cfg.seed)?;
            res.write_csv(csv_writer(&dir.join("stability.csv"))?)?;
            let mut out = echo(cfg, &spec);
            out["summary"] = res.summary_json();
            out["result"] = serde_json::to_value(&res)?;
            write_json(&dir.join("stability.json"), &out["summary"])?;
            write_json(&dir.join("report.json"), &out)?;
        }
    }
    Ok(dir)
}

/// Parse arguments, configure the worker pool and run. Returns the exit status.
pub fn main_with_args<I: IntoIterator<Item = String>>(args: I) -> i32 {
    match try_main(args) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn try_main<I: IntoIterator<Item = String>>(args: I) -> Result<PathBuf> {
    let args = Args::parse(args)?;
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Config {
        key: String::new(),
        msg: format!("cannot read {}: {e}", args.config.display()),
    })?;
    let cfg = RunConfig::from_json(&text, &args.overrides)?;
    match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Validation(e.to_string()))?
            .install(|| run(&cfg, args.force)),
        None => run(&cfg, args.force),
    }
}
