//! Multi-run experiments: configuration, the runner, result records and
//! aggregation.
//!
//! Within a run every method sees the same observed dataset and the same ABC
//! particles (common random numbers). Seeds for run `r` derive from
//! `derive(seed, RUN, r)`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abc::{self, GenerativeModel, Particle, SummaryStatistic};
use crate::baselines::{self, FeatureMap, K2Summary};
use crate::distreg::{self, CvConfig, Hyperparameters, LabeledBag, Variant};
use crate::embeddings::SplitBag;
use crate::seed::{self, streams};
use crate::simulators::{BlowflyModel, LvModel, ModelId, Simulator, ToyModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullDr,
    CondDr,
    K2,
    Sa,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FullDr => "full_dr",
            Method::CondDr => "cond_dr",
            Method::K2 => "k2",
            Method::Sa => "sa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full_dr" => Ok(Method::FullDr),
            "cond_dr" => Ok(Method::CondDr),
            "k2" => Ok(Method::K2),
            "sa" => Ok(Method::Sa),
            other => Err(Error::invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

/// When the distribution-regression grid search runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Grid search on every run's training set.
    #[default]
    PerRun,
    /// Grid search on the first run only; later runs refit with the selected
    /// hyperparameters on their own training sets.
    FirstRun,
}

fn default_methods() -> Vec<Method> {
    vec![Method::CondDr]
}
fn default_f() -> usize {
    100
}
fn default_runs() -> usize {
    20
}
fn default_pilots() -> usize {
    50
}
/// `10^linspace(-4, 1, 10)`, the regularizer grid.
pub fn default_epsilon_grid() -> Vec<f64> {
    CvConfig::default().regularizers()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelId,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Training datasets for distribution regression.
    pub l: usize,
    /// ABC particles.
    pub m: usize,
    /// Points per dataset.
    pub n: usize,
    #[serde(default = "default_f")]
    pub f: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Parameter generating the observed data; defaults per model.
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub cv_mode: CvMode,
    #[serde(default)]
    pub seed: u64,
    /// Results CSV; a `.jsonl` log is written next to it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Fixed soft threshold. When absent it is chosen per run and method by
    /// leave-one-out pilots over the particles.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Candidate thresholds for pilot selection.
    #[serde(default = "default_epsilon_grid")]
    pub epsilon_grid: Vec<f64>,
    #[serde(default = "default_pilots")]
    pub pilots: usize,
    #[serde(default)]
    pub sa_features: FeatureMap,
    /// SA-ABC training datasets; defaults to `m`.
    #[serde(default)]
    pub sa_train: Option<usize>,
    #[serde(default)]
    pub toy: Option<ToyModel>,
    #[serde(default)]
    pub blowfly: Option<BlowflyModel>,
    #[serde(default)]
    pub lv: Option<LvModel>,
}

impl ExperimentConfig {
    /// Minimal config with defaults for everything optional.
    pub fn new(model: ModelId, methods: Vec<Method>, l: usize, m: usize, n: usize) -> Self {
        Self {
            model,
            methods,
            l,
            m,
            n,
            f: default_f(),
            runs: default_runs(),
            theta_star: None,
            cv: CvConfig::default(),
            cv_mode: CvMode::default(),
            seed: 0,
            output: None,
            epsilon: None,
            epsilon_grid: default_epsilon_grid(),
            pilots: default_pilots(),
            sa_features: FeatureMap::default(),
            sa_train: None,
            toy: None,
            blowfly: None,
            lv: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l", self.l), ("m", self.m), ("n", self.n), ("f", self.f), ("runs", self.runs)] {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if !self.f.is_multiple_of(2) {
            return Err(Error::Config("`f` must be even".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("`methods` must not be empty".into()));
        }
        let dr = self.methods.iter().any(|m| matches!(m, Method::FullDr | Method::CondDr));
        if dr && self.l < self.cv.folds {
            return Err(Error::Config(format!("`l` = {} is fewer than cv.folds = {}", self.l, self.cv.folds)));
        }
        self.cv.validate().map_err(|e| Error::Config(format!("cv: {e}")))?;
        if let Some(eps) = self.epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Config("`epsilon` must be positive".into()));
            }
        } else if self.epsilon_grid.is_empty() || self.epsilon_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config("`epsilon_grid` must be non-empty and positive".into()));
        }
        if self.pilots == 0 {
            return Err(Error::Config("`pilots` must be at least 1".into()));
        }
        if self.sa_train == Some(0) {
            return Err(Error::Config("`sa_train` must be at least 1".into()));
        }
        self.sa_features.validate().map_err(|e| Error::Config(format!("sa_features: {e}")))?;
        let tables = [
            (ModelId::Toy, self.toy.is_some()),
            (ModelId::Blowfly, self.blowfly.is_some()),
            (ModelId::Lv, self.lv.is_some()),
        ];
        if let Some((id, _)) = tables.iter().find(|(id, set)| *set && *id != self.model) {
            return Err(Error::Config(format!("table `[{id}]` given but model is `{}`", self.model)));
        }
        let sim = self.simulator();
        sim.validate().map_err(|e| Error::Config(format!("{}: {e}", self.model)))?;
        let theta = self.theta_star();
        if theta.len() != sim.param_dim() {
            return Err(Error::Config(format!(
                "`theta_star` has {} entries, model `{}` has {} parameters",
                theta.len(),
                self.model,
                sim.param_dim()
            )));
        }
        Ok(())
    }

    /// The configured simulator, with `n` taken from the top level.
    pub fn simulator(&self) -> Simulator {
        match self.model {
            ModelId::Toy => Simulator::Toy(ToyModel { n: self.n, ..self.toy.unwrap_or_default() }),
            ModelId::Blowfly => Simulator::Blowfly(BlowflyModel { n: self.n, ..self.blowfly.unwrap_or_default() }),
            ModelId::Lv => Simulator::Lv(LvModel { n: self.n, ..self.lv.unwrap_or_default() }),
        }
    }

    pub fn theta_star(&self) -> Vec<f64> {
        self.theta_star.clone().unwrap_or_else(|| self.simulator().default_theta())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output`.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&ExperimentConfig { output: None, ..self.clone() }).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// Records

/// One method on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub digest: String,
    pub model: ModelId,
    pub run: usize,
    pub method: Method,
    pub l: usize,
    pub m: usize,
    pub n: usize,
    pub run_seed: u64,
    /// Empty when the run failed.
    pub theta_hat: Vec<f64>,
    pub squared_error: Option<f64>,
    pub epsilon: Option<f64>,
    pub ess: Option<f64>,
    pub error: Option<String>,
    pub seconds: f64,
}

impl ResultRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Flat CSV row; vectors are `;`-joined.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    digest: String,
    model: String,
    run: usize,
    method: String,
    l: usize,
    m: usize,
    n: usize,
    run_seed: u64,
    status: String,
    theta_hat: String,
    squared_error: Option<f64>,
    epsilon: Option<f64>,
    ess: Option<f64>,
    error: String,
    seconds: f64,
}

impl From<&ResultRecord> for CsvRow {
    fn from(r: &ResultRecord) -> Self {
        Self {
            digest: r.digest.clone(),
            model: r.model.to_string(),
            run: r.run,
            method: r.method.name().into(),
            l: r.l,
            m: r.m,
            n: r.n,
            run_seed: r.run_seed,
            status: if r.ok() { "ok" } else { "failed" }.into(),
            theta_hat: r.theta_hat.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";"),
            squared_error: r.squared_error,
            epsilon: r.epsilon,
            ess: r.ess,
            error: r.error.clone().unwrap_or_default(),
            seconds: r.seconds,
        }
    }
}

impl TryFrom<CsvRow> for ResultRecord {
    type Error = Error;

    fn try_from(r: CsvRow) -> Result<Self> {
        let theta_hat = if r.theta_hat.is_empty() {
            Vec::new()
        } else {
            r.theta_hat
                .split(';')
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("theta_hat `{t}`: {e}"))))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            digest: r.digest,
            model: r.model.parse()?,
            run: r.run,
            method: Method::parse(&r.method)?,
            l: r.l,
            m: r.m,
            n: r.n,
            run_seed: r.run_seed,
            theta_hat,
            squared_error: r.squared_error,
            epsilon: r.epsilon,
            ess: r.ess,
            error: if r.status == "ok" { None } else { Some(r.error) },
            seconds: r.seconds,
        })
    }
}

/// Appends records to a CSV file and a JSON-lines log. Existing content is
/// never rewritten.
pub struct RecordSink {
    csv: csv::Writer<std::fs::File>,
    log: std::fs::File,
}

impl RecordSink {
    pub fn open(csv_path: &Path) -> Result<Self> {
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = std::fs::metadata(csv_path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(csv_path)?;
        let csv = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        let log = OpenOptions::new().create(true).append(true).open(log_path(csv_path))?;
        Ok(Self { csv, log })
    }

    pub fn append(&mut self, rec: &ResultRecord) -> Result<()> {
        self.csv.serialize(CsvRow::from(rec))?;
        self.csv.flush()?;
        writeln!(self.log, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }
}

pub fn log_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("jsonl")
}

pub fn read_records(csv_path: &Path) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(csv_path)?;
    rdr.deserialize::<CsvRow>()
        .map(|row| ResultRecord::try_from(row?))
        .collect()
}

// ---------------------------------------------------------------------------
// Runner

/// Everything a method needs for one run.
struct RunData<'a> {
    sim: &'a Simulator,
    observed: SplitBag,
    particles: Vec<Particle>,
    thetas: Vec<Vec<f64>>,
    run_seed: u64,
}

fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    data: &RunData<'_>,
    train: &mut Option<Vec<LabeledBag<SplitBag>>>,
    hyper: &mut BTreeMap<Method, Hyperparameters>,
    run: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    let summary: Box<dyn SummaryStatistic> = match method {
        Method::FullDr | Method::CondDr => {
            let train = match train {
                Some(t) => t,
                None => {
                    let p = abc::simulate_labeled(data.sim, cfg.l, data.run_seed, streams::TRAIN_PRIOR, streams::TRAIN_SIM)?;
                    train.insert(p.into_iter().map(|p| LabeledBag::new(p.theta, p.data)).collect())
                }
            };
            let variant = if method == Method::FullDr { Variant::Full } else { Variant::Conditional };
            let model_seed = seed::derive(data.run_seed, streams::RFF, 0);
            let h = match (cfg.cv_mode, hyper.get(&method)) {
                (CvMode::FirstRun, Some(h)) if run > 0 => *h,
                _ => distreg::cross_validate(train, &cfg.cv, variant, cfg.f, model_seed)?.hyperparameters,
            };
            hyper.insert(method, h);
            Box::new(distreg::fit_with(train, &h, cfg.f, model_seed)?)
        }
        Method::K2 => Box::new(K2Summary::from_observed(&data.observed, cfg.f, data.run_seed)?),
        Method::Sa => Box::new(baselines::train_sa_abc(
            data.sim,
            cfg.sa_train.unwrap_or(cfg.m),
            cfg.sa_features,
            data.run_seed,
        )?),
    };
    let s_obs = summary.summarize(&data.observed)?;
    let summaries = abc::summarize_all(summary.as_ref(), &data.particles)?;
    let eps = match cfg.epsilon {
        Some(e) => e,
        None => abc::select_epsilon(&data.thetas, &summaries, &cfg.epsilon_grid, cfg.pilots)?,
    };
    let post = abc::weigh(&data.thetas, &summaries, &s_obs, eps)?;
    Ok((abc::posterior_mean(&post), eps, post.effective_sample_size()))
}

fn prepare_run<'a>(sim: &'a Simulator, cfg: &ExperimentConfig, theta: &[f64], run_seed: u64) -> Result<RunData<'a>> {
    let observed = sim.simulate(theta, seed::derive(run_seed, streams::OBSERVED, 0))?;
    let particles = abc::simulate_particles(sim, cfg.m, run_seed)?;
    let thetas = particles.iter().map(|p| p.theta.clone()).collect();
    Ok(RunData { sim, observed, particles, thetas, run_seed })
}

/// Run every configured method on every run, handing each record to `emit`
/// as soon as it is complete. Stage failures become failed records.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut emit: F) -> Result<Vec<ResultRecord>>
where
    F: FnMut(&ResultRecord) -> Result<()>,
{
    cfg.validate()?;
    let sim = cfg.simulator();
    let theta = cfg.theta_star();
    let digest = cfg.digest();
    let mut hyper = BTreeMap::new();
    let mut out = Vec::with_capacity(cfg.runs * cfg.methods.len());
    for run in 0..cfg.runs {
        let run_seed = seed::derive(cfg.seed, streams::RUN, run as u64);
        let start = Instant::now();
        let data = prepare_run(&sim, cfg, &theta, run_seed);
        let setup = start.elapsed().as_secs_f64();
        let mut train = None;
        for &method in &cfg.methods {
            let t0 = Instant::now();
            let result = match &data {
                Ok(d) => run_method(cfg, method, d, &mut train, &mut hyper, run).map_err(|e| e.to_string()),
                Err(e) => Err(format!("run setup failed: {e}")),
            };
            let mut rec = ResultRecord {
                digest: digest.clone(),
                model: cfg.model,
                run,
                method,
                l: cfg.l,
                m: cfg.m,
                n: cfg.n,
                run_seed,
                theta_hat: Vec::new(),
                squared_error: None,
                epsilon: None,
                ess: None,
                error: None,
                seconds: setup + t0.elapsed().as_secs_f64(),
            };
            match result {
                Ok((est, eps, ess)) => {
                    rec.squared_error = Some(est.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum());
                    rec.theta_hat = est;
                    rec.epsilon = Some(eps);
                    rec.ess = Some(ess);
                }
                Err(msg) => rec.error = Some(msg),
            }
            emit(&rec)?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Run and append to `cfg.output` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    match &cfg.output {
        Some(path) => {
            let mut sink = RecordSink::open(path)?;
            run_experiment_with(cfg, |r| sink.append(r))
        }
        None => run_experiment_with(cfg, |_| Ok(())),
    }
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelId,
    pub method: Method,
    pub l: usize,
    pub m: usize,
    pub runs: usize,
    pub failed: usize,
    pub mean_mse: f64,
    pub std_error: f64,
}

type GroupKey<'a> = (&'a str, Method, usize, usize);

/// Mean squared error and its standard error per (model, method, L, M).
/// Failed records are excluded and counted.
pub fn aggregate(records: &[ResultRecord]) -> Result<Vec<SummaryRow>> {
    // Errors of successful runs, failure count and model per group.
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, usize, ModelId)> = BTreeMap::new();
    for r in records {
        let g = groups.entry((r.model.as_str(), r.method, r.l, r.m)).or_insert((Vec::new(), 0, r.model));
        match (r.ok(), r.squared_error) {
            (true, Some(e)) => g.0.push(e),
            _ => g.1 += 1,
        }
    }
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .filter(|(_, (errs, _, _))| !errs.is_empty())
        .map(|((_, method, l, m), (mut errs, failed, model))| {
            // Sorting makes the sums independent of record order.
            errs.sort_by(f64::total_cmp);
            let k = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / k;
            let std_error = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            SummaryRow { model, method, l, m, runs: errs.len(), failed, mean_mse: mean, std_error }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty("successful records"));
    }
    Ok(rows)
}

pub fn write_summary_table(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Tab-separated `series  M  mean_mse  std_error`, one series per
/// method and L, sorted by M.
pub fn write_plot_data(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.model, r.method, r.l, r.m));
    let mut out = String::from("series\tm\tmean_mse\tstd_error\n");
    for r in sorted {
        out.push_str(&format!(
            "{}/{}/L={}\t{}\t{:e}\t{:e}\n",
            r.model,
            r.method.name(),
            r.l,
            r.m,
            r.mean_mse,
            r.std_error
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
