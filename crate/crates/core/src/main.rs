use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use distreg_abc::abc::{self, GenerativeModel};
use distreg_abc::distreg::{self, CvConfig, LabeledBag, RegressionModel, Variant};
use distreg_abc::harness::{self, Method};
use distreg_abc::seed::{self, streams};
use distreg_abc::simulators::{self, ModelId, Simulator};

#[derive(Parser)]
#[command(name = "distreg-abc", version, about = "ABC with distribution-regression summary statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training data, cross-validate and write a model file.
    Fit(FitArgs),
    /// Run soft-threshold ABC from a model file and an observed-data file.
    Abc(AbcArgs),
    /// Run a multi-run experiment from a TOML config.
    Experiment(ExperimentArgs),
    /// Summarize a results CSV.
    Aggregate(AggregateArgs),
    /// Write a simulated observed-data file.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Conditional,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, value_enum, default_value = "conditional")]
    variant: VariantArg,
    /// Training datasets.
    #[arg(long, default_value_t = 100)]
    l: usize,
    /// Points per dataset.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Random Fourier features per map.
    #[arg(long, default_value_t = 100)]
    f: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with a cross-validation grid; defaults to the full grid.
    #[arg(long)]
    cv: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct AbcArgs {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    observed: PathBuf,
    #[arg(long, default_value = "toy")]
    model: String,
    /// Points per simulated dataset; defaults to the observed size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    m: usize,
    /// Soft threshold; chosen by pilot runs when omitted.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write particles and weights as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of full_dr, cond_dr, k2, sa.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Summary table (CSV); printed to stdout when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Plot data (TSV).
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    /// Comma-separated parameter vector; the model default when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

fn simulator(model: &str, n: usize) -> anyhow::Result<Simulator> {
    let id: ModelId = model.parse()?;
    Ok(Simulator::default_for(id).with_n(n))
}

fn fit(a: FitArgs) -> anyhow::Result<()> {
    let sim = simulator(&a.model, a.n)?;
    let cv = match &a.cv {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<CvConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CvConfig::default(),
    };
    let particles = abc::simulate_particles(&sim, a.l, seed::derive(a.seed, streams::TRAIN_PRIOR, 0))?;
    let train: Vec<_> = particles.into_iter().map(|p| LabeledBag::new(p.theta, p.data)).collect();
    let variant = match a.variant {
        VariantArg::Full => Variant::Full,
        VariantArg::Conditional => Variant::Conditional,
    };
    let model_seed = seed::derive(a.seed, streams::RFF, 0);
    let outcome = distreg::cross_validate(&train, &cv, variant, a.f, model_seed)?;
    let model = distreg::fit_with(&train, &outcome.hyperparameters, a.f, model_seed)?;
    model.save(&a.out)?;
    eprintln!(
        "selected {:?} (cv error {:.4e} over {} grid points)",
        outcome.hyperparameters, outcome.error, outcome.grid_points
    );
    println!("{}", a.out.display());
    Ok(())
}

fn run_abc(a: AbcArgs) -> anyhow::Result<()> {
    let model = RegressionModel::load(&a.model_file)?;
    let observed = simulators::read_observed(&a.observed)?;
    let sim = simulator(&a.model, a.n.unwrap_or(observed.len()))?;
    if model.theta_dim() != sim.param_dim() {
        bail!(
            "model file predicts {} parameters but `{}` has {}",
            model.theta_dim(),
            a.model,
            sim.param_dim()
        );
    }
    let particles = abc::simulate_particles(&sim, a.m, a.seed)?;
    let thetas: Vec<_> = particles.iter().map(|p| p.theta.clone()).collect();
    let summaries = abc::summarize_all(&model, &particles)?;
    let s_obs = model.summarize(&observed)?;
    let epsilon = match a.epsilon {
        Some(e) => e,
        None => abc::select_epsilon(&thetas, &summaries, &harness::default_epsilon_grid(), 50)?,
    };
    let post = abc::weigh(&thetas, &summaries, &s_obs, epsilon)?;
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)?;
        for (theta, weight) in post.iter() {
            let mut row: Vec<String> = theta.iter().map(|v| v.to_string()).collect();
            row.push(weight.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    let mean = abc::posterior_mean(&post);
    println!("epsilon\t{epsilon:e}");
    println!("ess\t{:.2}", post.effective_sample_size());
    println!(
        "posterior_mean\t{}",
        mean.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("\t")
    );
    Ok(())
}

fn experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = harness::load_config(&a.config)?;
    if let Some(o) = a.output {
        cfg.output = Some(o);
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(ms) = a.methods {
        cfg.methods = ms.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?;
    }
    cfg.l = a.l.unwrap_or(cfg.l);
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.f = a.f.unwrap_or(cfg.f);
    cfg.validate()?;
    let mut sink = cfg.output.as_deref().map(harness::RecordSink::open).transpose()?;
    let records = harness::run_experiment_with(&cfg, |r| {
        match (&r.error, r.squared_error) {
            (None, Some(e)) => eprintln!("run {:>3} {:<8} sq.err {e:.4e} ({:.1}s)", r.run, r.method.name(), r.seconds),
            (Some(msg), _) => eprintln!("run {:>3} {:<8} FAILED: {msg}", r.run, r.method.name()),
            _ => {}
        }
        match &mut sink {
            Some(s) => s.append(r),
            None => Ok(()),
        }
    })?;
    match harness::aggregate(&records) {
        Ok(rows) => print_rows(&rows),
        Err(e) => bail!("no successful runs: {e}"),
    }
    Ok(())
}

fn print_rows(rows: &[harness::SummaryRow]) {
    println!("model\tmethod\tL\tM\truns\tfailed\tmean_mse\tstd_error");
    for r in rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}",
            r.model,
            r.method.name(),
            r.l,
            r.m,
            r.runs,
            r.failed,
            r.mean_mse,
            r.std_error
        );
    }
}

fn aggregate(a: AggregateArgs) -> anyhow::Result<()> {
    let records = harness::read_records(&a.input)?;
    let rows = harness::aggregate(&records)?;
    match &a.table {
        Some(p) => harness::write_summary_table(&rows, p)?,
        None => print_rows(&rows),
    }
    if let Some(p) = &a.plot {
        harness::write_plot_data(&rows, p)?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let sim = simulator(&a.model, a.n)?;
    let theta = a.theta.unwrap_or_else(|| sim.default_theta());
    let data = sim.simulate(&theta, a.seed)?;
    simulators::write_observed(&a.out, &data)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Abc(a) => run_abc(a),
        Command::Experiment(a) => experiment(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
