use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ifm_core::experiments::{emit_plot, run_checks, run_sweep, CheckConfig, ErmBattery, FaultInjection, IrmBattery, Mode, PlotStyle, ShrinkBattery, SweepConfig, SweepResult};
use ifm_core::rng::{stream, Purpose};
use ifm_core::{
    analytic_moments, coral_fit, erm_fit, flip_test_environment, ifm_run, irm_fit, oracle_w_star, sample_dataset, sample_environments,
    simple_algo, zero_one_accuracy, Algorithm, IfmInput, ModelSpec,
};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ifm-lab", version, about = "Feature matching experiments on the two-block Gaussian model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, env = "IFM_LAB_SEED")]
    seed: Option<u64>,
    /// `analytic` or `sampled:<n>`.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory; stdout when omitted (gen, run, check).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a problem instance as JSON.
    Gen {
        #[arg(long)]
        random_mixing: bool,
    },
    /// Train one algorithm on freshly drawn environments and report its accuracies.
    Run {
        #[arg(long, default_value = "ifm")]
        algorithm: Algorithm,
        /// Problem instance from `gen`; built from the sweep configuration otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        envs: usize,
    },
    /// Run a sweep and write results.csv, plot.svg, plot.csv and summary.json.
    Sweep,
    /// Run theory-check batteries; exits nonzero if any check fails.
    Check {
        #[arg(long)]
        erm: bool,
        #[arg(long)]
        irm: bool,
        #[arg(long)]
        shrink: bool,
        #[arg(long)]
        fault: Option<String>,
    },
    /// Render a results CSV.
    Plot {
        input: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn sweep_config(cli: &Cli) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = match &cli.config {
        Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SweepConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { random_mixing } => {
            let cfg = sweep_config(cli)?;
            let mut spec = cfg.spec(cfg.seed)?;
            if *random_mixing {
                spec = spec.with_random_mixing();
            }
            emit(cli.out.as_deref(), "spec.json", &serde_json::to_string_pretty(&spec)?)?;
            Ok(true)
        }
        Command::Run { algorithm, spec, envs } => run_one(cli, *algorithm, spec.as_deref(), *envs),
        Command::Sweep => {
            let cfg = sweep_config(cli)?;
            let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("sweep_out"));
            let res = run_sweep(&cfg, cli.jobs)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("results.csv"), res.to_csv()?)?;
            let plot = emit_plot(&res, &PlotStyle::default())?;
            fs::write(out.join("plot.svg"), &plot.svg)?;
            fs::write(out.join("plot.csv"), &plot.csv)?;
            let summary = json!({ "config": cfg, "rows": res.rows.len(), "errors": res.errors });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            eprintln!("{} rows, {} failed cells -> {}", res.rows.len(), res.errors.len(), out.display());
            Ok(true)
        }
        Command::Check { erm, irm, shrink, fault } => {
            let mut cfg: CheckConfig = match &cli.config {
                Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None if !(*erm || *irm || *shrink) => CheckConfig::full(0),
                None => CheckConfig {
                    erm: erm.then(ErmBattery::default),
                    irm: irm.then(IrmBattery::default),
                    shrink: shrink.then(ShrinkBattery::default),
                    ..Default::default()
                },
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(f) = fault {
                cfg.fault = Some(serde_json::from_value::<FaultInjection>(json!(f)).with_context(|| format!("unknown fault `{f}`"))?);
            }
            let pool = rayon_pool(cli.jobs)?;
            let report = pool.install(|| run_checks(&cfg))?;
            emit(cli.out.as_deref(), "report.json", &report.to_json()?)?;
            Ok(report.passed)
        }
        Command::Plot { input, title } => {
            let text = read_text(input)?;
            let res = SweepResult::from_csv(&text)?;
            let mut style = PlotStyle::default();
            if let Some(t) = title {
                style.title = t.clone();
            }
            let plot = emit_plot(&res, &style)?;
            let out = cli.out.clone().unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&out)?;
            fs::write(out.join("plot.svg"), &plot.svg)?;
            fs::write(out.join("plot.csv"), &plot.csv)?;
            Ok(true)
        }
    }
}

fn rayon_pool(jobs: usize) -> Result<ifm_core::experiments::ThreadPool> {
    Ok(ifm_core::experiments::thread_pool(jobs)?)
}

fn run_one(cli: &Cli, alg: Algorithm, spec_path: Option<&Path>, n_envs: usize) -> Result<bool> {
    let cfg = sweep_config(cli)?;
    if n_envs < 2 {
        bail!("at least 2 training environments are needed");
    }
    let spec: ModelSpec = match spec_path {
        Some(p) => {
            let s: ModelSpec = serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
            s.validate()?;
            s
        }
        None => cfg.spec(cfg.seed)?,
    };
    let train = sample_environments(&spec, n_envs, &cfg.sampler())?;
    let test = train.iter().map(flip_test_environment).collect::<ifm_core::Result<Vec<_>>>()?;
    let data = || {
        train
            .iter()
            .enumerate()
            .map(|(i, env)| sample_dataset(&spec, env, cfg.data_samples(), &mut stream(spec.seed, Purpose::TrainData, i as u64)))
            .collect::<ifm_core::Result<Vec<_>>>()
    };
    let mut g = stream(spec.seed, Purpose::Cell, alg as u64);
    let pred = match alg {
        Algorithm::Ifm => match cfg.mode {
            Mode::Analytic => {
                let m: Vec<_> = train.iter().map(|e| analytic_moments(&spec, e)).collect();
                ifm_run(IfmInput::Moments(&m), &cfg.ifm_config(), &mut g)?
            }
            Mode::Sampled { .. } => ifm_run(IfmInput::Datasets(&data()?), &cfg.ifm_config(), &mut g)?,
        },
        Algorithm::Simple => simple_algo(&analytic_moments(&spec, &train[0]), &analytic_moments(&spec, &train[1]), spec.d_s)?,
        Algorithm::Oracle => oracle_w_star(&spec)?,
        Algorithm::Erm => erm_fit(&data()?, &cfg.optimizer)?,
        Algorithm::Irm => irm_fit(&data()?, cfg.irm_penalty, &cfg.optimizer)?,
        Algorithm::Coral => coral_fit(&data()?, &cfg.coral, &cfg.optimizer, &mut g)?,
        Algorithm::CoralDisjoint => coral_fit(&data()?, &cfg.coral_disjoint, &cfg.optimizer, &mut g)?,
    };
    let clf = pred.classifier();
    let acc = |envs: &[ifm_core::EnvParams]| envs.iter().map(|e| zero_one_accuracy(&clf, &spec, e)).collect::<Vec<_>>();
    let report = json!({
        "algorithm": alg,
        "train_accuracy": acc(&train),
        "test_accuracy": acc(&test),
        "oracle_accuracy": spec.oracle_accuracy(),
        "spurious_leak": ifm_core::theory_checks::spurious_leak_vector(&pred.v, &spec)?,
        "predictor": pred,
    });
    emit(cli.out.as_deref(), "run.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(true)
}
