use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use diffmoment::edgeworth::{self, EdgeworthDensity};
use diffmoment::harness::{self, StudyConfig};
use diffmoment::nonparam;
use diffmoment::param::{self, ParamContext};
use diffmoment::simulate::{simulate_path, stream_rng, Init, Scheme, SimConfig};
use diffmoment::verify::{self, Status};
use diffmoment::{InvariantLaw, ParametricFamily, Path, ScalarField};

#[derive(Parser)]
#[command(name = "diffmoment", version, about = "Moment estimation for ergodic diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Parametric family: `ou` or `nonlinear`.
    #[arg(long, default_value = "ou")]
    family: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Moment function: x, x2, x4, indicator(<x0>).
    #[arg(long = "F", alias = "f", default_value = "x2")]
    f: String,
}

impl ModelArgs {
    fn family(&self) -> Result<ParametricFamily> {
        Ok(ParametricFamily::from_name(&self.family)?)
    }

    fn field(&self) -> Result<ScalarField> {
        Ok(ScalarField::from_name(&self.f)?)
    }

    fn law(&self) -> Result<Arc<InvariantLaw>> {
        let family = self.family()?;
        let f = self.field()?;
        Ok(Arc::new(param::law_at(&family, self.gamma, &[&f])?))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Euler,
    Milstein,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write it as CSV (first line dt, then values).
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed start; a stationary draw when omitted.
        #[arg(long)]
        x0: Option<f64>,
        #[arg(long, value_enum, default_value = "euler")]
        scheme: SchemeArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate ϑ from one path CSV and print JSON.
    Estimate {
        #[command(flatten)]
        model: ModelArgs,
        /// Path CSV; stdin when omitted.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Efficiency bound of the empirical estimator as JSON.
    Bound {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory for `bound.json` and the `x,M,Q,H` table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normal and Edgeworth densities and CDFs of √T(ϑ* − ϑ) as CSV.
    Edgeworth {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 25.0)]
        horizon: f64,
        #[arg(long, default_value_t = 201)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study from a TOML configuration.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides `outputs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run acceptance criteria (the fast tier by default).
    Verify {
        /// Criteria to run, e.g. `--criteria 1,2,8`.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        /// Run every criterion, including the slow tier.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        threads: Option<usize>,
        /// Directory for `verdict.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(out: Option<&FsPath>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(
    model: &ModelArgs,
    horizon: f64,
    dt: f64,
    seed: u64,
    x0: Option<f64>,
    scheme: SchemeArg,
    out: Option<&FsPath>,
) -> Result<bool> {
    let family = model.family()?;
    family.check_gamma(model.gamma)?;
    let law = InvariantLaw::build(&family.model_at(model.gamma))?;
    let cfg = SimConfig::new(horizon)
        .with_dt(dt)
        .with_seed(seed)
        .with_init(x0.map_or(Init::Stationary, Init::Fixed))
        .with_scheme(match scheme {
            SchemeArg::Euler => Scheme::EulerMaruyama,
            SchemeArg::Milstein => Scheme::Milstein,
        });
    let mut rng = stream_rng(seed, 0, 0);
    let path = simulate_path(law.model(), &cfg, Some(&law), &mut rng)?;
    let mut w = output(out)?;
    path.write_csv(&mut w)?;
    w.flush()?;
    Ok(true)
}

fn estimate(model: &ModelArgs, path: Option<&FsPath>) -> Result<bool> {
    let path = match path {
        Some(p) => Path::read_csv(BufReader::new(
            fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        ))?,
        None => Path::read_csv(io::stdin().lock())?,
    };
    let family = model.family()?;
    let ctx = ParamContext::build(&family, &model.field()?)?;
    let os = param::one_step(&path, &ctx);
    let mle = param::mle(&path, &family);
    let finite = |v: f64| v.is_finite().then_some(v);
    let doc = json!({
        "theta_star": os.theta_star,
        "gamma_star": finite(os.gamma_star),
        "gamma_tilde": finite(os.gamma_tilde),
        "theta_tilde": os.theta_tilde,
        "gamma_mle": mle.gamma,
        "theta_mle": ctx.theta_of(mle.gamma),
        "flags": os.flags,
        "mle_at_boundary": mle.boundary,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(true)
}

fn bound(model: &ModelArgs, out: Option<&FsPath>) -> Result<bool> {
    let law = model.law()?;
    let b = nonparam::build_bound(&law, &model.field()?)?;
    let doc = json!({
        "theta": b.theta(),
        "info": if b.is_degenerate() { None } else { Some(b.info()) },
        "avar": b.avar(),
        "moment_check": b.moment_check(),
    });
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bound.json"), &text)?;
        let mut w = io::BufWriter::new(fs::File::create(dir.join("bound_table.csv"))?);
        writeln!(w, "x,M,Q,H")?;
        for r in b.table() {
            writeln!(w, "{},{},{},{}", r[0], r[1], r[2], r[3])?;
        }
        w.flush()?;
    }
    Ok(true)
}

fn edgeworth_csv(model: &ModelArgs, horizon: f64, points: usize, out: Option<&FsPath>) -> Result<bool> {
    if points < 2 {
        bail!("need at least 2 points");
    }
    let law = model.law()?;
    let f = model.field()?;
    let avar = nonparam::build_bound(&law, &f)?.avar();
    let c3 = edgeworth::skewness_coefficient(&law, &f)?;
    let e = EdgeworthDensity::new(avar, c3, horizon);
    let zmax = 4.0 * avar.sqrt();
    let mut w = output(out)?;
    writeln!(w, "z,normal_density,edgeworth_density,normal_cdf,edgeworth_cdf")?;
    for i in 0..points {
        let z = -zmax + 2.0 * zmax * i as f64 / (points - 1) as f64;
        writeln!(
            w,
            "{z},{},{},{},{}",
            e.normal_density(z),
            e.density(z),
            diffmoment::stats::normal_cdf(z, avar),
            e.cdf(z)
        )?;
    }
    w.flush()?;
    let bound = e.correction_bound(zmax);
    if bound >= 1.0 {
        log::warn!("Edgeworth correction exceeds the normal term within |z| ≤ {zmax:.3}; density may be negative there");
    }
    Ok(true)
}

fn study(config: &FsPath, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> Result<bool> {
    let mut cfg = StudyConfig::load(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(o) = out {
        cfg.outputs = o;
    }
    let res = harness::run_study(&cfg, threads)?;
    let outcomes = verify::study_outcomes(&res);
    let files = harness::report(&res, &outcomes, &cfg.outputs)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    for f in files {
        log::info!("wrote {}", f.display());
    }
    if res.errored + res.clamped > 0 {
        eprintln!("{} replicates errored, {} clamped", res.errored, res.clamped);
    }
    Ok(outcomes.iter().all(|o| o.status != Status::Fail))
}

fn run_verify(criteria: &[u8], all: bool, threads: Option<usize>, out: Option<&FsPath>) -> Result<bool> {
    let ids: Vec<u8> = if all {
        verify::CRITERIA.iter().map(|c| c.0).collect()
    } else if criteria.is_empty() {
        verify::FAST.to_vec()
    } else {
        criteria.to_vec()
    };
    let mut outcomes = Vec::new();
    for id in ids {
        let o = verify::run_criterion(id, threads);
        println!("{}", o.line());
        outcomes.push(o);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verdict.txt"), harness::verdict_table(&outcomes))?;
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate {
            model,
            horizon,
            dt,
            seed,
            x0,
            scheme,
            out,
        } => simulate(model, *horizon, *dt, *seed, *x0, *scheme, out.as_deref()),
        Command::Estimate { model, path } => estimate(model, path.as_deref()),
        Command::Bound { model, out } => bound(model, out.as_deref()),
        Command::Edgeworth {
            model,
            horizon,
            points,
            out,
        } => edgeworth_csv(model, *horizon, *points, out.as_deref()),
        Command::Study {
            config,
            seed,
            threads,
            out,
        } => study(config, *seed, *threads, out.clone()),
        Command::Verify {
            criteria,
            all,
            threads,
            out,
        } => run_verify(criteria, *all, *threads, out.as_deref()),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
