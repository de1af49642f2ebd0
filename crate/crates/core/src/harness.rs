//! Monte Carlo studies: configuration, replicate fan-out, summaries and reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edgeworth::{self, EdgeworthDensity};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::invariant::InvariantLaw;
use crate::model::ParametricFamily;
use crate::nonparam::{self, NonparamBound};
use crate::param::{self, Flag, ParamContext};
use crate::simulate::{simulate_path, stream_rng, SimConfig};
use crate::stats;
use crate::verify::Outcome;

/// Largest share of replicates that may error or clamp before a study fails.
pub const MAX_FAILURE_SHARE: f64 = 0.01;
pub const MIN_REPLICATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Empirical,
    Mle,
    OneStep,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Empirical => "empirical",
            Estimator::Mle => "mle",
            Estimator::OneStep => "one_step",
        }
    }
}

fn default_outputs() -> PathBuf {
    PathBuf::from("study-output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub family: String,
    pub gamma_true: f64,
    #[serde(rename = "F")]
    pub f: String,
    #[serde(rename = "T_list")]
    pub t_list: Vec<f64>,
    pub dt: f64,
    pub replicates: usize,
    pub master_seed: u64,
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.t_list.is_empty() {
            return bad("T_list is empty".into());
        }
        if self.replicates < MIN_REPLICATES {
            return bad(format!("replicates = {} is below {MIN_REPLICATES}", self.replicates));
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected".into());
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return bad(format!("estimator `{}` listed twice", e.name()));
            }
        }
        if !(self.dt > 0.0 && self.dt <= crate::simulate::MAX_DT) {
            return bad(format!("dt = {} outside (0, {}]", self.dt, crate::simulate::MAX_DT));
        }
        for &t in &self.t_list {
            let n = t / self.dt;
            if !(t > 0.0) || (n - n.round()).abs() > 1e-9 * n {
                return bad(format!("T = {t} is not a positive multiple of dt = {}", self.dt));
            }
        }
        ParametricFamily::from_name(&self.family)?.check_gamma(self.gamma_true)?;
        ScalarField::from_name(&self.f)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.outputs = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Everything built once before the replicates fan out.
pub struct Prepared {
    pub family: ParametricFamily,
    pub f: ScalarField,
    pub law: Arc<InvariantLaw>,
    pub bound: NonparamBound,
    pub ctx: Option<ParamContext>,
    pub edgeworth_c3: Option<f64>,
}

impl Prepared {
    pub fn new(config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        let family = ParametricFamily::from_name(&config.family)?;
        let f = ScalarField::from_name(&config.f)?;
        let law = Arc::new(param::law_at(&family, config.gamma_true, &[&f])?);
        let bound = nonparam::build_bound(&law, &f)?;
        let needs_ctx = config
            .estimators
            .iter()
            .any(|e| matches!(e, Estimator::Mle | Estimator::OneStep));
        let ctx = if needs_ctx {
            Some(ParamContext::build(&family, &f)?)
        } else {
            None
        };
        let edgeworth_c3 = edgeworth::skewness_coefficient(&law, &f).ok();
        Ok(Prepared {
            family,
            f,
            law,
            bound,
            ctx,
            edgeworth_c3,
        })
    }

    pub fn theta(&self) -> f64 {
        self.bound.theta()
    }

    /// Limit variance of the standardized estimator.
    pub fn reference_variance(&self, e: Estimator, gamma_true: f64) -> Option<f64> {
        match e {
            Estimator::Empirical => Some(self.bound.avar()),
            _ => self.ctx.as_ref().map(|c| c.param_avar(gamma_true)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub t_index: usize,
    pub replicate: usize,
    /// `√T(est − ϑ)` per configured estimator, `None` when the replicate errored.
    pub values: Vec<Option<f64>>,
    pub gamma_star: Option<f64>,
    pub gamma_tilde: Option<f64>,
    pub gamma_mle: Option<f64>,
    pub flags: Vec<Flag>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub var: Option<f64>,
    pub k3: Option<f64>,
    pub reference_var: Option<f64>,
    pub ks_normal: Option<f64>,
    pub ks_edgeworth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub horizon: f64,
    pub estimator: Estimator,
    pub values: Vec<Option<f64>>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: f64,
    pub avar: f64,
    pub param_avar: Option<f64>,
    pub c3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    /// How replicate generators derive from the master seed.
    pub streams: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub provenance: Provenance,
    pub truth: Truth,
    pub blocks: Vec<Block>,
    pub records: Vec<ReplicateRecord>,
    pub errored: usize,
    pub clamped: usize,
}

impl StudyResult {
    pub fn block(&self, horizon: f64, e: Estimator) -> Option<&Block> {
        self.blocks.iter().find(|b| b.horizon == horizon && b.estimator == e)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Summary statistics of the finite entries of `values`.
pub fn summarize(values: &[Option<f64>], reference_var: Option<f64>, edgeworth: Option<EdgeworthDensity>) -> Summary {
    let xs: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let n = xs.len();
    let finite = |v: f64| v.is_finite().then_some(v);
    let (mean, var, k3) = if n >= 3 {
        let (k1, k2, k3) = stats::k_statistics(&xs);
        (finite(k1), finite(k2), finite(k3))
    } else {
        (None, None, None)
    };
    let mut sorted = xs;
    sorted.sort_by(f64::total_cmp);
    let ks_normal = match (n > 0, reference_var) {
        (true, Some(v)) if v > 0.0 => Some(stats::ks_distance_sorted(&sorted, |z| stats::normal_cdf(z, v))),
        _ => None,
    };
    let ks_edgeworth = edgeworth
        .filter(|_| n > 0)
        .map(|e| stats::ks_distance_sorted(&sorted, |z| e.cdf(z)));
    Summary {
        n,
        mean,
        var,
        k3,
        reference_var,
        ks_normal,
        ks_edgeworth,
    }
}

fn replicate(p: &Prepared, config: &StudyConfig, t_index: usize, r: usize) -> ReplicateRecord {
    let t = config.t_list[t_index];
    let mut rec = ReplicateRecord {
        t_index,
        replicate: r,
        values: vec![None; config.estimators.len()],
        gamma_star: None,
        gamma_tilde: None,
        gamma_mle: None,
        flags: Vec::new(),
        error: None,
    };
    let model = p.law.model();
    let sim = SimConfig::new(t).with_dt(config.dt).with_seed(config.master_seed);
    let mut rng = stream_rng(config.master_seed, t_index as u32, r as u32);
    let path = match simulate_path(model, &sim, Some(&p.law), &mut rng) {
        Ok(path) => path,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let rt = t.sqrt();
    let theta = p.theta();
    for (slot, e) in config.estimators.iter().enumerate() {
        let v = match e {
            Estimator::Empirical => nonparam::empirical_moment(&path, &p.f),
            Estimator::Mle => {
                let ctx = p.ctx.as_ref().expect("context built for mle");
                let m = param::mle(&path, &p.family);
                rec.gamma_mle = Some(m.gamma);
                if m.boundary && !rec.flags.contains(&Flag::BoundaryMaximum) {
                    rec.flags.push(Flag::BoundaryMaximum);
                }
                ctx.theta_of(m.gamma)
            }
            Estimator::OneStep => {
                let ctx = p.ctx.as_ref().expect("context built for one-step");
                let os = param::one_step(&path, ctx);
                rec.gamma_star = Some(os.gamma_star).filter(|g| g.is_finite());
                rec.gamma_tilde = Some(os.gamma_tilde).filter(|g| g.is_finite());
                for fl in os.flags {
                    if !rec.flags.contains(&fl) {
                        rec.flags.push(fl);
                    }
                }
                os.theta_tilde
            }
        };
        rec.values[slot] = Some(rt * (v - theta));
    }
    rec
}

/// Runs every `(T, replicate)` pair. Results do not depend on `threads`:
/// replicate `r` at horizon index `i` always draws from stream `(i, r)` and
/// records are collected in index order.
pub fn run_study(config: &StudyConfig, threads: Option<usize>) -> Result<StudyResult> {
    let prepared = Prepared::new(config)?;
    run_prepared(&prepared, config, threads)
}

pub fn run_prepared(p: &Prepared, config: &StudyConfig, threads: Option<usize>) -> Result<StudyResult> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let r = config.replicates;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..config.t_list.len() * r)
            .into_par_iter()
            .map(|k| replicate(p, config, k / r, k % r))
            .collect()
    });

    let total = records.len();
    let errored = records.iter().filter(|x| x.error.is_some()).count();
    let clamped = records.iter().filter(|x| x.flags.contains(&Flag::Clamped)).count();
    if (errored + clamped) as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::TooManyFailures {
            errored: errored + clamped,
            total,
        });
    }

    let avar = p.bound.avar();
    let mut blocks = Vec::new();
    for (ti, &t) in config.t_list.iter().enumerate() {
        for (slot, &e) in config.estimators.iter().enumerate() {
            let values: Vec<Option<f64>> = records[ti * r..(ti + 1) * r].iter().map(|x| x.values[slot]).collect();
            let edge = match (e, p.edgeworth_c3) {
                (Estimator::Empirical, Some(c3)) => Some(EdgeworthDensity::new(avar, c3, t)),
                _ => None,
            };
            let summary = summarize(&values, p.reference_variance(e, config.gamma_true), edge);
            blocks.push(Block {
                horizon: t,
                estimator: e,
                values,
                summary,
            });
        }
    }
    Ok(StudyResult {
        config: config.clone(),
        provenance: Provenance {
            config_hash: config.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed,
            streams: "ChaCha8(seed = master_seed, stream = t_index << 32 | replicate)".into(),
        },
        truth: Truth {
            theta: p.theta(),
            avar,
            param_avar: p.ctx.as_ref().map(|c| c.param_avar(config.gamma_true)),
            c3: p.edgeworth_c3,
        },
        blocks,
        records,
        errored,
        clamped,
    })
}

/// Writes `summary.json`, `replicates.csv`, `density.csv` and `verdict.txt`
/// into `dir`; returns the paths written.
pub fn report(result: &StudyResult, outcomes: &[Outcome], dir: &FsPath) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let summary = dir.join("summary.json");
    fs::write(&summary, summary_json(result)?)?;
    written.push(summary);

    let csv = dir.join("replicates.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&csv)?);
    write_replicates(result, &mut w)?;
    w.flush()?;
    written.push(csv);

    if let (Some(c3), Some(&t)) = (result.truth.c3, result.config.t_list.first()) {
        if let Some(b) = result.block(t, Estimator::Empirical) {
            let e = EdgeworthDensity::new(result.truth.avar, c3, t);
            let xs: Vec<f64> = b.values.iter().flatten().copied().collect();
            let zmax = 4.0 * result.truth.avar.sqrt();
            let path = dir.join("density.csv");
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            writeln!(w, "z,normal_density,edgeworth_density,empirical_histogram_density")?;
            for row in edgeworth::density_table(&e, &xs, 60, zmax) {
                writeln!(w, "{},{},{},{}", row[0], row[1], row[2], row[3])?;
            }
            w.flush()?;
            written.push(path);
        }
    }

    let verdict = dir.join("verdict.txt");
    fs::write(&verdict, verdict_table(outcomes))?;
    written.push(verdict);
    Ok(written)
}

/// Per-replicate CSV: one row per horizon, estimator and replicate.
pub fn write_replicates<W: Write>(result: &StudyResult, w: &mut W) -> Result<()> {
    writeln!(w, "T,estimator,replicate,value,gamma_star,gamma_tilde,gamma_mle,flags,error")?;
    let r = result.config.replicates;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for (ti, &t) in result.config.t_list.iter().enumerate() {
        for (slot, e) in result.config.estimators.iter().enumerate() {
            for rec in &result.records[ti * r..(ti + 1) * r] {
                let flags: Vec<String> = rec.flags.iter().map(|f| format!("{f:?}")).collect();
                writeln!(
                    w,
                    "{t},{},{},{},{},{},{},{},{}",
                    e.name(),
                    rec.replicate,
                    opt(rec.values[slot]),
                    opt(rec.gamma_star),
                    opt(rec.gamma_tilde),
                    opt(rec.gamma_mle),
                    flags.join(";"),
                    rec.error.as_deref().unwrap_or("").replace(',', ";")
                )?;
            }
        }
    }
    Ok(())
}

/// The summary document: everything in the result except the raw records.
pub fn summary_json(result: &StudyResult) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a StudyConfig,
        provenance: &'a Provenance,
        truth: &'a Truth,
        errored: usize,
        clamped: usize,
        summaries: Vec<(f64, &'static str, &'a Summary)>,
    }
    let doc = Doc {
        config: &result.config,
        provenance: &result.provenance,
        truth: &result.truth,
        errored: result.errored,
        clamped: result.clamped,
        summaries: result
            .blocks
            .iter()
            .map(|b| (b.horizon, b.estimator.name(), &b.summary))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// One line per registered criterion; criteria absent from `outcomes` are
/// listed as skipped.
pub fn verdict_table(outcomes: &[Outcome]) -> String {
    let mut s = String::new();
    for (id, title) in crate::verify::CRITERIA {
        match outcomes.iter().find(|o| o.id == id) {
            Some(o) => {
                let _ = writeln!(s, "{:>2}  {:<4}  {title}: {}", id, o.status.label(), o.detail);
            }
            None => {
                let _ = writeln!(s, "{id:>2}  SKIP  {title}: not evaluated in this run");
            }
        }
    }
    s
}
