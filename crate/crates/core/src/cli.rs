//! The `loggas` command line: subcommands, experiment configs, report files.
//!
//! Logs go to stderr as `key=value` records. Summaries go to stdout as JSON.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 a
//! check requested with `--assert` failed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::convexify::{self, ConvexifyParams, NuModel, QForm};
use crate::diagnostics::{self, Bump};
use crate::equilibrium::{EquilibriumMeasure, EquilibriumSummary};
use crate::potentials::Potential;
use crate::sampler::{self, ChainConfig, SampleStore, Target};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    /// A requested check failed; the report is still produced.
    #[error("{message}")]
    Assert { message: String, summary: Box<Value> },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Assert { .. } => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Assert { message: m, .. } => m,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// One `key=value` record on stderr; values containing spaces are quoted.
pub fn log(event: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        if v.contains(' ') || v.is_empty() {
            let _ = write!(line, " {k}={v:?}");
        } else {
            let _ = write!(line, " {k}={v}");
        }
    }
    eprintln!("{line}");
}

#[derive(Parser, Debug)]
#[command(name = "loggas", version, about = "Equilibrium measures, β-ensemble samplers and log-gas diagnostics")]
pub struct Cli {
    /// Worker threads (defaults to LOGGAS_JOBS, then the number of cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve for the equilibrium measure of a potential.
    Eqm(EqmArgs),
    /// Run MCMC chains (or the tridiagonal model) into a sample store.
    Sample(SampleArgs),
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
    #[command(subcommand)]
    Convexify(ConvexifyCommand),
    /// Bulk gap comparison of a quartic ensemble against the Gaussian one.
    Universality(UniversalityArgs),
    /// Run an experiment described by a JSON config.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct EqmArgs {
    #[arg(long)]
    pub potential: String,
    /// Number of classical locations to emit.
    #[arg(long = "n", default_value_t = 16)]
    pub n: usize,
    /// Also write the JSON document to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a (t, rho, F) grid as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub potential: String,
    #[arg(long = "n")]
    pub n: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// mu, nu, trunc or gauss.
    #[arg(long, default_value = "mu")]
    pub target: String,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Convexification parameters (JSON) for `--target nu`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long = "step-size")]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Hessian-preconditioned proposals.
    #[arg(long)]
    pub precondition: bool,
    #[arg(long = "no-adapt")]
    pub no_adapt: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct StoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Equilibrium document from `loggas eqm`; solved from the store's
    /// potential when absent.
    #[arg(long)]
    pub eqm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub assert: bool,
}

#[derive(Subcommand, Debug)]
pub enum DiagnoseCommand {
    Rigidity {
        #[command(flatten)]
        io: StoreArgs,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Threshold exponents e in N^{-1+e}.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.5")]
        exponents: Vec<f64>,
    },
    Gaps {
        #[command(flatten)]
        io: StoreArgs,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        energy: f64,
        #[arg(long = "k-exp", default_value_t = 0.5)]
        k_exp: f64,
    },
    Loop {
        #[command(flatten)]
        io: StoreArgs,
        /// Grid points written as `re:im`, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0:0.5", allow_hyphen_values = true)]
        z: Vec<String>,
    },
    Linstat {
        #[command(flatten)]
        io: StoreArgs,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        center: f64,
        #[arg(long, default_value_t = 0.5)]
        width: f64,
        #[arg(long, default_value_t = 1.0)]
        height: f64,
        #[arg(long, default_value_t = 0.0)]
        plateau: f64,
    },
    Overlap {
        #[command(flatten)]
        io: StoreArgs,
        #[arg(long)]
        params: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConvexifyCommand {
    /// Margins of the operator inequality for ℓ = 0..=ell.
    CheckOp {
        #[arg(long = "n")]
        n: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        ell: usize,
        #[arg(long, default_value_t = 2.0)]
        m: f64,
        #[arg(long = "no-zero-mode")]
        no_zero_mode: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        assert: bool,
    },
    /// Smallest Hessian eigenvalue of H_ν on every stored sample.
    CheckHessian {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        assert: bool,
    },
    /// Calibrate c₁ from the pair ratios of stored samples.
    CalibrateC1 {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long = "pair-target", default_value_t = 1e-4)]
        pair_target: f64,
        #[arg(long = "sample-target", default_value_t = 1e-3)]
        sample_target: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct UniversalityArgs {
    /// Parameter a of the quartic-minus potential.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub a: f64,
    #[arg(long = "n", default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub energy: f64,
    #[arg(long = "k-exp", default_value_t = 0.5)]
    pub k_exp: f64,
    /// Minimum number of gaps collected from each ensemble.
    #[arg(long, default_value_t = 20_000)]
    pub gaps: usize,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 40)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// ECDF grid CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless the KS distance is at most this value.
    #[arg(long, default_value_t = 0.05)]
    pub ks_max: f64,
    #[arg(long)]
    pub assert: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub assert: bool,
}

/// Shortest round-trip decimal.
fn num(x: f64) -> String {
    format!("{x}")
}

struct Provenance {
    config_hash: String,
    seed: u64,
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I, prov: Option<&Provenance>) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut buf: Vec<u8> = Vec::new();
    if let Some(p) = prov {
        writeln!(buf, "# config_hash={} seed={}", p.config_hash, p.seed).map_err(runtime)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(runtime)?;
        for r in rows {
            w.write_record(&r).map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    fs::write(path, buf).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(runtime)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn parse_potential(s: &str) -> CliResult<Potential> {
    s.parse().map_err(|e| CliError::Config(format!("potential: {e}")))
}

fn load_store(path: &Path) -> CliResult<SampleStore> {
    SampleStore::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_params(path: &Path) -> CliResult<ConvexifyParams> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let p: ConvexifyParams =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    p.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

fn measure_for(store: &SampleStore, eqm: Option<&Path>) -> CliResult<EquilibriumMeasure> {
    let potential = match eqm {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let doc: EquilibriumSummary =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            parse_potential(&doc.potential)?
        }
        None => store.metadata.config.potential.clone(),
    };
    EquilibriumMeasure::solve(&potential).map_err(runtime)
}

fn parse_z(s: &str) -> CliResult<Complex64> {
    let (re, im) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("z: expected re:im, got {s:?}")))?;
    let p = |t: &str| t.trim().parse::<f64>().map_err(|_| CliError::Config(format!("z: bad number in {s:?}")));
    Ok(Complex64::new(p(re)?, p(im)?))
}

pub fn eqm(args: &EqmArgs) -> CliResult<Value> {
    let p = parse_potential(&args.potential)?;
    let t0 = Instant::now();
    let eq = EquilibriumMeasure::solve(&p).map_err(runtime)?;
    let summary = eq.summary(args.n);
    log("eqm", &[("potential", p.to_string()), ("elapsed_s", format!("{:.4}", t0.elapsed().as_secs_f64()))]);
    if let Some(path) = &args.csv {
        let (a, b) = eq.support();
        let m = args.grid.max(2);
        let rows = (0..m).map(|k| {
            let t = a + (b - a) * k as f64 / (m - 1) as f64;
            vec![num(t), num(eq.density(t)), num(eq.cdf(t))]
        });
        write_csv(path, &["t", "rho", "F"], rows, None)?;
    }
    let v = serde_json::to_value(&summary).map_err(runtime)?;
    if let Some(path) = &args.out {
        write_json(path, &summary)?;
    }
    Ok(v)
}

fn build_target(kind: &str, kappa: Option<f64>, params: Option<ConvexifyParams>) -> CliResult<Target> {
    match kind {
        "mu" => Ok(Target::Mu),
        "trunc" => Ok(Target::Truncated {
            kappa: kappa.ok_or_else(|| CliError::Config("target trunc needs kappa".into()))?,
        }),
        "nu" => Ok(Target::Nu {
            params: params.ok_or_else(|| CliError::Config("target nu needs convexify parameters".into()))?,
        }),
        "gauss" => Ok(Target::GaussianBeta),
        other => Err(CliError::Config(format!("target: unknown value {other:?} (mu, nu, trunc, gauss)"))),
    }
}

fn run_sampler(cfg: &ChainConfig) -> CliResult<SampleStore> {
    let t0 = Instant::now();
    let store = sampler::run_chain(cfg).map_err(runtime)?;
    log(
        "sample",
        &[
            ("potential", cfg.potential.to_string()),
            ("n", cfg.n.to_string()),
            ("beta", num(cfg.beta)),
            ("target", cfg.target.label().into()),
            ("seed", cfg.seed.to_string()),
            ("chains", cfg.chains.to_string()),
            ("snapshots", store.len().to_string()),
            ("acceptance", format!("{:.4}", store.metadata.acceptance_rate)),
            ("elapsed_s", format!("{:.3}", t0.elapsed().as_secs_f64())),
        ],
    );
    Ok(store)
}

pub fn sample(args: &SampleArgs) -> CliResult<Value> {
    let p = parse_potential(&args.potential)?;
    let params = args.params.as_deref().map(load_params).transpose()?;
    let target = build_target(&args.target, args.kappa, params)?;
    let mut cfg = ChainConfig::new(p, args.n, args.beta, target);
    cfg.steps = args.steps;
    cfg.burn_in = args.burnin;
    cfg.thin = args.thin;
    cfg.step_size = args.step_size;
    cfg.seed = args.seed;
    cfg.chains = args.chains;
    cfg.precondition = args.precondition;
    cfg.adapt = !args.no_adapt;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let store = run_sampler(&cfg)?;
    store.save(&args.out).map_err(runtime)?;
    Ok(json!({"snapshots": store.len(), "acceptance_rate": store.metadata.acceptance_rate}))
}

fn rigidity_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    alpha: f64,
    exponents: &[f64],
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let locs = eq.classical_locations(store.n());
    let r = diagnostics::rigidity_stats(store, &locs, alpha, exponents, &[]).map_err(runtime)?;
    let rows = (0..r.n).map(|k| {
        vec![
            (k + 1).to_string(),
            num(locs.gamma[k]),
            num(r.mean_deviation[k]),
            num(r.mean_deviation_se[k]),
            num(r.sd_deviation[k]),
        ]
    });
    write_csv(out, &["k", "gamma", "mean_deviation", "mean_deviation_se", "sd_deviation"], rows, prov)?;
    let bound = 5.0 / r.n as f64;
    let fail = (r.max_bulk_mean_abs > bound)
        .then(|| format!("rigidity: max bulk |mean - gamma| = {} exceeds 5/N = {bound}", r.max_bulk_mean_abs));
    let v = json!({
        "bulk": [r.bulk.0, r.bulk.1],
        "bulk_median_abs": r.bulk_median_abs,
        "max_bulk_mean_abs": r.max_bulk_mean_abs,
        "exceedance": r.exceedance,
    });
    Ok((v, fail))
}

fn gaps_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    energy: f64,
    k_exp: f64,
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let g = diagnostics::gap_statistics(store, eq, energy, k_exp).map_err(runtime)?;
    let n = g.gaps.len() as f64;
    let rows = g.gaps.sorted.iter().enumerate().map(|(i, &x)| vec![num(x), num((i + 1) as f64 / n)]);
    write_csv(out, &["gap", "ecdf"], rows, prov)?;
    let v = json!({
        "energy": g.energy,
        "half_width": g.half_width,
        "density": g.density,
        "expected_per_sample": g.expected_per_sample,
        "gaps": g.gaps.len(),
        "mean_gap": g.mean_gap,
        "dkw_half_width": g.dkw_half_width,
    });
    Ok((v, None))
}

fn loop_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    zs: &[Complex64],
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let r = diagnostics::loop_residual(store, eq, zs).map_err(runtime)?;
    let header = [
        "re_z", "im_z", "re_m_hat", "im_m_hat", "re_m", "im_m", "re_k_hat", "im_k_hat", "re_b_hat", "im_b_hat",
        "re_b_direct", "im_b_direct", "re_c_hat", "im_c_hat", "re_residual", "im_residual", "residual_se",
        "re_residual_direct", "im_residual_direct", "residual_direct_se",
    ];
    let rows = r.points.iter().map(|p| {
        [p.z, p.m_hat, p.m, p.k_hat, p.b_hat, p.b_direct, p.c_hat, p.residual]
            .iter()
            .flat_map(|c| [num(c.re), num(c.im)])
            .chain([num(p.residual_se), num(p.residual_direct.re), num(p.residual_direct.im), num(p.residual_direct_se)])
            .collect()
    });
    write_csv(out, &header, rows, prov)?;
    let fail = r
        .points
        .iter()
        .find(|p| p.residual.norm() > 5.0 * p.residual_se)
        .map(|p| format!("loop: |residual| = {} exceeds 5 SE = {} at z = {}", p.residual.norm(), 5.0 * p.residual_se, p.z));
    let v = json!({
        "samples": r.samples,
        "points": r.points.iter().map(|p| json!({
            "z": [p.z.re, p.z.im],
            "residual_abs": p.residual.norm(),
            "residual_se": p.residual_se,
            "k_over_n2_abs": p.k_hat.norm() / (r.n * r.n) as f64,
        })).collect::<Vec<_>>(),
    });
    Ok((v, fail))
}

fn linstat_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    bump: &Bump,
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let nf = store.n() as f64;
    let s_tail = 20.0 * nf.ln();
    let thresholds = [0.5, 1.0, 2.0, 4.0, s_tail];
    let r = diagnostics::linear_stat_fluct(store, eq, bump, &thresholds).map_err(runtime)?;
    let rows = r.exceedance.iter().map(|(s, f)| vec![num(*s), num(*f)]);
    write_csv(out, &["threshold", "exceedance"], rows, prov)?;
    let tail = r.exceedance.last().map_or(0.0, |e| e.1);
    let fail = (tail > 0.05).then(|| format!("linstat: exceedance {tail} at s = 20 log N above 0.05"));
    let v = json!({
        "mean": r.mean,
        "expected": r.expected,
        "variance": r.variance,
        "c2_norm": r.c2_norm,
        "tail_exceedance": tail,
    });
    Ok((v, fail))
}

fn overlap_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    params: &ConvexifyParams,
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let model = NuModel::new(eq.potential(), eq, store.n(), params).map_err(runtime)?;
    let r = diagnostics::measure_overlap(store, &model).map_err(runtime)?;
    let bn = store.beta() * store.n() as f64;
    let rows = store.snapshots.iter().map(|s| {
        let p = model.penalty_terms(&s.lambda);
        let (d, dd) = model.deltas(&s.lambda);
        vec![
            s.chain.to_string(),
            s.step.to_string(),
            num(p.psi_s),
            num(p.psi_pair),
            num(p.x_term),
            num((-bn * p.total()).exp()),
            num(d),
            num(dd),
        ]
    });
    write_csv(out, &["chain", "step", "psi_s", "psi_pair", "x_term", "weight", "delta", "delta_delta"], rows, prov)?;
    let fail = (r.fraction_psi_zero < 0.99 || r.ess_ratio < 0.9).then(|| {
        format!("overlap: psi-zero fraction {} (need 0.99), ESS ratio {} (need 0.9)", r.fraction_psi_zero, r.ess_ratio)
    });
    Ok((serde_json::to_value(&r).map_err(runtime)?, fail))
}

fn hessian_report(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    params: &ConvexifyParams,
    out: &Path,
    prov: Option<&Provenance>,
) -> CliResult<(Value, Option<String>)> {
    let model = NuModel::new(eq.potential(), eq, store.n(), params).map_err(runtime)?;
    let mins = convexify::hessian_min_eigenvalues(store, &model).map_err(runtime)?;
    let rows = store
        .snapshots
        .iter()
        .zip(&mins)
        .map(|(s, m)| vec![s.chain.to_string(), s.step.to_string(), num(*m)]);
    write_csv(out, &["chain", "step", "min_eigenvalue"], rows, prov)?;
    let positive = mins.iter().filter(|&&m| m > 0.0).count() as f64 / mins.len() as f64;
    let fail = (positive < 0.99).then(|| format!("hessian: positive fraction {positive} below 0.99"));
    let v = json!({
        "samples": mins.len(),
        "positive_fraction": positive,
        "min": mins.iter().copied().fold(f64::INFINITY, f64::min),
        "params": model.params,
    });
    Ok((v, fail))
}

fn finish(summary: Value, fail: Option<String>, assert: bool) -> CliResult<Value> {
    match fail {
        Some(message) if assert => Err(CliError::Assert { message, summary: Box::new(summary) }),
        _ => Ok(summary),
    }
}

pub fn diagnose(cmd: &DiagnoseCommand) -> CliResult<Value> {
    let io = match cmd {
        DiagnoseCommand::Rigidity { io, .. }
        | DiagnoseCommand::Gaps { io, .. }
        | DiagnoseCommand::Loop { io, .. }
        | DiagnoseCommand::Linstat { io, .. }
        | DiagnoseCommand::Overlap { io, .. } => io,
    };
    // argument checks before any file is touched
    let zs = match cmd {
        DiagnoseCommand::Loop { z, .. } => z.iter().map(|s| parse_z(s)).collect::<CliResult<Vec<_>>>()?,
        _ => Vec::new(),
    };
    let params = match cmd {
        DiagnoseCommand::Overlap { params, .. } => Some(load_params(params)?),
        _ => None,
    };
    let store = load_store(&io.store)?;
    let eq = measure_for(&store, io.eqm.as_deref())?;
    let (v, fail) = match cmd {
        DiagnoseCommand::Rigidity { alpha, exponents, .. } => rigidity_report(&store, &eq, *alpha, exponents, &io.out, None)?,
        DiagnoseCommand::Gaps { energy, k_exp, .. } => gaps_report(&store, &eq, *energy, *k_exp, &io.out, None)?,
        DiagnoseCommand::Loop { .. } => loop_report(&store, &eq, &zs, &io.out, None)?,
        DiagnoseCommand::Linstat { center, width, height, plateau, .. } => {
            let bump = Bump { center: *center, width: *width, height: *height, plateau: *plateau };
            linstat_report(&store, &eq, &bump, &io.out, None)?
        }
        DiagnoseCommand::Overlap { .. } => overlap_report(&store, &eq, params.as_ref().unwrap(), &io.out, None)?,
    };
    finish(v, fail, io.assert)
}

pub fn convexify_cmd(cmd: &ConvexifyCommand) -> CliResult<Value> {
    match cmd {
        ConvexifyCommand::CheckOp { n, epsilon, ell, m, no_zero_mode, out, assert } => {
            if *n < 2 || !(*epsilon > 0.0 && *epsilon < 1.0) {
                return Err(CliError::Config("check-op needs N >= 2 and epsilon in (0,1)".into()));
            }
            let sweep = convexify::margin_sweep(*n, *epsilon, *ell, *m, !no_zero_mode);
            let rows = sweep.iter().map(|o| vec![o.ell.to_string(), num(o.full), num(o.complement)]);
            write_csv(out, &["ell", "full", "complement"], rows, None)?;
            let first = sweep.iter().find(|o| o.complement >= 0.0).map(|o| o.ell);
            let fail = first.is_none().then(|| format!("check-op: no ell <= {ell} with nonnegative complement margin"));
            finish(json!({"first_ell": first, "margins": sweep}), fail, *assert)
        }
        ConvexifyCommand::CheckHessian { store, params, out, assert } => {
            let params = load_params(params)?;
            let store = load_store(store)?;
            let eq = measure_for(&store, None)?;
            let (v, fail) = hessian_report(&store, &eq, &params, out, None)?;
            finish(v, fail, *assert)
        }
        ConvexifyCommand::CalibrateC1 { store, epsilon, pair_target, sample_target, out } => {
            let store = load_store(store)?;
            let q = QForm::new(store.n(), *epsilon);
            let c = convexify::calibrate_c1(&store, &q, *pair_target, *sample_target).map_err(runtime)?;
            let row = vec![num(c.pair_target), num(c.sample_target), num(c.c1_pair), num(c.c1_sample), num(c.conservative())];
            write_csv(out, &["pair_target", "sample_target", "c1_pair", "c1_sample", "c1"], [row], None)?;
            finish(serde_json::to_value(c).map_err(runtime)?, None, false)
        }
    }
}

/// Gap samples of both ensembles, collected until each has `gaps` entries.
pub struct UniversalityResult {
    /// The quartic MCMC store the gaps were taken from.
    pub store: SampleStore,
    pub quartic: diagnostics::GapReport,
    pub gaussian: diagnostics::GapReport,
    pub ks: diagnostics::KsResult,
}

pub fn universality_run(args: &UniversalityArgs) -> CliResult<UniversalityResult> {
    let quartic = Potential::quartic_minus(args.a).map_err(|e| CliError::Config(e.to_string()))?;
    let eq_q = EquilibriumMeasure::solve(&quartic).map_err(runtime)?;
    let eq_g = EquilibriumMeasure::solve(&Potential::quadratic()).map_err(runtime)?;
    let nf = args.n as f64;
    let window = nf.powf(-1.0 + args.k_exp);
    let per_q = nf * (eq_q.cdf(args.energy + window) - eq_q.cdf(args.energy - window));
    let per_g = nf * (eq_g.cdf(args.energy + window) - eq_g.cdf(args.energy - window));
    if per_q < 1.0 || per_g < 1.0 {
        return Err(CliError::Runtime(format!("gap window holds too few points ({per_q:.3}, {per_g:.3})")));
    }
    // window holds ~per points, hence ~per gaps per snapshot; 10% headroom
    let snaps_q = ((1.1 * args.gaps as f64 / per_q).ceil() as usize).div_ceil(args.chains);
    let mut cfg = ChainConfig::new(quartic, args.n, args.beta, Target::Mu);
    cfg.precondition = true;
    cfg.chains = args.chains;
    cfg.burn_in = args.burnin;
    cfg.thin = args.thin;
    cfg.steps = args.burnin + snaps_q * args.thin;
    cfg.seed = args.seed;
    let store_q = run_sampler(&cfg)?;
    let draws_g = (1.1 * args.gaps as f64 / per_g).ceil() as usize;
    let store_g = sampler::gaussian_store(args.n, args.beta, draws_g, args.seed.wrapping_add(1)).map_err(runtime)?;
    let quartic = diagnostics::gap_statistics(&store_q, &eq_q, args.energy, args.k_exp).map_err(runtime)?;
    let gaussian = diagnostics::gap_statistics(&store_g, &eq_g, args.energy, args.k_exp).map_err(runtime)?;
    let ks = diagnostics::ks_two_sample(&quartic.gaps.sorted, &gaussian.gaps.sorted).map_err(runtime)?;
    log(
        "universality",
        &[
            ("gaps_quartic", quartic.gaps.len().to_string()),
            ("gaps_gauss", gaussian.gaps.len().to_string()),
            ("ks", num(ks.distance)),
            ("p_value", num(ks.p_value)),
            ("seed", args.seed.to_string()),
        ],
    );
    Ok(UniversalityResult { store: store_q, quartic, gaussian, ks })
}

pub fn universality(args: &UniversalityArgs) -> CliResult<Value> {
    if !(args.k_exp > 0.0 && args.k_exp <= 0.5) || args.chains == 0 || args.thin == 0 || args.n < 2 {
        return Err(CliError::Config("universality: need N >= 2, chains, thin >= 1 and k-exp in (0, 1/2]".into()));
    }
    let r = universality_run(args)?;
    let m = 401;
    let rows = (0..m).map(|k| {
        let x = 4.0 * k as f64 / (m - 1) as f64;
        vec![num(x), num(r.quartic.gaps.eval(x)), num(r.gaussian.gaps.eval(x))]
    });
    write_csv(&args.out, &["gap", "ecdf_quartic", "ecdf_gauss"], rows, None)?;
    let fail = (r.ks.distance > args.ks_max).then(|| format!("universality: KS {} above {}", r.ks.distance, args.ks_max));
    let v = json!({
        "gaps_quartic": r.quartic.gaps.len(),
        "gaps_gauss": r.gaussian.gaps.len(),
        "mean_gap_quartic": r.quartic.mean_gap,
        "mean_gap_gauss": r.gaussian.mean_gap,
        "ks": r.ks.distance,
        "p_value": r.ks.p_value,
    });
    finish(v, fail, args.assert)
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_alpha() -> f64 {
    0.1
}

fn default_exponents() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.5]
}

fn default_k_exp() -> f64 {
    0.5
}

fn default_z() -> Vec<[f64; 2]> {
    vec![[0.0, 0.5]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnosticSpec {
    Rigidity {
        #[serde(default = "default_alpha")]
        alpha_bulk: f64,
        #[serde(default = "default_exponents")]
        exponents: Vec<f64>,
    },
    Gaps {
        #[serde(default)]
        energy: f64,
        #[serde(default = "default_k_exp")]
        k_exp: f64,
    },
    Loop {
        #[serde(default = "default_z")]
        z: Vec<[f64; 2]>,
    },
    Linstat { bump: Bump },
    Overlap,
    Hessian,
}

impl DiagnosticSpec {
    fn name(&self) -> &'static str {
        match self {
            DiagnosticSpec::Rigidity { .. } => "rigidity",
            DiagnosticSpec::Gaps { .. } => "gaps",
            DiagnosticSpec::Loop { .. } => "loop",
            DiagnosticSpec::Linstat { .. } => "linstat",
            DiagnosticSpec::Overlap => "overlap",
            DiagnosticSpec::Hessian => "hessian",
        }
    }
}

/// Experiment description read by `loggas run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub potential: Potential,
    pub beta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// mu, nu, trunc or gauss.
    pub target: String,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub convexify: Option<ConvexifyParams>,
    #[serde(default = "default_one")]
    pub chains: usize,
    pub steps: usize,
    pub burn_in: usize,
    #[serde(default = "default_one")]
    pub thin: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub adapt: bool,
    #[serde(default)]
    pub precondition: bool,
    pub seed: u64,
    pub outputs: Outputs,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.chain_config()?;
        let needs_params = cfg.diagnostics.iter().any(|d| matches!(d, DiagnosticSpec::Overlap | DiagnosticSpec::Hessian));
        if needs_params && cfg.convexify.is_none() {
            return Err(CliError::Config("config: overlap and hessian diagnostics need a convexify block".into()));
        }
        if let Some(p) = &cfg.convexify {
            p.validate().map_err(|e| CliError::Config(format!("convexify: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn chain_config(&self) -> CliResult<ChainConfig> {
        let target = build_target(&self.target, self.kappa, self.convexify.clone())?;
        let mut c = ChainConfig::new(self.potential.clone(), self.n, self.beta, target);
        c.steps = self.steps;
        c.burn_in = self.burn_in;
        c.thin = self.thin;
        c.step_size = self.step_size;
        c.adapt = self.adapt;
        c.precondition = self.precondition;
        c.seed = self.seed;
        c.chains = self.chains;
        c.validate().map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(c)
    }

    /// SHA-256 of the config with every default filled in.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn run_experiment(path: &Path, assert: bool) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let hash = cfg.hash();
    log("config", &[("name", cfg.name.clone()), ("config_hash", hash.clone()), ("seed", cfg.seed.to_string())]);
    let prov = Provenance { config_hash: hash.clone(), seed: cfg.seed };
    let dir = &cfg.outputs.dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;

    let eq = EquilibriumMeasure::solve(&cfg.potential).map_err(runtime)?;
    let mut eqm = serde_json::to_value(eq.summary(cfg.n)).map_err(runtime)?;
    eqm["config_hash"] = json!(hash);
    eqm["seed"] = json!(cfg.seed);
    write_json(&dir.join("eqm.json"), &eqm)?;

    let chain = cfg.chain_config()?;
    let mut store = run_sampler(&chain)?;
    store.metadata.config_hash = Some(hash.clone());
    store.save(&dir.join("store.jsonl")).map_err(runtime)?;

    let mut results = serde_json::Map::new();
    let mut failures = Vec::new();
    for d in &cfg.diagnostics {
        let out = dir.join(format!("{}.csv", d.name()));
        let (v, fail) = match d {
            DiagnosticSpec::Rigidity { alpha_bulk, exponents } => {
                rigidity_report(&store, &eq, *alpha_bulk, exponents, &out, Some(&prov))?
            }
            DiagnosticSpec::Gaps { energy, k_exp } => gaps_report(&store, &eq, *energy, *k_exp, &out, Some(&prov))?,
            DiagnosticSpec::Loop { z } => {
                let zs: Vec<Complex64> = z.iter().map(|p| Complex64::new(p[0], p[1])).collect();
                loop_report(&store, &eq, &zs, &out, Some(&prov))?
            }
            DiagnosticSpec::Linstat { bump } => linstat_report(&store, &eq, bump, &out, Some(&prov))?,
            DiagnosticSpec::Overlap => overlap_report(&store, &eq, cfg.convexify.as_ref().unwrap(), &out, Some(&prov))?,
            DiagnosticSpec::Hessian => hessian_report(&store, &eq, cfg.convexify.as_ref().unwrap(), &out, Some(&prov))?,
        };
        log("diagnostic", &[("kind", d.name().into()), ("passed", fail.is_none().to_string())]);
        results.insert(d.name().into(), v);
        failures.extend(fail);
    }
    let summary = json!({
        "name": cfg.name,
        "config_hash": hash,
        "seed": cfg.seed,
        "config": cfg,
        "acceptance_rate": store.metadata.acceptance_rate,
        "snapshots": store.len(),
        "diagnostics": results,
        "failures": failures,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    finish(summary, (!failures.is_empty()).then(|| failures.join("; ")), assert)
}

fn configure_pool(jobs: Option<usize>) -> CliResult<()> {
    let jobs = match jobs {
        Some(j) => Some(j),
        None => match std::env::var("LOGGAS_JOBS") {
            Ok(s) => Some(s.trim().parse().map_err(|_| CliError::Config(format!("LOGGAS_JOBS: not a count: {s:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<Value> {
    configure_pool(cli.jobs)?;
    match &cli.command {
        Command::Eqm(a) => eqm(a),
        Command::Sample(a) => sample(a),
        Command::Diagnose(c) => diagnose(c),
        Command::Convexify(c) => convexify_cmd(c),
        Command::Universality(a) => universality(a),
        Command::Run(a) => run_experiment(&a.config, a.assert),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(v) => {
            print_json(&v);
            0
        }
        Err(e) => {
            if let CliError::Assert { summary, .. } = &e {
                print_json(summary);
            }
            log("error", &[("code", e.exit_code().to_string()), ("message", e.message().to_string())]);
            e.exit_code()
        }
    }
}
