//! Samplers for the log-gas: Metropolis-adjusted Langevin chains for the
//! full, truncated and convexified measures, and the exact tridiagonal
//! model for the Gaussian β-ensemble.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexify::{ConvexifyError, ConvexifyParams, NuModel};
use crate::equilibrium::{EquilibriumError, EquilibriumMeasure};
use crate::potentials::{Potential, PotentialForm};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("singular configuration: points {0} and {1} coincide")]
    Singular(usize, usize),
    #[error("chain {chain} stuck: no accepted move in {steps} consecutive steps")]
    Stuck { chain: usize, steps: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid particle configuration: {0}")]
    Particles(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Convexify(#[from] ConvexifyError),
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("store format: {0}")]
    Format(String),
}

const STUCK_LIMIT: usize = 10_000;
const ADAPT_WINDOW: usize = 50;
const PRECONDITIONER_FLOOR: f64 = 0.5;

/// Sorted, pairwise distinct point configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfiguration {
    pub lambda: Vec<f64>,
    pub beta: f64,
}

impl ParticleConfiguration {
    pub fn new(lambda: Vec<f64>, beta: f64) -> Result<Self, SamplerError> {
        if !(beta > 0.0) {
            return Err(SamplerError::Particles(format!("beta must be positive, got {beta}")));
        }
        if lambda.is_empty() {
            return Err(SamplerError::Particles("empty configuration".into()));
        }
        if let Some(i) = lambda.iter().position(|x| !x.is_finite()) {
            return Err(SamplerError::Particles(format!("non-finite point at index {i}")));
        }
        if let Some(i) = lambda.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SamplerError::Particles(format!(
                "not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(ParticleConfiguration { lambda, beta })
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }
}

/// Accumulates `Σ log|d|` by multiplying blocks of differences before each
/// logarithm, with Kahan summation across blocks.
struct LogAccumulator {
    product: f64,
    count: u32,
    sum: f64,
    comp: f64,
}

impl LogAccumulator {
    fn new() -> Self {
        LogAccumulator { product: 1.0, count: 0, sum: 0.0, comp: 0.0 }
    }

    #[inline]
    fn push(&mut self, d: f64) {
        self.product *= d;
        self.count += 1;
        if self.count == 8 {
            self.flush();
        }
    }

    #[inline]
    fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn flush(&mut self) {
        if self.count > 0 {
            let p = self.product;
            self.add(p.ln());
            self.product = 1.0;
            self.count = 0;
        }
    }

    fn total(mut self) -> f64 {
        self.flush();
        self.sum
    }
}

/// `H(λ) = Σ V(λ_k)/2 - (1/N) Σ_{i<j} log|λ_j - λ_i|` and its gradient.
/// The input need not be sorted.
pub fn hamiltonian_and_grad(p: &Potential, lambda: &[f64], grad: &mut [f64]) -> Result<f64, SamplerError> {
    let n = lambda.len();
    assert_eq!(grad.len(), n);
    let inv_n = 1.0 / n as f64;
    let dv = p.derivative_poly();
    let mut pot = 0.0;
    for (g, &x) in grad.iter_mut().zip(lambda) {
        pot += p.value(x);
        *g = 0.5 * dv.eval(x);
    }
    let mut logs = LogAccumulator::new();
    for i in 0..n {
        let xi = lambda[i];
        let mut gi = 0.0;
        for j in i + 1..n {
            let d = lambda[j] - xi;
            if d == 0.0 {
                return Err(SamplerError::Singular(i, j));
            }
            logs.push(d.abs());
            let inv = inv_n / d;
            gi += inv;
            grad[j] -= inv;
        }
        grad[i] += gi;
    }
    Ok(0.5 * pot - inv_n * logs.total())
}

pub fn hamiltonian(p: &Potential, lambda: &[f64]) -> Result<f64, SamplerError> {
    let mut g = vec![0.0; lambda.len()];
    hamiltonian_and_grad(p, lambda, &mut g)
}

/// Exact Hessian of `H`.
pub fn hamiltonian_hessian(p: &Potential, lambda: &[f64]) -> Result<DMatrix<f64>, SamplerError> {
    let n = lambda.len();
    let inv_n = 1.0 / n as f64;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] += 0.5 * p.d2(lambda[i]);
        for j in i + 1..n {
            let d = lambda[i] - lambda[j];
            if d == 0.0 {
                return Err(SamplerError::Singular(i, j));
            }
            let w = inv_n / (d * d);
            h[(i, i)] += w;
            h[(j, j)] += w;
            h[(i, j)] -= w;
            h[(j, i)] -= w;
        }
    }
    Ok(h)
}

/// A Hamiltonian on sorted configurations; `None` marks points outside the
/// target's support (singular or out of range), which are always rejected.
pub trait Energy: Sync {
    fn energy_grad(&self, sorted: &[f64], grad: &mut [f64]) -> Option<f64>;

    /// Hessian at a sorted configuration, used to build preconditioners.
    fn hessian(&self, _sorted: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

pub struct MuEnergy<'a> {
    pub potential: &'a Potential,
}

impl Energy for MuEnergy<'_> {
    fn energy_grad(&self, sorted: &[f64], grad: &mut [f64]) -> Option<f64> {
        hamiltonian_and_grad(self.potential, sorted, grad).ok()
    }

    fn hessian(&self, sorted: &[f64]) -> Option<DMatrix<f64>> {
        hamiltonian_hessian(self.potential, sorted).ok()
    }
}

/// The full measure conditioned on `[lo, hi]`.
pub struct TruncatedEnergy<'a> {
    pub potential: &'a Potential,
    pub lo: f64,
    pub hi: f64,
}

impl Energy for TruncatedEnergy<'_> {
    fn energy_grad(&self, sorted: &[f64], grad: &mut [f64]) -> Option<f64> {
        if sorted[0] < self.lo || sorted[sorted.len() - 1] > self.hi {
            return None;
        }
        hamiltonian_and_grad(self.potential, sorted, grad).ok()
    }

    fn hessian(&self, sorted: &[f64]) -> Option<DMatrix<f64>> {
        hamiltonian_hessian(self.potential, sorted).ok()
    }
}

/// Constant mass matrix `C = (βN G₊)^{-1}` from a Hessian `G` whose
/// eigenvalues are clamped below at `floor`.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    /// `C`
    c: DMatrix<f64>,
    /// `C^{1/2}`
    sqrt_c: DMatrix<f64>,
    /// `C^{-1/2}`
    inv_sqrt_c: DMatrix<f64>,
}

impl Preconditioner {
    pub fn from_hessian(hessian: DMatrix<f64>, beta_n: f64, floor: f64) -> Self {
        let eig = nalgebra::SymmetricEigen::new(hessian);
        let u = &eig.eigenvectors;
        let scaled: Vec<f64> = eig.eigenvalues.iter().map(|&g| beta_n * g.max(floor)).collect();
        let build = |f: &dyn Fn(f64) -> f64| {
            let mut d = u.clone();
            for (k, &g) in scaled.iter().enumerate() {
                let fk = f(g);
                d.column_mut(k).scale_mut(fk);
            }
            &d * u.transpose()
        };
        Preconditioner {
            c: build(&|g| 1.0 / g),
            sqrt_c: build(&|g| 1.0 / g.sqrt()),
            inv_sqrt_c: build(&|g| g.sqrt()),
        }
    }
}

/// Langevin chain state on sorted vectors; targets `e^{-βN H}` on the
/// symmetrized space, so the proposal may be re-sorted freely.
pub struct MalaState {
    pub lambda: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
    pub beta: f64,
    pub step_size: f64,
    proposal: Vec<f64>,
    sorted: Vec<f64>,
    sorted_grad: Vec<f64>,
    order: Vec<usize>,
    noise: Vec<f64>,
    precond: Option<Preconditioner>,
}

impl MalaState {
    pub fn new<E: Energy + ?Sized>(energy: &E, lambda: Vec<f64>, beta: f64, step_size: f64) -> Result<Self, SamplerError> {
        let n = lambda.len();
        let mut grad = vec![0.0; n];
        let h = energy
            .energy_grad(&lambda, &mut grad)
            .filter(|h| h.is_finite())
            .ok_or_else(|| SamplerError::Config("initial configuration has no finite energy".into()))?;
        Ok(MalaState {
            lambda,
            energy: h,
            grad,
            beta,
            step_size,
            proposal: vec![0.0; n],
            sorted: vec![0.0; n],
            sorted_grad: vec![0.0; n],
            order: (0..n).collect(),
            noise: vec![0.0; n],
            precond: None,
        })
    }

    /// Switches to preconditioned proposals on the ordered simplex:
    /// `y = x - (τ/2) C βN ∇H + √τ C^{1/2} ξ`, rejected unless sorted.
    pub fn with_preconditioner(mut self, p: Preconditioner) -> Self {
        self.precond = Some(p);
        self
    }

    /// One MALA step. Proposals with non-finite or undefined energy are
    /// rejected without touching the state.
    pub fn step<E: Energy + ?Sized, R: Rng>(&mut self, energy: &E, rng: &mut R) -> bool {
        if self.precond.is_some() {
            return self.step_preconditioned(energy, rng);
        }
        let n = self.lambda.len();
        let tau = self.step_size;
        let bn = self.beta * n as f64;
        let drift = 0.5 * tau * bn;
        let sd = tau.sqrt();
        let mut fwd = 0.0;
        for i in 0..n {
            let xi: f64 = rng.sample(StandardNormal);
            self.noise[i] = xi;
            fwd += xi * xi;
            self.proposal[i] = self.lambda[i] - drift * self.grad[i] + sd * xi;
        }
        if self.proposal.iter().any(|y| !y.is_finite()) {
            return false;
        }
        for (k, o) in self.order.iter_mut().enumerate() {
            *o = k;
        }
        let prop = &self.proposal;
        self.order.sort_unstable_by(|&a, &b| prop[a].total_cmp(&prop[b]));
        for (k, &o) in self.order.iter().enumerate() {
            self.sorted[k] = prop[o];
        }
        let h_new = match energy.energy_grad(&self.sorted, &mut self.sorted_grad) {
            Some(h) if h.is_finite() => h,
            _ => return false,
        };
        // Reverse move from the (unsorted) proposal back to the current state.
        let mut rev = 0.0;
        for (k, &o) in self.order.iter().enumerate() {
            let r = self.lambda[o] - self.proposal[o] + drift * self.sorted_grad[k];
            rev += r * r;
        }
        let log_alpha = -bn * (h_new - self.energy) - rev / (2.0 * tau) + 0.5 * fwd;
        if !log_alpha.is_finite() {
            return false;
        }
        let u: f64 = rng.random();
        if log_alpha >= 0.0 || u.ln() < log_alpha {
            std::mem::swap(&mut self.lambda, &mut self.sorted);
            std::mem::swap(&mut self.grad, &mut self.sorted_grad);
            self.energy = h_new;
            true
        } else {
            false
        }
    }

    fn step_preconditioned<E: Energy + ?Sized, R: Rng>(&mut self, energy: &E, rng: &mut R) -> bool {
        use nalgebra::DVectorView;
        let p = self.precond.as_ref().expect("preconditioner set");
        let n = self.lambda.len();
        let tau = self.step_size;
        let bn = self.beta * n as f64;
        let half = 0.5 * tau * bn;
        let mut fwd = 0.0;
        for xi in self.noise.iter_mut() {
            *xi = rng.sample(StandardNormal);
            fwd += *xi * *xi;
        }
        let g = DVectorView::from_slice(&self.grad, n);
        let z = DVectorView::from_slice(&self.noise, n);
        let y = DVectorView::from_slice(&self.lambda, n) - (&p.c * g) * half + (&p.sqrt_c * z) * tau.sqrt();
        if y.iter().any(|v| !v.is_finite()) || y.as_slice().windows(2).any(|w| w[1] <= w[0]) {
            return false;
        }
        self.sorted.copy_from_slice(y.as_slice());
        let h_new = match energy.energy_grad(&self.sorted, &mut self.sorted_grad) {
            Some(h) if h.is_finite() => h,
            _ => return false,
        };
        let x = DVectorView::from_slice(&self.lambda, n);
        let gy = DVectorView::from_slice(&self.sorted_grad, n);
        let r = &p.inv_sqrt_c * (x - &y) + (&p.sqrt_c * gy) * half;
        let log_alpha = -bn * (h_new - self.energy) - r.norm_squared() / (2.0 * tau) + 0.5 * fwd;
        if !log_alpha.is_finite() {
            return false;
        }
        let u: f64 = rng.random();
        if log_alpha >= 0.0 || u.ln() < log_alpha {
            std::mem::swap(&mut self.lambda, &mut self.sorted);
            std::mem::swap(&mut self.grad, &mut self.sorted_grad);
            self.energy = h_new;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Mu,
    Truncated { kappa: f64 },
    Nu { params: ConvexifyParams },
    /// Exact draws from the tridiagonal model; requires the quadratic potential.
    GaussianBeta,
}

impl Target {
    pub fn label(&self) -> &'static str {
        match self {
            Target::Mu => "mu",
            Target::Truncated { .. } => "trunc",
            Target::Nu { .. } => "nu",
            Target::GaussianBeta => "gauss",
        }
    }
}

fn default_chains() -> usize {
    1
}

fn default_adapt() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub potential: Potential,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
    pub target: Target,
    pub steps: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    /// Langevin time step; `None` means `0.05/N`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Tune the step during burn-in; frozen afterwards.
    #[serde(default = "default_adapt")]
    pub adapt: bool,
    /// Use a constant mass matrix from the Hessian at the classical
    /// locations (moves on the ordered simplex instead of re-sorting).
    #[serde(default)]
    pub precondition: bool,
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
}

fn one() -> usize {
    1
}

impl ChainConfig {
    pub fn new(potential: Potential, n: usize, beta: f64, target: Target) -> Self {
        ChainConfig {
            potential,
            n,
            beta,
            target,
            steps: 10_000,
            burn_in: 1_000,
            thin: 1,
            step_size: None,
            adapt: true,
            precondition: false,
            seed: 0,
            chains: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.n == 0 {
            return bad("N must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.steps <= self.burn_in {
            return bad("steps must exceed burn_in");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.chains == 0 {
            return bad("chains must be at least 1");
        }
        if let Some(t) = self.step_size {
            if !(t > 0.0 && t.is_finite()) {
                return bad("step_size must be positive");
            }
        }
        if let Target::Truncated { kappa } = self.target {
            if !(kappa > 0.0) {
                return bad("kappa must be positive");
            }
        }
        if self.target == Target::GaussianBeta && *self.potential.form() != PotentialForm::Quadratic {
            return bad("target gauss requires the quadratic potential");
        }
        Ok(())
    }

    /// `0.05/N` for plain proposals, `0.3` with a preconditioner.
    pub fn resolved_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(if self.precondition { 0.3 } else { 0.05 / self.n as f64 })
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.steps - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub acceptance_rate: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub config: ChainConfig,
    pub code_version: String,
    /// Acceptance over the retained part, pooled across chains.
    pub acceptance_rate: f64,
    pub chains: Vec<ChainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub chain: usize,
    pub step: usize,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub metadata: StoreMetadata,
    pub snapshots: Vec<Snapshot>,
}

impl SampleStore {
    pub fn n(&self) -> usize {
        self.metadata.config.n
    }

    pub fn beta(&self) -> f64 {
        self.metadata.config.beta
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Builds a store from explicit configurations, e.g. for synthetic tests.
    pub fn from_configurations(potential: Potential, beta: f64, configs: Vec<Vec<f64>>) -> Self {
        let n = configs.first().map_or(0, |c| c.len());
        let mut config = ChainConfig::new(potential, n, beta, Target::Mu);
        config.steps = configs.len() + 1;
        config.burn_in = 0;
        SampleStore {
            metadata: StoreMetadata {
                config,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                acceptance_rate: 0.0,
                chains: Vec::new(),
                config_hash: None,
            },
            snapshots: configs
                .into_iter()
                .enumerate()
                .map(|(k, lambda)| Snapshot { chain: 0, step: k + 1, lambda })
                .collect(),
        }
    }

    /// First line metadata, then one snapshot per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SamplerError> {
        let meta = serde_json::to_string(&self.metadata).map_err(|e| SamplerError::Format(e.to_string()))?;
        writeln!(w, "{meta}")?;
        for s in &self.snapshots {
            let line = serde_json::to_string(s).map_err(|e| SamplerError::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SamplerError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| SamplerError::Format("empty store file".into()))??;
        let metadata: StoreMetadata =
            serde_json::from_str(&first).map_err(|e| SamplerError::Format(format!("metadata: {e}")))?;
        let mut snapshots = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Snapshot =
                serde_json::from_str(&line).map_err(|e| SamplerError::Format(format!("line {}: {e}", k + 2)))?;
            if s.lambda.len() != metadata.config.n {
                return Err(SamplerError::Format(format!(
                    "line {}: expected {} points, found {}",
                    k + 2,
                    metadata.config.n,
                    s.lambda.len()
                )));
            }
            snapshots.push(s);
        }
        Ok(SampleStore { metadata, snapshots })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SamplerError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SamplerError> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }
}

/// Per-chain RNG: one ChaCha key from the seed, one stream per chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

struct ChainOutput {
    snapshots: Vec<Snapshot>,
    summary: ChainSummary,
    accepted: usize,
    proposed: usize,
}

fn run_mala_chain<E: Energy + ?Sized>(
    energy: &E,
    cfg: &ChainConfig,
    start: &[f64],
    chain: usize,
) -> Result<ChainOutput, SamplerError> {
    let mut rng = chain_rng(cfg.seed, chain);
    let mut state = MalaState::new(energy, start.to_vec(), cfg.beta, cfg.resolved_step_size())?;
    if cfg.precondition {
        let h = energy
            .hessian(start)
            .ok_or_else(|| SamplerError::Config("target provides no Hessian for preconditioning".into()))?;
        state = state.with_preconditioner(Preconditioner::from_hessian(h, cfg.beta * cfg.n as f64, PRECONDITIONER_FLOOR));
    }
    let mut snapshots = Vec::with_capacity(cfg.retained_per_chain());
    let mut since_accept = 0usize;
    let mut window_accepts = 0usize;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    for step in 1..=cfg.steps {
        let ok = state.step(energy, &mut rng);
        if ok {
            since_accept = 0;
        } else {
            since_accept += 1;
            if since_accept >= STUCK_LIMIT {
                return Err(SamplerError::Stuck { chain, steps: since_accept });
            }
        }
        if step <= cfg.burn_in {
            window_accepts += ok as usize;
            if cfg.adapt && step % ADAPT_WINDOW == 0 {
                let rate = window_accepts as f64 / ADAPT_WINDOW as f64;
                if rate < 0.3 {
                    state.step_size *= 0.5;
                } else if rate > 0.8 {
                    state.step_size *= 1.25;
                }
                window_accepts = 0;
            }
        } else {
            accepted += ok as usize;
            proposed += 1;
            if (step - cfg.burn_in) % cfg.thin == 0 {
                snapshots.push(Snapshot { chain, step, lambda: state.lambda.clone() });
            }
        }
    }
    Ok(ChainOutput {
        snapshots,
        summary: ChainSummary {
            chain,
            acceptance_rate: accepted as f64 / proposed.max(1) as f64,
            step_size: state.step_size,
        },
        accepted,
        proposed,
    })
}

fn run_gaussian_chain(cfg: &ChainConfig, chain: usize) -> ChainOutput {
    let mut rng = chain_rng(cfg.seed, chain);
    let snapshots = (1..=cfg.retained_per_chain())
        .map(|k| Snapshot {
            chain,
            step: cfg.burn_in + k * cfg.thin,
            lambda: gaussian_beta_with(cfg.n, cfg.beta, &mut rng),
        })
        .collect();
    ChainOutput {
        snapshots,
        summary: ChainSummary { chain, acceptance_rate: 1.0, step_size: 0.0 },
        accepted: 1,
        proposed: 1,
    }
}

/// Runs `cfg.chains` independent chains from the classical locations `γ̃`
/// and merges them in chain order.
pub fn run_chain(cfg: &ChainConfig) -> Result<SampleStore, SamplerError> {
    cfg.validate()?;
    let chains: Vec<usize> = (0..cfg.chains).collect();
    let outputs: Vec<Result<ChainOutput, SamplerError>> = if cfg.target == Target::GaussianBeta {
        chains.par_iter().map(|&c| Ok(run_gaussian_chain(cfg, c))).collect()
    } else {
        let eq = EquilibriumMeasure::solve(&cfg.potential)?;
        let start = eq.classical_locations(cfg.n).gamma_tilde;
        match &cfg.target {
            Target::Mu => {
                let e = MuEnergy { potential: &cfg.potential };
                chains.par_iter().map(|&c| run_mala_chain(&e, cfg, &start, c)).collect()
            }
            Target::Truncated { kappa } => {
                eq.check_regularity(*kappa)?;
                let (a, b) = eq.support();
                let e = TruncatedEnergy { potential: &cfg.potential, lo: a - kappa, hi: b + kappa };
                chains.par_iter().map(|&c| run_mala_chain(&e, cfg, &start, c)).collect()
            }
            Target::Nu { params } => {
                let model = NuModel::new(&cfg.potential, &eq, cfg.n, params)?;
                chains.par_iter().map(|&c| run_mala_chain(&model, cfg, &start, c)).collect()
            }
            Target::GaussianBeta => unreachable!(),
        }
    };
    let mut snapshots = Vec::with_capacity(cfg.chains * cfg.retained_per_chain());
    let mut summaries = Vec::with_capacity(cfg.chains);
    let (mut acc, mut prop) = (0usize, 0usize);
    for out in outputs {
        let out = out?;
        acc += out.accepted;
        prop += out.proposed;
        snapshots.extend(out.snapshots);
        summaries.push(out.summary);
    }
    Ok(SampleStore {
        metadata: StoreMetadata {
            config: cfg.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            acceptance_rate: acc as f64 / prop.max(1) as f64,
            chains: summaries,
            config_hash: None,
        },
        snapshots,
    })
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with
/// Wilkinson shifts, returned in increasing order.
pub fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(off.len() + 1 == n || n == 0);
    let mut d = diag.to_vec();
    let mut e: Vec<f64> = off.iter().copied().chain(std::iter::once(0.0)).collect();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(f64::total_cmp);
    d
}

fn gaussian_beta_with<R: Rng>(n: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    // Dumitriu–Edelman: diag N(0,2)/√2, off-diagonal χ_{β(N-k)}/√2 gives the
    // density ∝ |Δ|^β e^{-Σx²/2}; x/√(βN) then has law ∝ e^{-βN H} for V = x².
    let scale = 1.0 / (beta * n as f64).sqrt();
    let diag: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let dof = beta * (n - k) as f64;
            let chi = ChiSquared::new(dof).expect("positive degrees of freedom").sample(rng).sqrt();
            chi * std::f64::consts::FRAC_1_SQRT_2 * scale
        })
        .collect();
    tridiagonal_eigenvalues(&diag, &off)
}

/// One exact draw from the Gaussian β-ensemble with `V(x) = x²`.
pub fn sample_gaussian_beta(n: usize, beta: f64, seed: u64) -> Result<ParticleConfiguration, SamplerError> {
    if n == 0 {
        return Err(SamplerError::Particles("N must be at least 1".into()));
    }
    let mut rng = chain_rng(seed, 0);
    ParticleConfiguration::new(gaussian_beta_with(n, beta, &mut rng), beta)
}

/// Many exact Gaussian draws packaged as a store.
pub fn gaussian_store(n: usize, beta: f64, draws: usize, seed: u64) -> Result<SampleStore, SamplerError> {
    let mut cfg = ChainConfig::new(Potential::quadratic(), n, beta, Target::GaussianBeta);
    cfg.burn_in = 0;
    cfg.steps = draws;
    cfg.seed = seed;
    run_chain(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_energy_and_gradient() {
        let p = Potential::quadratic();
        let mut g = vec![0.0; 2];
        let h = hamiltonian_and_grad(&p, &[-1.0, 1.0], &mut g).unwrap();
        assert_relative_eq!(h, 1.0 - 0.5 * 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(g[0], -0.75, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn coincident_points_are_singular() {
        let p = Potential::quadratic();
        assert!(matches!(hamiltonian(&p, &[0.5, 0.5]), Err(SamplerError::Singular(0, 1))));
    }

    #[test]
    fn energy_is_permutation_invariant() {
        let p = Potential::quartic_minus(0.5).unwrap();
        let a = hamiltonian(&p, &[-0.7, 0.1, 0.4, 1.2]).unwrap();
        let b = hamiltonian(&p, &[0.4, -0.7, 1.2, 0.1]).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Potential::quartic_minus(0.5).unwrap();
        let mut rng = chain_rng(3, 0);
        let mut lambda: Vec<f64> = (0..8).map(|k| -1.4 + 0.35 * k as f64 + 0.05 * rng.random::<f64>()).collect();
        lambda.sort_by(f64::total_cmp);
        let mut g = vec![0.0; 8];
        hamiltonian_and_grad(&p, &lambda, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut up = lambda.clone();
            let mut dn = lambda.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (hamiltonian(&p, &up).unwrap() - hamiltonian(&p, &dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3));
        }
    }

    #[test]
    fn zero_step_is_identity_and_accepted() {
        let p = Potential::quadratic();
        let e = MuEnergy { potential: &p };
        let mut s = MalaState::new(&e, vec![-0.5, 0.2, 0.9], 2.0, 1e-300).unwrap();
        let before = s.lambda.clone();
        let mut rng = chain_rng(1, 0);
        assert!(s.step(&e, &mut rng));
        for (a, b) in s.lambda.iter().zip(&before) {
            assert!((a - b).abs() < 1e-140);
        }
    }

    struct NanEnergy;
    impl Energy for NanEnergy {
        fn energy_grad(&self, sorted: &[f64], grad: &mut [f64]) -> Option<f64> {
            grad.iter_mut().for_each(|g| *g = 0.0);
            if sorted[0] == 0.0 {
                Some(0.0)
            } else {
                Some(f64::NAN)
            }
        }
    }

    #[test]
    fn nan_energy_is_rejected() {
        let mut s = MalaState::new(&NanEnergy, vec![0.0], 1.0, 0.1).unwrap();
        let mut rng = chain_rng(5, 0);
        for _ in 0..10 {
            assert!(!s.step(&NanEnergy, &mut rng));
        }
        assert_eq!(s.lambda, vec![0.0]);
    }

    #[test]
    fn tridiagonal_solver_matches_dense() {
        let d = vec![1.0, -0.3, 2.2, 0.7, -1.1];
        let e = vec![0.4, 1.3, -0.2, 0.9];
        let mut dense = DMatrix::zeros(5, 5);
        for i in 0..5 {
            dense[(i, i)] = d[i];
            if i < 4 {
                dense[(i, i + 1)] = e[i];
                dense[(i + 1, i)] = e[i];
            }
        }
        let mut reference: Vec<f64> = dense.symmetric_eigenvalues().iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        let ours = tridiagonal_eigenvalues(&d, &e);
        for (a, b) in ours.iter().zip(&reference) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_streams_differ() {
        let a: u64 = chain_rng(9, 0).random();
        let b: u64 = chain_rng(9, 1).random();
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ChainConfig::new(Potential::quadratic(), 4, 2.0, Target::Mu);
        cfg.steps = 10;
        cfg.burn_in = 10;
        assert!(cfg.validate().is_err());
        let cfg = ChainConfig::new(Potential::quartic_minus(0.5).unwrap(), 4, 2.0, Target::GaussianBeta);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn store_roundtrip() {
        let mut cfg = ChainConfig::new(Potential::quadratic(), 3, 2.0, Target::Truncated { kappa: 0.5 });
        cfg.steps = 60;
        cfg.burn_in = 20;
        cfg.thin = 4;
        let store = run_chain(&cfg).unwrap();
        assert_eq!(store.len(), 10);
        let text = store.to_jsonl_string();
        let back = SampleStore::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, store);
    }
}
