//! Metropolis-within-Gibbs sampler.
//!
//! One sweep:
//! 1. random-walk Metropolis on `log theta`, targeting the cutpoint's
//!    posterior with every linear coefficient integrated out;
//! 2. an exact joint Gaussian draw of `(beta0, beta1)` and all
//!    `(lambda_c, eps_c)` given the cutpoint and variances;
//! 3. slice and Gibbs updates of the scale parameters.
//!
//! Steps 1 and 2 together form a blocked update of `(theta, beta, lambda,
//! eps)`. The random-walk step size adapts during burn-in only.

pub mod banded;
pub mod diagnostics;
pub mod linear;
pub mod slice;
pub mod variances;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CountryParams, GlobalParams, ParameterState, SURVEY_TYPES, THETA_MAX};
use crate::posterior::{describe_state, log_posterior, FitData};
use crate::rng::{rng_indexed, Rng as ChainRng};
use crate::stats::{mean, quantile, sd};

pub use diagnostics::{effective_sample_size, gelman_rubin};
pub use linear::LinearSystem;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FixedBlocks {
    pub theta: bool,
    pub variances: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub master_seed: u64,
    /// Iterations per step-size adaptation batch.
    pub adapt_window: usize,
    /// Acceptance band targeted by the cutpoint random walk.
    pub target_accept: (f64, f64),
    /// Metropolis steps for the cutpoint per sweep.
    pub theta_steps: usize,
    pub fixed: FixedBlocks,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 10,
            master_seed: 1,
            adapt_window: 50,
            target_accept: (0.30, 0.45),
            theta_steps: 2,
            fixed: FixedBlocks::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("need at least one chain".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn-in {} must be below iteration count {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adaptation window must be positive".into()));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Names of stored parameters for a given country layout.
pub fn parameter_names(layout: &[(String, usize)]) -> Vec<String> {
    let mut names: Vec<String> = vec!["beta0".into(), "beta1".into(), "theta".into()];
    for s in SURVEY_TYPES {
        names.push(format!("omega[{s}]"));
    }
    names.extend(["sigma_lambda".into(), "chi".into(), "psi".into()]);
    for (id, k) in layout {
        names.push(format!("lambda[{id}]"));
        for q in 1..*k {
            names.push(format!("eps[{id}][{q}]"));
        }
        names.push(format!("sigma2_eps[{id}]"));
    }
    names
}

pub const N_GLOBAL: usize = 10;

fn flatten(state: &ParameterState, out: &mut Vec<f64>) {
    let g = &state.global;
    out.extend([g.beta0, g.beta1, g.theta]);
    out.extend_from_slice(&g.omega);
    out.extend([g.sigma_lambda, g.chi, g.psi]);
    for c in &state.countries {
        out.push(c.lambda);
        out.extend_from_slice(&c.eps);
        out.push(c.sigma2_eps);
    }
}

fn unflatten(layout: &[(String, usize)], v: &[f64]) -> ParameterState {
    let mut omega = [0.0; 4];
    omega.copy_from_slice(&v[3..7]);
    let global = GlobalParams {
        beta0: v[0],
        beta1: v[1],
        theta: v[2],
        omega,
        sigma_lambda: v[7],
        chi: v[8],
        psi: v[9],
    };
    let mut i = N_GLOBAL;
    let mut countries = Vec::with_capacity(layout.len());
    for (_, k) in layout {
        let lambda = v[i];
        let eps = v[i + 1..i + *k].to_vec();
        let sigma2_eps = v[i + *k];
        i += k + 1;
        countries.push(CountryParams {
            lambda,
            eps,
            sigma2_eps,
        });
    }
    ParameterState { global, countries }
}

/// Retained posterior draws, `values[param][chain][draw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Country id and basis count, in fit order.
    pub layout: Vec<(String, usize)>,
    pub n_chains: usize,
    pub n_draws: usize,
    /// MCMC iteration (1-based) of each retained draw.
    pub iterations: Vec<usize>,
    values: Vec<f64>,
    /// Cutpoint acceptance rate after burn-in, per chain.
    pub theta_acceptance: Vec<f64>,
}

impl PosteriorDraws {
    pub fn from_parts(
        layout: Vec<(String, usize)>,
        n_chains: usize,
        n_draws: usize,
        iterations: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let names = parameter_names(&layout);
        if values.len() != names.len() * n_chains * n_draws {
            return Err(Error::Data(format!(
                "expected {} draw values, got {}",
                names.len() * n_chains * n_draws,
                values.len()
            )));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            names,
            index,
            layout,
            n_chains,
            n_draws,
            iterations,
            values,
            theta_acceptance: Vec::new(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn chain(&self, param: usize, chain: usize) -> &[f64] {
        let start = (param * self.n_chains + chain) * self.n_draws;
        &self.values[start..start + self.n_draws]
    }

    pub fn chains(&self, param: usize) -> Vec<&[f64]> {
        (0..self.n_chains).map(|c| self.chain(param, c)).collect()
    }

    /// All draws of a parameter, chains concatenated.
    pub fn pooled(&self, param: usize) -> &[f64] {
        let start = param * self.n_chains * self.n_draws;
        &self.values[start..start + self.n_chains * self.n_draws]
    }

    pub fn pooled_by_name(&self, name: &str) -> Option<&[f64]> {
        self.param_index(name).map(|i| self.pooled(i))
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    /// Parameter state of pooled draw `d` (chain-major order).
    pub fn state(&self, d: usize) -> ParameterState {
        let total = self.total_draws();
        let v: Vec<f64> = (0..self.n_params())
            .map(|p| self.values[p * total + d])
            .collect();
        unflatten(&self.layout, &v)
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: Option<f64>,
}

pub fn diagnose(draws: &PosteriorDraws) -> Vec<ParamDiagnostic> {
    (0..draws.n_params())
        .map(|p| {
            let ch = draws.chains(p);
            ParamDiagnostic {
                name: draws.names[p].clone(),
                rhat: gelman_rubin(&ch).unwrap_or(f64::NAN),
                ess: effective_sample_size(&ch).unwrap_or(None),
            }
        })
        .collect()
}

/// Overdispersed starting state for chain `chain_index`.
///
/// The cutpoint starts at a chain-specific quantile of the observation-time
/// U5MR; the global coefficients come from weighted least squares on the
/// hinge with that cutpoint; intercepts from mean residuals; variance
/// parameters from residual moments scaled by 0.5, 1 or 2.
pub fn init_chain(
    chain_index: usize,
    n_chains: usize,
    data: &FitData,
    seed: u64,
) -> ParameterState {
    let mut rng = rng_indexed(seed, "init", chain_index as u64);
    let mult = [0.5, 1.0, 2.0][chain_index % 3] * 1.15f64.powi((chain_index / 3) as i32);
    let us: Vec<f64> = data.all_obs().map(|o| o.u5mr).collect();
    let q = (chain_index + 1) as f64 / (n_chains + 1) as f64;
    let theta = if us.is_empty() {
        30.0 * mult
    } else {
        quantile(&us, q)
    }
    .clamp(1.0, THETA_MAX - 1.0);

    // weighted least squares on [1, hinge]
    let (mut s00, mut s01, mut s11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for o in data.all_obs() {
        let w = 1.0 / o.own_var.max(1e-8);
        let h = o.hinge(theta);
        s00 += w;
        s01 += w * h;
        s11 += w * h * h;
        r0 += w * o.y;
        r1 += w * h * o.y;
    }
    let det = s00 * s11 - s01 * s01;
    let (mut beta0, beta1) = if s00 > 0.0 && det > 1e-10 * s00 * s11.max(1e-300) {
        ((s11 * r0 - s01 * r1) / det, (s00 * r1 - s01 * r0) / det)
    } else if s00 > 0.0 {
        (r0 / s00, 0.0)
    } else {
        (0.0, 0.0)
    };
    let jitter: f64 = rng.sample(StandardNormal);
    beta0 += 0.05 * jitter;

    let mut lambdas = Vec::with_capacity(data.countries.len());
    let mut resid_by_type: [Vec<f64>; 4] = Default::default();
    let mut own_by_type: [Vec<f64>; 4] = Default::default();
    let mut sigma2s = Vec::with_capacity(data.countries.len());
    for fc in &data.countries {
        let res: Vec<f64> = fc
            .obs
            .iter()
            .map(|o| o.y - beta0 - beta1 * o.hinge(theta))
            .collect();
        let lambda = if res.is_empty() { 0.0 } else { mean(&res) };
        lambdas.push(lambda);
        let mut ss = 0.0;
        let mut own = 0.0;
        for (o, r) in fc.obs.iter().zip(&res) {
            let e = r - lambda;
            ss += e * e;
            own += o.own_var;
            if let Some(j) = o.series.survey_index() {
                resid_by_type[j].push(e);
                own_by_type[j].push(o.own_var);
            }
        }
        let n = fc.obs.len().max(1) as f64;
        sigma2s.push(((ss - own) / n).max(1e-3) * mult);
    }
    let sigma_lambda = if lambdas.len() >= 2 {
        sd(&lambdas)
    } else {
        0.3
    };
    let sigma_lambda = (sigma_lambda * mult).clamp(0.02, 39.0);
    let mut omega = [0.1 * mult; 4];
    for j in 0..4 {
        if resid_by_type[j].len() >= 2 {
            let ms =
                resid_by_type[j].iter().map(|e| e * e).sum::<f64>() / resid_by_type[j].len() as f64;
            let excess = ms - mean(&own_by_type[j]);
            omega[j] = (excess.max(0.0025).sqrt() * mult).clamp(0.01, 39.0);
        }
    }
    let logs: Vec<f64> = sigma2s.iter().map(|s| s.ln()).collect();
    let chi = if logs.is_empty() { -3.0 } else { mean(&logs) };
    let psi = if logs.len() >= 2 { sd(&logs) } else { 1.0 };
    let psi = (psi.max(0.3) * mult).clamp(0.05, 39.0);

    ParameterState {
        global: GlobalParams {
            beta0,
            beta1,
            theta,
            omega,
            sigma_lambda,
            chi,
            psi,
        },
        countries: data
            .countries
            .iter()
            .zip(lambdas.iter().zip(&sigma2s))
            .map(|(fc, (l, s2))| CountryParams {
                lambda: *l,
                eps: vec![0.0; fc.k() - 1],
                sigma2_eps: *s2,
            })
            .collect(),
    }
}

/// Log target for the cutpoint random walk on `log theta`: collapsed
/// marginal likelihood, uniform prior, and the log-scale Jacobian.
pub fn theta_log_target(lin: &LinearSystem, data: &FitData, theta: f64) -> f64 {
    if !(theta > 0.0 && theta < THETA_MAX) {
        return f64::NEG_INFINITY;
    }
    lin.log_marginal_theta(data, theta) + theta.ln()
}

/// Log Metropolis ratio for moving the cutpoint from `from` to `to`.
pub fn theta_log_acceptance(lin: &LinearSystem, data: &FitData, from: f64, to: f64) -> f64 {
    if to == from {
        return 0.0;
    }
    theta_log_target(lin, data, to) - theta_log_target(lin, data, from)
}

/// One random-walk Metropolis step on `log theta`. Returns whether the
/// proposal was accepted.
pub fn update_theta<R: Rng + ?Sized>(
    lin: &LinearSystem,
    data: &FitData,
    state: &mut ParameterState,
    step: f64,
    rng: &mut R,
) -> bool {
    let cur = state.global.theta;
    let z: f64 = rng.sample(StandardNormal);
    let prop = cur * (step * z).exp();
    let log_a = theta_log_acceptance(lin, data, cur, prop);
    if log_a >= 0.0 || rng.random::<f64>().ln() < log_a {
        state.global.theta = prop;
        true
    } else {
        false
    }
}

/// Exact Gaussian draw of `(beta0, beta1, lambda, eps)` given everything else.
pub fn update_linear_block<R: Rng + ?Sized>(
    data: &FitData,
    state: &mut ParameterState,
    rng: &mut R,
) {
    let lin = LinearSystem::new(data, state);
    lin.draw(data, state, rng);
}

pub use variances::update_variances;

struct Chain {
    index: usize,
    state: ParameterState,
    rng: ChainRng,
    log_step: f64,
    batch_accept: usize,
    batch_total: usize,
    batches: usize,
    post_accept: usize,
    post_total: usize,
}

impl Chain {
    fn new(
        index: usize,
        config: &ChainConfig,
        data: &FitData,
        init: Option<ParameterState>,
    ) -> Self {
        let state =
            init.unwrap_or_else(|| init_chain(index, config.n_chains, data, config.master_seed));
        Self {
            index,
            state,
            rng: rng_indexed(config.master_seed, "chain", index as u64),
            log_step: (0.1f64).ln(),
            batch_accept: 0,
            batch_total: 0,
            batches: 0,
            post_accept: 0,
            post_total: 0,
        }
    }

    fn sweep(&mut self, data: &FitData, config: &ChainConfig, iter: usize) -> Result<()> {
        let lin = LinearSystem::new(data, &self.state);
        if !config.fixed.theta {
            for _ in 0..config.theta_steps {
                let acc = update_theta(
                    &lin,
                    data,
                    &mut self.state,
                    self.log_step.exp(),
                    &mut self.rng,
                );
                if iter < config.burn_in {
                    self.batch_accept += acc as usize;
                    self.batch_total += 1;
                } else {
                    self.post_accept += acc as usize;
                    self.post_total += 1;
                }
            }
        }
        lin.draw(data, &mut self.state, &mut self.rng);
        if !config.fixed.variances {
            update_variances(data, &mut self.state, &mut self.rng);
        }
        if iter < config.burn_in && (iter + 1) % config.adapt_window == 0 && self.batch_total > 0 {
            self.batches += 1;
            let rate = self.batch_accept as f64 / self.batch_total as f64;
            let delta = (1.0 / (self.batches as f64).sqrt()).min(0.5);
            if rate < config.target_accept.0 {
                self.log_step -= delta;
            } else if rate > config.target_accept.1 {
                self.log_step += delta;
            }
            self.log_step = self.log_step.clamp(-12.0, 2.0);
            self.batch_accept = 0;
            self.batch_total = 0;
        }
        let lp = log_posterior(data, &self.state);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                chain: self.index,
                iteration: iter + 1,
                dump: describe_state(&self.state),
            });
        }
        Ok(())
    }
}

fn run_chain(
    index: usize,
    config: &ChainConfig,
    data: &FitData,
    init: Option<ParameterState>,
) -> Result<(Vec<f64>, f64)> {
    let mut chain = Chain::new(index, config, data, init);
    let mut out = Vec::new();
    for iter in 0..config.n_iter {
        chain.sweep(data, config, iter)?;
        if iter >= config.burn_in && (iter + 1 - config.burn_in) % config.thin == 0 {
            flatten(&chain.state, &mut out);
        }
    }
    let acc = if chain.post_total > 0 {
        chain.post_accept as f64 / chain.post_total as f64
    } else {
        f64::NAN
    };
    Ok((out, acc))
}

/// Run all chains (in parallel on the current rayon pool) and collect the
/// retained draws. Output is identical for any thread count.
pub fn run(config: &ChainConfig, data: &FitData) -> Result<PosteriorDraws> {
    run_from(config, data, None)
}

/// As [`run`], optionally with explicit starting states (one per chain).
pub fn run_from(
    config: &ChainConfig,
    data: &FitData,
    inits: Option<Vec<ParameterState>>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if let Some(v) = &inits {
        if v.len() != config.n_chains {
            return Err(Error::Config(format!(
                "{} initial states for {} chains",
                v.len(),
                config.n_chains
            )));
        }
    }
    let layout: Vec<(String, usize)> = data
        .countries
        .iter()
        .map(|c| (c.country_id.clone(), c.k()))
        .collect();
    let results: Vec<Result<(Vec<f64>, f64)>> = (0..config.n_chains)
        .into_par_iter()
        .map(|i| run_chain(i, config, data, inits.as_ref().map(|v| v[i].clone())))
        .collect();
    let mut per_chain = Vec::with_capacity(config.n_chains);
    let mut acceptance = Vec::with_capacity(config.n_chains);
    for r in results {
        let (v, a) = r?;
        per_chain.push(v);
        acceptance.push(a);
    }
    let n_draws = config.retained_per_chain();
    let n_params = parameter_names(&layout).len();
    let mut values = vec![0.0; n_params * config.n_chains * n_draws];
    for (c, flat) in per_chain.iter().enumerate() {
        for d in 0..n_draws {
            let row = &flat[d * n_params..(d + 1) * n_params];
            for (p, v) in row.iter().enumerate() {
                values[(p * config.n_chains + c) * n_draws + d] = *v;
            }
        }
    }
    let iterations = (1..=n_draws)
        .map(|d| config.burn_in + d * config.thin)
        .collect();
    let mut draws =
        PosteriorDraws::from_parts(layout, config.n_chains, n_draws, iterations, values)?;
    draws.theta_acceptance = acceptance;
    Ok(draws)
}

/// Draws as long-format CSV: `parameter, chain, iteration, value`.
pub fn write_draws<W: std::io::Write>(writer: W, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(writer));
    w.write_record(["parameter", "chain", "iteration", "value"])?;
    for (p, name) in draws.names.iter().enumerate() {
        for c in 0..draws.n_chains {
            for (d, v) in draws.chain(p, c).iter().enumerate() {
                w.write_record([
                    name.as_str(),
                    &(c + 1).to_string(),
                    &draws.iterations[d].to_string(),
                    &format!("{v:?}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn layout_from_names(names: &[String]) -> Result<Vec<(String, usize)>> {
    let mut layout: Vec<(String, usize)> = Vec::new();
    for n in names {
        if let Some(id) = n.strip_prefix("lambda[").and_then(|r| r.strip_suffix(']')) {
            layout.push((id.to_string(), 1));
        } else if let Some(rest) = n.strip_prefix("eps[") {
            let id = rest.split(']').next().unwrap_or("");
            match layout.last_mut() {
                Some((last, k)) if last == id => *k += 1,
                _ => return Err(Error::Data(format!("draw '{n}' out of order"))),
            }
        }
    }
    Ok(layout)
}

/// Read draws written by [`write_draws`].
pub fn read_draws<R: std::io::Read>(reader: R) -> Result<PosteriorDraws> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut names: Vec<String> = Vec::new();
    let mut per_param: Vec<BTreeMap<(usize, usize), f64>> = Vec::new();
    let mut iterations: std::collections::BTreeSet<usize> = Default::default();
    let mut chains: std::collections::BTreeSet<usize> = Default::default();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        let name = rec.get(0).ok_or_else(|| bad("missing parameter"))?;
        let chain: usize = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad chain"))?;
        let iter: usize = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad iteration"))?;
        let value: f64 = rec
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad value"))?;
        if names.last().map(String::as_str) != Some(name) {
            names.push(name.to_string());
            per_param.push(BTreeMap::new());
        }
        per_param.last_mut().unwrap().insert((chain, iter), value);
        chains.insert(chain);
        iterations.insert(iter);
    }
    let layout = layout_from_names(&names)?;
    if parameter_names(&layout) != names {
        return Err(Error::Data(
            "draws file does not match the parameter layout".into(),
        ));
    }
    let chains: Vec<usize> = chains.into_iter().collect();
    let iterations: Vec<usize> = iterations.into_iter().collect();
    let mut values = Vec::with_capacity(names.len() * chains.len() * iterations.len());
    for (p, m) in per_param.iter().enumerate() {
        for c in &chains {
            for it in &iterations {
                values.push(*m.get(&(*c, *it)).ok_or_else(|| {
                    Error::Data(format!(
                        "missing draw of {} chain {c} iteration {it}",
                        names[p]
                    ))
                })?);
            }
        }
    }
    PosteriorDraws::from_parts(layout, chains.len(), iterations.len(), iterations, values)
}

/// Diagnostics CSV: `parameter, rhat, ess`.
pub fn write_diagnostics<W: std::io::Write>(writer: W, diag: &[ParamDiagnostic]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "rhat", "ess"])?;
    for d in diag {
        w.write_record([
            d.name.clone(),
            format!("{:?}", d.rhat),
            d.ess
                .map(|e| format!("{e:?}"))
                .unwrap_or_else(|| "NA".into()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior means of all global parameters by name.
pub fn global_summary(draws: &PosteriorDraws) -> Vec<(String, f64)> {
    draws.names[..N_GLOBAL]
        .iter()
        .enumerate()
        .map(|(p, n)| (n.clone(), mean(draws.pooled(p))))
        .collect()
}
