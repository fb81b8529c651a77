//! Predictive model comparison: WAIC, PSIS-LOO and bridge-sampled
//! marginal likelihoods for Bayes factors.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{MeanSpec, ResponseVariant};
use crate::nuts::PosteriorSamples;
use crate::target::{LogDensity, ParamVector, PriorSpec, TargetError, YieldTarget};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("non-finite log likelihood at draw {draw} (chain {chain}, iteration {iteration}), observation {obs}")]
    NonFinite { draw: usize, chain: usize, iteration: usize, obs: usize },
    #[error("draws carry parameters {got:?}, model expects {expected:?}")]
    Params { expected: Vec<String>, got: Vec<String> },
    #[error("need at least {need} draws, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("bridge sampling did not converge in 1000 rounds (last log estimates {previous} and {last})")]
    Bridge { previous: f64, last: f64 },
    #[error("proposal covariance is not positive definite")]
    Proposal,
    #[error("candidate {0} was fitted on different data")]
    DataMismatch(String),
    #[error("no candidates to compare")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_mean_exp(x: &[f64]) -> f64 {
    log_sum_exp(x) - (x.len() as f64).ln()
}

/// Shifted-data variance; exactly 0 for constant input.
fn sample_var(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (s, ss) = x.iter().fold((0.0, 0.0), |(s, ss), v| {
        let d = v - x[0];
        (s + d, ss + d * d)
    });
    ((ss - s * s / n) / (n - 1.0)).max(0.0)
}

/// `sqrt(n * Var)` of pointwise contributions.
fn total_se(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    (x.len() as f64 * sample_var(x)).sqrt()
}

/// `S x n` matrix of `log p(y_i | theta_s)`, row-major by draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix {
    pub n_draws: usize,
    pub n_obs: usize,
    pub values: Vec<f64>,
    /// `(chain, iteration)` of each row.
    pub draw_ids: Vec<(usize, usize)>,
}

impl LogLikMatrix {
    /// From rows of equal length; draw ids are `(0, s)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_obs = rows.first().map_or(0, Vec::len);
        LogLikMatrix {
            n_draws: rows.len(),
            n_obs,
            values: rows.concat(),
            draw_ids: (0..rows.len()).map(|s| (0, s)).collect(),
        }
    }

    pub fn get(&self, s: usize, i: usize) -> f64 {
        self.values[s * self.n_obs + i]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_obs..(s + 1) * self.n_obs]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_draws).map(|s| self.get(s, i)).collect()
    }

    /// Per-observation `log mean_s p(y_i | theta_s)`.
    pub fn pointwise_lppd(&self) -> Vec<f64> {
        (0..self.n_obs).map(|i| log_mean_exp(&self.column(i))).collect()
    }
}

/// Normal log density of every observation under every draw.
pub fn pointwise_loglik(samples: &PosteriorSamples, data: &Dataset, spec: &MeanSpec) -> Result<LogLikMatrix, SelectionError> {
    let spec = data.rebind(spec)?;
    let expected = crate::target::layout(&spec).0;
    if samples.param_names != expected {
        return Err(SelectionError::Params { expected, got: samples.param_names.clone() });
    }
    let m = spec.n_params();
    let k = spec.n_dummies();
    let dummies = spec.factor().map_or_else(Vec::new, |f| f.matrix.concat());
    let n = data.len();
    let mut values = Vec::with_capacity(samples.n_draws() * n);
    let mut draw_ids = Vec::with_capacity(samples.n_draws());
    for c in 0..samples.n_chains {
        for it in 0..samples.n_kept {
            let theta = samples.draw(c, it);
            let sigma = theta[m];
            let norm = -0.5 * (std::f64::consts::TAU * sigma).ln();
            for (i, row) in data.rows.iter().enumerate() {
                let (mu, _) = spec.eval_unchecked(&theta[..m], row.n, row.p, &dummies[i * k..(i + 1) * k], None);
                let v = norm - (row.y - mu).powi(2) / (2.0 * sigma);
                if !v.is_finite() {
                    return Err(SelectionError::NonFinite { draw: draw_ids.len(), chain: c, iteration: it, obs: i });
                }
                values.push(v);
            }
            draw_ids.push((c, it));
        }
    }
    Ok(LogLikMatrix { n_draws: draw_ids.len(), n_obs: n, values, draw_ids })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Waic {
    pub lppd: f64,
    pub elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub se_elpd_waic: f64,
    pub pointwise: Vec<f64>,
}

pub fn waic(m: &LogLikMatrix) -> Result<Waic, SelectionError> {
    if m.n_draws < 2 {
        return Err(SelectionError::TooFewDraws { need: 2, got: m.n_draws });
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut pointwise = Vec::with_capacity(m.n_obs);
    for i in 0..m.n_obs {
        let col = m.column(i);
        let l = log_mean_exp(&col);
        let v = sample_var(&col);
        lppd += l;
        p_waic += v;
        pointwise.push(l - v);
    }
    let elpd_waic = lppd - p_waic;
    Ok(Waic { lppd, elpd_waic, p_waic, waic: -2.0 * elpd_waic, se_elpd_waic: total_se(&pointwise), pointwise })
}

/// Generalized Pareto fit of exceedances `x` (ascending, positive) by the
/// Zhang-Stephens profile posterior, with the weakly informative shrinkage
/// of `k` towards 0.5. Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let m = 30 + (nf.sqrt() as usize);
    let x_star = x[((nf / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x[n - 1] + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / x_star)
        .collect();
    let l_theta: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = x.iter().map(|&v| (a * v).ln_1p()).sum::<f64>() / nf;
            nf * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let norm = log_sum_exp(&l_theta);
    let theta_hat: f64 = theta.iter().zip(&l_theta).map(|(t, l)| t * (l - norm).exp()).sum();
    let k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta_hat;
    let a = 10.0;
    let k = k * nf / (nf + a) + a * 0.5 / (nf + a);
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    sigma * (-k * (-p).ln_1p()).exp_m1() / k
}

/// Pareto-smoothed normalized log weights and the tail shape `k`.
pub fn psis(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let top = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - top).collect();
    let tail_len = (0.2 * s as f64).ceil() as usize;
    let mut k = f64::INFINITY;
    if tail_len >= 5 && tail_len < s {
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let tail_idx = &order[s - tail_len..];
        let cutoff = lw[order[s - tail_len - 1]];
        let exp_cut = cutoff.exp();
        let x: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        if x.iter().all(|&v| v > 0.0) {
            let (kh, sigma) = gpd_fit(&x);
            k = kh;
            if kh.is_finite() && sigma > 0.0 {
                for (j, &i) in tail_idx.iter().enumerate() {
                    let p = (j as f64 + 0.5) / tail_len as f64;
                    lw[i] = (gpd_quantile(p, kh, sigma) + exp_cut).ln();
                }
            }
        } else {
            // flat tail: nothing to smooth
            k = 0.0;
        }
        for v in lw.iter_mut() {
            *v = v.min(0.0);
        }
    }
    let norm = log_sum_exp(&lw);
    lw.iter_mut().for_each(|v| *v -= norm);
    (lw, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loo {
    pub elpd_loo: f64,
    pub p_loo: f64,
    pub looic: f64,
    pub se_elpd_loo: f64,
    pub pointwise: Vec<f64>,
    /// NaN when plain importance sampling was used.
    pub pareto_k: Vec<f64>,
    /// Observations with `k > 0.7`.
    pub n_bad_k: usize,
    pub warnings: Vec<String>,
}

/// Threshold above which a Pareto `k` marks the estimate unreliable.
pub const PARETO_K_BAD: f64 = 0.7;

/// Below this many draws PSIS is skipped for plain importance sampling.
pub const PSIS_MIN_DRAWS: usize = 100;

pub fn loo(m: &LogLikMatrix) -> Result<Loo, SelectionError> {
    if m.n_draws < 2 {
        return Err(SelectionError::TooFewDraws { need: 2, got: m.n_draws });
    }
    let mut warnings = Vec::new();
    let smooth = m.n_draws >= PSIS_MIN_DRAWS;
    if !smooth {
        warnings.push(format!("{} draws is too few for Pareto smoothing; using plain importance sampling", m.n_draws));
    }
    let mut pointwise = Vec::with_capacity(m.n_obs);
    let mut pareto_k = Vec::with_capacity(m.n_obs);
    let mut lppd = 0.0;
    for i in 0..m.n_obs {
        let col = m.column(i);
        lppd += log_mean_exp(&col);
        let neg: Vec<f64> = col.iter().map(|v| -v).collect();
        let (lw, k) = if smooth {
            psis(&neg)
        } else {
            let norm = log_sum_exp(&neg);
            (neg.iter().map(|v| v - norm).collect(), f64::NAN)
        };
        let terms: Vec<f64> = lw.iter().zip(&col).map(|(w, l)| w + l).collect();
        pointwise.push(log_sum_exp(&terms));
        pareto_k.push(k);
    }
    let elpd_loo: f64 = pointwise.iter().sum();
    let n_bad_k = pareto_k.iter().filter(|&&k| k > PARETO_K_BAD).count();
    if n_bad_k > 0 {
        warnings.push(format!("{n_bad_k} observations have Pareto k > {PARETO_K_BAD}; LOO estimate unreliable"));
    }
    Ok(Loo {
        elpd_loo,
        p_loo: lppd - elpd_loo,
        looic: -2.0 * elpd_loo,
        se_elpd_loo: total_se(&pointwise),
        pointwise,
        pareto_k,
        n_bad_k,
        warnings,
    })
}

/// Multivariate normal fitted by moments.
struct Mvn {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Mvn {
    fn fit(draws: &[&[f64]]) -> Result<Self, SelectionError> {
        let d = draws[0].len();
        let n = draws.len() as f64;
        let mut mean = DVector::zeros(d);
        for x in draws {
            mean += DVector::from_column_slice(x);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for x in draws {
            let c = DVector::from_column_slice(x) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        let chol = cov.cholesky().ok_or(SelectionError::Proposal)?.l();
        let log_det_half: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Mvn { mean, chol, log_norm: -0.5 * d as f64 * LN_2PI - log_det_half })
    }

    fn ln_pdf(&self, x: &[f64]) -> f64 {
        let c = DVector::from_column_slice(x) - &self.mean;
        let u = self.chol.solve_lower_triangular(&c).expect("non-singular factor");
        self.log_norm - 0.5 * u.norm_squared()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_iterator(self.mean.len(), (0..self.mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { tol: 1e-6, max_iter: 1000, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeResult {
    pub log_ml: f64,
    pub iterations: usize,
}

/// Log marginal likelihood by bridge sampling with a normal proposal
/// matched to the posterior draws (unconstrained scale). Every other draw
/// fits the proposal; the rest enter the bridge iteration.
pub fn bridge_sampling<T: LogDensity + ?Sized>(
    target: &T,
    draws: &[&[f64]],
    config: &BridgeConfig,
) -> Result<BridgeResult, SelectionError> {
    if draws.len() < 2 * (target.dim() + 2) {
        return Err(SelectionError::TooFewDraws { need: 2 * (target.dim() + 2), got: draws.len() });
    }
    let fit: Vec<&[f64]> = draws.iter().step_by(2).copied().collect();
    let post: Vec<&[f64]> = draws.iter().skip(1).step_by(2).copied().collect();
    let proposal = Mvn::fit(&fit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n1 = post.len();
    let n2 = n1;
    let l1: Vec<f64> = post.iter().map(|x| target.log_density(x) - proposal.ln_pdf(x)).collect();
    let l2: Vec<f64> = (0..n2)
        .map(|_| {
            let x = proposal.sample(&mut rng);
            target.log_density(&x) - proposal.ln_pdf(&x)
        })
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect();
    let mut sorted = l1.clone();
    sorted.sort_by(f64::total_cmp);
    let lstar = sorted[n1 / 2];
    let (ls1, ls2) = ((n1 as f64 / (n1 + n2) as f64).ln(), (n2 as f64 / (n1 + n2) as f64).ln());
    let lae = |a: f64, b: f64| log_sum_exp(&[a, b]);

    let mut log_r = 0.0;
    let mut previous = f64::NAN;
    for iter in 1..=config.max_iter {
        let num: Vec<f64> = l2.iter().map(|&l| (l - lstar) - lae(ls1 + l - lstar, ls2 + log_r)).collect();
        let den: Vec<f64> = l1.iter().map(|&l| -lae(ls1 + l - lstar, ls2 + log_r)).collect();
        let next = log_mean_exp(&num) - log_mean_exp(&den);
        let done = ((next - log_r).exp() - 1.0).abs() < config.tol;
        previous = log_r;
        log_r = next;
        if done {
            return Ok(BridgeResult { log_ml: log_r + lstar, iterations: iter });
        }
    }
    Err(SelectionError::Bridge { previous: previous + lstar, last: log_r + lstar })
}

/// Log marginal likelihood by averaging the likelihood over prior draws.
/// Unbiased but only practical for small datasets; used as a check.
pub fn prior_importance_log_ml(target: &YieldTarget, n_draws: usize, seed: u64) -> Result<f64, SelectionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ll = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let z = target.initial_point(&mut rng);
        let params = ParamVector::from_unconstrained(target.spec(), &z)?;
        ll.push(target.log_likelihood(&params)?);
    }
    Ok(log_mean_exp(&ll))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesFactor {
    pub log_ml_alt: f64,
    pub log_ml_null: f64,
    pub log_bf: f64,
    pub bf: f64,
}

/// `m(alt) / m(null)` from bridge-sampled marginal likelihoods.
pub fn bayes_factor<A: LogDensity + ?Sized, B: LogDensity + ?Sized>(
    alt: &A,
    alt_draws: &[&[f64]],
    null: &B,
    null_draws: &[&[f64]],
    config: &BridgeConfig,
) -> Result<BayesFactor, SelectionError> {
    let a = bridge_sampling(alt, alt_draws, config)?.log_ml;
    let b = bridge_sampling(null, null_draws, config)?.log_ml;
    Ok(BayesFactor { log_ml_alt: a, log_ml_null: b, log_bf: a - b, bf: (a - b).exp() })
}

/// A fitted candidate for [`compare`].
pub struct Candidate<'a> {
    pub id: String,
    pub data: &'a Dataset,
    pub spec: MeanSpec,
    pub priors: PriorSpec,
    pub samples: &'a PosteriorSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub elpd_loo: f64,
    pub se_elpd_loo: f64,
    pub p_loo: f64,
    pub looic: f64,
    pub elpd_waic: f64,
    pub se_elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub max_pareto_k: f64,
    pub n_bad_pareto_k: usize,
    pub log_marginal_likelihood: f64,
    /// Against the reference model; absent with a single candidate.
    pub bayes_factor: Option<f64>,
    pub log_bayes_factor: Option<f64>,
    pub favored_elpd: bool,
    pub favored_looic: bool,
    pub favored_waic: bool,
    pub favored_bf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub reference: Option<String>,
    pub rows: Vec<ModelRow>,
    pub warnings: Vec<String>,
}

fn argbest(values: impl Iterator<Item = f64>, larger: bool) -> usize {
    let mut best = 0;
    let mut best_v = f64::NAN;
    for (i, v) in values.enumerate() {
        let better = best_v.is_nan() || if larger { v > best_v } else { v < best_v };
        if better && !v.is_nan() {
            best = i;
            best_v = v;
        }
    }
    best
}

/// WAIC, PSIS-LOO and Bayes factors for candidates fitted to `data`.
/// The reference for Bayes factors is the N-only candidate when present,
/// otherwise the first one.
pub fn compare(candidates: &[Candidate], data: &Dataset, bridge: &BridgeConfig) -> Result<ComparisonReport, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    for c in candidates {
        if c.data != data {
            return Err(SelectionError::DataMismatch(c.id.clone()));
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for c in candidates {
        let m = pointwise_loglik(c.samples, data, &c.spec)?;
        let w = waic(&m)?;
        let l = loo(&m)?;
        warnings.extend(l.warnings.iter().map(|w| format!("{}: {w}", c.id)));
        let target = YieldTarget::new(data, &c.spec, c.priors.clone())?;
        let draws: Vec<&[f64]> = c.samples.iter_unconstrained().collect();
        let ml = bridge_sampling(&target, &draws, bridge)?;
        rows.push(ModelRow {
            model: c.id.clone(),
            elpd_loo: l.elpd_loo,
            se_elpd_loo: l.se_elpd_loo,
            p_loo: l.p_loo,
            looic: l.looic,
            elpd_waic: w.elpd_waic,
            se_elpd_waic: w.se_elpd_waic,
            p_waic: w.p_waic,
            waic: w.waic,
            max_pareto_k: l.pareto_k.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            n_bad_pareto_k: l.n_bad_k,
            log_marginal_likelihood: ml.log_ml,
            bayes_factor: None,
            log_bayes_factor: None,
            favored_elpd: false,
            favored_looic: false,
            favored_waic: false,
            favored_bf: false,
        });
    }
    let reference = if rows.len() > 1 {
        let idx = candidates
            .iter()
            .position(|c| c.spec.variant() == ResponseVariant::NOnly && c.spec.factor().is_none())
            .unwrap_or(0);
        let null = rows[idx].log_marginal_likelihood;
        for r in rows.iter_mut() {
            let lbf = r.log_marginal_likelihood - null;
            r.log_bayes_factor = Some(lbf);
            r.bayes_factor = Some(lbf.exp());
        }
        Some(rows[idx].model.clone())
    } else {
        None
    };
    let e = argbest(rows.iter().map(|r| r.elpd_loo), true);
    let l = argbest(rows.iter().map(|r| r.looic), false);
    let w = argbest(rows.iter().map(|r| r.waic), false);
    let b = argbest(rows.iter().map(|r| r.log_marginal_likelihood), true);
    rows[e].favored_elpd = true;
    rows[l].favored_looic = true;
    rows[w].favored_waic = true;
    if reference.is_some() {
        rows[b].favored_bf = true;
    }
    Ok(ComparisonReport { reference, rows, warnings })
}

impl ComparisonReport {
    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let with_bf = self.reference.is_some();
        write!(out, "model,elpd_loo,se_elpd_loo,p_loo,looic,elpd_waic,se_elpd_waic,p_waic,waic,max_pareto_k,n_bad_pareto_k,log_marginal_likelihood")?;
        if with_bf {
            write!(out, ",bayes_factor,log_bayes_factor")?;
        }
        writeln!(out, ",favored_elpd,favored_looic,favored_waic{}", if with_bf { ",favored_bf" } else { "" })?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model,
                r.elpd_loo,
                r.se_elpd_loo,
                r.p_loo,
                r.looic,
                r.elpd_waic,
                r.se_elpd_waic,
                r.p_waic,
                r.waic,
                r.max_pareto_k,
                r.n_bad_pareto_k,
                r.log_marginal_likelihood
            )?;
            if with_bf {
                // Debug switches to exponent notation for extreme magnitudes
                write!(out, ",{:?},{}", r.bayes_factor.unwrap_or(f64::NAN), r.log_bayes_factor.unwrap_or(f64::NAN))?;
            }
            write!(out, ",{},{},{}", r.favored_elpd, r.favored_looic, r.favored_waic)?;
            if with_bf {
                write!(out, ",{}", r.favored_bf)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::nuts::{run_chains, SamplerConfig};

    #[test]
    fn hand_computed_waic() {
        let m = LogLikMatrix::from_rows(&[vec![-1.0, -2.0], vec![-3.0, -2.0]]);
        let w = waic(&m).unwrap();
        assert!((w.lppd - -3.5662191695169727).abs() < 1e-12);
        assert!((w.p_waic - 2.0).abs() < 1e-12);
        assert!((w.elpd_waic - -5.566219169516973).abs() < 1e-12);
        assert!((w.waic - 2.0 * 5.566219169516973).abs() < 1e-12);
    }

    #[test]
    fn waic_needs_two_draws() {
        assert!(waic(&LogLikMatrix::from_rows(&[vec![-1.0]])).is_err());
    }

    #[test]
    fn identical_draws_have_no_penalty() {
        let rows = vec![vec![-1.5, -0.3, -2.2]; 200];
        let m = LogLikMatrix::from_rows(&rows);
        let w = waic(&m).unwrap();
        assert_eq!(w.p_waic, 0.0);
        assert!((w.elpd_waic - w.lppd).abs() < 1e-12);
        let l = loo(&m).unwrap();
        assert!((l.elpd_loo - w.lppd).abs() < 1e-12);
        assert_eq!(l.looic, -2.0 * l.elpd_loo);
    }

    #[test]
    fn log_mean_exp_does_not_overflow() {
        assert!((log_mean_exp(&[709.0, 709.0]) - 709.0).abs() < 1e-12);
        assert!((log_mean_exp(&[-745.0, -745.0]) + 745.0).abs() < 1e-12);
    }

    #[test]
    fn gpd_fit_recovers_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, sigma) = (0.5, 2.0);
        let mut x: Vec<f64> = (0..20_000).map(|_| gpd_quantile(rng.random::<f64>(), k, sigma)).collect();
        x.sort_by(f64::total_cmp);
        let (kh, sh) = gpd_fit(&x);
        assert!((kh - k).abs() < 0.05, "{kh}");
        assert!((sh / sigma - 1.0).abs() < 0.1, "{sh}");
    }

    /// Conjugate normal-mean model with iid posterior draws and exact LOO.
    fn conjugate_loo(seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s2, v0) = (1.0, 4.0);
        let y: Vec<f64> = (0..10).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let post = |ys: &[f64]| {
            let v = 1.0 / (1.0 / v0 + ys.len() as f64 / s2);
            (v * ys.iter().sum::<f64>() / s2, v)
        };
        let (pm, pv) = post(&y);
        let ln_norm = |x: f64, m: f64, v: f64| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let t = pm + pv.sqrt() * rng.sample::<f64, _>(StandardNormal);
                y.iter().map(|&yi| ln_norm(yi, t, s2)).collect()
            })
            .collect();
        let psis_elpd = loo(&LogLikMatrix::from_rows(&rows)).unwrap().elpd_loo;
        let exact: f64 = (0..y.len())
            .map(|i| {
                let rest: Vec<f64> = y.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                let (m, v) = post(&rest);
                ln_norm(y[i], m, v + s2)
            })
            .sum();
        (psis_elpd, exact)
    }

    #[test]
    fn psis_loo_matches_exact_refits() {
        for seed in 0..5 {
            let (psis, exact) = conjugate_loo(seed);
            assert!((psis - exact).abs() < 0.3, "{psis} vs {exact}");
        }
    }

    /// `y_i ~ N(theta, s2)`, `theta ~ N(0, v0)` with normalized density.
    pub(crate) struct NormalMean {
        pub y: Vec<f64>,
        pub s2: f64,
        pub v0: f64,
    }

    impl NormalMean {
        /// Closed-form log marginal likelihood.
        pub fn log_ml(&self) -> f64 {
            let n = self.y.len() as f64;
            let sum: f64 = self.y.iter().sum();
            let ss: f64 = self.y.iter().map(|v| v * v).sum();
            let post_prec = 1.0 / self.v0 + n / self.s2;
            -0.5 * n * (LN_2PI + self.s2.ln()) - 0.5 * (self.v0 * post_prec).ln() - 0.5 * ss / self.s2
                + 0.5 * (sum / self.s2).powi(2) / post_prec
        }

        pub fn draws(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
            let post_prec = 1.0 / self.v0 + self.y.len() as f64 / self.s2;
            let m = self.y.iter().sum::<f64>() / self.s2 / post_prec;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| vec![m + rng.sample::<f64, _>(StandardNormal) / post_prec.sqrt()]).collect()
        }
    }

    impl LogDensity for NormalMean {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
            let t = z[0];
            let mut v = -0.5 * (LN_2PI + self.v0.ln() + t * t / self.v0);
            let mut g = -t / self.v0;
            for y in &self.y {
                v += -0.5 * (LN_2PI + self.s2.ln() + (y - t).powi(2) / self.s2);
                g += (y - t) / self.s2;
            }
            grad[0] = g;
            v
        }
    }

    #[test]
    fn bridge_matches_closed_form() {
        let a = NormalMean { y: vec![0.3, 1.2, -0.4, 0.8, 2.0, 0.1], s2: 1.0, v0: 10.0 };
        let b = NormalMean { y: a.y.clone(), s2: 1.0, v0: 0.1 };
        let da = a.draws(4000, 1);
        let db = b.draws(4000, 2);
        let ra: Vec<&[f64]> = da.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = db.iter().map(Vec::as_slice).collect();
        let bf = bayes_factor(&a, &ra, &b, &rb, &BridgeConfig::default()).unwrap();
        let exact = (a.log_ml() - b.log_ml()).exp();
        assert!((bf.bf / exact - 1.0).abs() < 0.05, "{} vs {exact}", bf.bf);
        let same = bayes_factor(&a, &ra, &a, &ra, &BridgeConfig { seed: 9, ..BridgeConfig::default() }).unwrap();
        assert!((same.bf - 1.0).abs() < 0.05);
        let rev = bayes_factor(&b, &rb, &a, &ra, &BridgeConfig::default()).unwrap();
        assert!((bf.bf * rev.bf - 1.0).abs() < 0.1);
    }

    fn small_fit(seed: u64) -> (Dataset, MeanSpec, PriorSpec, PosteriorSamples) {
        let cfg = GeneratorConfig {
            seed,
            n_grid: 5,
            p_grid: 2,
            variant: ResponseVariant::NOnly,
            ..GeneratorConfig::winter_barley()
        };
        let data = generate(&cfg).unwrap();
        let spec = MeanSpec::mb(ResponseVariant::NOnly);
        let priors = PriorSpec::weakly_informative(data.max_yield()).unwrap();
        let target = YieldTarget::new(&data, &spec, priors.clone()).unwrap();
        let sc = SamplerConfig { n_chains: 4, n_iter: 6000, n_warmup: 1000, seed, target_accept: 0.9, ..SamplerConfig::default() };
        let samples = run_chains(&target, &sc).unwrap();
        (data, spec, priors, samples)
    }

    #[test]
    fn loglik_rows_match_target_likelihood() {
        let (data, spec, priors, samples) = small_fit(4);
        let m = pointwise_loglik(&samples, &data, &spec).unwrap();
        let target = YieldTarget::new(&data, &spec, priors).unwrap();
        for s in (0..m.n_draws).step_by(97) {
            let (c, it) = m.draw_ids[s];
            let draw = samples.draw(c, it);
            let params = ParamVector::new(&spec, &draw[..3], draw[3]).unwrap();
            let ll = target.log_likelihood(&params).unwrap();
            assert!((m.row(s).iter().sum::<f64>() - ll).abs() < 1e-12 * ll.abs().max(1.0));
        }
        // column means do not depend on chain order
        let mut swapped = samples.clone();
        swapped.draws.swap(0, 1);
        let m2 = pointwise_loglik(&swapped, &data, &spec).unwrap();
        for i in 0..m.n_obs {
            let mean = |x: Vec<f64>| x.iter().sum::<f64>() / x.len() as f64;
            let (a, b) = (mean(m.column(i)), mean(m2.column(i)));
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn exact_fit_entry_is_zero() {
        let (mut data, spec, _, mut samples) = small_fit(5);
        data.rows.truncate(1);
        let theta = [8.0, 1.0, 0.02, 1.0 / (2.0 * std::f64::consts::PI)];
        data.rows[0].y = crate::model::eval_mean(&spec, &theta[..3], data.rows[0].n, 0.0, None).unwrap();
        samples.n_chains = 1;
        samples.n_kept = 1;
        samples.draws = vec![theta.to_vec()];
        let m = pointwise_loglik(&samples, &data, &spec).unwrap();
        assert_eq!(m.values, vec![0.0]);
    }

    #[test]
    fn bridge_agrees_with_prior_sampling_on_small_model() {
        let (data, spec, priors, samples) = small_fit(6);
        let target = YieldTarget::new(&data, &spec, priors).unwrap();
        let draws: Vec<&[f64]> = samples.iter_unconstrained().collect();
        let bridge = bridge_sampling(&target, &draws, &BridgeConfig::default()).unwrap().log_ml;
        let prior_is = prior_importance_log_ml(&target, 1_000_000, 7).unwrap();
        assert!((bridge - prior_is).abs() < 0.15, "{bridge} vs {prior_is}");
    }

    #[test]
    fn single_candidate_has_no_bayes_factor() {
        let (data, spec, priors, samples) = small_fit(8);
        let c = Candidate { id: "n".into(), data: &data, spec, priors, samples: &samples };
        let r = compare(&[c], &data, &BridgeConfig::default()).unwrap();
        assert!(r.reference.is_none());
        assert!(r.rows[0].bayes_factor.is_none());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(!String::from_utf8(buf).unwrap().contains("bayes_factor"));
        assert!(r.rows[0].favored_elpd && r.rows[0].favored_looic && r.rows[0].favored_waic);
        assert!((r.rows[0].looic + 2.0 * r.rows[0].elpd_loo).abs() < 1e-12);
    }

    #[test]
    fn compare_rejects_other_data() {
        let (data, spec, priors, samples) = small_fit(9);
        let mut other = data.clone();
        other.rows[0].y += 1.0;
        let c = Candidate { id: "n".into(), data: &other, spec, priors, samples: &samples };
        assert!(matches!(compare(&[c], &data, &BridgeConfig::default()), Err(SelectionError::DataMismatch(_))));
    }

    #[test]
    fn few_draws_fall_back_to_plain_weights() {
        let rows: Vec<Vec<f64>> = (0..50).map(|s| vec![-1.0 - 0.01 * s as f64]).collect();
        let l = loo(&LogLikMatrix::from_rows(&rows)).unwrap();
        assert_eq!(l.warnings.len(), 1);
        assert!(l.pareto_k[0].is_nan());
    }
}
