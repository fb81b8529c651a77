//! Posterior density of the MB hierarchy.
//!
//! Observations are `Y_i ~ Normal(mu_i, sigma)` where `sigma` is the error
//! **variance**. Coefficients and `sigma` carry gamma priors, factor effects
//! carry standard normal priors. All densities keep their normalizing
//! constants so marginal likelihoods are comparable across models.
//!
//! Sampling happens on an unconstrained vector `z`: positive coordinates are
//! stored as `ln(theta)` and real coordinates as `theta`. The posterior on `z`
//! includes the log-Jacobian `sum(z_k)` over the positive coordinates.

use std::f64::consts::TAU;

use rand::RngCore;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{MeanSpec, ModelError, ModelKind};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_PARAMS: usize = 16;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("non-finite mean at row {row}")]
    NonFiniteMean { row: usize },
    #[error("gamma prior needs positive shape and rate, got ({shape}, {rate})")]
    BadPrior { shape: f64, rate: f64 },
    #[error("posterior targets are only defined for the Mitscherlich-Baule model")]
    NotMb,
    #[error("parameter vector has {got} entries, spec needs {expected}")]
    Length { expected: usize, got: usize },
    #[error("the sigma parameter must be positive")]
    BadSigma,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `Gamma(shape, rate)` with density `rate^shape x^(shape-1) e^(-rate x) / Gamma(shape)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self, TargetError> {
        if shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite() {
            Ok(GammaPrior { shape, rate })
        } else {
            Err(TargetError::BadPrior { shape, rate })
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        (self.shape - 1.0) / x - self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("validated gamma parameters")
            .sample(rng)
    }
}

/// Gamma priors for `beta0..beta4` and `sigma`; factor effects are always `Normal(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub beta: [GammaPrior; 5],
    pub sigma: GammaPrior,
}

impl PriorSpec {
    /// The weakly informative set used for the barley fits: `beta0 ~ Ga(y_max, 1)`,
    /// `Ga(3.43, 1)`, `Ga(1, 20)`, `Ga(4.24, 1)`, `Ga(1, 40)` and `sigma ~ Ga(1, 10)`.
    pub fn weakly_informative(y_max: f64) -> Result<Self, TargetError> {
        Ok(PriorSpec {
            beta: [
                GammaPrior::new(y_max, 1.0)?,
                GammaPrior::new(3.43, 1.0)?,
                GammaPrior::new(1.0, 20.0)?,
                GammaPrior::new(4.24, 1.0)?,
                GammaPrior::new(1.0, 40.0)?,
            ],
            sigma: GammaPrior::new(1.0, 10.0)?,
        })
    }

    fn coordinate(&self, name: &str) -> CoordPrior {
        match name {
            "sigma" => CoordPrior::Gamma(self.sigma),
            "gamma0" => CoordPrior::Gamma(self.beta[0]),
            n if n.starts_with("gamma1_") => CoordPrior::StdNormal,
            n => {
                let j: usize = n.trim_start_matches("beta").parse().unwrap_or(0);
                CoordPrior::Gamma(self.beta[j.min(4)])
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum CoordPrior {
    Gamma(GammaPrior),
    StdNormal,
}

impl CoordPrior {
    fn ln_pdf_grad(&self, x: f64) -> (f64, f64) {
        match self {
            CoordPrior::Gamma(g) => (g.ln_pdf(x), g.d_ln_pdf(x)),
            CoordPrior::StdNormal => (-0.5 * (LN_2PI + x * x), -x),
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match self {
            CoordPrior::Gamma(g) => g.sample(rng),
            CoordPrior::StdNormal => rand_distr::StandardNormal.sample(rng),
        }
    }
}

/// Mean-function parameters of a spec followed by `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    names: Vec<String>,
    positive: Vec<bool>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: &MeanSpec, mean_params: &[f64], sigma: f64) -> Result<Self, TargetError> {
        if mean_params.len() != spec.n_params() {
            return Err(TargetError::Length { expected: spec.n_params(), got: mean_params.len() });
        }
        let (names, positive) = layout(spec);
        let mut values = mean_params.to_vec();
        values.push(sigma);
        Ok(ParamVector { names, positive, values })
    }

    pub fn from_unconstrained(spec: &MeanSpec, z: &[f64]) -> Result<Self, TargetError> {
        let (names, positive) = layout(spec);
        if z.len() != names.len() {
            return Err(TargetError::Length { expected: names.len(), got: z.len() });
        }
        let values = z.iter().zip(&positive).map(|(&v, &pos)| if pos { v.exp() } else { v }).collect();
        Ok(ParamVector { names, positive, values })
    }

    pub fn unconstrained(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.positive)
            .map(|(&v, &pos)| if pos { v.ln() } else { v })
            .collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn positive_mask(&self) -> &[bool] {
        &self.positive
    }

    pub fn mean_params(&self) -> &[f64] {
        &self.values[..self.values.len() - 1]
    }

    pub fn sigma(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Parameter names and positivity mask for `spec` plus `sigma`.
pub fn layout(spec: &MeanSpec) -> (Vec<String>, Vec<bool>) {
    let mut names = spec.param_names();
    let mut positive = spec.positive_mask();
    names.push("sigma".to_string());
    positive.push(true);
    (names, positive)
}

/// A differentiable log density on an unconstrained vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `z`; the gradient is written to `grad` (length `dim`).
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, z: &[f64]) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.log_density_grad(z, &mut grad)
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    /// Map an unconstrained point to the reporting scale.
    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }

    /// Starting point before jitter.
    fn initial_point(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    n: f64,
    p: f64,
    y: f64,
}

/// Immutable `(data, spec, priors)` bundle evaluating the MB posterior.
#[derive(Debug, Clone)]
pub struct YieldTarget {
    spec: MeanSpec,
    priors: PriorSpec,
    obs: Vec<Obs>,
    /// Row-major dummy matrix, `n_dummies` columns.
    dummies: Vec<f64>,
    names: Vec<String>,
    positive: Vec<bool>,
    coord_priors: Vec<CoordPrior>,
}

impl YieldTarget {
    /// The factor design of `spec`, if any, is rebuilt against `data`.
    pub fn new(data: &Dataset, spec: &MeanSpec, priors: PriorSpec) -> Result<Self, TargetError> {
        if spec.kind() != ModelKind::MitscherlichBaule {
            return Err(TargetError::NotMb);
        }
        let spec = data.rebind(spec)?;
        let obs = data.rows.iter().map(|r| Obs { n: r.n, p: r.p, y: r.y }).collect();
        let dummies = spec.factor().map_or_else(Vec::new, |f| f.matrix.concat());
        let (names, positive) = layout(&spec);
        let coord_priors = names.iter().map(|n| priors.coordinate(n)).collect();
        Ok(YieldTarget { spec, priors, obs, dummies, names, positive, coord_priors })
    }

    pub fn spec(&self) -> &MeanSpec {
        &self.spec
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    fn row_dummies(&self, i: usize) -> &[f64] {
        let k = self.spec.n_dummies();
        &self.dummies[i * k..(i + 1) * k]
    }

    /// Per-observation log densities at constrained `theta` (mean params then sigma).
    pub fn pointwise_loglik(&self, theta: &[f64], out: &mut [f64]) {
        let m = self.spec.n_params();
        let (params, sigma) = (&theta[..m], theta[m]);
        let norm = -0.5 * (TAU * sigma).ln();
        for (i, (o, slot)) in self.obs.iter().zip(out.iter_mut()).enumerate() {
            let (mu, _) = self.spec.eval_unchecked(params, o.n, o.p, self.row_dummies(i), None);
            let r = o.y - mu;
            *slot = norm - r * r / (2.0 * sigma);
        }
    }

    /// Log likelihood at constrained parameters.
    pub fn log_likelihood(&self, params: &ParamVector) -> Result<f64, TargetError> {
        self.check_len(params)?;
        let sigma = params.sigma();
        if !(sigma > 0.0) {
            return Err(TargetError::BadSigma);
        }
        let mut total = 0.0;
        for (i, o) in self.obs.iter().enumerate() {
            let (mu, _) = self.spec.eval_unchecked(params.mean_params(), o.n, o.p, self.row_dummies(i), None);
            if !mu.is_finite() {
                return Err(TargetError::NonFiniteMean { row: i });
            }
            let r = o.y - mu;
            total += -0.5 * (TAU * sigma).ln() - r * r / (2.0 * sigma);
        }
        Ok(total)
    }

    /// Log prior and its gradient at constrained parameters.
    pub fn log_prior(&self, params: &ParamVector) -> Result<PriorValue, TargetError> {
        self.check_len(params)?;
        Ok(log_prior_impl(params.values(), &self.positive, &self.coord_priors))
    }

    /// Log posterior on the unconstrained scale, with gradient.
    pub fn log_posterior_grad(&self, z: &[f64]) -> LogDensityResult {
        let mut grad = vec![0.0; z.len()];
        let value = self.log_density_grad(z, &mut grad);
        LogDensityResult { value, grad }
    }

    fn check_len(&self, params: &ParamVector) -> Result<(), TargetError> {
        if params.names() != self.names.as_slice() {
            return Err(TargetError::Length { expected: self.names.len(), got: params.values().len() });
        }
        Ok(())
    }
}

/// Log prior density, or an explicit out-of-support marker.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorValue {
    Density { value: f64, grad: Vec<f64> },
    /// A positive-support coordinate was not positive.
    OutOfSupport { index: usize },
}

impl PriorValue {
    /// `-inf` when out of support.
    pub fn value(&self) -> f64 {
        match self {
            PriorValue::Density { value, .. } => *value,
            PriorValue::OutOfSupport { .. } => f64::NEG_INFINITY,
        }
    }
}

fn log_prior_impl(theta: &[f64], positive: &[bool], priors: &[CoordPrior]) -> PriorValue {
    if let Some(index) = theta.iter().zip(positive).position(|(&t, &pos)| pos && !(t > 0.0)) {
        return PriorValue::OutOfSupport { index };
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(theta.len());
    for (&t, prior) in theta.iter().zip(priors) {
        let (v, g) = prior.ln_pdf_grad(t);
        value += v;
        grad.push(g);
    }
    PriorValue::Density { value, grad }
}

/// Log prior of `params` under `priors`; coordinates are matched by name.
pub fn log_prior(params: &ParamVector, priors: &PriorSpec) -> PriorValue {
    let coord: Vec<CoordPrior> = params.names().iter().map(|n| priors.coordinate(n)).collect();
    log_prior_impl(params.values(), params.positive_mask(), &coord)
}

/// Normal log likelihood of `data` under `spec`; `params.sigma()` is the variance.
pub fn log_likelihood(data: &Dataset, spec: &MeanSpec, params: &ParamVector) -> Result<f64, TargetError> {
    let priors = PriorSpec::weakly_informative(1.0)?;
    YieldTarget::new(data, spec, priors)?.log_likelihood(params)
}

impl LogDensity for YieldTarget {
    fn dim(&self) -> usize {
        self.names.len()
    }

    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.spec.n_params();
        let mut theta = [0.0; MAX_PARAMS];
        for k in 0..=m {
            theta[k] = if self.positive[k] { z[k].exp() } else { z[k] };
        }
        let params = &theta[..m];
        let sigma = theta[m];
        grad.fill(0.0);

        // likelihood
        let mut dmu = [0.0; MAX_PARAMS];
        let mut sse = 0.0;
        for (i, o) in self.obs.iter().enumerate() {
            let (mu, _) = self.spec.eval_unchecked(params, o.n, o.p, self.row_dummies(i), Some(&mut dmu[..m]));
            let r = o.y - mu;
            sse += r * r;
            for k in 0..m {
                grad[k] += r * dmu[k];
            }
        }
        let n = self.obs.len() as f64;
        let mut value = -0.5 * n * (TAU * sigma).ln() - sse / (2.0 * sigma);
        for g in grad[..m].iter_mut() {
            *g /= sigma;
        }
        grad[m] = -0.5 * n / sigma + sse / (2.0 * sigma * sigma);

        // prior, then chain rule and log-Jacobian
        for k in 0..=m {
            let (v, g) = self.coord_priors[k].ln_pdf_grad(theta[k]);
            value += v;
            grad[k] += g;
            if self.positive[k] {
                grad[k] = grad[k] * theta[k] + 1.0;
                value += z[k];
            }
        }
        value
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.positive).map(|(&v, &pos)| if pos { v.exp() } else { v }).collect()
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.coord_priors
            .iter()
            .zip(&self.positive)
            .map(|(prior, &pos)| {
                let draw = prior.sample(rng);
                if pos {
                    draw.max(f64::MIN_POSITIVE).ln()
                } else {
                    draw
                }
            })
            .collect()
    }
}
