//! Nonlinear least squares for the yield families, and prior elicitation
//! from a small held-out split.
//!
//! The optimizer is Levenberg-Marquardt with Marquardt diagonal scaling.
//! Positive-support coefficients are optimized as `ln(theta)` so iterates
//! never leave the support.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{MeanSpec, ModelKind, ResponseVariant};
use crate::target::{GammaPrior, ParamVector, PriorSpec, TargetError};

const MAX_PARAMS: usize = 16;
const MAX_DAMPING: f64 = 1e12;

#[derive(Debug, Error)]
pub enum NlsError {
    #[error("{rows} rows cannot identify {params} parameters")]
    TooFewRows { rows: usize, params: usize },
    #[error("initial values have {got} entries, spec needs {expected}")]
    InitLength { expected: usize, got: usize },
    #[error("initial value for {name} must be positive, got {value}")]
    InitSupport { name: String, value: f64 },
    #[error("residuals are not finite at the initial values")]
    NonFiniteStart,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NlsConfig {
    pub max_iter: usize,
    /// Converged when an accepted step changes SSE by less than `tol` relative.
    pub tol: f64,
    /// Starting Marquardt damping.
    pub damping: f64,
}

impl Default for NlsConfig {
    fn default() -> Self {
        NlsConfig { max_iter: 20000, tol: 1e-12, damping: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NlsResult {
    /// Coefficients followed by `sigma = rse^2`.
    pub estimates: ParamVector,
    pub rse: f64,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// SSE after the start and after each accepted step.
    pub sse_trace: Vec<f64>,
}

impl NlsResult {
    pub fn coefficients(&self) -> &[f64] {
        self.estimates.mean_params()
    }
}

/// Default starting point: `beta0` at the largest yield, intercepts 1,
/// slopes 0.02. Families that are linear in their coefficients start the
/// remaining coefficients at 0. Factor effects start at 0.
pub fn default_init(spec: &MeanSpec, data: &Dataset) -> Vec<f64> {
    use ModelKind::*;
    let y_max = data.max_yield();
    match spec.kind() {
        Linear | Quadratic | SquareRoot => {
            let mut v = vec![0.0; spec.n_params()];
            v[0] = y_max;
            v
        }
        Power => vec![y_max, 0.02, 0.02],
        Gompertz | Logistic => vec![y_max, 1.0, 0.02],
        LinearVonLiebig | NonlinearVonLiebig => vec![y_max, 1.0, 0.02, 1.0, 0.02],
        MitscherlichBaule => {
            let mut v: Vec<f64> = spec
                .mb_slots()
                .iter()
                .map(|&j| match j {
                    0 => y_max,
                    1 | 3 => 1.0,
                    _ => 0.02,
                })
                .collect();
            v.resize(spec.n_params(), 0.0);
            v
        }
    }
}

struct Problem<'a> {
    spec: MeanSpec,
    data: &'a Dataset,
    dummies: Vec<f64>,
    positive: Vec<bool>,
}

impl Problem<'_> {
    fn theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.positive).map(|(&v, &pos)| if pos { v.exp() } else { v }).collect()
    }

    fn row_dummies(&self, i: usize) -> &[f64] {
        let k = self.spec.n_dummies();
        &self.dummies[i * k..(i + 1) * k]
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        self.data
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.y - self.spec.eval_unchecked(theta, r.n, r.p, self.row_dummies(i), None).0)
            .collect()
    }

    /// Jacobian of the mean with respect to the optimization coordinates.
    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let m = theta.len();
        let mut jac = DMatrix::zeros(self.data.len(), m);
        let mut g = [0.0; MAX_PARAMS];
        for (i, r) in self.data.rows.iter().enumerate() {
            self.spec.eval_unchecked(theta, r.n, r.p, self.row_dummies(i), Some(&mut g[..m]));
            for k in 0..m {
                jac[(i, k)] = if self.positive[k] { g[k] * theta[k] } else { g[k] };
            }
        }
        jac
    }
}

fn sse_of(res: &[f64]) -> f64 {
    let s: f64 = res.iter().map(|r| r * r).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Fit `spec` to `data` by least squares starting from `init`.
///
/// Never panics on numerical trouble: a singular system raises the damping,
/// and running out of iterations returns the best point with `converged = false`.
pub fn fit_nls(data: &Dataset, spec: &MeanSpec, init: &[f64], config: &NlsConfig) -> Result<NlsResult, NlsError> {
    let spec = data.rebind(spec)?;
    let m = spec.n_params();
    if init.len() != m {
        return Err(NlsError::InitLength { expected: m, got: init.len() });
    }
    if data.len() <= m {
        return Err(NlsError::TooFewRows { rows: data.len(), params: m });
    }
    let positive = spec.positive_mask();
    let names = spec.param_names();
    for k in 0..m {
        if positive[k] && !(init[k] > 0.0) {
            return Err(NlsError::InitSupport { name: names[k].clone(), value: init[k] });
        }
    }
    let dummies = spec.factor().map_or_else(Vec::new, |f| f.matrix.concat());
    let prob = Problem { spec: spec.clone(), data, dummies, positive: positive.clone() };

    let mut u: Vec<f64> = init.iter().zip(&positive).map(|(&v, &pos)| if pos { v.ln() } else { v }).collect();
    let mut theta = init.to_vec();
    let mut res = prob.residuals(&theta);
    let mut sse = sse_of(&res);
    if !sse.is_finite() {
        return Err(NlsError::NonFiniteStart);
    }
    let mut trace = vec![sse];
    let mut lambda = config.damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter && !converged {
        iterations += 1;
        if sse == 0.0 {
            converged = true;
            break;
        }
        let jac = prob.jacobian(&theta);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&res);
        let diag_floor = jtj.diagonal().max() * 1e-15 + f64::MIN_POSITIVE;

        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut a = jtj.clone();
            for k in 0..m {
                a[(k, k)] += lambda * jtj[(k, k)].max(diag_floor);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let trial_u: Vec<f64> = u.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let trial_theta = prob.theta(&trial_u);
            let trial_res = prob.residuals(&trial_theta);
            let trial_sse = sse_of(&trial_res);
            if trial_sse < sse {
                let change = (sse - trial_sse) / sse;
                u = trial_u;
                theta = trial_theta;
                res = trial_res;
                sse = trial_sse;
                trace.push(sse);
                lambda = (lambda / 10.0).max(1e-12);
                converged = change < config.tol;
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no step reduces SSE at any damping: a stationary point
            converged = true;
        }
    }

    let dof = (data.len() - m) as f64;
    let rse = (sse / dof).sqrt();
    Ok(NlsResult {
        estimates: ParamVector::new(&spec, &theta, rse * rse)?,
        rse,
        sse,
        converged,
        iterations,
        residuals: res,
        sse_trace: trace,
    })
}

/// Plausible range for elicited coefficients on the (0, 100] input scale.
pub const ELICIT_RANGE: (f64, f64) = (1e-6, 1e6);

/// Largest accepted ratio of the fitted plateau to the observed maximum yield.
pub const MAX_PLATEAU_RATIO: f64 = 2.0;

fn fmt_coefficients(spec: &MeanSpec, c: &[f64]) -> String {
    spec.param_names().iter().zip(c).map(|(n, v)| format!("{n}={v:.3e}")).collect::<Vec<_>>().join(", ")
}

/// Priors built from an NLS fit on the elicitation split.
#[derive(Debug, Clone, Serialize)]
pub struct ElicitedPriors {
    pub priors: PriorSpec,
    pub fit: Option<NlsResult>,
    pub warnings: Vec<String>,
}

/// Elicit MB priors from `split`.
///
/// `beta0 ~ Ga(y_max, 1)`; intercepts `beta1`, `beta3` get `Ga(estimate, 1)`;
/// slopes `beta2`, `beta4` get `Ga(1, 1 / estimate)`; `sigma ~ Ga(1, 10)`.
/// Coefficients outside the variant, or all of them when the fit fails,
/// fall back to `Ga(1, 1)`. A fit that ran off to the boundary (any
/// coefficient outside [`ELICIT_RANGE`], or a plateau `beta0` above
/// [`MAX_PLATEAU_RATIO`] times the observed maximum) counts as failed.
/// Factor effects are ignored for elicitation.
pub fn elicit_priors(split: &Dataset, spec: &MeanSpec) -> Result<ElicitedPriors, NlsError> {
    let unit = GammaPrior::new(1.0, 1.0)?;
    let y_max = split.max_yield();
    let mut beta = [unit; 5];
    if y_max > 0.0 {
        beta[0] = GammaPrior::new(y_max, 1.0)?;
    }
    let sigma = GammaPrior::new(1.0, 10.0)?;
    let mut warnings = Vec::new();

    let base = MeanSpec::mb(if spec.kind() == ModelKind::MitscherlichBaule { spec.variant() } else { ResponseVariant::NP });
    let fit = if split.len() > base.n_params() && y_max > 0.0 {
        match fit_nls(split, &base, &default_init(&base, split), &NlsConfig::default()) {
            Ok(fit) if !fit.converged => {
                warnings.push("elicitation fit did not converge; using Ga(1, 1) priors".to_string());
                None
            }
            Ok(fit)
                if fit.coefficients().iter().any(|&c| !(ELICIT_RANGE.0..=ELICIT_RANGE.1).contains(&c))
                    || fit.coefficients()[0] > MAX_PLATEAU_RATIO * y_max =>
            {
                warnings.push(format!(
                    "elicitation fit is degenerate ({}); using Ga(1, 1) priors",
                    fmt_coefficients(&base, fit.coefficients())
                ));
                None
            }
            Ok(fit) => Some(fit),
            Err(e) => {
                warnings.push(format!("elicitation fit failed ({e}); using Ga(1, 1) priors"));
                None
            }
        }
    } else {
        warnings.push(format!("elicitation split has {} rows; using Ga(1, 1) priors", split.len()));
        None
    };

    if let Some(fit) = &fit {
        for (&slot, &est) in base.mb_slots().iter().zip(fit.coefficients()) {
            beta[slot] = match slot {
                0 => beta[0],
                1 | 3 => GammaPrior::new(est, 1.0)?,
                _ => GammaPrior::new(1.0, 1.0 / est)?,
            };
        }
    }
    Ok(ElicitedPriors { priors: PriorSpec { beta, sigma }, fit, warnings })
}
