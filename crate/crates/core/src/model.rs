//! Yield response mean functions.
//!
//! Every model maps fertilizer levels `(n, p)` and a parameter slice to a mean
//! yield. The Mitscherlich-Baule (MB) model additionally supports the N-only,
//! P-only and N+P response variants and a dummy-coded factor shift on the
//! maximum yield. Parameter order is fixed and is the order
//! used by every downstream consumer (targets, summaries, sample files).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("expected {expected} dummy columns, got {got}")]
    DummyCount { expected: usize, got: usize },
    #[error("fertilizer input must be finite and non-negative (n={n}, p={p})")]
    BadInput { n: f64, p: f64 },
    #[error("factor effects are only supported for the N-only Mitscherlich-Baule model")]
    FactorNotSupported,
    #[error("response variants only apply to the Mitscherlich-Baule model")]
    VariantNotSupported,
    #[error("unknown factor level `{0}`")]
    UnknownLevel(String),
    #[error("factor `{0}` needs at least two levels")]
    SingleLevel(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown response variant `{0}`")]
    UnknownVariant(String),
}

/// The nine yield response families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Linear,
    Quadratic,
    SquareRoot,
    Power,
    Gompertz,
    Logistic,
    MitscherlichBaule,
    LinearVonLiebig,
    NonlinearVonLiebig,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Linear,
        ModelKind::Quadratic,
        ModelKind::SquareRoot,
        ModelKind::Power,
        ModelKind::Gompertz,
        ModelKind::Logistic,
        ModelKind::MitscherlichBaule,
        ModelKind::LinearVonLiebig,
        ModelKind::NonlinearVonLiebig,
    ];

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    /// Coefficient names in parameter order. SquareRoot follows the printed
    /// formula and has no `beta3`.
    pub fn param_names(self) -> &'static [&'static str] {
        use ModelKind::*;
        match self {
            Linear | Power | Gompertz | Logistic => &["beta0", "beta1", "beta2"],
            Quadratic => &["beta0", "beta1", "beta2", "beta3", "beta4", "beta5"],
            SquareRoot => &["beta0", "beta1", "beta2", "beta4", "beta5"],
            MitscherlichBaule | LinearVonLiebig | NonlinearVonLiebig => {
                &["beta0", "beta1", "beta2", "beta3", "beta4"]
            }
        }
    }

    /// Whether each coefficient is restricted to the positive reals.
    pub fn positive_mask(self) -> Vec<bool> {
        use ModelKind::*;
        let all_positive = matches!(
            self,
            Power | Gompertz | Logistic | MitscherlichBaule | LinearVonLiebig | NonlinearVonLiebig
        );
        vec![all_positive; self.n_params()]
    }

    pub fn token(self) -> &'static str {
        use ModelKind::*;
        match self {
            Linear => "linear",
            Quadratic => "quadratic",
            SquareRoot => "sqrt",
            Power => "power",
            Gompertz => "gompertz",
            Logistic => "logistic",
            MitscherlichBaule => "mb",
            LinearVonLiebig => "lvl",
            NonlinearVonLiebig => "nlvl",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.token() == lower)
            .or(match lower.as_str() {
                "squareroot" | "square-root" => Some(ModelKind::SquareRoot),
                "mitscherlich-baule" => Some(ModelKind::MitscherlichBaule),
                "linear-von-liebig" => Some(ModelKind::LinearVonLiebig),
                "nonlinear-von-liebig" => Some(ModelKind::NonlinearVonLiebig),
                _ => None,
            })
            .ok_or_else(|| ModelError::UnknownModel(s.to_string()))
    }
}

/// Which fertilizer brackets of the MB model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseVariant {
    NOnly,
    POnly,
    NP,
}

impl ResponseVariant {
    pub fn token(self) -> &'static str {
        match self {
            ResponseVariant::NOnly => "n",
            ResponseVariant::POnly => "p",
            ResponseVariant::NP => "np",
        }
    }

    /// Indices into `(beta0, .., beta4)` used by this variant.
    pub fn mb_slots(self) -> &'static [usize] {
        match self {
            ResponseVariant::NOnly => &[0, 1, 2],
            ResponseVariant::POnly => &[0, 3, 4],
            ResponseVariant::NP => &[0, 1, 2, 3, 4],
        }
    }
}

impl fmt::Display for ResponseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ResponseVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "n" | "n-only" | "nonly" => Ok(ResponseVariant::NOnly),
            "p" | "p-only" | "ponly" => Ok(ResponseVariant::POnly),
            "np" | "n+p" => Ok(ResponseVariant::NP),
            _ => Err(ModelError::UnknownVariant(s.to_string())),
        }
    }
}

/// Baseline-referenced dummy coding of one categorical factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDesign {
    pub factor_name: String,
    /// Declared levels; the first is the baseline.
    pub levels: Vec<String>,
    /// One row per observation, one 0/1 column per non-baseline level.
    pub matrix: Vec<Vec<f64>>,
}

impl FactorDesign {
    pub fn n_columns(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i]
    }

    /// Dummy row for a single level label.
    pub fn dummies_for(&self, label: &str) -> Result<Vec<f64>, ModelError> {
        let idx = self
            .levels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::UnknownLevel(label.to_string()))?;
        let mut row = vec![0.0; self.n_columns()];
        if idx > 0 {
            row[idx - 1] = 1.0;
        }
        Ok(row)
    }
}

/// Dummy-code `levels_column` against `declared_levels`, first level as baseline.
pub fn build_design<S: AsRef<str>, T: AsRef<str>>(
    factor_name: &str,
    levels_column: &[S],
    declared_levels: &[T],
) -> Result<FactorDesign, ModelError> {
    let levels: Vec<String> = declared_levels.iter().map(|l| l.as_ref().to_string()).collect();
    if levels.len() < 2 {
        return Err(ModelError::SingleLevel(factor_name.to_string()));
    }
    let mut design = FactorDesign {
        factor_name: factor_name.to_string(),
        levels,
        matrix: Vec::with_capacity(levels_column.len()),
    };
    for label in levels_column {
        let row = design.dummies_for(label.as_ref())?;
        design.matrix.push(row);
    }
    Ok(design)
}

/// Complete description of a mean function: family, MB variant and optional factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    kind: ModelKind,
    variant: ResponseVariant,
    factor: Option<FactorDesign>,
}

impl MeanSpec {
    pub fn new(
        kind: ModelKind,
        variant: ResponseVariant,
        factor: Option<FactorDesign>,
    ) -> Result<Self, ModelError> {
        if kind != ModelKind::MitscherlichBaule && variant != ResponseVariant::NP {
            return Err(ModelError::VariantNotSupported);
        }
        if factor.is_some()
            && !(kind == ModelKind::MitscherlichBaule && variant == ResponseVariant::NOnly)
        {
            return Err(ModelError::FactorNotSupported);
        }
        Ok(MeanSpec { kind, variant, factor })
    }

    /// An unfactored MB spec.
    pub fn mb(variant: ResponseVariant) -> Self {
        MeanSpec { kind: ModelKind::MitscherlichBaule, variant, factor: None }
    }

    /// Any of the nine families with both inputs active.
    pub fn classical(kind: ModelKind) -> Self {
        MeanSpec { kind, variant: ResponseVariant::NP, factor: None }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn variant(&self) -> ResponseVariant {
        self.variant
    }

    pub fn factor(&self) -> Option<&FactorDesign> {
        self.factor.as_ref()
    }

    /// Same spec with the factor design (and hence its data rows) removed.
    pub fn without_factor(&self) -> MeanSpec {
        MeanSpec { kind: self.kind, variant: self.variant, factor: None }
    }

    pub fn n_dummies(&self) -> usize {
        self.factor.as_ref().map_or(0, FactorDesign::n_columns)
    }

    pub fn n_params(&self) -> usize {
        match self.kind {
            ModelKind::MitscherlichBaule => self.variant.mb_slots().len() + self.n_dummies(),
            k => k.n_params(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            ModelKind::MitscherlichBaule => {
                let mut names: Vec<String> = self
                    .variant
                    .mb_slots()
                    .iter()
                    .map(|j| format!("beta{j}"))
                    .collect();
                if self.factor.is_some() {
                    names[0] = "gamma0".to_string();
                    names.extend((1..=self.n_dummies()).map(|j| format!("gamma1_{j}")));
                }
                names
            }
            k => k.param_names().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        match self.kind {
            ModelKind::MitscherlichBaule => {
                let mut mask = vec![true; self.variant.mb_slots().len()];
                mask.extend(std::iter::repeat_n(false, self.n_dummies()));
                mask
            }
            k => k.positive_mask(),
        }
    }

    /// For MB specs, the index `j` of `beta_j` carried by each leading
    /// (non-dummy) parameter.
    pub fn mb_slots(&self) -> &'static [usize] {
        self.variant.mb_slots()
    }

    pub fn describe(&self) -> String {
        let mut s = format!("model={} variant={}", self.kind, self.variant);
        if let Some(f) = &self.factor {
            s.push_str(&format!(" factor={} levels={}", f.factor_name, f.levels.join("|")));
        }
        s
    }

    fn check(&self, params: &[f64], n: f64, p: f64, dummies: Option<&[f64]>) -> Result<(), ModelError> {
        if params.len() != self.n_params() {
            return Err(ModelError::ParamCount { expected: self.n_params(), got: params.len() });
        }
        let got = dummies.map_or(0, <[f64]>::len);
        if got != self.n_dummies() || (dummies.is_some() != self.factor.is_some()) {
            return Err(ModelError::DummyCount { expected: self.n_dummies(), got });
        }
        if !(n.is_finite() && p.is_finite() && n >= 0.0 && p >= 0.0) {
            return Err(ModelError::BadInput { n, p });
        }
        Ok(())
    }

    /// Mean and (optionally) gradient without argument validation.
    ///
    /// `grad`, when given, must have length `n_params()` and is overwritten.
    /// The returned flag is set when a Von Liebig minimum is tied and the
    /// first tied arm was used for the gradient.
    pub fn eval_unchecked(
        &self,
        params: &[f64],
        n: f64,
        p: f64,
        dummies: &[f64],
        grad: Option<&mut [f64]>,
    ) -> (f64, bool) {
        use ModelKind::*;
        let b = params;
        match self.kind {
            Linear => {
                if let Some(g) = grad {
                    g.copy_from_slice(&[1.0, n, p]);
                }
                (b[0] + b[1] * n + b[2] * p, false)
            }
            Quadratic => {
                if let Some(g) = grad {
                    g.copy_from_slice(&[1.0, n, p, n * n, p * p, n * p]);
                }
                let mu = b[0] + b[1] * n + b[2] * p + b[3] * n * n + b[4] * p * p + b[5] * n * p;
                (mu, false)
            }
            SquareRoot => {
                let (sp, snp) = (p.sqrt(), (n * p).sqrt());
                if let Some(g) = grad {
                    g.copy_from_slice(&[1.0, n, p, sp, snp]);
                }
                (b[0] + b[1] * n + b[2] * p + b[3] * sp + b[4] * snp, false)
            }
            Power => {
                if n == 0.0 || p == 0.0 {
                    if let Some(g) = grad {
                        g.fill(0.0);
                    }
                    return (0.0, false);
                }
                let base = n.powf(b[1]) * p.powf(b[2]);
                let mu = b[0] * base;
                if let Some(g) = grad {
                    g.copy_from_slice(&[base, mu * n.ln(), mu * p.ln()]);
                }
                (mu, false)
            }
            Gompertz => {
                let e = (-b[2] * n).exp();
                let inner = (-b[1] * e).exp();
                let mu = b[0] * inner;
                if let Some(g) = grad {
                    g.copy_from_slice(&[inner, -mu * e, mu * b[1] * e * n]);
                }
                (mu, false)
            }
            Logistic => {
                let e = (-b[2] * n).exp();
                let d = 1.0 + b[1] * e;
                let mu = b[0] / d;
                if let Some(g) = grad {
                    let d2 = d * d;
                    g.copy_from_slice(&[1.0 / d, -b[0] * e / d2, b[0] * b[1] * e * n / d2]);
                }
                (mu, false)
            }
            MitscherlichBaule => (self.eval_mb(b, n, p, dummies, grad), false),
            LinearVonLiebig => {
                let arms = [b[0], b[1] + b[3] * n, b[2] + b[4] * p];
                let (which, tie) = argmin_first(&arms);
                if let Some(g) = grad {
                    g.fill(0.0);
                    match which {
                        0 => g[0] = 1.0,
                        1 => {
                            g[1] = 1.0;
                            g[3] = n;
                        }
                        _ => {
                            g[2] = 1.0;
                            g[4] = p;
                        }
                    }
                }
                (arms[which], tie)
            }
            NonlinearVonLiebig => {
                let en = (-b[2] * n).exp();
                let ep = (-b[4] * p).exp();
                let arms = [b[0] * (1.0 - b[1] * en), b[0] * (1.0 - b[3] * ep)];
                let (which, tie) = argmin_first(&arms);
                if let Some(g) = grad {
                    g.fill(0.0);
                    if which == 0 {
                        g[0] = 1.0 - b[1] * en;
                        g[1] = -b[0] * en;
                        g[2] = b[0] * b[1] * n * en;
                    } else {
                        g[0] = 1.0 - b[3] * ep;
                        g[3] = -b[0] * ep;
                        g[4] = b[0] * b[3] * p * ep;
                    }
                }
                (arms[which], tie)
            }
        }
    }

    fn eval_mb(&self, b: &[f64], n: f64, p: f64, dummies: &[f64], grad: Option<&mut [f64]>) -> f64 {
        // bracket = 1 - exp(-(a + s x)); dbracket/da = 1 - bracket = exp(-(a + s x))
        let bracket = |a: f64, s: f64, x: f64| {
            let t = -(a + s * x);
            (-t.exp_m1(), t.exp())
        };
        match self.variant {
            ResponseVariant::NOnly => {
                let shift: f64 = dummies.iter().zip(&b[3..]).map(|(x, g)| x * g).sum();
                let max_yield = b[0] + shift;
                let (a, ea) = bracket(b[1], b[2], n);
                if let Some(g) = grad {
                    g[0] = a;
                    g[1] = max_yield * ea;
                    g[2] = max_yield * ea * n;
                    for (gj, x) in g[3..].iter_mut().zip(dummies) {
                        *gj = x * a;
                    }
                }
                max_yield * a
            }
            ResponseVariant::POnly => {
                let (c, ec) = bracket(b[1], b[2], p);
                if let Some(g) = grad {
                    g.copy_from_slice(&[c, b[0] * ec, b[0] * ec * p]);
                }
                b[0] * c
            }
            ResponseVariant::NP => {
                let (a, ea) = bracket(b[1], b[2], n);
                let (c, ec) = bracket(b[3], b[4], p);
                if let Some(g) = grad {
                    g.copy_from_slice(&[
                        a * c,
                        b[0] * ea * c,
                        b[0] * ea * n * c,
                        b[0] * a * ec,
                        b[0] * a * ec * p,
                    ]);
                }
                b[0] * a * c
            }
        }
    }
}

fn argmin_first(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    let tie = values.iter().enumerate().any(|(i, &v)| i != best && v == values[best]);
    (best, tie)
}

/// Gradient of the mean with respect to every parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanGrad {
    pub grad: Vec<f64>,
    /// Set when evaluated on a Von Liebig tie; the first tied arm is used.
    pub tie: bool,
}

/// Mean yield at `(n, p)`.
pub fn eval_mean(
    spec: &MeanSpec,
    params: &[f64],
    n: f64,
    p: f64,
    row_dummies: Option<&[f64]>,
) -> Result<f64, ModelError> {
    spec.check(params, n, p, row_dummies)?;
    Ok(spec.eval_unchecked(params, n, p, row_dummies.unwrap_or(&[]), None).0)
}

/// Analytic gradient of the mean with respect to the parameters.
pub fn mean_grad(
    spec: &MeanSpec,
    params: &[f64],
    n: f64,
    p: f64,
    row_dummies: Option<&[f64]>,
) -> Result<MeanGrad, ModelError> {
    spec.check(params, n, p, row_dummies)?;
    let mut grad = vec![0.0; spec.n_params()];
    let (_, tie) = spec.eval_unchecked(params, n, p, row_dummies.unwrap_or(&[]), Some(&mut grad));
    Ok(MeanGrad { grad, tie })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mb_np() -> MeanSpec {
        MeanSpec::mb(ResponseVariant::NP)
    }

    fn fd_grad(spec: &MeanSpec, params: &[f64], n: f64, p: f64, d: Option<&[f64]>, rel_step: f64) -> Vec<f64> {
        (0..params.len())
            .map(|j| {
                let h = rel_step * params[j].abs().max(1.0);
                let mut up = params.to_vec();
                let mut dn = params.to_vec();
                up[j] += h;
                dn[j] -= h;
                (eval_mean(spec, &up, n, p, d).unwrap() - eval_mean(spec, &dn, n, p, d).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn parameter_counts() {
        let counts: Vec<usize> = ModelKind::ALL.iter().map(|k| k.n_params()).collect();
        assert_eq!(counts, vec![3, 6, 5, 3, 3, 3, 5, 5, 5]);
    }

    #[test]
    fn mb_saturates() {
        let mu = eval_mean(&mb_np(), &[10.0, 50.0, 0.0, 50.0, 0.0], 37.0, 81.0, None).unwrap();
        assert!((mu - 10.0).abs() < 1e-15);
    }

    #[test]
    fn mb_zero_intercepts_give_zero() {
        for (n, p) in [(0.0, 0.0), (50.0, 3.0), (100.0, 100.0)] {
            let mu = eval_mean(&mb_np(), &[10.0, 0.0, 0.0, 0.0, 0.0], n, p, None).unwrap();
            assert_eq!(mu, 0.0);
        }
    }

    #[test]
    fn mb_spring_barley_direct_substitution() {
        // independent scalar evaluation of b0 (1 - e^{-b1 - b2 n}) (1 - e^{-b3 - b4 p})
        let b = [5.005, 0.4778, 0.019, 7.610, 0.00009];
        let (n, p) = (100.0_f64, 50.0_f64);
        let expected =
            b[0] * (1.0 - (-b[1] - b[2] * n).exp()) * (1.0 - (-b[3] - b[4] * p).exp());
        let mu = eval_mean(&mb_np(), &b, n, p, None).unwrap();
        assert!((mu - expected).abs() < 1e-13, "{mu} vs {expected}");
        // frozen value of the same substitution
        assert!((mu - 4.538524443937048).abs() < 1e-12, "{mu}");
    }

    #[test]
    fn mb_n_only_beta0_derivative_is_bracket() {
        let spec = MeanSpec::mb(ResponseVariant::NOnly);
        for b0 in [1.0, 7.0, 30.0] {
            let g = mean_grad(&spec, &[b0, 1.2, 0.03], 40.0, 10.0, None).unwrap();
            assert!((g.grad[0] - (1.0 - (-1.2 - 0.03 * 40.0_f64).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn mb_gradient_matches_fd_at_reference_point() {
        let b = [5.0, 1.0, 0.02, 1.0, 0.01];
        let g = mean_grad(&mb_np(), &b, 40.0, 40.0, None).unwrap();
        let fd = fd_grad(&mb_np(), &b, 40.0, 40.0, None, 1e-6);
        for (a, f) in g.grad.iter().zip(&fd) {
            assert!((a - f).abs() / a.abs() < 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn factor_gradient_is_dummy_times_bracket() {
        let design = build_design("steepness", &["1", "3"], &["1", "2", "3", "4"]).unwrap();
        let spec = MeanSpec::new(ModelKind::MitscherlichBaule, ResponseVariant::NOnly, Some(design.clone()))
            .unwrap();
        let params = [7.9, 2.3, 0.035, -0.08, 0.006, 0.28];
        let g = mean_grad(&spec, &params, 50.0, 20.0, Some(design.row(1))).unwrap();
        let bracket = 1.0 - (-2.3 - 0.035 * 50.0_f64).exp();
        assert_eq!(g.grad[3], 0.0);
        assert!((g.grad[4] - bracket).abs() < 1e-15);
        assert_eq!(g.grad[5], 0.0);
        let mu = eval_mean(&spec, &params, 50.0, 20.0, Some(design.row(1))).unwrap();
        assert!((mu - (7.9 + 0.006) * bracket).abs() < 1e-14);
    }

    #[test]
    fn textbook_dummy_coding() {
        let d = build_design("f", &["A", "B", "A", "C"], &["A", "B", "C"]).unwrap();
        assert_eq!(d.matrix, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(d.n_columns(), 2);
    }

    #[test]
    fn steepness_gets_three_columns() {
        let d = build_design("steepness", &["1", "2", "3", "4"], &["1", "2", "3", "4"]).unwrap();
        assert_eq!(d.n_columns(), 3);
        let w = build_design("weather", &["1"], &["1", "2", "3", "4", "5", "6"]).unwrap();
        assert_eq!(w.n_columns(), 5);
    }

    #[test]
    fn degenerate_and_unknown_levels_rejected() {
        assert_eq!(
            build_design("f", &["A", "A"], &["A"]).unwrap_err(),
            ModelError::SingleLevel("f".into())
        );
        assert_eq!(
            build_design("f", &["A", "Z"], &["A", "B"]).unwrap_err(),
            ModelError::UnknownLevel("Z".into())
        );
    }

    #[test]
    fn factor_only_with_n_only_mb() {
        let d = build_design("f", &["A"], &["A", "B"]).unwrap();
        for (k, v) in [
            (ModelKind::MitscherlichBaule, ResponseVariant::NP),
            (ModelKind::MitscherlichBaule, ResponseVariant::POnly),
            (ModelKind::Gompertz, ResponseVariant::NP),
        ] {
            assert_eq!(MeanSpec::new(k, v, Some(d.clone())).unwrap_err(), ModelError::FactorNotSupported);
        }
        assert_eq!(
            MeanSpec::new(ModelKind::Linear, ResponseVariant::NOnly, None).unwrap_err(),
            ModelError::VariantNotSupported
        );
    }

    #[test]
    fn argument_validation() {
        assert!(matches!(
            eval_mean(&mb_np(), &[1.0, 2.0], 1.0, 1.0, None),
            Err(ModelError::ParamCount { expected: 5, got: 2 })
        ));
        assert!(matches!(
            eval_mean(&mb_np(), &[1.0; 5], -1.0, 1.0, None),
            Err(ModelError::BadInput { .. })
        ));
        assert!(matches!(
            eval_mean(&mb_np(), &[1.0; 5], 1.0, 1.0, Some(&[1.0])),
            Err(ModelError::DummyCount { .. })
        ));
    }

    #[test]
    fn power_model_is_zero_on_axes() {
        let spec = MeanSpec::classical(ModelKind::Power);
        assert_eq!(eval_mean(&spec, &[3.0, 0.5, 0.2], 0.0, 40.0, None).unwrap(), 0.0);
        let g = mean_grad(&spec, &[3.0, 0.5, 0.2], 10.0, 0.0, None).unwrap();
        assert!(g.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn von_liebig_tie_uses_first_arm_and_flags() {
        let spec = MeanSpec::classical(ModelKind::LinearVonLiebig);
        // arms: 5, 1 + 0.1*40 = 5, 2 + 0.5*10 = 7
        let g = mean_grad(&spec, &[5.0, 1.0, 2.0, 0.1, 0.5], 40.0, 10.0, None).unwrap();
        assert!(g.tie);
        assert_eq!(g.grad, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = mean_grad(&spec, &[9.0, 1.0, 2.0, 0.1, 0.5], 40.0, 10.0, None).unwrap();
        assert!(!g.tie);
        assert_eq!(g.grad, vec![0.0, 1.0, 0.0, 40.0, 0.0]);
    }

    fn random_interior(kind: ModelKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use ModelKind::*;
        match kind {
            Linear | Quadratic | SquareRoot => {
                (0..kind.n_params()).map(|_| rng.random_range(-2.0..2.0)).collect()
            }
            Power => vec![rng.random_range(0.5..5.0), rng.random_range(0.05..0.8), rng.random_range(0.05..0.8)],
            Gompertz | Logistic => {
                vec![rng.random_range(2.0..15.0), rng.random_range(0.2..5.0), rng.random_range(0.005..0.1)]
            }
            MitscherlichBaule => vec![
                rng.random_range(2.0..15.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.001..0.08),
                rng.random_range(0.1..8.0),
                rng.random_range(0.0001..0.05),
            ],
            LinearVonLiebig => vec![
                rng.random_range(2.0..15.0),
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.2),
            ],
            NonlinearVonLiebig => vec![
                rng.random_range(2.0..15.0),
                rng.random_range(0.1..0.9),
                rng.random_range(0.005..0.08),
                rng.random_range(0.1..0.9),
                rng.random_range(0.005..0.08),
            ],
        }
    }

    #[test]
    fn every_model_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in ModelKind::ALL {
            let spec = MeanSpec::classical(kind);
            for _ in 0..100 {
                let b = random_interior(kind, &mut rng);
                let n = rng.random_range(1.0..100.0);
                let p = rng.random_range(1.0..100.0);
                let g = mean_grad(&spec, &b, n, p, None).unwrap();
                let fd = fd_grad(&spec, &b, n, p, None, 1e-5);
                for (a, f) in g.grad.iter().zip(&fd) {
                    assert!(rel_err(*a, *f) < 1e-6, "{kind}: {a} vs {f} at {b:?}");
                }
            }
        }
    }

    #[test]
    fn plateau_limit_in_n() {
        let b = [8.0, 1.0, 0.01, 7.0, 0.0002];
        for p in [5.0, 50.0, 100.0] {
            let mu = eval_mean(&mb_np(), &b, 1e6, p, None).unwrap();
            let limit = b[0] * (1.0 - (-b[3] - b[4] * p).exp());
            assert!((mu - limit).abs() < 1e-9 * b[0]);
        }
    }

    #[test]
    fn variant_np_with_saturated_p_matches_n_only() {
        let n_only = MeanSpec::mb(ResponseVariant::NOnly);
        for n in [1.0, 10.0, 77.0] {
            let a = eval_mean(&mb_np(), &[6.0, 1.3, 0.02, 60.0, 0.0], n, 30.0, None).unwrap();
            let b = eval_mean(&n_only, &[6.0, 1.3, 0.02], n, 30.0, None).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mb_monotone_and_bounded(
            b0 in 0.1f64..30.0, b1 in 0.001f64..5.0, b2 in 0.0001f64..0.2,
            b3 in 0.001f64..5.0, b4 in 0.0001f64..0.2,
            mut grid in proptest::collection::vec(0.0f64..100.0, 2..20),
            fixed in 0.0f64..100.0,
        ) {
            grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let b = [b0, b1, b2, b3, b4];
            let spec = mb_np();
            let mut prev_n = f64::NEG_INFINITY;
            let mut prev_p = f64::NEG_INFINITY;
            for &x in &grid {
                let mn = eval_mean(&spec, &b, x, fixed, None).unwrap();
                let mp = eval_mean(&spec, &b, fixed, x, None).unwrap();
                prop_assert!(mn >= prev_n && mp >= prev_p);
                prop_assert!((0.0..=b0).contains(&mn) && (0.0..=b0).contains(&mp));
                prev_n = mn;
                prev_p = mp;
            }
        }

        #[test]
        fn factored_mb_bounded_by_shifted_max(
            g0 in 1.0f64..10.0,
            shifts in proptest::collection::vec(-0.5f64..0.5, 3),
            level in 0usize..4, n in 0.0f64..100.0,
        ) {
            let levels = ["1", "2", "3", "4"];
            let d = build_design("s", &[levels[level]], &levels).unwrap();
            let spec = MeanSpec::new(ModelKind::MitscherlichBaule, ResponseVariant::NOnly, Some(d.clone())).unwrap();
            let params = [g0, 1.0, 0.03, shifts[0], shifts[1], shifts[2]];
            let mu = eval_mean(&spec, &params, n, 10.0, Some(d.row(0))).unwrap();
            let max_shift = shifts.iter().cloned().fold(0.0f64, f64::max);
            prop_assert!(mu >= 0.0 && mu <= g0 + max_shift);
        }
    }
}
