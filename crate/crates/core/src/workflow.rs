//! The standard MB fitting workflow: hold out an elicitation split, build
//! priors from an NLS fit on it, then sample the posterior on the rest.

use serde::Serialize;

use crate::data::{split, DataError, Dataset, Factor};
use crate::diagnostics::{summarize, DiagnosticsReport};
use crate::model::{MeanSpec, ResponseVariant};
use crate::nls::{elicit_priors, ElicitedPriors, NlsError};
use crate::nuts::{run_chains, PosteriorSamples, SamplerConfig, SamplerError};
use crate::target::{TargetError, YieldTarget};

/// Fraction of rows used for prior elicitation.
pub const ELICITATION_RATIO: f64 = 0.10;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nls(#[from] NlsError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Serialize)]
pub struct FitRequest {
    pub variant: ResponseVariant,
    pub factor: Option<Factor>,
    pub sampler: SamplerConfig,
    /// Seed of the elicitation split; the sampler seed is separate.
    pub split_seed: u64,
}

impl FitRequest {
    pub fn new(variant: ResponseVariant, factor: Option<Factor>, sampler: SamplerConfig) -> Self {
        let split_seed = sampler.seed;
        FitRequest { variant, factor, sampler, split_seed }
    }
}

pub struct Fit {
    /// Spec bound to the training rows.
    pub spec: MeanSpec,
    pub elicited: ElicitedPriors,
    pub elicitation: Dataset,
    pub train: Dataset,
    pub target: YieldTarget,
    pub samples: PosteriorSamples,
    pub report: DiagnosticsReport,
}

pub fn fit_mb(data: &Dataset, req: &FitRequest) -> Result<Fit, FitError> {
    let (elicitation, train) = split(data, ELICITATION_RATIO, req.split_seed)?;
    let spec = train.mb_spec(req.variant, req.factor)?;
    let elicited = elicit_priors(&elicitation, &spec)?;
    let target = YieldTarget::new(&train, &spec, elicited.priors.clone())?;
    let samples = run_chains(&target, &req.sampler)?;
    let report = summarize(&samples);
    Ok(Fit { spec, elicited, elicitation, train, target, samples, report })
}
