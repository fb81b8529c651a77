//! Posterior mean curves with credible and predictive bands, and the
//! samples file that carries draws from `fit` to `predict`.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{Factor, DataError};
use crate::diagnostics::quantile_sorted;
use crate::model::{MeanSpec, ResponseVariant};
use crate::nuts::PosteriorSamples;
use crate::target::layout;

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("samples file: {0}")]
    Format(String),
    #[error("samples do not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("bad quantile pair ({0}, {1})")]
    Quantiles(f64, f64),
}

/// Model identity recorded in a samples file as `# spec: variant=np factor=none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecTag {
    pub variant: ResponseVariant,
    pub factor: Option<Factor>,
}

impl SpecTag {
    pub fn line(&self) -> String {
        format!("spec: variant={} factor={}", self.variant, self.factor.map_or("none", Factor::name))
    }

    fn parse(text: &str) -> Result<Self, PredictError> {
        let bad = || PredictError::Format(format!("bad spec line `{text}`"));
        let mut variant = None;
        let mut factor = None;
        for field in text.split_whitespace() {
            match field.split_once('=').ok_or_else(bad)? {
                ("variant", v) => variant = Some(v.parse().map_err(|_| bad())?),
                ("factor", "none") => factor = Some(None),
                ("factor", f) => factor = Some(Some(f.parse()?)),
                _ => return Err(bad()),
            }
        }
        Ok(SpecTag { variant: variant.ok_or_else(bad)?, factor: factor.ok_or_else(bad)? })
    }
}

/// Write draws as `chain,iteration,parameter,value` (1-based) after `#` comment lines.
pub fn write_samples_csv<W: Write>(
    samples: &PosteriorSamples,
    tag: SpecTag,
    comments: &[String],
    mut out: W,
) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "# {}", tag.line())?;
    writeln!(out, "chain,iteration,parameter,value")?;
    for c in 0..samples.n_chains {
        for i in 0..samples.n_kept {
            for (name, v) in samples.param_names.iter().zip(samples.draw(c, i)) {
                writeln!(out, "{},{},{name},{v}", c + 1, i + 1)?;
            }
        }
    }
    Ok(())
}

/// Draws read back from a samples file, one row per (chain, iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub tag: SpecTag,
    pub param_names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
}

pub fn read_samples_csv<R: BufRead>(reader: R) -> Result<SampleTable, PredictError> {
    let mut tag = None;
    let mut names: Vec<String> = Vec::new();
    let mut draws: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<(String, String)> = None;
    let mut header_seen = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |m: &str| PredictError::Format(format!("line {}: {m}", lineno + 1));
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(spec) = comment.trim().strip_prefix("spec:") {
                tag = Some(SpecTag::parse(spec.trim())?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line.trim() != "chain,iteration,parameter,value" {
                return Err(err("expected header chain,iteration,parameter,value"));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err("expected 4 fields"));
        }
        let value: f64 = fields[3].parse().map_err(|_| err("bad value"))?;
        let key = (fields[0].to_string(), fields[1].to_string());
        if current.as_ref() != Some(&key) {
            if let Some(last) = draws.last() {
                if last.len() != names.len() {
                    return Err(err("incomplete draw"));
                }
            }
            current = Some(key);
            draws.push(Vec::with_capacity(names.len()));
        }
        let first = draws.len() == 1;
        let row = draws.last_mut().unwrap();
        if first {
            names.push(fields[2].to_string());
        } else if names.get(row.len()).map(String::as_str) != Some(fields[2]) {
            return Err(err("parameter order differs between draws"));
        }
        row.push(value);
    }
    if draws.last().is_some_and(|d| d.len() != names.len()) {
        return Err(PredictError::Format("incomplete final draw".into()));
    }
    if draws.is_empty() {
        return Err(PredictError::Format("no draws".into()));
    }
    let tag = tag.ok_or_else(|| PredictError::Format("missing `# spec:` line".into()))?;
    Ok(SampleTable { tag, param_names: names, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub n: f64,
    pub p: f64,
    /// Factor level label, or `none` for an unfactored model.
    pub level: String,
    pub mean: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub pred_lo: f64,
    pub pred_hi: f64,
}

/// Mean curve and bands at every grid point (and factor level).
///
/// `draws` hold constrained values laid out as [`layout`] of `spec`; the
/// last entry of each draw is the error variance.
pub fn predict(
    spec: &MeanSpec,
    param_names: &[String],
    draws: &[Vec<f64>],
    grid: &[(f64, f64)],
    q: (f64, f64),
    seed: u64,
) -> Result<Vec<PredictionRow>, PredictError> {
    let (names, _) = layout(spec);
    if names != param_names {
        return Err(PredictError::Mismatch(format!("expected parameters {names:?}, found {param_names:?}")));
    }
    if !(0.0..=1.0).contains(&q.0) || !(0.0..=1.0).contains(&q.1) || q.0 > q.1 {
        return Err(PredictError::Quantiles(q.0, q.1));
    }
    let k = spec.n_params();
    let levels: Vec<(String, Vec<f64>)> = match spec.factor() {
        None => vec![("none".to_string(), Vec::new())],
        Some(f) => f
            .levels
            .iter()
            .enumerate()
            .map(|(j, l)| (l.clone(), (0..f.n_columns()).map(|c| (c + 1 == j) as u8 as f64).collect()))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(levels.len() * grid.len());
    let mut mu = vec![0.0; draws.len()];
    let mut pred = vec![0.0; draws.len()];
    for (label, dummies) in &levels {
        for &(n, p) in grid {
            for (s, d) in draws.iter().enumerate() {
                mu[s] = spec.eval_unchecked(&d[..k], n, p, dummies, None).0;
                let z: f64 = StandardNormal.sample(&mut rng);
                pred[s] = mu[s] + d[k].sqrt() * z;
            }
            let mean = mu.iter().sum::<f64>() / mu.len() as f64;
            let mut ms = mu.clone();
            ms.sort_by(f64::total_cmp);
            pred.sort_by(f64::total_cmp);
            rows.push(PredictionRow {
                n,
                p,
                level: label.clone(),
                mean,
                mu_lo: quantile_sorted(&ms, q.0),
                mu_hi: quantile_sorted(&ms, q.1),
                pred_lo: quantile_sorted(&pred, q.0),
                pred_hi: quantile_sorted(&pred, q.1),
            });
        }
    }
    Ok(rows)
}

pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], comments: &[String], mut out: W) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "n,p,level,mean,mu_lo,mu_hi,pred_lo,pred_hi")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n, r.p, r.level, r.mean, r.mu_lo, r.mu_hi, r.pred_lo, r.pred_hi
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn np_draws(sigma: f64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                vec![8.9 + 0.2 * e, 1.1, 0.011, 7.6, 0.0002, sigma]
            })
            .collect()
    }

    fn names() -> Vec<String> {
        layout(&MeanSpec::mb(ResponseVariant::NP)).0
    }

    #[test]
    fn predictive_band_contains_mean_band() {
        let grid: Vec<(f64, f64)> = (1..=10).map(|i| (10.0 * i as f64, 50.0)).collect();
        let rows = predict(&MeanSpec::mb(ResponseVariant::NP), &names(), &np_draws(0.071, 4000), &grid, (0.025, 0.975), 1)
            .unwrap();
        for r in &rows {
            assert!(r.pred_lo <= r.mu_lo && r.mu_hi <= r.pred_hi, "{r:?}");
            assert!(r.mu_lo <= r.mean && r.mean <= r.mu_hi);
        }
    }

    #[test]
    fn zero_noise_bands_coincide() {
        let rows =
            predict(&MeanSpec::mb(ResponseVariant::NP), &names(), &np_draws(0.0, 500), &[(30.0, 40.0)], (0.025, 0.975), 1)
                .unwrap();
        assert!((rows[0].pred_lo - rows[0].mu_lo).abs() < 1e-12);
        assert!((rows[0].pred_hi - rows[0].mu_hi).abs() < 1e-12);
    }

    #[test]
    fn held_out_points_fall_in_predictive_band() {
        // fresh data from the truth against draws concentrated at the truth
        let cfg = GeneratorConfig { seed: 21, ..GeneratorConfig::winter_barley() };
        let held_out = generate(&cfg).unwrap();
        let spec = MeanSpec::mb(ResponseVariant::NP);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                vec![8.948 + 0.05 * e, 1.102, 0.011, 7.617, 0.0002, 0.071]
            })
            .collect();
        let grid: Vec<(f64, f64)> = held_out.rows.iter().map(|r| (r.n, r.p)).collect();
        let rows = predict(&spec, &names(), &draws, &grid, (0.025, 0.975), 3).unwrap();
        let inside = rows.iter().zip(&held_out.rows).filter(|(p, r)| p.pred_lo <= r.y && r.y <= p.pred_hi).count();
        assert!(inside as f64 >= 0.9 * 169.0, "{inside}");
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let spec = MeanSpec::mb(ResponseVariant::NOnly);
        let err = predict(&spec, &names(), &np_draws(0.1, 10), &[(1.0, 1.0)], (0.025, 0.975), 1).unwrap_err();
        assert!(matches!(err, PredictError::Mismatch(_)));
    }

    #[test]
    fn samples_file_round_trip() {
        let draws = np_draws(0.07, 6);
        let samples = PosteriorSamples {
            param_names: names(),
            n_chains: 2,
            n_kept: 3,
            draws: vec![draws[..3].concat(), draws[3..].concat()],
            unconstrained: vec![Vec::new(), Vec::new()],
            stats: Vec::new(),
            step_size: Vec::new(),
            inv_mass: Vec::new(),
            warmup_divergences: Vec::new(),
        };
        let tag = SpecTag { variant: ResponseVariant::NP, factor: None };
        let mut buf = Vec::new();
        write_samples_csv(&samples, tag, &["yieldbayes test".into()], &mut buf).unwrap();
        let table = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(table.tag, tag);
        assert_eq!(table.param_names, names());
        assert_eq!(table.draws, draws);
    }

    #[test]
    fn spec_line_with_factor() {
        let tag = SpecTag { variant: ResponseVariant::NOnly, factor: Some(Factor::Steepness) };
        assert_eq!(tag.line(), "spec: variant=n factor=steepness");
        assert_eq!(SpecTag::parse("variant=n factor=steepness").unwrap(), tag);
        assert!(SpecTag::parse("variant=q factor=none").is_err());
    }
}
