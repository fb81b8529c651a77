//! Convergence diagnostics and plot-data exports for MCMC output.

use std::io::Write;

use serde::Serialize;

use crate::nuts::PosteriorSamples;

/// Half-chains shorter than this make R-hat unreliable.
pub const MIN_SPLIT_LEN: usize = 50;

/// A statistic that may be undefined on degenerate input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub value: f64,
    /// Within-chain variance was zero; `value` is NaN.
    pub degenerate: bool,
}

impl Stat {
    fn degenerate() -> Self {
        Stat { value: f64::NAN, degenerate: true }
    }

    fn ok(value: f64) -> Self {
        Stat { value, degenerate: false }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split each chain in half (dropping the middle draw of odd-length chains).
fn split_chains(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [&c[..half], &c[c.len() - half..]]
        })
        .collect()
}

/// Split R-hat. Needs equal-length chains of at least four draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> Stat {
    let n = chains.first().map_or(0, Vec::len);
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Stat::degenerate();
    }
    let halves = split_chains(chains);
    let n = halves[0].len() as f64;
    let w = halves.iter().map(|h| sample_var(h)).sum::<f64>() / halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let b = n * sample_var(&means);
    if !(w > 0.0) || !w.is_finite() {
        return Stat::degenerate();
    }
    Stat::ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// Effective sample size with flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ess {
    pub value: f64,
    pub degenerate: bool,
    /// Larger than the number of draws (antithetic chains).
    pub superefficient: bool,
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Ess {
    let n = chains.first().map_or(0, Vec::len);
    let bad = Ess { value: f64::NAN, degenerate: true, superefficient: false };
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return bad;
    }
    let m_chains = chains.len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov_at = |lag: usize| -> f64 {
        chains.iter().zip(&means).map(|(c, &m)| autocov(c, m, lag)).sum::<f64>() / m_chains as f64
    };
    // with one chain rho_t reduces to acov_t / acov_0
    let acov0 = acov_at(0);
    let mut var_plus = acov0;
    if m_chains > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() || !(acov0 > 0.0) {
        return bad;
    }
    let rho = |lag: usize| 1.0 - (acov0 - acov_at(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n + 2];
    let mut even = 1.0;
    rho_hat[0] = even;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            let avg = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 1] = avg;
            rho_hat[t + 2] = avg;
        }
        t += 2;
    }
    let total = (m_chains * n) as f64;
    let tau = (-1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1]).max(1.0 / total.log10());
    let value = total / tau;
    Ess { value, degenerate: false, superefficient: value > total }
}

/// Lag `0..=max_lag` autocorrelation, averaged over chains.
pub fn autocorrelation(chains: &[Vec<f64>], max_lag: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_lag + 1];
    for c in chains {
        let m = mean(c);
        let c0 = autocov(c, m, 0);
        for (lag, slot) in out.iter_mut().enumerate() {
            *slot += if c0 > 0.0 && lag < c.len() { autocov(c, m, lag) / c0 } else { f64::NAN };
        }
    }
    out.iter().map(|v| v / chains.len() as f64).collect()
}

/// Export lag cap: `min(n - 1, floor(10 log10 n), 50)`.
pub fn default_max_lag(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((10.0 * (n as f64).log10()).floor() as usize).min(n - 1).min(50)
}

/// Type-7 quantile of unsorted data.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

pub fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean, `sd / sqrt(n_eff)`.
    pub mcse: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    pub n_eff: f64,
    pub rhat: f64,
    pub rhat_degenerate: bool,
    pub ess_superefficient: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamSummary>,
    /// Averaged autocorrelation for each parameter, lags `0..`.
    pub autocorrelation: Vec<Vec<f64>>,
    pub n_chains: usize,
    pub n_kept: usize,
    /// Chains too short or too few for R-hat to mean much.
    pub rhat_unreliable: bool,
}

impl DiagnosticsReport {
    pub fn max_rhat(&self) -> f64 {
        self.params.iter().map(|p| p.rhat).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Fixed-width table in the usual posterior-summary layout.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9} {:>7}\n",
            "parameter", "mean", "se_mean", "sd", "2.5%", "50%", "97.5%", "n_eff", "Rhat"
        );
        for p in &self.params {
            s += &format!(
                "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.0} {:>7.3}\n",
                p.name, p.mean, p.mcse, p.sd, p.q025, p.q500, p.q975, p.n_eff, p.rhat
            );
        }
        if self.rhat_unreliable {
            s += &format!(
                "warning: R-hat unreliable ({} chains x {} draws; need 2+ chains with {}+ draws per half)\n",
                self.n_chains,
                self.n_kept,
                MIN_SPLIT_LEN
            );
        }
        s
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "parameter,mean,se_mean,sd,q2.5,q50,q97.5,n_eff,rhat")?;
        for p in &self.params {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.name, p.mean, p.mcse, p.sd, p.q025, p.q500, p.q975, p.n_eff, p.rhat
            )?;
        }
        Ok(())
    }

    pub fn write_autocorrelation_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "lag,parameter,rho")?;
        for (p, rho) in self.params.iter().zip(&self.autocorrelation) {
            for (lag, r) in rho.iter().enumerate() {
                writeln!(out, "{lag},{},{r}", p.name)?;
            }
        }
        Ok(())
    }
}

/// Per-parameter summaries in sampler parameter order.
pub fn summarize(samples: &PosteriorSamples) -> DiagnosticsReport {
    let max_lag = default_max_lag(samples.n_kept);
    let mut params = Vec::new();
    let mut acf = Vec::new();
    for (k, name) in samples.param_names.iter().enumerate() {
        let chains = samples.param(k);
        let mut all = chains.concat();
        let m = mean(&all);
        let sd = if all.len() > 1 { sample_var(&all).sqrt() } else { 0.0 };
        all.sort_by(f64::total_cmp);
        let rhat = split_rhat(&chains);
        let ess = effective_sample_size(&chains);
        params.push(ParamSummary {
            name: name.clone(),
            mean: m,
            sd,
            mcse: sd / ess.value.sqrt(),
            q025: quantile_sorted(&all, 0.025),
            q500: quantile_sorted(&all, 0.5),
            q975: quantile_sorted(&all, 0.975),
            n_eff: ess.value,
            rhat: rhat.value,
            rhat_degenerate: rhat.degenerate,
            ess_superefficient: ess.superefficient,
        });
        acf.push(autocorrelation(&chains, max_lag));
    }
    DiagnosticsReport {
        params,
        autocorrelation: acf,
        n_chains: samples.n_chains,
        n_kept: samples.n_kept,
        rhat_unreliable: samples.n_chains < 2 || samples.n_kept / 2 < MIN_SPLIT_LEN,
    }
}

/// Tidy trace export: `chain,iteration,parameter,value` (1-based chain and iteration).
pub fn write_trace_csv<W: Write>(samples: &PosteriorSamples, mut out: W) -> std::io::Result<()> {
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

/// Gaussian kernel density estimate on an evenly spaced grid, with
/// Silverman's rule-of-thumb bandwidth.
pub fn kde(x: &[f64], grid_points: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let sd = if s.len() > 1 { sample_var(&s).sqrt() } else { 0.0 };
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * n.powf(-0.2);
    if !(h > 0.0) {
        h = 1e-3 * s[0].abs().max(1.0);
    }
    let (lo, hi) = (s[0] - 3.0 * h, s[s.len() - 1] + 3.0 * h);
    let step = (hi - lo) / (grid_points.max(2) - 1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..grid_points.max(2)).map(|i| lo + step * i as f64).collect();
    let dens = grid
        .iter()
        .map(|&g| {
            // only points within 8 bandwidths contribute measurably
            let a = s.partition_point(|&v| v < g - 8.0 * h);
            let b = s.partition_point(|&v| v <= g + 8.0 * h);
            s[a..b].iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() * norm
        })
        .collect();
    (grid, dens)
}

/// Tidy density export: `parameter,grid,density`, pooled over chains.
pub fn write_density_csv<W: Write>(samples: &PosteriorSamples, grid_points: usize, mut out: W) -> std::io::Result<()> {
    writeln!(out, "parameter,grid,density")?;
    for (k, name) in samples.param_names.iter().enumerate() {
        let (grid, dens) = kde(&samples.param(k).concat(), grid_points);
        for (g, d) in grid.iter().zip(&dens) {
            writeln!(out, "{name},{g},{d}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(seed: u64, n: usize, phi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                x = phi * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    /// Deterministic 200-point sequence used by the frozen R-hat value below.
    fn fixed_sequence() -> Vec<f64> {
        (0..200).map(|i| (1.3 * i as f64).sin() + 0.01 * i as f64).collect()
    }

    #[test]
    fn rhat_on_duplicated_fixed_sequence() {
        let x = fixed_sequence();
        let r = split_rhat(&[x.clone(), x]);
        // computed independently from the split formula
        assert!((r.value - 1.2372178502917504).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn rhat_hits_lower_bound_when_split_means_agree() {
        let half: Vec<f64> = (0..100).map(|i| (0.7 * i as f64).cos()).collect();
        let x = [half.clone(), half].concat();
        let r = split_rhat(&[x.clone(), x]);
        assert!((r.value - (99.0f64 / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let r = split_rhat(&[vec![0.0; 50], vec![1.0; 50]]);
        assert!(r.degenerate && r.value.is_nan());
        let e = effective_sample_size(&[vec![2.0; 50], vec![2.0; 50]]);
        assert!(e.degenerate && e.value.is_nan());
        assert!(split_rhat(&[vec![1.0, 2.0]]).degenerate);
    }

    #[test]
    fn iid_rhat_near_one() {
        for seed in 0..10 {
            let r = split_rhat(&[iid(2 * seed, 5000), iid(2 * seed + 1, 5000)]).value;
            assert!((0.99..=1.01).contains(&r), "{r}");
        }
    }

    #[test]
    fn iid_ess_near_draw_count() {
        let chains: Vec<Vec<f64>> = (0..4).map(|s| iid(100 + s, 1000)).collect();
        let e = effective_sample_size(&chains).value;
        assert!((3200.0..=4800.0).contains(&e), "{e}");
    }

    #[test]
    fn ar1_ess_matches_closed_form() {
        let expected = (1.0 - 0.9) / (1.0 + 0.9);
        for seed in 0..10 {
            let chains: Vec<Vec<f64>> = (0..4).map(|c| ar1(seed * 10 + c, 5000, 0.9)).collect();
            let ratio = effective_sample_size(&chains).value / 20_000.0;
            assert!((ratio / expected - 1.0).abs() < 0.5, "{ratio}");
        }
    }

    #[test]
    fn alternating_chain_is_superefficient() {
        let x: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let e = effective_sample_size(&[x, y]);
        assert!(e.value > 2000.0, "{}", e.value);
        assert!(e.superefficient);
    }

    #[test]
    fn type7_quantiles() {
        let x = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
    }

    fn samples_from(chains: Vec<Vec<f64>>) -> PosteriorSamples {
        let n_kept = chains[0].len();
        PosteriorSamples {
            param_names: vec!["x".into()],
            n_chains: chains.len(),
            n_kept,
            unconstrained: chains.clone(),
            draws: chains,
            stats: Vec::new(),
            step_size: Vec::new(),
            inv_mass: Vec::new(),
            warmup_divergences: Vec::new(),
        }
    }

    #[test]
    fn point_mass_summary() {
        let r = summarize(&samples_from(vec![vec![2.5; 100], vec![2.5; 100]]));
        let p = &r.params[0];
        assert_eq!((p.mean, p.q025, p.q975), (2.5, 2.5, 2.5));
        assert!(p.rhat_degenerate);
    }

    #[test]
    fn uniform_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let r = summarize(&samples_from(vec![u[..50_000].to_vec(), u[50_000..].to_vec()]));
        let p = &r.params[0];
        assert!((p.q025 - 0.025).abs() < 0.005);
        assert!((p.q975 - 0.975).abs() < 0.005);
        assert!(!r.rhat_unreliable);
    }

    #[test]
    fn short_runs_flag_rhat() {
        let r = summarize(&samples_from(vec![iid(1, 5), iid(2, 5)]));
        assert!(r.rhat_unreliable);
        assert!(r.table().contains("unreliable"));
    }

    #[test]
    fn exports_are_tidy() {
        let s = samples_from(vec![iid(1, 30), iid(2, 30)]);
        let mut buf = Vec::new();
        write_trace_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("chain,iteration,parameter,value\n1,1,x,"));
        assert_eq!(text.lines().count(), 61);

        let r = summarize(&s);
        assert_eq!(r.autocorrelation[0].len(), default_max_lag(30) + 1);
        assert!((r.autocorrelation[0][0] - 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        r.write_autocorrelation_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("lag,parameter,rho\n0,x,1"));

        let mut buf = Vec::new();
        write_density_csv(&s, 64, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 65);
    }

    #[test]
    fn kde_integrates_to_one() {
        let (g, d) = kde(&iid(5, 4000), 512);
        let step = g[1] - g[0];
        let total: f64 = d.iter().sum::<f64>() * step;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn lag_cap() {
        assert_eq!(default_max_lag(5000), 36);
        assert_eq!(default_max_lag(1_000_000), 50);
        assert_eq!(default_max_lag(5), 4);
    }

    proptest! {
        #[test]
        fn rhat_and_ess_affine_invariant(seed in 0u64..1000, a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0) {
            let chains = vec![ar1(seed, 200, 0.5), ar1(seed + 1, 200, 0.5)];
            let moved: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| a * v + b).collect()).collect();
            let (r1, r2) = (split_rhat(&chains).value, split_rhat(&moved).value);
            prop_assert!((r1 - r2).abs() < 1e-12);
            let (e1, e2) = (effective_sample_size(&chains).value, effective_sample_size(&moved).value);
            prop_assert!((e1 - e2).abs() < 1e-8 * e1);
        }

        #[test]
        fn rhat_lower_bound_and_quantile_order(seed in 0u64..1000) {
            let chains = vec![iid(seed, 60), iid(seed + 7, 60)];
            let r = split_rhat(&chains).value;
            prop_assert!(r >= (29.0f64 / 30.0).sqrt() - 1e-12);
            let all = chains.concat();
            let mut prev = f64::NEG_INFINITY;
            for q in [0.0, 0.025, 0.25, 0.5, 0.75, 0.975, 1.0] {
                let v = quantile(&all, q);
                prop_assert!(v >= prev);
                prev = v;
            }
            let e = effective_sample_size(&chains);
            prop_assert!(e.value > 0.0);
        }
    }
}
