//! No-U-Turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaging step size adaptation and a diagonal metric.
//!
//! Warmup is split into an initial fast phase (15%), a slow phase (75%) made
//! of doubling metric windows, and a terminal fast phase (10%). Every chain
//! owns a ChaCha8 stream derived from the seed, so results do not depend on
//! thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::target::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: no finite starting point after {attempts} attempts")]
    Init { chain: usize, attempts: usize },
    #[error("step size search did not settle after 100 doublings (last epsilon {epsilon:e}); target looks improper")]
    StepSize { epsilon: f64 },
    #[error("chain {chain}: every warmup transition diverged (final step size {step_size:e}, metric {inv_mass:?})")]
    AllDivergent { chain: usize, step_size: f64, inv_mass: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Iterations per chain including warmup.
    pub n_iter: usize,
    pub n_warmup: usize,
    pub target_accept: f64,
    /// 0 runs one-step HMC with a Metropolis correction.
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Standard deviation of the normal jitter added to initial points.
    pub init_jitter: f64,
    /// Keep every `thin`-th post-warmup draw.
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_iter: 10_000,
            n_warmup: 5_000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 1,
            init_jitter: 1.0,
            thin: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let fail = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.n_chains == 0 {
            return fail("need at least one chain");
        }
        if self.n_warmup >= self.n_iter {
            return fail("n_warmup must be smaller than n_iter");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail("target_accept must lie in (0, 1)");
        }
        if self.thin == 0 {
            return fail("thin must be at least 1");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return fail("init_jitter must be finite and non-negative");
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        (self.n_iter - self.n_warmup).div_ceil(self.thin)
    }
}

/// A point in phase space with its cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl Point {
    pub fn new<T: LogDensity + ?Sized>(target: &T, z: Vec<f64>, r: Vec<f64>) -> Self {
        let mut grad = vec![0.0; z.len()];
        let logp = target.log_density_grad(&z, &mut grad);
        Point { z, r, logp, grad }
    }

    /// `-log p(z) + r' M^-1 r / 2`; non-finite values map to `+inf`.
    pub fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        let kinetic: f64 = self.r.iter().zip(inv_mass).map(|(r, m)| r * r * m).sum::<f64>() / 2.0;
        let h = kinetic - self.logp;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }
}

/// One leapfrog step of size `eps` (negative integrates backwards).
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, point: &Point, eps: f64, inv_mass: &[f64]) -> Point {
    let half: Vec<f64> = point.r.iter().zip(&point.grad).map(|(r, g)| r + 0.5 * eps * g).collect();
    let z: Vec<f64> = point
        .z
        .iter()
        .zip(&half)
        .zip(inv_mass)
        .map(|((z, r), m)| z + eps * m * r)
        .collect();
    let mut grad = vec![0.0; z.len()];
    let logp = target.log_density_grad(&z, &mut grad);
    let r = half.iter().zip(&grad).map(|(r, g)| r + 0.5 * eps * g).collect();
    Point { z, r, logp, grad }
}

fn sample_momentum(inv_mass: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|m| {
            let n: f64 = rng.sample(StandardNormal);
            n / m.sqrt()
        })
        .collect()
}

/// Find a step size whose one-step acceptance probability crosses 0.5,
/// starting from `eps0` and doubling or halving.
pub fn find_reasonable_epsilon<T: LogDensity + ?Sized>(
    target: &T,
    z0: &[f64],
    eps0: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64, SamplerError> {
    let mut eps = eps0;
    let start = Point::new(target, z0.to_vec(), sample_momentum(inv_mass, rng));
    let h0 = start.hamiltonian(inv_mass);
    let log_accept = |eps: f64| {
        let h = leapfrog(target, &start, eps, inv_mass).hamiltonian(inv_mass);
        h0 - h
    };
    let threshold = 0.5f64.ln();
    let direction = if log_accept(eps) > threshold { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let la = log_accept(eps);
        let crossed = if direction > 0.0 { !(la > threshold) } else { la > threshold };
        if crossed {
            return Ok(eps);
        }
        eps *= 2f64.powf(direction);
    }
    Err(SamplerError::StepSize { epsilon: eps })
}

/// Nesterov dual averaging of `log(eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAveraging {
    pub mu: f64,
    pub s_bar: f64,
    pub x_bar: f64,
    pub counter: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl DualAveraging {
    pub fn new(eps: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, gamma: 0.05, t0: 10.0, kappa: 0.75 }
    }

    /// Returns the next step size.
    pub fn update(&mut self, accept_stat: f64, target: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_epsilon(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Mutable state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Current position, with the momentum of the last transition.
    pub point: Point,
    pub epsilon: f64,
    /// Diagonal of the inverse mass matrix.
    pub inv_mass: Vec<f64>,
    pub adapt: DualAveraging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub accept_stat: f64,
    pub energy: f64,
    pub step_size: f64,
}

struct Tree {
    minus: Point,
    plus: Point,
    sample: Point,
    log_w: f64,
}

struct Walk {
    h0: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `(plus - minus)` has a non-negative projection on both end velocities.
fn no_uturn(minus: &Point, plus: &Point, inv_mass: &[f64]) -> bool {
    let (mut a, mut b) = (0.0, 0.0);
    for k in 0..minus.z.len() {
        let d = plus.z[k] - minus.z[k];
        a += d * inv_mass[k] * minus.r[k];
        b += d * inv_mass[k] * plus.r[k];
    }
    a >= 0.0 && b >= 0.0
}

/// U-turn checks for two adjacent time-ordered trees: across the union and
/// across each tree extended by the neighbouring edge point.
fn merged_ok(left: (&Point, &Point), right: (&Point, &Point), inv_mass: &[f64]) -> bool {
    no_uturn(left.0, right.1, inv_mass) && no_uturn(left.0, right.0, inv_mass) && no_uturn(left.1, right.1, inv_mass)
}

fn build_tree<T: LogDensity + ?Sized>(
    target: &T,
    from: &Point,
    depth: usize,
    eps: f64,
    inv_mass: &[f64],
    walk: &mut Walk,
    rng: &mut ChaCha8Rng,
) -> Option<Tree> {
    if depth == 0 {
        let next = leapfrog(target, from, eps, inv_mass);
        let h = next.hamiltonian(inv_mass);
        walk.n_leapfrog += 1;
        let delta = walk.h0 - h;
        walk.sum_metro += if delta > 0.0 { 1.0 } else { delta.exp() };
        if -delta > MAX_DELTA_H {
            walk.divergent = true;
            return None;
        }
        return Some(Tree { minus: next.clone(), plus: next.clone(), sample: next, log_w: delta });
    }
    let first = build_tree(target, from, depth - 1, eps, inv_mass, walk, rng)?;
    let edge = if eps > 0.0 { &first.plus } else { &first.minus };
    let second = build_tree(target, edge, depth - 1, eps, inv_mass, walk, rng)?;
    let log_w = log_sum_exp(first.log_w, second.log_w);
    let take_second = rng.random::<f64>() < (second.log_w - log_w).exp();
    let (left, right) = if eps > 0.0 { (first, second) } else { (second, first) };
    if !merged_ok((&left.minus, &left.plus), (&right.minus, &right.plus), inv_mass) {
        return None;
    }
    let sample = if take_second == (eps > 0.0) { right.sample } else { left.sample };
    Some(Tree { minus: left.minus, plus: right.plus, sample, log_w })
}

/// One NUTS transition from `state.point`; updates the point in place.
pub fn nuts_draw<T: LogDensity + ?Sized>(
    state: &mut ChainState,
    target: &T,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> DrawStats {
    let inv_mass = &state.inv_mass;
    let eps = state.epsilon;
    let mut start = state.point.clone();
    start.r = sample_momentum(inv_mass, rng);
    let h0 = start.hamiltonian(inv_mass);

    if max_depth == 0 {
        let next = leapfrog(target, &start, eps, inv_mass);
        let h1 = next.hamiltonian(inv_mass);
        let accept = (h0 - h1).exp().min(1.0);
        let divergent = h1 - h0 > MAX_DELTA_H;
        let moved = rng.random::<f64>() < accept;
        state.point = if moved { next } else { start };
        return DrawStats {
            divergent,
            tree_depth: 0,
            n_leapfrog: 1,
            accept_stat: accept,
            energy: if moved { h1 } else { h0 },
            step_size: eps,
        };
    }

    let mut walk = Walk { h0, n_leapfrog: 0, sum_metro: 0.0, divergent: false };
    let mut minus = start.clone();
    let mut plus = start.clone();
    let mut sample = start;
    let mut log_w = 0.0;
    let mut depth = 0;
    while depth < max_depth {
        let forward = rng.random::<f64>() > 0.5;
        let (edge, step) = if forward { (&plus, eps) } else { (&minus, -eps) };
        let Some(tree) = build_tree(target, edge, depth, step, inv_mass, &mut walk, rng) else {
            break;
        };
        depth += 1;
        if tree.log_w > log_w || rng.random::<f64>() < (tree.log_w - log_w).exp() {
            sample = tree.sample;
        }
        log_w = log_sum_exp(log_w, tree.log_w);
        let ok = if forward {
            let ok = merged_ok((&minus, &plus), (&tree.minus, &tree.plus), inv_mass);
            plus = tree.plus;
            ok
        } else {
            let ok = merged_ok((&tree.minus, &tree.plus), (&minus, &plus), inv_mass);
            minus = tree.minus;
            ok
        };
        if !ok {
            break;
        }
    }
    let energy = sample.hamiltonian(inv_mass);
    state.point = sample;
    DrawStats {
        divergent: walk.divergent,
        tree_depth: depth,
        n_leapfrog: walk.n_leapfrog,
        accept_stat: if walk.n_leapfrog > 0 { walk.sum_metro / walk.n_leapfrog as f64 } else { 0.0 },
        energy,
        step_size: eps,
    }
}

/// End indices (exclusive) of the metric adaptation windows. Warmups
/// shorter than 20 iterations adapt the step size only.
pub fn metric_windows(n_warmup: usize) -> Vec<usize> {
    const BASE: usize = 25;
    if n_warmup < 20 {
        return Vec::new();
    }
    let init = n_warmup * 15 / 100;
    let slow_end = n_warmup - n_warmup / 10;
    if slow_end <= init {
        return Vec::new();
    }
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = BASE.min(slow_end - init);
    loop {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        if end == slow_end {
            return ends;
        }
        start = end;
        size *= 2;
    }
}

#[derive(Debug, Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    /// Variance shrunk towards 1e-3, as in Stan.
    fn regularized(&self) -> Option<Vec<f64>> {
        if self.n < 3.0 {
            return None;
        }
        let n = self.n;
        Some(self.m2.iter().map(|m2| (n / (n + 5.0)) * (m2 / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0))).collect())
    }
}

/// Draws of all chains; `draws[c]` is row-major `n_kept x dim`.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSamples {
    pub param_names: Vec<String>,
    pub n_chains: usize,
    pub n_kept: usize,
    /// Constrained draws.
    pub draws: Vec<Vec<f64>>,
    /// Unconstrained draws, same layout.
    pub unconstrained: Vec<Vec<f64>>,
    pub stats: Vec<Vec<DrawStats>>,
    pub step_size: Vec<f64>,
    pub inv_mass: Vec<Vec<f64>>,
    pub warmup_divergences: Vec<usize>,
}

impl PosteriorSamples {
    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let d = self.dim();
        &self.draws[chain][iter * d..(iter + 1) * d]
    }

    pub fn unconstrained_draw(&self, chain: usize, iter: usize) -> &[f64] {
        let d = self.dim();
        &self.unconstrained[chain][iter * d..(iter + 1) * d]
    }

    /// One parameter's draws, `chains x iterations`.
    pub fn param(&self, k: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.draws.iter().map(|c| c.iter().skip(k).step_by(d).copied().collect()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// All constrained draws, chain by chain.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        let d = self.dim();
        self.draws.iter().flat_map(move |c| c.chunks_exact(d))
    }

    pub fn iter_unconstrained(&self) -> impl Iterator<Item = &[f64]> {
        let d = self.dim();
        self.unconstrained.iter().flat_map(move |c| c.chunks_exact(d))
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_kept
    }

    pub fn n_divergent(&self) -> usize {
        self.stats.iter().flatten().filter(|s| s.divergent).count()
    }

    pub fn divergent_fraction(&self) -> f64 {
        self.n_divergent() as f64 / self.n_draws().max(1) as f64
    }

    pub fn mean_accept_stat(&self) -> f64 {
        let all: Vec<f64> = self.stats.iter().flatten().map(|s| s.accept_stat).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

struct ChainOutput {
    draws: Vec<f64>,
    unconstrained: Vec<f64>,
    stats: Vec<DrawStats>,
    step_size: f64,
    inv_mass: Vec<f64>,
    warmup_divergences: usize,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn initial_point<T: LogDensity + ?Sized>(
    target: &T,
    jitter: f64,
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Point, SamplerError> {
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let mut z = target.initial_point(rng);
        for v in z.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += jitter * n;
        }
        let point = Point::new(target, z, vec![0.0; target.dim()]);
        if point.logp.is_finite() && point.grad.iter().all(|g| g.is_finite()) {
            return Ok(point);
        }
    }
    Err(SamplerError::Init { chain, attempts: ATTEMPTS })
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, chain: usize) -> Result<ChainOutput, SamplerError> {
    let mut rng = chain_rng(cfg.seed, chain);
    let dim = target.dim();
    let point = initial_point(target, cfg.init_jitter, chain, &mut rng)?;
    let inv_mass = vec![1.0; dim];
    let epsilon = find_reasonable_epsilon(target, &point.z, 1.0, &inv_mass, &mut rng)?;
    let mut state = ChainState { point, epsilon, inv_mass, adapt: DualAveraging::new(epsilon) };

    let windows = metric_windows(cfg.n_warmup);
    let init_end = cfg.n_warmup * 15 / 100;
    let slow_end = windows.last().copied().unwrap_or(init_end);
    let mut welford = Welford::default();
    let mut warmup_divergences = 0;

    let n_kept = cfg.n_kept();
    let mut draws = Vec::with_capacity(n_kept * dim);
    let mut unconstrained = Vec::with_capacity(n_kept * dim);
    let mut stats = Vec::with_capacity(n_kept);

    for i in 0..cfg.n_iter {
        let s = nuts_draw(&mut state, target, cfg.max_tree_depth, &mut rng);
        if i < cfg.n_warmup {
            warmup_divergences += s.divergent as usize;
            state.epsilon = state.adapt.update(s.accept_stat, cfg.target_accept);
            if i >= init_end && i < slow_end {
                welford.push(&state.point.z);
                if windows.contains(&(i + 1)) {
                    if let Some(var) = welford.regularized() {
                        state.inv_mass = var;
                    }
                    welford = Welford::default();
                    state.epsilon =
                        find_reasonable_epsilon(target, &state.point.z, state.epsilon, &state.inv_mass, &mut rng)?;
                    state.adapt = DualAveraging::new(state.epsilon);
                }
            }
            if i + 1 == cfg.n_warmup {
                if warmup_divergences == cfg.n_warmup {
                    return Err(SamplerError::AllDivergent {
                        chain,
                        step_size: state.epsilon,
                        inv_mass: state.inv_mass.clone(),
                    });
                }
                if state.adapt.counter > 0.0 {
                    state.epsilon = state.adapt.final_epsilon();
                }
            }
        } else if (i - cfg.n_warmup).is_multiple_of(cfg.thin) {
            draws.extend(target.constrain(&state.point.z));
            unconstrained.extend_from_slice(&state.point.z);
            stats.push(DrawStats { step_size: state.epsilon, ..s });
        }
    }
    Ok(ChainOutput { draws, unconstrained, stats, step_size: state.epsilon, inv_mass: state.inv_mass, warmup_divergences })
}

/// Run `cfg.n_chains` independent chains, one thread each.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig) -> Result<PosteriorSamples, SamplerError> {
    cfg.validate()?;
    let outputs: Vec<Result<ChainOutput, SamplerError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.n_chains).map(|c| scope.spawn(move || run_chain(target, cfg, c))).collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let mut samples = PosteriorSamples {
        param_names: target.param_names(),
        n_chains: cfg.n_chains,
        n_kept: cfg.n_kept(),
        draws: Vec::new(),
        unconstrained: Vec::new(),
        stats: Vec::new(),
        step_size: Vec::new(),
        inv_mass: Vec::new(),
        warmup_divergences: Vec::new(),
    };
    for out in outputs {
        let out = out?;
        samples.draws.push(out.draws);
        samples.unconstrained.push(out.unconstrained);
        samples.stats.push(out.stats);
        samples.step_size.push(out.step_size);
        samples.inv_mass.push(out.inv_mass);
        samples.warmup_divergences.push(out.warmup_divergences);
    }
    Ok(samples)
}
