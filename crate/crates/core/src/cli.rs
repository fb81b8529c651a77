//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{generate, load_csv, write_csv, Dataset, Factor, GeneratorConfig, Schema};
use crate::diagnostics::{write_density_csv, DiagnosticsReport};
use crate::model::{MeanSpec, ModelKind, ResponseVariant};
use crate::nls::{default_init, fit_nls, NlsConfig, NlsResult};
use crate::nuts::{DrawStats, PosteriorSamples, SamplerConfig};
use crate::predict::{predict, read_samples_csv, write_predictions_csv, write_samples_csv, SpecTag};
use crate::selection::{compare, BridgeConfig, Candidate};
use crate::workflow::{fit_mb, Fit, FitRequest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_QUALITY: i32 = 3;

/// Largest tolerated fraction of divergent post-warmup transitions.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.10;

#[derive(Debug, Parser)]
#[command(name = "yieldbayes", version, about = "Bayesian Mitscherlich-Baule crop yield modelling")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Random seed; required by generate, fit and compare.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files, created if absent.
    #[arg(long, global = true, env = "YIELDBAYES_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Format of report files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic yield table.
    Generate(GenerateArgs),
    /// Elicit priors, sample the MB posterior and summarize it.
    Fit(FitArgs),
    /// Fit several MB variants and compare them.
    Compare(CompareArgs),
    /// Mean curve, credible and predictive bands from a samples file.
    Predict(PredictArgs),
    /// Least-squares fits of the classical yield models.
    Nls(NlsArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// spring-barley, winter-barley, silage or winter-barley-steepness.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Generator config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Iterations per chain including warmup.
    #[arg(long, default_value_t = 10_000)]
    iter: usize,
    #[arg(long, default_value_t = 5_000)]
    warmup: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Only the MB model is sampled; see `nls` for the others.
    #[arg(long, default_value = "mb")]
    model: String,
    #[arg(long, default_value = "np")]
    variant: String,
    #[arg(long, default_value = "none")]
    factor: String,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated MB variants.
    #[arg(long, default_value = "n,p,np")]
    variants: String,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Samples file written by `fit`.
    #[arg(long)]
    samples: PathBuf,
    /// Data the samples were fitted to; supplies the factor levels and the default grid.
    #[arg(long)]
    data: PathBuf,
    /// Grid values, e.g. `n=10,50,100` or `p=40`; repeatable. Defaults to the observed levels.
    #[arg(long)]
    grid: Vec<String>,
    /// Band quantiles, e.g. `q=0.025,0.975`.
    #[arg(long, default_value = "q=0.025,0.975")]
    level: String,
}

#[derive(Debug, Args)]
struct NlsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated model names, or `all`.
    #[arg(long, default_value = "all")]
    model: String,
    /// MB response variant.
    #[arg(long, default_value = "np")]
    variant: String,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, message: message.to_string() }
}

type CmdResult = Result<(), Failure>;

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Context::new(&args, &cli.global);
    let result = fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", ctx.out_dir.display())))
        .and_then(|_| match &cli.command {
            Command::Generate(a) => cmd_generate(&ctx, a),
            Command::Fit(a) => cmd_fit(&ctx, a),
            Command::Compare(a) => cmd_compare(&ctx, a),
            Command::Predict(a) => cmd_predict(&ctx, a),
            Command::Nls(a) => cmd_nls(&ctx, a),
        });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

struct Context {
    command_line: String,
    seed: Option<u64>,
    out_dir: PathBuf,
    format: Format,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    seed: Option<u64>,
    version: &'a str,
}

impl Context {
    fn new(args: &[OsString], g: &Global) -> Self {
        let mut words = vec!["yieldbayes".to_string()];
        words.extend(args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()));
        Context { command_line: words.join(" "), seed: g.seed, out_dir: g.out_dir.clone(), format: g.format }
    }

    fn seed(&self) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| usage("--seed is required for this command"))
    }

    fn header(&self) -> Vec<String> {
        vec![
            format!("yieldbayes {}", env!("CARGO_PKG_VERSION")),
            format!("command: {}", self.command_line),
            format!("seed: {}", self.seed.map_or("none".to_string(), |s| s.to_string())),
        ]
    }

    fn provenance(&self) -> Provenance<'_> {
        Provenance { command: &self.command_line, seed: self.seed, version: env!("CARGO_PKG_VERSION") }
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(name)
    }

    fn create(&self, name: impl AsRef<Path>) -> Result<(PathBuf, BufWriter<File>), Failure> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        Ok((path, BufWriter::new(file)))
    }

    /// Write a CSV file with the provenance header followed by `body`.
    fn write_csv_file(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<PathBuf, Failure> {
        let (path, mut out) = self.create(name)?;
        let io = |e: std::io::Error| usage(format!("cannot write {}: {e}", path.display()));
        for c in self.header() {
            writeln!(out, "# {c}").map_err(io)?;
        }
        body(&mut out).and_then(|_| out.flush()).map_err(io)?;
        Ok(path)
    }

    /// Write `{"provenance": .., <key>: value}` as pretty JSON.
    fn write_json_file<T: Serialize>(&self, name: &str, key: &str, value: &T) -> Result<PathBuf, Failure> {
        let (path, mut out) = self.create(name)?;
        let mut doc = serde_json::Map::new();
        doc.insert("provenance".into(), serde_json::to_value(self.provenance()).map_err(usage)?);
        doc.insert(key.into(), serde_json::to_value(value).map_err(usage)?);
        serde_json::to_writer_pretty(&mut out, &serde_json::Value::Object(doc)).map_err(usage)?;
        writeln!(out).and_then(|_| out.flush()).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    let loaded = load_csv(path, &Schema::default()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if loaded.dropped_zero > 0 {
        println!("dropped {} rows with N = 0 or P = 0", loaded.dropped_zero);
    }
    Ok(loaded.dataset)
}

fn parse_variant(s: &str) -> Result<ResponseVariant, Failure> {
    s.trim().parse().map_err(usage)
}

fn parse_factor(s: &str) -> Result<Option<Factor>, Failure> {
    match s {
        "none" => Ok(None),
        f => f.parse().map(Some).map_err(usage),
    }
}

fn sampler_config(a: &SamplerArgs, seed: u64) -> Result<SamplerConfig, Failure> {
    let cfg = SamplerConfig {
        n_chains: a.chains,
        n_iter: a.iter,
        n_warmup: a.warmup,
        target_accept: a.target_accept,
        max_tree_depth: a.max_depth,
        seed,
        thin: a.thin,
        ..SamplerConfig::default()
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_generate(ctx: &Context, a: &GenerateArgs) -> CmdResult {
    let seed = ctx.seed()?;
    let base = match (&a.preset, &a.config) {
        (Some(name), _) => GeneratorConfig::from_preset(name).ok_or_else(|| {
            usage(format!(
                "unknown preset `{name}` (expected spring-barley, winter-barley, silage or winter-barley-steepness)"
            ))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            GeneratorConfig::parse(&text, GeneratorConfig::winter_barley()).map_err(usage)?
        }
        (None, None) => return Err(usage("either --preset or --config is required")),
    };
    let cfg = GeneratorConfig { seed, ..base };
    let data = generate(&cfg).map_err(usage)?;
    let (path, out) = ctx.create(&a.out)?;
    write_csv(&data, &ctx.header(), out).map_err(usage)?;
    println!("wrote {} rows to {}", data.len(), path.display());
    Ok(())
}

fn write_fit_outputs(ctx: &Context, fit: &Fit, tag: SpecTag, prefix: &str) -> Result<PathBuf, Failure> {
    let samples_name = format!("{prefix}samples.csv");
    let (path, out) = ctx.create(&samples_name)?;
    write_samples_csv(&fit.samples, tag, &ctx.header(), out)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    write_report(ctx, &fit.report, prefix)?;
    let stats_path = ctx.write_csv_file(&format!("{prefix}sampler.csv"), |out| write_stats_csv(&fit.samples, out))?;
    ctx.write_csv_file(&format!("{prefix}density.csv"), |out| write_density_csv(&fit.samples, 512, out))?;
    ctx.write_csv_file(&format!("{prefix}autocorrelation.csv"), |out| fit.report.write_autocorrelation_csv(out))?;
    Ok(stats_path)
}

fn write_report(ctx: &Context, report: &DiagnosticsReport, prefix: &str) -> Result<(), Failure> {
    match ctx.format {
        Format::Csv => ctx.write_csv_file(&format!("{prefix}summary.csv"), |out| report.write_summary_csv(out))?,
        Format::Json => ctx.write_json_file(&format!("{prefix}summary.json"), "summary", report)?,
    };
    Ok(())
}

/// Per-draw sampler statistics: `chain,iteration,divergent,tree_depth,n_leapfrog,accept_stat,energy,step_size`.
fn write_stats_csv<W: Write>(samples: &PosteriorSamples, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "chain,iteration,divergent,tree_depth,n_leapfrog,accept_stat,energy,step_size")?;
    for (c, chain) in samples.stats.iter().enumerate() {
        for (i, s) in chain.iter().enumerate() {
            let DrawStats { divergent, tree_depth, n_leapfrog, accept_stat, energy, step_size } = s;
            writeln!(
                out,
                "{},{},{},{tree_depth},{n_leapfrog},{accept_stat},{energy},{step_size}",
                c + 1,
                i + 1,
                *divergent as u8
            )?;
        }
    }
    Ok(())
}

fn print_fit(id: &str, fit: &Fit) {
    println!("model {id}: {}", fit.spec.describe());
    println!("elicitation rows {}, training rows {}", fit.elicitation.len(), fit.train.len());
    for w in &fit.elicited.warnings {
        println!("warning: {w}");
    }
    let p = &fit.elicited.priors;
    let names = ["beta0", "beta1", "beta2", "beta3", "beta4"];
    for &j in fit.spec.mb_slots() {
        println!("prior {}: Ga({}, {})", names[j], p.beta[j].shape, p.beta[j].rate);
    }
    println!("prior sigma: Ga({}, {})", p.sigma.shape, p.sigma.rate);
    print!("{}", fit.report.table());
    println!(
        "divergent transitions: {} of {} ({:.2}%)",
        fit.samples.n_divergent(),
        fit.samples.n_draws(),
        100.0 * fit.samples.divergent_fraction()
    );
}

fn divergence_gate(id: &str, fit: &Fit, stats_path: &Path) -> CmdResult {
    let frac = fit.samples.divergent_fraction();
    if frac > MAX_DIVERGENT_FRACTION {
        return Err(Failure {
            code: EXIT_QUALITY,
            message: format!(
                "{id}: {:.1}% of transitions diverged (limit {:.0}%); see {}",
                100.0 * frac,
                100.0 * MAX_DIVERGENT_FRACTION,
                stats_path.display()
            ),
        });
    }
    Ok(())
}

fn cmd_fit(ctx: &Context, a: &FitArgs) -> CmdResult {
    let seed = ctx.seed()?;
    if a.model.parse::<ModelKind>().map_err(usage)? != ModelKind::MitscherlichBaule {
        return Err(usage("fit samples only the mb model; use `nls` for the classical models"));
    }
    let tag = SpecTag { variant: parse_variant(&a.variant)?, factor: parse_factor(&a.factor)? };
    let data = load(&a.data)?;
    let req = FitRequest::new(tag.variant, tag.factor, sampler_config(&a.sampler, seed)?);
    let fit = fit_mb(&data, &req).map_err(usage)?;
    print_fit(&a.variant, &fit);
    let stats_path = write_fit_outputs(ctx, &fit, tag, "")?;
    divergence_gate(&a.variant, &fit, &stats_path)
}

fn cmd_compare(ctx: &Context, a: &CompareArgs) -> CmdResult {
    let seed = ctx.seed()?;
    let data = load(&a.data)?;
    let cfg = sampler_config(&a.sampler, seed)?;
    let mut fits = Vec::new();
    for token in a.variants.split(',') {
        let variant = parse_variant(token)?;
        if fits.iter().any(|(v, _): &(ResponseVariant, Fit)| *v == variant) {
            return Err(usage(format!("variant `{token}` listed twice")));
        }
        let fit = fit_mb(&data, &FitRequest::new(variant, None, cfg.clone())).map_err(usage)?;
        print_fit(variant.token(), &fit);
        let tag = SpecTag { variant, factor: None };
        let stats_path = write_fit_outputs(ctx, &fit, tag, &format!("{variant}_"))?;
        divergence_gate(variant.token(), &fit, &stats_path)?;
        fits.push((variant, fit));
    }
    let train = &fits[0].1.train;
    let candidates: Vec<Candidate> = fits
        .iter()
        .map(|(v, f)| Candidate {
            id: v.token().to_string(),
            data: &f.train,
            spec: f.spec.clone(),
            priors: f.elicited.priors.clone(),
            samples: &f.samples,
        })
        .collect();
    let report = compare(&candidates, train, &BridgeConfig { seed, ..BridgeConfig::default() }).map_err(usage)?;
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let path = match ctx.format {
        Format::Csv => ctx.write_csv_file("comparison.csv", |out| report.write_csv(out))?,
        Format::Json => ctx.write_json_file("comparison.json", "comparison", &report)?,
    };
    let mut table = Vec::new();
    report.write_csv(&mut table).map_err(usage)?;
    print!("{}", String::from_utf8_lossy(&table));
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad {what} value `{v}`"))))
        .collect()
}

fn parse_grid(specs: &[String], data: &Dataset) -> Result<Vec<(f64, f64)>, Failure> {
    let observed = |f: fn(&crate::data::Row) -> f64| {
        let mut v: Vec<f64> = data.rows.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let mut ns = observed(|r| r.n);
    let mut ps = observed(|r| r.p);
    for s in specs {
        match s.split_once('=') {
            Some(("n", v)) => ns = parse_list(v, "grid")?,
            Some(("p", v)) => ps = parse_list(v, "grid")?,
            _ => return Err(usage(format!("bad --grid `{s}` (expected n=.. or p=..)"))),
        }
    }
    if ns.iter().chain(&ps).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(usage("grid values must be finite and nonnegative"));
    }
    Ok(ns.iter().flat_map(|&n| ps.iter().map(move |&p| (n, p))).collect())
}

fn cmd_predict(ctx: &Context, a: &PredictArgs) -> CmdResult {
    let seed = ctx.seed.unwrap_or(1);
    let file = File::open(&a.samples).map_err(|e| usage(format!("{}: {e}", a.samples.display())))?;
    let table = read_samples_csv(BufReader::new(file)).map_err(usage)?;
    let data = load(&a.data)?;
    let spec = data.mb_spec(table.tag.variant, table.tag.factor).map_err(usage)?;
    let q = match a.level.strip_prefix("q=").map(|v| parse_list(v, "level")) {
        Some(Ok(v)) if v.len() == 2 => (v[0], v[1]),
        _ => return Err(usage(format!("bad --level `{}` (expected q=lo,hi)", a.level))),
    };
    let grid = parse_grid(&a.grid, &data)?;
    let rows = predict(&spec, &table.param_names, &table.draws, &grid, q, seed).map_err(usage)?;
    let path = match ctx.format {
        Format::Csv => {
            let (path, out) = ctx.create("predictions.csv")?;
            write_predictions_csv(&rows, &ctx.header(), out).map_err(usage)?;
            path
        }
        Format::Json => ctx.write_json_file("predictions.json", "predictions", &rows)?,
    };
    println!("wrote {} prediction rows to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct NlsRow {
    model: String,
    converged: bool,
    iterations: usize,
    rse: f64,
    sse: f64,
    estimates: Vec<(String, f64)>,
}

fn cmd_nls(ctx: &Context, a: &NlsArgs) -> CmdResult {
    let data = load(&a.data)?;
    let kinds: Vec<ModelKind> = if a.model == "all" {
        ModelKind::ALL.to_vec()
    } else {
        a.model.split(',').map(|m| m.trim().parse().map_err(usage)).collect::<Result<_, _>>()?
    };
    let variant = parse_variant(&a.variant)?;
    let config = NlsConfig { max_iter: a.max_iter, ..NlsConfig::default() };
    let mut rows = Vec::new();
    println!("{:<10} {:>10} {:>10} {:>9} {:>6}", "model", "rse", "sse", "converged", "iter");
    for kind in kinds {
        let spec = if kind == ModelKind::MitscherlichBaule { MeanSpec::mb(variant) } else { MeanSpec::classical(kind) };
        let fit: NlsResult = fit_nls(&data, &spec, &default_init(&spec, &data), &config).map_err(usage)?;
        println!("{:<10} {:>10.5} {:>10.4} {:>9} {:>6}", kind.token(), fit.rse, fit.sse, fit.converged, fit.iterations);
        rows.push(NlsRow {
            model: kind.token().to_string(),
            converged: fit.converged,
            iterations: fit.iterations,
            rse: fit.rse,
            sse: fit.sse,
            estimates: spec.param_names().into_iter().zip(fit.coefficients().iter().copied()).collect(),
        });
    }
    let path = match ctx.format {
        Format::Csv => ctx.write_csv_file("nls.csv", |out| {
            writeln!(out, "model,parameter,estimate,rse,sse,converged,iterations")?;
            for r in &rows {
                for (name, v) in &r.estimates {
                    writeln!(out, "{},{name},{v},{},{},{},{}", r.model, r.rse, r.sse, r.converged, r.iterations)?;
                }
            }
            Ok(())
        })?,
        Format::Json => ctx.write_json_file("nls.json", "fits", &rows)?,
    };
    println!("wrote {}", path.display());
    Ok(())
}
