//! Yield tables: CSV ingestion, seeded splitting and synthetic generation.
//!
//! The CSV schema is `crop,N,P,steepness,soil,weather,yield`. Lines starting
//! with `#` are provenance comments and are ignored on read.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{build_design, MeanSpec, ModelError, ModelKind, ResponseVariant};

pub const CSV_HEADER: [&str; 7] = ["crop", "N", "P", "steepness", "soil", "weather", "yield"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: unknown {factor} level `{label}`")]
    UnknownLevel { line: u64, factor: Factor, label: String },
    #[error("header must be {expected:?}, found {found:?}")]
    Header { expected: Vec<String>, found: Vec<String> },
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The three categorical inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    Steepness,
    Soil,
    Weather,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Steepness, Factor::Soil, Factor::Weather];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Steepness => "steepness",
            Factor::Soil => "soil",
            Factor::Weather => "weather",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn default_levels(self) -> usize {
        match self {
            Factor::Steepness => 4,
            Factor::Soil => 5,
            Factor::Weather => 6,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| DataError::Config(format!("unknown factor `{s}`")))
    }
}

/// Declared level labels per factor. The first label is the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub levels: [Vec<String>; 3],
}

impl Schema {
    pub fn with_counts(counts: [usize; 3]) -> Self {
        Schema { levels: counts.map(|k| (1..=k).map(|i| i.to_string()).collect()) }
    }

    pub fn levels(&self, factor: Factor) -> &[String] {
        &self.levels[factor.index()]
    }
}

impl Default for Schema {
    fn default() -> Self {
        Schema::with_counts(Factor::ALL.map(Factor::default_levels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub n: f64,
    pub p: f64,
    /// Level labels for steepness, soil and weather.
    pub levels: [String; 3],
    pub y: f64,
}

impl Row {
    pub fn level(&self, factor: Factor) -> &str {
        &self.levels[factor.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    File(PathBuf),
    Synthetic(u64),
    Split { parent: Box<Provenance>, seed: u64, part: String },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::File(p) => write!(f, "file({})", p.display()),
            Provenance::Synthetic(seed) => write!(f, "synthetic({seed})"),
            Provenance::Split { parent, seed, part } => write!(f, "{part}-split({parent}, seed={seed})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub crop: String,
    pub rows: Vec<Row>,
    pub schema: Schema,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn max_yield(&self) -> f64 {
        self.rows.iter().map(|r| r.y).fold(f64::NEG_INFINITY, f64::max)
    }

    fn subset(&self, idx: &[usize], provenance: Provenance) -> Dataset {
        Dataset {
            crop: self.crop.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            schema: self.schema.clone(),
            provenance,
        }
    }

    /// Mean spec for the MB model on this dataset, with the factor design
    /// built from this dataset's rows when `factor` is given.
    pub fn mb_spec(&self, variant: ResponseVariant, factor: Option<Factor>) -> Result<MeanSpec, DataError> {
        let design = factor
            .map(|f| {
                let column: Vec<&str> = self.rows.iter().map(|r| r.level(f)).collect();
                build_design(f.name(), &column, self.schema.levels(f))
            })
            .transpose()?;
        Ok(MeanSpec::new(ModelKind::MitscherlichBaule, variant, design)?)
    }

    /// Rebuild `spec`'s factor design (if any) against this dataset's rows.
    pub fn rebind(&self, spec: &MeanSpec) -> Result<MeanSpec, DataError> {
        match spec.factor() {
            None => Ok(spec.clone()),
            Some(design) => {
                let factor: Factor = design.factor_name.parse()?;
                let column: Vec<&str> = self.rows.iter().map(|r| r.level(factor)).collect();
                let rebuilt = build_design(factor.name(), &column, &design.levels)?;
                Ok(MeanSpec::new(spec.kind(), spec.variant(), Some(rebuilt))?)
            }
        }
    }
}

/// Result of reading a CSV file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Rows discarded because N or P was zero.
    pub dropped_zero: usize,
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Loaded, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut loaded = read_csv(file, schema)?;
    loaded.dataset.provenance = Provenance::File(path.to_path_buf());
    Ok(loaded)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Loaded, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(DataError::Header {
            expected: CSV_HEADER.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let mut crop: Option<String> = None;
    let mut rows = Vec::new();
    let mut dropped_zero = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| DataError::Malformed { line, message };
        if record.len() != CSV_HEADER.len() {
            return Err(malformed(format!("expected 7 fields, found {}", record.len())));
        }
        let number = |i: usize| -> Result<f64, DataError> {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| malformed(format!("{} is not a number: `{}`", CSV_HEADER[i], &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(malformed(format!("{} is not finite", CSV_HEADER[i])))
            }
        };
        let (n, p, y) = (number(1)?, number(2)?, number(6)?);
        if n < 0.0 || p < 0.0 {
            return Err(malformed("negative fertilizer level".to_string()));
        }
        match &crop {
            None => crop = Some(record[0].to_string()),
            Some(c) if c != &record[0] => {
                return Err(malformed(format!("mixed crops `{c}` and `{}`", &record[0])));
            }
            Some(_) => {}
        }
        let mut levels: [String; 3] = Default::default();
        for factor in Factor::ALL {
            let label = &record[3 + factor.index()];
            if !schema.levels(factor).iter().any(|l| l == label) {
                return Err(DataError::UnknownLevel { line, factor, label: label.to_string() });
            }
            levels[factor.index()] = label.to_string();
        }
        if n == 0.0 || p == 0.0 {
            dropped_zero += 1;
            continue;
        }
        rows.push(Row { n, p, levels, y });
    }
    Ok(Loaded {
        dataset: Dataset {
            crop: crop.unwrap_or_default(),
            rows,
            schema: schema.clone(),
            provenance: Provenance::File(PathBuf::new()),
        },
        dropped_zero,
    })
}

/// Write `data` as CSV. Each `comments` entry becomes a `# ` line before the header.
pub fn write_csv<W: Write>(data: &Dataset, comments: &[String], mut out: W) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: PathBuf::from("<output>"), source };
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for r in &data.rows {
        // `{}` on f64 prints the shortest representation that round-trips.
        wtr.write_record([
            data.crop.clone(),
            format!("{}", r.n),
            format!("{}", r.p),
            r.levels[0].clone(),
            r.levels[1].clone(),
            r.levels[2].clone(),
            format!("{}", r.y),
        ])?;
    }
    wtr.flush().map_err(io)?;
    Ok(())
}

/// Seeded partition into `(elicitation, train)`; the elicitation part has
/// `ceil(ratio * n)` rows. Both parts keep the original row order.
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let n = data.len();
    let k = ((ratio * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let (mut head, mut tail) = (idx[..k].to_vec(), idx[k..].to_vec());
    head.sort_unstable();
    tail.sort_unstable();
    let tag = |part: &str| Provenance::Split {
        parent: Box::new(data.provenance.clone()),
        seed,
        part: part.to_string(),
    };
    Ok((data.subset(&head, tag("elicitation")), data.subset(&tail, tag("train"))))
}

/// `count` equally spaced levels on (0, 100]: `100/count, .., 100`.
pub fn grid_levels(count: usize) -> Vec<f64> {
    (1..=count).map(|k| 100.0 * k as f64 / count as f64).collect()
}

/// Truth and layout for synthetic yield tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub crop: String,
    /// True `(beta0, .., beta4)`; with a factor, `beta0` is the baseline max yield.
    pub beta: [f64; 5],
    /// Which brackets the truth uses.
    pub variant: ResponseVariant,
    /// Noise variance.
    pub sigma: f64,
    pub n_grid: usize,
    pub p_grid: usize,
    pub replicates: usize,
    pub level_counts: [usize; 3],
    /// Factor crossed with the fertilizer grid; other factors sit at baseline.
    pub factor: Option<Factor>,
    /// Additive max-yield shift of each non-baseline level.
    pub shifts: Vec<f64>,
    /// Additive `beta1` shift per non-baseline level (misfit injection).
    pub beta1_shifts: Vec<f64>,
    pub seed: u64,
}

impl GeneratorConfig {
    fn preset(crop: &str, beta: [f64; 5], sigma: f64) -> Self {
        GeneratorConfig {
            crop: crop.to_string(),
            beta,
            variant: ResponseVariant::NP,
            sigma,
            n_grid: 13,
            p_grid: 13,
            replicates: 1,
            level_counts: Factor::ALL.map(Factor::default_levels),
            factor: None,
            shifts: Vec::new(),
            beta1_shifts: Vec::new(),
            seed: 0,
        }
    }

    pub fn spring_barley() -> Self {
        Self::preset("spring-barley", [5.005, 0.4778, 0.019, 7.610, 0.00009], 0.17)
    }

    pub fn winter_barley() -> Self {
        Self::preset("winter-barley", [8.948, 1.102, 0.011, 7.617, 0.0002], 0.071)
    }

    pub fn silage() -> Self {
        Self::preset("silage", [16.271, 0.838, 0.016, 13.03, 0.005], 0.127)
    }

    /// N-only winter barley with the steepness factor shifting max yield.
    pub fn winter_barley_steepness() -> Self {
        GeneratorConfig {
            variant: ResponseVariant::NOnly,
            factor: Some(Factor::Steepness),
            shifts: vec![-0.083, 0.006, 0.281],
            ..Self::preset("winter-barley", [7.916, 2.361, 0.035, 0.0, 0.0], 0.145)
        }
    }

    pub fn from_preset(name: &str) -> Option<Self> {
        match name {
            "spring-barley" => Some(Self::spring_barley()),
            "winter-barley" => Some(Self::winter_barley()),
            "silage" => Some(Self::silage()),
            "winter-barley-steepness" => Some(Self::winter_barley_steepness()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        let needed: &[usize] = self.variant.mb_slots();
        if needed.iter().any(|&j| !(self.beta[j] > 0.0 && self.beta[j].is_finite())) {
            return bad("true beta values must be positive");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        if self.n_grid == 0 || self.p_grid == 0 || self.replicates == 0 {
            return bad("grid sizes and replicates must be positive");
        }
        if self.level_counts.contains(&0) {
            return bad("level counts must be positive");
        }
        if let Some(f) = self.factor {
            let k = self.level_counts[f.index()];
            if self.shifts.len() != k - 1 {
                return bad("shifts needs one value per non-baseline level");
            }
            if !self.beta1_shifts.is_empty() && self.beta1_shifts.len() != k - 1 {
                return bad("beta1_shifts needs one value per non-baseline level");
            }
        } else if !self.shifts.is_empty() || !self.beta1_shifts.is_empty() {
            return bad("shifts given without a factor");
        }
        Ok(())
    }

    /// Parse the `key = value` format; unknown keys are errors, `#` starts a comment.
    /// Keys absent from the text keep the values of `base`.
    pub fn parse(text: &str, base: GeneratorConfig) -> Result<Self, DataError> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| DataError::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, found `{line}`")))?;
            let float = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| err(format!("bad integer `{v}`")));
            let list = |v: &str| -> Result<Vec<f64>, DataError> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|x| float(x.trim())).collect()
            };
            match key {
                "crop" => cfg.crop = value.to_string(),
                "beta0" | "beta1" | "beta2" | "beta3" | "beta4" => {
                    let j = key[4..].parse::<usize>().unwrap_or(0);
                    cfg.beta[j] = float(value)?;
                }
                "variant" => cfg.variant = value.parse().map_err(|e: ModelError| err(e.to_string()))?,
                "sigma" => cfg.sigma = float(value)?,
                "n_grid" => cfg.n_grid = int(value)?,
                "p_grid" => cfg.p_grid = int(value)?,
                "replicates" => cfg.replicates = int(value)?,
                "steepness_levels" => cfg.level_counts[0] = int(value)?,
                "soil_levels" => cfg.level_counts[1] = int(value)?,
                "weather_levels" => cfg.level_counts[2] = int(value)?,
                "factor" => {
                    cfg.factor = match value {
                        "none" | "" => None,
                        v => Some(v.parse()?),
                    }
                }
                "shifts" => cfg.shifts = list(value)?,
                "beta1_shifts" => cfg.beta1_shifts = list(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| err(format!("bad seed `{value}`")))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!("crop = {}\n", self.crop);
        for (j, b) in self.beta.iter().enumerate() {
            s.push_str(&format!("beta{j} = {b}\n"));
        }
        s.push_str(&format!(
            "variant = {}\nsigma = {}\nn_grid = {}\np_grid = {}\nreplicates = {}\n",
            self.variant, self.sigma, self.n_grid, self.p_grid, self.replicates
        ));
        s.push_str(&format!(
            "steepness_levels = {}\nsoil_levels = {}\nweather_levels = {}\n",
            self.level_counts[0], self.level_counts[1], self.level_counts[2]
        ));
        s.push_str(&format!(
            "factor = {}\nshifts = {}\nbeta1_shifts = {}\nseed = {}\n",
            self.factor.map_or("none", Factor::name),
            join(&self.shifts),
            join(&self.beta1_shifts),
            self.seed
        ));
        s
    }

    /// Noise-free mean yield for a grid cell at the given factor level index.
    pub fn true_mean(&self, n: f64, p: f64, level: usize) -> f64 {
        let shift = |v: &[f64]| if level == 0 || v.is_empty() { 0.0 } else { v[level - 1] };
        let b = &self.beta;
        let max_yield = b[0] + shift(&self.shifts);
        let b1 = b[1] + shift(&self.beta1_shifts);
        let n_bracket = -(-b1 - b[2] * n).exp_m1();
        let p_bracket = -(-b[3] - b[4] * p).exp_m1();
        match self.variant {
            ResponseVariant::NOnly => max_yield * n_bracket,
            ResponseVariant::POnly => max_yield * p_bracket,
            ResponseVariant::NP => max_yield * n_bracket * p_bracket,
        }
    }
}

/// Full-factorial synthetic table: factor levels × N grid × P grid × replicates.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let schema = Schema::with_counts(cfg.level_counts);
    let n_levels = cfg.factor.map_or(1, |f| cfg.level_counts[f.index()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd = cfg.sigma.sqrt();
    let mut rows = Vec::with_capacity(n_levels * cfg.n_grid * cfg.p_grid * cfg.replicates);
    for level in 0..n_levels {
        let mut levels: [String; 3] = Factor::ALL.map(|f| schema.levels(f)[0].clone());
        if let Some(f) = cfg.factor {
            levels[f.index()] = schema.levels(f)[level].clone();
        }
        for &n in &grid_levels(cfg.n_grid) {
            for &p in &grid_levels(cfg.p_grid) {
                let mu = cfg.true_mean(n, p, level);
                for _ in 0..cfg.replicates {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    rows.push(Row { n, p, levels: levels.clone(), y: mu + sd * z });
                }
            }
        }
    }
    Ok(Dataset {
        crop: cfg.crop.clone(),
        rows,
        schema,
        provenance: Provenance::Synthetic(cfg.seed),
    })
}
