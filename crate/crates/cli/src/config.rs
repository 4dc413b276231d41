//! Flat `key = value` pipeline configuration.
//!
//! Values come from the built-in defaults, then the config file, then
//! `--set` flags, later sources winning. Every key is known up front; an
//! unknown key or a value that does not parse is rejected before any stage
//! runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use cograph::eval::{geometric_grid, Reduction};
use cograph::features::{FeatureGroup, FeatureSpec};
use cograph::ingest::SyntheticConfig;
use cograph::irm::IrmHyperParams;
use cograph::logreg::TrainOptions;

use crate::error::{CliError, CliResult};

/// `(key, default, description)`. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("workdir", "work", "directory holding every stage's artifacts"),
    ("log", "", "transaction log (TSV); defaults to <workdir>/log.tsv"),
    ("seed", "1", "seed for every randomized stage"),
    ("workers", "", "worker threads; results do not depend on it"),
    (
        "test_day",
        "",
        "YYYY-MM-DD held out for testing; defaults to the last day in the log",
    ),
    (
        "top_users",
        "",
        "keep this many users with the most URLs; defaults to all",
    ),
    ("min_unique_users", "1", "drop URLs seen by fewer kept users"),
    ("reducer", "irm", "comma list of irm, svd, nmf"),
    ("irm.k_max", "100", "truncation level for both modes"),
    ("irm.sweeps", "100", "Gibbs sweeps"),
    ("irm.alpha1", "1", "user-mode concentration"),
    ("irm.alpha2", "1", "URL-mode concentration"),
    (
        "irm.beta_pos",
        "1",
        "Beta prior on link probabilities, positive pseudo-count",
    ),
    (
        "irm.beta_neg",
        "1",
        "Beta prior on link probabilities, negative pseudo-count",
    ),
    ("svd.k", "10", "rank"),
    ("svd.max_iter", "50", "power iterations"),
    ("svd.tol", "1e-10", "relative singular value change to stop at"),
    ("nmf.k", "10", "rank"),
    ("nmf.max_iter", "500", "multiplicative update rounds"),
    ("nmf.tol", "1e-5", "relative objective change to stop at"),
    ("features", "f1,f2,f3,f4", "feature groups to encode (f1..f8)"),
    ("lambda_f1", "1", "L1 weight on f1 columns (train)"),
    ("lambda_f2", "1", "L1 weight on f2 columns (train)"),
    ("lambda_rest", "1", "L1 weight on f3..f8 columns (train)"),
    ("owlqn.memory", "10", "L-BFGS history length"),
    ("owlqn.max_iter", "500", "iteration cap"),
    ("owlqn.tol", "1e-6", "relative objective change to stop at"),
    ("owlqn.grad_tol", "1e-9", "pseudo-gradient max-norm to stop at"),
    (
        "grid_f1",
        "geom:0.01,1.4,29",
        "tune grid for lambda_f1: comma list or geom:low,factor,n",
    ),
    ("grid_f2", "geom:0.01,1.4,29", "tune grid for lambda_f2"),
    ("grid_rest", "geom:0.01,1.4,29", "tune grid for lambda_rest"),
    ("tune.with_f2", "true", "also tune the f1+f2 models"),
    ("listen", "127.0.0.1:7070", "serve address"),
    (
        "serve.duration_s",
        "0",
        "stop serving after this many seconds; 0 waits for an interrupt",
    ),
    (
        "serve.bundle",
        "",
        "bundle directory; defaults to <workdir>/train/bundle",
    ),
];

/// Prefix for keys forwarded to the synthetic generator.
pub const SYNTH_PREFIX: &str = "synth.";

pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("synth.n_users", "users"),
    ("synth.n_urls", "URLs"),
    ("synth.k_user", "planted user clusters"),
    ("synth.k_url", "planted URL clusters"),
    ("synth.density_in", "edge probability inside diagonal blocks"),
    ("synth.density_out", "edge probability elsewhere"),
    ("synth.ctr", "block CTRs as rows `a,b;c,d`"),
    ("synth.n_impressions", "impressions on top of one view per edge"),
    ("synth.n_banners", "banners"),
    ("synth.n_days", "days; the last is the test day"),
    ("synth.start_day", "first day, YYYY-MM-DD"),
    ("synth.seed", "generator seed; defaults to `seed`"),
];

/// Raw values after layering, before parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.trim();
        let known = KEYS.iter().any(|(k, _, _)| *k == key) || SYNTH_KEYS.iter().any(|(k, _)| *k == key);
        if !known {
            return Err(CliError::Config(format!("unknown key {key:?} (see `cograph keys`)")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// `key=value` as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Lines of `key = value`; `#` starts a comment.
    pub fn merge_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Irm,
    Svd,
    Nmf,
}

impl Reducer {
    pub fn name(self) -> &'static str {
        match self {
            Reducer::Irm => "irm",
            Reducer::Svd => "svd",
            Reducer::Nmf => "nmf",
        }
    }

    pub fn reduction(self) -> Reduction {
        match self {
            Reducer::Irm => Reduction::irm(),
            Reducer::Svd => Reduction::svd(),
            Reducer::Nmf => Reduction::nmf(),
        }
    }

    pub fn of_group(g: FeatureGroup) -> Option<Reducer> {
        use FeatureGroup::*;
        match g {
            F1 | F2 => None,
            F3 | F4 => Some(Reducer::Irm),
            F5 | F6 => Some(Reducer::Svd),
            F7 | F8 => Some(Reducer::Nmf),
        }
    }
}

/// Parsed and validated configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub raw: RawConfig,
    pub workdir: PathBuf,
    pub log: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
    pub test_day: Option<NaiveDate>,
    pub top_users: usize,
    pub min_unique_users: usize,
    pub reducers: Vec<Reducer>,
    pub irm: IrmHyperParams,
    pub irm_sweeps: usize,
    pub svd_k: usize,
    pub svd_max_iter: usize,
    pub svd_tol: f64,
    pub nmf_k: usize,
    pub nmf_max_iter: usize,
    pub nmf_tol: f64,
    pub features: FeatureSpec,
    pub lambda_f1: f64,
    pub lambda_f2: f64,
    pub lambda_rest: f64,
    pub train: TrainOptions,
    pub grid_f1: Vec<f64>,
    pub grid_f2: Vec<f64>,
    pub grid_rest: Vec<f64>,
    pub tune_with_f2: bool,
    pub listen: String,
    pub serve_duration_s: f64,
    pub bundle: PathBuf,
    pub synthetic: SyntheticConfig,
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> CliResult<T> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn optional<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> CliResult<Option<T>> {
    if raw.get(key).is_empty() {
        Ok(None)
    } else {
        parse(raw, key).map(Some)
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(key: &str, v: T) -> CliResult<T> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{key} must be positive, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> CliResult<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!(
            "{key} must be a finite non-negative number, got {v}"
        )))
    }
}

/// `0.1,1,10` or `geom:low,factor,n`.
pub fn parse_grid(key: &str, s: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Config(format!("{key}: bad grid {s:?}"));
    let grid = if let Some(spec) = s.strip_prefix("geom:") {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let [low, factor, n] = parts[..] else {
            return Err(bad());
        };
        let low: f64 = low.parse().map_err(|_| bad())?;
        let factor: f64 = factor.parse().map_err(|_| bad())?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if !(low > 0.0 && factor > 0.0) {
            return Err(bad());
        }
        geometric_grid(low, factor, n)
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    for &l in &grid {
        non_negative(key, l)?;
    }
    Ok(grid)
}

impl PipelineConfig {
    pub fn from_raw(raw: RawConfig) -> CliResult<Self> {
        let workdir = PathBuf::from(raw.get("workdir"));
        if workdir.as_os_str().is_empty() {
            return Err(CliError::Config("workdir must not be empty".into()));
        }
        let log = match raw.get("log") {
            "" => workdir.join("log.tsv"),
            p => PathBuf::from(p),
        };
        let bundle = match raw.get("serve.bundle") {
            "" => workdir.join("train").join("bundle"),
            p => PathBuf::from(p),
        };
        let seed: u64 = parse(&raw, "seed")?;
        let workers = optional::<usize>(&raw, "workers")?
            .map(|w| positive("workers", w))
            .transpose()?;
        let test_day = match raw.get("test_day") {
            "" => None,
            d => {
                Some(NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| CliError::Config(format!("test_day: {e}")))?)
            }
        };
        let top_users = match optional::<usize>(&raw, "top_users")? {
            Some(n) => positive("top_users", n)?,
            None => usize::MAX,
        };
        let min_unique_users = positive("min_unique_users", parse(&raw, "min_unique_users")?)?;

        let mut reducers = Vec::new();
        for name in raw.get("reducer").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let r = match name {
                "irm" => Reducer::Irm,
                "svd" => Reducer::Svd,
                "nmf" => Reducer::Nmf,
                _ => return Err(CliError::Config(format!("reducer: unknown reducer {name:?}"))),
            };
            if !reducers.contains(&r) {
                reducers.push(r);
            }
        }

        let k_max = parse::<usize>(&raw, "irm.k_max")?;
        let irm = IrmHyperParams {
            alpha1: parse(&raw, "irm.alpha1")?,
            alpha2: parse(&raw, "irm.alpha2")?,
            beta_pos: parse(&raw, "irm.beta_pos")?,
            beta_neg: parse(&raw, "irm.beta_neg")?,
            ..IrmHyperParams::with_truncation(k_max)
        };
        irm.validate().map_err(|e| CliError::Config(format!("irm: {e}")))?;

        let features =
            FeatureSpec::parse(raw.get("features")).map_err(|e| CliError::Config(format!("features: {e}")))?;
        for &g in features.groups() {
            if let Some(r) = Reducer::of_group(g) {
                if !reducers.contains(&r) {
                    return Err(CliError::Config(format!(
                        "features: {g} needs reducer {} which is not in `reducer`",
                        r.name()
                    )));
                }
            }
        }

        let train = TrainOptions {
            memory: positive("owlqn.memory", parse(&raw, "owlqn.memory")?)?,
            max_iter: positive("owlqn.max_iter", parse(&raw, "owlqn.max_iter")?)?,
            tol: non_negative("owlqn.tol", parse(&raw, "owlqn.tol")?)?,
            grad_tol: non_negative("owlqn.grad_tol", parse(&raw, "owlqn.grad_tol")?)?,
        };

        let mut synthetic = SyntheticConfig {
            seed,
            ..Default::default()
        };
        for (key, _) in SYNTH_KEYS {
            let v = raw.get(key);
            if !v.is_empty() {
                synthetic
                    .apply(&key[SYNTH_PREFIX.len()..], v)
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        if raw.get("synth.ctr").is_empty() && (synthetic.k_user, synthetic.k_url) != (2, 2) {
            synthetic.ctr_by_block =
                cograph::ingest::ctr_spread(synthetic.k_user, synthetic.k_url, 0.002, 0.05, synthetic.seed);
        }

        Ok(PipelineConfig {
            workdir,
            log,
            seed,
            workers,
            test_day,
            top_users,
            min_unique_users,
            reducers,
            irm,
            irm_sweeps: positive("irm.sweeps", parse(&raw, "irm.sweeps")?)?,
            svd_k: positive("svd.k", parse(&raw, "svd.k")?)?,
            svd_max_iter: positive("svd.max_iter", parse(&raw, "svd.max_iter")?)?,
            svd_tol: non_negative("svd.tol", parse(&raw, "svd.tol")?)?,
            nmf_k: positive("nmf.k", parse(&raw, "nmf.k")?)?,
            nmf_max_iter: positive("nmf.max_iter", parse(&raw, "nmf.max_iter")?)?,
            nmf_tol: non_negative("nmf.tol", parse(&raw, "nmf.tol")?)?,
            features,
            lambda_f1: non_negative("lambda_f1", parse(&raw, "lambda_f1")?)?,
            lambda_f2: non_negative("lambda_f2", parse(&raw, "lambda_f2")?)?,
            lambda_rest: non_negative("lambda_rest", parse(&raw, "lambda_rest")?)?,
            train,
            grid_f1: parse_grid("grid_f1", raw.get("grid_f1"))?,
            grid_f2: parse_grid("grid_f2", raw.get("grid_f2"))?,
            grid_rest: parse_grid("grid_rest", raw.get("grid_rest"))?,
            tune_with_f2: parse(&raw, "tune.with_f2")?,
            listen: raw.get("listen").to_string(),
            serve_duration_s: non_negative("serve.duration_s", parse(&raw, "serve.duration_s")?)?,
            bundle,
            synthetic,
            raw,
        })
    }

    /// Effective settings recorded in manifests; paths and worker count
    /// are left out since they do not affect results.
    pub fn params(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .raw
            .values()
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "workdir" | "log" | "workers" | "serve.bundle" | "listen"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.insert("synth.resolved".into(), format!("{:?}", self.synthetic));
        out
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.workdir.join(stage)
    }
}
