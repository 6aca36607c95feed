//! Experiment drivers behind the `mhmgt` binary: config parsing, seeded
//! stream splitting, versioned CSV/JSON outputs and the five verbs.
//!
//! Every output file starts with a provenance block (schema, verb, seed,
//! resolved config, SHA-256 of the inputs). Wall-clock quantities go only to
//! files whose names start with `timing`; everything else is a pure function
//! of seed and config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diagnostics::{calibrate, effective_size, efficiency_report, ess_per_dim, fee, mixing_index_from, ChainTrace, EfficiencyReport, MIN_ESS_LEN};
use crate::error::{Error, Result};
use crate::gibbs::{hb_gibbs, run_block_chain, simulate_hb, BetaSampler, BlockPartition, HbConfig, HbGroup, HbHyper, HbModelSpec, HbSimulation, HbTrace};
use crate::mgt::{run_chain, MgtConfig};
use crate::model::{DesignMatrix, DifferentiableTarget, GaussianPrior, LogisticTarget, PoissonLogRate};
use crate::mvn::SymMatrix;
use crate::slice::{slice_gibbs_chain, SliceConfig};
use crate::theorem::{random_instances, run_campaign, CampaignReport};

/// Independent child stream `stream` of the master `seed`.
pub fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Flat `key = value` configuration. `#` starts a comment; blank lines are
/// ignored. Keys may contain dots. Duplicate keys and keys never read by the
/// selected verb are errors.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, Entry>,
    resolved: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-') {
                return Err(Error::Config {
                    line,
                    message: format!("invalid key `{k}`"),
                });
            }
            if v.is_empty() {
                return Err(Error::Config {
                    line,
                    message: format!("empty value for `{k}`"),
                });
            }
            if let Some(prev) = entries.get(k).map(|e: &Entry| e.line) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{k}` (first set on line {prev})"),
                });
            }
            entries.insert(
                k.to_string(),
                Entry {
                    value: v.to_string(),
                    line,
                    used: false,
                },
            );
        }
        Ok(Self {
            entries,
            resolved: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    /// Typed value with a default; the resolved value is echoed in outputs.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match self.take(key) {
            Some((raw, line)) => raw.parse::<T>().map_err(|e| Error::Config {
                line,
                message: format!("`{key}`: cannot parse `{raw}`: {e}"),
            })?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.take(key) {
            Some((raw, line)) => {
                let v = raw.parse::<T>().map_err(|e| Error::Config {
                    line,
                    message: format!("`{key}`: cannot parse `{raw}`: {e}"),
                })?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        let v = match self.take(key) {
            Some((raw, line)) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse::<T>().map_err(|e| Error::Config {
                        line,
                        message: format!("`{key}`: cannot parse element `{}`: {e}", s.trim()),
                    })
                })
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        self.resolved
            .insert(key.to_string(), v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        Ok(v)
    }

    /// Errors on the first key that the verb did not read.
    pub fn finish(&self) -> Result<()> {
        match self.entries.iter().filter(|(_, e)| !e.used).min_by_key(|(_, e)| e.line) {
            Some((k, e)) => Err(Error::Config {
                line: e.line,
                message: format!("unknown key `{k}` for this command"),
            }),
            None => Ok(()),
        }
    }

    /// Resolved values, defaults included.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }
}

fn choice<'a>(cfg: &KvConfig, key: &str, value: &str, allowed: &[&'a str]) -> Result<&'a str> {
    allowed.iter().copied().find(|a| *a == value).ok_or_else(|| Error::Config {
        line: cfg.line_of(key),
        message: format!("`{key}` must be one of {allowed:?}, got `{value}`"),
    })
}

// ---------------------------------------------------------------- outputs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Chain,
    Benchmark,
    Hb,
    Theorem,
    MixingScan,
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Chain => "chain",
            Verb::Benchmark => "benchmark",
            Verb::Hb => "hb",
            Verb::Theorem => "theorem",
            Verb::MixingScan => "mixing-scan",
        }
    }
}

/// Command-line options shared by all verbs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub quick: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// False when the experiment ran but its own checks failed (e.g. a
    /// theorem campaign with failing instances).
    pub ok: bool,
    pub message: String,
}

/// Provenance shared by all files of one invocation.
struct Provenance {
    verb: &'static str,
    seed: u64,
    config: BTreeMap<String, String>,
    input_hash: String,
    out: PathBuf,
    files: Vec<PathBuf>,
}

const SCHEMA_PREFIX: &str = "mhmgt.";

impl Provenance {
    fn new(verb: Verb, seed: u64, cfg: &KvConfig, inputs: &[Vec<u8>], out: &Path) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(verb.name().as_bytes());
        h.update(format!("\nseed={seed}\n").as_bytes());
        for (k, v) in cfg.resolved() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        for bytes in inputs {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        Ok(Self {
            verb: verb.name(),
            seed,
            config: cfg.resolved().clone(),
            input_hash: hex::encode(h.finalize()),
            out: out.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn config_line(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    fn csv_preamble(&self, schema: &str) -> String {
        format!(
            "# schema: {SCHEMA_PREFIX}{schema}/1\n# verb: {}\n# seed: {}\n# config: {}\n# input-sha256: {}\n",
            self.verb,
            self.seed,
            self.config_line(),
            self.input_hash
        )
    }

    fn meta(&self, schema: &str) -> Value {
        json!({
            "schema": format!("{SCHEMA_PREFIX}{schema}/1"),
            "verb": self.verb,
            "seed": self.seed,
            "config": self.config,
            "input_sha256": self.input_hash,
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn write_csv(&mut self, name: &str, schema: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut s = self.csv_preamble(schema);
        s.push_str(&header.join(","));
        s.push('\n');
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write(name, &s)
    }

    fn write_json(&mut self, name: &str, schema: &str, body: Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("meta".into(), self.meta(schema));
        match body {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(obj)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Shortest round-trip representation; stable across runs.
fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn xs_header(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}{i}"))
}

// ---------------------------------------------------------------- data files

/// Splits a versioned CSV into its data lines, checking the schema line (if
/// present) and the exact column header.
fn versioned_rows<'a>(file: &str, text: &'a str, schema: &str, expect_header: &dyn Fn(usize) -> Vec<String>) -> Result<(usize, Vec<(usize, Vec<&'a str>)>)> {
    let schema_err = |message: String| Error::Schema {
        file: file.to_string(),
        message,
    };
    let mut header: Option<Vec<&str>> = None;
    let mut rows = Vec::new();
    let want = format!("{SCHEMA_PREFIX}{schema}/1");
    for (idx, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            if let Some(s) = c.trim().strip_prefix("schema:") {
                if s.trim() != want {
                    return Err(schema_err(format!("expected schema `{want}`, found `{}`", s.trim())));
                }
            }
            continue;
        }
        let cols: Vec<&str> = t.split(',').map(str::trim).collect();
        match &header {
            None => header = Some(cols),
            Some(h) => {
                if cols.len() != h.len() {
                    return Err(schema_err(format!("line {}: {} fields, header has {}", idx + 1, cols.len(), h.len())));
                }
                rows.push((idx + 1, cols));
            }
        }
    }
    let h = header.ok_or_else(|| schema_err("missing header line".into()))?;
    let width = h.len();
    let expected = expect_header(width);
    if h != expected {
        return Err(schema_err(format!("header `{}` does not match expected `{}`", h.join(","), expected.join(","))));
    }
    Ok((width, rows))
}

fn parse_field<T: FromStr>(file: &str, line: usize, s: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Schema {
        file: file.to_string(),
        message: format!("line {line}: cannot parse `{s}`"),
    })
}

/// Logistic data: header `y,x1..xK`.
pub fn read_logistic_csv(path: &Path) -> Result<(DesignMatrix, Vec<u8>, Vec<u8>)> {
    let text = read_text(path)?;
    let file = path.display().to_string();
    let (width, rows) = versioned_rows(&file, &text, "logistic-data", &|w| {
        std::iter::once("y".to_string()).chain(xs_header("x", w.saturating_sub(1))).collect()
    })?;
    if width < 2 || rows.is_empty() {
        return Err(Error::Schema {
            file,
            message: "need at least one covariate and one row".into(),
        });
    }
    let mut y = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * (width - 1));
    for (line, cols) in &rows {
        y.push(parse_field::<u8>(&file, *line, cols[0])?);
        for c in &cols[1..] {
            data.push(parse_field::<f64>(&file, *line, c)?);
        }
    }
    let x = DesignMatrix::new(rows.len(), width - 1, data)?;
    Ok((x, y, text.into_bytes()))
}

/// HB data (`group,y,x1..xK`) and upper design (`group,z1..zL`). Groups are
/// numbered `0..J` and must all be present.
pub fn read_hb_csv(data: &Path, upper: &Path) -> Result<(Vec<HbGroup>, DesignMatrix, Vec<Vec<u8>>)> {
    let text = read_text(data)?;
    let file = data.display().to_string();
    let (width, rows) = versioned_rows(&file, &text, "hb-data", &|w| {
        ["group".to_string(), "y".to_string()].into_iter().chain(xs_header("x", w.saturating_sub(2))).collect()
    })?;
    let utext = read_text(upper)?;
    let ufile = upper.display().to_string();
    let (uwidth, urows) = versioned_rows(&ufile, &utext, "hb-upper", &|w| {
        std::iter::once("group".to_string()).chain(xs_header("z", w.saturating_sub(1))).collect()
    })?;
    if width < 3 || uwidth < 2 || urows.is_empty() {
        return Err(Error::Schema {
            file,
            message: "need covariates and an upper design".into(),
        });
    }
    let jn = urows.len();
    let mut zdata = Vec::with_capacity(jn * (uwidth - 1));
    for (j, (line, cols)) in urows.iter().enumerate() {
        if parse_field::<usize>(&ufile, *line, cols[0])? != j {
            return Err(Error::Schema {
                file: ufile,
                message: format!("line {line}: upper design rows must list groups 0..{jn} in order"),
            });
        }
        for c in &cols[1..] {
            zdata.push(parse_field::<f64>(&ufile, *line, c)?);
        }
    }
    let z = DesignMatrix::new(jn, uwidth - 1, zdata)?;
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); jn];
    let mut ys: Vec<Vec<u8>> = vec![Vec::new(); jn];
    for (line, cols) in &rows {
        let g = parse_field::<usize>(&file, *line, cols[0])?;
        if g >= jn {
            return Err(Error::Schema {
                file,
                message: format!("line {line}: group {g} has no upper-design row"),
            });
        }
        ys[g].push(parse_field::<u8>(&file, *line, cols[1])?);
        for c in &cols[2..] {
            xs[g].push(parse_field::<f64>(&file, *line, c)?);
        }
    }
    let groups = xs
        .into_iter()
        .zip(ys)
        .enumerate()
        .map(|(j, (x, y))| {
            if y.is_empty() {
                return Err(Error::Schema {
                    file: file.clone(),
                    message: format!("group {j} has no observations"),
                });
            }
            Ok(HbGroup {
                x: DesignMatrix::new(y.len(), width - 2, x)?,
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((groups, z, vec![text.into_bytes(), utext.into_bytes()]))
}

fn logistic_rows(x: &DesignMatrix, y: &[u8]) -> Vec<Vec<String>> {
    (0..x.rows())
        .map(|i| std::iter::once(y[i].to_string()).chain(x.row(i).iter().map(|v| num(*v))).collect())
        .collect()
}

/// Simulated logistic-regression data set with standard normal covariates
/// and true coefficients drawn from `N(0, 0.5²)`.
pub fn simulate_logistic<R: Rng + ?Sized>(n_obs: usize, n_cov: usize, rng: &mut R) -> Result<(DesignMatrix, Vec<u8>, Vec<f64>)> {
    if n_obs == 0 || n_cov == 0 {
        return Err(Error::InvalidArgument("logistic simulation needs observations and covariates".into()));
    }
    let beta: Vec<f64> = (0..n_cov).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let x = DesignMatrix::random_normal(n_obs, n_cov, rng);
    let y = x
        .mul_vec(&beta)
        .into_iter()
        .map(|eta| u8::from(rng.random::<f64>() < crate::model::logistic(eta)))
        .collect();
    Ok((x, y, beta))
}

// ---------------------------------------------------------------- dispatch

/// Runs a verb: reads the config (if any), resolves the seed, runs the
/// experiment and writes all outputs under `opts.out`.
pub fn run_verb(verb: Verb, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = match &opts.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let cfg_seed: Option<u64> = cfg.get_opt("seed")?;
    let seed = opts.seed.or(cfg_seed).ok_or_else(|| {
        Error::InvalidArgument("a seed is required: pass --seed or set `seed` in the config".into())
    })?;
    cfg.resolved.insert("seed".into(), seed.to_string());
    cfg.resolved.insert("quick".into(), opts.quick.to_string());
    let base = opts.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default();
    match verb {
        Verb::Chain => cmd_chain(&mut cfg, seed, opts, &base),
        Verb::Benchmark => cmd_benchmark(&mut cfg, seed, opts),
        Verb::Hb => cmd_hb(&mut cfg, seed, opts, &base),
        Verb::Theorem => cmd_theorem(&mut cfg, seed, opts),
        Verb::MixingScan => cmd_mixing_scan(&mut cfg, seed, opts),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn outcome(prov: Provenance, ok: bool, message: String) -> RunOutcome {
    RunOutcome {
        files: prov.files,
        ok,
        message,
    }
}

// ---------------------------------------------------------------- chain

enum ChainTarget {
    Poisson(PoissonLogRate),
    Gaussian(GaussianPrior),
    Logistic(LogisticTarget),
}

impl ChainTarget {
    fn as_dyn(&self) -> &dyn DifferentiableTarget {
        match self {
            ChainTarget::Poisson(t) => t,
            ChainTarget::Gaussian(t) => t,
            ChainTarget::Logistic(t) => t,
        }
    }

    fn eta0(&self) -> Option<f64> {
        match self {
            ChainTarget::Poisson(t) => t.mode().ok().and_then(|m| mixing_index_from(t, m).ok()),
            ChainTarget::Gaussian(t) if t.dim() == 1 => mixing_index_from(t, t.mean()[0]).ok(),
            ChainTarget::Gaussian(_) => None,
            ChainTarget::Logistic(_) => None,
        }
    }
}

/// Random Gaussian target: precision `A Aᵀ / d + 0.5 I`, standard normal mean.
pub fn random_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<GaussianPrior> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let a: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut p = SymMatrix::zeros(dim);
    for r in 0..dim {
        for c in 0..=r {
            let s: f64 = (0..dim).map(|k| a[r * dim + k] * a[c * dim + k]).sum::<f64>() / dim as f64;
            p.set(r, c, s + if r == c { 0.5 } else { 0.0 });
        }
    }
    let mean = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    GaussianPrior::new(mean, p)
}

fn cmd_chain(cfg: &mut KvConfig, seed: u64, opts: &RunOptions, base: &Path) -> Result<RunOutcome> {
    let kind: String = cfg.get("target", "poisson".to_string())?;
    let kind = choice(cfg, "target", &kind, &["poisson", "gaussian", "logistic"])?;
    let mut inputs = Vec::new();
    let mut sim_rng = child_rng(seed, 0);
    let target = match kind {
        "poisson" => {
            let y: Vec<u64> = cfg.get_list("poisson.y", &[2])?;
            let rep: usize = cfg.get("poisson.replicate", 1)?;
            let data: Vec<u64> = (0..rep.max(1)).flat_map(|_| y.iter().copied()).collect();
            ChainTarget::Poisson(PoissonLogRate::new(&data)?)
        }
        "gaussian" => {
            let dim: usize = cfg.get("gaussian.dim", 3)?;
            ChainTarget::Gaussian(random_gaussian(dim, &mut sim_rng)?)
        }
        _ => {
            let (x, y) = match cfg.get_opt::<String>("logistic.data")? {
                Some(p) => {
                    let (x, y, bytes) = read_logistic_csv(&resolve(base, &p))?;
                    inputs.push(bytes);
                    (x, y)
                }
                None => {
                    let n: usize = cfg.get("logistic.n_obs", 1000)?;
                    let k: usize = cfg.get("logistic.n_cov", 10)?;
                    let (x, y, _) = simulate_logistic(n, k, &mut sim_rng)?;
                    (x, y)
                }
            };
            ChainTarget::Logistic(LogisticTarget::new(x, y)?)
        }
    };
    let t = target.as_dyn();
    let dim = t.dim();
    let x0: Vec<f64> = cfg.get_list("x0", &[0.0])?;
    let x0 = match x0.len() {
        1 => vec![x0[0]; dim],
        n if n == dim => x0,
        n => {
            return Err(Error::Config {
                line: cfg.line_of("x0"),
                message: format!("x0 has {n} values, target dimension is {dim}"),
            })
        }
    };
    let n_samples: usize = cfg.get("n_samples", if opts.quick { 200 } else { 1000 })?;
    let n_burnin: usize = cfg.get("n_burnin", 0)?;
    let n_newton: usize = cfg.get("n_newton", n_burnin / 2)?;
    let sampler: String = cfg.get("sampler", "mh-mgt".to_string())?;
    let sampler = choice(cfg, "sampler", &sampler, &["mh-mgt", "slice"])?;
    let block_size: usize = cfg.get("block_size", 0)?;
    let width: f64 = cfg.get("slice.width", 1.0)?;
    let max_stepout: usize = cfg.get("slice.max_stepout", 10)?;
    let calib_reps: usize = cfg.get("calibration_reps", 200)?;
    cfg.finish()?;

    let mut prov = Provenance::new(Verb::Chain, seed, cfg, &inputs, &opts.out)?;
    let mut rng = child_rng(seed, 1);
    let trace = match sampler {
        "mh-mgt" => {
            let mc = MgtConfig::new(n_burnin, n_samples, seed).with_newton(n_newton);
            if block_size > 0 && block_size < dim {
                run_block_chain(t, &BlockPartition::contiguous(dim, block_size)?, &x0, &mc, &mut rng)?
            } else {
                run_chain(t, &x0, &mc, &mut rng)?
            }
        }
        _ => {
            let sc = SliceConfig {
                width,
                max_stepout,
                seed,
            };
            slice_gibbs_chain(t, &x0, n_burnin, n_samples, &sc, &mut rng)?
        }
    };
    write_trace(&mut prov, &trace)?;

    let ess = ess_per_dim(&trace).ok();
    let summary = json!({
        "sampler": trace.meta.sampler,
        "target": kind,
        "dim": dim,
        "n_samples": trace.len(),
        "acceptance_rate": trace.acceptance_rate(),
        "mean": if trace.is_empty() { Value::Null } else { to_json(&trace.column_means()) },
        "ess": ess.as_ref().map(|e| e.iter().map(|v| v.value).collect::<Vec<_>>()),
        "ess_degenerate": ess.as_ref().map(|e| e.iter().map(|v| v.degenerate).collect::<Vec<_>>()),
        "recorded_cost": to_json(&trace.recorded_cost()),
        "burnin_cost": to_json(&trace.burnin_cost),
        "newton_evals": trace.newton_evals,
        "mh_steps": trace.mh_steps,
        "full_evals": trace.full_evals,
        "uncached_full_evals": trace.uncached_full_evals,
        "incidents": trace.incidents,
        "eta0": target.eta0(),
        "final_state": if trace.is_empty() { Value::Null } else { to_json(&trace.sample(trace.len() - 1)) },
    });
    prov.write_json("summary.json", "chain-summary", summary)?;

    let probe = if trace.is_empty() { x0.clone() } else { trace.column_means() };
    let calib = calibrate(t, &probe, calib_reps)?;
    let fee_summary = fee(&trace, Some(&calib))?;
    let eff = if ess.is_some() { efficiency_report(&trace, Some(&calib)).ok() } else { None };
    prov.write_json(
        "timing.json",
        "chain-timing",
        json!({
            "wall_time_s": trace.wall_time,
            "calibration": to_json(&calib),
            "fee": to_json(&fee_summary),
            "efficiency": eff.map(|e| to_json(&e)),
        }),
    )?;
    let msg = format!(
        "{} chain: {} samples, acceptance {}",
        trace.meta.sampler,
        trace.len(),
        trace.acceptance_rate().map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(outcome(prov, true, msg))
}

fn write_trace(prov: &mut Provenance, trace: &ChainTrace) -> Result<()> {
    let header: Vec<String> = std::iter::once("iter".to_string()).chain(xs_header("x", trace.dim)).collect();
    let rows: Vec<Vec<String>> = (0..trace.len())
        .map(|i| std::iter::once(i.to_string()).chain(trace.sample(i).iter().map(|v| num(*v))).collect())
        .collect();
    prov.write_csv("samples.csv", "samples", &header, &rows)?;
    let header: Vec<String> = ["iter", "accepted", "log_ratio", "n_value", "n_gradient", "n_hessian"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let rows: Vec<Vec<String>> = (0..trace.len())
        .map(|i| {
            let c = trace.cumulative_cost[i];
            vec![
                i.to_string(),
                u8::from(trace.accepted[i]).to_string(),
                trace.log_ratios.get(i).map_or("NA".into(), |r| num(*r)),
                c.n_value.to_string(),
                c.n_gradient.to_string(),
                c.n_hessian.to_string(),
            ]
        })
        .collect();
    prov.write_csv("steps.csv", "steps", &header, &rows)
}

// ---------------------------------------------------------------- benchmark

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkParams {
    pub n_obs: usize,
    pub n_cov: usize,
    pub runs: usize,
    pub n_burnin: usize,
    pub n_samples: usize,
    pub block_size: usize,
    pub widths: Vec<f64>,
    pub max_stepout: usize,
    pub pilot_samples: usize,
    pub calibration_reps: usize,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            n_obs: 1000,
            n_cov: 10,
            runs: 10,
            n_burnin: 100,
            n_samples: 1000,
            block_size: 5,
            widths: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            max_stepout: 10,
            pilot_samples: 300,
            calibration_reps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthTrial {
    pub width: f64,
    pub value_evals_per_sample: f64,
    pub mean_ess: f64,
    pub value_evals_per_effective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRun {
    pub run: usize,
    pub sampler: String,
    pub acceptance_rate: Option<f64>,
    pub mean_ess: f64,
    pub counters: crate::model::EvalCost,
    pub wall_time: f64,
    pub report: EfficiencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub params: BenchmarkParams,
    pub true_beta: Vec<f64>,
    pub sweep: Vec<WidthTrial>,
    pub chosen_width: f64,
    pub seconds_per_value_eval: f64,
    pub runs: Vec<BenchmarkRun>,
    pub mgt: EfficiencyReport,
    pub slice: EfficiencyReport,
    /// Slice FEE per effective sample over MH-MGT's.
    pub ratio: f64,
    #[serde(skip)]
    pub data: (DesignMatrix, Vec<u8>),
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Table-2 style comparison on simulated logistic data. Runs are sequential
/// so each timed chain has the machine to itself.
///
/// Streams: 0 data, 1 slice width sweep, `2 + 2r` MH-MGT run `r`,
/// `3 + 2r` slice run `r`.
pub fn run_benchmark(p: &BenchmarkParams, seed: u64) -> Result<BenchmarkResult> {
    if p.runs == 0 || p.n_samples < MIN_ESS_LEN || p.pilot_samples < MIN_ESS_LEN || p.widths.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs runs >= 1, enough samples and at least one width".into()));
    }
    let (x, y, true_beta) = simulate_logistic(p.n_obs, p.n_cov, &mut child_rng(seed, 0))?;
    let target = LogisticTarget::new(x.clone(), y.clone())?;
    let k = p.n_cov;
    let x0 = vec![0.0; k];

    let mut sweep = Vec::with_capacity(p.widths.len());
    let mut pilot_rng = child_rng(seed, 1);
    for &w in &p.widths {
        let sc = SliceConfig {
            width: w,
            max_stepout: p.max_stepout,
            seed,
        };
        let tr = slice_gibbs_chain(&target, &x0, p.n_burnin, p.pilot_samples, &sc, &mut pilot_rng)?;
        let ess = mean(&ess_per_dim(&tr)?.iter().map(|e| e.value).collect::<Vec<_>>());
        let per_sample = tr.recorded_cost().n_value as f64 / tr.len() as f64;
        sweep.push(WidthTrial {
            width: w,
            value_evals_per_sample: per_sample,
            mean_ess: ess,
            value_evals_per_effective: per_sample * tr.len() as f64 / ess,
        });
    }
    let chosen_width = sweep
        .iter()
        .min_by(|a, b| a.value_evals_per_effective.total_cmp(&b.value_evals_per_effective))
        .map(|t| t.width)
        .expect("non-empty sweep");

    let calib = calibrate(&target, &true_beta, p.calibration_reps)?;
    let partition = BlockPartition::contiguous(k, p.block_size.clamp(1, k))?;
    let mut runs = Vec::with_capacity(2 * p.runs);
    for r in 0..p.runs {
        let mc = MgtConfig::new(p.n_burnin, p.n_samples, seed);
        let mut rng = child_rng(seed, 2 + 2 * r as u64);
        let tr = if partition.len() == 1 {
            run_chain(&target, &x0, &mc, &mut rng)?
        } else {
            run_block_chain(&target, &partition, &x0, &mc, &mut rng)?
        };
        runs.push(bench_run(r, &tr, &calib)?);
        let sc = SliceConfig {
            width: chosen_width,
            max_stepout: p.max_stepout,
            seed,
        };
        let mut rng = child_rng(seed, 3 + 2 * r as u64);
        let tr = slice_gibbs_chain(&target, &x0, p.n_burnin, p.n_samples, &sc, &mut rng)?;
        runs.push(bench_run(r, &tr, &calib)?);
    }
    let pick = |name: &str| -> Vec<EfficiencyReport> { runs.iter().filter(|r| r.sampler == name).map(|r| r.report.clone()).collect() };
    let mgt = EfficiencyReport::average(&pick("mh-mgt")).or_else(|| EfficiencyReport::average(&pick("block-mh-mgt")));
    let mgt = mgt.expect("at least one MH-MGT run");
    let slice = EfficiencyReport::average(&pick("slice")).expect("at least one slice run");
    Ok(BenchmarkResult {
        params: p.clone(),
        true_beta,
        sweep,
        chosen_width,
        seconds_per_value_eval: calib.seconds_per_value_eval,
        ratio: slice.fee_per_effective / mgt.fee_per_effective,
        runs,
        mgt,
        slice,
        data: (x, y),
    })
}

fn bench_run(run: usize, tr: &ChainTrace, calib: &crate::diagnostics::CalibrationProfile) -> Result<BenchmarkRun> {
    let report = efficiency_report(tr, Some(calib))?;
    Ok(BenchmarkRun {
        run,
        sampler: tr.meta.sampler.clone(),
        acceptance_rate: tr.acceptance_rate(),
        mean_ess: mean(&report.ess_per_dim),
        counters: tr.recorded_cost(),
        wall_time: tr.wall_time,
        report,
    })
}

fn cmd_benchmark(cfg: &mut KvConfig, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    let d = BenchmarkParams::default();
    let p = BenchmarkParams {
        n_obs: cfg.get("n_obs", d.n_obs)?,
        n_cov: cfg.get("n_cov", d.n_cov)?,
        runs: cfg.get("runs", if opts.quick { 1 } else { d.runs })?,
        n_burnin: cfg.get("n_burnin", d.n_burnin)?,
        n_samples: cfg.get("n_samples", if opts.quick { 500 } else { d.n_samples })?,
        block_size: cfg.get("block_size", d.block_size)?,
        widths: cfg.get_list("slice.widths", &d.widths)?,
        max_stepout: cfg.get("slice.max_stepout", d.max_stepout)?,
        pilot_samples: cfg.get("pilot_samples", if opts.quick { 100 } else { d.pilot_samples })?,
        calibration_reps: cfg.get("calibration_reps", d.calibration_reps)?,
    };
    cfg.finish()?;
    let mut prov = Provenance::new(Verb::Benchmark, seed, cfg, &[], &opts.out)?;
    let res = run_benchmark(&p, seed)?;

    let (x, y) = &res.data;
    let header: Vec<String> = std::iter::once("y".to_string()).chain(xs_header("x", x.cols())).collect();
    prov.write_csv("data.csv", "logistic-data", &header, &logistic_rows(x, y))?;

    let header: Vec<String> = ["width", "value_evals_per_sample", "mean_ess", "value_evals_per_effective", "chosen"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let rows: Vec<Vec<String>> = res
        .sweep
        .iter()
        .map(|t| {
            vec![
                num(t.width),
                num(t.value_evals_per_sample),
                num(t.mean_ess),
                num(t.value_evals_per_effective),
                u8::from(t.width == res.chosen_width).to_string(),
            ]
        })
        .collect();
    prov.write_csv("width_sweep.csv", "width-sweep", &header, &rows)?;

    let header: Vec<String> = ["run", "sampler", "acceptance_rate", "mean_ess", "n_value", "n_gradient", "n_hessian"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let rows: Vec<Vec<String>> = res
        .runs
        .iter()
        .map(|r| {
            vec![
                r.run.to_string(),
                r.sampler.clone(),
                r.acceptance_rate.map_or("NA".into(), num),
                num(r.mean_ess),
                r.counters.n_value.to_string(),
                r.counters.n_gradient.to_string(),
                r.counters.n_hessian.to_string(),
            ]
        })
        .collect();
    prov.write_csv("runs.csv", "benchmark-runs", &header, &rows)?;

    let header: Vec<String> = ["run", "sampler", "wall_time_s", "fee_per_nominal", "effective_sampling_rate", "fee_per_effective"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let rows: Vec<Vec<String>> = res
        .runs
        .iter()
        .map(|r| {
            vec![
                r.run.to_string(),
                r.sampler.clone(),
                num(r.wall_time),
                num(r.report.fee_per_nominal),
                num(r.report.effective_sampling_rate),
                num(r.report.fee_per_effective),
            ]
        })
        .collect();
    prov.write_csv("timing_runs.csv", "benchmark-timing-runs", &header, &rows)?;

    let header: Vec<String> = ["metric", "univariate_slicer", "mh_mgt"].iter().map(ToString::to_string).collect();
    let rows = vec![
        vec!["FEE per nominal sample".into(), num(res.slice.fee_per_nominal), num(res.mgt.fee_per_nominal)],
        vec!["effective sampling rate".into(), num(res.slice.effective_sampling_rate), num(res.mgt.effective_sampling_rate)],
        vec!["FEE per effective sample".into(), num(res.slice.fee_per_effective), num(res.mgt.fee_per_effective)],
    ];
    prov.write_csv("timing_table.csv", "benchmark-table", &header, &rows)?;
    prov.write_json(
        "timing_summary.json",
        "benchmark-timing-summary",
        json!({
            "seconds_per_value_eval": res.seconds_per_value_eval,
            "slice": to_json(&res.slice),
            "mh_mgt": to_json(&res.mgt),
            "slice_over_mgt_fee_per_effective": res.ratio,
        }),
    )?;
    prov.write_json(
        "summary.json",
        "benchmark-summary",
        json!({
            "params": to_json(&p),
            "true_beta": res.true_beta,
            "chosen_width": res.chosen_width,
            "width_sweep": to_json(&res.sweep),
            "mean_ess": {
                "mh_mgt": mean(&res.mgt.ess_per_dim),
                "slice": mean(&res.slice.ess_per_dim),
            },
        }),
    )?;
    let msg = format!(
        "FEE per effective sample: slice {:.2}, MH-MGT {:.2} (ratio {:.2}); slice width {}",
        res.slice.fee_per_effective, res.mgt.fee_per_effective, res.ratio, res.chosen_width
    );
    Ok(outcome(prov, true, msg))
}

// ---------------------------------------------------------------- hb

#[derive(Debug, Clone, PartialEq)]
pub struct HbParams {
    pub sim: HbSimulation,
    pub hyper: HbHyper,
    pub n_burnin: usize,
    pub n_samples: usize,
    pub block_size: usize,
    pub slice: SliceConfig,
}

impl Default for HbParams {
    fn default() -> Self {
        Self {
            sim: HbSimulation {
                min_obs: 100,
                max_obs: 1000,
                ..HbSimulation::default()
            },
            hyper: HbHyper::default(),
            n_burnin: 500,
            n_samples: 1000,
            block_size: 5,
            slice: SliceConfig::default(),
        }
    }
}

/// Posterior summary of one scalar series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    /// `None` below the minimum ESS length.
    pub ess: Option<f64>,
    pub mcse: Option<f64>,
    pub q025: f64,
    pub q975: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Mean, sd, ESS, MCSE and central 95% interval; `None` for an empty series.
pub fn summarize(series: &[f64]) -> Option<ScalarSummary> {
    if series.is_empty() {
        return None;
    }
    let n = series.len() as f64;
    let m = series.iter().sum::<f64>() / n;
    let var = if series.len() > 1 { series.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let sd = var.sqrt();
    let ess = effective_size(series).ok().map(|e| e.value);
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(ScalarSummary {
        mean: m,
        sd,
        ess,
        mcse: ess.map(|e| if e > 0.0 { sd / e.sqrt() } else { f64::INFINITY }),
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    })
}

#[derive(Debug, Clone)]
pub struct HbResult {
    pub spec: HbModelSpec,
    pub truth: Option<crate::gibbs::HbTruth>,
    pub mgt: HbTrace,
    pub slice: HbTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HbComparison {
    /// Fraction of true `β` inside the MH-MGT 95% intervals.
    pub coverage: Option<f64>,
    /// Largest `|m_mgt − m_slice| / √(mcse_mgt² + mcse_slice²)`.
    pub max_z: Option<f64>,
    pub mean_ess_mgt: Option<f64>,
    pub mean_ess_slice: Option<f64>,
}

impl HbResult {
    /// Per-coefficient summaries, group-major.
    pub fn beta_summaries(trace: &HbTrace) -> Vec<Option<ScalarSummary>> {
        (0..trace.n_groups)
            .flat_map(|j| (0..trace.n_coef).map(move |k| (j, k)))
            .map(|(j, k)| summarize(&trace.beta_series(j, k)))
            .collect()
    }

    pub fn compare(&self) -> HbComparison {
        let a = Self::beta_summaries(&self.mgt);
        let b = Self::beta_summaries(&self.slice);
        let coverage = self.truth.as_ref().and_then(|t| {
            let inside: Option<Vec<bool>> = a
                .iter()
                .zip(&t.beta)
                .map(|(s, tb)| s.map(|s| s.q025 <= *tb && *tb <= s.q975))
                .collect();
            inside.filter(|v| !v.is_empty()).map(|v| v.iter().filter(|&&x| x).count() as f64 / v.len() as f64)
        });
        let zs: Option<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let (x, y) = ((*x)?, (*y)?);
                let se = (x.mcse?.powi(2) + y.mcse?.powi(2)).sqrt();
                Some((x.mean - y.mean).abs() / se)
            })
            .collect();
        let mean_ess = |v: &[Option<ScalarSummary>]| -> Option<f64> {
            let e: Option<Vec<f64>> = v.iter().map(|s| s.and_then(|s| s.ess)).collect();
            e.filter(|e| !e.is_empty()).map(|e| mean(&e))
        };
        HbComparison {
            coverage,
            max_z: zs.filter(|z| !z.is_empty()).map(|z| z.into_iter().fold(0.0, f64::max)),
            mean_ess_mgt: mean_ess(&a),
            mean_ess_slice: mean_ess(&b),
        }
    }
}

/// Runs both `β` samplers on the same data. Streams: 0 simulation,
/// 1 MH-MGT run, 2 slice run.
pub fn run_hb(p: &HbParams, data: Option<(Vec<HbGroup>, DesignMatrix)>, seed: u64) -> Result<HbResult> {
    let (spec, truth) = match data {
        Some((groups, z)) => (HbModelSpec::new(groups, z, p.hyper)?, None),
        None => {
            let (s, t) = simulate_hb(&p.sim, p.hyper, &mut child_rng(seed, 0))?;
            (s, Some(t))
        }
    };
    let mgt_cfg = HbConfig::new(p.n_burnin, p.n_samples, BetaSampler::Mgt { block_size: p.block_size }, seed);
    let mgt = hb_gibbs(&spec, &mgt_cfg, &mut child_rng(seed, 1))?;
    let slice_cfg = HbConfig::new(p.n_burnin, p.n_samples, BetaSampler::Slice(p.slice), seed);
    let slice = hb_gibbs(&spec, &slice_cfg, &mut child_rng(seed, 2))?;
    Ok(HbResult { spec, truth, mgt, slice })
}

fn summary_cells(s: &Option<ScalarSummary>) -> Vec<String> {
    match s {
        Some(s) => vec![
            num(s.mean),
            num(s.sd),
            s.ess.map_or("NA".into(), num),
            s.mcse.map_or("NA".into(), num),
            num(s.q025),
            num(s.q975),
        ],
        None => vec!["NA".into(); 6],
    }
}

fn cmd_hb(cfg: &mut KvConfig, seed: u64, opts: &RunOptions, base: &Path) -> Result<RunOutcome> {
    let d = HbParams::default();
    let data_path: Option<String> = cfg.get_opt("data")?;
    let upper_path: Option<String> = cfg.get_opt("upper")?;
    let p = HbParams {
        sim: HbSimulation {
            n_groups: cfg.get("groups", d.sim.n_groups)?,
            n_coef: cfg.get("coef", d.sim.n_coef)?,
            n_upper: cfg.get("upper_coef", d.sim.n_upper)?,
            min_obs: cfg.get("min_obs", d.sim.min_obs)?,
            max_obs: cfg.get("max_obs", d.sim.max_obs)?,
            sigma: cfg.get("sigma", d.sim.sigma)?,
            gamma_scale: cfg.get("gamma_scale", d.sim.gamma_scale)?,
        },
        hyper: HbHyper {
            a: cfg.get("prior.a", d.hyper.a)?,
            b: cfg.get("prior.b", d.hyper.b)?,
            lambda: cfg.get("prior.lambda", d.hyper.lambda)?,
        },
        n_burnin: cfg.get("n_burnin", if opts.quick { 100 } else { d.n_burnin })?,
        n_samples: cfg.get("n_samples", if opts.quick { 200 } else { d.n_samples })?,
        block_size: cfg.get("block_size", d.block_size)?,
        slice: SliceConfig {
            width: cfg.get("slice.width", d.slice.width)?,
            max_stepout: cfg.get("slice.max_stepout", d.slice.max_stepout)?,
            seed,
        },
    };
    cfg.finish()?;
    let (data, inputs) = match (data_path, upper_path) {
        (Some(dp), Some(up)) => {
            let (g, z, bytes) = read_hb_csv(&resolve(base, &dp), &resolve(base, &up))?;
            (Some((g, z)), bytes)
        }
        (None, None) => (None, Vec::new()),
        _ => {
            return Err(Error::Config {
                line: cfg.line_of("data").max(cfg.line_of("upper")),
                message: "`data` and `upper` must be given together".into(),
            })
        }
    };
    let mut prov = Provenance::new(Verb::Hb, seed, cfg, &inputs, &opts.out)?;
    let res = run_hb(&p, data, seed)?;
    let spec = &res.spec;

    let kn = spec.n_coef();
    let header: Vec<String> = ["group".to_string(), "y".to_string()].into_iter().chain(xs_header("x", kn)).collect();
    let rows: Vec<Vec<String>> = spec
        .groups()
        .iter()
        .enumerate()
        .flat_map(|(j, g)| logistic_rows(&g.x, &g.y).into_iter().map(move |r| std::iter::once(j.to_string()).chain(r).collect()))
        .collect();
    prov.write_csv("hb_data.csv", "hb-data", &header, &rows)?;
    let z = spec.upper_design();
    let header: Vec<String> = std::iter::once("group".to_string()).chain(xs_header("z", z.cols())).collect();
    let rows: Vec<Vec<String>> = (0..z.rows())
        .map(|j| std::iter::once(j.to_string()).chain(z.row(j).iter().map(|v| num(*v))).collect())
        .collect();
    prov.write_csv("hb_upper.csv", "hb-upper", &header, &rows)?;

    let header: Vec<String> = ["sampler", "group", "coef", "mean", "sd", "ess", "mcse", "q025", "q975", "true"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let mut rows = Vec::new();
    for tr in [&res.mgt, &res.slice] {
        if tr.n_cycles == 0 {
            continue;
        }
        for (idx, s) in HbResult::beta_summaries(tr).iter().enumerate() {
            let (j, k) = (idx / kn, idx % kn);
            let mut r = vec![tr.sampler.clone(), j.to_string(), k.to_string()];
            r.extend(summary_cells(s));
            r.push(res.truth.as_ref().map_or("NA".into(), |t| num(t.beta[idx])));
            rows.push(r);
        }
    }
    prov.write_csv("posterior_beta.csv", "hb-posterior-beta", &header, &rows)?;

    let header: Vec<String> = ["sampler", "param", "row", "coef", "mean", "sd", "ess", "mcse", "q025", "q975"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let mut rows = Vec::new();
    for tr in [&res.mgt, &res.slice] {
        if tr.n_cycles == 0 {
            continue;
        }
        let (ln, w) = (tr.n_upper, tr.n_upper * kn);
        for l in 0..ln {
            for k in 0..kn {
                let s: Vec<f64> = (0..tr.n_cycles).map(|c| tr.gamma[c * w + l * kn + k]).collect();
                let mut r = vec![tr.sampler.clone(), "gamma".into(), l.to_string(), k.to_string()];
                r.extend(summary_cells(&summarize(&s)));
                rows.push(r);
            }
        }
        for k in 0..kn {
            let s: Vec<f64> = (0..tr.n_cycles).map(|c| tr.tau[c * kn + k]).collect();
            let mut r = vec![tr.sampler.clone(), "tau".into(), "0".into(), k.to_string()];
            r.extend(summary_cells(&summarize(&s)));
            rows.push(r);
        }
    }
    prov.write_csv("posterior_hyper.csv", "hb-posterior-hyper", &header, &rows)?;

    let cmp = res.compare();
    let group_sizes: Vec<usize> = spec.groups().iter().map(|g| g.y.len()).collect();
    prov.write_json(
        "summary.json",
        "hb-summary",
        json!({
            "groups": spec.n_groups(),
            "coef": kn,
            "upper_coef": spec.n_upper(),
            "group_sizes": group_sizes,
            "n_burnin": p.n_burnin,
            "n_samples": p.n_samples,
            "hyper": to_json(&p.hyper),
            "truth": res.truth.as_ref().map(to_json),
            "mh_mgt": {
                "block_acceptance_rate": res.mgt.acceptance_rate(),
                "incidents": res.mgt.incidents,
                "cost": to_json(&res.mgt.cost),
            },
            "slice": { "cost": to_json(&res.slice.cost) },
            "comparison": to_json(&cmp),
        }),
    )?;

    let header: Vec<String> = ["metric", "mh_mgt", "slice"].iter().map(ToString::to_string).collect();
    let per_indep = |t: f64, e: Option<f64>| e.map_or("NA".into(), |e| num(t / e));
    let rows = vec![
        vec!["time (s)".into(), num(res.mgt.beta_time), num(res.slice.beta_time)],
        vec![
            "average effective size".into(),
            cmp.mean_ess_mgt.map_or("NA".into(), num),
            cmp.mean_ess_slice.map_or("NA".into(), num),
        ],
        vec![
            "time per independent sample (s)".into(),
            per_indep(res.mgt.beta_time, cmp.mean_ess_mgt),
            per_indep(res.slice.beta_time, cmp.mean_ess_slice),
        ],
    ];
    prov.write_csv("timing_table.csv", "hb-timing-table", &header, &rows)?;

    let msg = format!(
        "HB: coverage {}, max agreement z {}, MH-MGT incidents {}",
        cmp.coverage.map_or("n/a".into(), |c| format!("{c:.3}")),
        cmp.max_z.map_or("n/a".into(), |z| format!("{z:.2}")),
        res.mgt.incidents
    );
    Ok(outcome(prov, true, msg))
}

// ---------------------------------------------------------------- theorem

pub fn run_theorem_campaign(count: usize, seed: u64) -> Result<CampaignReport> {
    run_campaign(&random_instances(count, seed))
}

fn cmd_theorem(cfg: &mut KvConfig, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    let count: usize = cfg.get("instances", if opts.quick { 20 } else { 100 })?;
    cfg.finish()?;
    let mut prov = Provenance::new(Verb::Theorem, seed, cfg, &[], &opts.out)?;
    let report = run_theorem_campaign(count, seed)?;
    let mut lines = serde_json::to_string(&json!({ "meta": prov.meta("theorem-campaign") })).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    lines.push('\n');
    lines.push_str(&report.to_json_lines()?);
    prov.write("campaign.jsonl", &lines)?;
    prov.write_json(
        "summary.json",
        "theorem-summary",
        json!({
            "instances": report.outcomes.len(),
            "passed": report.n_passed,
            "failed": report.n_failed,
            "certificates": report.outcomes.iter().filter(|o| o.witness.is_certificate()).count(),
            "max_fd_rel_err": report.max_fd_rel_err,
            "max_q_identity_rel_err": report.max_q_identity_rel_err,
            "max_witness_rel_quad": report.max_witness_rel_quad,
        }),
    )?;
    let msg = format!("theorem campaign: {}/{} instances passed", report.n_passed, report.outcomes.len());
    Ok(outcome(prov, report.passed(), msg))
}

// ---------------------------------------------------------------- mixing scan

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixingRow {
    pub n_obs: usize,
    pub value: u64,
    pub mode: f64,
    pub eta0: f64,
    pub eta0_sqrt_n: f64,
    pub acceptance_rate: Option<f64>,
}

/// `η₀` and measured MH-MGT acceptance for `N` copies of one observation.
/// Each chain starts at the mode; stream `i` serves entry `i` of `counts`.
pub fn mixing_scan(counts: &[usize], value: u64, n_samples: usize, n_burnin: usize, seed: u64) -> Result<Vec<MixingRow>> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let t = PoissonLogRate::replicated(value, n)?;
            let mode = t.mode()?;
            let eta0 = mixing_index_from(&t, mode)?;
            let tr = run_chain(&t, &[mode], &MgtConfig::new(n_burnin, n_samples, seed).with_newton(0), &mut child_rng(seed, i as u64))?;
            Ok(MixingRow {
                n_obs: n,
                value,
                mode,
                eta0,
                eta0_sqrt_n: eta0 * (n as f64).sqrt(),
                acceptance_rate: tr.acceptance_rate(),
            })
        })
        .collect()
}

fn cmd_mixing_scan(cfg: &mut KvConfig, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    let counts: Vec<usize> = cfg.get_list("counts", &[1, 10, 100])?;
    let value: u64 = cfg.get("value", 1)?;
    let n_samples: usize = cfg.get("n_samples", if opts.quick { 3000 } else { 30000 })?;
    let n_burnin: usize = cfg.get("n_burnin", 100)?;
    cfg.finish()?;
    let mut prov = Provenance::new(Verb::MixingScan, seed, cfg, &[], &opts.out)?;
    let rows = mixing_scan(&counts, value, n_samples, n_burnin, seed)?;
    let header: Vec<String> = ["n_obs", "value", "mode", "eta0", "eta0_sqrt_n", "acceptance_rate"]
        .iter()
        .map(ToString::to_string)
        .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_obs.to_string(),
                r.value.to_string(),
                num(r.mode),
                num(r.eta0),
                num(r.eta0_sqrt_n),
                r.acceptance_rate.map_or("NA".into(), num),
            ]
        })
        .collect();
    prov.write_csv("mixing.csv", "mixing-scan", &header, &cells)?;
    let msg = rows
        .iter()
        .map(|r| format!("N={} eta0={:.4} acc={}", r.n_obs, r.eta0, r.acceptance_rate.map_or("n/a".into(), |a| format!("{a:.3}"))))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(outcome(prov, true, msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_errors() {
        let mut c = KvConfig::parse("# comment\nn = 5  # trailing\nxs = 1, 2,3\n\nname = poisson\n").unwrap();
        assert_eq!(c.get::<usize>("n", 1).unwrap(), 5);
        assert_eq!(c.get_list::<f64>("xs", &[]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.get::<usize>("missing", 7).unwrap(), 7);
        assert!(matches!(c.finish(), Err(Error::Config { line: 5, .. })));

        assert!(matches!(KvConfig::parse("a = 1\nb\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(KvConfig::parse("a = 1\na = 2\n"), Err(Error::Config { line: 2, .. })));
        let mut c = KvConfig::parse("\n\nn = five\n").unwrap();
        assert!(matches!(c.get::<usize>("n", 0), Err(Error::Config { line: 3, .. })));
    }

    #[test]
    fn child_streams_differ_and_repeat() {
        let a: u64 = child_rng(5, 0).random();
        let b: u64 = child_rng(5, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, child_rng(5, 0).random::<u64>());
    }

    #[test]
    fn quantiles_and_summary() {
        let s: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile_sorted(&s, 0.025), 2.5);
        assert_eq!(quantile_sorted(&s, 0.975), 97.5);
        let sm = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(sm.mean, 2.0);
        assert_eq!(sm.ess, None);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn logistic_csv_round_trip_and_schema_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "# schema: mhmgt.logistic-data/1\ny,x1,x2\n1,0.5,-1\n0,2,3\n").unwrap();
        let (x, y, _) = read_logistic_csv(&p).unwrap();
        assert_eq!((x.rows(), x.cols()), (2, 2));
        assert_eq!(y, vec![1, 0]);

        fs::write(&p, "# schema: mhmgt.logistic-data/2\ny,x1\n1,0.5\n").unwrap();
        assert!(matches!(read_logistic_csv(&p), Err(Error::Schema { .. })));
        fs::write(&p, "y,x2\n1,0.5\n").unwrap();
        assert!(matches!(read_logistic_csv(&p), Err(Error::Schema { .. })));
        fs::write(&p, "y,x1\n1,0.5,3\n").unwrap();
        assert!(matches!(read_logistic_csv(&p), Err(Error::Schema { .. })));
    }

    #[test]
    fn seed_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        assert!(matches!(run_verb(Verb::Theorem, &opts), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("c.conf");
        fs::write(&cp, "seed = 1\ninstances = 2\nbogus = 3\n").unwrap();
        let opts = RunOptions {
            config: Some(cp),
            out: dir.path().join("out"),
            ..Default::default()
        };
        assert!(matches!(run_verb(Verb::Theorem, &opts), Err(Error::Config { line: 3, .. })));
    }
}
