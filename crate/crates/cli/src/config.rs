//! JSON experiment configuration: syntax and schema checks, per-mode field
//! rules, and conversion into core problem objects.

use std::collections::BTreeSet;
use std::fmt;

use clap::ValueEnum;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use etalab_core::assembly::ProblemSpec;
use etalab_core::fieldexpr::{ScalarField, TensorField, VectorField};
use etalab_core::geometry::{MetricSpec, WeightSpec};
use etalab_core::mesh::{generate, DomainKind, DomainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Solve,
    HadamardMetric,
    HadamardBoundary,
    Sweep,
    SplitDemo,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::HadamardMetric => "hadamard-metric",
            Mode::HadamardBoundary => "hadamard-boundary",
            Mode::Sweep => "sweep",
            Mode::SplitDemo => "split-demo",
            Mode::Verify => "verify",
        }
    }

    pub const ALL: [Mode; 6] = [
        Mode::Solve,
        Mode::HadamardMetric,
        Mode::HadamardBoundary,
        Mode::Sweep,
        Mode::SplitDemo,
        Mode::Verify,
    ];

    /// (required, optional) top-level keys beyond the ones every mode takes.
    fn fields(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Mode::Solve => (&["domain", "k"], &["metric"]),
            Mode::HadamardMetric => (&["domain", "H", "cluster"], &["metric", "eta_dot", "k", "t"]),
            Mode::HadamardBoundary => (&["domain", "V", "cluster"], &["k", "t", "flux"]),
            Mode::Sweep => (&["domain", "k", "sweep"], &["metric", "H", "eta_dot"]),
            Mode::SplitDemo => (
                &["domain", "cluster", "seeds"],
                &["k", "seed", "threshold", "perturbation"],
            ),
            Mode::Verify => (&[], &["lemma", "seed"]),
        }
    }
}

const COMMON_FIELDS: [&str; 4] = ["mode", "eta", "refine", "rel_gap"];

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {msg}")]
    Syntax {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("config field `{path}`: {msg}")]
    Schema { path: String, msg: String },
}

impl ConfigError {
    fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainConfig {
    Interval { a: f64, b: f64, n: usize },
    Square { side: f64, n: usize },
    Disk { radius: f64, n: usize },
    Annulus { r_in: f64, r_out: f64, n: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ClusterSelector {
    /// 1-based eigenvalue index; the detected cluster containing it is used.
    Index(usize),
    /// Explicit 1-based inclusive range.
    Range { first: usize, last: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Count(u64),
    List(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FluxChoice {
    #[default]
    Variational,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationChoice {
    Metric,
    Boundary,
    #[default]
    Both,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaConfig {
    #[serde(default = "default_tuples")]
    pub tuples: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_lemma_t")]
    pub t: Vec<f64>,
}

fn default_tuples() -> usize {
    100
}
fn default_points() -> usize {
    100
}
fn default_lemma_t() -> Vec<f64> {
    vec![1e-3, 1e-4]
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            tuples: default_tuples(),
            points: default_points(),
            t: default_lemma_t(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub mode: Option<String>,
    pub domain: Option<DomainConfig>,
    pub refine: Option<u32>,
    pub metric: Option<Vec<Vec<String>>>,
    pub eta: Option<String>,
    pub eta_dot: Option<String>,
    #[serde(rename = "H")]
    pub h: Option<Vec<Vec<String>>>,
    #[serde(rename = "V")]
    pub v: Option<Vec<String>>,
    pub k: Option<usize>,
    pub cluster: Option<ClusterSelector>,
    pub t: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub seeds: Option<SeedSpec>,
    pub threshold: Option<f64>,
    pub rel_gap: Option<f64>,
    pub flux: Option<FluxChoice>,
    pub perturbation: Option<PerturbationChoice>,
    pub sweep: Option<SweepConfig>,
    pub lemma: Option<LemmaConfig>,
}

pub const DEFAULT_FD_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const DEFAULT_REL_GAP: f64 = 1e-3;
pub const DEFAULT_SPLIT_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_SEED: u64 = 42;

/// A config that passed syntax, schema, and mode checks.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub mode: Mode,
    pub raw: RawConfig,
    /// SHA-256 of the config text.
    pub digest: String,
}

pub fn parse_config(text: &str, mode: Mode) -> Result<Experiment, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        msg: strip_position(&e.to_string()),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| ConfigError::schema("<root>", "expected a JSON object"))?;
    let (required, optional) = mode.fields();
    let allowed: BTreeSet<&str> = required
        .iter()
        .chain(optional)
        .chain(COMMON_FIELDS.iter())
        .copied()
        .collect();
    for key in obj.keys() {
        if !allowed.contains(key.as_str()) && known_field(key) {
            return Err(ConfigError::schema(
                key.as_str(),
                format!("not used by mode {mode}"),
            ));
        }
    }
    let raw: RawConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::schema(path, strip_position(&e.into_inner().to_string()))
    })?;
    for key in required {
        if !obj.contains_key(*key) {
            return Err(ConfigError::schema(*key, format!("required by mode {mode}")));
        }
    }
    if let Some(m) = &raw.mode {
        if m != mode.name() {
            return Err(ConfigError::schema(
                "mode",
                format!("config is for mode {m} but {mode} was requested"),
            ));
        }
    }
    let exp = Experiment {
        mode,
        raw,
        digest: sha256_hex(text.as_bytes()),
    };
    exp.validate()?;
    Ok(exp)
}

fn known_field(key: &str) -> bool {
    [
        "mode", "domain", "refine", "metric", "eta", "eta_dot", "H", "V", "k", "cluster", "t",
        "seed", "seeds", "threshold", "rel_gap", "flux", "perturbation", "sweep", "lemma",
    ]
    .contains(&key)
}

fn strip_position(msg: &str) -> String {
    match msg.find(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Experiment {
    fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.raw;
        if let Some(d) = &r.domain {
            self.domain_spec_of(d).validate().map_err(|e| ConfigError::schema("domain", e.to_string()))?;
        }
        if let Some(e) = &r.eta {
            ScalarField::parse(e).map_err(|e| ConfigError::schema("eta", e.to_string()))?;
        }
        if let Some(e) = &r.eta_dot {
            ScalarField::parse(e).map_err(|e| ConfigError::schema("eta_dot", e.to_string()))?;
        }
        let dim = self.dim();
        for (name, t) in [("metric", &r.metric), ("H", &r.h)] {
            if let Some(rows) = t {
                let field = TensorField::parse_upper(rows)
                    .map_err(|e| ConfigError::schema(name, format!("{e} (give the upper triangle, e.g. [[\"h11\",\"h12\"],[\"h22\"]])")))?;
                if field.dim() != dim {
                    return Err(ConfigError::schema(
                        name,
                        format!("has dimension {} but the domain has dimension {dim}", field.dim()),
                    ));
                }
            }
        }
        if let Some(v) = &r.v {
            let field = VectorField::parse(v).map_err(|e| ConfigError::schema("V", e.to_string()))?;
            if field.dim() != dim {
                return Err(ConfigError::schema(
                    "V",
                    format!("has {} components but the domain has dimension {dim}", field.dim()),
                ));
            }
        }
        if let Some(k) = r.k {
            if k == 0 {
                return Err(ConfigError::schema("k", "must be at least 1"));
            }
        }
        match &r.cluster {
            Some(ClusterSelector::Index(0)) => {
                return Err(ConfigError::schema("cluster", "indices are 1-based"))
            }
            Some(ClusterSelector::Range { first, last }) if *first == 0 || last < first => {
                return Err(ConfigError::schema("cluster", "need 1 <= first <= last"))
            }
            _ => {}
        }
        if let Some(t) = &r.t {
            if t.is_empty() || t.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(ConfigError::schema("t", "steps must be positive and finite"));
            }
        }
        if let Some(g) = r.rel_gap {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(ConfigError::schema("rel_gap", "must be non-negative"));
            }
        }
        if let Some(th) = r.threshold {
            if !(th >= 0.0 && th.is_finite()) {
                return Err(ConfigError::schema("threshold", "must be non-negative"));
            }
        }
        if let Some(s) = &r.sweep {
            if s.steps < 2 || !(s.t_max > s.t_min) {
                return Err(ConfigError::schema("sweep", "need steps >= 2 and t_max > t_min"));
            }
        }
        if self.mode == Mode::Sweep && r.h.is_none() && r.eta_dot.is_none() {
            return Err(ConfigError::schema("H", "sweep needs H or eta_dot"));
        }
        if self.mode == Mode::HadamardBoundary && r.metric.is_some() {
            return Err(ConfigError::schema("metric", "boundary variation uses the flat metric"));
        }
        let no_seeds = match &r.seeds {
            Some(SeedSpec::Count(c)) => *c == 0,
            Some(SeedSpec::List(l)) => l.is_empty(),
            None => false,
        };
        if no_seeds {
            return Err(ConfigError::schema("seeds", "need at least one seed"));
        }
        if let Some(l) = &r.lemma {
            if l.tuples == 0 || l.points == 0 || l.t.len() < 2 {
                return Err(ConfigError::schema(
                    "lemma",
                    "need tuples >= 1, points >= 1 and at least two t values",
                ));
            }
        }
        Ok(())
    }

    fn domain_spec_of(&self, d: &DomainConfig) -> DomainSpec {
        match *d {
            DomainConfig::Interval { a, b, n } => DomainSpec::interval(a, b, n),
            DomainConfig::Square { side, n } => DomainSpec::square(side, n),
            DomainConfig::Disk { radius, n } => DomainSpec::disk(radius, n),
            DomainConfig::Annulus { r_in, r_out, n } => DomainSpec::annulus(r_in, r_out, n),
        }
    }

    pub fn domain_spec(&self) -> Option<DomainSpec> {
        self.raw.domain.as_ref().map(|d| self.domain_spec_of(d))
    }

    pub fn domain_kind(&self) -> Option<DomainKind> {
        self.domain_spec().map(|d| d.kind)
    }

    pub fn dim(&self) -> usize {
        self.domain_spec().map(|d| d.dim()).unwrap_or(2)
    }

    pub fn rel_gap(&self) -> f64 {
        self.raw.rel_gap.unwrap_or(DEFAULT_REL_GAP)
    }

    pub fn fd_steps(&self) -> Vec<f64> {
        self.raw.t.clone().unwrap_or_else(|| DEFAULT_FD_STEPS.to_vec())
    }

    pub fn seed(&self) -> u64 {
        self.raw.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.raw.seeds {
            Some(SeedSpec::List(l)) => l.clone(),
            Some(SeedSpec::Count(c)) => (0..*c).map(|i| self.seed() + i).collect(),
            None => vec![self.seed()],
        }
    }

    pub fn threshold(&self) -> f64 {
        self.raw.threshold.unwrap_or(DEFAULT_SPLIT_THRESHOLD)
    }

    pub fn velocity(&self) -> Option<VectorField> {
        self.raw.v.as_ref().map(|v| VectorField::parse(v).expect("validated"))
    }

    /// Mesh (with refinements), metric, and weight. Validated fields only.
    pub fn problem(&self) -> Result<ProblemSpec, String> {
        let spec = self.domain_spec().ok_or("no domain")?;
        let mut mesh = generate(&spec).map_err(|e| format!("mesh: {e}"))?;
        for _ in 0..self.raw.refine.unwrap_or(0) {
            mesh = mesh.refine();
        }
        let dim = spec.dim();
        let mut metric = MetricSpec::flat(dim);
        if let Some(rows) = &self.raw.metric {
            metric = metric
                .with_base(TensorField::parse_upper(rows).expect("validated"))
                .map_err(|e| format!("metric: {e}"))?;
        }
        if let Some(rows) = &self.raw.h {
            metric = metric
                .with_perturbation(TensorField::parse_upper(rows).expect("validated"))
                .map_err(|e| format!("H: {e}"))?;
        }
        let scalar = |s: &Option<String>| {
            s.as_deref()
                .map(|e| ScalarField::parse(e).expect("validated"))
                .unwrap_or_else(ScalarField::zero)
        };
        let weight = WeightSpec::new(scalar(&self.raw.eta), scalar(&self.raw.eta_dot));
        ProblemSpec::new(mesh, metric, weight).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syntax_error_position() {
        let err = parse_config("{\n  \"domain\": ,\n}", Mode::Solve).unwrap_err();
        match err {
            ConfigError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn field_paths() {
        let text = r#"{"domain": {"kind": "square", "side": "one", "n": 4}, "k": 2}"#;
        let err = parse_config(text, Mode::Solve).unwrap_err().to_string();
        assert!(err.contains("domain"), "{err}");
        let text = r#"{"domain": {"kind": "square", "side": 1, "n": 4}}"#;
        let err = parse_config(text, Mode::Solve).unwrap_err().to_string();
        assert!(err.contains("`k`"), "{err}");
        let text = r#"{"domain": {"kind": "square", "side": 1, "n": 4}, "k": 2, "V": ["x", "y"]}"#;
        let err = parse_config(text, Mode::Solve).unwrap_err().to_string();
        assert!(err.contains("`V`") && err.contains("not used"), "{err}");
        let text = r#"{"domain": {"kind": "square", "side": 1, "n": 4}, "k": 2, "bogus": 1}"#;
        let err = parse_config(text, Mode::Solve).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn expressions_and_shapes() {
        let text = r#"{"domain": {"kind": "square", "side": 1, "n": 4}, "k": 2, "eta": "x +* y"}"#;
        let err = parse_config(text, Mode::Solve).unwrap_err().to_string();
        assert!(err.contains("`eta`"), "{err}");
        let text = r#"{"domain": {"kind": "square", "side": 1, "n": 4}, "H": [["1","0"],["0","1"]], "cluster": 2}"#;
        let err = parse_config(text, Mode::HadamardMetric).unwrap_err().to_string();
        assert!(err.contains("`H`") && err.contains("upper triangle"), "{err}");
        let text = r#"{"domain": {"kind": "interval", "a": 0, "b": 1, "n": 8}, "V": ["x", "y"], "cluster": 1}"#;
        let err = parse_config(text, Mode::HadamardBoundary).unwrap_err().to_string();
        assert!(err.contains("`V`"), "{err}");
    }

    #[test]
    fn accepted_config() {
        let text = r#"{"mode": "split-demo", "domain": {"kind": "square", "side": 1, "n": 8},
                      "cluster": 2, "seeds": 3, "seed": 10}"#;
        let exp = parse_config(text, Mode::SplitDemo).unwrap();
        assert_eq!(exp.seeds(), vec![10, 11, 12]);
        assert_eq!(exp.threshold(), DEFAULT_SPLIT_THRESHOLD);
        assert!(exp.problem().is_ok());
        assert!(parse_config(text, Mode::Solve).is_err());
    }
}
