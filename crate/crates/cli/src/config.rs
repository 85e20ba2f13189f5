//! Flat key-value experiment configs with a closed schema per subcommand.

use std::collections::BTreeMap;

use fbsde_core::registry::RegistryEntry;
use serde_json::Value as Json;
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Float,
    Int,
    Bool,
    Str,
    Choice(&'static [&'static str]),
    FloatList,
    IntList,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::Float => "a real number".into(),
            Kind::Int => "a non-negative integer".into(),
            Kind::Bool => "true or false".into(),
            Kind::Str => "a string".into(),
            Kind::Choice(c) => format!("one of {c:?}"),
            Kind::FloatList => "a list of real numbers".into(),
            Kind::IntList => "a list of non-negative integers".into(),
        }
    }

    fn accepts(&self, v: &Value) -> bool {
        let real = |v: &Value| matches!(v, Value::Float(_) | Value::Integer(_));
        let count = |v: &Value| matches!(v, Value::Integer(i) if *i >= 0);
        match (self, v) {
            (Kind::Float, v) => real(v),
            (Kind::Int, v) => count(v),
            (Kind::Bool, Value::Boolean(_)) => true,
            (Kind::Str, Value::String(_)) => true,
            (Kind::Choice(c), Value::String(s)) => c.contains(&s.as_str()),
            (Kind::FloatList, Value::Array(a)) => a.iter().all(real),
            (Kind::IntList, Value::Array(a)) => a.iter().all(count),
            _ => false,
        }
    }
}

const BOUNDARIES: &[&str] = &["limit-field", "characteristic"];

/// Keys every subcommand understands.
pub const COMMON: &[(&str, Kind)] = &[
    ("problem", Kind::Choice(&RegistryEntry::NAMES)),
    ("n", Kind::Int),
    ("a", Kind::Float),
    ("b", Kind::Float),
    ("c", Kind::Float),
    ("kappa", Kind::Float),
    ("sigma0", Kind::Float),
    ("t0", Kind::Float),
    ("horizon", Kind::Float),
    ("x0", Kind::FloatList),
    ("epsilons", Kind::FloatList),
    ("nt", Kind::Int),
    ("nx", Kind::Int),
    ("box_lo", Kind::Float),
    ("box_hi", Kind::Float),
    ("margin", Kind::Float),
    ("boundary", Kind::Choice(BOUNDARIES)),
    ("picard_tol", Kind::Float),
    ("picard_max", Kind::Int),
    ("eval_half_width", Kind::Float),
    ("seed", Kind::Int),
    ("out_dir", Kind::Str),
    ("field_cache", Kind::Str),
];

/// Subcommand names with their extra keys.
pub const SUBCOMMANDS: &[(&str, &[(&str, Kind)])] = &[
    ("check-assumptions", &[("samples", Kind::Int)]),
    ("solve-field", &[("assert_max_residual", Kind::Float)]),
    (
        "limit",
        &[
            ("method", Kind::Choice(&["shooting", "picard"])),
            ("bvp_dt", Kind::Float),
            ("bvp_tol", Kind::Float),
            ("bvp_max_iter", Kind::Int),
            ("relaxation", Kind::Float),
            ("assert_y0", Kind::FloatList),
            ("assert_tol", Kind::Float),
        ],
    ),
    (
        "simulate",
        &[("paths", Kind::Int), ("assert_max_residual", Kind::Float)],
    ),
    (
        "sweep-lemma1",
        &[
            ("paths", Kind::Int),
            ("x_shift", Kind::Float),
            ("assert_max_ratio", Kind::Float),
        ],
    ),
    (
        "sweep-lemma2",
        &[("paths", Kind::Int), ("assert_max_ratio", Kind::Float)],
    ),
    (
        "sweep-lemma3",
        &[
            ("paths", Kind::Int),
            ("t1", Kind::Float),
            ("t2", Kind::Float),
            ("assert_max_ratio", Kind::Float),
        ],
    ),
    (
        "sweep-lemma4",
        &[("paths", Kind::Int), ("assert_max_ratio", Kind::Float)],
    ),
    (
        "theorem1",
        &[
            ("paths", Kind::Int),
            ("delta", Kind::Float),
            ("partitions", Kind::IntList),
            ("outer", Kind::Int),
            ("inner", Kind::Int),
            ("variation_epsilon", Kind::Float),
            ("assert_monotone_se", Kind::Float),
            ("assert_final_probability_max", Kind::Float),
            ("assert_mz_slope_min", Kind::Float),
            ("assert_variation", Kind::Bool),
        ],
    ),
    (
        "ldp",
        &[
            ("path", Kind::Choice(&["constant", "limit", "linear"])),
            ("path_value", Kind::FloatList),
            ("path_end", Kind::FloatList),
            ("target", Kind::FloatList),
            ("intervals", Kind::Int),
            ("grad_tol", Kind::Float),
            ("max_iter", Kind::Int),
            ("range_tol", Kind::Float),
            ("delta", Kind::Float),
            ("paths", Kind::Int),
            ("tilt", Kind::Bool),
            ("backward", Kind::Bool),
            ("search_lo", Kind::Float),
            ("search_hi", Kind::Float),
            ("assert_sandwich", Kind::Float),
        ],
    ),
];

fn schema(subcommand: &str) -> Option<impl Iterator<Item = &'static (&'static str, Kind)>> {
    SUBCOMMANDS
        .iter()
        .find(|(name, _)| *name == subcommand)
        .map(|(_, extra)| COMMON.iter().chain(extra.iter()))
}

/// A validated config: every key is known to the subcommand and has the right type.
#[derive(Debug, Clone)]
pub struct Config {
    pub subcommand: String,
    values: BTreeMap<String, Value>,
}

impl Config {
    pub fn parse(subcommand: &str, text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        Self::from_table(subcommand, table)
    }

    pub fn from_table(subcommand: &str, table: toml::Table) -> Result<Self, CliError> {
        let allowed: BTreeMap<&str, Kind> = schema(subcommand)
            .ok_or_else(|| CliError::Usage(format!("unknown subcommand `{subcommand}`")))?
            .map(|(k, v)| (*k, *v))
            .collect();
        let mut values = BTreeMap::new();
        for (key, value) in table {
            let Some(kind) = allowed.get(key.as_str()) else {
                return Err(CliError::Usage(format!(
                    "config key `{key}` is not part of the `{subcommand}` schema; accepted keys:\n{}",
                    describe_schema(subcommand).unwrap_or_default()
                )));
            };
            if !kind.accepts(&value) {
                return Err(CliError::Usage(format!(
                    "config key `{key}` must be {}, got `{value}`",
                    kind.describe()
                )));
            }
            values.insert(key, value);
        }
        Ok(Self {
            subcommand: subcommand.to_string(),
            values,
        })
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<(), CliError> {
        let v = i64::try_from(seed).map_err(|_| {
            CliError::Usage(format!("seed {seed} exceeds the config integer range"))
        })?;
        self.values.insert("seed".into(), Value::Integer(v));
        Ok(())
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn float(&self, key: &str, default: f64) -> f64 {
        self.opt_float(key).unwrap_or(default)
    }

    pub fn opt_float(&self, key: &str) -> Option<f64> {
        self.values.get(key).map(as_f64)
    }

    pub fn int(&self, key: &str, default: usize) -> usize {
        self.values
            .get(key)
            .and_then(Value::as_integer)
            .map_or(default, |i| i as usize)
    }

    pub fn seed(&self) -> u64 {
        self.values
            .get("seed")
            .and_then(Value::as_integer)
            .map_or(0, |i| i as u64)
    }

    pub fn boolean(&self, key: &str, default: bool) -> bool {
        self.values
            .get(key)
            .and_then(Value::as_bool)
            .unwrap_or(default)
    }

    pub fn string(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(Value::as_str)
    }

    pub fn floats(&self, key: &str) -> Option<Vec<f64>> {
        self.values
            .get(key)
            .and_then(Value::as_array)
            .map(|a| a.iter().map(as_f64).collect())
    }

    pub fn ints(&self, key: &str) -> Option<Vec<usize>> {
        self.values.get(key).and_then(Value::as_array).map(|a| {
            a.iter()
                .filter_map(Value::as_integer)
                .map(|i| i as usize)
                .collect()
        })
    }

    /// Echo of the effective config for the manifest.
    pub fn to_json(&self) -> Json {
        Json::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), toml_to_json(v)))
                .collect(),
        )
    }
}

fn as_f64(v: &Value) -> f64 {
    match v {
        Value::Integer(i) => *i as f64,
        Value::Float(f) => *f,
        _ => f64::NAN,
    }
}

fn toml_to_json(v: &Value) -> Json {
    match v {
        Value::String(s) => Json::String(s.clone()),
        Value::Integer(i) => Json::from(*i),
        Value::Float(f) => Json::from(*f),
        Value::Boolean(b) => Json::Bool(*b),
        Value::Array(a) => Json::Array(a.iter().map(toml_to_json).collect()),
        other => Json::String(other.to_string()),
    }
}

/// One `key: type` line per accepted key.
pub fn describe_schema(subcommand: &str) -> Option<String> {
    let keys = schema(subcommand)?;
    Some(
        keys.map(|(k, kind)| format!("  {k}: {}", kind.describe()))
            .collect::<Vec<_>>()
            .join("\n"),
    )
}
