//! The `section.key = value` experiment file.
//!
//! Lines starting with `#` and blank lines are ignored. Lists inside a
//! value are space separated; a comma list is a grid and expands to one
//! variant per combination. `variant.<name>.<section>.<key>` overrides a
//! key for the named variant only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Every accepted `section.key`.
pub const KEYS: &[&str] = &[
    "model.input_dim",
    "model.classes",
    "model.hidden",
    "model.activation",
    "model.regularize_biases",
    "data.kind",
    "data.size",
    "data.input_dim",
    "data.classes",
    "data.noise",
    "data.train_fraction",
    "data.heldout_fraction",
    "data.seed",
    "data.csv_path",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.weight_decay",
    "optimizer.schedule",
    "optimizer.decay_factor",
    "optimizer.milestones",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.eval_every",
    "estimator.mode",
    "estimator.lambda",
    "estimator.max_iter",
    "estimator.prob",
    "estimator.p1",
    "estimator.p2",
    "estimator.rescale_unbiased",
    "estimator.detach_trace",
    "diagnostics.exact_trace",
    "diagnostics.stability",
    "diagnostics.trace_limit",
    "diagnostics.stability_limit",
    "compare.seeds",
    "benchmark.steps",
    "benchmark.warmup",
    "problem.kind",
    "problem.matrix",
    "problem.point",
    "problem.checkpoint",
    "estimate.exhaustive",
    "estimate.exact",
    "oracle.limit",
    "oracle.override",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { line: None, key: None, message: message.into() }
    }

    pub fn at(line: usize, key: Option<&str>, message: impl Into<String>) -> Self {
        Self { line: Some(line), key: key.map(str::to_string), message: message.into() }
    }

    pub fn missing(key: &str) -> Self {
        Self { line: None, key: Some(key.to_string()), message: format!("missing required key '{key}'") }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.key) {
            (Some(line), Some(key)) if !self.message.contains(key.as_str()) => write!(f, "line {line}: {key}: {}", self.message),
            (Some(line), _) => write!(f, "line {line}: {}", self.message),
            (None, _) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Value {
    text: String,
    line: usize,
}

/// A parsed file: base keys plus per-variant overrides, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    base: BTreeMap<String, Value>,
    variants: Vec<(String, BTreeMap<String, Value>)>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut file = ConfigFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::at(line, None, "expected 'section.key = value'"));
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(ConfigError::at(line, Some(key), "empty value"));
            }
            let (target, short) = match key.strip_prefix("variant.") {
                Some(rest) => {
                    let Some((name, short)) = rest.split_once('.') else {
                        return Err(ConfigError::at(line, Some(key), "expected 'variant.<name>.<section>.<key>'"));
                    };
                    if !valid_name(name) {
                        return Err(ConfigError::at(line, Some(key), format!("invalid variant name '{name}'")));
                    }
                    let idx = match file.variants.iter().position(|(n, _)| n == name) {
                        Some(i) => i,
                        None => {
                            file.variants.push((name.to_string(), BTreeMap::new()));
                            file.variants.len() - 1
                        }
                    };
                    (&mut file.variants[idx].1, short)
                }
                None => (&mut file.base, key),
            };
            if !KEYS.contains(&short) {
                return Err(ConfigError::at(line, Some(key), format!("unknown key '{key}'")));
            }
            if let Some(prev) = target.get(short) {
                return Err(ConfigError::at(line, Some(key), format!("duplicate key '{key}' (first set on line {})", prev.line)));
            }
            target.insert(short.to_string(), Value { text: value.to_string(), line });
        }
        Ok(file)
    }

    pub fn variant_names(&self) -> Vec<&str> {
        self.variants.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// The base settings alone. Grid values are rejected here.
    pub fn single(&self) -> Result<Settings, ConfigError> {
        if !self.variants.is_empty() {
            let (name, entries) = &self.variants[0];
            let line = entries.values().map(|v| v.line).min().unwrap_or(0);
            return Err(ConfigError::at(line, None, format!("variant '{name}' is only meaningful for compare and benchmark")));
        }
        let settings = Settings { name: "default".into(), values: self.base.clone() };
        if let Some((k, v)) = settings.values.iter().find(|(_, v)| v.text.contains(',')) {
            return Err(ConfigError::at(v.line, Some(k), "grid values are only allowed for compare and benchmark"));
        }
        Ok(settings)
    }

    /// One `Settings` per variant and grid combination. Without declared
    /// variants the base settings form a single variant named `default`.
    pub fn expand(&self) -> Vec<Settings> {
        let declared: Vec<(String, BTreeMap<String, Value>)> = if self.variants.is_empty() {
            vec![("default".to_string(), BTreeMap::new())]
        } else {
            self.variants.clone()
        };
        let mut out = Vec::new();
        for (name, overrides) in declared {
            let mut merged = self.base.clone();
            merged.extend(overrides);
            let grid: Vec<(String, Vec<String>)> = merged
                .iter()
                .filter(|(_, v)| v.text.contains(','))
                .map(|(k, v)| (k.clone(), v.text.split(',').map(|s| s.trim().to_string()).collect()))
                .collect();
            let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
            for (key, options) in &grid {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        options.iter().map(move |o| {
                            let mut c = c.clone();
                            c.push((key.clone(), o.clone()));
                            c
                        })
                    })
                    .collect();
            }
            for combo in combos {
                let mut values = merged.clone();
                for (k, v) in &combo {
                    values.get_mut(k).expect("grid key present").text = v.clone();
                }
                let label = if combo.is_empty() {
                    name.clone()
                } else {
                    let parts: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    format!("{name}[{}]", parts.join(";"))
                };
                out.push(Settings { name: label, values });
            }
        }
        out
    }
}

/// Resolved key-value settings for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub name: String,
    values: BTreeMap<String, Value>,
}

impl Settings {
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|v| v.text.as_str())
    }

    pub fn line(&self, key: &str) -> Option<usize> {
        self.values.get(key).map(|v| v.line)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        debug_assert!(KEYS.contains(&key), "undocumented key {key}");
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .text
                .parse()
                .map(Some)
                .map_err(|e| ConfigError::at(v.line, Some(key), format!("invalid value '{}' for '{key}': {e}", v.text))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::missing(key))
    }

    /// Space-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.values.get(key) else { return Ok(None) };
        v.text
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| ConfigError::at(v.line, Some(key), format!("invalid list item '{s}' for '{key}': {e}"))))
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// Error attributed to `key`'s line when present.
    pub fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError { line: self.line(key), key: Some(key.to_string()), message: message.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_keys() {
        let f = ConfigFile::parse("# run\n\nmodel.classes = 3\n  train.epochs=5  \n").unwrap();
        let s = f.single().unwrap();
        assert_eq!(s.require::<usize>("model.classes").unwrap(), 3);
        assert_eq!(s.get::<usize>("train.epochs").unwrap(), Some(5));
        assert_eq!(s.get::<f64>("optimizer.lr").unwrap(), None);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = ConfigFile::parse("model.classes = 3\nmodel.clases = 3\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().contains("model.clases"));
        let e = ConfigFile::parse("model.classes 3\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = ConfigFile::parse("model.classes = 3\nmodel.classes = 4\n").unwrap_err();
        assert!(e.to_string().contains("line 1"));
        let s = ConfigFile::parse("\nmodel.classes = three\n").unwrap().single().unwrap();
        let e = s.require::<usize>("model.classes").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = ConfigFile::parse("train.epochs = 1\n").unwrap().single().unwrap().require::<usize>("model.classes").unwrap_err();
        assert!(e.to_string().contains("model.classes"));
    }

    #[test]
    fn grid_expands_to_cross_product() {
        let f = ConfigFile::parse("estimator.lambda = 0.1, 0.01\nestimator.max_iter = 1,5,10\n").unwrap();
        let v = f.expand();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].name, "default[estimator.lambda=0.1;estimator.max_iter=1]");
        assert_eq!(v[5].raw("estimator.lambda"), Some("0.01"));
        assert_eq!(v[5].raw("estimator.max_iter"), Some("10"));
        assert!(f.single().is_err());
    }

    #[test]
    fn variants_override_base_keys() {
        let text = "estimator.mode = seht_h\nvariant.baseline.estimator.mode = none\nvariant.reg.estimator.lambda = 0.1, 1\n";
        let v = ConfigFile::parse(text).unwrap().expand();
        let names: Vec<&str> = v.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["baseline", "reg[estimator.lambda=0.1]", "reg[estimator.lambda=1]"]);
        assert_eq!(v[0].raw("estimator.mode"), Some("none"));
        assert_eq!(v[1].raw("estimator.mode"), Some("seht_h"));
        assert!(ConfigFile::parse("variant.bad name.train.epochs = 1").is_err());
        assert!(ConfigFile::parse("variant.x.nope.key = 1").is_err());
    }

    #[test]
    fn lists_are_space_separated() {
        let s = ConfigFile::parse("model.hidden = 16 16 8\n").unwrap().single().unwrap();
        assert_eq!(s.list::<usize>("model.hidden").unwrap(), Some(vec![16, 16, 8]));
    }
}
