//! Run configuration: a flat `key = value` text format with `include`
//! support, strict unknown-key rejection, and typed extraction into training
//! and synthesis settings.
//!
//! Semantics: lines are `key = value`; `#` starts a comment; blank lines are
//! skipped. An `include = path` line splices another file in place (path
//! relative to the including file), so later assignments always win — both
//! over earlier lines and over included files. Every run writes back its
//! resolved configuration so the run is reproducible from that snapshot
//! alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::SyntheticSpec;
use crate::training::{ClsMode, TrainingConfig};

/// Every key the configuration format accepts. Anything else is an error —
/// a typo must fail loudly, not silently fall back to a default.
pub const KNOWN_KEYS: &[&str] = &[
    // dataset source
    "data.kind",
    "data.root",
    "data.csv",
    "data.classes",
    "data.uncertainty",
    // synthetic generation
    "synth.n",
    "synth.classes",
    "synth.prevalence",
    "synth.noise_std",
    "synth.seed",
    // fold split
    "split.ratios",
    "split.seed",
    // geometry
    "h",
    "w",
    // architecture
    "base_ch",
    "n_res",
    "critic_base_ch",
    "critic_depth",
    "gamma",
    // objective
    "lambda_cls",
    "lambda_adv",
    "lambda_reg",
    "lambda_ctr",
    "alpha0",
    "alpha1",
    "lambda_gp",
    "alpha_ctr",
    "enable_adv",
    "enable_reg",
    "enable_ctr",
    "cls_mode",
    // optimization
    "learning_rate",
    "beta1",
    "beta2",
    "batch_size",
    "n_critic",
    "select_every",
    "total_class_visits",
    "seed",
    // evaluation
    "eval.n_grids",
    "eval.seed",
    // explanation
    "explain.image",
    "explain.classes",
    "explain.scale",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got `{content}`")]
    Parse { path: PathBuf, line: usize, content: String },
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey { path: PathBuf, line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("include cycle through {path}")]
    IncludeCycle { path: PathBuf },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// A fully resolved configuration: includes spliced, later assignments
/// applied. Keys iterate in sorted order for stable snapshots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    /// Load and resolve a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut stack = Vec::new();
        cfg.load_file(path, &mut stack)?;
        Ok(cfg)
    }

    /// Parse configuration text; relative `include` paths resolve against
    /// `base_dir`.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut stack = Vec::new();
        cfg.parse_text(text, Path::new("<inline>"), base_dir, &mut stack)?;
        Ok(cfg)
    }

    fn load_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<(), ConfigError> {
        let canon = path
            .canonicalize()
            .map_err(|e| ConfigError::Io { path: path.into(), source: e })?;
        if stack.contains(&canon) {
            return Err(ConfigError::IncludeCycle { path: canon });
        }
        let text = std::fs::read_to_string(&canon)
            .map_err(|e| ConfigError::Io { path: canon.clone(), source: e })?;
        stack.push(canon.clone());
        let base_dir = canon.parent().unwrap_or_else(|| Path::new("."));
        let result = self.parse_text(&text, &canon, base_dir, stack);
        stack.pop();
        result
    }

    fn parse_text(
        &mut self,
        text: &str,
        origin: &Path,
        base_dir: &Path,
        stack: &mut Vec<PathBuf>,
    ) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Parse {
                    path: origin.into(),
                    line,
                    content: content.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if key == "include" {
                let target = base_dir.join(value);
                self.load_file(&target, stack)?;
                continue;
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    path: origin.into(),
                    line,
                    key: key.to_string(),
                });
            }
            self.entries.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    /// Set a key programmatically (used for command-line overrides). The key
    /// must be a known one.
    pub fn set(&mut self, key: &str, value: &str) {
        assert!(KNOWN_KEYS.contains(&key), "unknown config key `{key}`");
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parse an optional key as `T`.
    pub fn parsed<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                expected,
            }),
        }
    }

    pub fn parsed_or<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
        default: T,
    ) -> Result<T, ConfigError> {
        Ok(self.parsed(key, expected)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        self.parsed(key, expected)?.ok_or_else(|| ConfigError::MissingKey { key: key.into() })
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entries.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "boolean (true/false/1/0)",
            }),
        }
    }

    /// Comma-separated list of `T`.
    pub fn list<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<Vec<T>>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: v.clone(),
                        expected,
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Write the resolved configuration as a loadable snapshot.
    pub fn write_snapshot(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = String::from("# resolved configuration\n");
        for (k, v) in &self.entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(path, text).map_err(|e| ConfigError::Io { path: path.into(), source: e })
    }

    // -----------------------------------------------------------------------
    // Typed sections
    // -----------------------------------------------------------------------

    /// Geometry, required for any dataset work.
    pub fn geometry(&self) -> Result<(usize, usize), ConfigError> {
        Ok((self.require("h", "integer")?, self.require("w", "integer")?))
    }

    /// Build the synthetic-dataset spec: `synth.*` keys plus the shared
    /// geometry. A single `synth.prevalence` value is replicated per class.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, ConfigError> {
        let (h, w) = self.geometry()?;
        let n: usize = self.require("synth.n", "integer")?;
        let classes: usize = self.parsed_or("synth.classes", "integer", 5)?;
        let seed: u64 = self.parsed_or("synth.seed", "integer", 0)?;
        let mut spec = SyntheticSpec::new(n, h, w, classes, seed);
        if let Some(prev) = self.list::<f64>("synth.prevalence", "number list")? {
            spec.prevalence = match prev.len() {
                1 => vec![prev[0]; classes],
                n if n == classes => prev,
                _ => {
                    return Err(ConfigError::Invalid(format!(
                        "synth.prevalence needs 1 or {classes} values, got {}",
                        prev.len()
                    )))
                }
            };
        }
        if let Some(ns) = self.parsed::<f64>("synth.noise_std", "number")? {
            spec.noise_std = ns;
        }
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    /// Train/test/val split ratios and seed.
    pub fn split(&self) -> Result<((f64, f64, f64), u64), ConfigError> {
        let ratios = match self.list::<f64>("split.ratios", "number list")? {
            None => (0.8, 0.1, 0.1),
            Some(v) if v.len() == 3 => (v[0], v[1], v[2]),
            Some(v) => {
                return Err(ConfigError::Invalid(format!(
                    "split.ratios needs exactly 3 values, got {}",
                    v.len()
                )))
            }
        };
        let seed = self.parsed_or("split.seed", "integer", 0)?;
        Ok((ratios, seed))
    }

    /// Assemble the full training configuration for `num_classes` classes,
    /// starting from the defaults and applying every present override.
    pub fn training_config(&self, num_classes: usize) -> Result<TrainingConfig, ConfigError> {
        let (h, w) = self.geometry()?;
        let visits: usize = self.require("total_class_visits", "integer")?;
        let seed: u64 = self.parsed_or("seed", "integer", 0)?;
        let mut cfg = TrainingConfig::new(num_classes, h, w, visits, seed);

        macro_rules! opt {
            ($field:ident, $key:literal, $ty:ty, $expected:literal) => {
                if let Some(v) = self.parsed::<$ty>($key, $expected)? {
                    cfg.$field = v;
                }
            };
        }
        opt!(base_ch, "base_ch", usize, "integer");
        opt!(n_res, "n_res", usize, "integer");
        opt!(critic_base_ch, "critic_base_ch", usize, "integer");
        opt!(critic_depth, "critic_depth", usize, "integer");
        opt!(gamma, "gamma", usize, "integer");
        opt!(lambda_cls, "lambda_cls", f64, "number");
        opt!(lambda_adv, "lambda_adv", f64, "number");
        opt!(lambda_reg, "lambda_reg", f64, "number");
        opt!(lambda_ctr, "lambda_ctr", f64, "number");
        opt!(alpha0, "alpha0", f64, "number");
        opt!(alpha1, "alpha1", f64, "number");
        opt!(lambda_gp, "lambda_gp", f64, "number");
        opt!(alpha_ctr, "alpha_ctr", f64, "number");
        opt!(learning_rate, "learning_rate", f64, "number");
        opt!(beta1, "beta1", f64, "number");
        opt!(beta2, "beta2", f64, "number");
        opt!(batch_size, "batch_size", usize, "integer");
        opt!(n_critic, "n_critic", usize, "integer");
        opt!(select_every, "select_every", usize, "integer");
        cfg.enable_adv = self.bool_or("enable_adv", cfg.enable_adv)?;
        cfg.enable_reg = self.bool_or("enable_reg", cfg.enable_reg)?;
        cfg.enable_ctr = self.bool_or("enable_ctr", cfg.enable_ctr)?;
        cfg.cls_mode = match self.get("cls_mode") {
            None => cfg.cls_mode,
            Some("all") => ClsMode::AllClasses,
            Some("visited") => ClsMode::VisitedClassOnly,
            Some(v) => {
                return Err(ConfigError::BadValue {
                    key: "cls_mode".into(),
                    value: v.into(),
                    expected: "`all` or `visited`",
                })
            }
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_comments_and_blank_lines() {
        let cfg = Config::from_text(
            "# a comment\n\nh = 32\nw = 32   # trailing comment\nseed = 7\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.get("h"), Some("32"));
        assert_eq!(cfg.get("w"), Some("32"));
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("gamma"), None);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = Config::from_text("h = 32\nlamda_cls = 1\n", Path::new(".")).unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "lamda_cls");
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = Config::from_text("h = 32\njust words\n", Path::new(".")).unwrap_err();
        match err {
            ConfigError::Parse { line, content, .. } => {
                assert_eq!(line, 2);
                assert_eq!(content, "just words");
            }
            other => panic!("expected Parse, got {other}"),
        }
    }

    #[test]
    fn later_assignments_win() {
        let cfg = Config::from_text("seed = 1\nseed = 2\n", Path::new(".")).unwrap();
        assert_eq!(cfg.get("seed"), Some("2"));
    }

    #[test]
    fn includes_splice_in_place_and_cycles_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "h = 64\nw = 64\nseed = 1\n").unwrap();
        std::fs::write(
            dir.path().join("run.cfg"),
            "seed = 9\ninclude = base.cfg\nw = 32\n",
        )
        .unwrap();
        let cfg = Config::load(&dir.path().join("run.cfg")).unwrap();
        // base.cfg overrides the earlier seed; the later w overrides base.
        assert_eq!(cfg.get("seed"), Some("1"));
        assert_eq!(cfg.get("h"), Some("64"));
        assert_eq!(cfg.get("w"), Some("32"));

        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        let err = Config::load(&dir.path().join("a.cfg")).unwrap_err();
        assert!(matches!(err, ConfigError::IncludeCycle { .. }), "{err}");
    }

    #[test]
    fn snapshot_roundtrips_to_an_identical_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::from_text("h = 16\nw = 16\nlambda_cls = 50\n", Path::new(".")).unwrap();
        let snap = dir.path().join("resolved.cfg");
        cfg.write_snapshot(&snap).unwrap();
        let back = Config::load(&snap).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn training_config_applies_defaults_and_overrides() {
        let cfg = Config::from_text(
            "h = 16\nw = 16\ntotal_class_visits = 3\nseed = 5\nbase_ch = 4\nn_res = 1\n\
             critic_base_ch = 4\ncritic_depth = 2\ngamma = 8\nlambda_cls = 50\n\
             enable_ctr = false\ncls_mode = visited\nbatch_size = 2\n",
            Path::new("."),
        )
        .unwrap();
        let tc = cfg.training_config(2).unwrap();
        assert_eq!((tc.h, tc.w, tc.num_classes), (16, 16, 2));
        assert_eq!(tc.total_class_visits, 3);
        assert_eq!(tc.seed, 5);
        assert_eq!(tc.base_ch, 4);
        assert_eq!(tc.lambda_cls, 50.0);
        // Untouched keys keep their defaults.
        assert_eq!(tc.lambda_reg, 100.0);
        assert_eq!(tc.alpha0, 2.0);
        assert!(!tc.enable_ctr && tc.enable_adv && tc.enable_reg);
        assert_eq!(tc.cls_mode, ClsMode::VisitedClassOnly);
    }

    #[test]
    fn training_config_requires_geometry_and_visits() {
        let cfg = Config::from_text("h = 16\nw = 16\n", Path::new(".")).unwrap();
        let err = cfg.training_config(2).unwrap_err();
        assert!(matches!(err, ConfigError::MissingKey { ref key } if key == "total_class_visits"));
    }

    #[test]
    fn invalid_values_surface_as_config_errors() {
        let cfg = Config::from_text(
            "h = 16\nw = 16\ntotal_class_visits = 1\nlambda_cls = -3\ngamma = 8\n\
             critic_depth = 2\n",
            Path::new("."),
        )
        .unwrap();
        assert!(matches!(cfg.training_config(2).unwrap_err(), ConfigError::Invalid(_)));

        let cfg = Config::from_text("h = 16\nw = 16\nbatch_size = four\n", Path::new(".")).unwrap();
        let err = cfg.parsed::<usize>("batch_size", "integer").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }));
    }

    #[test]
    fn synthetic_spec_replicates_a_single_prevalence() {
        let cfg = Config::from_text(
            "h = 16\nw = 16\nsynth.n = 10\nsynth.classes = 4\nsynth.prevalence = 0.4\n\
             synth.seed = 3\n",
            Path::new("."),
        )
        .unwrap();
        let spec = cfg.synthetic_spec().unwrap();
        assert_eq!(spec.prevalence, vec![0.4; 4]);
        assert_eq!((spec.h, spec.w, spec.num_classes, spec.seed), (16, 16, 4, 3));

        let cfg = Config::from_text(
            "h = 16\nw = 16\nsynth.n = 10\nsynth.classes = 4\nsynth.prevalence = 0.4,0.5\n",
            Path::new("."),
        )
        .unwrap();
        assert!(matches!(cfg.synthetic_spec().unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn split_defaults_and_validates_arity() {
        let cfg = Config::from_text("", Path::new(".")).unwrap();
        assert_eq!(cfg.split().unwrap(), ((0.8, 0.1, 0.1), 0));
        let cfg = Config::from_text("split.ratios = 0.7,0.2,0.1\nsplit.seed = 4\n", Path::new("."))
            .unwrap();
        assert_eq!(cfg.split().unwrap(), ((0.7, 0.2, 0.1), 4));
        let cfg = Config::from_text("split.ratios = 0.5,0.5\n", Path::new(".")).unwrap();
        assert!(matches!(cfg.split().unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn booleans_accept_the_documented_forms() {
        let cfg =
            Config::from_text("enable_adv = 0\nenable_reg = true\n", Path::new(".")).unwrap();
        assert!(!cfg.bool_or("enable_adv", true).unwrap());
        assert!(cfg.bool_or("enable_reg", false).unwrap());
        assert!(cfg.bool_or("enable_ctr", true).unwrap());
        let cfg = Config::from_text("enable_adv = yes\n", Path::new(".")).unwrap();
        assert!(cfg.bool_or("enable_adv", true).is_err());
    }
}
