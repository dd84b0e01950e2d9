//! Run configuration: a flat `section.key = value` file (or JSON), layered
//! over built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use mrgr_core::annotate::{AnnotateConfig, TAU_GRID};
use mrgr_core::backbone::{BackboneTrainConfig, ModelConfig};
use mrgr_core::checkpoint::sha256_hex;
use mrgr_core::data::{FilterRules, SplitBoundaries, SyntheticConfig, WindowRule};
use mrgr_core::eval::EvalConfig;
use mrgr_core::memory::MemoryConfig;
use mrgr_core::retriever::RetrieverTrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Events file used when `prepare-data` gets no `--input`.
    pub data: Option<PathBuf>,
    /// Annotation cache directory; `MRGR_CACHE_DIR` wins over this, and the
    /// run directory's `cache/` is used when neither is set.
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub short_window: usize,
    pub max_history: usize,
    pub min_item_interactions: usize,
    pub min_seq_len: usize,
    /// Split boundaries for ingested logs. Synthetic data brings its own
    /// unless these are set.
    pub train_start: Option<i64>,
    pub train_end: Option<i64>,
    pub val_end: Option<i64>,
    pub test_end: Option<i64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let rule = WindowRule::default();
        let filters = FilterRules::default();
        Self {
            short_window: rule.short,
            max_history: rule.max,
            min_item_interactions: filters.min_item_interactions,
            min_seq_len: filters.min_seq_len,
            train_start: None,
            train_end: None,
            val_end: None,
            test_end: None,
        }
    }
}

impl DataConfig {
    pub fn rule(&self) -> WindowRule {
        WindowRule {
            short: self.short_window,
            max: self.max_history,
        }
    }

    pub fn filters(&self) -> FilterRules {
        FilterRules {
            min_item_interactions: self.min_item_interactions,
            min_seq_len: self.min_seq_len,
        }
    }

    /// Explicit boundaries, if all three ends are set.
    pub fn boundaries(&self) -> Result<Option<SplitBoundaries>> {
        match (self.train_end, self.val_end, self.test_end) {
            (None, None, None) if self.train_start.is_none() => Ok(None),
            (Some(train_end), Some(val_end), Some(test_end)) => Ok(Some(SplitBoundaries {
                train_start: self.train_start,
                train_end,
                val_end,
                test_end,
            })),
            _ => Err(CliError::Usage(
                "data.train_end, data.val_end and data.test_end must be set together".into(),
            )),
        }
    }
}

/// Everything a run needs besides its data. Per-stage seeds all follow
/// the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub backbone: BackboneTrainConfig,
    pub annotate: AnnotateConfig,
    pub retriever: RetrieverTrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            memory: MemoryConfig::default(),
            backbone: BackboneTrainConfig::default(),
            annotate: AnnotateConfig::default(),
            retriever: RetrieverTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Keys filled in by [`RunConfig::resolve`] rather than by the user.
const DERIVED: [(&str, &str); 5] = [
    ("synthetic", "seed"),
    ("backbone", "seed"),
    ("retriever", "seed"),
    ("eval", "seed"),
    ("model", "vocab_size"),
];

const SECTION_DOCS: [(&str, &str); 9] = [
    ("paths", "input events file and annotation cache directory"),
    ("data", "filtering, windowing and split boundaries"),
    ("synthetic", "planted-anchor generator"),
    (
        "model",
        "backbone architecture (vocabulary size comes from the data)",
    ),
    (
        "memory",
        "element encoding (window | single_item) and pooling (last | mean)",
    ),
    ("backbone", "backbone training"),
    (
        "annotate",
        "label temperature (grid 10, 1, 0.1, 0.01) and delta space (probability | log)",
    ),
    ("retriever", "retriever training"),
    ("eval", "cutoffs for Recall@K and NDCG@K"),
];

fn user_facing(cfg: &RunConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    for (section, key) in DERIVED {
        v[section]
            .as_object_mut()
            .expect("section object")
            .remove(key);
    }
    v
}

impl RunConfig {
    /// Reads a config file layered over the defaults. Files whose first
    /// non-blank character is `{` are JSON; anything else is `key = value`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("config serializes");
        if text.trim_start().starts_with('{') {
            let patch: Value = serde_json::from_str(text)
                .map_err(|e| CliError::Usage(format!("invalid JSON config: {e}")))?;
            merge(&mut v, &patch, "")?;
        } else {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("line {}: expected `key = value`", i + 1))
                })?;
                set_key(&mut v, key.trim(), value.trim())
                    .map_err(|msg| CliError::Usage(format!("line {}: {msg}", i + 1)))?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(v)
            .map_err(|e| CliError::Usage(format!("invalid config value: {e}")))?;
        cfg.resolve()
    }

    /// Propagates the run seed, then validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.synthetic.seed = self.seed;
        self.backbone.seed = self.seed;
        self.retriever.seed = self.seed;
        self.eval.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.boundaries()?;
        if self.data.short_window == 0 || self.data.max_history <= self.data.short_window {
            return Err(CliError::Usage(
                "need 0 < data.short_window < data.max_history".into(),
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Usage("eval.ks must list cutoffs >= 1".into()));
        }
        if !(self.annotate.tau > 0.0) {
            return Err(CliError::Usage("annotate.tau must be positive".into()));
        }
        if !TAU_GRID.contains(&self.annotate.tau) {
            log::warn!(
                "annotate.tau = {} is outside the searched grid {TAU_GRID:?}",
                self.annotate.tau
            );
        }
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(3);
        model.validate()?;
        Ok(())
    }

    /// The settings as a JSON object, in the form [`RunConfig::parse`]
    /// accepts.
    pub fn to_json(&self) -> Value {
        user_facing(self)
    }

    /// Commented `key = value` listing of every setting.
    pub fn dump(&self) -> String {
        let v = user_facing(self);
        let mut out = String::from("# mrgr run configuration\n");
        out.push_str(&format!("seed = {}\n", v["seed"]));
        for (section, doc) in SECTION_DOCS {
            out.push_str(&format!("\n# {doc}\n"));
            for (k, val) in v[section].as_object().expect("section object") {
                out.push_str(&format!("{section}.{k} = {}\n", render(val)));
            }
        }
        out
    }

    /// Hash of every setting that can change results (paths excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        sha256_hex(v.to_string().as_bytes())
    }

    /// Hash of the named top-level sections.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let picked: Map<String, Value> = sections
            .iter()
            .map(|s| (s.to_string(), v[*s].clone()))
            .collect();
        sha256_hex(Value::Object(picked).to_string().as_bytes())
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

/// Parses `raw` guided by the type of the value it replaces.
fn parse_scalar(raw: &str, like: &Value) -> std::result::Result<Value, String> {
    let number = |s: &str| -> std::result::Result<Value, String> {
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Value::from(i));
        }
        s.parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("`{s}` is not a number"))
    };
    if raw.eq_ignore_ascii_case("none") || raw == "null" {
        return Ok(Value::Null);
    }
    match like {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("`{raw}` is not a boolean")),
        Value::Number(_) => number(raw),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0));
            raw.split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| parse_scalar(s, &elem))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null => Ok(number(raw).unwrap_or_else(|_| Value::String(raw.to_string()))),
        Value::Object(_) => Err("a whole section cannot be set at once".into()),
    }
}

fn is_derived(path: &str) -> bool {
    DERIVED
        .iter()
        .any(|(section, key)| path == format!("{section}.{key}"))
}

fn set_key(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    if is_derived(key) {
        return Err(format!("`{key}` is derived and cannot be set"));
    }
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    *slot = parse_scalar(raw, slot)?;
    Ok(())
}

/// Overlays `patch` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) else {
        return Err(CliError::Usage(format!("`{prefix}` must be an object")));
    };
    for (k, pv) in p {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if is_derived(&path) {
            return Err(CliError::Usage(format!(
                "`{path}` is derived and cannot be set"
            )));
        }
        let bv = b
            .get_mut(k)
            .ok_or_else(|| CliError::Usage(format!("unknown key `{path}`")))?;
        if bv.is_object() {
            merge(bv, pv, &path)?;
        } else {
            *bv = pv.clone();
        }
    }
    Ok(())
}
