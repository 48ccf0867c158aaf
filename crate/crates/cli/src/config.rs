//! Run configuration: one JSON document plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use extsumm::corpus::{CategorySchema, CorpusLimits, Split, SplitRatios};
use extsumm::decoder::{AspectMode, DecodeConfig};
use extsumm::metrics::DiversityMode;
use extsumm::model::ModelConfig;
use extsumm::trainer::TrainConfig;
use extsumm::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Product JSONL read by `build-corpus`.
    pub products: Option<PathBuf>,
    /// Holds `{train,dev,test}.jsonl`, their labeled variants and, for
    /// `synth`, `products.jsonl`.
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_report: PathBuf,
    pub generations: PathBuf,
    pub report: PathBuf,
    pub heatmap: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            products: None,
            data_dir: "data".into(),
            checkpoint: "model.ckpt".into(),
            train_report: "train_report.json".into(),
            generations: "generations.jsonl".into(),
            report: "report.json".into(),
            heatmap: "heatmap.csv".into(),
        }
    }
}

impl Paths {
    pub fn split_file(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.jsonl", split.as_str()))
    }

    pub fn labeled_file(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.labeled.jsonl", split.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub category: String,
    pub aspects: Vec<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let s = CategorySchema::computer();
        Self {
            category: s.category,
            aspects: s.aspects.into_iter().map(|a| a.name).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub products: usize,
    pub max_sentences_per_aspect: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            products: 200,
            max_sentences_per_aspect: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub min_fragment_chars: usize,
    pub max_fragment_chars: usize,
    /// Skip products whose summary leaves no fragment instead of failing.
    pub skip_empty: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            min_fragment_chars: 15,
            max_fragment_chars: 55,
            skip_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            threshold: extsumm::labeling::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Defaults to the first instance of the split.
    pub product_id: Option<String>,
    /// Defaults to the chosen instance's own aspect.
    pub aspect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation, splitting, clustering, initialization and
    /// batch order. `model.seed` and `train.seed` are overwritten with it.
    pub seed: u64,
    pub execution: Execution,
    pub paths: Paths,
    pub schema: SchemaConfig,
    pub limits: CorpusLimits,
    pub ratios: SplitRatios,
    pub synth: SynthConfig,
    pub build: BuildConfig,
    pub label: LabelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Aspect input used by `generate`.
    pub mode: AspectMode,
    /// Split read by `generate`, `evaluate` and `heatmap`.
    pub split: Split,
    pub diversity: DiversityMode,
    pub heatmap: HeatmapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            execution: Execution::default(),
            paths: Paths::default(),
            schema: SchemaConfig::default(),
            limits: CorpusLimits::default(),
            ratios: SplitRatios::default(),
            synth: SynthConfig::default(),
            build: BuildConfig::default(),
            label: LabelConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            mode: AspectMode::default(),
            split: Split::Test,
            diversity: DiversityMode::default(),
            heatmap: HeatmapConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = seed {
            set_path(&mut doc, "seed", Value::from(s))?;
        }
        let mut cfg: RunConfig =
            serde_path_to_error::deserialize(doc).map_err(|e| anyhow!("invalid config key `{}`: {}", e.path(), e.inner()))?;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.train.execution = cfg.execution;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.category_schema()?;
        let key = |k: &str, e: extsumm::Error| anyhow!("invalid config key `{k}`: {e}");
        self.model.validate().map_err(|e| key("model", e))?;
        self.train.validate().map_err(|e| key("train", e))?;
        self.decode.validate().map_err(|e| key("decode", e))?;
        if !(self.label.threshold > 0.0 && self.label.threshold < 1.0) {
            bail!("invalid config key `label.threshold`: must lie in (0, 1)");
        }
        if self.build.min_fragment_chars > self.build.max_fragment_chars {
            bail!("invalid config key `build.min_fragment_chars`: exceeds build.max_fragment_chars");
        }
        if self.synth.products == 0 {
            bail!("invalid config key `synth.products`: must be at least 1");
        }
        let r = self.ratios;
        if !(r.train >= 0.0 && r.dev >= 0.0 && r.train + r.dev <= 1.0) {
            bail!("invalid config key `ratios`: train and dev must be non-negative and sum to at most 1");
        }
        if self.model.max_input_chars != self.limits.max_input_chars {
            bail!("invalid config key `model.max_input_chars`: must equal limits.max_input_chars");
        }
        if self.model.max_target_chars != self.limits.max_target_chars {
            bail!("invalid config key `model.max_target_chars`: must equal limits.max_target_chars");
        }
        Ok(())
    }

    pub fn category_schema(&self) -> Result<CategorySchema> {
        CategorySchema::new(&self.schema.category, &self.schema.aspects)
            .map_err(|e| anyhow!("invalid config key `schema.aspects`: {e}"))
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    // JSON literals parse as such; anything else is taken as a string
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, key.trim(), value)
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("invalid config key `{key}`");
    }
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => bail!("invalid config key `{key}`: `{}` is not a section", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("non-empty key")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::load(None, &o, None)
    }

    #[test]
    fn defaults_are_valid() {
        let c = load(&[]).unwrap();
        assert_eq!(c, {
            let mut d = RunConfig::default();
            d.train.execution = d.execution;
            d
        });
    }

    #[test]
    fn dotted_overrides_and_seed() {
        let c = load(&["train.epochs=3", "model.encoder_kind=transformer", "paths.data_dir=out/x"]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.encoder_kind, extsumm::model::EncoderKind::Transformer);
        assert_eq!(c.paths.data_dir, PathBuf::from("out/x"));
        let s = RunConfig::load(None, &[], Some(9)).unwrap();
        assert_eq!((s.seed, s.model.seed, s.train.seed), (9, 9, 9));
    }

    #[test]
    fn errors_name_the_key() {
        let e = load(&["train.epochs=many"]).unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
        let e = load(&["train.epochz=1"]).unwrap_err().to_string();
        assert!(e.contains("train.epochz"), "{e}");
        let e = load(&["label.threshold=1.5"]).unwrap_err().to_string();
        assert!(e.contains("label.threshold"), "{e}");
        let e = load(&["schema.aspects=[]"]).unwrap_err().to_string();
        assert!(e.contains("schema.aspects"), "{e}");
        let e = load(&["seed.x=1"]).unwrap_err().to_string();
        assert!(e.contains("`seed`"), "{e}");
        assert!(load(&["novalue"]).is_err());
    }
}
