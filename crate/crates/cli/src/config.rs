//! Run configuration: one JSON document with a section per stage. Every
//! section and field is optional and falls back to its default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use randgan::anomaly::InversionConfig;
use randgan::data::{PreprocessConfig, SyntheticConfig};
use randgan::fusion_eval::EvalConfig;
use randgan::gan::GanTrainConfig;
use randgan::segmentation::{MaskPostprocessConfig, SegTrainConfig, UNetSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    pub unet: UNetSpec,
    pub train: SegTrainConfig,
    pub postprocess: MaskPostprocessConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed, copied into every stage that draws random numbers.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub synth: SyntheticConfig,
    pub preprocess: PreprocessConfig,
    pub segment: SegmentSection,
    pub gan: GanTrainConfig,
    pub score: InversionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            threads: 1,
            synth: SyntheticConfig::default(),
            preprocess: PreprocessConfig::default(),
            segment: SegmentSection::default(),
            gan: GanTrainConfig::default(),
            score: InversionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every key path in `given` that has no counterpart in `schema`.
pub fn unknown_keys(given: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    match (given, schema) {
        (Value::Object(g), Value::Object(s)) => {
            for (k, v) in g {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match s.get(k) {
                    Some(sv) => unknown_keys(v, sv, &path, out),
                    None => out.push(path),
                }
            }
        }
        (Value::Array(g), Value::Array(s)) => {
            if let Some(first) = s.first() {
                for (i, v) in g.iter().enumerate() {
                    unknown_keys(v, first, &format!("{prefix}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> anyhow::Result<Self> {
        let value: Value = serde_json::from_str(text)
            .with_context(|| format!("{} is not valid JSON", origin.display()))?;
        let schema = serde_json::to_value(Self::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &schema, "", &mut unknown);
        if !unknown.is_empty() {
            bail!(
                "{}: unknown config keys: {}",
                origin.display(),
                unknown.join(", ")
            );
        }
        let cfg: Self = serde_json::from_value(value)
            .with_context(|| format!("invalid config {}", origin.display()))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                Self::parse(&text, p)
            }
        }
    }

    /// Applies the global seed to every stage section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.segment.train.seed = seed;
        self.gan.seed = seed;
        self.score.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// Checks every section and reports all failures at once.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        let mut check = |key: &str, r: randgan::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{key}: {e}"));
            }
        };
        check("synth", self.synth.validate());
        check("preprocess", self.preprocess.validate());
        check("segment.unet", self.segment.unet.validate());
        check("segment.train", self.segment.train.validate());
        check("segment.postprocess", self.segment.postprocess.validate());
        check("gan", self.gan.validate());
        check("score", self.score.validate());
        check("eval", self.eval.validate());
        if self.threads == 0 {
            problems.push("threads: must be >= 1".into());
        }
        if !problems.is_empty() {
            bail!("invalid configuration:\n  {}", problems.join("\n  "));
        }
        Ok(())
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
