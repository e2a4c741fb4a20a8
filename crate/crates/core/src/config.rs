//! Run configuration: one JSON document, with `path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::oracle::{CorpusSpec, TeacherNoise};
use crate::training::{SceneSetup, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub setup: SceneSetup,
    pub train: TrainConfig,
    pub eval: EvalSpec,
}

impl Default for Config {
    /// The ten-scene demo.
    fn default() -> Self {
        Config {
            seed: 21,
            corpus: CorpusSpec {
                n_scenes: 10,
                duplicate_fraction: 0.3,
                ..Default::default()
            },
            setup: SceneSetup {
                teacher_noise: TeacherNoise {
                    iid_sigma: 0.03,
                    view_bias_sigma: 0.03,
                },
                ..Default::default()
            },
            train: TrainConfig::corpus(),
            eval: EvalSpec::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(wrap)?;
        self.setup.validate().map_err(wrap)?;
        self.setup.teacher_noise.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.eval.retrieval.validate().map_err(wrap)?;
        if self.corpus.scene.feature_dim as usize != self.setup.feature_dim {
            return Err(Error::Config(
                "corpus.scene.feature_dim and setup.feature_dim differ".into(),
            ));
        }
        if self.eval.queries_per_scene == 0 {
            return Err(Error::Config("eval.queries_per_scene must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?)
    }

    fn from_value(v: Value) -> Result<Self> {
        let c: Config = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Config::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and taken
/// as a string otherwise. Missing intermediate objects are created, so a
/// misspelled key reaches the deserializer and is rejected there.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path '{path}'")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}' descends into a non-object")))?;
        cur = obj
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override '{path}' descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
