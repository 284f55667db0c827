//! Run configuration documents (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_idx, synth_dataset, ImageOptions, SynthKind};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchySpec;
use crate::tensor::Tensor;
use crate::training::{split_validation, TrainConfig};

/// Where training and validation rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image file. Without `valid_limit`, validation rows are split
    /// off the end of the training selection.
    Idx {
        path: PathBuf,
        #[serde(default)]
        downscale: bool,
        #[serde(default)]
        offset: usize,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        valid_offset: Option<usize>,
        #[serde(default)]
        valid_limit: Option<usize>,
    },
    Synthetic {
        generator: SynthKind,
        n: usize,
        #[serde(default)]
        valid_n: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: HierarchySpec,
    pub training: TrainConfig,
    pub dataset: Option<DatasetConfig>,
    /// Overrides `training.seed` when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: HierarchySpec::default(),
            training: TrainConfig::default(),
            dataset: None,
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
        }
    }
}

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    File,
    Default,
    Environment,
}

/// A validated config plus the origin of every leaf value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
    /// Directory relative dataset paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        match &self.dataset {
            Some(DatasetConfig::Synthetic { generator, n, .. }) => {
                if *n < 2 {
                    return Err(Error::Config("dataset.n must be at least 2".into()));
                }
                if generator.dim() != self.model.data_dim {
                    return Err(Error::Config(format!(
                        "model.data_dim is {} but the {generator:?} generator produces {} columns",
                        self.model.data_dim,
                        generator.dim()
                    )));
                }
                if self.training.dynamic_binarization {
                    return Err(Error::Config("dynamic_binarization needs image data in [0, 1]".into()));
                }
            }
            Some(DatasetConfig::Idx { valid_offset, valid_limit, .. }) => {
                if valid_offset.is_some() != valid_limit.is_some() {
                    return Err(Error::Config("dataset.valid_offset and dataset.valid_limit go together".into()));
                }
            }
            None => {}
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.training.seed)
    }
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, c) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(c, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Adds "did you mean" to serde's unknown-field messages.
fn explain(err: &serde_json::Error, origin: &str) -> Error {
    let msg = err.to_string();
    let mut text = format!("{origin}: {msg}");
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let bad = rest.split('`').next().unwrap_or("");
        let expected: Vec<&str> = rest.split('`').skip(2).step_by(2).filter(|s| !s.is_empty()).collect();
        let best = expected
            .iter()
            .map(|k| (strsim::damerau_levenshtein(bad, k), *k))
            .min()
            .filter(|(d, k)| *d <= k.len().max(bad.len()) / 2 + 1);
        if let Some((_, k)) = best {
            text.push_str(&format!("; did you mean `{k}`?"));
        }
    }
    Error::Config(text)
}

/// Parses and validates a config document; `origin` labels errors.
pub fn parse_config(text: &str, origin: &str, seed_override: Option<u64>) -> Result<Resolved> {
    let raw: Value = serde_json::from_str(text).map_err(|e| explain(&e, origin))?;
    let mut config: RunConfig = serde_json::from_str(text).map_err(|e| explain(&e, origin))?;
    if config.dataset.is_none() {
        return Err(Error::Config(format!("{origin}: `dataset` is required")));
    }
    if let Some(s) = seed_override {
        config.seed = Some(s);
    }
    if let Some(s) = config.seed {
        config.training.seed = s;
    }
    config.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    let full = serde_json::to_value(&config)?;
    let mut keys = Vec::new();
    leaves(&full, "", &mut keys);
    let provenance = keys
        .into_iter()
        .map(|k| {
            let src = if seed_override.is_some() && (k == "seed" || k == "training.seed") {
                Source::Environment
            } else if lookup(&raw, &k).is_some() {
                Source::File
            } else {
                Source::Default
            };
            (k, src)
        })
        .collect();
    Ok(Resolved { config, provenance, base_dir: PathBuf::from(".") })
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<Resolved> {
    let text = std::fs::read_to_string(path)?;
    let mut r = parse_config(&text, &path.display().to_string(), seed_override)?;
    r.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(r)
}

/// Loaded data: training rows, validation rows, and the image shape when
/// the rows are images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Tensor,
    pub valid: Tensor,
    pub image_shape: Option<(usize, usize)>,
}

pub fn load_dataset(dataset: &DatasetConfig, base_dir: &Path, validation_fraction: f64) -> Result<Dataset> {
    match dataset {
        DatasetConfig::Idx { path, downscale, offset, limit, valid_offset, valid_limit } => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            let train = load_idx(&path, ImageOptions { downscale: *downscale, offset: *offset, limit: *limit })?;
            let shape = Some((train.rows, train.cols));
            let (train, valid) = match (valid_offset, valid_limit) {
                (Some(o), Some(l)) => {
                    let v = load_idx(&path, ImageOptions { downscale: *downscale, offset: *o, limit: Some(*l) })?;
                    (train.pixels, v.pixels)
                }
                _ => split_validation(&train.pixels, validation_fraction)?,
            };
            Ok(Dataset { train, valid, image_shape: shape })
        }
        DatasetConfig::Synthetic { generator, n, valid_n, seed } => {
            let train = synth_dataset(*generator, *n, *seed)?;
            let valid = if *valid_n > 0 {
                synth_dataset(*generator, *valid_n, seed.wrapping_add(0x5eed))?
            } else {
                Tensor::zeros(&[0, generator.dim()])
            };
            Ok(Dataset { train, valid, image_shape: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{LrSchedule, WarmupSchedule};

    const MINIMAL: &str = r#"{"dataset": {"kind": "idx", "path": "x.idx"}, "model": {"data_dim": 784}}"#;

    #[test]
    fn minimal_config_gets_table_defaults() {
        let r = parse_config(MINIMAL, "test", None).unwrap();
        assert_eq!(r.config.training.lr, LrSchedule::Constant { lr: 1e-3 });
        assert_eq!(r.config.training.batch_size, 256);
        assert_eq!(r.config.training.warmup_schedule, WarmupSchedule::Geometric { levels: 10 });
        assert_eq!(r.provenance["training.batch_size"], Source::Default);
        assert_eq!(r.provenance["model.data_dim"], Source::File);
    }

    #[test]
    fn batch_of_one_rejected() {
        let t = r#"{"dataset": {"kind": "idx", "path": "x"}, "training": {"batch_size": 1}}"#;
        let e = parse_config(t, "test", None).unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
    }

    #[test]
    fn misspelled_key_suggests_nearest() {
        let t = r#"{"dataset": {"kind": "idx", "path": "x"}, "training": {"warmup_shcedule": {"kind": "off"}}}"#;
        let e = parse_config(t, "test", None).unwrap_err().to_string();
        assert!(e.contains("did you mean `warmup_schedule`"), "{e}");
        assert!(e.contains("line 1"), "{e}");
    }

    #[test]
    fn environment_seed_wins() {
        let r = parse_config(MINIMAL, "test", Some(9)).unwrap();
        assert_eq!(r.config.training.seed, 9);
        assert_eq!(r.provenance["seed"], Source::Environment);
    }
}
