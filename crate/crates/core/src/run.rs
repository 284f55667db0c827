//! End-to-end runs on disk: training with metrics and checkpoints,
//! evaluation and sampling from a checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{load_dataset, Dataset, DatasetConfig, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::hierarchy::{EvalReport, Hierarchy};
use crate::metrics::MetricsWriter;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::training::{fixed_binarize, MetricsRow, Trainer};

/// Stored alongside the tensors so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub image_shape: Option<(usize, usize)>,
}

/// Loads the configured data. Relative dataset paths resolve against
/// `base_dir`; validation rows of image data are binarized once.
pub fn prepare_data(config: &RunConfig, base_dir: &Path) -> Result<Dataset> {
    let ds = config.dataset.as_ref().ok_or_else(|| Error::Config("`dataset` is required".into()))?;
    let mut data = load_dataset(ds, base_dir, config.training.validation_fraction)?;
    if data.train.cols() != config.model.data_dim {
        return Err(Error::Config(format!(
            "dataset has {} columns but model.data_dim is {}",
            data.train.cols(),
            config.model.data_dim
        )));
    }
    if config.training.dynamic_binarization && data.valid.rows() > 0 {
        data.valid = fixed_binarize(&data.valid, config.effective_seed())?;
    }
    Ok(data)
}

fn absolute_dataset(config: &RunConfig, base_dir: &Path) -> RunConfig {
    let mut c = config.clone();
    if let Some(DatasetConfig::Idx { path, .. }) = &mut c.dataset {
        if path.is_relative() {
            let joined = base_dir.join(&*path);
            *path = joined.canonicalize().unwrap_or(joined);
        }
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_valid_elbo: f64,
    pub final_valid_kls: Vec<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains per `resolved`, writing into `out_dir`:
/// `config.resolved.json`, `metrics.csv`, `checkpoints/epoch-NNNNN.ckpt`
/// every `checkpoint_every` epochs and `final.ckpt`.
pub fn train_run(
    resolved: &Resolved,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainSummary> {
    let config = absolute_dataset(&resolved.config, &resolved.base_dir);
    let data = prepare_data(&config, Path::new("."))?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let snapshot = Resolved { config: config.clone(), provenance: resolved.provenance.clone(), base_dir: PathBuf::new() };
    fs::write(out_dir.join("config.resolved.json"), serde_json::to_string_pretty(&snapshot)?)?;
    let meta = serde_json::to_string(&CheckpointMeta { config: config.clone(), image_shape: data.image_shape })?;

    let hierarchy = Hierarchy::new(config.model.clone())?;
    let seed = config.effective_seed();
    let layers = hierarchy.layers();
    let metrics_path = out_dir.join("metrics.csv");
    let (mut trainer, mut writer) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::new(hierarchy, config.training.clone(), ck.store)?;
            t.optimizer = ck.optimizer;
            t.rng = ck.rng.restore();
            t.epoch = ck.epoch;
            let f = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
            let w = if f.metadata()?.len() == 0 { MetricsWriter::new(f, layers)? } else { MetricsWriter::append(f, layers) };
            (t, w)
        }
        None => {
            let store = hierarchy.init(&mut stream(seed, 0))?;
            (Trainer::new(hierarchy, config.training.clone(), store)?, MetricsWriter::new(File::create(&metrics_path)?, layers)?)
        }
    };
    let save = |t: &Trainer, path: &Path| -> Result<()> {
        Checkpoint {
            epoch: t.epoch,
            store: t.store.clone(),
            optimizer: t.optimizer.clone(),
            rng: t.rng_state(),
            config_json: meta.clone(),
        }
        .save(path)
    };
    let mut last = None;
    while trainer.epoch < config.training.epochs {
        let row = trainer.run_epoch(&data.train, &data.valid)?;
        writer.write(&row)?;
        on_epoch(&row);
        if config.checkpoint_every > 0 && trainer.epoch % config.checkpoint_every == 0 {
            save(&trainer, &out_dir.join(format!("checkpoints/epoch-{:05}.ckpt", trainer.epoch)))?;
        }
        last = Some(row);
    }
    let final_path = out_dir.join("final.ckpt");
    save(&trainer, &final_path)?;
    Ok(TrainSummary {
        epochs: trainer.epoch,
        final_valid_elbo: last.as_ref().map_or(f64::NAN, |r| r.valid_elbo),
        final_valid_kls: last.map_or_else(Vec::new, |r| r.valid_kls),
        checkpoint: final_path,
        metrics: metrics_path,
    })
}

/// A checkpoint with its hierarchy rebuilt.
pub struct Loaded {
    pub hierarchy: Hierarchy,
    pub checkpoint: Checkpoint,
    pub meta: CheckpointMeta,
}

pub fn load_run(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint `{}` not found", path.display())));
    }
    let checkpoint = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&checkpoint.config_json)?;
    let hierarchy = Hierarchy::new(meta.config.model.clone())?;
    Ok(Loaded { hierarchy, checkpoint, meta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub split: Split,
    pub rows: usize,
    pub epoch: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// ELBO and IWAE-`k` of a checkpoint on one split of its dataset.
pub fn eval_run(loaded: &Loaded, split: Split, k: usize, limit: Option<usize>, seed: u64) -> Result<EvalSummary> {
    let cfg = &loaded.meta.config;
    let data = prepare_data(cfg, Path::new("."))?;
    let x = match split {
        Split::Valid => data.valid,
        Split::Train if cfg.training.dynamic_binarization => fixed_binarize(&data.train, seed)?,
        Split::Train => data.train,
    };
    let n = limit.unwrap_or(x.rows()).min(x.rows());
    if n == 0 {
        return Err(Error::Config(format!("the {split:?} split is empty")));
    }
    let x = x.slice_rows(0, n)?;
    let mut noise = stream(seed, 2);
    let report = loaded.hierarchy.evaluate(&loaded.checkpoint.store, &x, Some(k), &mut noise, cfg.training.eval_batch)?;
    for (term, v) in [("elbo", report.elbo), ("iwae", report.iwae.unwrap_or(0.0))] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: term.into(), value: v });
        }
    }
    Ok(EvalSummary { split, rows: n, epoch: loaded.checkpoint.epoch, seed, report })
}

/// Binary PGM (`P5`) of intensities in `[0, 1]`.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != rows * cols {
        return Err(Error::shape("write_pgm", &[&[pixels.len()], &[rows * cols]]));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Writes `count` generated samples to `out_dir`: one PGM per image of
/// decoder means for image data, otherwise `samples.csv`. Returns the
/// written paths.
pub fn sample_run(loaded: &Loaded, count: usize, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let g = loaded.hierarchy.generate(&loaded.checkpoint.store, count, &mut stream(seed, 4))?;
    if !g.mean.all_finite() {
        return Err(Error::Numeric { term: "generated samples".into(), value: f64::NAN });
    }
    match loaded.meta.image_shape {
        Some((r, c)) => (0..count)
            .map(|i| {
                let p = out_dir.join(format!("sample_{i:04}.pgm"));
                write_pgm(&p, r, c, g.mean.row(i)).map(|_| p)
            })
            .collect(),
        None => {
            let p = out_dir.join("samples.csv");
            write_csv(&p, &g.sample)?;
            Ok(vec![p])
        }
    }
}

fn write_csv(path: &Path, x: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..x.cols()).map(|j| format!("x{}", j + 1)))?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}
