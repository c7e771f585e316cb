//! Mini-batch training with Adam, checkpointing, and per-epoch metrics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{match_lines, matching_loss_and_grad, regression_loss_and_grad, NetConfig, TrunkParams};
use crate::ot::{topk, SinkhornConfig};
use crate::scene::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Matching,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 12,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            objective: Objective::Matching,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("training needs batch_size >= 1, lr >= 0, eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, DMatrix<f64>>,
    pub v: BTreeMap<String, DMatrix<f64>>,
}

impl Adam {
    pub fn new(params: &TrunkParams) -> Self {
        let zeros: BTreeMap<_, _> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), DMatrix::zeros(t.nrows(), t.ncols())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut TrunkParams, grads: &BTreeMap<String, DMatrix<f64>>, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment for every tensor");
            let v = self.v.get_mut(name).expect("moment for every tensor");
            let p = params.get_mut(name);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean over evaluation scenes of the fraction of true pairs among the top-|gt| entries of W.
    pub match_precision_at_k: f64,
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mean_loss,match_precision_at_K\n");
    for r in records {
        s.push_str(&format!("{},{:.17e},{:.17e}\n", r.epoch, r.mean_loss, r.match_precision_at_k));
    }
    s
}

/// Top-|gt| precision of the learned matcher on one scene.
pub fn scene_precision(params: &TrunkParams, scene: &ScenePair, sinkhorn: &SinkhornConfig) -> Result<f64> {
    let k = scene.gt_matches.len();
    if k == 0 {
        return Ok(0.0);
    }
    let w = match_lines(&scene.source, &scene.target, params, sinkhorn)?.w;
    let truth = scene.correspondence_matrix();
    let hits = topk(&w, k)?.iter().filter(|m| truth[m.source][m.target]).count();
    Ok(hits as f64 / k as f64)
}

pub fn mean_precision(params: &TrunkParams, scenes: &[ScenePair], sinkhorn: &SinkhornConfig) -> Result<f64> {
    let p: Vec<f64> = scenes
        .par_iter()
        .map(|s| scene_precision(params, s, sinkhorn))
        .collect::<Result<_>>()?;
    Ok(p.iter().sum::<f64>() / p.len().max(1) as f64)
}

fn scene_loss_and_grad(
    params: &TrunkParams,
    scene: &ScenePair,
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<(f64, BTreeMap<String, DMatrix<f64>>)> {
    match cfg.objective {
        Objective::Matching => {
            let truth = scene.correspondence_matrix();
            matching_loss_and_grad(params, &scene.source, &scene.target, &truth, sinkhorn)
        }
        Objective::Regression => regression_loss_and_grad(params, &scene.source, &scene.target, &scene.gt_pose),
    }
}

/// Scene visiting order of an epoch; depends only on the seed and the epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trainer state that fully determines the continuation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: TrunkParams,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: TrunkParams) -> Self {
        let adam = Adam::new(&params);
        Self { params, adam, epoch: 0 }
    }
}

/// Runs one epoch: shuffled mini-batches, per-scene gradients in parallel, summed in batch order.
pub fn train_epoch(
    state: &mut TrainState,
    scenes: &[ScenePair],
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<f64> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let epoch = state.epoch + 1;
    let order = epoch_order(cfg.seed, epoch, scenes.len());
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let params = &state.params;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                scene_loss_and_grad(params, &scenes[i], cfg, sinkhorn).map_err(|e| match e {
                    Error::NonFiniteGradient(name) => {
                        Error::NonFiniteGradient(format!("{name} (epoch {epoch}, scene {i})"))
                    }
                    other => other,
                })
            })
            .collect();
        let mut sum: Option<BTreeMap<String, DMatrix<f64>>> = None;
        for r in results {
            let (loss, g) = r?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss (epoch {epoch})")));
            }
            total += loss;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (k, v) in g {
                        *acc.get_mut(&k).expect("same tensor set") += v;
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        let scale = 1.0 / batch.len() as f64;
        for g in grads.values_mut() {
            *g *= scale;
        }
        state.adam.update(&mut state.params, &grads, cfg);
    }
    state.epoch = epoch;
    Ok(total / scenes.len() as f64)
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
/// Precision is measured on `eval` (the training scenes if empty).
pub fn train(
    state: &mut TrainState,
    scenes: &[ScenePair],
    eval: &[ScenePair],
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if cfg.objective == Objective::Regression {
        state.params.config.check_regression_head()?;
    }
    let eval = if eval.is_empty() { scenes } else { eval };
    let mut records = Vec::new();
    while state.epoch < cfg.epochs {
        let mean_loss = train_epoch(state, scenes, cfg, sinkhorn)?;
        let precision = match cfg.objective {
            Objective::Matching => mean_precision(&state.params, eval, sinkhorn)?,
            Objective::Regression => f64::NAN,
        };
        let rec = EpochRecord {
            epoch: state.epoch,
            mean_loss,
            match_precision_at_k: precision,
        };
        on_epoch(state, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// Row-major.
    values: Vec<f64>,
}

fn to_records(map: &BTreeMap<String, DMatrix<f64>>) -> Vec<TensorRecord> {
    map.iter()
        .map(|(name, t)| TensorRecord {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            values: t.transpose().iter().copied().collect(),
        })
        .collect()
}

fn from_records(records: Vec<TensorRecord>) -> Result<BTreeMap<String, DMatrix<f64>>> {
    let mut out = BTreeMap::new();
    for r in records {
        let [rows, cols] = r.shape;
        if r.values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                name: r.name,
                expected: (rows, cols),
                found: (r.values.len(), 1),
            });
        }
        out.insert(r.name, DMatrix::from_row_slice(rows, cols, &r.values));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamRecord {
    step: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    net: NetConfig,
    epoch: usize,
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    adam: Option<AdamRecord>,
}

const CHECKPOINT_FORMAT: &str = "linereg-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_json(state: &TrainState) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        net: state.params.config.clone(),
        epoch: state.epoch,
        tensors: to_records(&state.params.tensors),
        adam: Some(AdamRecord {
            step: state.adam.step,
            m: to_records(&state.adam.m),
            v: to_records(&state.adam.v),
        }),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))
}

/// Parses a checkpoint; tensors are checked against the shapes implied by its config.
pub fn checkpoint_from_json(text: &str) -> Result<TrainState> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {} v{}",
            file.format, file.version
        )));
    }
    let params = TrunkParams::from_tensors(&file.net, from_records(file.tensors)?)?;
    let adam = match file.adam {
        Some(a) => {
            let adam = Adam {
                step: a.step,
                m: from_records(a.m)?,
                v: from_records(a.v)?,
            };
            for moments in [&adam.m, &adam.v] {
                for (name, t) in &params.tensors {
                    match moments.get(name) {
                        Some(x) if x.shape() == t.shape() => {}
                        Some(x) => {
                            return Err(Error::ShapeMismatch {
                                name: name.clone(),
                                expected: t.shape(),
                                found: x.shape(),
                            })
                        }
                        None => return Err(Error::Config(format!("optimizer state lacks `{name}`"))),
                    }
                }
            }
            adam
        }
        None => Adam::new(&params),
    };
    Ok(TrainState {
        params,
        adam,
        epoch: file.epoch,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text)
}

/// Loads parameters only, rejecting a checkpoint built for a different network.
pub fn load_params(path: &Path, expected: Option<&NetConfig>) -> Result<TrunkParams> {
    let state = load_checkpoint(path)?;
    if let Some(cfg) = expected {
        for (name, shape) in TrunkParams::expected_shapes(cfg) {
            let found = state.params.tensors.get(&name).map(|t| t.shape());
            if found != Some(shape) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: found.unwrap_or((0, 0)),
                });
            }
        }
    }
    Ok(state.params)
}
