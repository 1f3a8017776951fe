//! Mini-batch training with one tape per sample.
//!
//! Each batch is split across workers, every sample builds and
//! differentiates its own tape, and the per-sample gradients are summed in
//! batch order. Results therefore do not depend on the worker count.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SkippedRow};
use super::metrics::{Metrics, Normalizer};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
use super::HarnessError;
use crate::attention::{predict, st_forward, ModelInput, StkdModel};
use crate::distill::{attn_loss, feat_loss, total_loss, DistillConfig, LayerPair, LossBundle, StageWeights};
use crate::embedding::PositionMode;
use crate::exec::Execution;
use crate::smiles::{pre_transform, tokenize_raw, GraphFeaturizer, GraphFeatures, UnifiedSequence};
use crate::teacher::{teacher_forward, TeacherModel, TeacherTrace, TraceSet};
use crate::tensor::{Grads, ParamStore, Tape, Tensor, Var};

/// Samples whose gradients are held in memory at once.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            schedule: LrSchedule::Cosine,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    pub fn paper() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Constant,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let o = &self.optimizer;
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(HarnessError::Config("lr, weight decay, eps must be non-negative and clip_norm positive".into()));
        }
        let (b1, b2) = o.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(HarnessError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A parsed, pre-transformed and featurized molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    /// Line number in the source file; also the trace key.
    pub key: u64,
    pub smiles: String,
    pub sequence: UnifiedSequence,
    pub raw_tokens: Vec<String>,
    pub features: GraphFeatures,
    /// Targets in original units, `NaN` where missing.
    pub targets: Vec<f64>,
}

impl Molecule {
    pub fn input(&self, mode: PositionMode) -> ModelInput<'_> {
        match mode {
            PositionMode::Structural => ModelInput::Unified(&self.sequence),
            PositionMode::Sinusoidal => ModelInput::Raw(&self.raw_tokens),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub target_names: Vec<String>,
    pub molecules: Vec<Molecule>,
    /// Rows the featurizer could not handle.
    pub skipped: Vec<SkippedRow>,
}

/// Pre-transforms and featurizes every record.
pub fn prepare(ds: &Dataset, featurizer: GraphFeaturizer, exec: Execution) -> Prepared {
    let results = exec.map_indexed(ds.records.len(), |i| {
        let r = &ds.records[i];
        featurizer
            .featurize(&r.graph)
            .map(|features| Molecule {
                key: r.line,
                smiles: r.smiles.clone(),
                sequence: pre_transform(&r.graph),
                raw_tokens: tokenize_raw(&r.smiles),
                features,
                targets: r.targets.clone(),
            })
            .map_err(|e| SkippedRow { line: r.line, reason: e.to_string() })
    });
    let mut molecules = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(m) => molecules.push(m),
            Err(s) => skipped.push(s),
        }
    }
    Prepared { target_names: ds.target_names.clone(), molecules, skipped }
}

/// Anything with a parameter store the optimizer can update.
pub trait Trainable: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for StkdModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for TeacherModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Loss values and gradient for one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: f64,
    pub task: f64,
    pub feat: f64,
    pub attn: f64,
    pub grads: Grads,
}

/// Per-sample loss and the stage label for an epoch.
pub trait Objective<M>: Sync {
    fn sample(&self, model: &M, item: usize, epoch: usize, seed: u64) -> Result<SampleLoss, HarnessError>;

    fn stage(&self, _epoch: usize) -> &'static str {
        "main"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub train_loss: f64,
    pub task_loss: f64,
    pub feat_loss: f64,
    pub attn_loss: f64,
    /// Mean pre-clipping gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub val_metric: f64,
    pub best: bool,
    pub seconds: f64,
}

impl EpochLog {
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        writeln!(w)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best_params: ParamStore,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one sample's dropout masks.
pub fn sample_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    mix(mix(seed ^ mix(epoch as u64)) ^ item as u64)
}

/// Trains `model` on the items in `train`, keeping the parameters of the
/// epoch with the lowest `validate` value (first wins on ties).
pub fn fit<M, O, V>(
    model: &mut M,
    cfg: &TrainConfig,
    train: &[usize],
    exec: Execution,
    objective: &O,
    mut validate: V,
    observer: &mut dyn FnMut(&EpochLog, &M),
) -> Result<FitOutcome, HarnessError>
where
    M: Trainable,
    O: Objective<M>,
    V: FnMut(&M) -> Result<f64, HarnessError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
    let mut log = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * order.len().div_ceil(cfg.batch_size);
    let mut global_step = 0usize;
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut task, mut feat, mut attn, mut norm_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Grads> = None;
            for chunk in batch.chunks(GRAD_CHUNK) {
                let m: &M = model;
                let results = exec.map(chunk, |&item| objective.sample(m, item, epoch, sample_seed(cfg.seed, epoch, item)));
                for r in results {
                    let s = r?;
                    total += s.total;
                    task += s.task;
                    feat += s.feat;
                    attn += s.attn;
                    match grads.as_mut() {
                        Some(g) => g.add_assign(&s.grads),
                        None => grads = Some(s.grads),
                    }
                }
            }
            let mut g = grads.expect("non-empty batch");
            g.scale(1.0 / batch.len() as f64);
            norm_sum += clip_grad_norm(&mut g, cfg.clip_norm);
            opt.config.lr = cfg.optimizer.lr * cfg.schedule.factor(global_step, total_steps);
            opt.step(model.params_mut(), &g);
            global_step += 1;
            steps += 1;
        }
        let val = validate(model)?;
        let improved = best.as_ref().is_none_or(|b| val < b.1);
        if improved {
            best = Some((epoch, val, model.params().clone()));
        }
        let n = order.len() as f64;
        let entry = EpochLog {
            epoch,
            stage: objective.stage(epoch).to_string(),
            train_loss: total / n,
            task_loss: task / n,
            feat_loss: feat / n,
            attn_loss: attn / n,
            grad_norm: norm_sum / steps as f64,
            val_metric: val,
            best: improved,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&entry, model);
        log.push(entry);
    }
    let (best_epoch, best_val, best_params) = match best {
        Some(b) => b,
        None => (0, validate(model)?, model.params().clone()),
    };
    Ok(FitOutcome { log, best_epoch, best_val, best_params })
}

/// Mean squared error against standardized targets, skipping missing ones.
pub fn task_loss(tape: &mut Tape, prediction: Var, target: &[f64]) -> Result<Var, HarnessError> {
    let k = target.len();
    let present = target.iter().filter(|v| !v.is_nan()).count();
    if present == k {
        let t = Tensor::new(vec![1, k], target.to_vec())?;
        return Ok(tape.mse_const(prediction, &t)?);
    }
    let mask = Tensor::new(vec![1, k], target.iter().map(|v| if v.is_nan() { 0.0 } else { 1.0 }).collect())?;
    let t = Tensor::new(vec![1, k], target.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect())?;
    let masked = tape.mul_const(prediction, &mask)?;
    let mse = tape.mse_const(masked, &t)?;
    let scale = if present == 0 { 0.0 } else { k as f64 / present as f64 };
    Ok(tape.scale(mse, scale)?)
}

/// Distillation terms for one molecule, keyed by layer pair.
pub type DistillTerms = (Vec<(LayerPair, Var)>, Vec<(LayerPair, Var)>);

/// Builds the student's full objective for one molecule on `tape`.
pub fn student_loss(
    tape: &mut Tape,
    model: &StkdModel,
    mol: &Molecule,
    target: &[f64],
    distill: Option<(&DistillConfig, &TeacherTrace)>,
    weights: StageWeights,
) -> Result<LossBundle, HarnessError> {
    let fwd = st_forward(tape, model, mol.input(model.config.position))?;
    let task = task_loss(tape, fwd.prediction, target)?;
    let empty = DistillConfig { feat_pairs: vec![], attn_pairs: vec![], ..DistillConfig::desk() };
    let Some((cfg, trace)) = distill else {
        return Ok(total_loss(tape, task, &[], &[], &empty, weights)?);
    };
    let mut feat = Vec::with_capacity(cfg.feat_pairs.len());
    let w_feat = model.distill.w_feat.map(|id| tape.param(id));
    for &(p, q) in &cfg.feat_pairs {
        let t = trace.layer(p)?;
        let term = feat_loss(tape, &t.x0, fwd.virtual_rows[q], w_feat)?;
        feat.push(((p, q), term));
    }
    let mut attn = Vec::with_capacity(cfg.attn_pairs.len());
    let w_attn = model.distill.w_attn.map(|id| tape.param(id));
    for &(p, q) in &cfg.attn_pairs {
        let t = trace.layer(p)?;
        let term = attn_loss(tape, &t.attn, &fwd.layers[q].bias, &fwd.mask, w_attn)?;
        attn.push(((p, q), term));
    }
    Ok(total_loss(tape, task, &feat, &attn, cfg, weights)?)
}

/// Traces indexed by molecule key.
#[derive(Clone, Debug, Default)]
pub struct TraceIndex<'a> {
    by_key: HashMap<u64, &'a TeacherTrace>,
}

impl<'a> TraceIndex<'a> {
    pub fn new(set: &'a TraceSet) -> TraceIndex<'a> {
        TraceIndex { by_key: set.traces.iter().map(|t| (t.key, t)).collect() }
    }

    pub fn get(&self, key: u64) -> Option<&'a TeacherTrace> {
        self.by_key.get(&key).copied()
    }
}

/// Student objective: task loss on standardized targets, plus
/// distillation when a configuration and traces are supplied.
pub struct StudentObjective<'a> {
    pub molecules: &'a [Molecule],
    pub targets: Vec<Vec<f64>>,
    pub distill: Option<(&'a DistillConfig, TraceIndex<'a>)>,
}

impl<'a> StudentObjective<'a> {
    pub fn new(molecules: &'a [Molecule], norm: &Normalizer, distill: Option<(&'a DistillConfig, TraceIndex<'a>)>) -> Self {
        let targets = molecules.iter().map(|m| norm.forward(&m.targets)).collect();
        StudentObjective { molecules, targets, distill }
    }

    pub fn weights(&self, epoch: usize) -> StageWeights {
        match &self.distill {
            Some((cfg, _)) => cfg.weights(cfg.stage(epoch)),
            None => StageWeights::TASK_ONLY,
        }
    }
}

impl Objective<StkdModel> for StudentObjective<'_> {
    fn sample(&self, model: &StkdModel, item: usize, epoch: usize, seed: u64) -> Result<SampleLoss, HarnessError> {
        let mol = &self.molecules[item];
        let distill = match &self.distill {
            Some((cfg, index)) => {
                let trace = index.get(mol.key).ok_or(crate::teacher::TraceError::MissingMolecule(mol.key))?;
                Some((*cfg, trace))
            }
            None => None,
        };
        let mut tape = Tape::new(&model.params).with_dropout(model.config.dropout, seed);
        let bundle = student_loss(&mut tape, model, mol, &self.targets[item], distill, self.weights(epoch))?;
        let grads = tape.backward(bundle.total);
        Ok(SampleLoss {
            total: bundle.total_value,
            task: bundle.task,
            feat: bundle.feat.iter().map(|(_, v)| v).sum(),
            attn: bundle.attn.iter().map(|(_, v)| v).sum(),
            grads,
        })
    }

    fn stage(&self, epoch: usize) -> &'static str {
        match &self.distill {
            Some((cfg, _)) if cfg.stage(epoch) == crate::distill::Stage::Initial => "initial",
            _ => "main",
        }
    }
}

/// Teacher objective: task loss on standardized targets.
pub struct TeacherObjective<'a> {
    pub molecules: &'a [Molecule],
    pub targets: Vec<Vec<f64>>,
}

impl<'a> TeacherObjective<'a> {
    pub fn new(molecules: &'a [Molecule], norm: &Normalizer) -> Self {
        TeacherObjective { molecules, targets: molecules.iter().map(|m| norm.forward(&m.targets)).collect() }
    }
}

impl Objective<TeacherModel> for TeacherObjective<'_> {
    fn sample(&self, model: &TeacherModel, item: usize, _epoch: usize, _seed: u64) -> Result<SampleLoss, HarnessError> {
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &self.molecules[item].features)?;
        let loss = task_loss(&mut tape, out.prediction, &self.targets[item])?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss);
        Ok(SampleLoss { total: value, task: value, feat: 0.0, attn: 0.0, grads })
    }
}

/// Standardization statistics from the training items.
pub fn fit_normalizer(molecules: &[Molecule], train: &[usize]) -> Normalizer {
    Normalizer::fit(train.iter().map(|&i| molecules[i].targets.as_slice()))
}

/// Predictions in original units for the molecules at `items`.
pub fn predict_student(
    model: &StkdModel,
    molecules: &[Molecule],
    items: &[usize],
    norm: &Normalizer,
    exec: Execution,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    exec.map(items, |&i| Ok(norm.inverse(&predict(model, molecules[i].input(model.config.position))?)))
        .into_iter()
        .collect()
}

pub fn predict_teacher(
    model: &TeacherModel,
    molecules: &[Molecule],
    items: &[usize],
    norm: &Normalizer,
    exec: Execution,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    exec.map(items, |&i| {
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &molecules[i].features)?;
        Ok(norm.inverse(tape.value(out.prediction).data()))
    })
    .into_iter()
    .collect()
}

fn targets_of(molecules: &[Molecule], items: &[usize]) -> Vec<Vec<f64>> {
    items.iter().map(|&i| molecules[i].targets.clone()).collect()
}

/// Held-out metrics in original units; `norm` comes from the training split.
pub fn evaluate(
    model: &StkdModel,
    molecules: &[Molecule],
    items: &[usize],
    norm: &Normalizer,
    exec: Execution,
) -> Result<Metrics, HarnessError> {
    let rows = model.params.get(model.embed.token).shape()[0];
    if rows != model.vocab.len() {
        return Err(HarnessError::VocabMismatch { vocab: model.vocab.len(), rows });
    }
    let pred = predict_student(model, molecules, items, norm, exec)?;
    Ok(Metrics::compute(&pred, &targets_of(molecules, items), norm))
}

pub fn evaluate_teacher(
    model: &TeacherModel,
    molecules: &[Molecule],
    items: &[usize],
    norm: &Normalizer,
    exec: Execution,
) -> Result<Metrics, HarnessError> {
    let pred = predict_teacher(model, molecules, items, norm, exec)?;
    Ok(Metrics::compute(&pred, &targets_of(molecules, items), norm))
}

/// A finished run: the best-validation model and its log.
#[derive(Clone, Debug)]
pub struct TrainedStudent {
    pub model: StkdModel,
    pub normalizer: Normalizer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl TrainedStudent {
    /// Metadata stored next to the parameters.
    pub fn checkpoint_extra(&self) -> serde_json::Value {
        serde_json::json!({
            "normalizer": self.normalizer,
            "best_epoch": self.best_epoch,
            "val_mae": self.best_val_mae,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub model: TeacherModel,
    pub normalizer: Normalizer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl TrainedTeacher {
    pub fn checkpoint_extra(&self) -> serde_json::Value {
        serde_json::json!({
            "normalizer": self.normalizer,
            "best_epoch": self.best_epoch,
            "val_mae": self.best_val_mae,
        })
    }
}

/// Trains a student, with distillation when `distill` is given. The
/// returned model holds the best-validation parameters; its validation MAE
/// is the selection metric.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    mut model: StkdModel,
    molecules: &[Molecule],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    distill: Option<(&DistillConfig, &TraceSet)>,
    exec: Execution,
    observer: &mut dyn FnMut(&EpochLog, &StkdModel),
) -> Result<TrainedStudent, HarnessError> {
    let norm = fit_normalizer(molecules, train);
    if let Some((dc, set)) = distill {
        dc.validate(model.config.biased_range(), usize::MAX)?;
        let index = TraceIndex::new(set);
        for &i in train {
            let key = molecules[i].key;
            let t = index.get(key).ok_or(crate::teacher::TraceError::MissingMolecule(key))?;
            if t.n != molecules[i].sequence.n() {
                return Err(crate::teacher::TraceError::LengthMismatch { key, teacher: t.n, student: molecules[i].sequence.n() }.into());
            }
        }
        if dc.is_active() && model.config.position != PositionMode::Structural {
            return Err(HarnessError::Config("distillation needs pre-transformed input".into()));
        }
    }
    let objective = StudentObjective::new(molecules, &norm, distill.map(|(dc, set)| (dc, TraceIndex::new(set))));
    let outcome = fit(
        &mut model,
        cfg,
        train,
        exec,
        &objective,
        |m: &StkdModel| Ok(evaluate(m, molecules, val, &norm, exec)?.mae),
        observer,
    )?;
    model.params = outcome.best_params;
    Ok(TrainedStudent {
        model,
        normalizer: norm,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val,
    })
}

pub fn train_teacher(
    mut model: TeacherModel,
    molecules: &[Molecule],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    exec: Execution,
    observer: &mut dyn FnMut(&EpochLog, &TeacherModel),
) -> Result<TrainedTeacher, HarnessError> {
    let norm = fit_normalizer(molecules, train);
    let objective = TeacherObjective::new(molecules, &norm);
    let outcome = fit(
        &mut model,
        cfg,
        train,
        exec,
        &objective,
        |m: &TeacherModel| Ok(evaluate_teacher(m, molecules, val, &norm, exec)?.mae),
        observer,
    )?;
    model.params = outcome.best_params;
    Ok(TrainedTeacher {
        model,
        normalizer: norm,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val,
    })
}

/// Runs the teacher over `items` and records the given layers.
pub fn collect_traces(
    teacher: &TeacherModel,
    molecules: &[Molecule],
    items: &[usize],
    layers: &[usize],
    exec: Execution,
) -> Result<TraceSet, HarnessError> {
    let traces = exec
        .map(items, |&i| teacher_forward(teacher, &molecules[i].features, molecules[i].key, layers).map(|(_, t)| t))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceSet { d_v: teacher.config.d_model, heads: teacher.config.heads, traces })
}
