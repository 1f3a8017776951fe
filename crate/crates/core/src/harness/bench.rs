//! Wall-clock inference benchmark from raw SMILES to prediction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attention::{predict, ModelInput, StkdModel};
use crate::embedding::PositionMode;
use crate::smiles::{smiles_to_sequence, tokenize_raw, UnifiedSequence};

/// Timings of one pass over the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub pre_transform_ms: f64,
    pub model_ms: f64,
    pub total_ms: f64,
    pub ms_per_molecule: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub corpus: String,
    pub molecules: usize,
    pub batch_size: usize,
    pub runs: Vec<RunTiming>,
    /// Mean over runs of end-to-end ms per molecule.
    pub ms_per_molecule: f64,
    pub pre_transform_ms_per_molecule: f64,
    pub model_ms_per_molecule: f64,
    /// Molecules the parser rejected; they are timed but not predicted.
    pub rejected: usize,
}

impl ThroughputReport {
    pub fn pre_transform_share(&self) -> f64 {
        self.pre_transform_ms_per_molecule / self.ms_per_molecule
    }
}

enum Prepared {
    Unified(UnifiedSequence),
    Raw(Vec<String>),
    Rejected,
}

fn one_pass(model: &StkdModel, corpus: &[String], batch_size: usize) -> Result<(RunTiming, usize), HarnessError> {
    let (mut pre, mut fwd) = (0.0, 0.0);
    let mut rejected = 0;
    let total_start = Instant::now();
    for batch in corpus.chunks(batch_size.max(1)) {
        let t = Instant::now();
        let inputs: Vec<Prepared> = batch
            .iter()
            .map(|s| match model.config.position {
                PositionMode::Structural => smiles_to_sequence(s).map_or(Prepared::Rejected, Prepared::Unified),
                PositionMode::Sinusoidal => Prepared::Raw(tokenize_raw(s)),
            })
            .collect();
        pre += t.elapsed().as_secs_f64();
        let t = Instant::now();
        for input in &inputs {
            let out = match input {
                Prepared::Unified(seq) => predict(model, ModelInput::Unified(seq))?,
                Prepared::Raw(tokens) => predict(model, ModelInput::Raw(tokens))?,
                Prepared::Rejected => {
                    rejected += 1;
                    continue;
                }
            };
            std::hint::black_box(out);
        }
        fwd += t.elapsed().as_secs_f64();
    }
    let total = total_start.elapsed().as_secs_f64() * 1e3;
    let n = corpus.len().max(1) as f64;
    let timing = RunTiming { pre_transform_ms: pre * 1e3, model_ms: fwd * 1e3, total_ms: total, ms_per_molecule: total / n };
    Ok((timing, rejected))
}

/// One untimed warm-up pass, then `runs` timed passes on the calling thread.
pub fn bench_inference(
    model: &StkdModel,
    corpus_id: &str,
    corpus: &[String],
    batch_size: usize,
    runs: usize,
) -> Result<ThroughputReport, HarnessError> {
    let (_, rejected) = one_pass(model, corpus, batch_size)?;
    let mut timings = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        timings.push(one_pass(model, corpus, batch_size)?.0);
    }
    let n = corpus.len().max(1) as f64;
    let k = timings.len() as f64;
    let mean = |f: fn(&RunTiming) -> f64| timings.iter().map(f).sum::<f64>() / k;
    Ok(ThroughputReport {
        corpus: corpus_id.to_string(),
        molecules: corpus.len(),
        batch_size,
        ms_per_molecule: mean(|r| r.ms_per_molecule),
        pre_transform_ms_per_molecule: mean(|r| r.pre_transform_ms) / n,
        model_ms_per_molecule: mean(|r| r.model_ms) / n,
        runs: timings,
        rejected,
    })
}

/// Mean ms per molecule of SMILES parsing plus pre-transformation alone,
/// over `runs` passes after one warm-up.
pub fn bench_pre_transform(corpus: &[String], runs: usize) -> f64 {
    let pass = || {
        let t = Instant::now();
        for s in corpus {
            std::hint::black_box(smiles_to_sequence(s).ok());
        }
        t.elapsed().as_secs_f64() * 1e3
    };
    pass();
    let total: f64 = (0..runs.max(1)).map(|_| pass()).sum();
    total / runs.max(1) as f64 / corpus.len().max(1) as f64
}
