//! The five-row component ablation: raw tokens, pre-transformed tokens
//! without distillation, each distillation loss alone, and both.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::split::Split;
use super::train::{train_student, EpochLog, Molecule, TrainConfig};
use super::HarnessError;
use crate::attention::{ModelConfig, StkdModel};
use crate::distill::DistillConfig;
use crate::embedding::{PositionMode, Vocabulary};
use crate::exec::Execution;
use crate::teacher::TraceSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    RawTokens,
    NoDistill,
    FeatOnly,
    AttnOnly,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] =
        [AblationRow::RawTokens, AblationRow::NoDistill, AblationRow::FeatOnly, AblationRow::AttnOnly, AblationRow::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::RawTokens => "raw_tokens",
            AblationRow::NoDistill => "no_distill",
            AblationRow::FeatOnly => "feat_only",
            AblationRow::AttnOnly => "attn_only",
            AblationRow::Full => "full",
        }
    }

    pub fn pre_transform(self) -> bool {
        self != AblationRow::RawTokens
    }

    pub fn feature_transfer(self) -> bool {
        matches!(self, AblationRow::FeatOnly | AblationRow::Full)
    }

    pub fn attention_transfer(self) -> bool {
        matches!(self, AblationRow::AttnOnly | AblationRow::Full)
    }

    /// The distillation setup for this row, or `None` for task-only rows.
    pub fn distill_config(self, base: &DistillConfig) -> Option<DistillConfig> {
        if !self.feature_transfer() && !self.attention_transfer() {
            return None;
        }
        let mut cfg = base.clone();
        if !self.feature_transfer() {
            cfg.feat_pairs.clear();
        }
        if !self.attention_transfer() {
            cfg.attn_pairs.clear();
        }
        Some(cfg)
    }
}

/// Everything shared by the rows of one ablation.
pub struct AblationSetup<'a> {
    pub molecules: &'a [Molecule],
    pub split: &'a Split,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub traces: &'a TraceSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub val_mae: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Builds the untrained student for a row. Rows that share input mode get
/// identical initial weights for the same seed.
pub fn row_model(setup: &AblationSetup, row: AblationRow, seed: u64) -> Result<StkdModel, HarnessError> {
    let train = setup.split.train.iter().map(|&i| &setup.molecules[i]);
    let (vocab, position) = if row.pre_transform() {
        (Vocabulary::build(train.map(|m| &m.sequence))?, PositionMode::Structural)
    } else {
        (Vocabulary::build_raw(train.map(|m| m.raw_tokens.as_slice()))?, PositionMode::Sinusoidal)
    };
    let mut model = StkdModel::new(ModelConfig { position, ..setup.model.clone() }, vocab, seed);
    if row.distill_config(&setup.distill).is_some() {
        model.attach_distill(setup.traces.d_v, setup.traces.heads, false, seed);
    }
    Ok(model)
}

/// Trains every requested row once per seed.
pub fn run_ablation(
    setup: &AblationSetup,
    rows: &[AblationRow],
    seeds: &[u64],
    exec: Execution,
    progress: &mut dyn FnMut(&AblationResult, &[EpochLog]),
) -> Result<Vec<AblationResult>, HarnessError> {
    let mut out = Vec::with_capacity(rows.len() * seeds.len());
    for &seed in seeds {
        for &row in rows {
            let start = std::time::Instant::now();
            let model = row_model(setup, row, seed)?;
            let distill = row.distill_config(&setup.distill);
            let cfg = TrainConfig { seed, ..setup.train.clone() };
            let run = train_student(
                model,
                setup.molecules,
                &setup.split.train,
                &setup.split.val,
                &cfg,
                distill.as_ref().map(|d| (d, setup.traces)),
                exec,
                &mut |_, _| {},
            )?;
            let result = AblationResult {
                row,
                seed,
                val_mae: run.best_val_mae,
                best_epoch: run.best_epoch,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&result, &run.log);
            out.push(result);
        }
    }
    Ok(out)
}

/// Mean validation MAE of `row` over its seeds.
pub fn mean_val_mae(results: &[AblationResult], row: AblationRow) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| r.row == row).map(|r| r.val_mae).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One line per row with the component flags, per-seed MAE and the mean.
pub fn write_table_csv<W: Write>(w: W, results: &[AblationResult]) -> csv::Result<()> {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string(), "pre_transform".into(), "feature_transfer".into(), "attention_transfer".into()];
    header.extend(seeds.iter().map(|s| format!("val_mae_seed{s}")));
    header.push("val_mae_mean".into());
    out.write_record(&header)?;
    for row in AblationRow::ALL {
        let Some(mean) = mean_val_mae(results, row) else { continue };
        let mut rec = vec![
            row.name().to_string(),
            row.pre_transform().to_string(),
            row.feature_transfer().to_string(),
            row.attention_transfer().to_string(),
        ];
        for s in &seeds {
            let v = results.iter().find(|r| r.row == row && r.seed == *s);
            rec.push(v.map_or(String::new(), |r| r.val_mae.to_string()));
        }
        rec.push(mean.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
