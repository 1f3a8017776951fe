use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use stkd_core::attention::StkdModel;
use stkd_core::embedding::{PositionMode, Vocabulary};
use stkd_core::exec::{init_workers, Execution};
use stkd_core::harness::ablation::{run_ablation, write_table_csv, AblationSetup};
use stkd_core::harness::bench::bench_inference;
use stkd_core::harness::config::RunConfig;
use stkd_core::harness::synthetic::{wiener_corpus, write_corpus_csv};
use stkd_core::harness::train::{
    collect_traces, evaluate, prepare, train_student, train_teacher, EpochLog, Molecule, Prepared, TrainedStudent,
};
use stkd_core::harness::{load_dataset, random_split, Dataset, Normalizer, Split};
use stkd_core::smiles::GraphFeaturizer;
use stkd_core::teacher::{export_trace, load_trace, TeacherModel, TraceSet};

#[derive(Parser)]
#[command(name = "stkd", version, about = "SMILES transformer with graph-teacher distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Full-size student, paper layer pairs and optimizer schedule.
    #[arg(long)]
    paper_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and pre-transform the dataset; writes sequences.jsonl.
    Parse(Common),
    /// Train a student on the task loss alone.
    Train(Common),
    /// Train (or reuse) the teacher, export traces, and distill a student.
    Distill(Common),
    /// Evaluate the saved student on the test split.
    Eval(Common),
    /// Time raw-SMILES-to-prediction inference.
    Bench(Common),
    /// Run the five-row ablation over the configured seeds.
    Ablate(Common),
}

fn main() -> Result<()> {
    init_workers();
    let cli = Cli::parse();
    match cli.command {
        Command::Parse(c) => cmd_parse(&load_config(&c)?),
        Command::Train(c) => cmd_train(&load_config(&c)?, false),
        Command::Distill(c) => cmd_train(&load_config(&c)?, true),
        Command::Eval(c) => cmd_eval(&load_config(&c)?),
        Command::Bench(c) => cmd_bench(&load_config(&c)?),
        Command::Ablate(c) => cmd_ablate(&load_config(&c)?),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    if c.paper_config {
        cfg = cfg.with_paper_settings();
    }
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg)
}

fn event(value: serde_json::Value) {
    println!("{value}");
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data.path {
        Some(path) => load_dataset(path, &cfg.data.schema).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let corpus = wiener_corpus(&cfg.data.synthetic);
            let mut buf = Vec::new();
            write_corpus_csv(&mut buf, &corpus)?;
            fs::write(cfg.output_dir.join("synthetic.csv"), &buf)?;
            Dataset::from_reader(buf.as_slice(), &cfg.data.schema)?
        }
    };
    for s in &ds.skipped {
        event(json!({"event": "skipped_row", "line": s.line, "reason": s.reason}));
    }
    Ok(ds)
}

struct Data {
    prepared: Prepared,
    split: Split,
}

fn load_molecules(cfg: &RunConfig) -> Result<Data> {
    let ds = load_data(cfg)?;
    let featurizer = GraphFeaturizer { max_atomic_number: cfg.teacher.max_atomic_number };
    let prepared = prepare(&ds, featurizer, Execution::Parallel);
    for s in &prepared.skipped {
        event(json!({"event": "skipped_row", "line": s.line, "reason": s.reason}));
    }
    let split = random_split(prepared.molecules.len(), cfg.data.split_seed);
    event(json!({
        "event": "data",
        "records": prepared.molecules.len(),
        "skipped": ds.skipped.len() + prepared.skipped.len(),
        "targets": prepared.target_names,
        "train": split.train.len(), "val": split.val.len(), "test": split.test.len(),
    }));
    Ok(Data { prepared, split })
}

fn jsonl_logger(path: &Path, tag: &'static str) -> Result<impl FnMut(&EpochLog)> {
    let mut file = BufWriter::new(File::create(path)?);
    Ok(move |entry: &EpochLog| {
        entry.write_jsonl(&mut file).and_then(|_| file.flush()).expect("writing epoch log");
        let mut v = serde_json::to_value(entry).expect("log serializes");
        v["event"] = json!(tag);
        event(v);
    })
}

fn cmd_parse(cfg: &RunConfig) -> Result<()> {
    let data = load_molecules(cfg)?;
    let path = cfg.output_dir.join("sequences.jsonl");
    let mut out = BufWriter::new(File::create(&path)?);
    for m in &data.prepared.molecules {
        let s = &m.sequence;
        let line = json!({
            "smiles": m.smiles,
            "atoms": s.atom_tokens,
            "bonds": s.bond_tokens,
            "endpoints": s.bond_endpoints,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    event(json!({"event": "parse_done", "molecules": data.prepared.molecules.len(), "output": path}));
    Ok(())
}

/// Loads the teacher and its traces from the output directory, training
/// and exporting them first when missing.
fn teacher_and_traces(cfg: &RunConfig, data: &Data) -> Result<TraceSet> {
    let layers = cfg.distill.teacher_layers();
    let ckpt = cfg.teacher_checkpoint();
    let teacher = if ckpt.exists() {
        let (t, extra) = TeacherModel::load(&ckpt)?;
        event(json!({"event": "teacher_loaded", "path": ckpt, "val_mae": extra["val_mae"]}));
        t
    } else {
        let mut log = jsonl_logger(&cfg.output_dir.join("teacher_log.jsonl"), "teacher_epoch")?;
        let fresh = TeacherModel::new(cfg.teacher.clone(), cfg.teacher_train.seed);
        let run = train_teacher(
            fresh,
            &data.prepared.molecules,
            &data.split.train,
            &data.split.val,
            &cfg.teacher_train,
            Execution::Parallel,
            &mut |e, _| log(e),
        )?;
        run.model.save(&ckpt, run.checkpoint_extra())?;
        event(json!({"event": "teacher_saved", "path": ckpt, "val_mae": run.best_val_mae, "best_epoch": run.best_epoch}));
        run.model
    };
    let trace_path = cfg.trace_path();
    if trace_path.exists() {
        let set = load_trace(&trace_path)?;
        let have: std::collections::HashSet<u64> = set.traces.iter().map(|t| t.key).collect();
        let complete = data.split.train.iter().all(|&i| have.contains(&data.prepared.molecules[i].key));
        let layered = set.traces.first().is_none_or(|t| layers.iter().all(|&p| t.layer(p).is_ok()));
        if complete && layered {
            event(json!({"event": "trace_loaded", "path": trace_path, "molecules": set.traces.len()}));
            return Ok(set);
        }
    }
    let set = collect_traces(&teacher, &data.prepared.molecules, &data.split.train, &layers, Execution::Parallel)?;
    export_trace(&trace_path, set.d_v, set.heads, &set.traces)?;
    event(json!({"event": "trace_saved", "path": trace_path, "molecules": set.traces.len(), "layers": layers}));
    Ok(set)
}

fn student_vocab(molecules: &[Molecule], split: &Split, mode: PositionMode) -> Result<Vocabulary> {
    let train = split.train.iter().map(|&i| &molecules[i]);
    Ok(match mode {
        PositionMode::Structural => Vocabulary::build(train.map(|m| &m.sequence))?,
        PositionMode::Sinusoidal => Vocabulary::build_raw(train.map(|m| m.raw_tokens.as_slice()))?,
    })
}

fn cmd_train(cfg: &RunConfig, distill: bool) -> Result<()> {
    let data = load_molecules(cfg)?;
    let traces = if distill { Some(teacher_and_traces(cfg, &data)?) } else { None };
    let molecules = &data.prepared.molecules;
    let vocab = student_vocab(molecules, &data.split, cfg.model.position)?;
    let mut model = StkdModel::new(cfg.model.clone(), vocab, cfg.train.seed);
    if let Some(t) = &traces {
        model.attach_distill(t.d_v, t.heads, false, cfg.train.seed);
    }
    let log_name = if distill { "distill_log.jsonl" } else { "train_log.jsonl" };
    let mut log = jsonl_logger(&cfg.output_dir.join(log_name), "epoch")?;
    let run: TrainedStudent = train_student(
        model,
        molecules,
        &data.split.train,
        &data.split.val,
        &cfg.train,
        traces.as_ref().map(|t| (&cfg.distill, t)),
        Execution::Parallel,
        &mut |e, _| log(e),
    )?;
    let path = cfg.student_checkpoint();
    run.model.save(&path, run.checkpoint_extra())?;
    event(json!({"event": "student_saved", "path": path, "best_epoch": run.best_epoch, "val_mae": run.best_val_mae}));
    Ok(())
}

fn load_student(cfg: &RunConfig) -> Result<(StkdModel, Normalizer)> {
    let path = cfg.student_checkpoint();
    let (model, extra) = StkdModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let norm: Normalizer = serde_json::from_value(extra["normalizer"].clone()).context("checkpoint lacks a normalizer")?;
    Ok((model, norm))
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (model, norm) = load_student(cfg)?;
    let data = load_molecules(cfg)?;
    let molecules = &data.prepared.molecules;
    let path = cfg.output_dir.join("metrics.csv");
    let mut out = csv::Writer::from_path(&path)?;
    out.write_record(["split", "count", "mae", "rmse", "multi_mae", "avg_mae", "roc_auc"])?;
    for (name, items) in [("val", &data.split.val), ("test", &data.split.test)] {
        let m = evaluate(&model, molecules, items, &norm, Execution::Parallel)?;
        let auc = m.roc_auc.map_or(String::new(), |v| v.to_string());
        out.write_record([name, &m.count.to_string(), &m.mae.to_string(), &m.rmse.to_string(), &m.multi_mae.to_string(), &m.avg_mae.to_string(), &auc])?;
        let mut v = serde_json::to_value(&m)?;
        v["event"] = json!("metrics");
        v["split"] = json!(name);
        event(v);
    }
    out.flush()?;
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let file = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut lines = file.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.contains(',') || first.trim() == "smiles" {
        let ds = load_dataset(path, &Default::default())?;
        return Ok(ds.records.into_iter().map(|r| r.smiles).collect());
    }
    let mut out = vec![first];
    for line in lines {
        out.push(line?);
    }
    Ok(out.into_iter().map(|l| l.split_whitespace().next().unwrap_or("").to_string()).filter(|s| !s.is_empty()).collect())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let (model, _) = load_student(cfg)?;
    let (id, corpus) = match &cfg.bench.corpus {
        Some(path) => (path.display().to_string(), read_corpus(path)?),
        None => ("dataset".to_string(), load_data(cfg)?.records.into_iter().map(|r| r.smiles).collect()),
    };
    if corpus.is_empty() {
        bail!("benchmark corpus is empty");
    }
    let report = bench_inference(&model, &id, &corpus, cfg.bench.batch_size, cfg.bench.runs)?;
    let path = cfg.output_dir.join("bench.csv");
    let mut out = csv::Writer::from_path(&path)?;
    out.write_record(["run", "pre_transform_ms", "model_ms", "total_ms", "ms_per_molecule"])?;
    for (i, r) in report.runs.iter().enumerate() {
        out.write_record([i.to_string(), r.pre_transform_ms.to_string(), r.model_ms.to_string(), r.total_ms.to_string(), r.ms_per_molecule.to_string()])?;
    }
    out.write_record([
        "mean".to_string(),
        (report.pre_transform_ms_per_molecule * report.molecules as f64).to_string(),
        (report.model_ms_per_molecule * report.molecules as f64).to_string(),
        (report.ms_per_molecule * report.molecules as f64).to_string(),
        report.ms_per_molecule.to_string(),
    ])?;
    out.flush()?;
    let mut v = serde_json::to_value(&report)?;
    v["event"] = json!("bench");
    v["pre_transform_share"] = json!(report.pre_transform_share());
    event(v);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let data = load_molecules(cfg)?;
    let traces = teacher_and_traces(cfg, &data)?;
    let setup = AblationSetup {
        molecules: &data.prepared.molecules,
        split: &data.split,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        distill: cfg.distill.clone(),
        traces: &traces,
    };
    let results = run_ablation(&setup, &cfg.ablation.rows, &cfg.ablation.seeds, Execution::Parallel, &mut |r, _| {
        event(json!({"event": "ablation_row", "row": r.row.name(), "seed": r.seed, "val_mae": r.val_mae, "best_epoch": r.best_epoch, "seconds": r.seconds}));
    })?;
    let path = cfg.output_dir.join("ablation.csv");
    write_table_csv(File::create(&path)?, &results)?;
    event(json!({"event": "ablation_done", "table": path}));
    Ok(())
}
