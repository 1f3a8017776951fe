use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stkd_core::attention::{ModelConfig, StkdModel};
use stkd_core::distill::DistillConfig;
use stkd_core::embedding::Vocabulary;
use stkd_core::exec::{init_workers, Execution};
use stkd_core::harness::synthetic::{wiener_corpus, write_corpus_csv, SyntheticConfig};
use stkd_core::harness::train::{collect_traces, fit, fit_normalizer, predict_student, prepare, StudentObjective, TraceIndex, TrainConfig};
use stkd_core::harness::{Dataset, Schema};
use stkd_core::smiles::GraphFeaturizer;
use stkd_core::teacher::{TeacherConfig, TeacherModel};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn bench_modes(c: &mut Criterion) {
    init_workers();
    let corpus = wiener_corpus(&SyntheticConfig { molecules: 128, ..Default::default() });
    let mut csv = Vec::new();
    write_corpus_csv(&mut csv, &corpus).unwrap();
    let ds = Dataset::from_reader(csv.as_slice(), &Schema::default()).unwrap();
    let molecules = prepare(&ds, GraphFeaturizer::default(), Execution::Parallel).molecules;
    let items: Vec<usize> = (0..molecules.len()).collect();

    let distill = DistillConfig::desk();
    let teacher = TeacherModel::new(TeacherConfig::default(), 0);
    let traces = collect_traces(&teacher, &molecules, &items, &distill.teacher_layers(), Execution::Parallel).unwrap();
    let vocab = Vocabulary::build(molecules.iter().map(|m| &m.sequence)).unwrap();
    let mut model = StkdModel::new(ModelConfig::desk(), vocab, 0);
    model.attach_distill(traces.d_v, traces.heads, false, 0);
    let norm = fit_normalizer(&molecules, &items);
    let objective = StudentObjective::new(&molecules, &norm, Some((&distill, TraceIndex::new(&traces))));
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::desk() };

    let mut group = c.benchmark_group("distill_epoch_128");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut m = model.clone();
                fit(&mut m, &cfg, &items, exec, &objective, |_| Ok(0.0), &mut |_, _| {}).unwrap()
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("predict_128");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_student(&model, &molecules, &items, &norm, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
