use std::hint::black_box;

use causald_bench::{batch, dataset, ensemble, model_config, train_config};
use causald_core::distill::{
    fda_label, mediator_samples, pooled_feature, train_causald, DistillConfig, FdaHead, FeatureMode,
};
use causald_core::models::{train_base, Arch};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn inference(c: &mut Criterion) {
    let ds = dataset(500, 200);
    let train = ds.train_set();
    let tcfg = train_config(1);
    let mut group = c.benchmark_group("inference_256");
    for arch in [Arch::Din, Arch::DeepFm] {
        let (base, _) = train_base(model_config(arch, &train), &train, &tcfg, 1).unwrap();
        let teachers = ensemble(arch, &train, 4);
        let (student, _, _) = train_causald(
            model_config(arch, &train),
            &train,
            &teachers,
            &tcfg,
            &DistillConfig::default(),
            1,
        )
        .unwrap();
        let b = batch(&train, 256);
        group.bench_function(BenchmarkId::new("base", arch), |bench| {
            bench.iter(|| black_box(base.score(&b).unwrap()))
        });
        group.bench_function(BenchmarkId::new("causald", arch), |bench| {
            bench.iter(|| black_box(student.score(&b).unwrap()))
        });
    }
    group.finish();
}

fn epoch_cost(c: &mut Criterion) {
    let ds = dataset(300, 150);
    let train = ds.train_set();
    let tcfg = train_config(1);
    let teachers = ensemble(Arch::Din, &train, 4);
    let mut group = c.benchmark_group("epoch_din");
    group.sample_size(10);
    group.bench_function("base", |bench| {
        bench.iter(|| black_box(train_base(model_config(Arch::Din, &train), &train, &tcfg, 2).unwrap()))
    });
    group.bench_function("causald_k4", |bench| {
        bench.iter(|| {
            black_box(
                train_causald(
                    model_config(Arch::Din, &train),
                    &train,
                    &teachers,
                    &tcfg,
                    &DistillConfig::default(),
                    2,
                )
                .unwrap(),
            )
        })
    });
    group.finish();
}

fn label_scaling(c: &mut Criterion) {
    let ds = dataset(300, 150);
    let train = ds.train_set();
    let b = batch(&train, 256);
    let mut group = c.benchmark_group("fda_label_n256");
    for k in [2, 4, 8, 16] {
        let teachers = ensemble(Arch::Din, &train, k);
        let outs = mediator_samples(&teachers, &b).unwrap();
        let guide = pooled_feature(&outs.mediators, &teachers.pz, FeatureMode::Bda);
        let dm = teachers.teachers[0].config.mediator_dim();
        let head = FdaHead::new(dm, teachers.teachers[0].config.embed_dim, 16, 3);
        group.bench_function(BenchmarkId::from_parameter(k), |bench| {
            bench.iter(|| black_box(fda_label(&head, &outs, &guide, &guide).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, inference, epoch_cost, label_scaling);
criterion_main!(benches);
