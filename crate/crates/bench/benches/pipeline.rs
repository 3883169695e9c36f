use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dsted_bench::benchmark_sequences;
use dsted_core::rmp::{self, MemoryBank, MemoryEntry, RmpConfig};
use dsted_core::upr;
use dsted_core::{forward_frame, train, PhaseDistribution, TrainConfig};

fn memory_selection(c: &mut Criterion) {
    let seq = &benchmark_sequences(1)[0];
    let cfg = RmpConfig::default();
    let mut bank = MemoryBank::new(cfg.capacity);
    let p = PhaseDistribution::uniform(7);
    for (t, f) in seq.features.iter().take(cfg.capacity).enumerate() {
        bank.push(MemoryEntry::new(f.clone(), p.clone(), t as u64)).unwrap();
    }
    let f_t = &seq.features[cfg.capacity];
    c.bench_function("rmp_select_and_weight_k60_d32", |b| {
        b.iter(|| {
            let selected = rmp::select_and_weight(&bank, black_box(f_t), &p, cfg.capacity as u64, &cfg).unwrap();
            black_box(rmp::weighted_context(&selected))
        })
    });
}

fn prototype_retrieval(c: &mut Criterion) {
    let seqs = benchmark_sequences(4);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let model = train(&seqs[..3], 7, &cfg, 0).unwrap().model;
    let f_t = &seqs[3].features[100];
    let p = PhaseDistribution::uniform(7);
    c.bench_function("upr_retrieve_top8_of_448", |b| {
        b.iter(|| black_box(upr::retrieve(black_box(f_t), &p, &model.banks, 8).unwrap()))
    });
}

fn streaming_frame(c: &mut Criterion) {
    let seqs = benchmark_sequences(4);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let model = train(&seqs[..3], 7, &cfg, 0).unwrap().model;
    let test = &seqs[3];
    c.bench_function("forward_frame_full_pipeline", |b| {
        b.iter_batched(
            || {
                let mut session = model.session();
                for (t, f) in test.features.iter().take(80).enumerate() {
                    forward_frame(&model, &mut session, f, t as u64).unwrap();
                }
                session
            },
            |mut session| black_box(forward_frame(&model, &mut session, &test.features[80], 80).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, memory_selection, prototype_retrieval, streaming_frame);
criterion_main!(benches);
