use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dptok_bench::tokens;
use dptok_core::{dp_decode, dp_encode, DelaySchedule, FieldVocabulary};

fn codec(c: &mut Criterion) {
    let vocab = FieldVocabulary::default();
    let schedule = DelaySchedule::uniform();
    let mut group = c.benchmark_group("delay_codec");
    for n in [100, 1000, 10_000] {
        let toks = tokens(n);
        let grid = dp_encode(&toks, &schedule, &vocab).unwrap();
        group.throughput(Throughput::Elements(toks.len() as u64));
        group.bench_with_input(BenchmarkId::new("encode", n), &toks, |b, t| {
            b.iter(|| dp_encode(t, &schedule, &vocab).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decode", n), &grid, |b, g| {
            b.iter(|| dp_decode(g, &vocab).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
