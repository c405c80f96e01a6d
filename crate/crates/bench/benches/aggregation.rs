use std::hint::black_box;

use byzdistill::defences::{self, AggregatorState, DefenceKind, DefenceSpec, GM_MAX_ITER, GM_TOLERANCE};
use byzdistill_bench::predictions;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn per_sample(c: &mut Criterion) {
    let mut group = c.benchmark_group("per_sample");
    for clients in [20, 100] {
        let set = predictions(clients, 1, 10, 1);
        let column = set.column(0);
        group.bench_with_input(BenchmarkId::new("geometric_median", clients), &column, |b, col| {
            b.iter(|| defences::geometric_median(black_box(col), GM_TOLERANCE, GM_MAX_ITER).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("filter_stats", clients), &column, |b, col| {
            b.iter(|| defences::filter_stats(black_box(col)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cronus", clients), &column, |b, col| {
            b.iter(|| defences::cronus_agg(black_box(col)).unwrap())
        });
    }
    group.finish();
}

fn round(c: &mut Criterion) {
    let set = predictions(20, 500, 5, 2);
    let mut group = c.benchmark_group("round_20x500");
    group.sample_size(20);
    let specs = [
        ("mean", DefenceSpec::plain(DefenceKind::Mean)),
        ("gm", DefenceSpec::plain(DefenceKind::Gm)),
        ("egf", DefenceSpec::expguard(DefenceKind::FilterScore)),
        ("eg_gm", DefenceSpec::expguard(DefenceKind::Gm)),
    ];
    for (name, spec) in specs {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut state = AggregatorState::new(20);
                defences::aggregate(&spec, black_box(&set), &mut state).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, per_sample, round);
criterion_main!(benches);
