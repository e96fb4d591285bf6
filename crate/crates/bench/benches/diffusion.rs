use criterion::{criterion_group, criterion_main, Criterion};
use ddnz_bench::test_image;
use ddnz_core::{ancestral_step, forward_sample, Schedule};

fn bench_schedule(c: &mut Criterion) {
    c.bench_function("schedule_new_t1000", |b| {
        b.iter(|| Schedule::default_linear(std::hint::black_box(1000)).unwrap())
    });
}

fn bench_steps(c: &mut Criterion) {
    let sched = Schedule::default_linear(1000).unwrap();
    let x0 = test_image(64).into_dyn();
    let eps = test_image(64).mapv(|v| v - 1.0).into_dyn();
    c.bench_function("forward_sample_64", |b| {
        b.iter(|| forward_sample(&x0, std::hint::black_box(500), &eps, &sched).unwrap())
    });
    let z = eps.clone();
    c.bench_function("ancestral_step_64", |b| {
        b.iter(|| ancestral_step(&x0, &eps, std::hint::black_box(500), &z, &sched).unwrap())
    });
}

criterion_group!(benches, bench_schedule, bench_steps);
criterion_main!(benches);
