use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ddnz_core::score::{build_score_net, ScoreNetConfig};
use ndarray::Array4;

fn config(size: usize, base: usize) -> ScoreNetConfig {
    ScoreNetConfig {
        image_size: size,
        base_channels: base,
        channel_multipliers: vec![1, 2],
        num_res_blocks: 1,
        attention_resolutions: vec![],
        in_channels: 2,
        time_embed_dim: 32,
    }
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_net_forward");
    for (size, base, batch) in [(32usize, 16usize, 1usize), (32, 16, 8), (64, 32, 1)] {
        let net = build_score_net::<f32>(&config(size, base), 7).unwrap();
        let x = Array4::<f32>::from_elem((batch, 2, size, size), 0.1);
        let ts = vec![50usize; batch];
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{size}px_b{base}_n{batch}")),
            &(net, x, ts),
            |b, (net, x, ts)| b.iter(|| net.forward_batch(x, ts).unwrap()),
        );
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let net = build_score_net::<f32>(&config(32, 16), 7).unwrap();
    let x = Array4::<f32>::from_elem((8, 2, 32, 32), 0.1);
    let ts = vec![50usize; 8];
    let target = Array4::<f32>::from_elem((8, 1, 32, 32), 0.0);
    c.bench_function("score_net_forward_backward_b8", |b| {
        b.iter(|| {
            net.forward_backward_batch(&x, &ts, |i, out| {
                let t = target.index_axis(ndarray::Axis(0), i);
                ndarray::Zip::from(out).and(&t).map_collect(|&o, &tv| 2.0 * (o - tv))
            })
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_train_step);
criterion_main!(benches);
