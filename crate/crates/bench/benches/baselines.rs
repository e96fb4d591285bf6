use criterion::{criterion_group, criterion_main, Criterion};
use ddnz_bench::test_image;
use ddnz_core::baselines::{nlm_denoise, NlmParams};
use ddnz_core::metrics::{psnr, ssim_default};

fn bench_nlm(c: &mut Criterion) {
    let img = test_image(32);
    let params = NlmParams::default();
    c.bench_function("nlm_denoise_32", |b| {
        b.iter(|| nlm_denoise(img.view(), img.view(), &params).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let a = test_image(64);
    let b_img = a.mapv(|v| v + 0.05);
    c.bench_function("psnr_64", |b| {
        b.iter(|| psnr(b_img.view(), a.view(), None).unwrap())
    });
    c.bench_function("ssim_64", |b| {
        b.iter(|| ssim_default(b_img.view(), a.view(), None).unwrap())
    });
}

criterion_group!(benches, bench_nlm, bench_metrics);
criterion_main!(benches);
