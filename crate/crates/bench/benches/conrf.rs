use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use conrf_bench::toy_renderer;
use conrf_core::encoders::make_toy_encoders;
use conrf_core::evaluation::masked_ssim;
use conrf_core::image::Image;
use conrf_core::selection::{multi_spatial_features, WindowSpec};
use conrf_core::style_core::{transfer_deferred, transfer_per_point, StyleStatistics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn render(c: &mut Criterion) {
    let dir = tempfile_dir();
    let bench = toy_renderer(&dir).unwrap();
    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    for side in [64, 128, 256] {
        let spec = bench.text_spec(side);
        g.bench_with_input(BenchmarkId::new("text", side), &spec, |b, s| b.iter(|| bench.renderer.render(s).unwrap()));
        let spec = bench.local_spec(side);
        g.bench_with_input(BenchmarkId::new("local", side), &spec, |b, s| b.iter(|| bench.renderer.render(s).unwrap()));
    }
    g.finish();
    let _ = std::fs::remove_dir_all(dir);
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("conrf_bench_{}", std::process::id()))
}

fn transfer(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (rays, n, ch) = (4096, 64, 16);
    let weights: Vec<f32> = (0..rays * n).map(|_| r.random_range(0.0..1.0f32) / n as f32).collect();
    let features: Vec<f32> = (0..rays * n * ch).map(|_| r.random_range(-1.0..1.0)).collect();
    let stats = StyleStatistics::new(vec![0.3; ch], vec![1.5; ch]).unwrap();
    let mut rendered = vec![0.0f32; rays * ch];
    let mut acc = vec![0.0f32; rays];
    for ray in 0..rays {
        for i in ray * n..(ray + 1) * n {
            acc[ray] += weights[i];
            for k in 0..ch {
                rendered[ray * ch + k] += weights[i] * features[i * ch + k];
            }
        }
    }
    let mut g = c.benchmark_group("transfer");
    g.bench_function("per_point", |b| b.iter(|| transfer_per_point(&weights, &features, n, &stats).unwrap()));
    g.bench_function("deferred", |b| b.iter(|| transfer_deferred(&rendered, &acc, &stats).unwrap()));
    g.finish();
}

fn multi_spatial(c: &mut Criterion) {
    let (encoder, _, _) = make_toy_encoders(0, 32, [8, 16, 16, 32]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let img = Image::from_fn(64, 64, |_, _| [r.random(), r.random(), r.random()]);
    let mut g = c.benchmark_group("multi_spatial");
    g.sample_size(10);
    for sizes in [vec![16], vec![8, 16, 32]] {
        let spec = WindowSpec::new(sizes.clone(), None);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{sizes:?}")), &spec, |b, s| {
            b.iter(|| multi_spatial_features(&img, &encoder, s).unwrap())
        });
    }
    g.finish();
}

fn ssim(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = Image::from_fn(128, 128, |_, _| [r.random(), r.random(), r.random()]);
    let b = Image::from_fn(128, 128, |_, _| [r.random(), r.random(), r.random()]);
    let mask: Vec<bool> = (0..128 * 128).map(|i| i % 7 != 0).collect();
    c.bench_function("masked_ssim_128", |bench| bench.iter(|| masked_ssim(&a, &b, Some(&mask)).unwrap()));
}

criterion_group!(benches, transfer, multi_spatial, ssim, render);
criterion_main!(benches);
