use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vegecast_core::exec::{self, Execution};
use vegecast_core::metrics::ssim;
use vegecast_core::synth::{generate_synthetic_cube, GeneratorConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_corpus_generation(c: &mut Criterion) {
    let cfg = GeneratorConfig { height: 16, width: 16, ..Default::default() };
    let mut group = c.benchmark_group("generate_corpus_16x16");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                let cubes = exec::map_range(16, mode, |i| generate_synthetic_cube(i as u64, &cfg).unwrap());
                black_box(cubes.len())
            })
        });
    }
    group.finish();
}

fn bench_ssim_batch(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let cubes: Vec<_> = (0..8).map(|i| generate_synthetic_cube(i, &cfg).unwrap()).collect();
    let mut group = c.benchmark_group("ssim_per_cube");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                let scores = exec::map(&cubes, mode, |cube| {
                    let f = cube.frames.view();
                    ssim(f.slice(ndarray::s![1.., .., .., ..]), f.slice(ndarray::s![..-1, .., .., ..])).unwrap()
                });
                black_box(scores)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_corpus_generation, bench_ssim_batch);
criterion_main!(benches);
