use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use denoise_ad::detection::point_scores;
use denoise_ad::lstm::{backward, forward, loss_and_grads, reconstruct};
use denoise_ad::training::evaluate_loss;
use denoise_ad::Rng;
use denoise_ad_bench::{model, series, windows};

fn passes(c: &mut Criterion) {
    let window = windows(200).swap_remove(0);
    for units in [&[16][..], &[16, 8][..]] {
        let (config, params) = model(units, 0.4);
        let tag = format!("{units:?}");
        c.bench_function(&format!("reconstruct {tag}"), |b| {
            b.iter(|| reconstruct(&params, &config, black_box(&window)).unwrap())
        });
        c.bench_function(&format!("forward train {tag}"), |b| {
            let mut rng = Rng::new(0);
            b.iter(|| forward(&params, &config, black_box(&window), true, &mut rng).unwrap())
        });
        c.bench_function(&format!("backward {tag}"), |b| {
            let (_, trace) = forward(&params, &config, &window, true, &mut Rng::new(0)).unwrap();
            let trace = trace.unwrap();
            b.iter(|| backward(&params, &config, black_box(&trace), &window).unwrap())
        });
        c.bench_function(&format!("loss and grads {tag}"), |b| {
            b.iter_batched(
                || Rng::new(1),
                |mut rng| loss_and_grads(&params, &config, black_box(&window), &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

fn scoring(c: &mut Criterion) {
    let (config, params) = model(&[16], 0.0);
    let data = series(2000);
    let sample = windows(2000);
    let mut group = c.benchmark_group("scoring");
    group.sample_size(10);
    group.bench_function("point scores T=2000", |b| b.iter(|| point_scores(&params, &config, black_box(&data), 1).unwrap()));
    group.bench_function("validation loss 1977 windows", |b| {
        b.iter(|| evaluate_loss(&params, &config, black_box(&sample)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, passes, scoring);
criterion_main!(benches);
