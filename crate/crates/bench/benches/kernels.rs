use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use zskd_bench::{cyclic_targets, noise_batch};
use zskd_core::impressions::{craft_batch, SynthesisConfig};
use zskd_core::models::{build_lenet5, build_lenet5_half};
use zskd_core::prior::{class_similarity, concentration, dirichlet_sample};
use zskd_core::rng::rng_from_seed;
use zskd_core::{Graph, Reduction};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for net in [build_lenet5(1), build_lenet5_half(1)] {
        for batch in [32, 128] {
            let x = noise_batch(batch, 2);
            let y = cyclic_targets(batch);
            group.bench_with_input(BenchmarkId::new(net.name(), batch), &batch, |b, _| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let params = net.bind(&mut g, true);
                    let input = g.constant(x.clone());
                    let logits = net.logits_on(&mut g, &params, input).unwrap();
                    let p = g.softmax_t(logits, 1.0).unwrap();
                    let loss = g.cross_entropy(&y, p, Reduction::Mean).unwrap();
                    g.backward(loss).unwrap();
                    g.take_grad(params[0]).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let teacher = build_lenet5(3);
    let mut group = c.benchmark_group("synthesis_step");
    group.sample_size(10);
    for batch in [10, 100] {
        let targets = cyclic_targets(batch);
        let cfg = SynthesisConfig {
            tau: 20.0,
            lr: 0.1,
            iterations: 1,
            batch_size: batch,
        };
        group.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |b, &batch| {
            b.iter_batched(
                || noise_batch(batch, 4),
                |init| craft_batch(&teacher, &targets, init, &cfg).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn dirichlet(c: &mut Criterion) {
    let prior = class_similarity(&build_lenet5(5)).unwrap();
    let mut group = c.benchmark_group("dirichlet_sample");
    for beta in [1.0, 0.1] {
        let alpha = concentration(&prior, 0, beta).unwrap();
        let mut rng = rng_from_seed(6);
        group.bench_with_input(BenchmarkId::from_parameter(beta), &beta, |b, _| {
            b.iter(|| dirichlet_sample(&alpha, &mut rng))
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, synthesis, dirichlet);
criterion_main!(benches);
