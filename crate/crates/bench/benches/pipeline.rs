use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use cfft_bench::fixture;
use cfft_core::counterfactual::{build_counterfactuals, Masking, Refill, StrategyConfig};
use cfft_core::model::build_forward;
use cfft_core::relevance::relevance_maps;
use cfft_core::scm::batch_tensor;
use cfft_core::train::{append_objective, CfInput, LossWeights};
use cfft_core::{Bindings, Graph, PatchImage};

const BATCH: usize = 64;

fn benches(c: &mut Criterion) {
    let fx = fixture(BATCH);
    let images: Vec<&PatchImage> = fx.data.samples.iter().map(|s| &s.image).collect();
    let labels = fx.data.labels();

    c.bench_function("forward/64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = Bindings::frozen(&mut g, &fx.params.tensors).unwrap();
            let x = g.input(batch_tensor(&images).unwrap()).unwrap();
            build_forward(&mut g, &fx.config, &p, x).unwrap().logits
        })
    });

    c.bench_function("value_and_grad/64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = Bindings::trainable(&mut g, &fx.params.tensors).unwrap();
            let x = g.input(batch_tensor(&images).unwrap()).unwrap();
            let fwd = build_forward(&mut g, &fx.config, &p, x).unwrap();
            let loss = append_objective(
                &mut g,
                &fx.config,
                &p,
                x,
                &fwd,
                &labels,
                CfInput::SameAsX,
                Some(&fx.params.tensors),
                None,
                &LossWeights::default(),
            )
            .unwrap();
            g.backward(loss.total).unwrap()
        })
    });

    c.bench_function("relevance/64", |b| {
        b.iter(|| relevance_maps(&fx.params, &images, &labels).unwrap())
    });

    let maps = relevance_maps(&fx.params, &images, &labels).unwrap();
    let strategy = StrategyConfig::new(Masking::Object { threshold: 0.5 }, Refill::Multi);
    c.bench_function("counterfactual_batch/64", |b| {
        b.iter_batched(
            || (),
            |_| build_counterfactuals(&images, Some(&maps), &strategy, 7).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = pipeline;
    config = Criterion::default().sample_size(20);
    targets = benches
}
criterion_main!(pipeline);
