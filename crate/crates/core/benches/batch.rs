//! Per-example gradients and evaluation over the bundled corpus, sequential vs rayon.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rulechat_core::model::{RuleReader, TrainingExample};
use rulechat_core::par;
use rulechat_core::sharc::{build_all_supervision, corpus_texts, reconstruct_trees};
use rulechat_core::synthetic::bundled;
use rulechat_core::text::Vocabulary;
use rulechat_core::train::{training_examples, RunConfig};
use rulechat_core::{Gradients, Graph, Mode};

fn setup() -> (RuleReader, Vec<TrainingExample>) {
    let run = RunConfig::from_toml(include_str!("../../../configs/synthetic.toml")).expect("config");
    let data = bundled();
    let supervision = build_all_supervision(&reconstruct_trees(&data));
    let reader = RuleReader::new(Vocabulary::build(corpus_texts(&data)), run.model).expect("model");
    let examples = training_examples(&reader, &data, &supervision).expect("examples");
    (reader, examples)
}

fn gradient(reader: &RuleReader, ex: &TrainingExample) -> Gradients {
    let mut g = Graph::new(&reader.store, Mode::Train { seed: 1 });
    let (loss, _) = reader.example_loss(&mut g, ex, 1.0).expect("loss");
    let mut grads = Gradients::for_store(&reader.store);
    g.backward(loss, &mut grads).expect("backward");
    grads
}

fn bench(c: &mut Criterion) {
    let (reader, examples) = setup();
    let batch = &examples[..8];

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(par::map_sequential(batch, |ex| gradient(&reader, ex))))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map_parallel(batch, |ex| gradient(&reader, ex))))
    });
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(par::map_sequential(&examples, |ex| reader.predict_prepared(&ex.turn, None))))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par::map_parallel(&examples, |ex| reader.predict_prepared(&ex.turn, None))))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
