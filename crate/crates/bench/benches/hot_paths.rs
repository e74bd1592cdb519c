//! Benchmarks for the three paths that dominate wall time: the
//! convolutional encoder forward pass, associative retrieval, and one
//! recurrent gate step.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikemem_core::data::{synthesize, SynthSpec};
use spikemem_core::hgrn::{hgrn_step_graph, GateParams, GraphGateState};
use spikemem_core::hopfield::HopfieldMemory;
use spikemem_core::snn::{encoder_features, fold_batch, EncoderParams};
use spikemem_core::train::ModelConfig;

fn encoder_forward(c: &mut Criterion) {
    let cfg = ModelConfig::desk(4).encoder;
    let params = EncoderParams::init(&cfg, 7).unwrap();
    let binding = params.bind();
    let spec = SynthSpec::default();
    let batch: Vec<_> = (0..8)
        .map(|i| synthesize(i % 4, 100 + i as u64, &spec).unwrap())
        .collect();
    let refs: Vec<_> = batch.iter().collect();
    let folded = fold_batch(&refs).unwrap();

    c.bench_function("encoder_forward_desk_b8", |b| {
        b.iter(|| encoder_features(&binding, &folded, false, None).unwrap())
    });
}

fn hopfield_retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 512;
    let patterns: Vec<Array1<f64>> = (0..4)
        .map(|_| Array1::from_shape_fn(dim, |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
        .collect();
    let memory = HopfieldMemory::from_patterns(&patterns).unwrap();
    let probes = Array2::from_shape_fn((32, dim), |(i, j)| {
        let flip = (i * 37 + j * 11) % 97 == 0;
        if flip {
            -patterns[i % 4][j]
        } else {
            patterns[i % 4][j]
        }
    });

    c.bench_function("hopfield_retrieve_batch_512d_32", |b| {
        b.iter(|| memory.retrieve_batch(&probes).unwrap())
    });
}

fn gate_step(c: &mut Criterion) {
    let (input_dim, hidden, batch) = (512, 256, 32);
    let params = GateParams::init(input_dim, hidden, 3).unwrap();
    let binding = params.bind();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = spikemem_core::Arr::from_shape_fn(ndarray::IxDyn(&[batch, input_dim]), |_| {
        rng.random_range(0.0..1.0)
    });

    c.bench_function("hgrn_step_512to256_b32", |b| {
        b.iter_batched(
            || {
                (
                    GraphGateState::rest(hidden, batch),
                    spikemem_core::autodiff::Value::constant(x.clone()),
                )
            },
            |(state, v)| hgrn_step_graph(&binding, &state, &v).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, encoder_forward, hopfield_retrieval, gate_step);
criterion_main!(benches);
