//! Sequential vs rayon execution of the batch loops.
//!
//! Build with `--no-default-features` to see the sequential fallback for
//! both variants.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use facemotion::model::{init_params, prepare_audio, ModelConfig};
use facemotion::metrics::evaluate;
use facemotion::oracle::{generate_corpus, CorpusConfig, FEATURE_DIM, VERTICES};
use facemotion::train::precompute_visemes;
use facemotion::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus_config() -> CorpusConfig {
    let mut c = CorpusConfig::new(2, 4, 3);
    c.phonemes_per_sequence = 6;
    c
}

fn bench(c: &mut Criterion) {
    let cfg = corpus_config();
    let corpus = generate_corpus(&cfg, Exec::Parallel).unwrap();

    let mut g = c.benchmark_group("generate_corpus");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_corpus(&cfg, exec).unwrap())
        });
    }
    g.finish();

    let model = ModelConfig::new(FEATURE_DIM, VERTICES).with_layers(1);
    let params = init_params(&model, 0).unwrap();
    let audio: Vec<_> = corpus
        .sequences
        .iter()
        .map(|(_, _, _, s)| prepare_audio(&s.features, s.mesh.frames()).unwrap())
        .collect();
    let mut g = c.benchmark_group("precompute_visemes");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| precompute_visemes(&audio, &params, &model, exec).unwrap())
        });
    }
    g.finish();

    // score the ground truth against a neighbour's mesh
    let gts: Vec<_> = corpus.sequences.iter().map(|(_, _, _, s)| s.mesh.clone()).collect();
    let preds: Vec<_> = gts.iter().cloned().rev().collect();
    let (preds, gts): (Vec<_>, Vec<_>) = preds
        .into_iter()
        .zip(gts)
        .map(|(p, g)| {
            let n = p.frames().min(g.frames());
            (p.truncate(n), g.truncate(n))
        })
        .unzip();
    let templates: Vec<_> = corpus.sequences.iter().map(|(_, _, _, s)| &s.template).collect();
    let mut g = c.benchmark_group("evaluate");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&preds, &gts, &templates, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
