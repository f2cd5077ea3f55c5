//! Deterministic fixtures shared by the benchmarks.

use mgcot::dataio::{synth_generate, Corpus, SynthConfig};
use mgcot::graphs::CooccurrenceGraph;
use mgcot::model::{Mgcot, ModelConfig};
use mgcot::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn score_vectors(count: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

/// Random sparse co-occurrence graph with about `degree` edges per node.
pub fn random_graph(nodes: usize, degree: usize, seed: u64) -> CooccurrenceGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(u32, u32, u64)> = (0..nodes * degree / 2)
        .map(|_| {
            let a = rng.random_range(0..nodes as u32);
            let b = (a + rng.random_range(1..nodes as u32)) % nodes as u32;
            (a, b, rng.random_range(1..20))
        })
        .collect();
    CooccurrenceGraph::from_edges(nodes, false, &edges)
}

pub fn small_corpus() -> Corpus {
    synth_generate(&SynthConfig {
        n_items: 200,
        n_sessions: 2_000,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
    .corpus
}

pub fn model(items: usize, d: usize) -> (ParamStore, Mgcot) {
    let cfg = ModelConfig {
        d,
        top_k: 3,
        ..ModelConfig::default()
    };
    Mgcot::new(cfg, items, &mut ChaCha8Rng::seed_from_u64(1)).expect("valid model config")
}
