use super::*;
use crate::gradcheck::check_param_gradients;
use crate::graphs::{CooccurrenceGraph, GlobalItemGraph};
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(items: usize, d: usize, ablation: Ablation) -> (ParamStore, Mgcot) {
    let cfg = ModelConfig {
        d,
        heads: 2,
        top_k: 2,
        beta: 0.5,
        max_position: 8,
        ablation,
        ..ModelConfig::default()
    };
    Mgcot::new(cfg, items, &mut rng(42)).unwrap()
}

fn adjacency(items: usize, sessions: &[&[u32]]) -> Csr {
    let co = CooccurrenceGraph::build(sessions.iter().copied(), items + 1, 1, false);
    GlobalItemGraph::from_cooccurrence(&co, None).gcn_adjacency()
}

const SESSIONS: [&[u32]; 3] = [&[1, 2, 3, 2], &[4, 5], &[2, 3, 6, 7, 3]];

#[test]
fn single_session_batch_skips_fusion() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &[&[1, 2, 3]], None, None).unwrap();
    assert_eq!(out.session, out.target);
    assert_eq!(g.shape(out.scores), (1, 10));
}

#[test]
fn no_multi_attention_uses_last_item_row() {
    let (store, model) = tiny(10, 4, Ablation::parse("no-multi-attention").unwrap());
    let mut g = Graph::new();
    let prefixes: Vec<&[u32]> = vec![&[1, 2, 3], &[4]];
    let out = model.forward(&mut g, &store, &prefixes, None, None).unwrap();
    assert!(out.attention.is_none());
    let rows = g.value(out.current.rows);
    let t = g.value(out.target);
    assert_eq!(t.row(0), rows.row(2));
    assert_eq!(t.row(1), rows.row(4));
    // The second half of the row is the reverse position 1 embedding.
    assert_eq!(t.slice(ndarray::s![1, 4..8]), store.value(model.positions.id).row(1));
}

#[test]
fn current_sequence_layout() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let mut g = Graph::new();
    let prefixes: Vec<&[u32]> = vec![&[1, 2], &[3, 4, 5]];
    let seq = model.current_sequence(&mut g, &store, &prefixes).unwrap();
    assert_eq!(seq.layout.width, 4);
    assert_eq!(seq.layout.lengths, vec![3, 4]);
    let rows = g.value(seq.rows);
    let token = store.value(model.target_token);
    assert_eq!(rows.slice(ndarray::s![2, 0..4]), token.row(0));
    assert_eq!(rows.slice(ndarray::s![2, 4..8]), store.value(model.positions.id).row(0));
    assert!(rows.row(3).iter().all(|&v| v == 0.0));
    assert_eq!(rows.slice(ndarray::s![4, 4..8]), store.value(model.positions.id).row(3));
}

#[test]
fn scores_match_scalar_oracle() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let mut g = Graph::new();
    let prefixes: Vec<&[u32]> = vec![&[1, 2, 3], &[2, 3, 9], &[7]];
    let out = model.forward(&mut g, &store, &prefixes, None, None).unwrap();
    let scores = g.value(out.scores);
    assert_eq!(scores.dim(), (3, 10));
    assert!(scores.iter().all(|v| v.is_finite()));
    let s = g.value(out.session);
    let p = store.value(model.projection);
    let e = store.value(model.embeddings.id);
    for b in 0..3 {
        let mut reduced = [0.0; 4];
        for (c, r) in reduced.iter_mut().enumerate() {
            for k in 0..8 {
                *r += s[[b, k]] * p[[k, c]];
            }
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for item in 1..=10 {
            let mut dot = 0.0;
            for c in 0..4 {
                dot += reduced[c] * e[[item, c]];
            }
            assert!((dot - scores[[b, item - 1]]).abs() < 1e-12);
            if dot > best.0 {
                best = (dot, item);
            }
        }
        let argmax = (0..10).max_by(|&x, &y| scores[[b, x]].total_cmp(&scores[[b, y]])).unwrap() + 1;
        assert_eq!(argmax, best.1);
    }
}

#[test]
fn zero_beta_leaves_global_parameters_untouched() {
    let (store, model) = tiny(10, 4, Ablation::parse("no-contrastive").unwrap());
    let adj = adjacency(10, &SESSIONS);
    let mut g = Graph::new();
    let (out, losses) = model
        .loss(&mut g, &store, &SESSIONS, &[4, 6, 8], Some(&adj), Some(&mut rng(1)), &mut rng(2))
        .unwrap();
    assert!(out.global.is_none() && losses.contrastive.is_none());
    assert_eq!(losses.total, losses.main);
    let grads = g.backward(losses.total);
    for id in model.global_only_params() {
        if let Some(gr) = grads.param(id) {
            assert!(gr.iter().all(|&v| v == 0.0), "{}", store.get(id).name);
        }
    }
    assert!(grads.param(model.projection).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn contrastive_term_reaches_global_parameters() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let adj = adjacency(10, &SESSIONS);
    let mut g = Graph::new();
    let (_, losses) = model
        .loss(&mut g, &store, &SESSIONS, &[4, 6, 8], Some(&adj), None, &mut rng(2))
        .unwrap();
    let grads = g.backward(losses.total);
    for id in model.global_only_params() {
        assert!(grads.param(id).unwrap().iter().any(|&v| v != 0.0), "{}", store.get(id).name);
    }
}

#[test]
fn losses_are_deterministic() {
    let run = || {
        let (store, model) = tiny(10, 4, Ablation::default());
        let adj = adjacency(10, &SESSIONS);
        let mut g = Graph::new();
        let (_, l) = model
            .loss(&mut g, &store, &SESSIONS, &[4, 6, 8], Some(&adj), Some(&mut rng(3)), &mut rng(4))
            .unwrap();
        g.scalar(l.total).to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn invalid_items_are_shape_errors() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let mut g = Graph::new();
    assert!(matches!(
        model.forward(&mut g, &store, &[&[11]], None, None),
        Err(MgcotError::Shape(_))
    ));
    let small = adjacency(5, &SESSIONS[..2]);
    assert!(matches!(
        model.forward(&mut g, &store, &SESSIONS, Some(&small), None),
        Err(MgcotError::Shape(_))
    ));
}

#[test]
fn attention_export_covers_every_head() {
    let (store, model) = tiny(10, 4, Ablation::default());
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &SESSIONS, None, None).unwrap();
    let recs = attention_records(&g, &out, &SESSIONS, 10);
    assert_eq!(recs.len(), 6);
    assert_eq!(recs[0].example, 10);
    assert_eq!(recs[0].weights.len(), 5);
    for r in &recs {
        assert!(r.alpha > 1.0 && r.alpha < 2.0);
        for row in &r.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (store, model) = tiny(12, 4, Ablation::default());
    let sessions: [&[u32]; 3] = [&[1, 2, 3, 2], &[4, 5, 12], &[2, 3, 6, 7, 3]];
    let adj = adjacency(12, &sessions);
    let report = check_param_gradients(&store, &[], 1e-5, |g, store| {
        let (_, l) = model.loss(g, store, &sessions, &[4, 6, 8], Some(&adj), None, &mut rng(5))?;
        Ok(l.total)
    })
    .unwrap();
    assert!(report.checked > 500);
    assert!(report.worst_relative_error < 1e-4, "{report:?}");
}

#[test]
fn ablation_names_round_trip() {
    for name in Ablation::NAMES {
        assert_eq!(Ablation::parse(name).unwrap().tag(), name);
    }
    assert_eq!(Ablation::parse("full").unwrap().tag(), "full");
    assert!(Ablation::parse("no-gcn").is_err());
}
