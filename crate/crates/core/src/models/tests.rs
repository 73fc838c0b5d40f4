use proptest::prelude::*;

use super::*;
use crate::autodiff::gradcheck::check_model;
use crate::autodiff::{GradBuffer, Graph, Scalar};
use crate::embed::EmbeddingMatrix;
use crate::tokenizer::SidEntry;

fn table(n: usize, w: [usize; 2]) -> SidTable {
    let entries = (0..n)
        .map(|i| SidEntry {
            item_id: format!("i{i:03}"),
            codes: vec![i % w[0], (i / w[0]) % w[1]],
            disambig: i / (w[0] * w[1]),
        })
        .collect();
    SidTable::new(w.to_vec(), entries)
}

fn tiny(vocab: usize) -> Seq2SeqConfig {
    Seq2SeqConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        d_kv: 8,
        d_ff: 24,
        dropout: 0.0,
        vocab_size: vocab,
        max_positions: 24,
        ..Seq2SeqConfig::default()
    }
}

fn ex(user: usize, history: &[usize], target: usize) -> Example {
    Example {
        user_id: format!("u{user}"),
        history: history.to_vec(),
        target,
    }
}

fn aux(catalog: &SidCatalog, dim: usize) -> EmbeddingMatrix {
    let data = (0..catalog.len() * dim).map(|k| ((k * 37 % 17) as f32 - 8.0) / 8.0).collect();
    EmbeddingMatrix::new(dim, catalog.item_ids().to_vec(), data).unwrap()
}

fn loss_of<F: Scalar>(m: &Tiger<F>, catalog: &SidCatalog, batch: &[Example]) -> f64 {
    let mut g = Graph::no_grad();
    let l = m.batch_loss(&mut g, catalog, batch, None).unwrap();
    g.value(l).item().f64()
}

fn tiger_grads(m: &Tiger<f64>, catalog: &SidCatalog, batch: &[Example]) -> GradBuffer<f64> {
    let mut g = Graph::new();
    let l = m.batch_loss(&mut g, catalog, batch, None).unwrap();
    let grads = g.backward(l).unwrap();
    let mut buf = GradBuffer::zeros_like(&m.store);
    buf.accumulate(&grads);
    buf
}

#[test]
fn tiger_count_matches_census() {
    for tie in [true, false] {
        for gated in [true, false] {
            let cfg = Seq2SeqConfig {
                tie_embeddings: tie,
                gated_ff: gated,
                layers: 2,
                ..tiny(50)
            };
            let m = build_tiger::<f32>(&cfg).unwrap();
            assert_eq!(m.store.census(), cfg.param_count(), "tie={tie} gated={gated}");
        }
    }
}

#[test]
fn small_rs_grid_rows_match_reference_sizes() {
    for (layers, reference) in [(2, 778_000.0), (5, 1_900_000.0), (9, 3_300_000.0)] {
        let n = Seq2SeqConfig::scaling_row(layers, 64, 3, 64, 512).param_count() as f64;
        assert!((n / reference - 1.0).abs() < 0.05, "{layers} layers: {n}");
    }
}

#[test]
fn wide_rs_grid_rows_are_not_affine_in_depth() {
    // Same widths, so any per-layer count c gives n(L) = n0 + c L. The
    // reference sizes imply c = 6.3M from 3 to 4 layers but 2.67M from 4 to 7.
    let per_layer_a = 13_000_000.0 - 6_700_000.0;
    let per_layer_b = (21_000_000.0 - 13_000_000.0) / 3.0;
    assert!(per_layer_a / per_layer_b > 2.0);
    let c = Seq2SeqConfig::scaling_row(4, 128, 6, 64, 1024).param_count()
        - Seq2SeqConfig::scaling_row(3, 128, 6, 64, 1024).param_count();
    assert_eq!(c, 1_385_728);
}

#[test]
fn config_rejects_zero_and_bad_dropout() {
    assert!(build_tiger::<f32>(&Seq2SeqConfig { heads: 0, ..tiny(10) }).is_err());
    assert!(build_tiger::<f32>(&Seq2SeqConfig { dropout: 1.0, ..tiny(10) }).is_err());
    assert!(build_sasrec::<f32>(&SasrecConfig { item_count: 0, ..Default::default() }).is_err());
    assert!(build_sasrec::<f32>(&SasrecConfig {
        heads: 3,
        item_count: 5,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn vocab_mismatch_is_reported() {
    let cat = SidCatalog::new(&table(20, [4, 4])).unwrap();
    let m = build_tiger::<f32>(&tiny(cat.vocab_size() + 1)).unwrap();
    let err = m.forward_logits(&cat, &[ex(0, &[1], 2)]).unwrap_err();
    assert!(matches!(err, ModelError::VocabMismatch { .. }), "{err}");
    let err = train_tiger(&mut m.clone(), &cat, &[ex(0, &[1], 2)], &[], &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, ModelError::VocabMismatch { .. }), "{err}");
}

#[test]
fn logits_have_batch_by_item_len_by_vocab_shape() {
    let cat = SidCatalog::new(&table(20, [4, 4])).unwrap();
    let m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let batch = [ex(0, &[1, 2], 3), ex(1, &[4], 5), ex(2, &[6, 7, 8], 9)];
    let t = m.forward_logits(&cat, &batch).unwrap();
    assert_eq!(t.shape(), &[3, cat.item_len(), cat.vocab_size()]);
}

#[test]
fn untrained_next_token_entropy_is_near_uniform() {
    let cat = SidCatalog::new(&table(400, [32, 32])).unwrap();
    let cfg = Seq2SeqConfig {
        d_model: 64,
        ..tiny(cat.vocab_size())
    };
    let m = build_tiger::<f32>(&cfg).unwrap();
    let log_v = (cat.vocab_size() as f64).ln();
    let mut total = 0.0;
    let n = 1000;
    for s in 0..n {
        let hist: Vec<usize> = (0..1 + s % 4).map(|j| (s * 7 + j * 13) % cat.len()).collect();
        let ctx = m.encode_context(&cat, &hist).unwrap();
        let logits = crate::decode::NextTokenModel::next_token_logits(&ctx, &[], &[]).unwrap();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let h: f64 = logits
            .iter()
            .map(|l| {
                let p = (l - mx).exp() / z;
                -p * p.ln()
            })
            .sum();
        total += h;
    }
    let mean = total / n as f64;
    assert!((mean / log_v - 1.0).abs() < 0.01, "entropy {mean} vs {log_v}");
}

#[test]
fn initial_loss_is_log_vocab() {
    let cat = SidCatalog::new(&table(100, [8, 8])).unwrap();
    let m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let batch: Vec<Example> = (0..40).map(|u| ex(u, &[u % 100, (u * 3) % 100], (u * 11) % 100)).collect();
    let l = loss_of(&m, &cat, &batch);
    let log_v = (cat.vocab_size() as f64).ln();
    assert!((l / log_v - 1.0).abs() < 0.02, "{l} vs {log_v}");
}

fn pair_examples(n: usize) -> Vec<Example> {
    (0..n).map(|u| ex(u, &[2 * u, 2 * u + 1, 2 * u], 2 * u + 1)).collect()
}

#[test]
fn tiger_memorizes_item_pairs() {
    let cat = SidCatalog::new(&table(100, [8, 8])).unwrap();
    let mut m = build_tiger::<f32>(&Seq2SeqConfig {
        d_model: 32,
        d_kv: 16,
        d_ff: 64,
        ..tiny(cat.vocab_size())
    })
    .unwrap();
    let train = pair_examples(50);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 50,
        optimizer: crate::autodiff::AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        eval_every: 0,
        ..Default::default()
    };
    let r = train_tiger(&mut m, &cat, &train, &[], &cfg, |_| {}).unwrap();
    let best = r.losses().into_iter().fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "best loss {best}");
    let eval = evaluate_tiger(&m, &cat, &train, &[1]).unwrap();
    assert_eq!(eval.recall_at(1), Some(1.0));
}

#[test]
fn training_is_deterministic_given_seed() {
    let cat = SidCatalog::new(&table(40, [4, 4])).unwrap();
    let cfg = Seq2SeqConfig {
        dropout: 0.1,
        ..tiny(cat.vocab_size())
    };
    let train: Vec<Example> = (0..30).map(|u| ex(u, &[u % 40, (u + 5) % 40], (u + 9) % 40)).collect();
    let valid: Vec<Example> = train[..5].to_vec();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    let run = || {
        let mut m = build_tiger::<f32>(&cfg).unwrap();
        let mut lines = Vec::new();
        let r = train_tiger(&mut m, &cat, &train, &valid, &tc, |e| lines.push(serde_json::to_string(e).unwrap())).unwrap();
        (r, lines)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la[0].starts_with("{\"epoch\":0,\"loss\":"), "{}", la[0]);
    assert!(la[0].contains("\"valid_recall@5\":"));
}

#[test]
fn non_finite_loss_aborts_with_position() {
    let cat = SidCatalog::new(&table(20, [4, 4])).unwrap();
    let mut m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let id = m.store.id("tok_emb").unwrap();
    m.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = train_tiger(&mut m, &cat, &[ex(0, &[1], 2)], &[], &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteLoss { epoch: 0, step: 0 }), "{err}");
}

#[test]
fn empty_training_set_is_an_error() {
    let cat = SidCatalog::new(&table(20, [4, 4])).unwrap();
    let mut m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let err = train_tiger(&mut m, &cat, &[], &[], &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, ModelError::EmptyTrainingSet));
}

#[test]
fn zero_initialized_adapter_leaves_logits_unchanged() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let cfg = tiny(cat.vocab_size());
    let base = build_tiger::<f32>(&cfg).unwrap();
    let mut adapted = base.clone();
    attach_adapter(&mut adapted, &cat, &aux(&cat, 6), &AdapterConfig::new(AdapterSource::Semantic, 6, 10, 16)).unwrap();
    let batch = [ex(0, &[1, 2, 3], 4), ex(1, &[5], 6)];
    assert_eq!(base.forward_logits(&cat, &batch).unwrap(), adapted.forward_logits(&cat, &batch).unwrap());
}

#[test]
fn adapter_count_is_model_plus_mlp() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let cfg = tiny(cat.vocab_size());
    let mut m = build_tiger::<f32>(&cfg).unwrap();
    let ac = AdapterConfig::new(AdapterSource::Cf, 6, 10, 16);
    attach_adapter(&mut m, &cat, &aux(&cat, 6), &ac).unwrap();
    assert_eq!(ac.param_count(), 6 * 10 + 10 + 10 * 16 + 16);
    assert_eq!(m.param_count(), cfg.param_count() + ac.param_count());
    assert_eq!(m.store.census(), m.param_count());
    assert_eq!(m.store.census_where(|n| n.starts_with("adapter.")), ac.param_count());
}

#[test]
fn adapter_preconditions() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let mut m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let err = attach_adapter(&mut m, &cat, &aux(&cat, 5), &AdapterConfig::new(AdapterSource::Cf, 6, 8, 16)).unwrap_err();
    assert!(matches!(err, ModelError::AdapterDimension { expected: 6, got: 5 }));
    let err = attach_adapter(&mut m, &cat, &aux(&cat, 6), &AdapterConfig::new(AdapterSource::Cf, 6, 8, 12)).unwrap_err();
    assert!(matches!(err, ModelError::AdapterDimension { expected: 16, got: 12 }));
    let partial = EmbeddingMatrix::new(2, vec!["i000".into()], vec![0.0, 1.0]).unwrap();
    let err = attach_adapter(&mut m, &cat, &partial, &AdapterConfig::new(AdapterSource::Cf, 2, 8, 16)).unwrap_err();
    assert!(matches!(err, ModelError::UnknownItem(ref s) if s == "i001"));
}

#[test]
fn adapter_changes_only_first_token_rows_once_trained() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let mut m = build_tiger::<f64>(&tiny(cat.vocab_size())).unwrap();
    attach_adapter(&mut m, &cat, &aux(&cat, 6), &AdapterConfig::new(AdapterSource::Semantic, 6, 10, 16)).unwrap();
    let batch = [ex(0, &[1, 2], 4)];
    let buf = tiger_grads(&m, &cat, &batch);
    let last = m.store.id("adapter.1.w").unwrap();
    assert!(buf.get(last).iter().any(|g| *g != 0.0));
}

#[test]
fn tiger_gradients_match_finite_differences() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    for (seed, tie) in [(1u64, true), (2, false)] {
        let cfg = Seq2SeqConfig {
            tie_embeddings: tie,
            init_std: 0.3,
            seed,
            ..tiny(cat.vocab_size())
        };
        let mut m = build_tiger::<f64>(&cfg).unwrap();
        attach_adapter(&mut m, &cat, &aux(&cat, 6), &AdapterConfig::new(AdapterSource::Semantic, 6, 10, 16)).unwrap();
        // Move the zero-initialized adapter layer so its inputs also get checked.
        let w = m.store.id("adapter.1.w").unwrap();
        m.store.get_mut(w).data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = ((i % 7) as f64 - 3.0) * 0.05);
        let batch = [ex(0, &[1, 2, 3], 4), ex(1, &[5, 6], 7)];
        let buf = tiger_grads(&m, &cat, &batch);
        let r = check_model(&mut m, &buf, 4, seed, |m| Ok::<_, ()>(loss_of(m, &cat, &batch))).unwrap();
        assert!(r.max_rel_err < 1e-5, "tie={tie}: {r:?}");
    }
}

#[test]
fn tiger_loss_is_invariant_to_batch_order() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let m = build_tiger::<f64>(&tiny(cat.vocab_size())).unwrap();
    let mut batch: Vec<Example> = (0..12).map(|u| ex(u, &[u, (u + 3) % 30][..1 + u % 2], (u + 7) % 30)).collect();
    let a = loss_of(&m, &cat, &batch);
    batch.reverse();
    let b = loss_of(&m, &cat, &batch);
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn encoder_keeps_most_recent_items() {
    let cat = SidCatalog::new(&table(30, [4, 4])).unwrap();
    let m = build_tiger::<f32>(&tiny(cat.vocab_size())).unwrap();
    let hist: Vec<usize> = (0..20).collect();
    let e = m.encoder_input(&cat, &hist);
    let keep = 24 / cat.item_len();
    assert_eq!(e.items, (20 - keep..20).collect::<Vec<_>>());
    assert_eq!(e.tokens.len(), keep * cat.item_len());
    assert_eq!(m.encoder_input(&cat, &[]).tokens, vec![crate::trie::BOS as usize]);
}

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let cat = SidCatalog::new(&table(20, [4, 4])).unwrap();
    let cfg = tiny(cat.vocab_size());
    let mut a = build_tiger::<f32>(&cfg).unwrap();
    let train: Vec<Example> = (0..10).map(|u| ex(u, &[u], u + 1)).collect();
    train_tiger(&mut a, &cat, &train, &[], &TrainConfig { epochs: 2, ..Default::default() }, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    crate::autodiff::save_checkpoint(&path, &a.store, &serde_json::to_string(&cfg).unwrap()).unwrap();
    let (store, meta) = crate::autodiff::load_checkpoint::<f32>(&path).unwrap();
    let cfg2: Seq2SeqConfig = serde_json::from_str(&meta).unwrap();
    let mut b = build_tiger::<f32>(&cfg2).unwrap();
    b.load_params(&store).unwrap();
    assert_eq!(a.forward_logits(&cat, &train).unwrap(), b.forward_logits(&cat, &train).unwrap());
    let mut wrong = build_tiger::<f32>(&Seq2SeqConfig { layers: 2, ..cfg }).unwrap();
    assert!(matches!(wrong.load_params(&store), Err(ModelError::CheckpointMismatch(_))));
}

fn sasrec_cfg(items: usize) -> SasrecConfig {
    SasrecConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        max_positions: 10,
        item_count: items,
        dropout: 0.0,
        ..Default::default()
    }
}

#[test]
fn sasrec_reference_row_non_embedding_count() {
    let cfg = SasrecConfig {
        item_count: 100,
        ..Default::default()
    };
    let n = cfg.non_embedding_params() as f64;
    assert!((n / 98_304.0 - 1.0).abs() < 0.05, "{n}");
    let m = build_sasrec::<f32>(&cfg).unwrap();
    assert_eq!(m.store.census(), cfg.param_count());
    assert_eq!(
        m.store.census_where(|n| n != "item_emb" && n != "pos_emb"),
        cfg.non_embedding_params()
    );
}

#[test]
fn sasrec_memorizes_item_pairs() {
    let mut m = build_sasrec::<f32>(&sasrec_cfg(100)).unwrap();
    let train = pair_examples(50);
    let seqs = sasrec_sequences(&train);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 50,
        optimizer: crate::autodiff::AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        eval_every: 0,
        ..Default::default()
    };
    train_sasrec(&mut m, &seqs, &[], &cfg, |_| {}).unwrap();
    let r = evaluate_sasrec(&m, &train, &[1]).unwrap();
    assert_eq!(r.recall_at(1), Some(1.0));
}

#[test]
fn sasrec_gradients_match_finite_differences() {
    let mut m = build_sasrec::<f64>(&SasrecConfig {
        init_std: 0.3,
        ..sasrec_cfg(12)
    })
    .unwrap();
    let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 0]];
    let loss = |m: &Sasrec<f64>| {
        let mut g = Graph::no_grad();
        let l = m.batch_loss(&mut g, &seqs, None).unwrap();
        Ok::<_, ()>(g.value(l).item())
    };
    let mut g = Graph::new();
    let l = m.batch_loss(&mut g, &seqs, None).unwrap();
    let mut buf = GradBuffer::zeros_like(&m.store);
    buf.accumulate(&g.backward(l).unwrap());
    drop(g);
    let r = check_model(&mut m, &buf, 4, 3, loss).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn sasrec_exports_item_table() {
    let m = build_sasrec::<f32>(&sasrec_cfg(4)).unwrap();
    let idx = ItemIndex::new(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
    let e = m.item_embeddings(&idx).unwrap();
    assert_eq!(e.dim(), 16);
    assert_eq!(e.get("c").unwrap(), m.store.get(m.store.id("item_emb").unwrap()).row(2));
    assert!(m.item_embeddings(&ItemIndex::new(vec!["a".into()])).is_err());
}

#[test]
fn sasrec_sequences_take_longest_prefix_per_user() {
    let train = [ex(0, &[1], 2), ex(0, &[1, 2], 3), ex(1, &[7], 8), ex(0, &[1, 2, 3], 4)];
    assert_eq!(sasrec_sequences(&train), vec![vec![1, 2, 3, 4], vec![7, 8]]);
}

#[test]
fn select_lr_keeps_best_and_breaks_ties_early() {
    let (lr, m, scores) = select_lr(&[1e-2, 1e-3, 1e-4], |lr| Ok((lr * 2.0, if lr == 1e-2 { 0.1 } else { 0.3 }))).unwrap();
    assert_eq!(lr, 1e-3);
    assert_eq!(m, 2e-3);
    assert_eq!(scores.len(), 3);
    assert!(select_lr::<()>(&[], |_| unreachable!()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sasrec_is_causal(seq in proptest::collection::vec(0usize..12, 2..9), cut in 1usize..8, repl in 0usize..12) {
        let cut = cut.min(seq.len() - 1);
        let m = build_sasrec::<f32>(&sasrec_cfg(12)).unwrap();
        let a = m.hidden_states(&seq).unwrap();
        let mut other = seq.clone();
        for x in &mut other[cut..] {
            *x = (*x + repl + 1) % 12;
        }
        let b = m.hidden_states(&other).unwrap();
        for t in 0..cut {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn tiger_count_matches_census_for_random_shapes(
        layers in 1usize..3, d in 2usize..12, heads in 1usize..4, d_kv in 1usize..6, d_ff in 1usize..16,
        vocab in 5usize..40, tie: bool, gated: bool,
    ) {
        let cfg = Seq2SeqConfig {
            layers, d_model: d, heads, d_kv, d_ff, vocab_size: vocab, max_positions: 8,
            tie_embeddings: tie, gated_ff: gated, ..Seq2SeqConfig::default()
        };
        prop_assert_eq!(build_tiger::<f32>(&cfg).unwrap().store.census(), cfg.param_count());
    }
}
