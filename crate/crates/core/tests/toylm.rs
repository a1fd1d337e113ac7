mod common;

use hyperprompt::encoder::{EncoderConfig, HyperTrans};
use hyperprompt::gformer::{GFormer, GFormerConfig};
use hyperprompt::hypergraph::table_to_hypergraph;
use hyperprompt::numerics::{grad_check, Graph, ParamStore, Tensor, Trainable};
use hyperprompt::toylm::{PromptPlacement, Tokenizer, ToyLm, ToyLmConfig};
use hyperprompt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ToyLmConfig {
    ToyLmConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_positions: 64,
        max_len: 48,
        ..ToyLmConfig::default()
    }
}

fn logits(lm: &ToyLm, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let v = g.input(x.clone());
    let out = lm.forward(&mut g, store, v).unwrap();
    g.value(out).clone()
}

#[test]
fn strict_causality() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(12, 16, 1.0, &mut rng);
    let base = logits(&lm, &store, &x);
    for p in 0..12 {
        let mut y = x.clone();
        for v in y.row_mut(p) {
            *v += 0.5;
        }
        let out = logits(&lm, &store, &y);
        for i in 0..12 {
            let same = out
                .row(i)
                .iter()
                .zip(base.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert_eq!(same, i < p, "row {i} after perturbing {p}");
        }
    }
}

#[test]
fn loss_at_init_is_near_uniform() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(ToyLmConfig::default(), &mut store).unwrap();
    let text = lm
        .prompt_text(
            "| a | b |\n| --- | --- |\n| 1 | 2 |",
            "What's the column name of \"1\"?",
        )
        .ids;
    let mut g = Graph::inference();
    let p = g.input(Tensor::randn(10, 128, 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
    let loss = lm
        .lm_loss(&mut g, &store, &text, Some(p), &Tokenizer.encode("a"))
        .unwrap();
    let l = g.value(loss).data()[0];
    let u = (Tokenizer::VOCAB as f64).ln();
    assert!((l - u).abs() < 0.1 * u, "{l} vs {u}");
}

#[test]
fn loss_ignores_non_answer_positions_and_sees_prompt() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Tensor::randn(3, 16, 1.0, &mut rng);
    let run = |text: &[usize], p: &Tensor| {
        let mut g = Graph::inference();
        let pv = g.input(p.clone());
        let l = lm.lm_loss(&mut g, &store, text, Some(pv), &[65, 66]).unwrap();
        g.value(l).data()[0]
    };
    // Manual oracle: logits of the whole sequence, NLL of rows n-1..n+1.
    let text = [10, 20, 30];
    let mut g = Graph::inference();
    let pv = g.input(p.clone());
    let x = lm.assemble_input(&mut g, &store, &text, Some(pv)).unwrap();
    let a = lm.embed_at(&mut g, &store, &[65, 66], 6).unwrap();
    let x = g.concat_rows(&[x, a]).unwrap();
    let lg = lm.forward(&mut g, &store, x).unwrap();
    let lg = g.value(lg).clone();
    let nll = |row: &[f64], t: usize| {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - row[t]
    };
    let want = (nll(lg.row(5), 65) + nll(lg.row(6), 66) + nll(lg.row(7), Tokenizer::EOS)) / 3.0;
    assert!((run(&text, &p) - want).abs() < 1e-12);
    let mut q = p.clone();
    q.set(0, 0, q.get(0, 0) + 1.0);
    assert!(run(&text, &q) != run(&text, &p));
}

#[test]
fn empty_answer_and_width_errors() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let mut g = Graph::inference();
    let p = g.input(Tensor::zeros(2, 16));
    assert!(matches!(
        lm.lm_loss(&mut g, &store, &[1], Some(p), &[]),
        Err(Error::EmptyAnswer)
    ));
    let w = g.input(Tensor::zeros(2, 15));
    assert!(matches!(
        lm.assemble_input(&mut g, &store, &[1], Some(w)),
        Err(Error::WidthMismatch {
            expected: 16,
            found: 15
        })
    ));
}

#[test]
fn assembly_order_and_positions() {
    let mut store = ParamStore::new();
    let mut cfg = small();
    let lm = ToyLm::new(cfg.clone(), &mut store).unwrap();
    let pos = store.get(lm.pos_emb).clone();
    let tok = store.get(lm.tok_emb).clone();
    let p = Tensor::randn(2, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mut g = Graph::inference();
    let pv = g.input(p.clone());
    let x = lm.assemble_input(&mut g, &store, &[7, 8, 9], Some(pv)).unwrap();
    let x = g.value(x).clone();
    assert_eq!(x.rows(), 5);
    for c in 0..16 {
        assert_eq!(x.get(1, c), tok.get(8, c) + pos.get(1, c));
        assert_eq!(x.get(3, c), p.get(0, c) + pos.get(3, c));
    }
    let mut g = Graph::inference();
    let none = lm.assemble_input(&mut g, &store, &[7, 8, 9], None).unwrap();
    assert_eq!(g.shape(none).0, 3);

    cfg.placement = PromptPlacement::Prepend;
    cfg.prompt_positions = false;
    let mut store2 = ParamStore::new();
    let lm2 = ToyLm::new(cfg, &mut store2).unwrap();
    let mut g = Graph::inference();
    let pv = g.input(p.clone());
    let x = lm2.assemble_input(&mut g, &store2, &[7], Some(pv)).unwrap();
    let x = g.value(x).clone();
    let tok2 = store2.get(lm2.tok_emb);
    let pos2 = store2.get(lm2.pos_emb);
    for c in 0..16 {
        assert_eq!(x.get(0, c), p.get(0, c));
        assert_eq!(x.get(2, c), tok2.get(7, c) + pos2.get(2, c));
    }
}

#[test]
fn cached_loss_matches_full_loss() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let text = Tokenizer.encode("some table text\nq?\n");
    let cache = lm.prefix_cache(&store, &text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in [0usize, 1, 4] {
        let p = Tensor::randn(m.max(1), 16, 1.0, &mut rng);
        for answer in [vec![70], vec![70, 71, 72]] {
            let mut g = Graph::inference();
            let pv = (m > 0).then(|| g.input(p.clone()));
            let a = lm.lm_loss(&mut g, &store, &text, pv, &answer).unwrap();
            let pv = (m > 0).then(|| g.input(p.clone()));
            let b = lm.lm_loss_cached(&mut g, &store, &cache, pv, &answer).unwrap();
            let (a, b) = (g.value(a).data()[0], g.value(b).data()[0]);
            assert!((a - b).abs() < 1e-12, "m={m}: {a} vs {b}");
        }
    }
}

#[test]
fn generation_is_greedy_and_bounded() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let text = Tokenizer.encode("abc\n");
    let p = Tensor::randn(2, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(lm.generate(&store, &text, Some(&p), 0).unwrap(), "");
    let a = lm.generate_ids(&store, &text, Some(&p), 5).unwrap();
    assert_eq!(a, lm.generate_ids(&store, &text, Some(&p), 5).unwrap());
    assert!(a.len() <= 5);
    // Oracle: full recomputation of the argmax at each step.
    let mut seq = Vec::new();
    for _ in 0..5 {
        let mut g = Graph::inference();
        let pv = g.input(p.clone());
        let x = lm.assemble_input(&mut g, &store, &text, Some(pv)).unwrap();
        let n = g.shape(x).0;
        let x = if seq.is_empty() {
            x
        } else {
            let e = lm.embed_at(&mut g, &store, &seq, n).unwrap();
            g.concat_rows(&[x, e]).unwrap()
        };
        let lg = lm.forward(&mut g, &store, x).unwrap();
        let lg = g.value(lg);
        let row = lg.row(lg.rows() - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        if best == Tokenizer::EOS {
            break;
        }
        seq.push(best);
    }
    assert_eq!(a, seq);
    let cache = lm.prefix_cache(&store, &text).unwrap();
    assert_eq!(lm.generate_cached(&store, &cache, &p, 5).unwrap(), a);
}

#[test]
fn prompt_text_keeps_question_when_truncating() {
    let mut store = ParamStore::new();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    let s = "x".repeat(100);
    let t = lm.prompt_text(&s, "why?");
    assert!(t.truncated);
    assert_eq!(t.ids.len(), 48);
    assert_eq!(Tokenizer.decode(&t.ids[43..]), "why?\n");
    let t = lm.prompt_text("ab", "q");
    assert!(!t.truncated);
    assert_eq!(Tokenizer.decode(&t.ids), "ab\nq\n");
    let t = lm.prompt_text("", &"y".repeat(60));
    assert_eq!(t.ids.len(), 48);
}

#[test]
fn lora_identity_merge_and_count() {
    let mut store = ParamStore::new();
    let mut lm = ToyLm::new(small(), &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(6, 16, 1.0, &mut rng);
    let base = logits(&lm, &store, &x);
    let added = lm.apply_lora(&mut store, 3, 6.0).unwrap();
    // q, k, v, o: 16→16; up 16→32; down 32→16.
    let per_block = 4 * 3 * (16 + 16) + 2 * 3 * (16 + 32);
    assert_eq!(store.numel(added.iter().copied()), 2 * per_block);
    let fresh = logits(&lm, &store, &x);
    assert!(fresh
        .data()
        .iter()
        .zip(base.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    let bs: Vec<_> = added
        .iter()
        .copied()
        .filter(|id| store.name(*id).ends_with(".b"))
        .collect();
    for id in bs {
        let t = Tensor::randn(store.get(id).rows(), store.get(id).cols(), 0.3, &mut rng);
        store.set(id, t).unwrap();
    }
    let adapted = logits(&lm, &store, &x);
    assert!(adapted.max_abs_diff(&base) > 1e-6);
    lm.merge_lora(&mut store).unwrap();
    assert!(lm.adapter_params().is_empty());
    assert!(logits(&lm, &store, &x).max_abs_diff(&adapted) < 1e-12);
}

#[test]
fn lora_rank_limit() {
    let mut store = ParamStore::new();
    let mut lm = ToyLm::new(small(), &mut store).unwrap();
    assert!(matches!(
        lm.apply_lora(&mut store, 17, 1.0),
        Err(Error::RankTooLarge {
            rank: 17,
            d_in: 16,
            d_out: 16
        })
    ));
}

#[test]
fn frozen_lm_gradients_reach_prompt_side_only() {
    let mut store = ParamStore::new();
    let enc = HyperTrans::new(
        EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ..EncoderConfig::default()
        },
        &mut store,
    )
    .unwrap();
    let gf = GFormer::new(
        GFormerConfig {
            queries: 2,
            hidden: 8,
            layers: 1,
            heads: 2,
            node_dim: 8,
            lm_dim: 16,
            max_text: 32,
            ..GFormerConfig::default()
        },
        &mut store,
    )
    .unwrap();
    let lm = ToyLm::new(small(), &mut store).unwrap();
    common::jitter(&mut store, 0.3, 0);
    let t = common::table(&["a", "b"], &[&["x", "y"], &["z", "w"]]);
    let hg = table_to_hypergraph(&t);
    let mut trainable = enc.params();
    trainable.extend(gf.prompt_params());
    let text = Tokenizer.encode("hi\n");
    let f = |g: &mut Graph, s: &ParamStore| {
        let (nodes, _) = enc.forward(g, s, &hg)?;
        let p = gf.soft_prompt(g, s, Some(nodes))?;
        lm.lm_loss(g, s, &text, Some(p), &[65, 66])
    };
    let report = grad_check(
        &store,
        &trainable,
        &Trainable::only(trainable.clone()),
        f,
        &common::pipeline_check(),
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst());
    let mut g = Graph::with_trainable(Trainable::only(trainable.clone()));
    let l = f(&mut g, &store).unwrap();
    let grads = g.backward(l).unwrap().params(&g);
    let lm_ids: Vec<_> = lm.params();
    assert!(grads.iter().all(|(id, _)| !lm_ids.contains(id)));
    assert!(grads
        .iter()
        .any(|(id, g)| trainable.contains(id) && g.data().iter().any(|v| *v != 0.0)));
}
