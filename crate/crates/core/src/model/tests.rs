use super::*;
use crate::data::{CLS_ID, PAD_ID};
use crate::numerics::{finite_difference_grad, relative_error};

fn small_config(reconstructor: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        embed_dim: 6,
        hidden_dim: 5,
        num_classes: 3,
        max_len: 6,
        reconstructor,
    }
}

fn acceptance_config(reconstructor: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 200,
        embed_dim: 32,
        hidden_dim: 32,
        num_classes: 2,
        max_len: 16,
        reconstructor,
    }
}

const IDS: [usize; 6] = [CLS_ID, 5, 7, 5, 9, PAD_ID];
const MASK: [bool; 6] = [true, true, true, true, true, false];

/// Parameters with enough spread that every path carries signal.
fn spread_params(reconstructor: bool, seed: u64) -> ModelParams {
    let mut p = init_params(small_config(reconstructor), seed).unwrap();
    for t in p.tensors_mut() {
        let mut i = 0.0;
        for v in t.data_mut() {
            i += 1.0;
            *v = *v * 20.0 + 0.05 * (i * 0.37f64).sin();
        }
    }
    p
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = init_params(acceptance_config(true), 7).unwrap();
    let b = init_params(acceptance_config(true), 7).unwrap();
    assert_eq!(a, b);
    let c = init_params(acceptance_config(true), 8).unwrap();
    assert_ne!(a, c);
    let weights = [
        &a.embedding,
        &a.position,
        &a.query,
        &a.key,
        &a.value,
        &a.ffn_weight,
        &a.classifier,
        &a.reconstructor.as_ref().unwrap().ffn_weight,
    ];
    for w in weights {
        assert!(w.max_abs() <= 0.05);
    }
    assert!(a.ffn_bias.data().iter().all(|&v| v == 0.0));
}

#[test]
fn base_weights_do_not_depend_on_reconstructor() {
    let with = init_params(acceptance_config(true), 3).unwrap();
    let without = init_params(acceptance_config(false), 3).unwrap();
    assert_eq!(with.embedding, without.embedding);
    assert_eq!(with.classifier, without.classifier);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = small_config(false);
    c.max_len = 1;
    assert!(init_params(c, 0).is_err());
    let mut c = small_config(false);
    c.vocab_size = 0;
    assert!(init_params(c, 0).is_err());
}

#[test]
fn embed_all_pad() {
    let p = init_params(small_config(false), 1).unwrap();
    let ids = [PAD_ID; 4];
    let out = embed(&ids, &p).unwrap();
    for pos in 0..4 {
        for j in 0..6 {
            assert_eq!(
                out.get(pos, j),
                p.embedding.get(PAD_ID, j) + p.position.get(pos, j)
            );
        }
    }
}

#[test]
fn embed_rejects_out_of_range_ids() {
    let p = init_params(small_config(false), 1).unwrap();
    assert!(matches!(
        embed(&[CLS_ID, 12], &p),
        Err(Error::TokenOutOfRange { id: 12, vocab: 12 })
    ));
}

#[test]
fn embed_gradient_counts_occurrences() {
    let p = init_params(small_config(false), 1).unwrap();
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, &p, true);
    let e = embed_on(&mut tape, &pv, &IDS).unwrap();
    let s = tape.sum(e);
    let g = tape.backward(s, &[pv.embedding]).unwrap();
    let g = g.get(pv.embedding).unwrap();
    // id 5 appears twice
    assert!(g.row(5).iter().all(|&v| v == 2.0));
    assert!(g.row(7).iter().all(|&v| v == 1.0));
    assert!(g.row(3).iter().all(|&v| v == 0.0));

    let fd = finite_difference_grad(
        |emb| {
            let mut q = p.clone();
            q.embedding = emb.clone();
            embed(&IDS, &q).unwrap().data().iter().sum()
        },
        &p.embedding,
        1e-5,
    );
    assert!(relative_error(g, &fd) < 1e-8);
}

#[test]
fn encode_permutation_symmetry() {
    let p = spread_params(false, 2);
    let emb = embed(&IDS, &p).unwrap();
    let base = encode(&emb, &MASK, &p).unwrap();

    // swap positions 1 and 4, together with their positional rows
    let mut q = p.clone();
    let (r1, r4) = (p.position.row(1).to_vec(), p.position.row(4).to_vec());
    q.position.row_mut(1).copy_from_slice(&r4);
    q.position.row_mut(4).copy_from_slice(&r1);
    let mut ids = IDS;
    ids.swap(1, 4);
    let mut mask = MASK;
    mask.swap(1, 4);
    let out = encode(&embed(&ids, &q).unwrap(), &mask, &q).unwrap();

    for (a, b) in [(0, 0), (1, 4), (4, 1), (2, 2), (3, 3)] {
        for (x, y) in base.token_hidden.row(a).iter().zip(out.token_hidden.row(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_positions_get_no_attention() {
    let p = spread_params(false, 3);
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, &p, false);
    let e = embed_on(&mut tape, &pv, &IDS).unwrap();
    encode_on(&mut tape, &pv, e, &MASK).unwrap();
    // the first softmax on the tape is the attention matrix
    let attn = (0..tape.len())
        .map(|i| tape.value(Var::from_index(i)))
        .find(|t| {
            t.shape() == [6, 6] && t.data().iter().all(|&v| (0.0..=1.0).contains(&v)) && {
                (0..6).all(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12)
            }
        })
        .expect("attention matrix on tape")
        .clone();
    for r in 0..6 {
        assert_eq!(attn.get(r, 5), 0.0);
        let live: f64 = attn.row(r)[..5].iter().sum();
        assert!((live - 1.0).abs() < 1e-12);
    }
}

#[test]
fn masked_embedding_does_not_reach_sentence_rep() {
    let p = spread_params(false, 4);
    let emb = embed(&IDS, &p).unwrap();
    let base = encode(&emb, &MASK, &p).unwrap();
    let mut changed = emb.clone();
    changed.row_mut(5).iter_mut().for_each(|v| *v += 3.7);
    let out = encode(&changed, &MASK, &p).unwrap();
    for (a, b) in base.sentence_rep.data().iter().zip(out.sentence_rep.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(base.sentence_rep.data(), base.token_hidden.row(0));
}

#[test]
fn encode_requires_cls_in_mask() {
    let p = init_params(small_config(false), 1).unwrap();
    let emb = embed(&IDS, &p).unwrap();
    let mut mask = MASK;
    mask[0] = false;
    assert!(encode(&emb, &mask, &p).is_err());
}

#[test]
fn encode_finite_on_large_inputs() {
    let p = spread_params(false, 5);
    let emb = Tensor::new(
        vec![6, 6],
        (0..36)
            .map(|i| ((i * 7919) % 201) as f64 / 10.0 - 10.0)
            .collect(),
    )
    .unwrap();
    let out = encode(&emb, &MASK, &p).unwrap();
    assert!(out.token_hidden.is_finite());
}

#[test]
fn classify_cases() {
    let mut p = spread_params(false, 6);
    let rep = Tensor::vector(vec![0.4, -1.2, 2.0, 0.1, -0.3]);
    let probs = classify(&rep, &p).unwrap();
    assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let best = argmax(probs.data());

    p.classifier = p.classifier.scaled(2.0);
    assert_eq!(argmax(classify(&rep, &p).unwrap().data()), best);

    p.classifier = Tensor::zeros(&[3, 5]);
    let probs = classify(&rep, &p).unwrap();
    assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn reconstruct_logits_shape_and_row_consistency() {
    let p = spread_params(true, 7);
    let mut th = Tensor::new(
        vec![6, 5],
        (0..30).map(|i| (i as f64 * 0.31).cos()).collect(),
    )
    .unwrap();
    let row2 = th.row(2).to_vec();
    th.row_mut(4).copy_from_slice(&row2);
    let logits = reconstruct_logits(&th, &p).unwrap();
    assert_eq!(logits.shape(), &[6, 12]);
    assert_eq!(logits.row(2), logits.row(4));
}

#[test]
fn reconstruct_requires_head() {
    let p = init_params(small_config(false), 1).unwrap();
    assert!(reconstruct_logits(&Tensor::zeros(&[6, 5]), &p).is_err());
}

#[test]
fn reconstruction_loss_cases() {
    let ids = [CLS_ID, 4, 8, PAD_ID];
    let mask = [true, true, true, false];
    let uniform = reconstruction_loss(&Tensor::zeros(&[4, 12]), &ids, &mask).unwrap();
    assert!((uniform - 12f64.ln()).abs() < 1e-12);

    let mut sat = Tensor::full(&[4, 12], -1000.0);
    for (pos, &id) in ids.iter().enumerate() {
        sat.data_mut()[pos * 12 + id] = 1000.0;
    }
    assert!(reconstruction_loss(&sat, &ids, &mask).unwrap() < 1e-12);

    let mut cls_changed = sat.clone();
    cls_changed.row_mut(0).iter_mut().for_each(|v| *v = 37.0);
    assert_eq!(
        reconstruction_loss(&cls_changed, &ids, &mask).unwrap(),
        reconstruction_loss(&sat, &ids, &mask).unwrap()
    );

    assert!(matches!(
        reconstruction_loss(&sat, &ids, &[true, false, false, false]),
        Err(Error::NoPositions)
    ));
}

#[test]
fn param_count_inventory() {
    let base = init_params(acceptance_config(false), 0).unwrap();
    let rar = init_params(acceptance_config(true), 0).unwrap();
    // E 200x32, P 16x32, Wq/Wk/Wv 32x32, FF 32x32 + 32, LN 2x32, W 2x32
    let hand = 6400 + 512 + 3 * 1024 + 1024 + 32 + 64 + 64;
    assert_eq!(param_count(&base), hand);
    // FF1 32x32 + 32, LN 2x32; the tied projection adds nothing
    assert_eq!(param_count(&rar), hand + 1024 + 32 + 64);
    assert!(param_count(&rar) > param_count(&base));

    let mut doubled = acceptance_config(true);
    doubled.vocab_size = 400;
    let big = init_params(doubled, 0).unwrap();
    assert_eq!(param_count(&big) - param_count(&rar), 200 * 32);
}

#[test]
fn tied_projection_tracks_embedding_updates() {
    let mut p = spread_params(true, 8);
    let th = Tensor::new(
        vec![6, 5],
        (0..30).map(|i| (i as f64 * 0.7).sin()).collect(),
    )
    .unwrap();
    let before = reconstruct_logits(&th, &p).unwrap();
    p.embedding.data_mut()[3 * 6 + 1] += 0.5;
    let after = reconstruct_logits(&th, &p).unwrap();
    assert_ne!(before, after);

    // the projection is exactly x E^T for the current E
    let r = p.reconstructor.as_ref().unwrap();
    let mut tape = GradTape::new();
    let x = tape.constant(th.clone());
    let w = tape.constant(r.ffn_weight.clone());
    let b = tape.constant(r.ffn_bias.clone());
    let x = tape.matmul(x, w).unwrap();
    let x = tape.add_row_bias(x, b).unwrap();
    let x = tape.gelu(x);
    let g = tape.constant(r.ln_gain.clone());
    let bb = tape.constant(r.ln_bias.clone());
    let x = tape.layer_norm(x, g, bb, DEFAULT_LAYER_NORM_EPS).unwrap();
    let manual = tape
        .value(x)
        .matmul(&p.embedding.transpose().unwrap())
        .unwrap();
    assert_eq!(manual, after);
}

/// Loss of a small example under `params`, forward only.
fn classification_loss(params: &ModelParams, ids: &[usize], mask: &[bool], label: usize) -> f64 {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let f = forward_on(&mut tape, &pv, ids, mask, None).unwrap();
    let l = tape.cross_entropy(f.logits, &[label], &[true]).unwrap();
    tape.value(l).item()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let p = spread_params(false, 9);
    let ids = [CLS_ID, 4, 6, 4, 10, PAD_ID];
    let mask = [true, true, true, true, true, false];
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, &p, true);
    let f = forward_on(&mut tape, &pv, &ids, &mask, None).unwrap();
    let loss = tape.cross_entropy(f.logits, &[2], &[true]).unwrap();
    let grads = tape.backward(loss, pv.all()).unwrap();

    let named = p.named();
    for (k, (name, t)) in named.iter().enumerate() {
        let fd = finite_difference_grad(
            |x| {
                let mut q = p.clone();
                *q.tensors_mut()[k] = x.clone();
                classification_loss(&q, &ids, &mask, 2)
            },
            t,
            1e-5,
        );
        let g = grads.get(pv.all()[k]).unwrap();
        let err = relative_error(g, &fd);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
        assert!(
            g.max_abs() > 0.0 || *name == "position",
            "{name} has no gradient"
        );
    }
}

fn recon_loss_with(
    params: &ModelParams,
    ids: &[usize],
    mask: &[bool],
    tie_live: bool,
    embed_live: bool,
) -> (f64, Tensor) {
    let mut tape = GradTape::new();
    let mut pv = ParamVars::register(&mut tape, params, true);
    let frozen = tape.constant(params.embedding.clone());
    let live = pv.embedding;
    pv.embedding = if embed_live { live } else { frozen };
    let f = forward_on(&mut tape, &pv, ids, mask, None).unwrap();
    pv.embedding = if tie_live { live } else { frozen };
    let logits = reconstruct_logits_on(&mut tape, &pv, f.encoded.token_hidden).unwrap();
    let loss = reconstruction_loss_on(&mut tape, logits, ids, mask).unwrap();
    let g = tape.backward(loss, &[live]).unwrap();
    (tape.value(loss).item(), g.get(live).unwrap().clone())
}

#[test]
fn reconstruction_gradient_flows_through_both_embedding_paths() {
    let p = spread_params(true, 10);
    let ids = [CLS_ID, 3, 8, 11, PAD_ID, PAD_ID];
    let mask = [true, true, true, true, false, false];

    let (_, both) = recon_loss_with(&p, &ids, &mask, true, true);
    let (_, tied_only) = recon_loss_with(&p, &ids, &mask, true, false);
    let (_, input_only) = recon_loss_with(&p, &ids, &mask, false, true);
    assert!(tied_only.max_abs() > 1e-6);
    assert!(input_only.max_abs() > 1e-6);
    let mut sum = tied_only.clone();
    sum.add_assign(&input_only).unwrap();
    assert!(relative_error(&sum, &both) < 1e-12);

    let fd = finite_difference_grad(
        |e| {
            let mut q = p.clone();
            q.embedding = e.clone();
            recon_loss_with(&q, &ids, &mask, true, true).0
        },
        &p.embedding,
        1e-5,
    );
    assert!(relative_error(&both, &fd) < 1e-4);
}

#[test]
fn from_named_round_trip_and_shape_check() {
    let p = init_params(small_config(true), 4).unwrap();
    let named: Vec<(String, Tensor)> = p
        .named()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    assert_eq!(ModelParams::from_named(p.config, named.clone()).unwrap(), p);

    let mut bad = named;
    bad[0].1 = Tensor::zeros(&[2, 2]);
    assert!(ModelParams::from_named(p.config, bad).is_err());
}
