use super::*;
use crate::corpus::{CategorySchema, Instance, Split};
use approx::assert_abs_diff_eq;

fn schema() -> CategorySchema {
    CategorySchema::computer()
}

fn tiny(head: ExtractorHead, kind: EncoderKind) -> Model {
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        extractor_head: head,
        encoder_kind: kind,
        init_scale: 0.5,
        seed: 3,
        ..Default::default()
    };
    Model::new(cfg, Vocab::build(["abcdefgh"], '.'), schema(), '.').unwrap()
}

fn instance() -> Instance {
    let s = schema();
    Instance {
        product_id: "p".into(),
        category: s.category.clone(),
        sentences: vec!["abc".into(), "dxe".into(), "fgh".into()],
        aspect: s.aspects[1].clone(),
        summary: "xeg".into(),
        split: Split::Train,
    }
}

const COMBOS: [(ExtractorHead, EncoderKind); 4] = [
    (ExtractorHead::Bilinear, EncoderKind::Recurrent),
    (ExtractorHead::Ffn, EncoderKind::Recurrent),
    (ExtractorHead::Bilinear, EncoderKind::Transformer),
    (ExtractorHead::Ffn, EncoderKind::Transformer),
];

#[test]
fn fused_embedding_contract() {
    let mut m = tiny(ExtractorHead::Bilinear, EncoderKind::Recurrent);
    let s = schema();
    let toks = [3, 4, 5, 3];
    let a = m.embed_fused(&toks, Some(&s.aspects[0])).unwrap();
    let b = m.embed_fused(&toks, Some(&s.aspects[2])).unwrap();
    assert_eq!(a.fused.shape(), (4, 8));
    for r in 0..4 {
        for c in 0..8 {
            let d = a.fused.get(r, c) - b.fused.get(r, c);
            assert_abs_diff_eq!(d, a.aspect_embedding[c] - b.aspect_embedding[c], epsilon = 1e-12);
        }
    }
    let aspect = m.ids.aspect;
    m.params_mut().get_mut(aspect).fill(0.0);
    let z = m.embed_fused(&toks, Some(&s.aspects[0])).unwrap();
    assert_eq!(z.fused, z.word_embeddings);
    assert!(matches!(
        m.embed_fused(&[999], None),
        Err(Error::OutOfVocabulary { id: 999, .. })
    ));
}

#[test]
fn transformer_sentences_are_period_rows() {
    let m = tiny(ExtractorHead::Ffn, EncoderKind::Transformer);
    let l = m.layout(&["abc", "de"]).unwrap();
    let f = m.embed_fused(&l.token_ids, None).unwrap();
    let out = m.encode(&f, &l.period_indices).unwrap();
    assert_eq!(out.sentence_map, l.sentence_map);
    for (i, &p) in l.period_indices.iter().enumerate() {
        assert_eq!(out.sentence_reps.row(i), out.word_reps.row(p));
    }
}

#[test]
fn single_sentence_and_missing_separator() {
    let m = tiny(ExtractorHead::Bilinear, EncoderKind::Recurrent);
    let l = m.layout(&["abcd"]).unwrap();
    let f = m.embed_fused(&l.token_ids, None).unwrap();
    let out = m.encode(&f, &l.period_indices).unwrap();
    assert_eq!(out.sentence_reps.rows(), 1);
    assert!(out.sentence_map.iter().all(|&i| i == 0));
    assert!(m.encode(&f, &[2]).is_err());
}

#[test]
fn permuting_sentences_permutes_gathered_reps() {
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        encoder_kind: EncoderKind::Transformer,
        position_features: false,
        seed: 9,
        ..Default::default()
    };
    let m = Model::new(cfg, Vocab::build(["abcdefgh"], '.'), schema(), '.').unwrap();
    let run = |sents: &[&str]| {
        let l = m.layout(sents).unwrap();
        let f = m.embed_fused(&l.token_ids, None).unwrap();
        m.encode(&f, &l.period_indices).unwrap().sentence_reps
    };
    let a = run(&["abc", "de", "fgh"]);
    let b = run(&["fgh", "abc", "de"]);
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }
}

#[test]
fn extractor_extremes() {
    let m = tiny(ExtractorHead::Bilinear, EncoderKind::Recurrent);
    let h = Tensor::from_vec(2, 8, (0..16).map(|i| i as f64 * 0.1 - 0.5).collect());
    assert_eq!(m.extractor_score(&h, &[0.0; 8]).unwrap(), vec![0.5, 0.5]);
    let big = Tensor::from_vec(1, 8, vec![1.0; 8]);
    let s = m.extractor_score(&big, &[1e3; 8]).unwrap();
    assert!(1.0 - s[0] < 1e-12);

    let mut f = tiny(ExtractorHead::Ffn, EncoderKind::Recurrent);
    for name in ["ext.w1", "ext.b1", "ext.w2", "ext.b2"] {
        let id = f.params().id(name).unwrap();
        f.params_mut().get_mut(id).fill(0.0);
    }
    assert_eq!(f.extractor_score(&h, &[0.3; 8]).unwrap(), vec![0.5, 0.5]);

    let none = Model::new(
        ModelConfig {
            use_extractor: false,
            ..m.config().clone()
        },
        m.vocab().clone(),
        schema(),
        '.',
    )
    .unwrap();
    assert!(none.extractor_score(&h, &[0.0; 8]).is_err());
}

#[test]
fn decoder_step_distributions() {
    for (head, kind) in COMBOS {
        let m = tiny(head, kind);
        let s = m.start_decoding(&["abc", "dzz"], Some(&schema().aspects[0])).unwrap();
        assert_eq!(s.layout().extended_size(), m.vocab().len() + 1);
        let mut state = s.initial_state();
        let mut prev = BOS;
        for _ in 0..3 {
            let (dist, next, att) = s.step(&state, prev);
            assert_eq!(dist.len(), s.layout().extended_size());
            assert_abs_diff_eq!(dist.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(att.word_attention.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(att.fused_attention.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(att.sentence_scores.iter().all(|&b| b > 0.0 && b < 1.0));
            assert_eq!(att.sentence_scores.len(), 2);
            state = next;
            prev = m.vocab().len();
        }
    }
}

#[test]
fn loss_composition() {
    let m = tiny(ExtractorHead::Bilinear, EncoderKind::Recurrent);
    let ex = m.prepare(&instance(), Some(&[0, 1, 0])).unwrap();
    // 'x' is out of vocabulary and copyable
    assert_eq!(ex.targets[0], m.vocab().len());
    let b = m.loss(&ex, LossOptions::default()).unwrap();
    assert_abs_diff_eq!(b.loss_total, b.loss_ext + b.loss_gen, epsilon = 1e-12);
    assert_eq!(b.target_length, 4);
    let z = m
        .loss(
            &ex,
            LossOptions {
                ext_weight: 0.0,
                null_aspect: false,
            },
        )
        .unwrap();
    assert_eq!(z.loss_total, z.loss_gen);
    let n = m
        .loss(
            &ex,
            LossOptions {
                ext_weight: 1.0,
                null_aspect: true,
            },
        )
        .unwrap();
    assert_eq!(n.loss_ext, 0.0);
    assert!(m.prepare(&instance(), Some(&[0, 1])).is_err());
}

/// Central-difference check of every parameter scalar touched by the loss.
fn max_rel_error(m: &mut Model, ex: &Example, opts: LossOptions) -> f64 {
    let (_, grads) = m.loss_and_grads(ex, opts).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        for k in 0..m.params().get(id).data().len() {
            let a = grads.get(id).data()[k];
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + eps;
            let plus = m.loss(ex, opts).unwrap().loss_total;
            m.params_mut().get_mut(id).data_mut()[k] = orig - eps;
            let minus = m.loss(ex, opts).unwrap().loss_total;
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            let n = (plus - minus) / (2.0 * eps);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for (head, kind) in COMBOS {
        let mut m = tiny(head, kind);
        let ex = m.prepare(&instance(), Some(&[0, 1, 0])).unwrap();
        let err = max_rel_error(&mut m, &ex, LossOptions::default());
        assert!(err < 1e-4, "{head:?}/{kind:?}: {err}");
    }
}

#[test]
fn extractor_gets_gradient_through_fusion_alone() {
    let m = tiny(ExtractorHead::Ffn, EncoderKind::Recurrent);
    let ex = m.prepare(&instance(), Some(&[0, 1, 0])).unwrap();
    let opts = LossOptions {
        ext_weight: 0.0,
        null_aspect: false,
    };
    let (_, g) = m.loss_and_grads(&ex, opts).unwrap();
    let w2 = m.params().id("ext.w2").unwrap();
    assert!(g.get(w2).sq_norm() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = tiny(ExtractorHead::Ffn, EncoderKind::Transformer);
    let bytes = m.to_bytes().unwrap();
    assert!(bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()));
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.config(), m.config());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap().params(), m.params());

    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(Model::from_bytes(&broken).is_err());
    assert!(Model::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn unknown_aspect_is_rejected() {
    let m = tiny(ExtractorHead::Bilinear, EncoderKind::Recurrent);
    let bogus = AspectCategory {
        name: "battery".into(),
        index: 0,
    };
    assert!(m.aspect_row(Some(&bogus)).is_err());
    assert_eq!(m.aspect_row(None).unwrap(), 3);
}
