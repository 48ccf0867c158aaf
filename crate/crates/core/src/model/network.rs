//! Parameter layout and graph construction for encoder, extractor and
//! decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderKind, ExtractorHead, ModelConfig};
use super::graph::{Graph, NodeId, ParamId, Params};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct GruIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    size: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) enum EncoderIds {
    /// The generator's word pass and the extractor's own hierarchical
    /// word and sentence passes over the same fused embeddings.
    Recurrent {
        word_fwd: GruIds,
        word_bwd: GruIds,
        ext_word_fwd: GruIds,
        ext_word_bwd: GruIds,
        sent_fwd: GruIds,
        sent_bwd: GruIds,
    },
    Transformer {
        proj_w: ParamId,
        proj_b: ParamId,
        pos: Option<ParamId>,
        layers: Vec<LayerIds>,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum HeadIds {
    Bilinear,
    Ffn {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderIds {
    init_w: ParamId,
    init_b: ParamId,
    gru: GruIds,
    att_wh: ParamId,
    att_ws: ParamId,
    att_b: ParamId,
    att_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    gen_w: ParamId,
    gen_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub embed: ParamId,
    pub aspect: ParamId,
    pub encoder: EncoderIds,
    pub head: Option<HeadIds>,
    pub decoder: DecoderIds,
}

/// Registers and initialises every parameter of `cfg` in a fixed order.
pub(crate) fn init_params(cfg: &ModelConfig) -> (Params, ParamIds) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params::new();
    let s = cfg.init_scale;
    let (d, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
    let mut add = |p: &mut Params, name: &str, r: usize, c: usize| p.add_uniform(name, r, c, s, &mut rng);

    let embed = add(&mut p, "embed", v, d);
    let aspect = add(&mut p, "aspect", cfg.num_aspects + 1, d);

    let gru = |p: &mut Params, add: &mut dyn FnMut(&mut Params, &str, usize, usize) -> ParamId, name: &str, input: usize, size: usize| GruIds {
        w: add(p, &format!("{name}.w"), input, 3 * size),
        u: add(p, &format!("{name}.u"), size, 3 * size),
        b: add(p, &format!("{name}.b"), 1, 3 * size),
        size,
    };

    let encoder = match cfg.encoder_kind {
        EncoderKind::Recurrent => EncoderIds::Recurrent {
            word_fwd: gru(&mut p, &mut add, "enc.word_fwd", d, h / 2),
            word_bwd: gru(&mut p, &mut add, "enc.word_bwd", d, h / 2),
            ext_word_fwd: gru(&mut p, &mut add, "ext.word_fwd", d, h / 2),
            ext_word_bwd: gru(&mut p, &mut add, "ext.word_bwd", d, h / 2),
            sent_fwd: gru(&mut p, &mut add, "ext.sent_fwd", h, h / 2),
            sent_bwd: gru(&mut p, &mut add, "ext.sent_bwd", h, h / 2),
        },
        EncoderKind::Transformer => {
            let proj_w = add(&mut p, "enc.proj.w", d, h);
            let proj_b = add(&mut p, "enc.proj.b", 1, h);
            let pos = cfg
                .position_features
                .then(|| add(&mut p, "enc.pos", cfg.max_input_chars, h));
            let layers = (0..cfg.transformer_layers)
                .map(|l| LayerIds {
                    wq: add(&mut p, &format!("enc.{l}.wq"), h, h),
                    wk: add(&mut p, &format!("enc.{l}.wk"), h, h),
                    wv: add(&mut p, &format!("enc.{l}.wv"), h, h),
                    wo: add(&mut p, &format!("enc.{l}.wo"), h, h),
                    w1: add(&mut p, &format!("enc.{l}.ffn.w1"), h, h),
                    b1: add(&mut p, &format!("enc.{l}.ffn.b1"), 1, h),
                    w2: add(&mut p, &format!("enc.{l}.ffn.w2"), h, h),
                    b2: add(&mut p, &format!("enc.{l}.ffn.b2"), 1, h),
                })
                .collect();
            EncoderIds::Transformer {
                proj_w,
                proj_b,
                pos,
                layers,
            }
        }
    };

    let head = cfg.use_extractor.then(|| match cfg.extractor_head {
        ExtractorHead::Bilinear => HeadIds::Bilinear,
        ExtractorHead::Ffn => HeadIds::Ffn {
            w1: add(&mut p, "ext.w1", h, h),
            b1: add(&mut p, "ext.b1", 1, h),
            w2: add(&mut p, "ext.w2", h, 1),
            b2: add(&mut p, "ext.b2", 1, 1),
        },
    });

    let decoder = DecoderIds {
        init_w: add(&mut p, "dec.init.w", h, h),
        init_b: add(&mut p, "dec.init.b", 1, h),
        gru: gru(&mut p, &mut add, "dec.gru", d + h, h),
        att_wh: add(&mut p, "dec.att.wh", h, h),
        att_ws: add(&mut p, "dec.att.ws", h, h),
        att_b: add(&mut p, "dec.att.b", 1, h),
        att_v: add(&mut p, "dec.att.v", h, 1),
        out_w: add(&mut p, "dec.out.w", 2 * h, v),
        out_b: add(&mut p, "dec.out.b", 1, v),
        gen_w: add(&mut p, "dec.gen.w", 3 * h + d, 1),
        gen_b: add(&mut p, "dec.gen.b", 1, 1),
    };

    (
        p,
        ParamIds {
            embed,
            aspect,
            encoder,
            head,
            decoder,
        },
    )
}

fn gru_step(g: &mut Graph, gru: &GruIds, xr: NodeId, xz: NodeId, xn: NodeId, h: NodeId) -> NodeId {
    let k = gru.size;
    let u = g.param(gru.u);
    let hu = g.matmul(h, u);
    let hr = g.slice_cols(hu, 0, k);
    let hz = g.slice_cols(hu, k, k);
    let hn = g.slice_cols(hu, 2 * k, k);
    let r = g.add(xr, hr);
    let r = g.sigmoid(r);
    let z = g.add(xz, hz);
    let z = g.sigmoid(z);
    let rh = g.mul(r, hn);
    let n = g.add(xn, rh);
    let n = g.tanh(n);
    let diff = g.sub(h, n);
    let zd = g.mul(z, diff);
    g.add(n, zd)
}

/// Input projections `x W + b` split into the three gate blocks.
fn gru_inputs(g: &mut Graph, gru: &GruIds, xs: NodeId) -> [NodeId; 3] {
    let k = gru.size;
    let w = g.param(gru.w);
    let b = g.param(gru.b);
    let proj = g.matmul(xs, w);
    let proj = g.add_row(proj, b);
    [g.slice_cols(proj, 0, k), g.slice_cols(proj, k, k), g.slice_cols(proj, 2 * k, k)]
}

/// Runs a GRU over the rows of `xs` from a zero state; returns the states
/// as an `n×size` matrix in input order.
fn gru_sequence(g: &mut Graph, gru: &GruIds, xs: NodeId, reverse: bool) -> NodeId {
    let n = g.value(xs).rows();
    let [pr, pz, pn] = gru_inputs(g, gru, xs);
    let mut h = g.constant(Tensor::zeros(1, gru.size));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xr = g.select_rows(pr, &[t]);
        let xz = g.select_rows(pz, &[t]);
        let xn = g.select_rows(pn, &[t]);
        h = gru_step(g, gru, xr, xz, xn, h);
        states[t] = h;
    }
    g.concat_rows(&states)
}

fn bigru(g: &mut Graph, fwd: &GruIds, bwd: &GruIds, xs: NodeId) -> NodeId {
    let f = gru_sequence(g, fwd, xs, false);
    let b = gru_sequence(g, bwd, xs, true);
    g.concat_cols(&[f, b])
}

/// Rows of `N×n` matrix averaging the tokens of each sentence.
fn pooling_matrix(sentence_map: &[usize], n_sentences: usize) -> Tensor {
    let mut counts = vec![0usize; n_sentences];
    for &i in sentence_map {
        counts[i] += 1;
    }
    let mut p = Tensor::zeros(n_sentences, sentence_map.len());
    for (m, &i) in sentence_map.iter().enumerate() {
        p.set(i, m, 1.0 / counts[i] as f64);
    }
    p
}

/// Word representations `O` and sentence representations `H`.
pub(crate) fn encode(
    g: &mut Graph,
    ids: &ParamIds,
    fused: NodeId,
    period_indices: &[usize],
    sentence_map: &[usize],
) -> (NodeId, NodeId) {
    match &ids.encoder {
        EncoderIds::Recurrent {
            word_fwd,
            word_bwd,
            ext_word_fwd,
            ext_word_bwd,
            sent_fwd,
            sent_bwd,
        } => {
            let o = bigru(g, word_fwd, word_bwd, fused);
            let w = bigru(g, ext_word_fwd, ext_word_bwd, fused);
            let pool = g.constant(pooling_matrix(sentence_map, period_indices.len()));
            let pooled = g.matmul(pool, w);
            let h = bigru(g, sent_fwd, sent_bwd, pooled);
            (o, h)
        }
        EncoderIds::Transformer {
            proj_w,
            proj_b,
            pos,
            layers,
        } => {
            let n = g.value(fused).rows();
            let w = g.param(*proj_w);
            let b = g.param(*proj_b);
            let x = g.matmul(fused, w);
            let mut x = g.add_row(x, b);
            if let Some(pos) = pos {
                let rows: Vec<usize> = (0..n).collect();
                let p = g.gather(*pos, &rows);
                x = g.add(x, p);
            }
            for layer in layers {
                x = transformer_layer(g, layer, x);
            }
            let h = g.select_rows(x, period_indices);
            (x, h)
        }
    }
}

fn transformer_layer(g: &mut Graph, l: &LayerIds, x: NodeId) -> NodeId {
    let dim = g.value(x).cols() as f64;
    let [wq, wk, wv, wo, w1, b1, w2, b2] = [l.wq, l.wk, l.wv, l.wo, l.w1, l.b1, l.w2, l.b2].map(|p| g.param(p));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let kt = g.transpose(k);
    let s = g.matmul(q, kt);
    let s = g.scale(s, 1.0 / dim.sqrt());
    let a = g.softmax_rows(s);
    let z = g.matmul(a, v);
    let z = g.matmul(z, wo);
    let x1 = g.add(x, z);
    let x1 = g.layer_norm(x1);
    let f = g.matmul(x1, w1);
    let f = g.add_row(f, b1);
    let f = g.tanh(f);
    let f = g.matmul(f, w2);
    let f = g.add_row(f, b2);
    let x2 = g.add(x1, f);
    g.layer_norm(x2)
}

/// `1×N` sentence scores.
pub(crate) fn extractor(g: &mut Graph, head: &HeadIds, h: NodeId, e_a: NodeId) -> NodeId {
    let logits = match head {
        HeadIds::Bilinear => {
            let et = g.transpose(e_a);
            g.matmul(h, et)
        }
        HeadIds::Ffn { w1, b1, w2, b2 } => {
            let [w1, b1, w2, b2] = [*w1, *b1, *w2, *b2].map(|p| g.param(p));
            let z = g.matmul(h, w1);
            let z = g.add_row(z, b1);
            let z = g.tanh(z);
            let z = g.matmul(z, w2);
            g.add_row(z, b2)
        }
    };
    let row = g.transpose(logits);
    g.sigmoid(row)
}

/// Per-input values every decoder step reads.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderInputs {
    pub o: NodeId,
    pub owh: NodeId,
    pub e_a: NodeId,
    pub beta: Option<NodeId>,
}

pub(crate) fn decoder_inputs(g: &mut Graph, ids: &ParamIds, o: NodeId, e_a: NodeId, beta: Option<NodeId>) -> DecoderInputs {
    let wh = g.param(ids.decoder.att_wh);
    let owh = g.matmul(o, wh);
    DecoderInputs { o, owh, e_a, beta }
}

/// `s_0 = tanh(mean(O) W + b)`.
pub(crate) fn initial_state(g: &mut Graph, ids: &ParamIds, o: NodeId) -> NodeId {
    let w = g.param(ids.decoder.init_w);
    let b = g.param(ids.decoder.init_b);
    let m = g.mean_rows(o);
    let s = g.matmul(m, w);
    let s = g.add_row(s, b);
    g.tanh(s)
}

pub(crate) struct StepNodes {
    pub dist: NodeId,
    pub state: NodeId,
    pub context: NodeId,
    pub word_attention: NodeId,
    pub fused_attention: NodeId,
}

/// One input-feeding decoder step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_step(
    g: &mut Graph,
    ids: &ParamIds,
    inp: &DecoderInputs,
    sentence_map: &[usize],
    source_ext_ids: &[usize],
    extended_size: usize,
    prev_token: usize,
    prev_state: NodeId,
    prev_context: NodeId,
) -> StepNodes {
    let dec = &ids.decoder;
    let e = g.gather(ids.embed, &[prev_token]);
    let e = g.add(e, inp.e_a);
    let x = g.concat_cols(&[e, prev_context]);
    let [xr, xz, xn] = gru_inputs(g, &dec.gru, x);
    let s = gru_step(g, &dec.gru, xr, xz, xn, prev_state);

    let ws = g.param(dec.att_ws);
    let b = g.param(dec.att_b);
    let v = g.param(dec.att_v);
    let q = g.matmul(s, ws);
    let q = g.add(q, b);
    let feats = g.add_row(inp.owh, q);
    let feats = g.tanh(feats);
    let scores = g.matmul(feats, v);
    let scores = g.transpose(scores);
    let alpha = g.softmax_rows(scores);
    let fused = match inp.beta {
        Some(beta) => g.fuse(alpha, beta, sentence_map),
        None => alpha,
    };
    let c = g.matmul(fused, inp.o);

    let out_w = g.param(dec.out_w);
    let out_b = g.param(dec.out_b);
    let sc = g.concat_cols(&[s, c]);
    let logits = g.matmul(sc, out_w);
    let logits = g.add(logits, out_b);
    let p_vocab = g.softmax_rows(logits);

    let gen_w = g.param(dec.gen_w);
    let gen_b = g.param(dec.gen_b);
    let gate_in = g.concat_cols(&[c, s, x]);
    let gate = g.matmul(gate_in, gen_w);
    let gate = g.add(gate, gen_b);
    let p_gen = g.sigmoid(gate);

    let dist = g.pointer_mix(p_gen, p_vocab, fused, source_ext_ids, extended_size);
    StepNodes {
        dist,
        state: s,
        context: c,
        word_attention: alpha,
        fused_attention: fused,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_rows_average() {
        let p = pooling_matrix(&[0, 0, 1, 1, 1], 2);
        assert_eq!(p.row(0), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!((p.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_layout_depends_on_config() {
        let base = ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            vocab_size: 10,
            num_aspects: 3,
            ..Default::default()
        };
        let (p, ids) = init_params(&base);
        assert_eq!(p.get(ids.aspect).rows(), 4);
        assert!(p.id("ext.w1").is_none());
        let ffn = ModelConfig {
            extractor_head: ExtractorHead::Ffn,
            encoder_kind: EncoderKind::Transformer,
            ..base.clone()
        };
        let (p2, _) = init_params(&ffn);
        assert!(p2.id("ext.w1").is_some() && p2.id("enc.pos").is_some());
        let none = ModelConfig {
            use_extractor: false,
            extractor_head: ExtractorHead::Ffn,
            ..base
        };
        assert!(init_params(&none).0.id("ext.w1").is_none());
    }
}
