//! The aspect-conditioned pointer-generator with a sentence extractor.
//!
//! Source characters are embedded and the aspect embedding is added to
//! every row. An encoder produces word representations `O` and sentence
//! representations `H`. The extractor turns `H` into sentence scores `β`,
//! which reweight the decoder's word attention before it is used for the
//! context vector and the copy distribution.

mod attention;
mod checkpoint;
mod config;
mod graph;
mod loss;
mod network;
mod tensor;
mod vocab;

pub use attention::{context_vector, fuse_attention, mix_copy_distribution, FUSION_EPS};
pub use checkpoint::CHECKPOINT_MAGIC;
pub use config::{EncoderKind, ExtractorHead, ModelConfig};
pub use graph::{Grads, Graph, NodeId, ParamId, Params};
pub use loss::{loss_ext, loss_gen, loss_total, LossBundle, BCE_CLIP, NLL_FLOOR};
pub use tensor::{sigmoid, softmax, Tensor};
pub use vocab::{SourceLayout, Vocab, BOS, EOS, UNK};

use crate::corpus::{AspectCategory, CategorySchema, Instance};
use crate::error::{Error, Result};
use network::{DecoderInputs, ParamIds};

/// `fused[m] = word_embeddings[m] + aspect_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub word_embeddings: Tensor,
    pub aspect_embedding: Vec<f64>,
    pub fused: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs {
    pub word_reps: Tensor,
    pub sentence_reps: Tensor,
    pub period_indices: Vec<usize>,
    pub sentence_map: Vec<usize>,
}

/// Attention quantities of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub word_attention: Vec<f64>,
    /// Empty when the extractor is disabled.
    pub sentence_scores: Vec<f64>,
    pub fused_attention: Vec<f64>,
    pub context: Vec<f64>,
}

/// Recurrent decoder state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub context: Vec<f64>,
}

/// A training instance resolved against the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub layout: SourceLayout,
    /// Extended ids, `<eos>`-terminated.
    pub targets: Vec<usize>,
    pub labels: Option<Vec<u8>>,
    pub aspect_row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub ext_weight: f64,
    /// Replace the aspect by the null aspect; the extractor loss is skipped.
    pub null_aspect: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            ext_weight: 1.0,
            null_aspect: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    schema: CategorySchema,
    separator: char,
    params: Params,
    ids: ParamIds,
}

impl Model {
    /// A freshly initialised model; `vocab_size` and `num_aspects` in the
    /// config are taken from `vocab` and `schema`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, schema: CategorySchema, separator: char) -> Result<Self> {
        schema.validate()?;
        config.vocab_size = vocab.len();
        config.num_aspects = schema.len();
        config.validate()?;
        if vocab.id(separator).is_none() {
            return Err(Error::Validation(format!("separator {separator:?} missing from vocabulary")));
        }
        let (params, ids) = network::init_params(&config);
        Ok(Self {
            config,
            vocab,
            schema,
            separator,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn schema(&self) -> &CategorySchema {
        &self.schema
    }

    pub fn separator(&self) -> char {
        self.separator
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Row of the aspect table used when no aspect is given.
    pub fn null_aspect_row(&self) -> usize {
        self.schema.len()
    }

    pub fn aspect_row(&self, aspect: Option<&AspectCategory>) -> Result<usize> {
        match aspect {
            None => Ok(self.null_aspect_row()),
            Some(a) => match self.schema.aspects.get(a.index) {
                Some(s) if s == a => Ok(a.index),
                _ => Err(Error::InvalidArgument(format!(
                    "aspect {:?} (index {}) is not in schema {:?}",
                    a.name, a.index, self.schema.category
                ))),
            },
        }
    }

    pub fn layout<S: AsRef<str>>(&self, sentences: &[S]) -> Result<SourceLayout> {
        let layout = SourceLayout::new(&self.vocab, sentences, self.separator)?;
        if layout.len() > self.config.max_input_chars {
            return Err(Error::InvalidArgument(format!(
                "input has {} characters, limit is {}",
                layout.len(),
                self.config.max_input_chars
            )));
        }
        Ok(layout)
    }

    pub fn prepare(&self, inst: &Instance, labels: Option<&[u8]>) -> Result<Example> {
        let layout = self.layout(&inst.sentences)?;
        if let Some(l) = labels {
            if l.len() != layout.num_sentences() {
                return Err(Error::Shape(format!(
                    "{}: {} labels for {} sentences",
                    inst.product_id,
                    l.len(),
                    layout.num_sentences()
                )));
            }
        }
        let mut targets = layout.target_ids(&self.vocab, &inst.summary);
        targets.truncate(self.config.max_target_chars + 1);
        Ok(Example {
            targets,
            labels: labels.map(<[u8]>::to_vec),
            aspect_row: self.aspect_row(Some(&inst.aspect))?,
            layout,
        })
    }

    fn check_tokens(&self, token_ids: &[usize]) -> Result<()> {
        match token_ids.iter().find(|&&t| t >= self.vocab.len()) {
            Some(&id) => Err(Error::OutOfVocabulary {
                id,
                size: self.vocab.len(),
            }),
            None => Ok(()),
        }
    }

    /// Word embeddings of `token_ids` with the aspect embedding added to
    /// each row (the null aspect when `aspect` is `None`).
    pub fn embed_fused(&self, token_ids: &[usize], aspect: Option<&AspectCategory>) -> Result<FusedEmbedding> {
        self.check_tokens(token_ids)?;
        let row = self.aspect_row(aspect)?;
        let table = self.params.get(self.ids.embed);
        let rows: Vec<Vec<f64>> = token_ids.iter().map(|&t| table.row(t).to_vec()).collect();
        let word_embeddings = Tensor::from_vec(
            token_ids.len(),
            self.config.embed_dim,
            rows.into_iter().flatten().collect(),
        );
        let aspect_embedding = self.params.get(self.ids.aspect).row(row).to_vec();
        let mut fused = word_embeddings.clone();
        for r in 0..fused.rows() {
            for (x, a) in fused.row_mut(r).iter_mut().zip(&aspect_embedding) {
                *x += a;
            }
        }
        Ok(FusedEmbedding {
            word_embeddings,
            aspect_embedding,
            fused,
        })
    }

    /// Runs the encoder on fused embeddings. Every sentence must end at one
    /// of `period_indices`, the last one at the final position.
    pub fn encode(&self, fused: &FusedEmbedding, period_indices: &[usize]) -> Result<EncoderOutputs> {
        let n = fused.fused.rows();
        let sentence_map = sentence_map_from_periods(period_indices, n)?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(fused.fused.clone());
        let (o, h) = network::encode(&mut g, &self.ids, x, period_indices, &sentence_map);
        Ok(EncoderOutputs {
            word_reps: g.value(o).clone(),
            sentence_reps: g.value(h).clone(),
            period_indices: period_indices.to_vec(),
            sentence_map,
        })
    }

    /// Extractor scores `β` for sentence representations under an aspect
    /// embedding.
    pub fn extractor_score(&self, sentence_reps: &Tensor, aspect_embedding: &[f64]) -> Result<Vec<f64>> {
        let head = self
            .ids
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no extractor".into()))?;
        if aspect_embedding.len() != self.config.embed_dim || sentence_reps.cols() != self.config.hidden_dim {
            return Err(Error::Shape("extractor input dimensions".into()));
        }
        let mut g = Graph::new(&self.params);
        let h = g.constant(sentence_reps.clone());
        let e = g.constant(Tensor::row_vector(aspect_embedding.to_vec()));
        let beta = network::extractor(&mut g, head, h, e);
        Ok(g.value(beta).data().to_vec())
    }

    /// Sentence scores of an input under an aspect, or `None` without an
    /// extractor.
    pub fn sentence_scores<S: AsRef<str>>(&self, sentences: &[S], aspect: Option<&AspectCategory>) -> Result<Option<Vec<f64>>> {
        let session = self.start_decoding(sentences, aspect)?;
        Ok(session.beta)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, ex: &Example, opts: LossOptions) -> Result<(NodeId, LossBundle)> {
        if ex.targets.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        let layout = &ex.layout;
        let row = if opts.null_aspect { self.null_aspect_row() } else { ex.aspect_row };
        let (inp, s0) = self.encoder_graph(g, layout, row);
        let mut state = s0;
        let mut context = g.constant(Tensor::zeros(1, self.config.hidden_dim));
        let mut prev = BOS;
        let mut nll = Vec::with_capacity(ex.targets.len());
        for &y in &ex.targets {
            if y >= layout.extended_size() {
                return Err(Error::OutOfVocabulary {
                    id: y,
                    size: layout.extended_size(),
                });
            }
            let step = network::decoder_step(
                g,
                &self.ids,
                &inp,
                &layout.sentence_map,
                &layout.ext_ids,
                layout.extended_size(),
                prev,
                state,
                context,
            );
            nll.push(g.neg_log_pick(step.dist, y));
            state = step.state;
            context = step.context;
            prev = layout.input_id(y);
        }
        let mut sum = nll[0];
        for &n in &nll[1..] {
            sum = g.add(sum, n);
        }
        let gen = g.scale(sum, 1.0 / nll.len() as f64);
        let mut total = gen;
        let mut loss_ext = 0.0;
        if let (Some(beta), Some(labels), false) = (inp.beta, &ex.labels, opts.null_aspect) {
            let ext = g.bce(beta, labels);
            loss_ext = g.scalar(ext);
            let weighted = g.scale(ext, opts.ext_weight);
            total = g.add(weighted, gen);
        }
        let bundle = LossBundle {
            loss_ext,
            loss_gen: g.scalar(gen),
            loss_total: g.scalar(total),
            target_length: ex.targets.len(),
        };
        Ok((total, bundle))
    }

    /// Teacher-forced losses of one example.
    pub fn loss(&self, ex: &Example, opts: LossOptions) -> Result<LossBundle> {
        let mut g = Graph::new(&self.params);
        Ok(self.forward(&mut g, ex, opts)?.1)
    }

    /// Losses and the gradient of the total loss.
    pub fn loss_and_grads(&self, ex: &Example, opts: LossOptions) -> Result<(LossBundle, Grads)> {
        let mut g = Graph::new(&self.params);
        let (total, bundle) = self.forward(&mut g, ex, opts)?;
        Ok((bundle, g.backward(total)))
    }

    fn encoder_graph<'p>(&'p self, g: &mut Graph<'p>, layout: &SourceLayout, aspect_row: usize) -> (DecoderInputs, NodeId) {
        let words = g.gather(self.ids.embed, &layout.token_ids);
        let e_a = g.gather(self.ids.aspect, &[aspect_row]);
        let fused = g.add_row(words, e_a);
        let (o, h) = network::encode(g, &self.ids, fused, &layout.period_indices, &layout.sentence_map);
        let beta = self.ids.head.as_ref().map(|head| network::extractor(g, head, h, e_a));
        let inp = network::decoder_inputs(g, &self.ids, o, e_a, beta);
        let s0 = network::initial_state(g, &self.ids, o);
        (inp, s0)
    }

    /// Encodes an input once for step-by-step decoding.
    pub fn start_decoding<S: AsRef<str>>(&self, sentences: &[S], aspect: Option<&AspectCategory>) -> Result<DecodeSession<'_>> {
        let layout = self.layout(sentences)?;
        let row = self.aspect_row(aspect)?;
        let mut g = Graph::new(&self.params);
        let (inp, s0) = self.encoder_graph(&mut g, &layout, row);
        Ok(DecodeSession {
            o: g.value(inp.o).clone(),
            owh: g.value(inp.owh).clone(),
            e_a: g.value(inp.e_a).clone(),
            beta: inp.beta.map(|b| g.value(b).data().to_vec()),
            initial: DecoderState {
                hidden: g.value(s0).data().to_vec(),
                context: vec![0.0; self.config.hidden_dim],
            },
            layout,
            model: self,
        })
    }
}

fn sentence_map_from_periods(period_indices: &[usize], n: usize) -> Result<Vec<usize>> {
    if period_indices.is_empty() || period_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("period indices must be non-empty and strictly increasing".into()));
    }
    if *period_indices.last().expect("non-empty") + 1 != n {
        return Err(Error::InvalidArgument(
            "the last sentence has no terminating separator".into(),
        ));
    }
    let mut map = Vec::with_capacity(n);
    let mut start = 0;
    for (i, &p) in period_indices.iter().enumerate() {
        map.extend(std::iter::repeat_n(i, p + 1 - start));
        start = p + 1;
    }
    Ok(map)
}

/// An encoded input ready for incremental decoding. Cheap to step from many
/// hypotheses; each step builds a small graph of its own.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model,
    layout: SourceLayout,
    o: Tensor,
    owh: Tensor,
    e_a: Tensor,
    beta: Option<Vec<f64>>,
    initial: DecoderState,
}

impl<'m> DecodeSession<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn layout(&self) -> &SourceLayout {
        &self.layout
    }

    pub fn sentence_scores(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    pub fn initial_state(&self) -> DecoderState {
        self.initial.clone()
    }

    /// Distribution over the extended vocabulary after feeding `prev`
    /// (an extended id; copied out-of-vocabulary ids are fed as `<unk>`).
    pub fn step(&self, state: &DecoderState, prev: usize) -> (Vec<f64>, DecoderState, AttentionState) {
        let m = self.model;
        let mut g = Graph::new(&m.params);
        let o = g.constant(self.o.clone());
        let owh = g.constant(self.owh.clone());
        let e_a = g.constant(self.e_a.clone());
        let beta = self.beta.as_ref().map(|b| g.constant(Tensor::row_vector(b.clone())));
        let s = g.constant(Tensor::row_vector(state.hidden.clone()));
        let c = g.constant(Tensor::row_vector(state.context.clone()));
        let inp = DecoderInputs { o, owh, e_a, beta };
        let out = network::decoder_step(
            &mut g,
            &m.ids,
            &inp,
            &self.layout.sentence_map,
            &self.layout.ext_ids,
            self.layout.extended_size(),
            self.layout.input_id(prev),
            s,
            c,
        );
        let context = g.value(out.context).data().to_vec();
        (
            g.value(out.dist).data().to_vec(),
            DecoderState {
                hidden: g.value(out.state).data().to_vec(),
                context: context.clone(),
            },
            AttentionState {
                word_attention: g.value(out.word_attention).data().to_vec(),
                sentence_scores: self.beta.clone().unwrap_or_default(),
                fused_attention: g.value(out.fused_attention).data().to_vec(),
                context,
            },
        )
    }
}

#[cfg(test)]
mod tests;
