//! Image-to-terms model. Object features are projected and summed with an
//! image-order embedding, encoded by a Transformer encoder without positional
//! encoding (objects within an image are unordered), and decoded per image by
//! a GRU with additive attention over the whole encoded sequence.

use std::collections::{BTreeSet, HashMap};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beam::{beam_search, BeamConfig, StepScorer};
use crate::corpus::DistillerExample;
use crate::features::{FeatureError, ImageSequence, FEATURE_DIM};
use crate::lm::recurrent::check_same_layout;
use crate::neural::layers::{Embedding, EncoderLayer, GruCell, Linear};
use crate::neural::{
    log_softmax_row, AdamConfig, AdamState, Checkpoint, NeuralError, ParameterStore, Tape, Tensor, Var,
};
use crate::vocab::{Vocab, EOS};

pub const CHECKPOINT_KIND: &str = "term-distiller";

#[derive(Debug, Error)]
pub enum DistillerError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("term vocabulary is empty")]
    EmptyVocabulary,
    #[error("story {story_id}: gold terms not in vocabulary: {terms:?}")]
    OutOfVocabulary { story_id: String, terms: Vec<String> },
    #[error("story {story_id}: {found} images, the model has {max} image slots")]
    TooManySlots { story_id: String, found: usize, max: usize },
    #[error("story {story_id}: {images} images but {gold} gold term lists")]
    GoldMismatch {
        story_id: String,
        images: usize,
        gold: usize,
    },
    #[error("story {story_id}: no images")]
    NoImages { story_id: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("distiller metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint kind {0:?} is not a term distiller")]
    WrongKind(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillerConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub max_slots: usize,
    pub max_terms: usize,
    pub beam: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for DistillerConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 2,
            layers: 4,
            feature_dim: FEATURE_DIM,
            max_slots: 5,
            max_terms: 8,
            beam: 3,
            epochs: 30,
            seed: 11,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Network {
    projection: Linear,
    order: Embedding,
    encoder: Vec<EncoderLayer>,
    terms: Embedding,
    init: Linear,
    attn_query: Linear,
    attn_key: Linear,
    attn_score: Linear,
    cell: GruCell,
    output: Linear,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DistillerConfig,
    vocab: Vocab,
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillerEpoch {
    pub epoch: usize,
    /// Mean token-level cross-entropy over the epoch's updates.
    pub loss: f64,
}

/// Encoded memory for one image sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedObjects {
    /// `[objects x dim]`, rows grouped by image in slot order.
    pub memory: Tensor,
    /// Row range of each image inside `memory`.
    pub spans: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Distiller {
    config: DistillerConfig,
    vocab: Vocab,
    params: ParameterStore,
    net: Network,
    schedule: Option<crate::neural::ScheduleMeta>,
}

impl Distiller {
    /// An untrained model over `terms` (the end-of-set marker is added).
    pub fn new<'a, I>(config: DistillerConfig, terms: I) -> Result<Self, DistillerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let vocab = Vocab::build(&[EOS], terms);
        Self::build(config, vocab)
    }

    fn build(config: DistillerConfig, vocab: Vocab) -> Result<Self, DistillerError> {
        let d = config.dim;
        let mut p = ParameterStore::new(config.seed);
        let projection = Linear::new(&mut p, "distiller.project", config.feature_dim, d, false)?;
        let order = Embedding::new(&mut p, "distiller.order", config.max_slots, d)?;
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("distiller.enc{i}"), d, config.heads))
            .collect::<Result<Vec<_>, _>>()?;
        let net = Network {
            projection,
            order,
            encoder,
            terms: Embedding::new(&mut p, "distiller.terms", vocab.len(), d)?,
            init: Linear::new(&mut p, "distiller.init", d, d, true)?,
            attn_query: Linear::new(&mut p, "distiller.attn.query", d, d, false)?,
            attn_key: Linear::new(&mut p, "distiller.attn.key", d, d, true)?,
            attn_score: Linear::new(&mut p, "distiller.attn.score", d, 1, false)?,
            cell: GruCell::new(&mut p, "distiller.gru", 2 * d, d)?,
            output: Linear::new(&mut p, "distiller.out", 2 * d, vocab.len(), true)?,
        };
        Ok(Self {
            config,
            vocab,
            params: p,
            net,
            schedule: None,
        })
    }

    pub fn config(&self) -> &DistillerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn check_sequence(&self, seq: &ImageSequence) -> Result<(), DistillerError> {
        if seq.slots.is_empty() {
            return Err(DistillerError::NoImages {
                story_id: seq.story_id.clone(),
            });
        }
        if seq.slots.len() > self.config.max_slots {
            return Err(DistillerError::TooManySlots {
                story_id: seq.story_id.clone(),
                found: seq.slots.len(),
                max: self.config.max_slots,
            });
        }
        seq.validate(self.config.feature_dim)?;
        Ok(())
    }

    /// `x_i = W o_i + order(t)` for every retained object, rows in slot order.
    fn inputs<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        seq: &ImageSequence,
    ) -> Result<(Var, Vec<(usize, usize)>), DistillerError> {
        self.check_sequence(seq)?;
        let n = seq.num_objects();
        let mut feats = Vec::with_capacity(n * self.config.feature_dim);
        let mut slot_ids = Vec::with_capacity(n);
        let mut spans = Vec::with_capacity(seq.slots.len());
        for (t, slot) in seq.slots.iter().enumerate() {
            let start = slot_ids.len();
            for o in &slot.objects {
                feats.extend_from_slice(&o.feature);
                slot_ids.push(t);
            }
            spans.push((start, slot_ids.len()));
        }
        let objects = tape.constant(Tensor::new(vec![n, self.config.feature_dim], feats)?);
        let projected = self.net.projection.forward(tape, &self.params, objects)?;
        let order = self.net.order.forward(tape, &self.params, &slot_ids)?;
        Ok((tape.add(projected, order)?, spans))
    }

    fn encode<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        seq: &ImageSequence,
    ) -> Result<(Var, Vec<(usize, usize)>), DistillerError> {
        let (mut x, spans) = self.inputs(tape, seq)?;
        for layer in &self.net.encoder {
            x = layer.forward(tape, &self.params, x, None)?;
        }
        Ok((x, spans))
    }

    /// Encoder inputs before the Transformer: projected features plus order
    /// embeddings.
    pub fn embed_objects(&self, seq: &ImageSequence) -> Result<Tensor, DistillerError> {
        let mut tape = Tape::new();
        let (x, _) = self.inputs(&mut tape, seq)?;
        Ok(tape.value(x).clone())
    }

    /// One encoded vector per retained object.
    pub fn encode_objects(&self, seq: &ImageSequence) -> Result<EncodedObjects, DistillerError> {
        let mut tape = Tape::new();
        let (m, spans) = self.encode(&mut tape, seq)?;
        Ok(EncodedObjects {
            memory: tape.value(m).clone(),
            spans,
        })
    }

    fn decoder_context<'t>(&'t self, tape: &mut Tape<'t>, memory: Var) -> Result<DecoderContext, NeuralError> {
        let keys = self.net.attn_key.forward(tape, &self.params, memory)?;
        let summary = tape.mean_rows(memory)?;
        Ok(DecoderContext { memory, keys, summary })
    }

    /// Initial state and input for image `slot`. The slot embedding enters
    /// the state too, so the first attention query already knows which image
    /// it is reading.
    fn start<'t>(&'t self, tape: &mut Tape<'t>, ctx: &DecoderContext, slot: usize) -> Result<(Var, Var), NeuralError> {
        let input = self.net.order.forward(tape, &self.params, &[slot])?;
        let x = tape.add(ctx.summary, input)?;
        let h0 = self.net.init.forward(tape, &self.params, x)?;
        Ok((tape.tanh(h0), input))
    }

    /// One decoder step: attend with the previous state, update the GRU,
    /// return the new state and the `[1 x V]` logits.
    fn step<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        ctx: &DecoderContext,
        input: Var,
        h: Var,
    ) -> Result<(Var, Var), NeuralError> {
        let q = self.net.attn_query.forward(tape, &self.params, h)?;
        let e = tape.add_row(ctx.keys, q)?;
        let e = tape.tanh(e);
        let e = self.net.attn_score.forward(tape, &self.params, e)?;
        let e = tape.transpose(e)?;
        let a = tape.softmax(e)?;
        let c = tape.matmul(a, ctx.memory)?;
        let x = tape.concat_cols(&[input, c])?;
        let h = self.net.cell.forward(tape, &self.params, x, h)?;
        let hc = tape.concat_cols(&[h, c])?;
        let logits = self.net.output.forward(tape, &self.params, hc)?;
        Ok((h, logits))
    }

    /// Mean cross-entropy of the gold term lists (each closed by end-of-set).
    fn loss<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        seq: &ImageSequence,
        gold: &[Vec<usize>],
    ) -> Result<Var, DistillerError> {
        let (memory, _) = self.encode(tape, seq)?;
        let ctx = self.decoder_context(tape, memory)?;
        let eos = self.eos();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (t, terms) in gold.iter().enumerate() {
            let (mut h, mut input) = self.start(tape, &ctx, t)?;
            for &y in terms.iter().chain(std::iter::once(&eos)) {
                let (nh, logits) = self.step(tape, &ctx, input, h)?;
                rows.push(logits);
                targets.push(y);
                h = nh;
                input = self.net.terms.forward(tape, &self.params, &[y])?;
            }
        }
        let logits = tape.concat_rows(&rows)?;
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    fn eos(&self) -> usize {
        self.vocab
            .id(EOS)
            .expect("vocabulary starts with the end-of-set marker")
    }

    fn gold_ids(&self, ex: &DistillerExample) -> Result<Vec<Vec<usize>>, DistillerError> {
        if ex.gold.len() != ex.images.slots.len() {
            return Err(DistillerError::GoldMismatch {
                story_id: ex.story_id.clone(),
                images: ex.images.slots.len(),
                gold: ex.gold.len(),
            });
        }
        let missing: BTreeSet<&String> = ex
            .gold
            .iter()
            .flatten()
            .filter(|t| !self.vocab.contains(t) || t.as_str() == EOS)
            .collect();
        if !missing.is_empty() {
            return Err(DistillerError::OutOfVocabulary {
                story_id: ex.story_id.clone(),
                terms: missing.into_iter().cloned().collect(),
            });
        }
        Ok(ex
            .gold
            .iter()
            .map(|g| g.iter().map(|t| self.vocab.id(t).unwrap()).collect())
            .collect())
    }

    /// Trains a fresh model whose vocabulary is every gold term in `examples`.
    pub fn train(
        examples: &[DistillerExample],
        config: DistillerConfig,
    ) -> Result<(Self, Vec<DistillerEpoch>), DistillerError> {
        let terms: Vec<&str> = examples
            .iter()
            .flat_map(|e| e.gold.iter().flatten().map(String::as_str))
            .collect();
        let mut model = Self::new(config, terms)?;
        let reports = model.fit(examples)?;
        Ok((model, reports))
    }

    /// Continues training the current parameters, one update per example in
    /// input order.
    pub fn fit(&mut self, examples: &[DistillerExample]) -> Result<Vec<DistillerEpoch>, DistillerError> {
        if examples.is_empty() {
            return Err(DistillerError::EmptyTrainingSet);
        }
        let gold = examples
            .iter()
            .map(|e| self.gold_ids(e))
            .collect::<Result<Vec<_>, _>>()?;
        for e in examples {
            self.check_sequence(&e.images)?;
        }
        let mut adam = AdamState::new(self.config.adam.clone());
        if let Some(s) = &self.schedule {
            adam.step = s.step;
        }
        let mut reports = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut total = 0.0;
            for (ex, g) in examples.iter().zip(&gold) {
                let mut tape = Tape::new();
                let loss = self.loss(&mut tape, &ex.images, g)?;
                total += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                adam.step(&mut self.params, grads.named())?;
            }
            let loss = total / examples.len() as f64;
            info!("distiller epoch {epoch}: loss {loss:.5}");
            reports.push(DistillerEpoch { epoch, loss });
        }
        self.schedule = Some(adam.schedule());
        Ok(reports)
    }

    /// Mean token cross-entropy of one example under the current parameters.
    pub fn example_loss(&self, example: &DistillerExample) -> Result<f64, DistillerError> {
        let gold = self.gold_ids(example)?;
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, &example.images, &gold)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Beam-decoded term list per image, end-of-set marker removed.
    pub fn predict_terms(&self, seq: &ImageSequence, beam_size: usize) -> Result<Vec<Vec<String>>, DistillerError> {
        Ok(self
            .predict_ids(seq, beam_size)?
            .into_iter()
            .map(|ids| ids.into_iter().map(|i| self.vocab.token(i).to_string()).collect())
            .collect())
    }

    /// Like [`Distiller::predict_terms`] but returns vocabulary ids.
    pub fn predict_ids(&self, seq: &ImageSequence, beam_size: usize) -> Result<Vec<Vec<usize>>, DistillerError> {
        if self.vocab.len() <= 1 {
            return Err(DistillerError::EmptyVocabulary);
        }
        let mut tape = Tape::new();
        let (memory, _) = self.encode(&mut tape, seq)?;
        let ctx = self.decoder_context(&mut tape, memory)?;
        let eos = self.eos();
        let config = BeamConfig::terms(beam_size, eos, self.config.max_terms);
        let mut out = Vec::with_capacity(seq.slots.len());
        for t in 0..seq.slots.len() {
            let mut scorer = SlotScorer {
                model: self,
                tape: &mut tape,
                ctx: &ctx,
                slot: t,
                states: HashMap::new(),
            };
            let result = beam_search(&mut scorer, &config)?;
            out.push(result.tokens.into_iter().filter(|&i| i != eos).collect());
        }
        Ok(out)
    }

    /// Log-distribution over the term vocabulary after `prefix` for image
    /// `slot`, computed without caching.
    pub fn next_log_probs(
        &self,
        seq: &ImageSequence,
        slot: usize,
        prefix: &[usize],
    ) -> Result<Vec<f64>, DistillerError> {
        let mut tape = Tape::new();
        let (memory, _) = self.encode(&mut tape, seq)?;
        let ctx = self.decoder_context(&mut tape, memory)?;
        let (mut h, mut input) = self.start(&mut tape, &ctx, slot)?;
        let mut logits = None;
        for k in 0..=prefix.len() {
            let (nh, l) = self.step(&mut tape, &ctx, input, h)?;
            h = nh;
            logits = Some(l);
            if k < prefix.len() {
                input = self.net.terms.forward(&mut tape, &self.params, &[prefix[k]])?;
            }
        }
        Ok(log_softmax_row(tape.value(logits.unwrap()).data()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, DistillerError> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, DistillerError> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(DistillerError::WrongKind(ckpt.kind));
        }
        let meta: Meta = serde_json::from_value(ckpt.metadata)?;
        let mut model = Self::build(meta.config, meta.vocab)?;
        check_same_layout(&model.params, &ckpt.params)?;
        model.params = ckpt.params;
        model.schedule = ckpt.schedule;
        Ok(model)
    }
}

struct DecoderContext {
    memory: Var,
    keys: Var,
    /// Mean of the memory rows.
    summary: Var,
}

/// Incremental scorer for one image: caches the decoder state and logits
/// reached after each prefix so beam extensions reuse their parent's state.
struct SlotScorer<'a, 'm> {
    model: &'m Distiller,
    tape: &'a mut Tape<'m>,
    ctx: &'a DecoderContext,
    slot: usize,
    states: HashMap<Vec<usize>, (Var, Var)>,
}

impl SlotScorer<'_, '_> {
    fn state(&mut self, prefix: &[usize]) -> Result<(Var, Var), NeuralError> {
        if let Some(&s) = self.states.get(prefix) {
            return Ok(s);
        }
        let (h_prev, input) = match prefix.split_last() {
            None => self.model.start(self.tape, self.ctx, self.slot)?,
            Some((&last, rest)) => {
                let (h, _) = self.state(rest)?;
                (h, self.model.net.terms.forward(self.tape, &self.model.params, &[last])?)
            }
        };
        let s = self.model.step(self.tape, self.ctx, input, h_prev)?;
        self.states.insert(prefix.to_vec(), s);
        Ok(s)
    }
}

impl StepScorer for SlotScorer<'_, '_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, NeuralError> {
        let (_, logits) = self.state(prefix)?;
        Ok(log_softmax_row(self.tape.value(logits).data()))
    }
}
