//! Term-path-to-story Transformer. The encoder reads the linearized term
//! path with sinusoidal positions; the decoder positions are encoded by the
//! remaining length of the story (LDPE), so every story ends at the same
//! positional signal regardless of its length.

use std::collections::BTreeSet;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beam::{beam_search, BeamConfig, CapPolicy, LengthUnit, StepScorer};
use crate::corpus::{detokenize, GeneratorPair};
use crate::enrich::{BridgeRecord, TermPath};
use crate::lm::recurrent::check_same_layout;
use crate::neural::layers::{causal_mask, sinusoidal_encoding, DecoderLayer, Embedding, EncoderLayer, Linear};
use crate::neural::{
    log_softmax_row, AdamConfig, AdamState, Checkpoint, NeuralError, ParameterStore, ScheduleMeta, Tape, Tensor, Var,
};
use crate::vocab::{Vocab, BOS, EOS, SEP, UNK};

pub const CHECKPOINT_KIND: &str = "story-generator";

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("ldpe: position {pos} beyond length {len}")]
    PositionBeyondLength { pos: usize, len: usize },
    #[error("ldpe: dimension {0} must be even and nonzero")]
    OddDimension(usize),
    #[error("ldpe: length must be at least 1")]
    ZeroLength,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("record {story_id}: {groups} term groups but {sentences} sentences")]
    LengthMismatch {
        story_id: String,
        groups: usize,
        sentences: usize,
    },
    #[error("record {story_id}: story tokens not in vocabulary: {tokens:?}")]
    OutOfVocabulary { story_id: String, tokens: Vec<String> },
    #[error("story {0}: empty term path")]
    EmptyPath(String),
    #[error("penalties must be nonnegative (alpha {alpha}, gamma {gamma})")]
    NegativePenalty { alpha: f64, gamma: f64 },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("generator metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint kind {0:?} is not a story generator")]
    WrongKind(String),
}

/// Length-difference positional encoding: component `2i` is
/// `sin((len - pos) / 10000^(2i/d))`, component `2i + 1` the cosine.
pub fn ldpe(pos: usize, len: usize, dim: usize) -> Result<Vec<f64>, GeneratorError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(GeneratorError::OddDimension(dim));
    }
    if len == 0 {
        return Err(GeneratorError::ZeroLength);
    }
    if pos > len {
        return Err(GeneratorError::PositionBeyondLength { pos, len });
    }
    Ok(sinusoidal_encoding(len - pos, dim))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamPenaltyConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beam: usize,
    #[serde(default)]
    pub length_unit: LengthUnit,
}

impl Default for BeamPenaltyConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            gamma: 5.0,
            beam: 3,
            length_unit: LengthUnit::Tokens,
        }
    }
}

impl BeamPenaltyConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.alpha < 0.0 || self.gamma < 0.0 {
            return Err(GeneratorError::NegativePenalty {
                alpha: self.alpha,
                gamma: self.gamma,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Tokens per sentence (boundary marker included) used for the LDPE
    /// length at inference. `None` takes the training-corpus mean.
    pub sentence_budget: Option<usize>,
    /// Tokens after which a sentence is closed. `None` means twice the
    /// sentence budget.
    #[serde(default)]
    pub max_sentence_tokens: Option<usize>,
    /// Hard cap on generated tokens per story.
    pub max_story_tokens: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            epochs: 10,
            seed: 13,
            adam: AdamConfig::default(),
            sentence_budget: None,
            max_sentence_tokens: None,
            max_story_tokens: 200,
        }
    }
}

#[derive(Clone, Debug)]
struct Network {
    embed: Embedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: GeneratorConfig,
    vocab: Vocab,
    sentence_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// A decoded story with its decoding metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub story_id: String,
    pub sentences: Vec<String>,
    pub tokens: Vec<Vec<String>>,
    /// Token range `[start, end)` of each sentence in the generated sequence,
    /// boundary marker excluded.
    pub sentence_spans: Vec<(usize, usize)>,
    pub score: f64,
    pub sentence_scores: Vec<f64>,
    pub truncated: bool,
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeRecord>,
}

impl Story {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    vocab: Vocab,
    params: ParameterStore,
    net: Network,
    sentence_budget: usize,
    schedule: Option<ScheduleMeta>,
}

/// Mean tokens per sentence plus one for the boundary marker, rounded.
fn mean_sentence_budget(pairs: &[GeneratorPair]) -> usize {
    let (tokens, sentences) = pairs
        .iter()
        .flat_map(|p| &p.sentences)
        .fold((0usize, 0usize), |(t, n), s| (t + s.len(), n + 1));
    if sentences == 0 {
        return 1;
    }
    ((tokens as f64 / sentences as f64).round() as usize + 1).max(1)
}

impl Generator {
    /// An untrained model whose vocabulary covers every term and story token
    /// in `pairs`.
    pub fn new(config: GeneratorConfig, pairs: &[GeneratorPair]) -> Result<Self, GeneratorError> {
        let vocab = Vocab::build(
            &[BOS, EOS, SEP, UNK],
            pairs.iter().flat_map(|p| {
                p.path
                    .groups
                    .iter()
                    .flatten()
                    .chain(p.sentences.iter().flatten())
                    .map(String::as_str)
            }),
        );
        let budget = config.sentence_budget.unwrap_or_else(|| mean_sentence_budget(pairs));
        Self::build(config, vocab, budget)
    }

    fn build(config: GeneratorConfig, vocab: Vocab, sentence_budget: usize) -> Result<Self, GeneratorError> {
        if config.dim == 0 || !config.dim.is_multiple_of(2) {
            return Err(GeneratorError::OddDimension(config.dim));
        }
        let d = config.dim;
        let mut p = ParameterStore::new(config.seed);
        let embed = Embedding::new(&mut p, "generator.embed", vocab.len(), d)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("generator.enc{i}"), d, config.heads))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut p, &format!("generator.dec{i}"), d, config.heads))
            .collect::<Result<Vec<_>, _>>()?;
        let output = Linear::new(&mut p, "generator.out", d, vocab.len(), true)?;
        Ok(Self {
            config,
            vocab,
            params: p,
            net: Network {
                embed,
                encoder,
                decoder,
                output,
            },
            sentence_budget,
            schedule: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn sentence_budget(&self) -> usize {
        self.sentence_budget
    }

    fn id(&self, token: &str) -> usize {
        self.vocab.id_or_unk(token).expect("vocabulary has <unk>")
    }

    fn source_ids(&self, path: &TermPath) -> Vec<usize> {
        path.linearize().tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Story tokens with a boundary marker after each sentence.
    fn target_ids(&self, pair: &GeneratorPair) -> Result<Vec<usize>, GeneratorError> {
        if pair.path.len() != pair.sentences.len() {
            return Err(GeneratorError::LengthMismatch {
                story_id: pair.story_id.clone(),
                groups: pair.path.len(),
                sentences: pair.sentences.len(),
            });
        }
        let missing: BTreeSet<&String> = pair
            .sentences
            .iter()
            .flatten()
            .filter(|t| !self.vocab.contains(t))
            .collect();
        if !missing.is_empty() {
            return Err(GeneratorError::OutOfVocabulary {
                story_id: pair.story_id.clone(),
                tokens: missing.into_iter().cloned().collect(),
            });
        }
        let sep = self.id(SEP);
        Ok(pair
            .sentences
            .iter()
            .flat_map(|s| s.iter().map(|t| self.id(t)).chain(std::iter::once(sep)))
            .collect())
    }

    /// Embeddings scaled by `sqrt(d)` plus the given positional rows.
    fn embed_with<'t>(&'t self, tape: &mut Tape<'t>, ids: &[usize], positions: Vec<f64>) -> Result<Var, NeuralError> {
        let e = self.net.embed.forward(tape, &self.params, ids)?;
        let e = tape.scale(e, (self.config.dim as f64).sqrt());
        let pe = tape.constant(Tensor::new(vec![ids.len(), self.config.dim], positions)?);
        tape.add(e, pe)
    }

    fn encode<'t>(&'t self, tape: &mut Tape<'t>, src: &[usize]) -> Result<Var, NeuralError> {
        let d = self.config.dim;
        let pos = (0..src.len()).flat_map(|p| sinusoidal_encoding(p, d)).collect();
        let mut x = self.embed_with(tape, src, pos)?;
        for layer in &self.net.encoder {
            x = layer.forward(tape, &self.params, x, None)?;
        }
        Ok(x)
    }

    /// Decoder hidden states for `inputs`; input `i` predicts the token at
    /// position `i + 1` of a story of `len` tokens. Positions past `len`
    /// (over-long decodes) are clamped to the end.
    fn decode<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        memory: Var,
        inputs: &[usize],
        len: usize,
    ) -> Result<Var, GeneratorError> {
        let d = self.config.dim;
        let mut pos = Vec::with_capacity(inputs.len() * d);
        for i in 0..inputs.len() {
            pos.extend(ldpe((i + 1).min(len), len, d)?);
        }
        let mut x = self.embed_with(tape, inputs, pos)?;
        let mask = tape.constant(causal_mask(inputs.len()));
        for layer in &self.net.decoder {
            x = layer.forward(tape, &self.params, x, memory, mask)?;
        }
        Ok(x)
    }

    fn loss<'t>(&'t self, tape: &mut Tape<'t>, src: &[usize], tgt: &[usize]) -> Result<Var, GeneratorError> {
        let memory = self.encode(tape, src)?;
        let mut inputs = Vec::with_capacity(tgt.len());
        inputs.push(self.id(BOS));
        inputs.extend_from_slice(&tgt[..tgt.len() - 1]);
        let h = self.decode(tape, memory, &inputs, tgt.len())?;
        let logits = self.net.output.forward(tape, &self.params, h)?;
        Ok(tape.cross_entropy(logits, tgt)?)
    }

    /// Trains a fresh model on `pairs`.
    pub fn train(
        pairs: &[GeneratorPair],
        config: GeneratorConfig,
    ) -> Result<(Self, Vec<GeneratorEpoch>), GeneratorError> {
        if pairs.is_empty() {
            return Err(GeneratorError::EmptyTrainingSet);
        }
        let mut model = Self::new(config, pairs)?;
        let reports = model.fit(pairs)?;
        Ok((model, reports))
    }

    /// Continues training from the current parameters and schedule step.
    /// Used both for the first pass and for fine-tuning.
    pub fn fit(&mut self, pairs: &[GeneratorPair]) -> Result<Vec<GeneratorEpoch>, GeneratorError> {
        self.fit_epochs(pairs, self.config.epochs)
    }

    pub fn fit_epochs(
        &mut self,
        pairs: &[GeneratorPair],
        epochs: usize,
    ) -> Result<Vec<GeneratorEpoch>, GeneratorError> {
        if pairs.is_empty() {
            return Err(GeneratorError::EmptyTrainingSet);
        }
        let data = pairs
            .iter()
            .map(|p| Ok((self.source_ids(&p.path), self.target_ids(p)?)))
            .collect::<Result<Vec<_>, GeneratorError>>()?;
        let mut adam = AdamState::new(self.config.adam.clone());
        if let Some(s) = &self.schedule {
            adam.step = s.step;
        }
        let mut reports = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut total = 0.0;
            for (src, tgt) in &data {
                let mut tape = Tape::new();
                let loss = self.loss(&mut tape, src, tgt)?;
                total += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                adam.step(&mut self.params, grads.named())?;
            }
            let loss = total / data.len() as f64;
            info!("generator epoch {epoch}: loss {loss:.5}");
            reports.push(GeneratorEpoch { epoch, loss });
        }
        self.schedule = Some(adam.schedule());
        Ok(reports)
    }

    /// Mean token cross-entropy of `pairs` under the current parameters.
    pub fn evaluate(&self, pairs: &[GeneratorPair]) -> Result<f64, GeneratorError> {
        if pairs.is_empty() {
            return Err(GeneratorError::EmptyTrainingSet);
        }
        let mut total = 0.0;
        for p in pairs {
            let mut tape = Tape::new();
            let loss = self.loss(&mut tape, &self.source_ids(&p.path), &self.target_ids(p)?)?;
            total += tape.value(loss).data()[0];
        }
        Ok(total / pairs.len() as f64)
    }

    /// Step scorer over the story vocabulary for one term path.
    pub fn scorer(&self, path: &TermPath) -> Result<StoryScorer<'_>, GeneratorError> {
        if path.is_empty() {
            return Err(GeneratorError::EmptyPath(path.story_id.clone()));
        }
        let mut tape = Tape::new();
        let memory = self.encode(&mut tape, &self.source_ids(path))?;
        Ok(StoryScorer {
            model: self,
            memory: tape.value(memory).clone(),
            len: path.len() * self.sentence_budget,
        })
    }

    /// Beam-search settings for a path of `groups` term groups.
    pub fn beam_config(&self, groups: usize, penalties: &BeamPenaltyConfig) -> BeamConfig {
        BeamConfig {
            beam_size: penalties.beam,
            alpha: penalties.alpha,
            gamma: penalties.gamma,
            end: self.id(EOS),
            boundary: Some(self.id(SEP)),
            sentences: Some(groups),
            max_sentence_tokens: Some(self.sentence_cap(groups)),
            max_tokens: self.config.max_story_tokens,
            on_cap: CapPolicy::Truncate,
            banned: vec![self.id(BOS), self.id(UNK)],
            exempt: Vec::new(),
            length_unit: penalties.length_unit,
        }
    }

    /// One sentence per term group, decoded with the penalized beam search.
    /// Tokens after which a sentence is closed, shrunk so that `groups`
    /// capped sentences and their boundaries fit in `max_story_tokens`.
    pub fn sentence_cap(&self, groups: usize) -> usize {
        let wanted = self.config.max_sentence_tokens.unwrap_or(2 * self.sentence_budget);
        let fits = (self.config.max_story_tokens / groups.max(1)).saturating_sub(1);
        wanted.min(fits).max(1)
    }

    pub fn decode_story(&self, path: &TermPath, penalties: &BeamPenaltyConfig) -> Result<Story, GeneratorError> {
        penalties.validate()?;
        let mut scorer = self.scorer(path)?;
        let result = beam_search(&mut scorer, &self.beam_config(path.len(), penalties))?;

        let sep = self.id(SEP);
        let mut tokens = vec![Vec::new()];
        let mut spans = Vec::new();
        let mut scores = vec![0.0];
        let mut start = 0;
        for (i, (&id, &s)) in result.tokens.iter().zip(&result.step_scores).enumerate() {
            *scores.last_mut().unwrap() += s;
            if id == sep {
                spans.push((start, i));
                start = i + 1;
                tokens.push(Vec::new());
                scores.push(0.0);
            } else {
                tokens.last_mut().unwrap().push(self.vocab.token(id).to_string());
            }
        }
        if start < result.tokens.len() {
            spans.push((start, result.tokens.len()));
        } else {
            tokens.pop();
            scores.pop();
        }
        Ok(Story {
            story_id: path.story_id.clone(),
            sentences: tokens.iter().map(|t| detokenize(t)).collect(),
            tokens,
            sentence_spans: spans,
            score: result.score,
            sentence_scores: scores,
            truncated: result.truncated,
            groups: path.len(),
            bridge: path.bridge.clone(),
        })
    }

    /// Decodes stories in parallel; output order follows `paths`.
    pub fn decode_stories(
        &self,
        paths: &[TermPath],
        penalties: &BeamPenaltyConfig,
    ) -> Result<Vec<Story>, GeneratorError> {
        paths.par_iter().map(|p| self.decode_story(p, penalties)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, GeneratorError> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            sentence_budget: self.sentence_budget,
        };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            params: self.params.clone(),
            schedule: self.schedule.clone(),
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, GeneratorError> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(GeneratorError::WrongKind(ckpt.kind));
        }
        let meta: Meta = serde_json::from_value(ckpt.metadata)?;
        let mut model = Self::build(meta.config, meta.vocab, meta.sentence_budget)?;
        check_same_layout(&model.params, &ckpt.params)?;
        model.params = ckpt.params;
        model.schedule = ckpt.schedule;
        Ok(model)
    }
}

/// Next-token distributions for one encoded term path.
pub struct StoryScorer<'m> {
    model: &'m Generator,
    memory: Tensor,
    len: usize,
}

impl StoryScorer<'_> {
    /// LDPE length used at inference: groups times the sentence budget.
    pub fn length_budget(&self) -> usize {
        self.len
    }
}

impl StepScorer for StoryScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, NeuralError> {
        let m = self.model;
        let mut tape = Tape::new();
        let memory = tape.constant(self.memory.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(m.id(BOS));
        inputs.extend_from_slice(prefix);
        let h = m.decode(&mut tape, memory, &inputs, self.len).map_err(|e| match e {
            GeneratorError::Neural(n) => n,
            other => NeuralError::ShapeMismatch {
                op: "decode",
                detail: other.to_string(),
            },
        })?;
        let last = tape.slice_rows(h, inputs.len() - 1, inputs.len())?;
        let logits = m.net.output.forward(&mut tape, &m.params, last)?;
        Ok(log_softmax_row(tape.value(logits).data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ldpe_terminal_position_is_zero_one() {
        let v = ldpe(7, 7, 6).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ldpe_rejects_bad_arguments() {
        assert!(matches!(
            ldpe(3, 2, 4),
            Err(GeneratorError::PositionBeyondLength { pos: 3, len: 2 })
        ));
        assert!(matches!(ldpe(0, 2, 5), Err(GeneratorError::OddDimension(5))));
        assert!(matches!(ldpe(0, 0, 4), Err(GeneratorError::ZeroLength)));
    }

    #[test]
    fn negative_penalties_are_rejected() {
        let p = BeamPenaltyConfig {
            alpha: -1.0,
            ..BeamPenaltyConfig::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn budget_is_mean_sentence_length_plus_marker() {
        let pair = GeneratorPair {
            story_id: "a".into(),
            path: TermPath::from_groups("a", vec![vec![], vec![]]),
            sentences: vec![vec!["a".into(); 3], vec!["b".into(); 6]],
        };
        assert_eq!(mean_sentence_budget(&[pair]), 6);
    }
}
