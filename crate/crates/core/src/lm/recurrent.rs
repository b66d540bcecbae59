use log::info;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TermSequence};
use crate::neural::layers::{Embedding, GruCell, Linear};
use crate::neural::{log_softmax_row, AdamConfig, AdamState, Checkpoint, NeuralError, ParameterStore, Tape};
use crate::vocab::{Vocab, BOS, EOS, SEP, UNK};

pub(super) const CHECKPOINT_KIND: &str = "recurrent-lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentLmConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Every n-th sequence is held out for perplexity reporting. With 0, or
    /// a corpus too small to split, the training corpus is evaluated.
    pub holdout_every: usize,
}

impl Default for RecurrentLmConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            hidden: 128,
            epochs: 20,
            seed: 17,
            adam: AdamConfig::default(),
            holdout_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_perplexity: f64,
}

/// GRU language model over term tokens.
#[derive(Clone, Debug)]
pub struct RecurrentLm {
    config: RecurrentLmConfig,
    vocab: Vocab,
    params: ParameterStore,
    embedding: Embedding,
    cell: GruCell,
    output: Linear,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: RecurrentLmConfig,
    vocab: Vocab,
}

impl RecurrentLm {
    fn build(config: RecurrentLmConfig, vocab: Vocab) -> Result<Self, NeuralError> {
        let mut params = ParameterStore::new(config.seed);
        let embedding = Embedding::new(&mut params, "lm.embed", vocab.len(), config.embed)?;
        let cell = GruCell::new(&mut params, "lm.gru", config.embed, config.hidden)?;
        let output = Linear::new(&mut params, "lm.out", config.hidden, vocab.len(), true)?;
        Ok(Self {
            config,
            vocab,
            params,
            embedding,
            cell,
            output,
        })
    }

    /// Trains on `corpus`; the vocabulary is closed over it plus markers and
    /// `<unk>`.
    pub fn train(corpus: &[TermSequence], config: RecurrentLmConfig) -> Result<(Self, Vec<EpochReport>), LmError> {
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let vocab = Vocab::build(
            &[BOS, EOS, SEP, UNK],
            corpus.iter().flat_map(|s| s.tokens().iter().map(String::as_str)),
        );
        let mut lm = Self::build(config, vocab)?;

        let every = lm.config.holdout_every;
        let split = every > 0 && corpus.len() >= every.max(2);
        let (train, heldout): (Vec<&TermSequence>, Vec<&TermSequence>) = if split {
            let (h, t): (Vec<_>, Vec<_>) = corpus.iter().enumerate().partition(|(i, _)| i % every == every - 1);
            (
                t.into_iter().map(|x| x.1).collect(),
                h.into_iter().map(|x| x.1).collect(),
            )
        } else {
            (corpus.iter().collect(), corpus.iter().collect())
        };

        let mut adam = AdamState::new(lm.config.adam.clone());
        let mut reports = Vec::with_capacity(lm.config.epochs);
        for epoch in 0..lm.config.epochs {
            let mut total = 0.0;
            for seq in &train {
                let ids = lm.ids(seq.tokens());
                let mut tape = Tape::new();
                let logits = lm.logits(&mut tape, &ids[..ids.len() - 1])?;
                let loss = tape.cross_entropy(logits, &ids[1..])?;
                total += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                adam.step(&mut lm.params, grads.named())?;
            }
            let heldout_perplexity = lm.corpus_perplexity(&heldout);
            let report = EpochReport {
                epoch,
                train_loss: total / train.len() as f64,
                heldout_perplexity,
            };
            info!(
                "lm epoch {epoch}: loss {:.4}, held-out perplexity {:.4}",
                report.train_loss, report.heldout_perplexity
            );
            reports.push(report);
        }
        Ok((lm, reports))
    }

    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.vocab.id_or_unk(t).expect("vocab has <unk>"))
            .collect()
    }

    fn logits<'t>(&'t self, tape: &mut Tape<'t>, inputs: &[usize]) -> Result<crate::neural::Var, NeuralError> {
        let emb = self.embedding.forward(tape, &self.params, inputs)?;
        let mut h = tape.constant(crate::neural::Tensor::zeros(&[1, self.config.hidden]));
        let mut states = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = tape.slice_rows(emb, t, t + 1)?;
            h = self.cell.forward(tape, &self.params, x, h)?;
            states.push(h);
        }
        let hs = tape.concat_rows(&states)?;
        self.output.forward(tape, &self.params, hs)
    }

    /// Log-distributions over the vocabulary after each prefix of `ids`.
    fn next_log_probs(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>, NeuralError> {
        let mut h = vec![0.0; self.config.hidden];
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let x = self.embedding.lookup(&self.params, id)?;
            h = self.cell.step_row(&self.params, x, &h)?;
            out.push(log_softmax_row(&self.output.apply_row(&self.params, &h)?));
        }
        Ok(out)
    }

    fn corpus_perplexity(&self, seqs: &[&TermSequence]) -> f64 {
        let (lp, n) = seqs.iter().fold((0.0, 0usize), |(lp, n), s| {
            (lp + self.sequence_log_prob(s.tokens()), n + s.predicted_len())
        });
        (-lp / n as f64).exp()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, LmError> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            params: self.params.clone(),
            schedule: None,
            metadata: serde_json::to_value(meta).map_err(|e| LmError::Json("recurrent lm metadata".into(), e))?,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, LmError> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(LmError::UnknownFormat(ckpt.kind));
        }
        let meta: Meta =
            serde_json::from_value(ckpt.metadata).map_err(|e| LmError::Json("recurrent lm metadata".into(), e))?;
        let mut lm = Self::build(meta.config, meta.vocab)?;
        check_same_layout(&lm.params, &ckpt.params)?;
        lm.params = ckpt.params;
        Ok(lm)
    }
}

/// Ensures a loaded store has exactly the names and shapes of a freshly
/// built model.
pub(crate) fn check_same_layout(expected: &ParameterStore, loaded: &ParameterStore) -> Result<(), NeuralError> {
    if expected.len() != loaded.len() {
        return Err(NeuralError::Checkpoint(format!(
            "expected {} parameters, found {}",
            expected.len(),
            loaded.len()
        )));
    }
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            Some(l) if l.shape() == t.shape() => {}
            Some(l) => {
                return Err(NeuralError::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    l.shape()
                )))
            }
            None => return Err(NeuralError::MissingParameter(name.clone())),
        }
    }
    Ok(())
}

impl LanguageModel for RecurrentLm {
    fn conditional_log_prob(&self, context: &[String], next: &str) -> f64 {
        let ids = self.ids(context);
        let dists = self.next_log_probs(&ids).expect("model layout checked at load");
        let next = self.vocab.id_or_unk(next).expect("vocab has <unk>");
        dists.last().map_or(f64::NEG_INFINITY, |d| d[next])
    }

    fn prediction_vocab(&self) -> Vec<String> {
        self.vocab.tokens().to_vec()
    }

    fn sequence_log_prob(&self, tokens: &[String]) -> f64 {
        if tokens.len() < 2 {
            return 0.0;
        }
        let ids = self.ids(tokens);
        let dists = self
            .next_log_probs(&ids[..ids.len() - 1])
            .expect("model layout checked at load");
        dists.iter().zip(&ids[1..]).map(|(d, &y)| d[y]).sum()
    }
}
