//! Layers shared by the term distiller, the recurrent term LM and the story
//! generator. Each layer owns only parameter names; values live in a
//! [`ParameterStore`] and are pulled onto a [`Tape`] per forward pass.

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NeuralError;

type Result<T> = std::result::Result<T, NeuralError>;

/// Mask value added to disallowed attention logits.
pub const ATTENTION_MASK: f64 = -1e9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.xavier(&weight, input, output)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.constant(&b, &[1, output], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Tape-free `x W + b` for a single row.
    pub fn apply_row(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        let w = store
            .get(&self.weight)
            .ok_or_else(|| NeuralError::MissingParameter(self.weight.clone()))?;
        if x.len() != self.input {
            return Err(NeuralError::ShapeMismatch {
                op: "linear",
                detail: format!("row of {} into [{}x{}]", x.len(), self.input, self.output),
            });
        }
        let mut out = match &self.bias {
            Some(b) => store
                .get(b)
                .ok_or_else(|| NeuralError::MissingParameter(b.clone()))?
                .data()
                .to_vec(),
            None => vec![0.0; self.output],
        };
        for (i, xv) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row_slice(i)) {
                *o += xv * wv;
            }
        }
        Ok(out)
    }

    pub fn forward<'t>(&self, tape: &mut Tape<'t>, store: &'t ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParameterStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        let table = format!("{name}.table");
        store.xavier(&table, vocab, dim)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward<'t>(&self, tape: &mut Tape<'t>, store: &'t ParameterStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, &self.table)?;
        tape.embed(t, ids)
    }

    pub fn lookup<'a>(&self, store: &'a ParameterStore, id: usize) -> Result<&'a [f64]> {
        let t = store
            .get(&self.table)
            .ok_or_else(|| NeuralError::MissingParameter(self.table.clone()))?;
        if id >= self.vocab {
            return Err(NeuralError::ShapeMismatch {
                op: "embed",
                detail: format!("id {id} outside table [{}x{}]", self.vocab, self.dim),
            });
        }
        Ok(t.row_slice(id))
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    gain: String,
    bias: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.constant(&gain, &[1, dim], 1.0)?;
        store.constant(&bias, &[1, dim], 0.0)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<'t>(&self, tape: &mut Tape<'t>, store: &'t ParameterStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, &self.gain)?;
        let b = tape.param(store, &self.bias)?;
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NeuralError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("dim {dim} not divisible into {heads} heads"),
            });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// `queries [Tq x dim]` attend over `memory [Tk x dim]`. `mask`, when
    /// given, is a constant `[Tq x Tk]` added to the logits.
    pub fn forward<'t>(
        &self,
        tape: &mut Tape<'t>,
        store: &'t ParameterStore,
        queries: Var,
        memory: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let mut logits = tape.scale(logits, scale);
            if let Some(m) = mask {
                logits = tape.add(logits, m)?;
            }
            let weights = tape.softmax(logits)?;
            outputs.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&outputs)?;
        self.out.forward(tape, store, joined)
    }
}

/// Lower-triangular mask allowing each position to see itself and earlier ones.
pub fn causal_mask(len: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            t.data_mut()[i * len + j] = ATTENTION_MASK;
        }
    }
    t
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.in"), dim, hidden, true)?,
            outer: Linear::new(store, &format!("{name}.out"), hidden, dim, true)?,
        })
    }

    pub fn forward<'t>(&self, tape: &mut Tape<'t>, store: &'t ParameterStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// Post-norm Transformer encoder block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &mut Tape<'t>,
        store: &'t ParameterStore,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, store, x, x, mask)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, store, x)
    }
}

/// Post-norm Transformer decoder block: masked self-attention, cross
/// attention over the encoder memory, feed-forward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    self_attention: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &mut Tape<'t>,
        store: &'t ParameterStore,
        x: Var,
        memory: Var,
        causal: Var,
    ) -> Result<Var> {
        let a = self.self_attention.forward(tape, store, x, x, Some(causal))?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let c = self.cross_attention.forward(tape, store, x, memory, None)?;
        let x = tape.add(x, c)?;
        let x = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm3.forward(tape, store, x)
    }
}

/// Gated recurrent unit operating on one row at a time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    input_gates: Linear,
    hidden_gates: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input_gates: Linear::new(store, &format!("{name}.x"), input, 3 * hidden, true)?,
            hidden_gates: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, true)?,
            input,
            hidden,
        })
    }

    /// `h' = (1 - z) * n + z * h` with update gate `z`, reset gate `r` and
    /// candidate `n = tanh(x Wn + r * (h Un))`.
    pub fn forward<'t>(&self, tape: &mut Tape<'t>, store: &'t ParameterStore, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gx = self.input_gates.forward(tape, store, x)?;
        let gh = self.hidden_gates.forward(tape, store, h)?;
        let xz = tape.slice_cols(gx, 0, hd)?;
        let xr = tape.slice_cols(gx, hd, 2 * hd)?;
        let xn = tape.slice_cols(gx, 2 * hd, 3 * hd)?;
        let hz = tape.slice_cols(gh, 0, hd)?;
        let hr = tape.slice_cols(gh, hd, 2 * hd)?;
        let hn = tape.slice_cols(gh, 2 * hd, 3 * hd)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Tape-free single step, numerically identical to [`GruCell::forward`].
    pub fn step_row(&self, store: &ParameterStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let hd = self.hidden;
        let gx = self.input_gates.apply_row(store, x)?;
        let gh = self.hidden_gates.apply_row(store, h)?;
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        Ok((0..hd)
            .map(|j| {
                let z = sigmoid(gx[j] + gh[j]);
                let r = sigmoid(gx[hd + j] + gh[hd + j]);
                let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                n + z * (h[j] - n)
            })
            .collect())
    }
}

/// Standard sinusoidal encoding of absolute position.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
