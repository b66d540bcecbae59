//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite. Each case returns its worst relative error.

use kgstory::neural::layers::{
    causal_mask, DecoderLayer, EncoderLayer, FeedForward, GruCell, LayerNorm, Linear, MultiHeadAttention,
};
use kgstory::neural::{ParameterStore, Tensor};

use super::{check_inputs, check_params, project, random_tensor, rng};

/// Values at least 0.1 away from zero, so relu has no kink within the step.
fn off_zero(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut t = random_tensor(&mut rng(seed), rows, cols);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

pub fn primitive_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(101);
    let a = random_tensor(&mut r, 3, 4);
    let b = random_tensor(&mut r, 3, 4);
    let c = random_tensor(&mut r, 4, 2);
    let row = random_tensor(&mut r, 1, 4);
    let pos = {
        let mut t = random_tensor(&mut r, 3, 4);
        for v in t.data_mut() {
            *v = 0.5 + v.abs();
        }
        t
    };

    vec![
        (
            "matmul",
            check_inputs(&[a.clone(), c.clone()], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "add",
            check_inputs(&[a.clone(), b.clone()], |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 2)
            }),
        ),
        (
            "sub",
            check_inputs(&[a.clone(), b.clone()], |t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 3)
            }),
        ),
        (
            "mul",
            check_inputs(&[a.clone(), b.clone()], |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 4)
            }),
        ),
        (
            "add_row",
            check_inputs(&[a.clone(), row.clone()], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, 5)
            }),
        ),
        (
            "mul_row",
            check_inputs(&[a.clone(), row.clone()], |t, v| {
                let y = t.mul_row(v[0], v[1])?;
                project(t, y, 6)
            }),
        ),
        (
            "scale",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y, 7)
            }),
        ),
        (
            "sigmoid",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, 8)
            }),
        ),
        (
            "tanh",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.tanh(v[0]);
                project(t, y, 9)
            }),
        ),
        (
            "relu",
            check_inputs(&[off_zero(12, 3, 4)], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, 10)
            }),
        ),
        (
            "softmax",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, 11)
            }),
        ),
        (
            "layer_norm",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.layer_norm(v[0])?;
                project(t, y, 12)
            }),
        ),
        (
            "embed",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.embed(v[0], &[2, 0, 2, 1])?;
                project(t, y, 13)
            }),
        ),
        (
            "concat_cols",
            check_inputs(&[a.clone(), b.clone()], |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                project(t, y, 14)
            }),
        ),
        (
            "slice_cols",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.slice_cols(v[0], 1, 3)?;
                project(t, y, 15)
            }),
        ),
        (
            "concat_rows",
            check_inputs(&[a.clone(), row.clone()], |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y, 16)
            }),
        ),
        (
            "slice_rows",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.slice_rows(v[0], 1, 3)?;
                project(t, y, 17)
            }),
        ),
        (
            "transpose",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, 18)
            }),
        ),
        (
            "mean_rows",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let y = t.mean_rows(v[0])?;
                project(t, y, 19)
            }),
        ),
        (
            "sum",
            check_inputs(std::slice::from_ref(&pos), |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
        ),
        (
            "cross_entropy",
            check_inputs(std::slice::from_ref(&a), |t, v| t.cross_entropy(v[0], &[3, 0, 3])),
        ),
    ]
}

/// Parameter gradients of the layers built on top of the primitives.
pub fn layer_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(202);
    let x = random_tensor(&mut r, 3, 4);
    let mem = random_tensor(&mut r, 5, 4);
    let mut out = Vec::new();

    let mut s = ParameterStore::new(1);
    let lin = Linear::new(&mut s, "lin", 4, 3, true).unwrap();
    let xi = x.clone();
    out.push((
        "linear",
        check_params(&s, move |t, p| {
            let xv = t.constant(xi.clone());
            let y = lin.forward(t, p, xv)?;
            project(t, y, 21)
        }),
    ));

    let mut s = ParameterStore::new(2);
    let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
    let xi = x.clone();
    out.push((
        "layer_norm_affine",
        check_params(&s, move |t, p| {
            let xv = t.constant(xi.clone());
            let y = ln.forward(t, p, xv)?;
            project(t, y, 22)
        }),
    ));

    let mut s = ParameterStore::new(3);
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 2).unwrap();
    let (xi, mi) = (x.clone(), mem.clone());
    out.push((
        "attention",
        check_params(&s, move |t, p| {
            let q = t.constant(xi.clone());
            let m = t.constant(mi.clone());
            let y = mha.forward(t, p, q, m, None)?;
            project(t, y, 23)
        }),
    ));

    let mut s = ParameterStore::new(4);
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 2).unwrap();
    let xi = x.clone();
    out.push((
        "masked_self_attention",
        check_params(&s, move |t, p| {
            let q = t.constant(xi.clone());
            let mask = t.constant(causal_mask(3));
            let y = mha.forward(t, p, q, q, Some(mask))?;
            project(t, y, 24)
        }),
    ));

    let mut s = ParameterStore::new(5);
    let ffn = FeedForward::new(&mut s, "ffn", 4, 8).unwrap();
    let xi = x.clone();
    out.push((
        "feed_forward",
        check_params(&s, move |t, p| {
            let xv = t.constant(xi.clone());
            let y = ffn.forward(t, p, xv)?;
            project(t, y, 25)
        }),
    ));

    let mut s = ParameterStore::new(6);
    let gru = GruCell::new(&mut s, "gru", 4, 3).unwrap();
    let xi = x.clone();
    out.push((
        "gru_cell",
        check_params(&s, move |t, p| {
            let xs = t.constant(xi.clone());
            let mut h = t.constant(Tensor::zeros(&[1, 3]));
            for i in 0..3 {
                let xr = t.slice_rows(xs, i, i + 1)?;
                h = gru.forward(t, p, xr, h)?;
            }
            project(t, h, 26)
        }),
    ));
    out
}

/// Two Transformer layers (encoder over a memory, decoder over a sequence)
/// feeding a GRU that runs over the decoder output, then a cross-entropy loss.
pub fn composite_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(303);
    let x = random_tensor(&mut r, 3, 4);
    let mem = random_tensor(&mut r, 4, 4);

    let mut s = ParameterStore::new(7);
    let enc = EncoderLayer::new(&mut s, "enc", 4, 2).unwrap();
    let dec = DecoderLayer::new(&mut s, "dec", 4, 2).unwrap();
    let gru = GruCell::new(&mut s, "gru", 4, 4).unwrap();
    let head = Linear::new(&mut s, "head", 4, 5, true).unwrap();
    let stack = check_params(&s, move |t, p| {
        let m = t.constant(mem.clone());
        let m = enc.forward(t, p, m, None)?;
        let xv = t.constant(x.clone());
        let mask = t.constant(causal_mask(3));
        let y = dec.forward(t, p, xv, m, mask)?;
        let mut h = t.constant(Tensor::zeros(&[1, 4]));
        let mut states = Vec::new();
        for i in 0..3 {
            let row = t.slice_rows(y, i, i + 1)?;
            h = gru.forward(t, p, row, h)?;
            states.push(h);
        }
        let hs = t.concat_rows(&states)?;
        let logits = head.forward(t, p, hs)?;
        t.cross_entropy(logits, &[1, 4, 0])
    });
    vec![("attention_gru_stack", stack)]
}
