//! Post-norm transformer blocks built on the autodiff tape. All functions
//! take a name-to-variable map so the same code serves training (named
//! parameter leaves) and frozen inference (unnamed constant leaves).

use std::collections::BTreeMap;

use crate::math::{Matrix, Tape, Var};

pub const LN_EPS: f64 = 1e-5;
/// Additive attention mask value. Large enough that exp underflows to an
/// exact zero after the row-max shift, making masked positions contribute
/// nothing at all.
pub const MASK_VALUE: f64 = -1e9;

/// Fixed sinusoidal position table, one row per position.
pub fn sinusoidal_positions(n: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(pos, i, v);
        }
    }
    pe
}

/// Strictly-upper-triangular additive mask: position i may attend to j <= i.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASK_VALUE);
        }
    }
    m
}

fn pv(vars: &BTreeMap<String, Var>, name: &str) -> Var {
    *vars
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

/// Multi-head attention: queries from `q_in`, keys and values from `kv_in`,
/// optional additive mask on the score matrix, concatenated heads projected
/// by the output matrix under `<prefix>.wo`.
pub fn multi_head_attention(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let d = tape.value(q_in).cols();
    assert!(
        heads > 0 && d.is_multiple_of(heads),
        "head count must divide width"
    );
    let dh = d / heads;
    let q = tape.matmul(q_in, pv(vars, &format!("{prefix}.wq")));
    let k = tape.matmul(kv_in, pv(vars, &format!("{prefix}.wk")));
    let v = tape.matmul(kv_in, pv(vars, &format!("{prefix}.wv")));
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m);
        }
        let weights = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(weights, vh));
    }
    let concat = tape.concat_cols(&head_outs);
    tape.matmul(concat, pv(vars, &format!("{prefix}.wo")))
}

fn feed_forward(tape: &mut Tape, vars: &BTreeMap<String, Var>, prefix: &str, x: Var) -> Var {
    let h = tape.matmul(x, pv(vars, &format!("{prefix}.w1")));
    let h = tape.add_row(h, pv(vars, &format!("{prefix}.b1")));
    let h = tape.relu(h);
    let h = tape.matmul(h, pv(vars, &format!("{prefix}.w2")));
    tape.add_row(h, pv(vars, &format!("{prefix}.b2")))
}

fn residual_norm(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    sub: Var,
) -> Var {
    let sum = tape.add(x, sub);
    let gamma = pv(vars, &format!("{prefix}.norm.gamma"));
    let beta = pv(vars, &format!("{prefix}.norm.beta"));
    tape.layer_norm(sum, gamma, beta, LN_EPS)
}

/// Self-attention plus feed-forward, each followed by add-and-normalize.
pub fn encoder_layer(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Var {
    let attn_prefix = format!("{prefix}.attn");
    let a = multi_head_attention(tape, vars, &attn_prefix, x, x, heads, None);
    let x = residual_norm(tape, vars, &attn_prefix, x, a);
    let ffn_prefix = format!("{prefix}.ffn");
    let f = feed_forward(tape, vars, &ffn_prefix, x);
    residual_norm(tape, vars, &ffn_prefix, x, f)
}

/// Masked self-attention, cross-attention over the encoder memory, then
/// feed-forward, each followed by add-and-normalize.
pub fn decoder_layer(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    memory: Var,
    heads: usize,
    mask: Var,
) -> Var {
    let self_prefix = format!("{prefix}.self");
    let a = multi_head_attention(tape, vars, &self_prefix, x, x, heads, Some(mask));
    let x = residual_norm(tape, vars, &self_prefix, x, a);
    let cross_prefix = format!("{prefix}.cross");
    let c = multi_head_attention(tape, vars, &cross_prefix, x, memory, heads, None);
    let x = residual_norm(tape, vars, &cross_prefix, x, c);
    let ffn_prefix = format!("{prefix}.ffn");
    let f = feed_forward(tape, vars, &ffn_prefix, x);
    residual_norm(tape, vars, &ffn_prefix, x, f)
}
