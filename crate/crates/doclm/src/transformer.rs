//! Pre-norm transformer blocks shared by the encoder and the decoder; the two
//! differ only in their attention mask.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Binding, ParamId, ParamSet, Tape, Tensor, TensorError, Var};

pub(crate) const FFN_MULT: usize = 4;
pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const MASK_VALUE: f64 = -1e30;
pub(crate) const INIT_STD: f64 = 0.2;

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = rand_distr::Normal::new(0.0, std).expect("std is finite");
    let data: Vec<f64> = (0..n).map(|_| rng.sample(dist)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn ones(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).expect("shape/data agree")
}

/// Attention restriction for a block stack.
#[derive(Debug, Clone, Copy)]
pub(crate) enum AttnMask {
    /// Position i may attend to positions <= i.
    Causal,
    /// Bidirectional, but keys at positions >= valid_len are invisible.
    KeyPadding { valid_len: usize },
}

/// T x T boolean mask, true = blocked. Shared across heads and layers.
pub(crate) fn build_mask(t: usize, mask: AttnMask) -> Rc<[bool]> {
    let mut m = vec![false; t * t];
    match mask {
        AttnMask::Causal => {
            for q in 0..t {
                for k in q + 1..t {
                    m[q * t + k] = true;
                }
            }
        }
        AttnMask::KeyPadding { valid_len } => {
            for q in 0..t {
                for k in valid_len..t {
                    m[q * t + k] = true;
                }
            }
        }
    }
    m.into()
}

/// Parameter handles for one block, registered under `{scope}.ln1/attn/ln2/ffn`.
#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl BlockParams {
    pub(crate) fn init(params: &mut ParamSet, scope: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |name: &str, shape: Vec<usize>| {
            params.add(format!("{scope}.{name}"), normal_tensor(rng, shape, INIT_STD))
        };
        let wq = w("attn.wq", vec![d, d]);
        let wk = w("attn.wk", vec![d, d]);
        let wv = w("attn.wv", vec![d, d]);
        let w1 = w("ffn.w1", vec![d, FFN_MULT * d]);
        // residual write-back projections start at zero: blocks begin as the
        // identity and the attention pattern trains before it can disturb the
        // stream
        let wo = params.add(format!("{scope}.attn.wo"), Tensor::zeros(vec![d, d]));
        let w2 = params.add(format!("{scope}.ffn.w2"), Tensor::zeros(vec![FFN_MULT * d, d]));
        let mut z = |name: &str, n: usize| {
            params.add(format!("{scope}.{name}"), Tensor::zeros(vec![n]))
        };
        let bq = z("attn.bq", d);
        let bk = z("attn.bk", d);
        let bv = z("attn.bv", d);
        let bo = z("attn.bo", d);
        let b1 = z("ffn.b1", FFN_MULT * d);
        let b2 = z("ffn.b2", d);
        let ln1_gain = params.add(format!("{scope}.ln1.gain"), ones(vec![d]));
        let ln1_bias = params.add(format!("{scope}.ln1.bias"), Tensor::zeros(vec![d]));
        let ln2_gain = params.add(format!("{scope}.ln2.gain"), ones(vec![d]));
        let ln2_bias = params.add(format!("{scope}.ln2.bias"), Tensor::zeros(vec![d]));
        BlockParams {
            ln1_gain,
            ln1_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

fn linear(
    tape: &mut Tape,
    x: Var,
    bind: &Binding,
    w: ParamId,
    b: ParamId,
) -> Result<Var, TensorError> {
    let h = tape.matmul(x, bind.var(w))?;
    tape.add_row(h, bind.var(b))
}

/// One pre-norm block: x + attn(ln1(x)), then x + ffn(ln2(x)).
pub(crate) fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    bind: &Binding,
    n_heads: usize,
    mask: &Rc<[bool]>,
) -> Result<Var, TensorError> {
    let d = tape.shape(x)[1];
    let dh = d / n_heads;
    let h = tape.layer_norm(x, bind.var(p.ln1_gain), bind.var(p.ln1_bias), LN_EPS)?;
    let q = linear(tape, h, bind, p.wq, p.bq)?;
    let k = linear(tape, h, bind, p.wk, p.bk)?;
    let v = linear(tape, h, bind, p.wv, p.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let qh = tape.scale(qh, 1.0 / (dh as f64).sqrt());
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let masked = tape.mask_fill(scores, mask.clone(), MASK_VALUE)?;
        let attn = tape.softmax(masked, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn_out = linear(tape, merged, bind, p.wo, p.bo)?;
    let x = tape.add(x, attn_out)?;

    let h2 = tape.layer_norm(x, bind.var(p.ln2_gain), bind.var(p.ln2_bias), LN_EPS)?;
    let f = linear(tape, h2, bind, p.w1, p.b1)?;
    let f = tape.gelu(f);
    let f = linear(tape, f, bind, p.w2, p.b2)?;
    tape.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn causal_mask_blocks_the_upper_triangle() {
        let m = build_mask(3, AttnMask::Causal);
        assert_eq!(
            &m[..],
            &[false, true, true, false, false, true, false, false, false]
        );
    }

    #[test]
    fn padding_mask_blocks_tail_keys_for_all_queries() {
        let m = build_mask(3, AttnMask::KeyPadding { valid_len: 2 });
        assert_eq!(
            &m[..],
            &[false, false, true, false, false, true, false, false, true]
        );
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let p = BlockParams::init(&mut params, "blk", 8, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let bind = Binding::bind_all(&mut tape, &params);
            let x = tape
                .leaf_owned(vec![5, 8], (0..40).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let mask = build_mask(5, AttnMask::Causal);
            let y = block_forward(&mut tape, x, &p, &bind, 2, &mask).unwrap();
            assert_eq!(tape.shape(y), &[5, 8]);
            tape.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn block_gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let p = BlockParams::init(&mut params, "blk", 8, &mut rng);
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let x = tape
            .leaf_owned(vec![4, 8], (0..32).map(|i| (i as f64 * 0.7).cos()).collect())
            .unwrap();
        let mask = build_mask(4, AttnMask::Causal);
        let y = block_forward(&mut tape, x, &p, &bind, 2, &mask).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let touched = bind.accumulate_grads(&tape, &mut params);
        assert_eq!(touched.len(), params.len());
        for (_, param) in params.iter() {
            let g = param.grad.as_ref().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "no gradient for {}", param.name);
        }
    }
}
