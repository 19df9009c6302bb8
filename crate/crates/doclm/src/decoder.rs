//! Causal byte-level decoder plus the linear adapter that injects document
//! features as a 512-row prefix.
//!
//! A fused sequence is `[projected document features] ++ [prompt tokens] ++
//! [response tokens]`, positions numbered continuously across the
//! concatenation and attention strictly causal throughout (the prefix
//! included). Instruction-only samples simply have no prefix block.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ByteCodec;
use crate::encoder::{DocumentFeatures, EncoderError, FEATURE_LEN};
use crate::prompts::TaskSample;
use crate::tensor::{Binding, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::transformer::{block_forward, build_mask, normal_tensor, AttnMask, BlockParams, INIT_STD, LN_EPS};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("decoder config: {0}")]
    InvalidConfig(String),
    #[error("adapter: feature width {got} does not match the adapter input width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("features have {got} rows; the fusion contract requires {expected}")]
    FeatureRows { got: usize, expected: usize },
    #[error("sample {id}: document task without document features")]
    MissingFeatures { id: String },
    #[error("sample {id}: empty response")]
    EmptyResponse { id: String },
    #[error("sequence length {len} exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_dec: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Byte vocabulary plus BOS/EOS/PAD.
    pub vocab_size: usize,
    /// Total positions: the 512 feature slots plus the prompt/response budget.
    pub max_context: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_dec: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: ByteCodec::VOCAB_SIZE,
            // byte-level prompts for extraction tasks run past 450 tokens, so
            // the budget past the 512 feature slots is generous
            max_context: 1280,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.d_dec == 0 || self.n_heads == 0 || self.d_dec % self.n_heads != 0 {
            return Err(FusionError::InvalidConfig(format!(
                "d_dec {} must be a positive multiple of n_heads {}",
                self.d_dec, self.n_heads
            )));
        }
        if self.max_context < FEATURE_LEN + 1 {
            return Err(FusionError::InvalidConfig(format!(
                "max_context {} cannot hold the {FEATURE_LEN} feature slots plus text",
                self.max_context
            )));
        }
        if self.vocab_size <= ByteCodec::PAD {
            return Err(FusionError::InvalidConfig(format!(
                "vocab_size {} does not cover the byte range plus specials",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// The single linear layer mapping encoder features to decoder width.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub d_in: usize,
    pub d_out: usize,
    w: ParamId,
    b: ParamId,
}

impl Adapter {
    /// Registers `adapter.w` / `adapter.b`; the input width follows the
    /// active encoder, which is how encoder swapping reconfigures the fusion.
    pub fn init(d_in: usize, d_out: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let w = params.add("adapter.w", normal_tensor(rng, vec![d_in, d_out], INIT_STD));
        let b = params.add("adapter.b", Tensor::zeros(vec![d_out]));
        Adapter { d_in, d_out, w, b }
    }

    fn check(&self, shape: &[usize]) -> Result<(), FusionError> {
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(FusionError::WidthMismatch {
                got: shape.last().copied().unwrap_or(0),
                expected: self.d_in,
            });
        }
        if shape[0] != FEATURE_LEN {
            return Err(FusionError::FeatureRows {
                got: shape[0],
                expected: FEATURE_LEN,
            });
        }
        Ok(())
    }

    /// Row-wise affine map on the tape; no nonlinearity.
    pub fn project_on(&self, tape: &mut Tape, bind: &Binding, f: Var) -> Result<Var, FusionError> {
        self.check(tape.shape(f))?;
        let p = tape.matmul(f, bind.var(self.w))?;
        Ok(tape.add_row(p, bind.var(self.b))?)
    }

    /// Data-level projection for inference and tests.
    pub fn project_features(
        &self,
        params: &ParamSet,
        f: &DocumentFeatures,
    ) -> Result<Tensor, FusionError> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(params);
        bind.bind_prefix(&mut tape, params, "adapter.");
        let leaf = tape.leaf(&f.features);
        let out = self.project_on(&mut tape, &bind, leaf)?;
        Ok(tape.to_tensor(out))
    }
}

/// One fused training sequence. `loss_mask` runs over the full concatenation
/// and is true exactly on response positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    /// Projected document features (512 x d_dec); absent for instruction-only
    /// samples.
    pub prefix_embeddings: Option<Tensor>,
    pub prompt_ids: Vec<usize>,
    /// Always ends with EOS.
    pub response_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn prefix_len(&self) -> usize {
        self.prefix_embeddings.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn total_len(&self) -> usize {
        self.prefix_len() + self.prompt_ids.len() + self.response_ids.len()
    }

    /// First response position in the concatenated sequence.
    pub fn response_start(&self) -> usize {
        self.prefix_len() + self.prompt_ids.len()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.response_ids.last() != Some(&ByteCodec::EOS) {
            return Err("response does not end with EOS".into());
        }
        if self.loss_mask.len() != self.total_len() {
            return Err("loss_mask length differs from the concatenation".into());
        }
        let start = self.response_start();
        for (i, &m) in self.loss_mask.iter().enumerate() {
            if m != (i >= start) {
                return Err(format!("loss_mask wrong at position {i}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecParamIds {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    p: DecParamIds,
}

impl Decoder {
    /// Registers all decoder parameters under `decoder.*`.
    pub fn init(
        cfg: DecoderConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FusionError> {
        cfg.validate()?;
        let d = cfg.d_dec;
        let tok = params.add(
            "decoder.tok_emb",
            normal_tensor(rng, vec![cfg.vocab_size, d], INIT_STD),
        );
        let pos = params.add(
            "decoder.pos_emb",
            normal_tensor(rng, vec![cfg.max_context, d], INIT_STD),
        );
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::init(params, &format!("decoder.block{l}"), d, rng))
            .collect();
        let lnf_gain = params.add(
            "decoder.ln_f.gain",
            Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
        );
        let lnf_bias = params.add("decoder.ln_f.bias", Tensor::zeros(vec![d]));
        let head_w = params.add(
            "decoder.head.w",
            normal_tensor(rng, vec![d, cfg.vocab_size], INIT_STD),
        );
        let head_b = params.add("decoder.head.b", Tensor::zeros(vec![cfg.vocab_size]));
        Ok(Decoder {
            cfg,
            p: DecParamIds {
                tok,
                pos,
                blocks,
                lnf_gain,
                lnf_bias,
                head_w,
                head_b,
            },
        })
    }

    /// Builds the fused input embedding matrix: optional prefix rows followed
    /// by token embeddings, plus position embeddings numbered continuously.
    pub fn build_input(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        prefix: Option<Var>,
        ids: &[usize],
    ) -> Result<Var, FusionError> {
        let prefix_len = prefix.map_or(0, |p| tape.shape(p)[0]);
        let total = prefix_len + ids.len();
        if total > self.cfg.max_context {
            return Err(FusionError::ContextOverflow {
                len: total,
                max: self.cfg.max_context,
            });
        }
        let tok_ids: Rc<[usize]> = ids.into();
        let toks = tape.gather_rows(bind.var(self.p.tok), tok_ids)?;
        let content = match prefix {
            Some(p) => tape.concat_rows(&[p, toks])?,
            None => toks,
        };
        let pos_ids: Rc<[usize]> = (0..total).collect();
        let pos = tape.gather_rows(bind.var(self.p.pos), pos_ids)?;
        Ok(tape.add(content, pos)?)
    }

    /// Causal block stack plus final norm over an already-embedded input.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
    ) -> Result<Var, FusionError> {
        let t = tape.shape(x)[0];
        if t > self.cfg.max_context {
            return Err(FusionError::ContextOverflow {
                len: t,
                max: self.cfg.max_context,
            });
        }
        let mask = build_mask(t, AttnMask::Causal);
        let mut h = x;
        for block in &self.p.blocks {
            h = block_forward(tape, h, block, bind, self.cfg.n_heads, &mask)?;
        }
        Ok(tape.layer_norm(h, bind.var(self.p.lnf_gain), bind.var(self.p.lnf_bias), LN_EPS)?)
    }

    fn head(&self, tape: &mut Tape, bind: &Binding, h: Var) -> Result<Var, FusionError> {
        let l = tape.matmul(h, bind.var(self.p.head_w))?;
        Ok(tape.add_row(l, bind.var(self.p.head_b))?)
    }

    fn bind_for(&self, tape: &mut Tape, params: &ParamSet) -> Binding {
        let mut bind = Binding::new(params);
        bind.bind_prefix(tape, params, "decoder.");
        bind
    }

    /// Builds the fused sequence for a sample. Document tasks must supply
    /// projected features; instruction-only tasks must not carry a prefix.
    pub fn assemble(
        &self,
        sample: &TaskSample,
        projected: Option<Tensor>,
    ) -> Result<AssembledSequence, FusionError> {
        if sample.kind.is_vrdu() && projected.is_none() {
            return Err(FusionError::MissingFeatures {
                id: sample.record_id.clone(),
            });
        }
        if sample.target.is_empty() {
            return Err(FusionError::EmptyResponse {
                id: sample.record_id.clone(),
            });
        }
        if let Some(p) = &projected {
            if p.shape() != [FEATURE_LEN, self.cfg.d_dec] {
                return Err(FusionError::FeatureRows {
                    got: p.shape()[0],
                    expected: FEATURE_LEN,
                });
            }
        }
        let (prompt_ids, response_ids) = Self::prompt_response_ids(sample);
        let prefix_len = projected.as_ref().map_or(0, |p| p.shape()[0]);
        let total = prefix_len + prompt_ids.len() + response_ids.len();
        if total > self.cfg.max_context {
            return Err(FusionError::ContextOverflow {
                len: total,
                max: self.cfg.max_context,
            });
        }
        let mut loss_mask = vec![false; prefix_len + prompt_ids.len()];
        loss_mask.extend(std::iter::repeat(true).take(response_ids.len()));
        Ok(AssembledSequence {
            prefix_embeddings: projected,
            prompt_ids,
            response_ids,
            loss_mask,
        })
    }

    /// Full next-token logits for a fused sequence, on a private tape.
    /// Strictly causal: row i only sees positions <= i.
    pub fn forward_logits(
        &self,
        params: &ParamSet,
        seq: &AssembledSequence,
    ) -> Result<Tensor, FusionError> {
        let mut tape = Tape::new();
        let bind = self.bind_for(&mut tape, params);
        let prefix = seq.prefix_embeddings.as_ref().map(|t| tape.leaf(t));
        let mut ids = seq.prompt_ids.clone();
        ids.extend(&seq.response_ids);
        let x = self.build_input(&mut tape, &bind, prefix, &ids)?;
        let h = self.forward_hidden(&mut tape, &bind, x)?;
        let logits = self.head(&mut tape, &bind, h)?;
        Ok(tape.to_tensor(logits))
    }

    /// Prompt and response token ids for a sample: BOS heads the prompt, EOS
    /// closes the response.
    pub fn prompt_response_ids(sample: &TaskSample) -> (Vec<usize>, Vec<usize>) {
        let mut prompt_ids = vec![ByteCodec::BOS];
        prompt_ids.extend(ByteCodec::encode(&sample.prompt()));
        let mut response_ids = ByteCodec::encode(&sample.target);
        response_ids.push(ByteCodec::EOS);
        (prompt_ids, response_ids)
    }

    /// Masked next-token cross entropy on the caller's tape: each position
    /// the loss mask selects is predicted from everything before it. The
    /// logits are only computed on the rows the loss needs.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        input: Var,
        seq: &AssembledSequence,
        loss_on_prompt: bool,
    ) -> Result<Var, FusionError> {
        self.loss_from_parts(
            tape,
            bind,
            input,
            seq.prefix_len(),
            &seq.prompt_ids,
            &seq.response_ids,
            loss_on_prompt,
        )
    }

    /// Loss with the sequence layout given explicitly; the training loop uses
    /// this so the projected prefix can stay a live graph node.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_from_parts(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        input: Var,
        prefix_len: usize,
        prompt_ids: &[usize],
        response_ids: &[usize],
        loss_on_prompt: bool,
    ) -> Result<Var, FusionError> {
        let h = self.forward_hidden(tape, bind, input)?;
        let resp_start = prefix_len + prompt_ids.len();
        // predicting position p reads hidden row p-1; the prompt's first
        // token has no predecessor and is never scored
        let (first_scored, targets): (usize, Vec<usize>) = if loss_on_prompt {
            let mut t = prompt_ids[1..].to_vec();
            t.extend(response_ids);
            (prefix_len + 1, t)
        } else {
            (resp_start, response_ids.to_vec())
        };
        let rows = tape.slice_rows(h, first_scored - 1, targets.len())?;
        let logits = self.head(tape, bind, rows)?;
        let mask = vec![true; targets.len()];
        Ok(tape.cross_entropy(logits, &targets, &mask)?)
    }

    /// Loss value for a fused sequence on a private tape.
    pub fn loss(&self, params: &ParamSet, seq: &AssembledSequence) -> Result<f64, FusionError> {
        seq.check_invariants()
            .map_err(FusionError::InvalidConfig)?;
        let mut tape = Tape::new();
        let bind = self.bind_for(&mut tape, params);
        let prefix = seq.prefix_embeddings.as_ref().map(|t| tape.leaf(t));
        let mut ids = seq.prompt_ids.clone();
        ids.extend(&seq.response_ids);
        let x = self.build_input(&mut tape, &bind, prefix, &ids)?;
        let l = self.loss_on(&mut tape, &bind, x, seq, false)?;
        Ok(tape.value(l)[0])
    }

    /// Greedy decoding: repeatedly append the argmax token (ties break to the
    /// lowest id), stop at EOS or after `max_new` tokens. Returns only the
    /// generated response, EOS excluded.
    pub fn generate_greedy(
        &self,
        params: &ParamSet,
        prefix: Option<&Tensor>,
        prompt_ids: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>, FusionError> {
        assert!(max_new >= 1, "max_new must be at least 1");
        let mut generated: Vec<usize> = Vec::new();
        loop {
            let mut tape = Tape::new();
            let bind = self.bind_for(&mut tape, params);
            let prefix_var = prefix.map(|t| tape.leaf(t));
            let mut ids = prompt_ids.to_vec();
            ids.extend(&generated);
            let x = self.build_input(&mut tape, &bind, prefix_var, &ids)?;
            let h = self.forward_hidden(&mut tape, &bind, x)?;
            let t = tape.shape(h)[0];
            let last = tape.slice_rows(h, t - 1, 1)?;
            let logits = self.head(&mut tape, &bind, last)?;
            let row = tape.value(logits);
            let (next, _) = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            if next == ByteCodec::EOS {
                break;
            }
            generated.push(next);
            if generated.len() == max_new {
                break;
            }
        }
        Ok(generated)
    }
}
