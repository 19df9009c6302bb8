//! Layout-aware document encoder.
//!
//! A document becomes a fixed 512-position sequence: a CLS slot, then the
//! byte tokens of its words (each byte inheriting the word's normalized box),
//! then the image patch tokens, padded with a learned PAD embedding. The
//! sequence runs through pre-norm self-attention blocks with the padding
//! masked out of the keys.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_box, ByteCodec, DataError, Document, GrayImage};
use crate::tensor::{Binding, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use crate::transformer::{block_forward, build_mask, normal_tensor, AttnMask, BlockParams, INIT_STD, LN_EPS};

/// Feature sequence length every encoder must produce.
pub const FEATURE_LEN: usize = 512;
/// Box coordinates are exact integer buckets 0..=1000.
pub const COORD_BUCKETS: usize = 1001;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    InvalidConfig(String),
    #[error("layout token: coordinate {value} outside [0, 1000] or inverted box")]
    CoordinateOutOfRange { value: u16 },
    #[error("patchify: image {h}x{w} does not split into a {grid}x{grid} patch grid with {expected}-pixel patches")]
    BadPatchSplit {
        h: usize,
        w: usize,
        grid: usize,
        expected: usize,
    },
    #[error("encoder produced {got} feature rows, the fusion contract requires {expected}")]
    WrongFeatureLen { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Input channels the encoder draws on; the reduced variants implement the
/// encoder-swap ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Full,
    /// Word bytes only: boxes read as zero, image read as blank.
    TextOnly,
    /// Image patches only: word embeddings zeroed, boxes read as zero.
    VisionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Fixed feature sequence length; the architecture pins this at 512.
    pub max_seq: usize,
    pub coord_buckets: usize,
    /// Patch grid side; the image contributes `patch_grid^2` tokens.
    pub patch_grid: usize,
    /// Expected raster side in pixels (patch projection input is
    /// `(image_size / patch_grid)^2` wide).
    pub image_size: usize,
    pub vocab_size: usize,
    pub modality: Modality,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_enc: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: FEATURE_LEN,
            coord_buckets: COORD_BUCKETS,
            patch_grid: 4,
            image_size: 32,
            vocab_size: ByteCodec::VOCAB_SIZE,
            modality: Modality::Full,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        let side = self.image_size / self.patch_grid;
        side * side
    }

    /// Text token capacity after the CLS slot and the patch tokens.
    pub fn text_budget(&self) -> usize {
        self.max_seq - 1 - self.n_patches()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.max_seq != FEATURE_LEN {
            return fail(format!("max_seq must be {FEATURE_LEN}, got {}", self.max_seq));
        }
        if self.coord_buckets != COORD_BUCKETS {
            return fail(format!(
                "coord_buckets must be {COORD_BUCKETS}, got {}",
                self.coord_buckets
            ));
        }
        if self.d_enc == 0 || self.n_heads == 0 || self.d_enc % self.n_heads != 0 {
            return fail(format!(
                "d_enc {} must be a positive multiple of n_heads {}",
                self.d_enc, self.n_heads
            ));
        }
        if self.patch_grid == 0 || 1 + self.n_patches() > self.max_seq {
            return fail(format!("patch grid {} leaves no room for text", self.patch_grid));
        }
        if self.image_size % self.patch_grid != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_grid {}",
                self.image_size, self.patch_grid
            ));
        }
        Ok(())
    }
}

/// One encoder input token: a byte id plus its normalized box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutToken {
    pub token_id: usize,
    /// (x0, y0, x1, y1), integers in [0, 1000].
    pub bbox: [u16; 4],
}

impl LayoutToken {
    pub fn width(&self) -> u16 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> u16 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let [x0, y0, x1, y1] = self.bbox;
        for v in self.bbox {
            if v > 1000 {
                return Err(EncoderError::CoordinateOutOfRange { value: v });
            }
        }
        if x0 > x1 || y0 > y1 {
            return Err(EncoderError::CoordinateOutOfRange { value: x0.max(y0) });
        }
        Ok(())
    }
}

/// Encoder output: always exactly 512 rows; `valid_len` counts the non-PAD
/// prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentFeatures {
    pub features: Tensor,
    pub valid_len: usize,
}

/// The feature contract the fusion layer accepts: a fixed 512-row feature
/// matrix of any width. Anything that implements this plugs into the adapter.
pub trait DocumentEncoder {
    fn feature_width(&self) -> usize;

    /// Builds the feature graph for one document on the caller's tape.
    fn encode_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        doc: &Document,
    ) -> Result<(Var, usize), EncoderError>;
}

#[derive(Debug, Clone)]
struct EncParamIds {
    word: ParamId,
    pos: ParamId,
    cls: ParamId,
    pad: ParamId,
    /// x0, y0, x1, y1, width, height bucket tables, in that order.
    coord: [ParamId; 6],
    patch_w: ParamId,
    patch_b: ParamId,
    patch_pos: ParamId,
    blocks: Vec<BlockParams>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayoutEncoder {
    pub cfg: EncoderConfig,
    p: EncParamIds,
}

const COORD_NAMES: [&str; 6] = ["x0", "y0", "x1", "y1", "w", "h"];

impl LayoutEncoder {
    /// Registers all encoder parameters under `encoder.*`.
    pub fn init(
        cfg: EncoderConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.d_enc;
        fn emb(
            params: &mut ParamSet,
            rng: &mut ChaCha8Rng,
            name: String,
            rows: usize,
            d: usize,
        ) -> ParamId {
            params.add(name, normal_tensor(rng, vec![rows, d], INIT_STD))
        }
        let word = emb(params, rng, "encoder.word_emb".into(), cfg.vocab_size, d);
        let pos = emb(params, rng, "encoder.pos_emb".into(), cfg.max_seq, d);
        let cls = emb(params, rng, "encoder.cls_emb".into(), 1, d);
        let pad = emb(params, rng, "encoder.pad_emb".into(), 1, d);
        let coord = COORD_NAMES
            .map(|c| emb(params, rng, format!("encoder.coord.{c}"), cfg.coord_buckets, d));
        let patch_w = params.add(
            "encoder.patch_proj.w",
            normal_tensor(rng, vec![cfg.patch_dim(), d], INIT_STD),
        );
        let patch_b = params.add("encoder.patch_proj.b", Tensor::zeros(vec![d]));
        let patch_pos = emb(params, rng, "encoder.patch_pos".into(), cfg.n_patches(), d);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::init(params, &format!("encoder.block{l}"), d, rng))
            .collect();
        let lnf_gain = params.add(
            "encoder.ln_f.gain",
            Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
        );
        let lnf_bias = params.add("encoder.ln_f.bias", Tensor::zeros(vec![d]));
        Ok(LayoutEncoder {
            cfg,
            p: EncParamIds {
                word,
                pos,
                cls,
                pad,
                coord,
                patch_w,
                patch_b,
                patch_pos,
                blocks,
                lnf_gain,
                lnf_bias,
            },
        })
    }

    /// Byte tokens with inherited boxes, truncated from the tail to the text
    /// budget. Patches are never dropped, only text.
    pub fn tokenize(&self, doc: &Document) -> Result<Vec<LayoutToken>, EncoderError> {
        let mut tokens = Vec::new();
        'words: for word in &doc.words {
            let bbox = match self.cfg.modality {
                Modality::Full => normalize_box(word.box_px, doc.page_size)?,
                _ => [0; 4],
            };
            for id in ByteCodec::encode(&word.text) {
                if tokens.len() == self.cfg.text_budget() {
                    break 'words;
                }
                tokens.push(LayoutToken { token_id: id, bbox });
            }
        }
        Ok(tokens)
    }

    /// Sum of word, 1D position, and the six box bucket embeddings, as a
    /// 1 x d_enc graph node.
    pub fn embed_layout_token(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        token: &LayoutToken,
        position: usize,
    ) -> Result<Var, EncoderError> {
        token.validate()?;
        let gather1 = |tape: &mut Tape, table: ParamId, id: usize| -> Result<Var, TensorError> {
            tape.gather_rows(bind.var(table), vec![id].into())
        };
        let mut acc = gather1(tape, self.p.word, token.token_id)?;
        if self.cfg.modality == Modality::VisionOnly {
            acc = tape.scale(acc, 0.0);
        }
        let pos = gather1(tape, self.p.pos, position)?;
        acc = tape.add(acc, pos)?;
        let buckets = [
            token.bbox[0],
            token.bbox[1],
            token.bbox[2],
            token.bbox[3],
            token.width(),
            token.height(),
        ];
        for (table, bucket) in self.p.coord.iter().zip(buckets) {
            let row = gather1(tape, *table, bucket as usize)?;
            acc = tape.add(acc, row)?;
        }
        Ok(acc)
    }

    /// Splits the raster into `patch_grid^2` flattened patches, row-major.
    pub fn patch_matrix(&self, image: &GrayImage) -> Result<Tensor, EncoderError> {
        let g = self.cfg.patch_grid;
        let (h, w) = (image.h, image.w);
        if h == 0 || w == 0 || h % g != 0 || w % g != 0 || (h / g) * (w / g) != self.cfg.patch_dim()
        {
            return Err(EncoderError::BadPatchSplit {
                h,
                w,
                grid: g,
                expected: self.cfg.patch_dim(),
            });
        }
        let (ph, pw) = (h / g, w / g);
        let mut data = Vec::with_capacity(g * g * ph * pw);
        for pr in 0..g {
            for pc in 0..g {
                for y in 0..ph {
                    for x in 0..pw {
                        data.push(image.pixels[(pr * ph + y) * w + (pc * pw + x)]);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![g * g, ph * pw], data).expect("patch arithmetic"))
    }

    /// Patch content projections plus the learned patch-position embedding.
    pub fn patchify(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        image: &GrayImage,
    ) -> Result<Var, EncoderError> {
        let pixels = self.patch_matrix(image)?;
        let content = if self.cfg.modality == Modality::TextOnly {
            Tensor::zeros(pixels.shape().to_vec())
        } else {
            pixels
        };
        let leaf = tape.leaf(&content);
        let proj = tape.matmul(leaf, bind.var(self.p.patch_w))?;
        let proj = tape.add_row(proj, bind.var(self.p.patch_b))?;
        Ok(tape.add(proj, bind.var(self.p.patch_pos))?)
    }

    /// Assembles the full 512-row input embedding matrix:
    /// `[CLS] ++ text tokens ++ patch tokens ++ PAD...`, every row carrying
    /// its 1D position embedding.
    pub fn build_input(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        doc: &Document,
    ) -> Result<(Var, usize), EncoderError> {
        let tokens = self.tokenize(doc)?;
        let n_text = tokens.len();
        let valid_len = 1 + n_text + self.cfg.n_patches();
        let n_pad = self.cfg.max_seq - valid_len;

        let mut parts = Vec::with_capacity(4);
        parts.push(bind.var(self.p.cls));
        if n_text > 0 {
            let ids: Rc<[usize]> = tokens.iter().map(|t| t.token_id).collect();
            let mut text = tape.gather_rows(bind.var(self.p.word), ids)?;
            if self.cfg.modality == Modality::VisionOnly {
                text = tape.scale(text, 0.0);
            }
            for (ci, table) in self.p.coord.iter().enumerate() {
                let buckets: Rc<[usize]> = tokens
                    .iter()
                    .map(|t| {
                        let b = [
                            t.bbox[0],
                            t.bbox[1],
                            t.bbox[2],
                            t.bbox[3],
                            t.width(),
                            t.height(),
                        ];
                        b[ci] as usize
                    })
                    .collect();
                let rows = tape.gather_rows(bind.var(*table), buckets)?;
                text = tape.add(text, rows)?;
            }
            parts.push(text);
        }
        let raster = doc.raster(self.cfg.image_size);
        parts.push(self.patchify(tape, bind, &raster)?);
        if n_pad > 0 {
            let pad_ids: Rc<[usize]> = vec![0; n_pad].into();
            parts.push(tape.gather_rows(bind.var(self.p.pad), pad_ids)?);
        }
        let content = tape.concat_rows(&parts)?;
        let all_pos: Rc<[usize]> = (0..self.cfg.max_seq).collect();
        let pos = tape.gather_rows(bind.var(self.p.pos), all_pos)?;
        let x = tape.add(content, pos)?;
        Ok((x, valid_len))
    }

    /// Runs the block stack with padding keys masked, then the final norm.
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        valid_len: usize,
    ) -> Result<Var, EncoderError> {
        let t = tape.shape(x)[0];
        let mask = build_mask(t, AttnMask::KeyPadding { valid_len });
        let mut h = x;
        for block in &self.p.blocks {
            h = block_forward(tape, h, block, bind, self.cfg.n_heads, &mask)?;
        }
        Ok(tape.layer_norm(h, bind.var(self.p.lnf_gain), bind.var(self.p.lnf_bias), LN_EPS)?)
    }

    /// Convenience inference entry point on a private tape.
    pub fn encode(
        &self,
        params: &ParamSet,
        doc: &Document,
    ) -> Result<DocumentFeatures, EncoderError> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(params);
        bind.bind_prefix(&mut tape, params, "encoder.");
        let (var, valid_len) = self.encode_on(&mut tape, &bind, doc)?;
        Ok(DocumentFeatures {
            features: tape.to_tensor(var),
            valid_len,
        })
    }
}

impl DocumentEncoder for LayoutEncoder {
    fn feature_width(&self) -> usize {
        self.cfg.d_enc
    }

    fn encode_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        doc: &Document,
    ) -> Result<(Var, usize), EncoderError> {
        let (x, valid_len) = self.build_input(tape, bind, doc)?;
        let h = self.run_blocks(tape, bind, x, valid_len)?;
        Ok((h, valid_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotations, Word};
    use rand::SeedableRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_enc: 16,
            n_layers: 1,
            n_heads: 2,
            patch_grid: 2,
            image_size: 8,
            ..EncoderConfig::default()
        }
    }

    fn make(cfg: EncoderConfig) -> (LayoutEncoder, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let enc = LayoutEncoder::init(cfg, &mut params, &mut rng).unwrap();
        (enc, params)
    }

    fn doc(words: &[(&str, [f64; 4])]) -> Document {
        Document {
            id: "t".into(),
            page_size: (100.0, 100.0),
            words: words
                .iter()
                .map(|(t, b)| Word {
                    text: t.to_string(),
                    box_px: *b,
                })
                .collect(),
            image: None,
            annotations: Annotations::default(),
        }
    }

    #[test]
    fn config_validation_pins_feature_len() {
        let bad = EncoderConfig {
            max_seq: 256,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn identical_tokens_embed_identically() {
        let (enc, params) = make(tiny_cfg());
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let tok = LayoutToken {
            token_id: 65,
            bbox: [10, 20, 30, 40],
        };
        let a = enc.embed_layout_token(&mut tape, &bind, &tok, 5).unwrap();
        let b = enc.embed_layout_token(&mut tape, &bind, &tok, 5).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn box_change_shifts_embedding_by_the_bucket_rows() {
        // changing x0 changes the x0 bucket and, because width is derived,
        // the width bucket; the difference is exactly those four table rows
        let (enc, params) = make(tiny_cfg());
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let a = enc
            .embed_layout_token(
                &mut tape,
                &bind,
                &LayoutToken { token_id: 7, bbox: [100, 20, 300, 40] },
                3,
            )
            .unwrap();
        let b = enc
            .embed_layout_token(
                &mut tape,
                &bind,
                &LayoutToken { token_id: 7, bbox: [200, 20, 300, 40] },
                3,
            )
            .unwrap();
        let x0_table = params.get(params.find("encoder.coord.x0").unwrap()).tensor.clone();
        let w_table = params.get(params.find("encoder.coord.w").unwrap()).tensor.clone();
        for j in 0..enc.cfg.d_enc {
            let expected = (x0_table.row(100)[j] - x0_table.row(200)[j])
                + (w_table.row(200)[j] - w_table.row(100)[j]);
            let got = tape.value(a)[j] - tape.value(b)[j];
            assert!((expected - got).abs() < 1e-12);
        }
    }

    #[test]
    fn full_page_box_uses_the_extreme_buckets() {
        let (enc, params) = make(tiny_cfg());
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let tok = LayoutToken { token_id: 0, bbox: [0, 0, 1000, 1000] };
        assert_eq!(tok.width(), 1000);
        assert_eq!(tok.height(), 1000);
        assert!(enc.embed_layout_token(&mut tape, &bind, &tok, 0).is_ok());

        let bad = LayoutToken { token_id: 0, bbox: [0, 0, 1001, 10] };
        assert!(matches!(
            enc.embed_layout_token(&mut tape, &bind, &bad, 0),
            Err(EncoderError::CoordinateOutOfRange { value: 1001 })
        ));
    }

    #[test]
    fn patch_split_arithmetic() {
        let cfg = EncoderConfig {
            patch_grid: 4,
            image_size: 8,
            d_enc: 16,
            n_layers: 1,
            n_heads: 2,
            ..EncoderConfig::default()
        };
        let (enc, _params) = make(cfg);
        // 8x8 image with a 4x4 grid: 16 patches of 2x2
        let img = GrayImage {
            h: 8,
            w: 8,
            pixels: (0..64).map(|i| i as f64).collect(),
        };
        let m = enc.patch_matrix(&img).unwrap();
        assert_eq!(m.shape(), &[16, 4]);
        assert_eq!(m.row(0), &[0.0, 1.0, 8.0, 9.0]);
        assert_eq!(m.row(5), &[18.0, 19.0, 26.0, 27.0]);

        let odd = GrayImage::filled(6, 8, 0.0);
        assert!(matches!(
            enc.patch_matrix(&odd),
            Err(EncoderError::BadPatchSplit { .. })
        ));
    }

    #[test]
    fn zero_image_patches_collapse_to_bias_plus_position() {
        let (enc, params) = make(tiny_cfg());
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let img = GrayImage::filled(8, 8, 0.0);
        let p = enc.patchify(&mut tape, &bind, &img).unwrap();
        let bias = params.get(params.find("encoder.patch_proj.b").unwrap()).tensor.clone();
        let pos = params.get(params.find("encoder.patch_pos").unwrap()).tensor.clone();
        for r in 0..enc.cfg.n_patches() {
            for j in 0..enc.cfg.d_enc {
                let expected = bias.data()[j] + pos.row(r)[j];
                assert!((tape.value(p)[r * enc.cfg.d_enc + j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn permuting_patches_permutes_content_projections() {
        let (enc, params) = make(tiny_cfg());
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let mut img = GrayImage::filled(8, 8, 0.3);
        // make patch 0 distinctive
        img.pixels[0] = 1.0;
        let a = enc.patch_matrix(&img).unwrap();
        // swap patches 0 and 3 at the pixel level
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                swapped.pixels.swap(y * 8 + x, y * 8 + (4 + x));
            }
        }
        let b = enc.patch_matrix(&swapped).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        let _ = (bind, tape);
    }

    #[test]
    fn empty_document_has_cls_plus_patches() {
        let (enc, params) = make(tiny_cfg());
        let d = doc(&[]);
        let f = enc.encode(&params, &d).unwrap();
        assert_eq!(f.valid_len, 1 + enc.cfg.n_patches());
        assert_eq!(f.features.shape(), &[512, 16]);
    }

    #[test]
    fn long_document_truncates_text_before_patches() {
        let (enc, params) = make(tiny_cfg());
        let words: Vec<(String, [f64; 4])> = (0..600)
            .map(|i| (format!("w{i}"), [0.0, 0.0, 10.0, 10.0]))
            .collect();
        let refs: Vec<(&str, [f64; 4])> =
            words.iter().map(|(t, b)| (t.as_str(), *b)).collect();
        let d = doc(&refs);
        let f = enc.encode(&params, &d).unwrap();
        assert_eq!(f.valid_len, 512);
        let tokens = enc.tokenize(&d).unwrap();
        assert_eq!(tokens.len(), enc.cfg.text_budget());
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, params) = make(tiny_cfg());
        let d = doc(&[("hello", [5.0, 5.0, 40.0, 12.0]), ("x", [50.0, 50.0, 60.0, 60.0])]);
        let a = enc.encode(&params, &d).unwrap();
        let b = enc.encode(&params, &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_sensitivity_box_moves_change_features() {
        let (enc, params) = make(tiny_cfg());
        let a = enc
            .encode(&params, &doc(&[("hi", [5.0, 5.0, 20.0, 12.0])]))
            .unwrap();
        let b = enc
            .encode(&params, &doc(&[("hi", [60.0, 70.0, 90.0, 90.0])]))
            .unwrap();
        assert_ne!(a.features, b.features);
    }

    #[test]
    fn pad_positions_cannot_influence_valid_outputs() {
        let (enc, params) = make(tiny_cfg());
        let d = doc(&[("ab", [5.0, 5.0, 20.0, 12.0])]);
        let run = |perturb: bool| {
            let mut tape = Tape::new();
            let bind = Binding::bind_all(&mut tape, &params);
            let (x, valid_len) = enc.build_input(&mut tape, &bind, &d).unwrap();
            let x = if perturb {
                // push a spike into a PAD row, past the valid prefix
                let d_enc = enc.cfg.d_enc;
                let mut spike = vec![0.0; 512 * d_enc];
                spike[(valid_len + 3) * d_enc + 1] = 1000.0;
                let s = tape.leaf_owned(vec![512, d_enc], spike).unwrap();
                tape.add(x, s).unwrap()
            } else {
                x
            };
            let h = enc.run_blocks(&mut tape, &bind, x, valid_len).unwrap();
            (tape.value(h).to_vec(), valid_len)
        };
        let (base, valid_len) = run(false);
        let (spiked, _) = run(true);
        let d_enc = enc.cfg.d_enc;
        for r in 0..valid_len {
            for j in 0..d_enc {
                let delta = (base[r * d_enc + j] - spiked[r * d_enc + j]).abs();
                assert!(delta < 1e-9, "row {r} moved by {delta}");
            }
        }
    }

    #[test]
    fn gradients_reach_every_embedding_table_in_use() {
        let (enc, mut params) = make(tiny_cfg());
        let d = doc(&[("ab", [5.0, 5.0, 20.0, 12.0])]);
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &params);
        let (h, _) = enc.encode_on(&mut tape, &bind, &d).unwrap();
        let loss = tape.sum(h);
        tape.backward(loss).unwrap();
        bind.accumulate_grads(&tape, &mut params);
        for name in [
            "encoder.word_emb",
            "encoder.pos_emb",
            "encoder.cls_emb",
            "encoder.pad_emb",
            "encoder.coord.x0",
            "encoder.coord.h",
            "encoder.patch_proj.w",
            "encoder.patch_pos",
        ] {
            let p = params.get(params.find(name).unwrap());
            let g = p.grad.as_ref().expect("grad allocated");
            assert!(g.iter().any(|&v| v != 0.0), "no gradient into {name}");
        }
    }

    #[test]
    fn modality_variants_change_the_input_channels() {
        let d = doc(&[("hi", [5.0, 5.0, 20.0, 12.0])]);
        let (full, p_full) = make(tiny_cfg());
        let (text, p_text) = make(EncoderConfig {
            modality: Modality::TextOnly,
            ..tiny_cfg()
        });
        let (vision, p_vision) = make(EncoderConfig {
            modality: Modality::VisionOnly,
            ..tiny_cfg()
        });
        // same seed, so identical tables; the channel wiring makes the difference
        let f = full.encode(&p_full, &d).unwrap();
        let t = text.encode(&p_text, &d).unwrap();
        let v = vision.encode(&p_vision, &d).unwrap();
        assert_eq!(f.valid_len, t.valid_len);
        assert_ne!(f.features, t.features);
        assert_ne!(f.features, v.features);
        // moving the box leaves text-only features unchanged
        let moved = doc(&[("hi", [60.0, 60.0, 80.0, 80.0])]);
        let t2 = text.encode(&p_text, &moved).unwrap();
        assert_eq!(t.features, t2.features);
    }
}
