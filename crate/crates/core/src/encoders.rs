//! Observation types, box-mask construction, the patch encoders for RGB
//! frames and class masks, and the word-level text encoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// `height × width × 3` image, row-major, 0–255 per channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.height * self.width * 3 {
            return Err(Error::Validation(format!(
                "rgb image {}x{} carries {} values",
                self.height,
                self.width,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Single-channel class image: 0 is background, `k > 0` is object class `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.data.len() != self.height * self.width {
            return Err(Error::Validation(format!(
                "mask {}x{} carries {} values",
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if let Some(&v) = self.data.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::Validation(format!(
                "mask value {v} exceeds {num_classes} object classes"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub rgb: RgbImage,
    pub bbox_mask: ClassMask,
}

impl Observation {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.rgb.validate()?;
        self.bbox_mask.validate(num_classes)?;
        if (self.rgb.height, self.rgb.width) != (self.bbox_mask.height, self.bbox_mask.width) {
            return Err(Error::Validation(format!(
                "rgb is {}x{} but mask is {}x{}",
                self.rgb.height, self.rgb.width, self.bbox_mask.height, self.bbox_mask.width
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Paints each box's class id into a zero image, in list order, so later
/// boxes overwrite earlier ones where they overlap.
pub fn build_bbox_mask(boxes: &[BoundingBox], height: usize, width: usize) -> Result<ClassMask> {
    let mut mask = ClassMask::new(height, width);
    for b in boxes {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= width || b.y1 >= height {
            return Err(Error::Validation(format!(
                "box {b:?} is inverted or outside a {height}x{width} image"
            )));
        }
        for y in b.y0..=b.y1 {
            mask.data[y * width + b.x0..=y * width + b.x1].fill(b.class_id);
        }
    }
    Ok(mask)
}

/// Splits an `H×W×C` float image into flattened `patch×patch×C` rows,
/// patches in row-major grid order.
pub fn patchify(pixels: &[f64], height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let feat = patch * patch * channels;
    let mut out = Vec::with_capacity(gh * gw * feat);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * width + gx * patch) * channels;
                out.extend_from_slice(&pixels[start..start + patch * channels]);
            }
        }
    }
    Tensor::new(vec![gh * gw, feat], out)
}

/// RGB values scaled to `[0, 1]` and cut into patches.
pub fn rgb_patches(img: &RgbImage, patch: usize) -> Result<Tensor> {
    img.validate()?;
    let px: Vec<f64> = img.data.iter().map(|&v| v as f64 / 255.0).collect();
    patchify(&px, img.height, img.width, 3, patch)
}

/// Class ids scaled by `1/num_classes` into `[0, 1]` and cut into patches.
pub fn bbox_patches(mask: &ClassMask, patch: usize, num_classes: usize) -> Result<Tensor> {
    mask.validate(num_classes)?;
    let scale = 1.0 / num_classes.max(1) as f64;
    let px: Vec<f64> = mask.data.iter().map(|&v| v as f64 * scale).collect();
    patchify(&px, mask.height, mask.width, 1, patch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualEncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

impl VisualEncoderConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }
}

/// Patch embedding + CLS token + learned positions + pre-norm blocks; the
/// normalized CLS output is the frame embedding.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl VisualEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, config: VisualEncoderConfig) -> Result<Self> {
        if config.patch == 0 || config.image_size % config.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                config.image_size, config.patch
            )));
        }
        let mut s = b.scoped(name);
        let feat = config.patch * config.patch * config.channels;
        let d = config.width;
        let patch_proj = Linear::new(&mut s, "patch_proj", feat, d, true)?;
        let cls = s.param("cls", &[1, d], Init::Uniform(0.02))?;
        let positions = s.param("positions", &[config.num_patches() + 1, d], Init::Uniform(0.02))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(TransformerBlock::new(
                &mut s,
                &format!("block{i}"),
                d,
                config.heads,
                config.mlp_hidden,
            )?);
        }
        let final_norm = LayerNorm::new(&mut s, "final_norm", d)?;
        Ok(Self {
            config,
            patch_proj,
            cls,
            positions,
            blocks,
            final_norm,
        })
    }

    /// Embeds a `patches × features` input into a `1×d` vector.
    pub fn forward(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let expect = [
            self.config.num_patches(),
            self.config.patch * self.config.patch * self.config.channels,
        ];
        if tape.shape(patches) != expect {
            return Err(crate::error::shape_err("visual_encoder", tape.shape(patches), &expect));
        }
        let tokens = self.patch_proj.forward(tape, patches)?;
        let cls = tape.param(self.cls);
        let seq = tape.concat_rows(&[cls, tokens])?;
        let pos = tape.param(self.positions);
        let mut x = tape.add(seq, pos)?;
        for blk in &self.blocks {
            x = blk.forward(tape, x, None)?;
        }
        let cls_out = tape.slice_rows(x, 0, 1)?;
        self.final_norm.forward(tape, cls_out)
    }

    /// Value-level helper: embeds one patch tensor on a private tape.
    pub fn embed(&self, store: &crate::params::ParamStore, patches: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let p = tape.constant(patches)?;
        let e = self.forward(&mut tape, p)?;
        tape.value(e).reshape(vec![self.config.width])
    }
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";

/// Lowercases and splits on whitespace and punctuation, dropping the
/// punctuation itself.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Word vocabulary; ids 0–2 are `[PAD]`, `[UNK]`, `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl TokenVocab {
    /// Reserved tokens followed by the distinct lowercased `words` in first
    /// occurrence order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN] {
            v.insert(t.to_string());
        }
        for w in words {
            for piece in split_words(w.as_ref()) {
                v.insert(piece);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its token list (line order = id).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN || tokens[2] != CLS_TOKEN {
            return Err(Error::Validation("vocabulary must start with [PAD], [UNK], [CLS]".into()));
        }
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(Error::Validation(format!("duplicate vocabulary token {t}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    fn insert(&mut self, t: String) {
        if !self.index.contains_key(&t) {
            self.index.insert(t.clone(), self.tokens.len() as u32);
            self.tokens.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[CLS]` + word ids, truncated to `max_len` and padded with `[PAD]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len);
        if max_len == 0 {
            return ids;
        }
        ids.push(CLS);
        for w in split_words(text).into_iter().take(max_len - 1) {
            ids.push(self.id(&w));
        }
        ids.resize(max_len, PAD);
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

/// Token + position embeddings, embedding norm, pre-norm blocks with
/// padding hidden from attention, final norm.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, config: TextEncoderConfig) -> Result<Self> {
        let mut s = b.scoped(name);
        let d = config.width;
        let token_embedding = s.param("token_embedding", &[config.vocab_size, d], Init::Uniform(0.1))?;
        let positions = s.param("positions", &[config.max_len, d], Init::Uniform(0.1))?;
        let embed_norm = LayerNorm::new(&mut s, "embed_norm", d)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(TransformerBlock::new(
                &mut s,
                &format!("block{i}"),
                d,
                config.heads,
                config.mlp_hidden,
            )?);
        }
        let final_norm = LayerNorm::new(&mut s, "final_norm", d)?;
        Ok(Self {
            config,
            token_embedding,
            positions,
            embed_norm,
            blocks,
            final_norm,
        })
    }

    /// Encodes up to `max_len` ids into a `len × d` feature sequence.
    pub fn forward(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::Validation(format!(
                "token sequence of length {} (max {})",
                ids.len(),
                self.config.max_len
            )));
        }
        let valid: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let table = tape.param(self.token_embedding);
        let tok = tape.embedding(table, ids)?;
        let pos_all = tape.param(self.positions);
        let pos = if ids.len() == self.config.max_len {
            pos_all
        } else {
            tape.slice_rows(pos_all, 0, ids.len())?
        };
        let x = tape.add(tok, pos)?;
        let mut x = self.embed_norm.forward(tape, x)?;
        for blk in &self.blocks {
            x = blk.forward(tape, x, Some(&valid))?;
        }
        self.final_norm.forward(tape, x)
    }

    pub fn embed(&self, store: &crate::params::ParamStore, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let e = self.forward(&mut tape, ids)?;
        Ok(tape.value(e).clone())
    }
}

/// Positions that are not `[PAD]`.
pub fn token_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_box_list_gives_zero_mask() {
        let m = build_bbox_mask(&[], 4, 4).unwrap();
        assert!(m.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_box_paints_four_pixels() {
        let b = BoundingBox {
            class_id: 3,
            x0: 1,
            y0: 1,
            x1: 2,
            y1: 2,
        };
        let m = build_bbox_mask(&[b], 4, 4).unwrap();
        assert_eq!(m.data.iter().filter(|&&v| v == 3).count(), 4);
        assert_eq!(m.data.iter().filter(|&&v| v != 0).count(), 4);
        assert_eq!(m.get(1, 1), 3);
        assert_eq!(m.get(2, 2), 3);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn later_boxes_overwrite_earlier_ones() {
        let boxes = [
            BoundingBox { class_id: 2, x0: 0, y0: 0, x1: 2, y1: 2 },
            BoundingBox { class_id: 5, x0: 1, y0: 1, x1: 3, y1: 3 },
        ];
        let m = build_bbox_mask(&boxes, 4, 4).unwrap();
        // Pixel-wise paint oracle.
        let mut expect = [[0u8; 4]; 4];
        for b in &boxes {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    expect[y][x] = b.class_id;
                }
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(y, x), expect[y][x]);
            }
        }
        assert_eq!(m.get(1, 1), 5);
        assert_eq!(m.get(2, 2), 5);
    }

    #[test]
    fn bad_boxes_are_rejected() {
        let inverted = BoundingBox { class_id: 1, x0: 2, y0: 0, x1: 1, y1: 0 };
        let outside = BoundingBox { class_id: 1, x0: 0, y0: 0, x1: 4, y1: 0 };
        assert!(build_bbox_mask(&[inverted], 4, 4).is_err());
        assert!(build_bbox_mask(&[outside], 4, 4).is_err());
    }

    #[test]
    fn patchify_requires_divisible_dimensions() {
        assert!(matches!(patchify(&[0.0; 30], 5, 6, 1, 2), Err(Error::Config(_))));
        let p = patchify(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), 4, 4, 1, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn mask_values_above_class_count_are_rejected() {
        let mut m = ClassMask::new(8, 8);
        m.data[3] = 9;
        assert!(bbox_patches(&m, 8, 8).is_err());
        assert!(bbox_patches(&m, 8, 9).is_ok());
    }

    fn visual(seed: u64, channels: usize) -> (ParamStore, VisualEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            VisualEncoder::new(
                &mut b,
                "enc",
                VisualEncoderConfig {
                    image_size: 32,
                    patch: 8,
                    channels,
                    width: 16,
                    heads: 4,
                    depth: 2,
                    mlp_hidden: 32,
                },
            )
            .unwrap()
        };
        (store, enc)
    }

    fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
        RgbImage {
            height: 32,
            width: 32,
            data: (0..32 * 32 * 3).map(|_| rng.gen()).collect(),
        }
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let (mut store, enc) = visual(0, 3);
        for (id, name, _) in store.clone().iter() {
            if !name.ends_with("gain") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = enc.embed(&store, rgb_patches(&random_image(&mut rng), 8).unwrap()).unwrap();
        assert_eq!(e.shape(), &[16]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_patch_change_changes_embedding() {
        let (store, enc) = visual(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng);
        let mut b = a.clone();
        b.set_pixel(20, 5, [0, 0, 0]);
        b.set_pixel(21, 6, [255, 255, 255]);
        let ea = enc.embed(&store, rgb_patches(&a, 8).unwrap()).unwrap();
        let eb = enc.embed(&store, rgb_patches(&b, 8).unwrap()).unwrap();
        assert_eq!(ea.shape(), &[16]);
        assert!(ea.max_abs_diff(&eb) > 1e-9);
    }

    #[test]
    fn class_id_changes_bbox_embedding() {
        let (store, enc) = visual(4, 1);
        let mk = |class| {
            build_bbox_mask(&[BoundingBox { class_id: class, x0: 4, y0: 4, x1: 11, y1: 11 }], 32, 32).unwrap()
        };
        let e2 = enc.embed(&store, bbox_patches(&mk(2), 8, 10).unwrap()).unwrap();
        let e5 = enc.embed(&store, bbox_patches(&mk(5), 8, 10).unwrap()).unwrap();
        assert!(e2.max_abs_diff(&e5) > 1e-9);
        assert_eq!(e2.shape(), &[16]);
    }

    #[test]
    fn wrong_patch_grid_is_a_shape_error() {
        let (store, enc) = visual(0, 3);
        assert!(enc.embed(&store, Tensor::zeros(vec![4, 192])).is_err());
    }

    fn vocab() -> TokenVocab {
        TokenVocab::from_words(["Pickup Pencil", "put the knife in the bowl"])
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let empty = v.tokenize("", 8);
        assert_eq!(empty, vec![CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
        let ids = v.tokenize("Pickup Pencil", 8);
        assert_eq!(&ids[..3], &[CLS, v.id("pickup"), v.id("pencil")]);
        assert!(ids[3..].iter().all(|&t| t == PAD));
        assert_eq!(v.tokenize("zebra!", 3), vec![CLS, UNK, PAD]);

        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let v2 = TokenVocab::from_words(long.iter());
        let ids = v2.tokenize(&long.join(" "), 32);
        assert_eq!(ids.len(), 32);
        assert_eq!(ids[31], v2.id("w30"));
    }

    #[test]
    fn split_words_drops_punctuation() {
        assert_eq!(split_words("Put, the KNIFE."), vec!["put", "the", "knife"]);
    }

    #[test]
    fn vocab_reserved_ids() {
        let v = vocab();
        assert_eq!(&v.tokens()[..3], &[PAD_TOKEN, UNK_TOKEN, CLS_TOKEN]);
        assert_eq!(TokenVocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(TokenVocab::from_tokens(vec!["a".into()]).is_err());
    }

    fn text(seed: u64, vocab_size: usize) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            TextEncoder::new(
                &mut b,
                "text",
                TextEncoderConfig {
                    vocab_size,
                    max_len: 8,
                    width: 16,
                    heads: 4,
                    depth: 2,
                    mlp_hidden: 32,
                },
            )
            .unwrap()
        };
        (store, enc)
    }

    #[test]
    fn text_output_shape_and_vocab_range() {
        let (store, enc) = text(0, 10);
        let out = enc.embed(&store, &[CLS, 5, 6, PAD, PAD, PAD, PAD, PAD]).unwrap();
        assert_eq!(out.shape(), &[8, 16]);
        assert!(matches!(enc.embed(&store, &[CLS, 10]), Err(Error::Validation(_))));
    }

    #[test]
    fn cls_alone_attends_only_to_itself() {
        // With every other key hidden, the CLS output equals the output of
        // a length-one sequence.
        let (store, enc) = text(1, 10);
        let padded = enc.embed(&store, &[CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]).unwrap();
        let alone = enc.embed(&store, &[CLS]).unwrap();
        for j in 0..16 {
            assert!((padded.get2(0, j) - alone.get2(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_padding_leaves_content_positions_alone() {
        let (store, enc) = text(2, 10);
        let short = enc.embed(&store, &[CLS, 4, 7, 5, PAD]).unwrap();
        let long = enc.embed(&store, &[CLS, 4, 7, 5, PAD, PAD, PAD, PAD]).unwrap();
        for i in 0..4 {
            for j in 0..16 {
                assert!((short.get2(i, j) - long.get2(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_tokens_changes_their_outputs() {
        let (store, enc) = text(3, 10);
        let a = enc.embed(&store, &[CLS, 4, 7, PAD]).unwrap();
        let b = enc.embed(&store, &[CLS, 7, 4, PAD]).unwrap();
        // Without positional embeddings, b's row 2 would equal a's row 1.
        for (ia, ib) in [(1, 2), (2, 1)] {
            let diff: f64 = (0..16).map(|j| (a.get2(ia, j) - b.get2(ib, j)).abs()).sum();
            assert!(diff > 1e-6);
        }
        for i in 1..3 {
            let diff: f64 = (0..16).map(|j| (a.get2(i, j) - b.get2(i, j)).abs()).sum();
            assert!(diff > 1e-6);
        }
    }
}
