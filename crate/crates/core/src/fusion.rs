//! Mutually attentive fusion.
//!
//! One cross-attention exchange shares a single score matrix between the
//! two directions: `A = (V W_q)(L W_k)ᵀ / √d_h` (per head). Vision reads
//! language through `softmax_rows(A)` and language reads vision through
//! `softmax_rows(Aᵀ)`; each stream keeps a residual path. A stack runs the
//! exchange, refines each stream with its own transformer block, exchanges
//! again, and mean-pools both streams into one feature vector.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{check_heads, TransformerBlock};
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Projections of one cross-attention exchange, all `d×d`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value_vision: ParamId,
    pub value_language: ParamId,
    pub proj_vision: ParamId,
    pub proj_language: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl CrossAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, heads: usize) -> Result<Self> {
        check_heads(width, heads)?;
        let mut s = b.scoped(name);
        let init = Init::Xavier {
            fan_in: width,
            fan_out: width,
        };
        Ok(Self {
            query: s.param("w_q", &[width, width], init)?,
            key: s.param("w_k", &[width, width], init)?,
            value_vision: s.param("w_v_vision", &[width, width], init)?,
            value_language: s.param("w_v_language", &[width, width], init)?,
            proj_vision: s.param("w_p_vision", &[width, width], init)?,
            proj_language: s.param("w_p_language", &[width, width], init)?,
            heads,
            width,
        })
    }

    /// Returns `(V_f, L_f)`. `lang_valid` flags non-padding language tokens;
    /// hidden tokens get zero weight when vision attends to language.
    pub fn forward(&self, tape: &mut Tape, vision: Var, language: Var, lang_valid: &[bool]) -> Result<(Var, Var)> {
        let dh = check_heads(self.width, self.heads)?;
        let (vs, ls) = (tape.shape(vision).to_vec(), tape.shape(language).to_vec());
        if vs.len() != 2 || ls.len() != 2 || vs[1] != self.width || ls[1] != self.width {
            return Err(shape_err("x_mha", &vs, &ls));
        }
        if lang_valid.len() != ls[0] {
            return Err(shape_err("x_mha mask", &ls, &[lang_valid.len()]));
        }
        let wq = tape.param(self.query);
        let wk = tape.param(self.key);
        let wvv = tape.param(self.value_vision);
        let wvl = tape.param(self.value_language);
        let wpv = tape.param(self.proj_vision);
        let wpl = tape.param(self.proj_language);

        let q = tape.matmul(vision, wq)?;
        let k = tape.matmul(language, wk)?;
        let v_vis = tape.matmul(vision, wvv)?;
        let v_lang = tape.matmul(language, wvl)?;

        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut to_vision = Vec::with_capacity(self.heads);
        let mut to_language = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let pick = |tape: &mut Tape, x: Var| -> Result<Var> {
                if self.heads == 1 {
                    Ok(x)
                } else {
                    tape.slice_cols(x, h * dh, dh)
                }
            };
            let qh = pick(tape, q)?;
            let kh = pick(tape, k)?;
            let vvh = pick(tape, v_vis)?;
            let vlh = pick(tape, v_lang)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let p_vis = tape.masked_softmax_rows(scores, Some(lang_valid))?;
            to_vision.push(tape.matmul(p_vis, vlh)?);
            let scores_t = tape.transpose(scores)?;
            let p_lang = tape.softmax_rows(scores_t)?;
            to_language.push(tape.matmul(p_lang, vvh)?);
        }
        let (star_l, star_v) = if self.heads == 1 {
            (to_vision[0], to_language[0])
        } else {
            (tape.concat_cols(&to_vision)?, tape.concat_cols(&to_language)?)
        };
        let upd_v = tape.matmul(star_l, wpl)?;
        let v_f = tape.add(upd_v, vision)?;
        let upd_l = tape.matmul(star_v, wpv)?;
        let l_f = tape.add(upd_l, language)?;
        Ok((v_f, l_f))
    }
}

/// Value-level cross-attention exchange on a private tape.
pub fn x_mha(
    store: &ParamStore,
    params: &CrossAttention,
    vision: &Tensor,
    language: &Tensor,
    lang_valid: &[bool],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new(store);
    let v = tape.constant(vision.clone())?;
    let l = tape.constant(language.clone())?;
    let (vf, lf) = params.forward(&mut tape, v, l, lang_valid)?;
    Ok((tape.value(vf).clone(), tape.value(lf).clone()))
}

#[derive(Clone, Debug)]
pub struct FusionStack {
    /// One exchange per stage.
    pub exchanges: Vec<CrossAttention>,
    /// Vision refinement blocks between consecutive exchanges.
    pub vision_blocks: Vec<TransformerBlock>,
    /// Language refinement blocks between consecutive exchanges.
    pub language_blocks: Vec<TransformerBlock>,
    pub width: usize,
}

/// Fused output plus the intermediates of the first and last exchanges.
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub fused: Var,
    pub vision_first: Var,
    pub language_first: Var,
    pub vision_last: Var,
    pub language_last: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub fused: Tensor,
    pub vision_first: Tensor,
    pub language_first: Tensor,
    pub vision_last: Tensor,
    pub language_last: Tensor,
}

impl FusionStack {
    pub fn new(b: &mut ParamBuilder, width: usize, heads: usize, mlp_hidden: usize, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("fusion needs at least one stage".into()));
        }
        let mut s = b.scoped("fusion");
        let mut exchanges = Vec::with_capacity(stages);
        let mut vision_blocks = Vec::new();
        let mut language_blocks = Vec::new();
        for i in 0..stages {
            if i > 0 {
                vision_blocks.push(TransformerBlock::new(&mut s, &format!("vision_block{i}"), width, heads, mlp_hidden)?);
                language_blocks.push(TransformerBlock::new(
                    &mut s,
                    &format!("language_block{i}"),
                    width,
                    heads,
                    mlp_hidden,
                )?);
            }
            exchanges.push(CrossAttention::new(&mut s, &format!("stage{i}"), width, heads)?);
        }
        Ok(Self {
            exchanges,
            vision_blocks,
            language_blocks,
            width,
        })
    }

    pub fn stages(&self) -> usize {
        self.exchanges.len()
    }

    /// `F = [mean_rows(V_last) , masked mean_rows(L_last)]` as a `1×2d` row.
    pub fn forward(&self, tape: &mut Tape, vision: Var, language: Var, lang_valid: &[bool]) -> Result<FusedVars> {
        let (v1, l1) = self.exchanges[0].forward(tape, vision, language, lang_valid)?;
        let (mut v, mut l) = (v1, l1);
        for i in 1..self.exchanges.len() {
            let vr = self.vision_blocks[i - 1].forward(tape, v, None)?;
            let lr = self.language_blocks[i - 1].forward(tape, l, Some(lang_valid))?;
            let (vn, ln) = self.exchanges[i].forward(tape, vr, lr, lang_valid)?;
            v = vn;
            l = ln;
        }
        let pv = tape.mean_rows(v, None)?;
        let pl = tape.mean_rows(l, Some(lang_valid))?;
        let fused = tape.concat_cols(&[pv, pl])?;
        Ok(FusedVars {
            fused,
            vision_first: v1,
            language_first: l1,
            vision_last: v,
            language_last: l,
        })
    }

    pub fn fuse(&self, store: &ParamStore, vision: &Tensor, language: &Tensor, lang_valid: &[bool]) -> Result<FusedFeature> {
        let mut tape = Tape::new(store);
        let v = tape.constant(vision.clone())?;
        let l = tape.constant(language.clone())?;
        let out = self.forward(&mut tape, v, l, lang_valid)?;
        Ok(FusedFeature {
            fused: tape.value(out.fused).reshape(alloc::vec![2 * self.width])?,
            vision_first: tape.value(out.vision_first).clone(),
            language_first: tape.value(out.language_first).clone(),
            vision_last: tape.value(out.vision_last).clone(),
            language_last: tape.value(out.language_last).clone(),
        })
    }
}
