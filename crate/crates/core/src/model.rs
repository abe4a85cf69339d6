//! The assembled planner: two frame encoders, the text encoder, history
//! integration, the fusion stack and the three heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::ModalityMask;
use crate::encoders::{
    bbox_patches, rgb_patches, token_mask, Observation, TextEncoder, TextEncoderConfig, TokenVocab, VisualEncoder,
    VisualEncoderConfig, PAD,
};
use crate::error::{Error, Result};
use crate::fusion::FusionStack;
use crate::heads::{HeadOutputs, HeadParams, LogitTriple, SubGoal, Vocabularies};
use crate::history::{integrate_linguistic, integrate_visual, integrate_visual_on_tape, render_subgoals, VisualHistory};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Every architecture hyperparameter. Vocabulary sizes come from the
/// vocabularies stored next to the config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub visual_depth: usize,
    pub text_depth: usize,
    pub max_len: usize,
    /// Hidden width of the transformer feed-forward layers.
    pub ff_hidden: usize,
    /// Hidden width of the classifier heads.
    pub head_hidden: usize,
    pub fusion_stages: usize,
    pub history_window: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            width: 64,
            heads: 4,
            visual_depth: 2,
            text_depth: 2,
            max_len: 32,
            ff_hidden: 128,
            head_hidden: 128,
            fusion_stages: 2,
            history_window: 4,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("width", self.width),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("ff_hidden", self.ff_hidden),
            ("head_hidden", self.head_hidden),
            ("fusion_stages", self.fusion_stages),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        crate::nn::check_heads(self.width, self.heads)?;
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for [CLS] and one word".into()));
        }
        Ok(())
    }

    fn visual(&self, channels: usize) -> VisualEncoderConfig {
        VisualEncoderConfig {
            image_size: self.image_size,
            patch: self.patch,
            channels,
            width: self.width,
            heads: self.heads,
            depth: self.visual_depth,
            mlp_hidden: self.ff_hidden,
        }
    }
}

/// Encoder-ready tensors for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePatches {
    pub rgb: Tensor,
    pub bbox: Tensor,
}

/// One episode (or rollout prefix) turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEpisode {
    pub frames: Vec<FramePatches>,
    pub instruction_ids: Vec<u32>,
    /// Token ids of the rendered sub-goal history before each step.
    pub history_ids: Vec<Vec<u32>>,
    /// Ground-truth sub-goals; empty for rollouts.
    pub targets: Vec<SubGoal>,
}

impl PreparedEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Value-level inputs of one step, before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub current_rgb: Tensor,
    pub current_bbox: Tensor,
    pub history: VisualHistory<Tensor>,
    pub instruction: Tensor,
    pub instruction_valid: Vec<bool>,
    pub subgoals: Tensor,
    pub subgoal_valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct PlannerModel {
    pub config: PlannerConfig,
    pub vocabs: Vocabularies,
    pub tokens: TokenVocab,
    pub params: ParamStore,
    pub rgb_encoder: VisualEncoder,
    pub bbox_encoder: VisualEncoder,
    pub text_encoder: TextEncoder,
    pub fusion: FusionStack,
    pub heads: HeadParams,
}

/// Shared per-tape encodings of one episode.
struct EpisodeCache {
    rgb: Vec<Option<Var>>,
    bbox: Vec<Option<Var>>,
    zero: Option<Var>,
    instruction: Option<Var>,
}

impl PlannerModel {
    pub fn new(config: PlannerConfig, vocabs: Vocabularies, tokens: TokenVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let rgb_encoder = VisualEncoder::new(&mut b, "rgb_encoder", config.visual(3))?;
        let bbox_encoder = VisualEncoder::new(&mut b, "bbox_encoder", config.visual(1))?;
        let text_encoder = TextEncoder::new(
            &mut b,
            "text_encoder",
            TextEncoderConfig {
                vocab_size: tokens.len(),
                max_len: config.max_len,
                width: d,
                heads: config.heads,
                depth: config.text_depth,
                mlp_hidden: config.ff_hidden,
            },
        )?;
        let fusion = FusionStack::new(&mut b, d, config.heads, config.ff_hidden, config.fusion_stages)?;
        let heads = HeadParams::new(&mut b, 2 * d, config.head_hidden, &vocabs)?;
        Ok(Self {
            config,
            vocabs,
            tokens,
            params,
            rgb_encoder,
            bbox_encoder,
            text_encoder,
            fusion,
            heads,
        })
    }

    /// Rebuilds a model around stored parameter values. Names and shapes
    /// must match the architecture exactly.
    pub fn from_params(
        config: PlannerConfig,
        vocabs: Vocabularies,
        tokens: TokenVocab,
        values: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocabs, tokens, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            if model.params.id(&name).is_none() {
                return Err(Error::Validation(format!("unknown parameter {name}")));
            }
            model.params.set(&name, value)?;
        }
        Ok(model)
    }

    /// Patches for one observation, after validating its size and classes.
    pub fn frame_patches(&self, obs: &Observation) -> Result<FramePatches> {
        obs.validate(self.vocabs.num_object_classes())?;
        let s = self.config.image_size;
        if obs.rgb.height != s || obs.rgb.width != s {
            return Err(Error::Validation(format!(
                "observation is {}x{}, model expects {s}x{s}",
                obs.rgb.height, obs.rgb.width
            )));
        }
        Ok(FramePatches {
            rgb: rgb_patches(&obs.rgb, self.config.patch)?,
            bbox: bbox_patches(&obs.bbox_mask, self.config.patch, self.vocabs.num_object_classes())?,
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokens.tokenize(text, self.config.max_len)
    }

    /// Turns an instruction, observations and the sub-goals executed so far
    /// into model inputs. `goals` may be shorter than `observations`;
    /// history `n` renders `goals[..n]`.
    pub fn prepare(&self, instruction: &str, observations: &[Observation], goals: &[SubGoal]) -> Result<PreparedEpisode> {
        let frames = observations.iter().map(|o| self.frame_patches(o)).collect::<Result<Vec<_>>>()?;
        let mut history_ids = Vec::with_capacity(frames.len());
        for n in 0..frames.len() {
            let upto = n.min(goals.len());
            history_ids.push(self.tokenize(&render_subgoals(&goals[..upto], &self.vocabs)));
        }
        for g in goals {
            self.vocabs.validate(g)?;
        }
        Ok(PreparedEpisode {
            frames,
            instruction_ids: self.tokenize(instruction),
            history_ids,
            targets: if goals.len() == observations.len() {
                goals.to_vec()
            } else {
                Vec::new()
            },
        })
    }

    fn new_cache(ep: &PreparedEpisode) -> EpisodeCache {
        EpisodeCache {
            rgb: vec![None; ep.len()],
            bbox: vec![None; ep.len()],
            zero: None,
            instruction: None,
        }
    }

    fn zero(&self, tape: &mut Tape, cache: &mut EpisodeCache) -> Result<Var> {
        if let Some(z) = cache.zero {
            return Ok(z);
        }
        let z = tape.constant(Tensor::zeros(vec![1, self.config.width]))?;
        cache.zero = Some(z);
        Ok(z)
    }

    fn rgb_var(&self, tape: &mut Tape, cache: &mut EpisodeCache, ep: &PreparedEpisode, k: usize) -> Result<Var> {
        if let Some(v) = cache.rgb[k] {
            return Ok(v);
        }
        let p = tape.constant(ep.frames[k].rgb.clone())?;
        let v = self.rgb_encoder.forward(tape, p)?;
        cache.rgb[k] = Some(v);
        Ok(v)
    }

    fn bbox_var(&self, tape: &mut Tape, cache: &mut EpisodeCache, ep: &PreparedEpisode, k: usize) -> Result<Var> {
        if let Some(v) = cache.bbox[k] {
            return Ok(v);
        }
        let p = tape.constant(ep.frames[k].bbox.clone())?;
        let v = self.bbox_encoder.forward(tape, p)?;
        cache.bbox[k] = Some(v);
        Ok(v)
    }

    /// Length shared by the instruction and history sequences for step `n`:
    /// trailing positions that are padding in both are dropped. Padding
    /// never reaches the fused feature, so this only saves work.
    fn text_len(ep: &PreparedEpisode, n: usize, use_history: bool) -> usize {
        let used = |ids: &[u32]| ids.iter().rposition(|&t| t != PAD).map_or(1, |p| p + 1);
        let mut len = used(&ep.instruction_ids);
        if use_history {
            len = len.max(used(&ep.history_ids[n]));
        }
        len
    }

    fn step_on_cache(
        &self,
        tape: &mut Tape,
        cache: &mut EpisodeCache,
        ep: &PreparedEpisode,
        n: usize,
        mask: &ModalityMask,
    ) -> Result<HeadOutputs> {
        if !mask.use_instruction {
            return Err(Error::Config("the instruction modality cannot be disabled".into()));
        }
        if n >= ep.len() {
            return Err(Error::Validation(format!("step {n} of a {}-step episode", ep.len())));
        }
        let rgb_now = if mask.use_rgb { self.rgb_var(tape, cache, ep, n)? } else { self.zero(tape, cache)? };
        let bbox_now = if mask.use_bbox { self.bbox_var(tape, cache, ep, n)? } else { self.zero(tape, cache)? };
        let mut history = VisualHistory::new(self.config.history_window);
        if mask.use_rgb_history || mask.use_bbox_history {
            for k in n.saturating_sub(self.config.history_window)..n {
                let o = if mask.use_rgb_history { self.rgb_var(tape, cache, ep, k)? } else { self.zero(tape, cache)? };
                let b = if mask.use_bbox_history { self.bbox_var(tape, cache, ep, k)? } else { self.zero(tape, cache)? };
                history.push(o, b);
            }
        }
        let vision = integrate_visual_on_tape(tape, &history, (rgb_now, bbox_now))?;

        let len = Self::text_len(ep, n, mask.use_subgoal_history);
        let instruction = match cache.instruction {
            Some(v) if tape.shape(v)[0] == len => v,
            _ => {
                let v = self.text_encoder.forward(tape, &ep.instruction_ids[..len])?;
                cache.instruction = Some(v);
                v
            }
        };
        let mut valid = token_mask(&ep.instruction_ids[..len]);
        let language = if mask.use_subgoal_history {
            let ids = &ep.history_ids[n][..len];
            for (v, &t) in valid.iter_mut().zip(ids) {
                *v |= t != PAD;
            }
            let s = self.text_encoder.forward(tape, ids)?;
            tape.add(instruction, s)?
        } else {
            instruction
        };
        let fused = self.fusion.forward(tape, vision, language, &valid)?;
        self.heads.predict_logits(tape, fused.fused)
    }

    /// Head outputs for the given steps of one episode on a shared tape;
    /// frame and instruction encodings are computed once per tape.
    pub fn episode_logits(
        &self,
        tape: &mut Tape,
        ep: &PreparedEpisode,
        steps: &[usize],
        mask: &ModalityMask,
    ) -> Result<Vec<HeadOutputs>> {
        let mut cache = Self::new_cache(ep);
        steps.iter().map(|&n| self.step_on_cache(tape, &mut cache, ep, n, mask)).collect()
    }

    /// Logits for every step of an episode, each conditioned on its prefix.
    pub fn predict_episode(&self, ep: &PreparedEpisode, mask: &ModalityMask) -> Result<Vec<LogitTriple>> {
        let mut tape = Tape::new(&self.params);
        let steps: Vec<usize> = (0..ep.len()).collect();
        let outs = self.episode_logits(&mut tape, ep, &steps, mask)?;
        Ok(outs.iter().map(|o| o.values(&tape)).collect())
    }

    /// Logits for the last step of a (possibly partial) episode.
    pub fn predict_last(&self, ep: &PreparedEpisode, mask: &ModalityMask) -> Result<LogitTriple> {
        if ep.is_empty() {
            return Err(Error::Validation("no observation to plan from".into()));
        }
        let mut tape = Tape::new(&self.params);
        let outs = self.episode_logits(&mut tape, ep, &[ep.len() - 1], mask)?;
        Ok(outs[0].values(&tape))
    }

    /// Value-level encodings of step `n` with every modality present.
    pub fn encode_inputs(&self, ep: &PreparedEpisode, n: usize) -> Result<ModelInputs> {
        let len = Self::text_len(ep, n, true);
        let mut history = VisualHistory::new(self.config.history_window);
        for k in n.saturating_sub(self.config.history_window)..n {
            history.push(
                self.rgb_encoder.embed(&self.params, ep.frames[k].rgb.clone())?,
                self.bbox_encoder.embed(&self.params, ep.frames[k].bbox.clone())?,
            );
        }
        Ok(ModelInputs {
            current_rgb: self.rgb_encoder.embed(&self.params, ep.frames[n].rgb.clone())?,
            current_bbox: self.bbox_encoder.embed(&self.params, ep.frames[n].bbox.clone())?,
            history,
            instruction: self.text_encoder.embed(&self.params, &ep.instruction_ids[..len])?,
            instruction_valid: token_mask(&ep.instruction_ids[..len]),
            subgoals: self.text_encoder.embed(&self.params, &ep.history_ids[n][..len])?,
            subgoal_valid: token_mask(&ep.history_ids[n][..len]),
        })
    }

    /// Value-level forward from already encoded inputs.
    pub fn logits_from_inputs(&self, inputs: &ModelInputs) -> Result<LogitTriple> {
        let vision = integrate_visual(&inputs.history, (&inputs.current_rgb, &inputs.current_bbox))?;
        let language = integrate_linguistic(&inputs.instruction, &inputs.subgoals)?;
        let valid: Vec<bool> = inputs
            .instruction_valid
            .iter()
            .zip(&inputs.subgoal_valid)
            .map(|(a, b)| *a || *b)
            .collect();
        let mut tape = Tape::new(&self.params);
        let v = tape.constant(vision)?;
        let l = tape.constant(language)?;
        let fused = self.fusion.forward(&mut tape, v, l, &valid)?;
        let out = self.heads.predict_logits(&mut tape, fused.fused)?;
        Ok(out.values(&tape))
    }
}
